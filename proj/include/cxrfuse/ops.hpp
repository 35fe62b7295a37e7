#pragma once

#include <cstddef>
#include <functional>

#include "cxrfuse/autodiff.hpp"
#include "cxrfuse/tensor.hpp"

namespace cxrfuse {

double sigmoid(double x);
/// x * sigmoid(x)
double swish(double x);
/// Binary cross entropy of logit z against target t, in the overflow-free
/// form max(z,0) - z*t + log(1 + exp(-|z|)).
double bce_with_logit(double z, double t);

namespace ops {

/// Elementwise x * sigmoid(x). Non-finite input raises DomainError.
Var swish(Var x);
Var relu(Var x);
/// Elementwise sum of two same-shaped tensors.
Var add(Var a, Var b);
/// Sum of all elements, as a one-element tensor.
Var sum(Var x);
/// Same values viewed as rank 1.
Var flatten(Var x);

/// y = W x + b with x [n_in], W [n_out x n_in], b [n_out].
Var affine(Var x, Var weight, Var bias);

/// Zero-padded 2-D convolution (cross-correlation).
/// x [C_in x H x W], kernel [C_out x C_in x k x k] -> [C_out x H' x W'] with
/// H' = (H + 2*pad - k) / stride + 1.
Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t pad);
/// As above with a per-output-channel bias [C_out].
Var conv2d(Var x, Var kernel, Var bias, std::size_t stride, std::size_t pad);

/// Per-channel mean: [C x H x W] -> [C].
Var global_avg_pool(Var x);

/// Joins two rank-1 tensors end to end.
Var concat(Var a, Var b);

/// Mean binary cross entropy over entries with mask == 1. Targets and mask
/// must be 0/1 valued. Returns 0 with zero gradient when nothing is unmasked.
Var masked_bce(Var logits, const Tensor& targets, const Tensor& mask);

}  // namespace ops

/// Central-difference gradient of f at x: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps = 1e-5);

}  // namespace cxrfuse
