#include "cxrfuse/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cxrfuse/errors.hpp"
#include "cxrfuse/metrics.hpp"
#include "cxrfuse/ops.hpp"
#include "cxrfuse/rng.hpp"

namespace cxrfuse {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd-momentum"; }

OptimizerKind optimizer_kind_from_string(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd-momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected adam or sgd-momentum)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be a finite non-negative number");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
  BackbonePreset::by_name(backbone);
  if (meta_features) {
    if (meta_features->width() == 0) throw ConfigError("meta_features selects no fields");
    if (meta_hidden == 0 || meta_out == 0) throw ConfigError("meta_hidden and meta_out must be >= 1");
  }
}

std::optional<MetaBranchConfig> TrainConfig::meta_branch() const {
  if (!meta_features) return std::nullopt;
  return MetaBranchConfig{meta_features->width(), meta_hidden, meta_out};
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"optimizer", to_string(c.optimizer)},
                     {"momentum", c.momentum},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"seed", c.seed},
                     {"uncertainty_policy", to_string(c.policy)},
                     {"backbone", c.backbone},
                     {"meta_features", c.meta_features ? nlohmann::json(*c.meta_features) : nlohmann::json()},
                     {"meta_hidden", c.meta_hidden},
                     {"meta_out", c.meta_out},
                     {"fit_imputation", c.fit_imputation}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known{"epochs", "batch_size", "learning_rate", "optimizer", "momentum",
                                              "beta1", "beta2", "adam_eps", "seed", "uncertainty_policy",
                                              "backbone", "meta_features", "meta_hidden", "meta_out",
                                              "fit_imputation"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("unknown train config key '" + k + "'");
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("optimizer")) c.optimizer = optimizer_kind_from_string(j.at("optimizer").get<std::string>());
    c.momentum = j.value("momentum", c.momentum);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("uncertainty_policy"))
      c.policy = uncertainty_policy_from_string(j.at("uncertainty_policy").get<std::string>());
    c.backbone = j.value("backbone", c.backbone);
    if (j.contains("meta_features")) {
      const auto& m = j.at("meta_features");
      if (m.is_null() || (m.is_string() && (m == "none" || m == "")))
        c.meta_features.reset();
      else
        c.meta_features = m.get<MetaFeatureConfig>();
    }
    c.meta_hidden = j.value("meta_hidden", c.meta_hidden);
    c.meta_out = j.value("meta_out", c.meta_out);
    c.fit_imputation = j.value("fit_imputation", c.fit_imputation);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

Optimizer::Optimizer(const TrainConfig& cfg)
    : kind_(cfg.optimizer),
      lr_(cfg.learning_rate),
      momentum_(cfg.momentum),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps) {}

Optimizer::Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {}

void Optimizer::step(std::span<Tensor> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.shape(), 0.0);
      if (kind_ == OptimizerKind::adam) v_.emplace_back(p.shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ShapeError("optimizer: parameter count changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].values();
    auto g = grads[k].values();
    auto m = m_[k].values();
    if (g.size() != p.size() || m.size() != p.size()) throw ShapeError("optimizer: gradient shape mismatch");
    if (kind_ == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = momentum_ * m[i] + g[i];
        p[i] -= lr_ * m[i];
      }
    } else {
      auto v = v_[k].values();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
      }
    }
  }
}

void Optimizer::step(std::vector<Parameter>& params, std::span<const Tensor> grads) {
  std::vector<Tensor> values;
  values.reserve(params.size());
  for (auto& p : params) values.push_back(std::move(p.value));
  step(std::span<Tensor>(values), grads);
  for (std::size_t k = 0; k < params.size(); ++k) params[k].value = std::move(values[k]);
}

// ---------------------------------------------------------------------------

std::vector<Example> make_examples(std::span<const Sample> samples, const std::optional<MetaFeatureConfig>& features,
                                   UncertaintyPolicy policy) {
  std::vector<Example> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    Example e{s.image, std::nullopt, build_targets(s.states, policy)};
    if (features) e.meta = encode_metadata(s.metadata, *features);
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

std::size_t unmasked(const TargetRow& t) {
  std::size_t n = 0;
  for (double v : t.mask.values()) n += v != 0.0 ? 1 : 0;
  return n;
}

}  // namespace

BatchLoss batch_loss_and_grads(const FusionModel& m, std::span<const Example> batch, std::vector<Tensor>* grads) {
  if (batch.empty()) throw ConfigError("empty batch");
  if (grads) {
    grads->clear();
    for (const auto& p : m.parameters()) grads->emplace_back(p.value.shape(), 0.0);
  }
  std::size_t total = 0;
  for (const auto& e : batch) total += unmasked(e.target);
  BatchLoss out{0.0, total};
  if (total == 0) return out;

  // The pooled mean is sum_i (n_i / N) * mean_i, so each sample's backward pass
  // is seeded with its share n_i / N of the batch.
  for (const auto& e : batch) {
    const std::size_t n = unmasked(e.target);
    if (n == 0) continue;
    const double w = static_cast<double>(n) / static_cast<double>(total);
    Tape tape;
    auto bound = bind(tape, m, grads != nullptr);
    std::optional<Var> meta;
    if (e.meta) meta = tape.constant(*e.meta);
    Var loss = ops::masked_bce(forward(bound, tape.constant(e.image), meta), e.target.target, e.target.mask);
    out.loss += w * loss.value()[0];
    if (!grads) continue;
    if (!std::isfinite(loss.value()[0])) throw DivergenceError("non-finite loss");
    tape.backward(loss, w);
    for (std::size_t k = 0; k < grads->size(); ++k) {
      auto dst = (*grads)[k].values();
      const auto src = bound.params[k].grad().values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  return out;
}

BatchLoss train_step(FusionModel& m, Optimizer& opt, std::span<const Example> batch) {
  std::vector<Tensor> grads;
  BatchLoss l;
  try {
    l = batch_loss_and_grads(m, batch, &grads);
  } catch (const DomainError& e) {
    throw DivergenceError(std::string("non-finite values in the forward or backward pass: ") + e.what());
  }
  if (!std::isfinite(l.loss)) throw DivergenceError("batch loss is not finite");
  opt.step(m.parameters(), grads);
  for (const auto& p : m.parameters())
    if (!p.value.all_finite()) throw DivergenceError("parameter '" + p.name + "' became non-finite");
  return l;
}

// ---------------------------------------------------------------------------

std::string RunLog::to_csv(bool with_time) const {
  std::string out = with_time ? "epoch,train_loss,val_loss,val_macro_auroc,seconds\n"
                              : "epoch,train_loss,val_loss,val_macro_auroc\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,", r.epoch, r.train_loss, r.val_loss);
    out += buf;
    if (r.val_macro_auroc) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.val_macro_auroc);
      out += buf;
    }
    if (with_time) {
      std::snprintf(buf, sizeof buf, ",%.3f", r.seconds);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void RunLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write run log " + path.string());
  f << to_csv();
  if (!f) throw IoError("failed writing run log " + path.string());
}

bool RunLog::same_trajectory(const RunLog& other) const { return to_csv(false) == other.to_csv(false); }

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng(seed, {key_of(Stream::shuffle), epoch});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

FitResult fit(const TrainConfig& cfg, std::span<const Sample> train, std::span<const Sample> val,
              const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training split is empty");
  if (val.empty()) throw ConfigError("validation split is empty");

  std::optional<MetaFeatureConfig> features = cfg.meta_features;
  if (features && cfg.fit_imputation) {
    std::vector<MetadataRecord> meta;
    meta.reserve(train.size());
    for (const auto& s : train) meta.push_back(s.metadata);
    features->fit_imputation(meta);
  }
  const auto train_ex = make_examples(train, features, cfg.policy);
  const auto val_ex = make_examples(val, features, cfg.policy);
  std::vector<TargetRow> val_targets;
  for (const auto& e : val_ex) val_targets.push_back(e.target);

  FusionModel model = FusionModel::build(BackbonePreset::by_name(cfg.backbone), cfg.meta_branch(), cfg.seed);
  Optimizer opt(cfg);

  FitResult result{Checkpoint{model, features, cfg.policy, {}}, 0, std::nullopt, {}};
  std::vector<Example> batch;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = epoch_order(train_ex.size(), cfg.seed, epoch);
    double loss_sum = 0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        batch.push_back(train_ex[order[i]]);
      BatchLoss l;
      try {
        l = train_step(model, opt, batch);
      } catch (const DivergenceError& e) {
        char where[128];
        std::snprintf(where, sizeof where, " (epoch %zu, batch starting at %zu, learning_rate %g)", epoch, start,
                      cfg.learning_rate);
        throw DivergenceError(e.what() + std::string(where));
      }
      loss_sum += l.loss * static_cast<double>(l.count);
      loss_count += l.count;
    }

    std::vector<Tensor> logits;
    logits.reserve(val_ex.size());
    double val_sum = 0;
    std::size_t val_count = 0;
    for (const auto& e : val_ex) {
      try {
        logits.push_back(e.meta ? forward(model, e.image, *e.meta) : forward(model, e.image));
      } catch (const DomainError& err) {
        throw DivergenceError("non-finite activations on validation at epoch " + std::to_string(epoch) + ": " + err.what());
      }
      for (std::size_t p = 0; p < kNumPathologies; ++p)
        if (e.target.mask[p] != 0.0) {
          val_sum += bce_with_logit(logits.back()[p], e.target.target[p]);
          ++val_count;
        }
    }
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    row.val_loss = val_count ? val_sum / static_cast<double>(val_count) : 0.0;
    if (!std::isfinite(row.val_loss)) throw DivergenceError("validation loss is not finite at epoch " + std::to_string(epoch));
    row.val_macro_auroc = evaluate(logits, val_targets).macro;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.rows.push_back(row);
    if (on_epoch) on_epoch(row);

    const bool better = result.best_epoch == 0 ||
                        (row.val_macro_auroc && (!result.best_val_auroc || *row.val_macro_auroc > *result.best_val_auroc));
    if (better) {
      result.best_epoch = epoch;
      result.best_val_auroc = row.val_macro_auroc;
      result.best.model = model;
    }
  }
  result.best.info = nlohmann::json{{"best_epoch", result.best_epoch},
                                    {"best_val_macro_auroc", result.best_val_auroc ? nlohmann::json(*result.best_val_auroc)
                                                                                   : nlohmann::json()},
                                    {"train_config", cfg}};
  return result;
}

}  // namespace cxrfuse
