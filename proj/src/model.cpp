#include "cxrfuse/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cxrfuse/errors.hpp"
#include "cxrfuse/ops.hpp"
#include "cxrfuse/rng.hpp"

namespace cxrfuse {

namespace {

std::size_t conv_out(std::size_t in, const ConvSpec& c) {
  const std::size_t padded = in + 2 * (c.kernel / 2);
  if (c.kernel > padded) return 0;
  return (padded - c.kernel) / c.stride + 1;
}

StageSpec single(std::size_t channels, std::size_t stride, bool residual = false) {
  return StageSpec{{ConvSpec{channels, 3, stride}}, residual};
}

}  // namespace

std::size_t BackbonePreset::feature_dim() const {
  if (stages.empty() || stages.back().convs.empty()) return 0;
  return stages.back().convs.back().out_channels;
}

void BackbonePreset::validate() const {
  if (in_channels == 0 || image_size == 0) throw ConfigError("backbone '" + name + "': zero input size");
  if (stages.empty()) throw ConfigError("backbone '" + name + "': no stages");
  std::size_t spatial = image_size;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (stages[s].convs.empty())
      throw ConfigError("backbone '" + name + "': stage " + std::to_string(s) + " has no convolutions");
    for (const auto& c : stages[s].convs) {
      if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0)
        throw ConfigError("backbone '" + name + "': conv with zero channels, kernel or stride");
      if (c.kernel % 2 == 0) throw ConfigError("backbone '" + name + "': kernel sizes must be odd");
      spatial = conv_out(spatial, c);
      if (spatial == 0)
        throw ConfigError("backbone '" + name + "': stage " + std::to_string(s) +
                          " shrinks the image below 1 pixel");
    }
  }
}

BackbonePreset BackbonePreset::plain_scaled() {
  return BackbonePreset{"plain-scaled", 1, 32, {single(8, 2), single(16, 2), single(32, 2)}};
}

BackbonePreset BackbonePreset::residual() {
  return BackbonePreset{"residual", 1, 32,
                        {single(8, 2), single(16, 2, true), single(32, 2, true)}};
}

BackbonePreset BackbonePreset::plain_deep() {
  return BackbonePreset{"plain-deep", 1, 32,
                        {single(8, 2), single(16, 2), single(32, 2), single(32, 1)}};
}

const std::vector<std::string>& BackbonePreset::names() {
  static const std::vector<std::string> n{"plain-scaled", "residual", "plain-deep"};
  return n;
}

BackbonePreset BackbonePreset::by_name(std::string_view name) {
  if (name == "plain-scaled") return plain_scaled();
  if (name == "residual") return residual();
  if (name == "plain-deep") return plain_deep();
  throw ConfigError("unknown backbone preset '" + std::string(name) +
                    "' (expected plain-scaled, residual or plain-deep)");
}

std::string_view to_string(ModelMode m) {
  return m == ModelMode::fusion ? "fusion" : "image_only";
}

// ---------------------------------------------------------------------------

FusionModel::FusionModel(BackbonePreset preset, std::optional<MetaBranchConfig> meta)
    : preset_(std::move(preset)), meta_(meta) {
  preset_.validate();
  if (meta_ && (meta_->input_dim == 0 || meta_->hidden_dim == 0 || meta_->output_dim == 0))
    throw ConfigError("metadata branch dimensions must be positive");

  std::size_t cin = preset_.in_channels;
  for (std::size_t s = 0; s < preset_.stages.size(); ++s) {
    const auto& st = preset_.stages[s];
    const std::string p = "stage" + std::to_string(s) + ".";
    for (std::size_t i = 0; i < st.convs.size(); ++i) {
      const auto& c = st.convs[i];
      add(p + "conv" + std::to_string(i) + ".weight", {c.out_channels, cin, c.kernel, c.kernel});
      add(p + "conv" + std::to_string(i) + ".bias", {c.out_channels});
      cin = c.out_channels;
    }
    if (st.residual_block) {
      add(p + "res.conv_a.weight", {cin, cin, 3, 3});
      add(p + "res.conv_a.bias", {cin});
      add(p + "res.conv_b.weight", {cin, cin, 3, 3});
      add(p + "res.conv_b.bias", {cin});
    }
  }
  meta_offset_ = params_.size();
  if (meta_) {
    add("meta.fc1.weight", {meta_->hidden_dim, meta_->input_dim});
    add("meta.fc1.bias", {meta_->hidden_dim});
    add("meta.fc2.weight", {meta_->output_dim, meta_->hidden_dim});
    add("meta.fc2.bias", {meta_->output_dim});
  }
  classifier_offset_ = params_.size();
  add("classifier.weight", {kNumPathologies, classifier_inputs()});
  add("classifier.bias", {kNumPathologies});
}

void FusionModel::add(std::string name, Shape shape) {
  params_.push_back(Parameter{std::move(name), Tensor(std::move(shape), 0.0)});
}

std::size_t FusionModel::classifier_inputs() const {
  return preset_.feature_dim() + (meta_ ? meta_->output_dim : 0);
}

FusionModel FusionModel::build(BackbonePreset preset, std::optional<MetaBranchConfig> meta,
                               std::uint64_t seed) {
  FusionModel m(std::move(preset), meta);
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    auto& p = m.params_[i];
    if (p.value.rank() == 1) continue;  // biases stay zero
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < p.value.rank(); ++d) fan_in *= p.value.dim(d);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    CounterRng rng(seed, {key_of(Stream::init), i});
    for (auto& v : p.value.values()) v = rng.uniform(-bound, bound);
  }
  return m;
}

Parameter& FusionModel::parameter(std::string_view name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw ConfigError("no parameter named '" + std::string(name) + "'");
}

const Parameter& FusionModel::parameter(std::string_view name) const {
  return const_cast<FusionModel*>(this)->parameter(name);
}

std::size_t FusionModel::parameter_count() const { return parameter_count(""); }

std::size_t FusionModel::parameter_count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.name.starts_with(prefix)) n += p.value.size();
  return n;
}

std::uint64_t FusionModel::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_)
    for (double v : p.value.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    }
  return h;
}

// ---------------------------------------------------------------------------
// Forward

BoundModel bind(Tape& tape, const FusionModel& model, bool trainable) {
  BoundModel b{&model, {}};
  b.params.reserve(model.parameters().size());
  for (const auto& p : model.parameters())
    b.params.push_back(trainable ? tape.variable(p.value) : tape.constant(p.value));
  return b;
}

Var forward_image_branch(const BoundModel& m, Var image) {
  const auto& preset = m.model->preset();
  const Shape expect{preset.in_channels, preset.image_size, preset.image_size};
  if (image.shape() != expect)
    throw ShapeError("image branch expects " + shape_string(expect) + ", got " +
                     shape_string(image.shape()));
  std::size_t k = 0;
  Var x = image;
  for (const auto& st : preset.stages) {
    for (const auto& c : st.convs) {
      x = ops::relu(ops::conv2d(x, m.params[k], m.params[k + 1], c.stride, c.kernel / 2));
      k += 2;
    }
    if (st.residual_block) {
      Var h = ops::relu(ops::conv2d(x, m.params[k], m.params[k + 1], 1, 1));
      h = ops::conv2d(h, m.params[k + 2], m.params[k + 3], 1, 1);
      x = ops::relu(ops::add(x, h));
      k += 4;
    }
  }
  return ops::global_avg_pool(x);
}

Var forward_meta_branch(const BoundModel& m, Var meta) {
  const auto& cfg = m.model->meta_config();
  if (!cfg) throw ModeError("metadata branch requested from an image-only model");
  if (meta.shape() != Shape{cfg->input_dim})
    throw ShapeError("metadata branch expects [" + std::to_string(cfg->input_dim) + "], got " +
                     shape_string(meta.shape()));
  const std::size_t k = m.model->meta_offset();
  Var h = ops::swish(ops::affine(meta, m.params[k], m.params[k + 1]));
  return ops::swish(ops::affine(h, m.params[k + 2], m.params[k + 3]));
}

Var forward(const BoundModel& m, Var image, std::optional<Var> meta) {
  const bool fusion = m.model->mode() == ModelMode::fusion;
  if (fusion && !meta) throw ModeError("fusion model needs a metadata vector");
  if (!fusion && meta) throw ModeError("image-only model was given a metadata vector");
  Var features = forward_image_branch(m, image);
  if (meta) features = ops::concat(features, forward_meta_branch(m, *meta));
  const std::size_t k = m.model->classifier_offset();
  return ops::affine(features, m.params[k], m.params[k + 1]);
}

Tensor forward_image_branch(const FusionModel& m, const Tensor& image) {
  Tape t;
  auto b = bind(t, m, false);
  return forward_image_branch(b, t.constant(image)).value();
}

Tensor forward_meta_branch(const FusionModel& m, const Tensor& meta) {
  Tape t;
  auto b = bind(t, m, false);
  return forward_meta_branch(b, t.constant(meta)).value();
}

Tensor forward(const FusionModel& m, const Tensor& image) {
  Tape t;
  auto b = bind(t, m, false);
  return forward(b, t.constant(image), std::nullopt).value();
}

Tensor forward(const FusionModel& m, const Tensor& image, const Tensor& meta) {
  Tape t;
  auto b = bind(t, m, false);
  return forward(b, t.constant(image), t.constant(meta)).value();
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const BackbonePreset& p) {
  j = nlohmann::json{{"name", p.name}, {"in_channels", p.in_channels}, {"image_size", p.image_size}};
  auto stages = nlohmann::json::array();
  for (const auto& s : p.stages) {
    auto convs = nlohmann::json::array();
    for (const auto& c : s.convs)
      convs.push_back({{"out_channels", c.out_channels}, {"kernel", c.kernel}, {"stride", c.stride}});
    stages.push_back({{"convs", convs}, {"residual_block", s.residual_block}});
  }
  j["stages"] = stages;
}

void from_json(const nlohmann::json& j, BackbonePreset& p) {
  try {
    if (j.is_string()) {
      p = BackbonePreset::by_name(j.get<std::string>());
      return;
    }
    p = BackbonePreset{};
    p.name = j.value("name", std::string("custom"));
    p.in_channels = j.value("in_channels", std::size_t{1});
    p.image_size = j.value("image_size", std::size_t{32});
    for (const auto& s : j.at("stages")) {
      StageSpec st;
      st.residual_block = s.value("residual_block", false);
      for (const auto& c : s.at("convs"))
        st.convs.push_back(ConvSpec{c.at("out_channels").get<std::size_t>(),
                                    c.value("kernel", std::size_t{3}),
                                    c.value("stride", std::size_t{1})});
      p.stages.push_back(std::move(st));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad backbone description: ") + e.what());
  }
  p.validate();
}

void to_json(nlohmann::json& j, const MetaBranchConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim}, {"hidden_dim", c.hidden_dim}, {"output_dim", c.output_dim}};
}

void from_json(const nlohmann::json& j, MetaBranchConfig& c) {
  try {
    c.input_dim = j.value("input_dim", std::size_t{3});
    c.hidden_dim = j.value("hidden_dim", std::size_t{12});
    c.output_dim = j.value("output_dim", std::size_t{8});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad metadata branch description: ") + e.what());
  }
}

nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = "cxrfuse-checkpoint";
  j["version"] = kCheckpointVersion;
  j["mode"] = to_string(c.model.mode());
  j["backbone"] = c.model.preset();
  j["meta_branch"] = c.model.meta_config() ? nlohmann::json(*c.model.meta_config()) : nlohmann::json();
  j["meta_features"] = c.features ? nlohmann::json(*c.features) : nlohmann::json();
  j["uncertainty_policy"] = to_string(c.policy);
  j["info"] = c.info.is_null() ? nlohmann::json::object() : c.info;
  auto params = nlohmann::json::array();
  for (const auto& p : c.model.parameters())
    params.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"values", p.value.values()}});
  j["parameters"] = params;
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string()) != "cxrfuse-checkpoint")
      throw ConfigError("not a checkpoint file");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw ConfigError("unsupported checkpoint version " + j.at("version").dump());
    std::optional<MetaBranchConfig> meta;
    if (!j.at("meta_branch").is_null()) meta = j.at("meta_branch").get<MetaBranchConfig>();
    Checkpoint c{FusionModel(j.at("backbone").get<BackbonePreset>(), meta), std::nullopt,
                 uncertainty_policy_from_string(j.at("uncertainty_policy").get<std::string>()),
                 j.value("info", nlohmann::json::object())};
    if (!j.at("meta_features").is_null()) c.features = j.at("meta_features").get<MetaFeatureConfig>();
    if (c.features && meta && c.features->width() != meta->input_dim)
      throw ConfigError("checkpoint metadata features have width " + std::to_string(c.features->width()) +
                        " but the metadata branch expects " + std::to_string(meta->input_dim));

    const auto& params = j.at("parameters");
    auto& dst = c.model.parameters();
    if (params.size() != dst.size())
      throw ConfigError("checkpoint has " + std::to_string(params.size()) + " parameters, model expects " +
                        std::to_string(dst.size()));
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const auto& p = params[i];
      if (p.at("name").get<std::string>() != dst[i].name)
        throw ConfigError("checkpoint parameter " + std::to_string(i) + " is '" +
                          p.at("name").get<std::string>() + "', expected '" + dst[i].name + "'");
      auto shape = p.at("shape").get<Shape>();
      if (shape != dst[i].value.shape())
        throw ConfigError("checkpoint parameter '" + dst[i].name + "' has shape " + shape_string(shape) +
                          ", expected " + shape_string(dst[i].value.shape()));
      dst[i].value = Tensor(std::move(shape), p.at("values").get<std::vector<double>>());
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(c).dump() << '\n';
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace cxrfuse
