#include "cxrfuse/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cxrfuse/errors.hpp"
#include "cxrfuse/ops.hpp"
#include "cxrfuse/rng.hpp"

namespace cxrfuse {

namespace fs = std::filesystem;

std::string_view to_string(View v) { return v == View::frontal ? "frontal" : "lateral"; }

View view_from_string(std::string_view s) {
  if (s == "frontal") return View::frontal;
  if (s == "lateral") return View::lateral;
  throw DomainError("unknown view '" + std::string(s) + "'");
}

namespace {

void check_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw ConfigError(std::string(name) + " must be in [0, 1], got " + std::to_string(v));
  }
}

}  // namespace

void SynthConfig::validate() const {
  if (n_patients == 0) throw ConfigError("n_patients must be >= 1");
  if (images_per_patient == 0) throw ConfigError("images_per_patient must be >= 1");
  check_unit(ambiguity_fraction, "ambiguity_fraction");
  if (ambiguity_female) check_unit(*ambiguity_female, "ambiguity_female");
  if (ambiguity_male) check_unit(*ambiguity_male, "ambiguity_male");
  check_unit(ambiguous_strength_scale, "ambiguous_strength_scale");
  check_unit(not_mentioned_rate, "not_mentioned_rate");
  check_unit(uncertain_rate, "uncertain_rate");
  check_unit(lateral_fraction, "lateral_fraction");
  if (!(noise_sd >= 0.0 && std::isfinite(noise_sd))) throw ConfigError("noise_sd must be >= 0");
  for (std::size_t p = 0; p < kNumPathologies; ++p) {
    const auto& s = signals[p];
    check_unit(s.pattern_strength, "pattern_strength");
    for (double b : {s.beta_age, s.beta_sex, s.beta_bmi, s.intercept}) {
      if (!std::isfinite(b)) throw ConfigError("non-finite signal coefficient for " + std::string(kPathologies[p]));
    }
  }
}

void to_json(nlohmann::json& j, const PathologySignal& s) {
  j = nlohmann::json{{"pattern_strength", s.pattern_strength},
                     {"beta_age", s.beta_age},
                     {"beta_sex", s.beta_sex},
                     {"beta_bmi", s.beta_bmi},
                     {"intercept", s.intercept}};
}

void from_json(const nlohmann::json& j, PathologySignal& s) {
  s.pattern_strength = j.value("pattern_strength", s.pattern_strength);
  s.beta_age = j.value("beta_age", s.beta_age);
  s.beta_sex = j.value("beta_sex", s.beta_sex);
  s.beta_bmi = j.value("beta_bmi", s.beta_bmi);
  s.intercept = j.value("intercept", s.intercept);
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"n_patients", c.n_patients},
                     {"images_per_patient", c.images_per_patient},
                     {"seed", c.seed},
                     {"ambiguity_fraction", c.ambiguity_fraction},
                     {"ambiguous_strength_scale", c.ambiguous_strength_scale},
                     {"not_mentioned_rate", c.not_mentioned_rate},
                     {"uncertain_rate", c.uncertain_rate},
                     {"noise_sd", c.noise_sd},
                     {"lateral_fraction", c.lateral_fraction}};
  if (c.ambiguity_female) j["ambiguity_female"] = *c.ambiguity_female;
  if (c.ambiguity_male) j["ambiguity_male"] = *c.ambiguity_male;
  nlohmann::json sig = nlohmann::json::object();
  for (std::size_t p = 0; p < kNumPathologies; ++p) sig[std::string(kPathologies[p])] = c.signals[p];
  j["signals"] = sig;
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.n_patients = j.value("n_patients", c.n_patients);
  c.images_per_patient = j.value("images_per_patient", c.images_per_patient);
  c.seed = j.value("seed", c.seed);
  c.ambiguity_fraction = j.value("ambiguity_fraction", c.ambiguity_fraction);
  if (j.contains("ambiguity_female")) c.ambiguity_female = j.at("ambiguity_female").get<double>();
  if (j.contains("ambiguity_male")) c.ambiguity_male = j.at("ambiguity_male").get<double>();
  c.ambiguous_strength_scale = j.value("ambiguous_strength_scale", c.ambiguous_strength_scale);
  c.not_mentioned_rate = j.value("not_mentioned_rate", c.not_mentioned_rate);
  c.uncertain_rate = j.value("uncertain_rate", c.uncertain_rate);
  c.noise_sd = j.value("noise_sd", c.noise_sd);
  c.lateral_fraction = j.value("lateral_fraction", c.lateral_fraction);
  if (j.contains("default_signal")) {
    PathologySignal d = c.signals[0];
    j.at("default_signal").get_to(d);
    c.signals.fill(d);
  }
  if (j.contains("signals")) {
    const auto& s = j.at("signals");
    if (s.is_array()) {
      if (s.size() != kNumPathologies) throw ConfigError("signals list must have 14 entries");
      for (std::size_t p = 0; p < kNumPathologies; ++p) s[p].get_to(c.signals[p]);
    } else {
      for (const auto& [name, v] : s.items()) {
        const auto idx = pathology_index(name);
        if (!idx) throw ConfigError("signals names unknown pathology '" + name + "'");
        v.get_to(c.signals[*idx]);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Patterns: pathology p owns the 8x8 cell at (p / 4, p % 4); drawing stays in
// the cell's inner 6x6 area so no two patterns share a pixel.

namespace {

bool pattern_pixel(std::size_t p, int y, int x) {
  const bool inner = x >= 1 && x <= 6 && y >= 1 && y <= 6;
  if (!inner) return false;
  const double dx = x - 3.5, dy = y - 3.5, r = std::sqrt(dx * dx + dy * dy);
  switch (p) {
    case 0: return y == 4;                                   // atelectasis: plate-like line
    case 1: return r <= 2.6;                                 // cardiomegaly: large disc
    case 2: return x >= 2 && x <= 5 && y >= 2 && y <= 5;     // consolidation: dense block
    case 3: return x % 2 == 1;                               // edema: interstitial stripes
    case 4: return x == 3 || x == 4;                         // mediastinum: wide vertical bar
    case 5: return x == y;                                   // fracture: diagonal
    case 6: return (x == 3 || x == 4) && (y == 3 || y == 4); // lung lesion: small nodule
    case 7: return (x + y) % 2 == 0;                         // lung opacity: mottled haze
    case 8: return y >= 5;                                   // pleural effusion: basal layer
    case 9: return x == 1 || x == 6 || y == 1 || y == 6;     // pleural other: rim
    case 10: return x == 3 || y == 3;                        // pneumonia: cross
    case 11: return std::abs(r - 2.5) < 0.6;                 // pneumothorax: ring
    case 12: return x == 1 || y == 6;                        // support devices: tube L
    case 13: return x + y == 7;                              // no finding: anti-diagonal
    default: return false;
  }
}

}  // namespace

std::pair<std::size_t, std::size_t> pattern_peak(std::size_t pathology) {
  const std::size_t cy = (pathology / 4) * 8, cx = (pathology % 4) * 8;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      if (pattern_pixel(pathology, y, x)) return {cy + y, cx + x};
  throw Error("pattern has no pixels");
}

Tensor pattern_image(std::size_t pathology) {
  Tensor img({1, kImageSize, kImageSize}, 0.0);
  const std::size_t cy = (pathology / 4) * 8, cx = (pathology % 4) * 8;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      if (pattern_pixel(pathology, y, x)) img.at(0, cy + y, cx + x) = 1.0;
  return img;
}

// ---------------------------------------------------------------------------

namespace {

constexpr double kBackground = 0.1;

const std::array<std::pair<const char*, double>, 5> kRaces = {
    {{"white", 0.6}, {"black", 0.15}, {"asian", 0.1}, {"hispanic", 0.1}, {"other", 0.05}}};
const std::array<std::pair<const char*, double>, 3> kInsurance = {
    {{"medicare", 0.4}, {"medicaid", 0.2}, {"private", 0.4}}};

template <std::size_t N>
std::string pick(CounterRng& rng, const std::array<std::pair<const char*, double>, N>& table) {
  const double u = rng.uniform();
  double acc = 0;
  for (const auto& [name, p] : table) {
    acc += p;
    if (u < acc) return name;
  }
  return table.back().first;
}

}  // namespace

GeneratedData generate_with_truth(const SynthConfig& cfg) {
  cfg.validate();
  GeneratedData out;
  const std::uint64_t seed = cfg.seed;
  std::array<Tensor, kNumPathologies> patterns;
  for (std::size_t p = 0; p < kNumPathologies; ++p) patterns[p] = pattern_image(p);

  for (std::uint64_t pid = 0; pid < cfg.n_patients; ++pid) {
    CounterRng demo(seed, {key_of(Stream::demographics), pid});
    MetadataRecord meta;
    meta.age = demo.uniform(18.0, 95.0);
    meta.sex = demo.bernoulli(0.5) ? Sex::male : Sex::female;
    meta.bmi = std::clamp(demo.normal(27.0, 5.0), 15.0, 50.0);
    meta.race = pick(demo, kRaces);
    meta.insurance = pick(demo, kInsurance);

    const double age_c = (*meta.age - 56.5) / 22.2;
    const double sex_c = *meta.sex == Sex::male ? 1.0 : -1.0;
    const double bmi_c = (*meta.bmi - 27.0) / 5.0;
    double ambiguity = cfg.ambiguity_fraction;
    if (*meta.sex == Sex::female && cfg.ambiguity_female) ambiguity = *cfg.ambiguity_female;
    if (*meta.sex == Sex::male && cfg.ambiguity_male) ambiguity = *cfg.ambiguity_male;

    for (std::uint64_t img = 0; img < cfg.images_per_patient; ++img) {
      Sample s;
      s.patient_id = "p" + std::to_string(pid);
      s.sample_id = s.patient_id + "_i" + std::to_string(img);
      s.metadata = meta;
      CounterRng view_rng(seed, {key_of(Stream::view), pid, img});
      s.view = view_rng.bernoulli(cfg.lateral_fraction) ? View::lateral : View::frontal;

      SampleTruth truth;
      Tensor& image = s.image;
      image.fill(kBackground);
      for (std::size_t p = 0; p < kNumPathologies; ++p) {
        const auto& sig = cfg.signals[p];
        CounterRng label_rng(seed, {key_of(Stream::label), pid, img, p});
        CounterRng ambiguity_rng(seed, {key_of(Stream::ambiguity), pid, img, p});
        CounterRng state_rng(seed, {key_of(Stream::state), pid, img, p});
        const double logit = sig.intercept + sig.beta_age * age_c + sig.beta_sex * sex_c + sig.beta_bmi * bmi_c;
        truth.label[p] = label_rng.bernoulli(sigmoid(logit));
        truth.ambiguous[p] = ambiguity_rng.bernoulli(ambiguity);
        if (truth.label[p]) {
          const double strength = sig.pattern_strength * (truth.ambiguous[p] ? cfg.ambiguous_strength_scale : 1.0);
          for (std::size_t i = 0; i < image.size(); ++i) image[i] += strength * patterns[p][i];
        }
        LabelState st = truth.label[p] ? LabelState::positive : LabelState::negative;
        if (state_rng.bernoulli(cfg.not_mentioned_rate)) st = LabelState::not_mentioned;
        else if (state_rng.bernoulli(cfg.uncertain_rate)) st = LabelState::uncertain;
        s.states[p] = st;
      }
      CounterRng noise(seed, {key_of(Stream::noise), pid, img});
      for (double& v : image.values()) {
        if (cfg.noise_sd > 0) v += noise.normal(0.0, cfg.noise_sd);
        v = std::clamp(v, 0.0, 1.0);
      }
      out.samples.push_back(std::move(s));
      out.truth.push_back(truth);
    }
  }
  return out;
}

std::vector<Sample> generate(const SynthConfig& cfg) { return generate_with_truth(cfg).samples; }

// ---------------------------------------------------------------------------

void write_pgm(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError("write_pgm expects a [1 x H x W] image, got " + shape_string(image.shape()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.dim(2) << " " << image.dim(1) << "\n65535\n";
  std::string buf;
  buf.reserve(image.size() * 2);
  for (double v : image.values()) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    buf.push_back(static_cast<char>(q >> 8));
    buf.push_back(static_cast<char>(q & 0xFF));
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto next_field = [&]() -> long {
    std::string tok;
    while (tok.empty()) {
      int c = in.get();
      if (c == EOF) throw IoError("truncated PGM header in " + path.string());
      if (c == '#') {
        std::string comment;
        std::getline(in, comment);
        continue;
      }
      while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
      }
    }
    try {
      return std::stol(tok);
    } catch (...) {
      throw IoError("bad PGM header field '" + tok + "' in " + path.string());
    }
  };
  char magic[2];
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5') throw IoError("not a binary PGM: " + path.string());
  const long w = next_field(), h = next_field(), maxval = next_field();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw IoError("bad PGM header in " + path.string());
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::string buf(static_cast<std::size_t>(w * h) * bytes, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw IoError("truncated PGM data in " + path.string());
  Tensor img({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t i = 0; i < img.size(); ++i) {
    unsigned v = static_cast<unsigned char>(buf[i * bytes]);
    if (bytes == 2) v = (v << 8) | static_cast<unsigned char>(buf[i * 2 + 1]);
    img[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

namespace {

template <typename T>
nlohmann::json opt(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

void write_manifest(const std::vector<Sample>& samples, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  std::ofstream out(dir / kManifestName, std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / kManifestName).string());
  std::set<std::string> seen;
  for (const auto& s : samples) {
    if (!seen.insert(s.sample_id).second) throw IoError("duplicate sample_id " + s.sample_id);
    const std::string rel = "images/" + s.sample_id + ".pgm";
    write_pgm(dir / rel, s.image);
    nlohmann::json states = nlohmann::json::array();
    for (auto st : s.states) states.push_back(to_string(st));
    const auto& m = s.metadata;
    nlohmann::json rec = {{"sample_id", s.sample_id},
                          {"patient_id", s.patient_id},
                          {"image_path", rel},
                          {"view", to_string(s.view)},
                          {"age", opt(m.age)},
                          {"sex", m.sex ? nlohmann::json(to_string(*m.sex)) : nlohmann::json(nullptr)},
                          {"race", opt(m.race)},
                          {"bmi", opt(m.bmi)},
                          {"insurance", opt(m.insurance)},
                          {"states", states}};
    out << rec.dump() << "\n";
  }
  if (!out) throw IoError("failed writing manifest in " + dir.string());
}

std::vector<Sample> read_manifest(const fs::path& dir) {
  const fs::path path = fs::is_directory(dir) ? dir / kManifestName : dir;
  const fs::path base = path.parent_path();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<Sample> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string sid = "<line " + std::to_string(lineno) + ">";
    try {
      const auto rec = nlohmann::json::parse(line);
      if (rec.contains("sample_id")) sid = rec.at("sample_id").get<std::string>();
      Sample s;
      s.sample_id = sid;
      s.patient_id = rec.at("patient_id").get<std::string>();
      s.view = view_from_string(rec.value("view", std::string("frontal")));
      auto num = [&](const char* key) -> std::optional<double> {
        if (!rec.contains(key) || rec.at(key).is_null()) return std::nullopt;
        return rec.at(key).get<double>();
      };
      auto str = [&](const char* key) -> std::optional<std::string> {
        if (!rec.contains(key) || rec.at(key).is_null()) return std::nullopt;
        return rec.at(key).get<std::string>();
      };
      s.metadata.age = num("age");
      s.metadata.bmi = num("bmi");
      if (auto sx = str("sex")) s.metadata.sex = sex_from_string(*sx);
      s.metadata.race = str("race");
      s.metadata.insurance = str("insurance");
      s.metadata.validate();
      const auto& st = rec.at("states");
      if (st.size() != kNumPathologies) throw ShapeError("states must have 14 entries");
      for (std::size_t p = 0; p < kNumPathologies; ++p) s.states[p] = label_state_from_string(st[p].get<std::string>());
      const fs::path img = base / rec.at("image_path").get<std::string>();
      if (!fs::exists(img)) throw IoError("missing image " + img.string());
      s.image = read_pgm(img);
      samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("manifest " + path.string() + " sample " + sid + ": " + e.what());
    } catch (const Error& e) {
      throw IoError("manifest " + path.string() + " sample " + sid + ": " + e.what());
    }
  }
  return samples;
}

// ---------------------------------------------------------------------------

DatasetSplit split_by_patient(const std::vector<Sample>& samples, const SplitFractions& f,
                              std::uint64_t seed) {
  for (double v : {f.train, f.val, f.test}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("split fractions must be non-negative");
  }
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  std::set<std::string> patients;
  for (const auto& s : samples) patients.insert(s.patient_id);
  const int non_empty = (f.train > 0) + (f.val > 0) + (f.test > 0);
  if (patients.size() < static_cast<std::size_t>(non_empty)) {
    throw ConfigError("cannot fill " + std::to_string(non_empty) + " splits from " +
                      std::to_string(patients.size()) + " patients");
  }
  DatasetSplit out;
  for (const auto& s : samples) {
    CounterRng rng(seed, {key_of(Stream::split), fnv1a64(s.patient_id)});
    const double u = rng.uniform();
    if (u < f.train) out.train.push_back(s);
    else if (u < f.train + f.val || f.test == 0) out.val.push_back(s);
    else out.test.push_back(s);
  }
  return out;
}

std::vector<Sample> filter_frontal(const std::vector<Sample>& samples) {
  std::vector<Sample> out;
  std::copy_if(samples.begin(), samples.end(), std::back_inserter(out),
               [](const Sample& s) { return s.view == View::frontal; });
  return out;
}

}  // namespace cxrfuse
