#include "cxrfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>

#include "cxrfuse/errors.hpp"
#include "cxrfuse/ops.hpp"

namespace cxrfuse {

std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw ShapeError("auroc: " + std::to_string(scores.size()) + " scores but " +
                     std::to_string(labels.size()) + " labels");
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw DomainError("auroc: NaN score at index " + std::to_string(i));
    if (labels[i] != 0 && labels[i] != 1)
      throw DomainError("auroc: label at index " + std::to_string(i) + " is not 0 or 1");
    n_pos += static_cast<std::size_t>(labels[i]);
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Ranks are 1-based; a tie block [i, j) shares rank (i + 1 + j) / 2. Twice the
  // rank sum stays an integer, so the pair count below is exact.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    std::size_t pos_in_block = 0;
    for (std::size_t k = i; k < j; ++k) pos_in_block += static_cast<std::size_t>(labels[order[k]]);
    twice_rank_sum += pos_in_block * (i + 1 + j);
    i = j;
  }
  const std::uint64_t twice_wins = twice_rank_sum - n_pos * (n_pos + 1);
  return (static_cast<double>(twice_wins) * 0.5) / static_cast<double>(n_pos * n_neg);
}

std::optional<double> macro_over(const std::array<PathologyResult, kNumPathologies>& r,
                                 std::span<const std::size_t> which) {
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t p : which)
    if (r[p].auroc) {
      sum += *r[p].auroc;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

namespace {

constexpr std::array<std::size_t, kNumPathologies> kAll{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13};

void check_inputs(std::span<const Tensor> logits, std::span<const TargetRow> targets) {
  if (logits.size() != targets.size())
    throw ShapeError(std::to_string(logits.size()) + " logit rows but " + std::to_string(targets.size()) +
                     " target rows");
  for (const auto& l : logits)
    if (l.size() != kNumPathologies)
      throw ShapeError("logit rows must have " + std::to_string(kNumPathologies) + " entries, got " +
                       shape_string(l.shape()));
}

std::array<PathologyResult, kNumPathologies> per_pathology(std::span<const Tensor> logits,
                                                           std::span<const TargetRow> targets,
                                                           std::span<const std::size_t> rows,
                                                           bool mask_aware) {
  std::array<PathologyResult, kNumPathologies> out{};
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t p = 0; p < kNumPathologies; ++p) {
    scores.clear();
    labels.clear();
    for (std::size_t i : rows) {
      if (mask_aware && targets[i].mask[p] == 0.0) continue;
      scores.push_back(sigmoid(logits[i][p]));
      labels.push_back(targets[i].target[p] != 0.0 ? 1 : 0);
    }
    auto& r = out[p];
    r.n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    r.n_neg = labels.size() - r.n_pos;
    r.auroc = auroc(scores, labels);
  }
  return out;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

}  // namespace

EvalReport evaluate(std::span<const Tensor> logits, std::span<const TargetRow> targets, bool mask_aware) {
  check_inputs(logits, targets);
  if (logits.empty()) throw ConfigError("evaluate: no samples");
  EvalReport r;
  r.n_samples = logits.size();
  r.per_pathology = per_pathology(logits, targets, all_rows(logits.size()), mask_aware);
  r.macro = macro_over(r.per_pathology, kAll);
  r.macro_five = macro_over(r.per_pathology, kHeadlinePathologies);
  return r;
}

GroupBy GroupBy::by_key(std::string_view key) {
  if (key == "age") return GroupBy{"age", {40, 65}};
  if (key == "bmi") return GroupBy{"bmi", {18.5, 25, 30}};
  if (key == "sex" || key == "race" || key == "insurance") return GroupBy{std::string(key), {}};
  throw ConfigError("unknown subgroup key '" + std::string(key) + "' (expected age, sex, bmi, race or insurance)");
}

namespace {

std::string fmt_edge(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::vector<std::string> bin_labels(const std::vector<double>& edges) {
  std::vector<std::string> out;
  double lo = 0;
  for (double e : edges) {
    out.push_back("[" + fmt_edge(lo) + "," + fmt_edge(e) + ")");
    lo = e;
  }
  out.push_back("[" + fmt_edge(lo) + ",inf)");
  return out;
}

std::string numeric_group(double v, const std::vector<double>& edges, const std::vector<std::string>& labels) {
  std::size_t b = 0;
  while (b < edges.size() && v >= edges[b]) ++b;
  return labels[b];
}

}  // namespace

SubgroupSection subgroup_report(std::span<const Tensor> logits, std::span<const TargetRow> targets,
                                std::span<const MetadataRecord> metadata, const GroupBy& group_by,
                                std::size_t min_group_size, bool mask_aware) {
  check_inputs(logits, targets);
  if (metadata.size() != logits.size())
    throw ShapeError(std::to_string(metadata.size()) + " metadata records for " +
                     std::to_string(logits.size()) + " samples");
  if (logits.empty()) throw ConfigError("subgroup_report: no samples");

  const std::string& key = group_by.key;
  const bool numeric = key == "age" || key == "bmi";
  if (!numeric && key != "sex" && key != "race" && key != "insurance")
    throw ConfigError("unknown subgroup key '" + key + "'");
  for (std::size_t i = 0; i < group_by.edges.size(); ++i)
    if (!(group_by.edges[i] > (i == 0 ? 0.0 : group_by.edges[i - 1])))
      throw ConfigError("subgroup bin edges for '" + key + "' must be positive and increasing");
  const auto labels = bin_labels(group_by.edges);

  // Group order: numeric bins in ascending order, categories alphabetically, "missing" last.
  std::vector<std::string> order = numeric ? labels : std::vector<std::string>{};
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < metadata.size(); ++i) {
    const auto& m = metadata[i];
    std::optional<std::string> g;
    if (key == "age" && m.age) g = numeric_group(*m.age, group_by.edges, labels);
    else if (key == "bmi" && m.bmi) g = numeric_group(*m.bmi, group_by.edges, labels);
    else if (key == "sex" && m.sex) g = std::string(to_string(*m.sex));
    else if (key == "race" && m.race) g = *m.race;
    else if (key == "insurance" && m.insurance) g = *m.insurance;
    members[g.value_or("missing")].push_back(i);
  }
  if (!numeric)
    for (const auto& [name, rows] : members)
      if (name != "missing") order.push_back(name);
  if (members.count("missing")) order.push_back("missing");

  SubgroupSection s;
  s.key = key;
  s.min_group_size = min_group_size;
  std::optional<double> lo, hi;
  for (const auto& name : order) {
    GroupResult g;
    g.group = name;
    auto it = members.find(name);
    if (it == members.end()) {
      s.groups.push_back(g);  // empty bin, reported as insufficient
      continue;
    }
    g.n_samples = it->second.size();
    g.sufficient = g.n_samples >= min_group_size;
    if (g.sufficient) {
      g.per_pathology = per_pathology(logits, targets, it->second, mask_aware);
      g.macro = macro_over(g.per_pathology, kAll);
      if (g.macro) {
        lo = lo ? std::min(*lo, *g.macro) : *g.macro;
        hi = hi ? std::max(*hi, *g.macro) : *g.macro;
      }
    }
    s.groups.push_back(std::move(g));
  }
  if (lo) s.max_gap = *hi - *lo;
  return s;
}

std::vector<Tensor> predict(const FusionModel& m, std::span<const Sample> samples,
                            const std::optional<MetaFeatureConfig>& features) {
  const bool fusion = m.mode() == ModelMode::fusion;
  if (fusion && !features) throw ModeError("fusion model needs a metadata feature config");
  if (!fusion && features) throw ModeError("image-only model was given a metadata feature config");
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples)
    out.push_back(fusion ? forward(m, s.image, encode_metadata(s.metadata, *features)) : forward(m, s.image));
  return out;
}

std::vector<TargetRow> targets_of(std::span<const Sample> samples, UncertaintyPolicy policy) {
  std::vector<TargetRow> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(build_targets(s.states, policy));
  return out;
}

EvalReport evaluate_checkpoint(const Checkpoint& c, std::span<const Sample> samples,
                               std::span<const GroupBy> groups, std::size_t min_group_size) {
  if (samples.empty()) throw ConfigError("evaluate: no samples");
  const auto logits = predict(c.model, samples, c.features);
  const auto targets = targets_of(samples, c.policy);
  EvalReport r = evaluate(logits, targets);
  std::vector<MetadataRecord> meta;
  meta.reserve(samples.size());
  for (const auto& s : samples) meta.push_back(s.metadata);
  for (const auto& g : groups) r.subgroups.push_back(subgroup_report(logits, targets, meta, g, min_group_size));
  return r;
}

// ---------------------------------------------------------------------------
// Serialisation

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

nlohmann::json pathologies_json(const std::array<PathologyResult, kNumPathologies>& r) {
  auto a = nlohmann::json::array();
  for (std::size_t p = 0; p < kNumPathologies; ++p)
    a.push_back({{"pathology", kPathologies[p]}, {"auroc", opt(r[p].auroc)}, {"n_pos", r[p].n_pos},
                 {"n_neg", r[p].n_neg}});
  return a;
}

std::array<PathologyResult, kNumPathologies> pathologies_from(const nlohmann::json& a) {
  std::array<PathologyResult, kNumPathologies> r{};
  if (a.size() != kNumPathologies) throw ConfigError("report must list 14 pathologies");
  for (const auto& e : a) {
    const auto p = pathology_index(e.at("pathology").get<std::string>());
    if (!p) throw ConfigError("unknown pathology '" + e.at("pathology").get<std::string>() + "' in report");
    r[*p] = PathologyResult{opt_from(e.at("auroc")), e.at("n_pos").get<std::size_t>(),
                            e.at("n_neg").get<std::size_t>()};
  }
  return r;
}

}  // namespace

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"model", r.model},
                     {"n_samples", r.n_samples},
                     {"macro_auroc", opt(r.macro)},
                     {"macro_auroc_five", opt(r.macro_five)},
                     {"per_pathology", pathologies_json(r.per_pathology)}};
  auto subs = nlohmann::json::array();
  for (const auto& s : r.subgroups) {
    auto groups = nlohmann::json::array();
    for (const auto& g : s.groups) {
      nlohmann::json gj{{"group", g.group},
                        {"n_samples", g.n_samples},
                        {"sufficient", g.sufficient},
                        {"macro_auroc", opt(g.macro)}};
      if (g.sufficient) gj["per_pathology"] = pathologies_json(g.per_pathology);
      groups.push_back(std::move(gj));
    }
    subs.push_back({{"key", s.key}, {"min_group_size", s.min_group_size}, {"max_gap", opt(s.max_gap)},
                    {"groups", groups}});
  }
  j["subgroups"] = subs;
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  try {
    r = EvalReport{};
    r.model = j.value("model", std::string());
    r.n_samples = j.at("n_samples").get<std::size_t>();
    r.macro = opt_from(j.at("macro_auroc"));
    r.macro_five = opt_from(j.at("macro_auroc_five"));
    r.per_pathology = pathologies_from(j.at("per_pathology"));
    for (const auto& sj : j.value("subgroups", nlohmann::json::array())) {
      SubgroupSection s;
      s.key = sj.at("key").get<std::string>();
      s.min_group_size = sj.at("min_group_size").get<std::size_t>();
      s.max_gap = opt_from(sj.at("max_gap"));
      for (const auto& gj : sj.at("groups")) {
        GroupResult g;
        g.group = gj.at("group").get<std::string>();
        g.n_samples = gj.at("n_samples").get<std::size_t>();
        g.sufficient = gj.at("sufficient").get<bool>();
        g.macro = opt_from(gj.at("macro_auroc"));
        if (gj.contains("per_pathology")) g.per_pathology = pathologies_from(gj.at("per_pathology"));
        s.groups.push_back(std::move(g));
      }
      r.subgroups.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed evaluation report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Tables

namespace {

std::string title_case(std::string_view s) {
  std::string out(s);
  bool start = true;
  for (char& c : out) {
    if (start && c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    start = c == ' ';
  }
  return out;
}

std::string fmt_value(const std::optional<double>& v, bool sign = false) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, sign ? "%+.5f" : "%.5f", *v);
  return buf;
}

struct Column {
  std::string header;
  std::function<std::optional<double>(const EvalReport&)> get;
};

std::vector<Column> columns() {
  std::vector<Column> cols{{"Average AUROC (5)", [](const EvalReport& r) { return r.macro_five; }},
                           {"Average AUROC (14)", [](const EvalReport& r) { return r.macro; }}};
  std::vector<std::size_t> order(kHeadlinePathologies.begin(), kHeadlinePathologies.end());
  for (std::size_t p = 0; p < kNumPathologies; ++p)
    if (std::find(order.begin(), order.end(), p) == order.end()) order.push_back(p);
  for (std::size_t p : order)
    cols.push_back({title_case(kPathologies[p]), [p](const EvalReport& r) { return r.per_pathology[p].auroc; }});
  return cols;
}

std::string render(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::string out;
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) line += "  ";
      const std::string pad(width[c] - row[c].size(), ' ');
      line += c == 0 ? row[c] + pad : pad + row[c];
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + '\n';
  }
  return out;
}

}  // namespace

std::string format_table(std::span<const EvalReport> reports) {
  const auto cols = columns();
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"Model"};
  for (const auto& c : cols) header.push_back(c.header);
  rows.push_back(header);
  for (const auto& r : reports) {
    std::vector<std::string> row{r.model.empty() ? "model" : r.model};
    for (const auto& c : cols) row.push_back(fmt_value(c.get(r)));
    rows.push_back(std::move(row));
  }
  return render(rows);
}

namespace {

std::optional<double> diff(const std::optional<double>& a, const std::optional<double>& b) {
  if (!a || !b) return std::nullopt;
  return *b - *a;
}

}  // namespace

nlohmann::json compare_reports(const EvalReport& baseline, const EvalReport& fusion) {
  nlohmann::json j{{"baseline", baseline.model},
                   {"fusion", fusion.model},
                   {"delta_macro_auroc", opt(diff(baseline.macro, fusion.macro))},
                   {"delta_macro_auroc_five", opt(diff(baseline.macro_five, fusion.macro_five))}};
  auto per = nlohmann::json::array();
  for (std::size_t p = 0; p < kNumPathologies; ++p) {
    const auto& a = baseline.per_pathology[p].auroc;
    const auto& b = fusion.per_pathology[p].auroc;
    per.push_back({{"pathology", kPathologies[p]}, {"baseline", opt(a)}, {"fusion", opt(b)},
                   {"delta", opt(diff(a, b))}});
  }
  j["per_pathology"] = per;
  return j;
}

std::string format_comparison(const EvalReport& baseline, const EvalReport& fusion) {
  const auto cols = columns();
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"Model"};
  for (const auto& c : cols) header.push_back(c.header);
  rows.push_back(header);
  for (const EvalReport* r : {&baseline, &fusion}) {
    std::vector<std::string> row{r->model.empty() ? "model" : r->model};
    for (const auto& c : cols) row.push_back(fmt_value(c.get(*r)));
    rows.push_back(std::move(row));
  }
  std::vector<std::string> delta{"delta"};
  for (const auto& c : cols) delta.push_back(fmt_value(diff(c.get(baseline), c.get(fusion)), true));
  rows.push_back(std::move(delta));
  return render(rows);
}

}  // namespace cxrfuse
