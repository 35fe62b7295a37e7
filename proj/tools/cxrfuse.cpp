// Command-line entry point: gen-data, label, train, eval, sweep, report.
// Every command takes an optional JSON config (--config) whose values are
// overridden by flags, and writes the effective config next to its outputs.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cxrfuse/data.hpp"
#include "cxrfuse/errors.hpp"
#include "cxrfuse/metrics.hpp"
#include "cxrfuse/report_labeler.hpp"
#include "cxrfuse/sweep.hpp"
#include "cxrfuse/train.hpp"

#ifndef CXRFUSE_DATA_DIR
#define CXRFUSE_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cxrfuse;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kDivergence = 4 };

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void echo_config(const fs::path& out_dir, const json& effective) {
  write_text(out_dir / "effective_config.json", effective.dump(2) + "\n");
}

/// Config file contents (or {}) with `section` selected when present.
json file_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j = load_json(path);
  if (!j.is_object()) throw ConfigError(path + ": top level must be a JSON object");
  return j;
}

template <typename T>
void set_if(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

// ---------------------------------------------------------------------------
// Dataset section shared by train, eval and sweep:
//   "dataset": {"dir": ..., "frontal_only": true,
//               "split": {"train": 0.7, "val": 0.1, "test": 0.2, "seed": 0}}

struct DatasetSpec {
  std::string dir;
  bool frontal_only = true;
  SplitFractions fractions;
  std::uint64_t split_seed = 0;

  json to_json() const {
    return json{{"dir", dir},
                {"frontal_only", frontal_only},
                {"split", {{"train", fractions.train}, {"val", fractions.val}, {"test", fractions.test}, {"seed", split_seed}}}};
  }

  static DatasetSpec from_json(const json& j) {
    DatasetSpec d;
    try {
      d.dir = j.value("dir", std::string());
      d.frontal_only = j.value("frontal_only", true);
      if (j.contains("split")) {
        const auto& s = j.at("split");
        d.fractions = SplitFractions{s.value("train", 0.7), s.value("val", 0.1), s.value("test", 0.2)};
        d.split_seed = s.value("seed", std::uint64_t{0});
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad dataset section: ") + e.what());
    }
    if (d.dir.empty()) throw ConfigError("no dataset directory given (--data or dataset.dir)");
    return d;
  }

  DatasetSplit load() const {
    auto samples = read_manifest(dir);
    if (frontal_only) samples = filter_frontal(samples);
    return split_by_patient(samples, fractions, split_seed);
  }
};

struct DatasetFlags {
  std::optional<std::string> dir;
  std::optional<std::uint64_t> split_seed;
  std::optional<bool> frontal_only;

  void add(CLI::App* app) {
    app->add_option("--data", dir, "Dataset directory holding manifest.jsonl");
    app->add_option("--split-seed", split_seed, "Seed of the patient-level split");
    app->add_option("--frontal-only", frontal_only, "Keep only frontal views (true/false)");
  }

  void apply(json& dataset) const {
    if (!dataset.is_object()) dataset = json::object();
    set_if(dataset, "dir", dir);
    set_if(dataset, "frontal_only", frontal_only);
    if (split_seed) dataset["split"]["seed"] = *split_seed;
  }
};

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string config, out;
  std::optional<std::size_t> n_patients, images_per_patient;
  std::optional<std::uint64_t> seed;
  std::optional<double> ambiguity_fraction, not_mentioned_rate, uncertain_rate, noise_sd, lateral_fraction,
      ambiguous_strength_scale;
};

int gen_data(const GenDataArgs& a) {
  json j = file_config(a.config);
  if (j.contains("data")) j = j.at("data");
  set_if(j, "n_patients", a.n_patients);
  set_if(j, "images_per_patient", a.images_per_patient);
  set_if(j, "seed", a.seed);
  set_if(j, "ambiguity_fraction", a.ambiguity_fraction);
  set_if(j, "not_mentioned_rate", a.not_mentioned_rate);
  set_if(j, "uncertain_rate", a.uncertain_rate);
  set_if(j, "noise_sd", a.noise_sd);
  set_if(j, "lateral_fraction", a.lateral_fraction);
  set_if(j, "ambiguous_strength_scale", a.ambiguous_strength_scale);
  SynthConfig cfg;
  try {
    cfg = j.get<SynthConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad data config: ") + e.what());
  }
  cfg.validate();
  make_dir(a.out);
  const auto samples = generate(cfg);
  write_manifest(samples, a.out);
  echo_config(a.out, json{{"command", "gen-data"}, {"data", cfg}});
  std::printf("wrote %zu samples from %zu patients to %s\n", samples.size(), cfg.n_patients, a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------
// label

struct LabelArgs {
  std::string input, out, lexicon = std::string(CXRFUSE_DATA_DIR) + "/lexicon.json";
};

std::string states_line(const std::string& id, const LabelStates& s) {
  std::string line = "{\"id\": " + json(id).dump() + ", \"states\": [";
  for (std::size_t p = 0; p < s.size(); ++p) line += (p ? ", \"" : "\"") + std::string(to_string(s[p])) + "\"";
  return line + "]}\n";
}

int label(const LabelArgs& a) {
  const auto lex = MentionLexicon::load(a.lexicon);
  std::vector<std::pair<std::string, std::string>> docs;
  if (fs::is_directory(a.input)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.input))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream in(f, std::ios::binary);
      if (!in) throw IoError("cannot read " + f.string());
      docs.emplace_back(f.stem().string(), std::string(std::istreambuf_iterator<char>(in), {}));
    }
  } else {
    std::ifstream in(a.input);
    if (!in) throw IoError("cannot read " + a.input);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const json r = json::parse(line);
        docs.emplace_back(r.at("id").get<std::string>(), r.at("text").get<std::string>());
      } catch (const json::exception& e) {
        throw ConfigError(a.input + " line " + std::to_string(n) + ": expected {\"id\", \"text\"}: " + e.what());
      }
    }
  }
  make_dir(a.out);
  std::string out;
  for (const auto& [id, text] : docs) out += states_line(id, label_report(text, lex));
  write_text(fs::path(a.out) / "labels.jsonl", out);
  echo_config(a.out, json{{"command", "label"}, {"input", a.input}, {"lexicon", a.lexicon}});
  std::printf("labelled %zu reports into %s\n", docs.size(), (fs::path(a.out) / "labels.jsonl").c_str());
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config, out;
  DatasetFlags dataset;
  std::optional<std::size_t> epochs, batch_size, meta_hidden, meta_out;
  std::optional<double> learning_rate;
  std::optional<std::string> optimizer, backbone, meta_features, policy;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

void add_train_flags(CLI::App* app, TrainArgs& a) {
  app->add_option("--epochs", a.epochs, "Training epochs");
  app->add_option("--batch-size", a.batch_size, "Mini-batch size");
  app->add_option("--learning-rate", a.learning_rate, "Learning rate");
  app->add_option("--optimizer", a.optimizer, "adam or sgd-momentum");
  app->add_option("--backbone", a.backbone, "plain-scaled, residual or plain-deep");
  app->add_option("--meta-features", a.meta_features, "Metadata fields, e.g. age,sex,bmi; 'none' for image-only");
  app->add_option("--meta-hidden", a.meta_hidden, "Metadata MLP hidden width");
  app->add_option("--meta-out", a.meta_out, "Metadata MLP output width");
  app->add_option("--policy", a.policy, "uncertain_as_negative, uncertain_as_positive or uncertain_masked");
  app->add_option("--seed", a.seed, "Initialisation and shuffling seed");
}

json train_section(const json& file, const TrainArgs& a) {
  json t = file.value("train", json::object());
  set_if(t, "epochs", a.epochs);
  set_if(t, "batch_size", a.batch_size);
  set_if(t, "learning_rate", a.learning_rate);
  set_if(t, "optimizer", a.optimizer);
  set_if(t, "backbone", a.backbone);
  set_if(t, "meta_hidden", a.meta_hidden);
  set_if(t, "meta_out", a.meta_out);
  set_if(t, "uncertainty_policy", a.policy);
  set_if(t, "seed", a.seed);
  if (a.meta_features) t["meta_features"] = *a.meta_features == "none" ? json() : json(*a.meta_features);
  return t;
}

int train(const TrainArgs& a) {
  const json file = file_config(a.config);
  json ds = file.value("dataset", json::object());
  a.dataset.apply(ds);
  const auto dataset = DatasetSpec::from_json(ds);
  const auto cfg = train_section(file, a).get<TrainConfig>();
  cfg.validate();

  const auto split = dataset.load();
  make_dir(a.out);
  echo_config(a.out, json{{"command", "train"}, {"dataset", dataset.to_json()}, {"train", cfg}});
  auto result = fit(cfg, split.train, split.val, [&](const EpochRow& r) {
    if (a.quiet) return;
    std::printf("epoch %zu  train_loss %.5f  val_loss %.5f  val_macro_auroc %s\n", r.epoch, r.train_loss, r.val_loss,
                r.val_macro_auroc ? std::to_string(*r.val_macro_auroc).c_str() : "n/a");
    std::fflush(stdout);
  });
  result.best.info["dataset"] = dataset.to_json();
  save_checkpoint(fs::path(a.out) / "checkpoint.json", result.best);
  result.log.write_csv(fs::path(a.out) / "runlog.csv");
  std::printf("best epoch %zu, val macro AUROC %s; checkpoint in %s\n", result.best_epoch,
              result.best_val_auroc ? std::to_string(*result.best_val_auroc).c_str() : "n/a",
              (fs::path(a.out) / "checkpoint.json").c_str());
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint, out, split = "test", name;
  DatasetFlags dataset;
  std::vector<std::string> group_by;
  std::size_t min_group_size = 20;
};

int eval(const EvalArgs& a) {
  const auto ckpt = load_checkpoint(a.checkpoint);
  json ds = ckpt.info.is_object() ? ckpt.info.value("dataset", json::object()) : json::object();
  a.dataset.apply(ds);
  const auto dataset = DatasetSpec::from_json(ds);
  const auto split = dataset.load();
  const std::vector<Sample>* samples = nullptr;
  if (a.split == "train") samples = &split.train;
  else if (a.split == "val") samples = &split.val;
  else if (a.split == "test") samples = &split.test;
  else throw ConfigError("--split must be train, val or test");

  std::vector<GroupBy> groups;
  for (const auto& g : a.group_by) groups.push_back(GroupBy::by_key(g));
  auto report = evaluate_checkpoint(ckpt, *samples, groups, a.min_group_size);
  report.model = a.name.empty() ? ckpt.model.preset().name + " " + std::string(to_string(ckpt.model.mode())) : a.name;

  make_dir(a.out);
  echo_config(a.out, json{{"command", "eval"},
                          {"checkpoint", a.checkpoint},
                          {"dataset", dataset.to_json()},
                          {"split", a.split},
                          {"group_by", a.group_by},
                          {"min_group_size", a.min_group_size}});
  write_text(fs::path(a.out) / "eval_report.json", json(report).dump(2) + "\n");
  const std::vector<EvalReport> one{report};
  std::string table = format_table(one);
  for (const auto& s : report.subgroups) {
    table += "\nsubgroups by " + s.key + " (min size " + std::to_string(s.min_group_size) + "):\n";
    for (const auto& g : s.groups) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "  %-12s n=%-6zu %s\n", g.group.c_str(), g.n_samples,
                    !g.sufficient ? "insufficient" : g.macro ? std::to_string(*g.macro).c_str() : "n/a");
      table += buf;
    }
    table += "  max gap: " + (s.max_gap ? std::to_string(*s.max_gap) : std::string("n/a")) + "\n";
  }
  write_text(fs::path(a.out) / "eval_table.txt", table);
  std::fputs(table.c_str(), stdout);
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
  TrainArgs train;
  std::size_t jobs = 1;
};

int run_sweep(const SweepArgs& a) {
  const json file = file_config(a.train.config);
  json ds = file.value("dataset", json::object());
  a.train.dataset.apply(ds);
  const auto dataset = DatasetSpec::from_json(ds);
  const auto base = train_section(file, a.train).get<TrainConfig>();
  base.validate();
  if (!file.contains("sweep")) throw ConfigError("sweep config needs a \"sweep\" section");
  const auto spec = file.at("sweep").get<SweepSpec>();
  spec.validate();
  if (a.jobs < 1) throw ConfigError("--jobs must be >= 1");

  const auto split = dataset.load();
  const fs::path out = a.train.out;
  make_dir(out / "runlogs");
  echo_config(out, json{{"command", "sweep"}, {"dataset", dataset.to_json()}, {"train", base}, {"sweep", spec}});
  const auto r = sweep(spec, base, split.train, split.val, a.jobs, [&](const TrialResult& t) {
    if (a.train.quiet) return;
    std::printf("trial %zu: lr %g batch %zu meta %s -> %s\n", t.point.trial_id, t.point.learning_rate,
                t.point.batch_size, t.point.meta_features.c_str(),
                t.best_val_auroc ? std::to_string(*t.best_val_auroc).c_str() : t.status.c_str());
    std::fflush(stdout);
  });
  write_text(out / "trials.csv", trial_table_csv(r));
  for (const auto& t : r.trials)
    if (!t.log.rows.empty()) t.log.write_csv(out / "runlogs" / ("trial_" + std::to_string(t.point.trial_id) + ".csv"));
  if (r.winner) {
    const auto& w = r.trials[*r.winner];
    write_text(out / "winner_config.json",
               json{{"dataset", dataset.to_json()}, {"train", *r.winner_config}, {"trial_id", w.point.trial_id},
                    {"best_val_auroc", *w.best_val_auroc}}
                       .dump(2) + "\n");
    auto ckpt = *w.checkpoint;
    ckpt.info["dataset"] = dataset.to_json();
    save_checkpoint(out / "winner_checkpoint.json", ckpt);
    std::printf("winner: trial %zu with val macro AUROC %.5f\n", w.point.trial_id, *w.best_val_auroc);
  } else {
    std::printf("every trial failed; see %s\n", (out / "trials.csv").c_str());
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
  std::string baseline, fusion, out;
};

int report(const ReportArgs& a) {
  const auto base = load_json(a.baseline).get<EvalReport>();
  const auto fused = load_json(a.fusion).get<EvalReport>();
  make_dir(a.out);
  echo_config(a.out, json{{"command", "report"}, {"baseline", a.baseline}, {"fusion", a.fusion}});
  write_text(fs::path(a.out) / "comparison.json", compare_reports(base, fused).dump(2) + "\n");
  const std::string text = format_comparison(base, fused);
  write_text(fs::path(a.out) / "comparison.txt", text);
  std::fputs(text.c_str(), stdout);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chest X-ray metadata fusion toolkit: synthetic data, report labelling, training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cxrfuse 1.0");

  GenDataArgs g;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset (PGM images + JSONL manifest)");
  gen->add_option("--config", g.config, "JSON config (a SynthConfig, or an object with a \"data\" section)");
  gen->add_option("--out", g.out, "Output directory")->required();
  gen->add_option("--n-patients", g.n_patients, "Number of patients")->check(CLI::PositiveNumber);
  gen->add_option("--images-per-patient", g.images_per_patient, "Images per patient")->check(CLI::PositiveNumber);
  gen->add_option("--seed", g.seed, "Generator seed");
  gen->add_option("--ambiguity-fraction", g.ambiguity_fraction, "Fraction of image-ambiguous positives")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--ambiguous-strength-scale", g.ambiguous_strength_scale, "Pattern scale for ambiguous cases")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--not-mentioned-rate", g.not_mentioned_rate, "Rate of not-mentioned states")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--uncertain-rate", g.uncertain_rate, "Rate of uncertain states")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--noise-sd", g.noise_sd, "Pixel noise standard deviation")->check(CLI::NonNegativeNumber);
  gen->add_option("--lateral-fraction", g.lateral_fraction, "Fraction of lateral views")->check(CLI::Range(0.0, 1.0));

  LabelArgs l;
  auto* lab = app.add_subcommand("label", "Label free-text reports into 14 pathology states");
  lab->add_option("--input", l.input, "JSONL of {id, text}, or a directory of one report per file")->required();
  lab->add_option("--out", l.out, "Output directory (labels.jsonl)")->required();
  lab->add_option("--lexicon", l.lexicon, "Lexicon JSON")->capture_default_str();

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train a baseline or fusion model");
  tr->add_option("--config", t.config, "JSON config with \"dataset\" and \"train\" sections");
  tr->add_option("--out", t.out, "Output directory (checkpoint.json, runlog.csv)")->required();
  t.dataset.add(tr);
  add_train_flags(tr, t);
  tr->add_flag("--quiet", t.quiet, "No per-epoch progress");

  EvalArgs e;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  ev->add_option("--checkpoint", e.checkpoint, "Checkpoint file")->required();
  ev->add_option("--out", e.out, "Output directory (eval_report.json, eval_table.txt)")->required();
  ev->add_option("--split", e.split, "train, val or test")->capture_default_str();
  ev->add_option("--name", e.name, "Row label in tables");
  ev->add_option("--group-by", e.group_by, "Subgroup keys: age, sex, bmi, race, insurance")->delimiter(',');
  ev->add_option("--min-group-size", e.min_group_size, "Smallest reported subgroup")->capture_default_str();
  e.dataset.add(ev);

  SweepArgs s;
  auto* sw = app.add_subcommand("sweep", "Grid or random hyperparameter sweep");
  sw->add_option("--config", s.train.config, "JSON config with \"dataset\", \"train\" and \"sweep\" sections")
      ->required();
  sw->add_option("--out", s.train.out, "Output directory (trials.csv, winner_config.json)")->required();
  sw->add_option("--jobs", s.jobs, "Trials run concurrently")->capture_default_str();
  s.train.dataset.add(sw);
  add_train_flags(sw, s.train);
  sw->add_flag("--quiet", s.train.quiet, "No per-trial progress");

  ReportArgs r;
  auto* rep = app.add_subcommand("report", "Compare baseline and fusion evaluation reports");
  rep->add_option("--baseline", r.baseline, "Baseline eval_report.json")->required();
  rep->add_option("--fusion", r.fusion, "Fusion eval_report.json")->required();
  rep->add_option("--out", r.out, "Output directory (comparison.json, comparison.txt)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kConfig;
  }

  try {
    if (*gen) return gen_data(g);
    if (*lab) return label(l);
    if (*tr) return train(t);
    if (*ev) return eval(e);
    if (*sw) return run_sweep(s);
    if (*rep) return report(r);
  } catch (const DivergenceError& err) {
    std::fprintf(stderr, "error: numeric divergence: %s\n", err.what());
    return kDivergence;
  } catch (const IoError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kIo;
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kConfig;
  } catch (const json::exception& err) {
    std::fprintf(stderr, "error: bad configuration: %s\n", err.what());
    return kConfig;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kFailure;
  }
  return kFailure;
}
