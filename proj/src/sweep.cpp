#include "cxrfuse/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <mutex>
#include <thread>

#include "cxrfuse/errors.hpp"
#include "cxrfuse/rng.hpp"

namespace cxrfuse {

void SweepSpec::validate() const {
  if (learning_rate.empty()) throw ConfigError("sweep: learning_rate list is empty");
  if (batch_size.empty()) throw ConfigError("sweep: batch_size list is empty");
  if (meta_features.empty()) throw ConfigError("sweep: meta_features list is empty");
  if (meta_dims.empty()) throw ConfigError("sweep: meta_dims list is empty");
  if (strategy == SweepStrategy::random && n_trials < 1) throw ConfigError("sweep: random search needs n_trials >= 1");
  for (double lr : learning_rate)
    if (!(lr > 0)) throw ConfigError("sweep: learning rates must be > 0");
  for (std::size_t b : batch_size)
    if (b < 1) throw ConfigError("sweep: batch sizes must be >= 1");
  for (const auto& d : meta_dims)
    if (d.hidden < 1 || d.out < 1) throw ConfigError("sweep: meta_dims entries must be >= 1");
  for (const auto& f : meta_features)
    if (f != "none") MetaFeatureConfig::from_selector(f);
}

std::size_t SweepSpec::grid_size() const {
  return learning_rate.size() * batch_size.size() * meta_features.size() * meta_dims.size();
}

void to_json(nlohmann::json& j, const SweepSpec& s) {
  auto dims = nlohmann::json::array();
  for (const auto& d : s.meta_dims) dims.push_back({d.hidden, d.out});
  j = nlohmann::json{{"strategy", s.strategy == SweepStrategy::grid ? "grid" : "random"},
                     {"n_trials", s.n_trials},
                     {"seed", s.seed},
                     {"learning_rate", s.learning_rate},
                     {"batch_size", s.batch_size},
                     {"meta_features", s.meta_features},
                     {"meta_dims", dims}};
}

void from_json(const nlohmann::json& j, SweepSpec& s) {
  try {
    const auto strategy = j.value("strategy", std::string("grid"));
    if (strategy == "grid") s.strategy = SweepStrategy::grid;
    else if (strategy == "random") s.strategy = SweepStrategy::random;
    else throw ConfigError("sweep: unknown strategy '" + strategy + "' (expected grid or random)");
    s.n_trials = j.value("n_trials", std::size_t{0});
    s.seed = j.value("seed", std::uint64_t{0});
    s.learning_rate = j.at("learning_rate").get<std::vector<double>>();
    s.batch_size = j.at("batch_size").get<std::vector<std::size_t>>();
    s.meta_features = j.at("meta_features").get<std::vector<std::string>>();
    s.meta_dims.clear();
    for (const auto& d : j.at("meta_dims")) {
      if (d.is_array() && d.size() == 2) s.meta_dims.push_back(MetaDims{d[0].get<std::size_t>(), d[1].get<std::size_t>()});
      else s.meta_dims.push_back(MetaDims{d.at("hidden").get<std::size_t>(), d.at("out").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad sweep spec: ") + e.what());
  }
}

std::vector<TrialPoint> enumerate_grid(const SweepSpec& spec) {
  spec.validate();
  std::vector<TrialPoint> out;
  for (double lr : spec.learning_rate)
    for (std::size_t bs : spec.batch_size)
      for (const auto& mf : spec.meta_features)
        for (const auto& md : spec.meta_dims) out.push_back(TrialPoint{out.size(), lr, bs, mf, md});
  return out;
}

std::vector<TrialPoint> select_trials(const SweepSpec& spec) {
  auto grid = enumerate_grid(spec);
  if (spec.strategy == SweepStrategy::grid || spec.n_trials >= grid.size()) return grid;
  // Partial Fisher-Yates: the first n_trials slots are a uniform draw without replacement.
  std::vector<std::size_t> idx(grid.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  CounterRng rng(spec.seed, {key_of(Stream::sweep)});
  for (std::size_t i = 0; i < spec.n_trials; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  idx.resize(spec.n_trials);
  std::sort(idx.begin(), idx.end());
  std::vector<TrialPoint> out;
  for (std::size_t i : idx) out.push_back(grid[i]);
  return out;
}

TrainConfig trial_config(const TrainConfig& base, const TrialPoint& t) {
  TrainConfig c = base;
  c.learning_rate = t.learning_rate;
  c.batch_size = t.batch_size;
  if (t.meta_features == "none") c.meta_features.reset();
  else c.meta_features = MetaFeatureConfig::from_selector(t.meta_features);
  c.meta_hidden = t.meta_dims.hidden;
  c.meta_out = t.meta_dims.out;
  return c;
}

SweepResult sweep(const SweepSpec& spec, const TrainConfig& base, std::span<const Sample> train,
                  std::span<const Sample> val, std::size_t jobs, const TrialCallback& on_trial) {
  const auto points = select_trials(spec);
  std::vector<TrialResult> results(points.size());
  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      TrialResult r;
      r.point = points[i];
      try {
        auto f = fit(trial_config(base, points[i]), train, val);
        r.best_val_auroc = f.best_val_auroc;
        r.log = std::move(f.log);
        r.checkpoint = std::move(f.best);
        if (!r.best_val_auroc) r.status = "failed: validation macro AUROC undefined";
      } catch (const std::exception& e) {
        r.status = std::string("failed: ") + e.what();
      }
      if (on_trial) {
        std::lock_guard<std::mutex> lock(callback_mutex);
        on_trial(r);
      }
      results[i] = std::move(r);
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, points.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  std::stable_sort(results.begin(), results.end(), [](const TrialResult& a, const TrialResult& b) {
    const bool ok_a = a.status == "ok", ok_b = b.status == "ok";
    if (ok_a != ok_b) return ok_a;
    if (ok_a && *a.best_val_auroc != *b.best_val_auroc) return *a.best_val_auroc > *b.best_val_auroc;
    return a.point.trial_id < b.point.trial_id;
  });
  SweepResult out{std::move(results), std::nullopt, std::nullopt};
  if (!out.trials.empty() && out.trials.front().status == "ok") {
    out.winner = 0;
    out.winner_config = trial_config(base, out.trials.front().point);
  }
  return out;
}

namespace {

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

}  // namespace

std::string trial_table_csv(const SweepResult& r) {
  std::string out = "trial_id,learning_rate,batch_size,meta_features,meta_hidden,meta_out,best_val_auroc,status\n";
  for (const auto& t : r.trials) {
    const bool baseline = t.point.meta_features == "none";
    out += std::to_string(t.point.trial_id) + ',' + shortest(t.point.learning_rate) + ',' +
           std::to_string(t.point.batch_size) + ',' + csv_field(t.point.meta_features) + ',' +
           (baseline ? std::string() : std::to_string(t.point.meta_dims.hidden)) + ',' +
           (baseline ? std::string() : std::to_string(t.point.meta_dims.out)) + ',' +
           (t.best_val_auroc ? shortest(*t.best_val_auroc) : std::string()) + ',' + csv_field(t.status) + '\n';
  }
  return out;
}

}  // namespace cxrfuse
