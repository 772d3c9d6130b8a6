#pragma once

// Repeated-split evaluation and cross-database evaluation.

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "unqa/metrics.hpp"
#include "unqa/model.hpp"
#include "unqa/split.hpp"
#include "unqa/training.hpp"

namespace unqa {

struct EvalRow {
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  std::string database;
  MetricPair metrics;
};

struct EvalReport {
  std::string config_hash;
  std::string checkpoint_id;
  std::vector<std::string> databases;  // reporting order
  std::vector<EvalRow> rows;
  std::map<std::string, MetricPair> mean;

  std::size_t repeats() const {
    std::set<std::size_t> r;
    for (const auto& row : rows) r.insert(row.repeat);
    return r.size();
  }

  std::vector<EvalRow> rows_for(const std::string& database) const {
    std::vector<EvalRow> out;
    for (const auto& row : rows) {
      if (row.database == database) out.push_back(row);
    }
    return out;
  }

  /// Arithmetic means over repeats, per database.
  void finalize() {
    mean.clear();
    for (const auto& db : databases) {
      const auto rows_db = rows_for(db);
      if (rows_db.empty()) continue;
      MetricPair m{0.0, 0.0, 0.0, 0};
      for (const auto& r : rows_db) {
        m.srcc += r.metrics.srcc;
        m.plcc += r.metrics.plcc;
        m.plcc_logistic += r.metrics.plcc_logistic;
        m.n += r.metrics.n;
      }
      const double k = static_cast<double>(rows_db.size());
      m.srcc /= k;
      m.plcc /= k;
      m.plcc_logistic /= k;
      m.n = static_cast<std::size_t>(std::llround(static_cast<double>(m.n) / k));
      mean[db] = m;
    }
  }

  json to_json() const {
    json j;
    j["config_hash"] = config_hash;
    j["checkpoint"] = checkpoint_id;
    j["databases"] = databases;
    auto pair = [](const MetricPair& m) {
      json p{{"srcc", m.srcc}, {"plcc", m.plcc}, {"n", m.n}};
      p["plcc_logistic"] = std::isfinite(m.plcc_logistic) ? json(m.plcc_logistic) : json(nullptr);
      return p;
    };
    j["rows"] = json::array();
    for (const auto& r : rows) {
      json row = pair(r.metrics);
      row["repeat"] = r.repeat;
      row["seed"] = r.seed;
      row["database"] = r.database;
      j["rows"].push_back(row);
    }
    j["mean"] = json::object();
    for (const auto& [db, m] : mean) j["mean"][db] = pair(m);
    return j;
  }
};

/// Split seed of repeat k.
inline std::uint64_t repeat_seed(std::uint64_t base, std::size_t k) { return derive_seed(base, 0xE7A10000ULL + k); }

inline std::vector<std::uint64_t> repeat_seeds(std::uint64_t base, std::size_t repeats) {
  std::vector<std::uint64_t> out;
  for (std::size_t k = 0; k < repeats; ++k) out.push_back(repeat_seed(base, k));
  return out;
}

/// Run config of repeat k: identical except for the seed.
inline RunConfig repeat_config(const RunConfig& config, std::uint64_t seed) {
  RunConfig c = config;
  c.seed = seed;
  return c;
}

enum class EvalMode {
  fixed_checkpoint,  // one checkpoint scored on every repeat's test split
  per_repeat,        // <dir>/repeat_<k>/final.ckpt, trained on that repeat's split
  retrain,           // run the full pipeline per repeat
};

struct EvalOptions {
  EvalMode mode = EvalMode::fixed_checkpoint;
  std::filesystem::path checkpoint;  // file (fixed) or directory (per_repeat)
  std::filesystem::path run_dir;     // retrain: per-repeat outputs; empty keeps nothing on disk
  std::vector<std::uint64_t> seeds;  // empty: repeat_seeds(config.seed, config.evaluation.repeats)
};

inline std::filesystem::path repeat_dir(const std::filesystem::path& root, std::size_t k) {
  return root / ("repeat_" + std::to_string(k));
}

namespace detail {

inline std::vector<EvalRow> score_test_split(ModelState& state, PreparedCache& cache, const TrainingData& data,
                                             std::size_t repeat, std::uint64_t seed, bool fit_logistic) {
  std::vector<EvalRow> rows;
  for (const auto& d : data.databases) {
    const auto& ids = data.split.at(d->spec.name).test;
    std::vector<double> mos;
    for (const auto& id : ids) mos.push_back(d->sample(id).mos);
    const auto pred = predict(state, cache, *d, ids);
    rows.push_back({repeat, seed, d->spec.name, metric_pair(pred, mos, fit_logistic)});
  }
  return rows;
}

}  // namespace detail

/// Scores the test split of every repeat. Splits derive from the repeat
/// seeds; the model comes from a fixed checkpoint, per-repeat checkpoints,
/// or a fresh training run per repeat.
inline EvalReport evaluate(const std::vector<std::shared_ptr<const Database>>& databases, const RunConfig& config,
                           const EvalOptions& options, PreparedCache* shared_cache = nullptr) {
  require(!databases.empty(), ErrorCode::invalid_argument, "evaluate: no databases");
  const auto seeds = options.seeds.empty() ? repeat_seeds(config.seed, config.evaluation.repeats) : options.seeds;
  require(!seeds.empty(), ErrorCode::invalid_argument, "evaluate: at least one repeat is required");
  const bool fit = config.evaluation.fit_logistic;
  PreparedCache local_cache;
  PreparedCache& cache = shared_cache ? *shared_cache : local_cache;

  EvalReport report;
  report.config_hash = config_hash(config);
  for (const auto& d : databases) report.databases.push_back(d->spec.name);

  std::optional<ModelState> fixed;
  if (options.mode == EvalMode::fixed_checkpoint) {
    fixed = load_checkpoint(options.checkpoint, report.config_hash).state;
    report.checkpoint_id = checkpoint_digest(options.checkpoint);
  } else if (options.mode == EvalMode::per_repeat) {
    report.checkpoint_id = options.checkpoint.string();
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      const auto path = repeat_dir(options.checkpoint, k) / "final.ckpt";
      require(std::filesystem::exists(path), ErrorCode::missing_file,
              "evaluate: repeat " + std::to_string(k) + " checkpoint '" + path.string() + "' not found");
    }
  } else {
    report.checkpoint_id = "retrain";
  }

  for (std::size_t k = 0; k < seeds.size(); ++k) {
    const TrainingData data = make_training_data(databases, seeds[k]);
    const RunConfig rc = repeat_config(config, seeds[k]);
    std::vector<EvalRow> rows;
    if (fixed) {
      rows = detail::score_test_split(*fixed, cache, data, k, seeds[k], fit);
    } else if (options.mode == EvalMode::per_repeat) {
      ModelState state = load_checkpoint(repeat_dir(options.checkpoint, k) / "final.ckpt", config_hash(rc)).state;
      rows = detail::score_test_split(state, cache, data, k, seeds[k], fit);
    } else {
      PipelineOptions po;
      if (!options.run_dir.empty()) po.run_dir = repeat_dir(options.run_dir, k);
      PipelineResult result = run_full_pipeline(data, rc, po, &cache);
      rows = detail::score_test_split(result.state, cache, data, k, seeds[k], fit);
    }
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  report.finalize();
  return report;
}

/// Zero-shot scoring of held-out databases. Held-out databases must share
/// neither a name nor a sample id with the checkpoint's training data.
inline EvalReport cross_evaluate(ModelState& state, const CheckpointMeta& meta,
                                 const std::vector<std::shared_ptr<const Database>>& held_out, bool fit_logistic = false,
                                 PreparedCache* shared_cache = nullptr) {
  require(!held_out.empty(), ErrorCode::invalid_argument, "cross_evaluate: no held-out databases");
  std::set<std::string> train_ids;
  for (const auto& [name, ids] : meta.training_samples) train_ids.insert(ids.begin(), ids.end());
  for (const auto& d : held_out) {
    require(meta.training_samples.count(d->spec.name) == 0, ErrorCode::overlap,
            "cross_evaluate: database '" + d->spec.name + "' was used for training");
    for (const auto& s : d->samples) {
      require(train_ids.count(s.sample_id) == 0, ErrorCode::overlap,
              "cross_evaluate: sample '" + s.sample_id + "' of '" + d->spec.name + "' appears in the training data");
    }
  }
  PreparedCache local_cache;
  PreparedCache& cache = shared_cache ? *shared_cache : local_cache;
  EvalReport report;
  report.config_hash = meta.config_hash;
  for (const auto& d : held_out) {
    report.databases.push_back(d->spec.name);
    std::vector<std::string> ids;
    for (const auto& s : d->samples) ids.push_back(s.sample_id);
    const auto pred = predict(state, cache, *d, ids);
    report.rows.push_back({0, 0, d->spec.name, metric_pair(pred, d->mos_values(), fit_logistic)});
  }
  report.finalize();
  return report;
}

}  // namespace unqa
