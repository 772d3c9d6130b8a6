#pragma once

// Run-level entry points behind the command line tool.

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "unqa/config.hpp"
#include "unqa/evaluation.hpp"
#include "unqa/manifest.hpp"
#include "unqa/synthetic.hpp"
#include "unqa/training.hpp"

namespace unqa {

/// Loads manifests and generates inline synthetic databases, in config order.
inline std::vector<std::shared_ptr<const Database>> resolve_databases(const std::vector<DatabaseSource>& sources,
                                                                      const ModelConfig& model,
                                                                      DatabaseRegistry& registry) {
  std::vector<std::shared_ptr<const Database>> out;
  ManifestOptions mo;
  mo.sample_rate = model.mel.sample_rate;
  for (const auto& src : sources) {
    if (!src.manifest.empty()) out.push_back(load_manifest(registry, src.manifest, mo));
    else out.push_back(generate_synthetic_database(registry, *src.synthetic));
  }
  return out;
}

/// Writes every synthetic database of the config (training and held-out)
/// into <data_dir>/<name>/manifest.csv.
inline std::vector<fs::path> generate_data(const RunConfig& config) {
  std::vector<fs::path> written;
  for (const auto* list : {&config.databases, &config.held_out}) {
    for (const auto& src : *list) {
      if (!src.synthetic) continue;
      const Database db = generate_synthetic_database(*src.synthetic);
      written.push_back(write_database(db, fs::path(config.data_dir) / db.spec.name));
    }
  }
  require(!written.empty(), ErrorCode::invalid_argument, "gen-data: config declares no synthetic databases");
  return written;
}

inline PipelineResult train_run(const RunConfig& config, bool resume = true) {
  require(!config.databases.empty(), ErrorCode::invalid_argument, "train: config lists no databases");
  DatabaseRegistry registry;
  const auto dbs = resolve_databases(config.databases, config.model, registry);
  const TrainingData data = make_training_data(dbs, config.seed);
  PipelineOptions po;
  po.run_dir = config.run_dir;
  po.resume = resume;
  return run_full_pipeline(data, config, po);
}

inline void write_eval_outputs(const EvalReport& report, const fs::path& run_dir, const std::string& file_name,
                               const std::string& record_type) {
  fs::create_directories(run_dir);
  {
    std::ofstream out(run_dir / file_name);
    require(out.good(), ErrorCode::io_error, "cannot write '" + (run_dir / file_name).string() + "'");
    out << report.to_json().dump(2) << "\n";
  }
  MetricsLog log(run_dir / "metrics.jsonl");
  for (const auto& row : report.rows) {
    json r{{"type", record_type}, {"repeat", row.repeat}, {"seed", row.seed}, {"database", row.database},
           {"srcc", row.metrics.srcc}, {"plcc", row.metrics.plcc}, {"n", row.metrics.n}};
    log.append(std::move(r));
  }
}

/// `checkpoint` is a checkpoint file, a directory of repeat_<k>/final.ckpt,
/// or the word "retrain".
inline EvalReport eval_run(const RunConfig& config, const std::string& checkpoint) {
  require(!config.databases.empty(), ErrorCode::invalid_argument, "eval: config lists no databases");
  DatabaseRegistry registry;
  const auto dbs = resolve_databases(config.databases, config.model, registry);
  EvalOptions eo;
  if (checkpoint == "retrain") {
    eo.mode = EvalMode::retrain;
    eo.run_dir = fs::path(config.run_dir) / "repeats";
  } else if (fs::is_directory(checkpoint)) {
    eo.mode = EvalMode::per_repeat;
    eo.checkpoint = checkpoint;
  } else {
    require(fs::exists(checkpoint), ErrorCode::missing_file, "checkpoint '" + checkpoint + "' not found");
    eo.mode = EvalMode::fixed_checkpoint;
    eo.checkpoint = checkpoint;
  }
  EvalReport report = evaluate(dbs, config, eo);
  write_eval_outputs(report, config.run_dir, "eval.json", "test");
  return report;
}

inline EvalReport cross_eval_run(const RunConfig& config, const std::string& checkpoint,
                                 const std::vector<std::string>& held_out_manifests) {
  std::vector<DatabaseSource> sources;
  for (const auto& m : held_out_manifests) sources.push_back({m, std::nullopt});
  if (sources.empty()) sources = config.held_out;
  require(!sources.empty(), ErrorCode::invalid_argument, "cross-eval: no held-out databases");
  DatabaseRegistry registry;
  const auto dbs = resolve_databases(sources, config.model, registry);
  LoadedCheckpoint loaded = load_checkpoint(checkpoint, config_hash(config));
  EvalReport report = cross_evaluate(loaded.state, loaded.meta, dbs, config.evaluation.fit_logistic);
  report.checkpoint_id = checkpoint_digest(checkpoint);
  write_eval_outputs(report, config.run_dir, "cross_eval.json", "cross");
  return report;
}

}  // namespace unqa
