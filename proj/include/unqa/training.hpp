#pragma once

// Adaptive weighted task sampling and the three training steps.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "unqa/config.hpp"
#include "unqa/media.hpp"
#include "unqa/metrics.hpp"
#include "unqa/model.hpp"
#include "unqa/objectives.hpp"
#include "unqa/split.hpp"

namespace unqa {

// ---------------------------------------------------------------------------
// Schedule

struct ScheduleDatabase {
  std::string name;
  Modality modality = Modality::image;
  std::size_t steps_per_epoch = 1;
  std::vector<std::string> train_ids;
};

struct Draw {
  std::string database;
  std::vector<std::string> sample_ids;
};

struct SamplingSchedule {
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<Draw> draws;

  std::map<std::string, std::size_t> counts() const {
    std::map<std::string, std::size_t> out;
    for (const auto& d : draws) ++out[d.database];
    return out;
  }
};

inline std::size_t adjusted_steps(const ScheduleDatabase& db, std::size_t audio_repeat_factor) {
  return db.steps_per_epoch * (db.modality == Modality::audio ? audio_repeat_factor : 1);
}

/// Audio factor that brings the mean audio step count close to the mean
/// visual step count.
inline std::size_t auto_audio_repeat_factor(const std::vector<ScheduleDatabase>& dbs) {
  double audio = 0.0, visual = 0.0;
  std::size_t n_audio = 0, n_visual = 0;
  for (const auto& d : dbs) {
    if (d.modality == Modality::audio) {
      audio += static_cast<double>(d.steps_per_epoch);
      ++n_audio;
    } else {
      visual += static_cast<double>(d.steps_per_epoch);
      ++n_visual;
    }
  }
  if (n_audio == 0 || n_visual == 0) return 1;
  const double ratio = (visual / static_cast<double>(n_visual)) / (audio / static_cast<double>(n_audio));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio)));
}

/// Draw order is a seeded shuffle of database slots; each database deals
/// minibatches from a shuffled pool without replacement and, when the pool
/// runs short, tops up from a fresh permutation without duplicating ids.
inline SamplingSchedule build_schedule(const std::vector<ScheduleDatabase>& dbs, std::size_t batch_size,
                                       std::size_t audio_repeat_factor, std::uint64_t seed, std::size_t epoch = 0) {
  require(!dbs.empty(), ErrorCode::invalid_argument, "build_schedule: no databases");
  require(batch_size >= 1, ErrorCode::invalid_argument, "build_schedule: batch_size must be positive");
  require(audio_repeat_factor >= 1, ErrorCode::invalid_argument, "build_schedule: audio_repeat_factor must be >= 1");
  for (const auto& d : dbs) {
    require(d.steps_per_epoch >= 1, ErrorCode::invalid_argument,
            "build_schedule: database '" + d.name + "' has steps_per_epoch 0");
    require(batch_size <= d.train_ids.size(), ErrorCode::invalid_argument,
            "build_schedule: batch_size " + std::to_string(batch_size) + " exceeds the " +
                std::to_string(d.train_ids.size()) + " training samples of '" + d.name + "'");
  }
  SamplingSchedule schedule;
  schedule.epoch = epoch;
  schedule.seed = seed;
  const std::uint64_t epoch_seed = derive_seed(seed, epoch);

  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < dbs.size(); ++i) slots.insert(slots.end(), adjusted_steps(dbs[i], audio_repeat_factor), i);
  Rng order_rng(derive_seed(epoch_seed, 0x5107));
  order_rng.shuffle(slots);

  struct Pool {
    Rng rng{1};
    std::vector<std::size_t> items;
    std::size_t next = 0;
  };
  std::vector<Pool> pools(dbs.size());
  for (std::size_t i = 0; i < dbs.size(); ++i) {
    Fnv1a tag;
    tag.update(dbs[i].name);
    pools[i].rng = Rng(derive_seed(epoch_seed, tag.digest()));
  }
  auto refill = [&](std::size_t i) {
    auto& p = pools[i];
    p.items.resize(dbs[i].train_ids.size());
    std::iota(p.items.begin(), p.items.end(), std::size_t{0});
    p.rng.shuffle(p.items);
    p.next = 0;
  };
  for (std::size_t i = 0; i < dbs.size(); ++i) refill(i);

  for (std::size_t slot : slots) {
    auto& p = pools[slot];
    Draw draw;
    draw.database = dbs[slot].name;
    std::set<std::size_t> taken;
    while (taken.size() < batch_size) {
      if (p.next == p.items.size()) refill(slot);
      const std::size_t candidate = p.items[p.next];
      if (taken.count(candidate)) {
        // Fresh permutation repeats an id already in this batch: defer it.
        const auto later = std::find_if(p.items.begin() + static_cast<std::ptrdiff_t>(p.next), p.items.end(),
                                        [&](std::size_t v) { return !taken.count(v); });
        std::iter_swap(p.items.begin() + static_cast<std::ptrdiff_t>(p.next), later);
        continue;
      }
      taken.insert(candidate);
      draw.sample_ids.push_back(dbs[slot].train_ids[candidate]);
      ++p.next;
    }
    schedule.draws.push_back(std::move(draw));
  }
  return schedule;
}

// ---------------------------------------------------------------------------
// Training data and logging

/// Registered databases together with their split.
struct TrainingData {
  std::vector<std::shared_ptr<const Database>> databases;
  SplitAssignment split;

  const Database& database(const std::string& name) const {
    for (const auto& d : databases) {
      if (d->spec.name == name) return *d;
    }
    throw Error(ErrorCode::invalid_argument, "database '" + name + "' is not part of this run");
  }

  std::map<std::string, std::vector<std::string>> training_samples() const {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& d : databases) {
      std::vector<std::string> ids;
      for (const auto& s : d->samples) ids.push_back(s.sample_id);
      out[d->spec.name] = std::move(ids);
    }
    return out;
  }
};

inline TrainingData make_training_data(std::vector<std::shared_ptr<const Database>> databases, std::uint64_t seed) {
  TrainingData data;
  data.split = split_databases(databases, seed);
  data.databases = std::move(databases);
  return data;
}

/// Append-only line-delimited JSON records; records are also kept in memory.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  }

  void append(json record) {
    if (!path_.empty()) {
      std::ofstream out(path_, std::ios::app);
      require(out.good(), ErrorCode::io_error, "cannot append to '" + path_.string() + "'");
      out << record.dump() << "\n";
    }
    records_.push_back(std::move(record));
  }

  const std::vector<json>& records() const { return records_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::vector<json> records_;
};

// ---------------------------------------------------------------------------
// Phases

enum class LossKind { combined, srcc_soft, mse };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::combined: return "combined";
    case LossKind::srcc_soft: return "srcc_soft";
    case LossKind::mse: return "mse";
  }
  return "unknown";
}

struct PhaseConfig {
  Phase phase = Phase::step1;
  std::size_t epochs = 1;
  double learning_rate = 1e-5;
  std::size_t batch_size = 8;
  LossKind loss = LossKind::combined;
  std::vector<ParamGroup> trainable;
  std::size_t audio_repeat_factor = 4;
  bool audio_repeat_auto = false;
  bool use_declared_steps = false;
  double temperature = 0.1;
  bool rescale_targets = false;  // map MOS linearly onto [0, 1] (linear-rescale baseline)
  bool fit_logistic = false;     // PLCC mode for validation logs
  std::uint64_t seed = 1;

  bool extractors_frozen() const {
    return std::find(trainable.begin(), trainable.end(), ParamGroup::spatial) == trainable.end() &&
           std::find(trainable.begin(), trainable.end(), ParamGroup::audio) == trainable.end();
  }
};

inline std::uint64_t phase_seed(std::uint64_t run_seed, Phase phase) {
  return derive_seed(run_seed, 0x9A5E00ULL + static_cast<std::uint64_t>(phase));
}

/// Phase settings implied by the run configuration.
inline PhaseConfig make_phase_config(const TrainingConfig& t, Phase phase, std::uint64_t run_seed,
                                     bool fit_logistic = false) {
  PhaseConfig c;
  c.phase = phase;
  const PhaseSettings& s = phase == Phase::step1 ? t.step1 : phase == Phase::step2 ? t.step2 : t.step3;
  c.epochs = s.epochs;
  c.learning_rate = s.learning_rate;
  c.batch_size = t.batch_size;
  c.audio_repeat_factor = t.strategy == Strategy::wts ? 1 : t.audio_repeat_factor;
  c.audio_repeat_auto = t.strategy != Strategy::wts && t.audio_repeat_auto;
  c.use_declared_steps = t.use_declared_steps;
  c.temperature = t.soft_rank_temperature;
  c.fit_logistic = fit_logistic;
  c.seed = phase_seed(run_seed, phase);
  c.trainable = phase == Phase::step3 ? std::vector<ParamGroup>{ParamGroup::head}
                                      : std::vector<ParamGroup>{ParamGroup::spatial, ParamGroup::audio, ParamGroup::head};
  if (t.strategy == Strategy::lrs) {
    c.loss = LossKind::mse;
    c.rescale_targets = true;
    if (phase == Phase::step2) c.epochs = t.step1.epochs + t.step2.epochs;
  } else {
    c.loss = phase == Phase::step1 ? LossKind::combined : LossKind::srcc_soft;
  }
  return c;
}

struct PhaseReport {
  Phase phase = Phase::step1;
  std::vector<double> epoch_train_loss;
  std::vector<double> epoch_val_srcc;
  std::size_t best_epoch = 0;
  double best_val_srcc = -std::numeric_limits<double>::infinity();
  std::size_t skipped_batches = 0;
  std::size_t steps = 0;
};

inline std::vector<ScheduleDatabase> schedule_databases(const TrainingData& data, std::size_t batch_size,
                                                        bool use_declared_steps) {
  std::vector<ScheduleDatabase> out;
  for (const auto& d : data.databases) {
    ScheduleDatabase s;
    s.name = d->spec.name;
    s.modality = d->spec.modality;
    s.train_ids = data.split.at(s.name).train;
    s.steps_per_epoch = use_declared_steps ? d->spec.steps_per_epoch
                                           : (s.train_ids.size() + batch_size - 1) / batch_size;
    out.push_back(std::move(s));
  }
  return out;
}

namespace detail {

class SampleIndex {
 public:
  explicit SampleIndex(const TrainingData& data) {
    for (const auto& d : data.databases) {
      for (const auto& s : d->samples) index_[d->spec.name + "/" + s.sample_id] = &s;
    }
  }
  const MediaSample& at(const std::string& db, const std::string& id) const {
    auto it = index_.find(db + "/" + id);
    require(it != index_.end(), ErrorCode::invalid_argument, "sample '" + id + "' not found in '" + db + "'");
    return *it->second;
  }

 private:
  std::unordered_map<std::string, const MediaSample*> index_;
};

}  // namespace detail

/// Scores every listed sample under inference.
inline std::vector<double> predict(ModelState& state, PreparedCache& cache, const Database& db,
                                   const std::vector<std::string>& ids) {
  std::vector<double> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(state.score(cache.get(state, db.sample(id))));
  return out;
}

/// Runs one phase on `state` in place and leaves the best-validation state
/// installed.
inline PhaseReport run_phase(ModelState& state, const TrainingData& data, const PhaseConfig& cfg,
                             PreparedCache& cache, MetricsLog* log = nullptr) {
  require(state.phase() == cfg.phase, ErrorCode::invalid_argument,
          "run_phase: model is in " + std::string(to_string(state.phase())) + ", phase config is " +
              std::string(to_string(cfg.phase)));
  const detail::SampleIndex index(data);
  auto entries = schedule_databases(data, cfg.batch_size, cfg.use_declared_steps);
  const std::size_t factor = cfg.audio_repeat_auto ? auto_audio_repeat_factor(entries) : cfg.audio_repeat_factor;

  auto target = [&](const MediaSample& s) {
    if (!cfg.rescale_targets) return s.mos;
    const MosRange& r = data.database(s.database).spec.mos_range;
    return (s.mos - r.lo) / r.width();
  };

  // With frozen extractors the composed features are constants; compute once.
  std::unordered_map<std::string, ComposedFeature> frozen;
  auto composed = [&](GradContext& ctx, const PreparedSample& p) -> ComposedFeature {
    if (!cfg.extractors_frozen()) return state.compose(ctx, p);
    const std::string key = p.database + "/" + p.sample_id;
    auto it = frozen.find(key);
    if (it == frozen.end()) {
      GradContext inference = GradContext::inference();
      it = frozen.emplace(key, state.compose(inference, p)).first;
    }
    return it->second;
  };
  auto score_ids = [&](const Database& db, const std::vector<std::string>& ids) {
    std::vector<double> out;
    GradContext ctx = GradContext::inference();
    for (const auto& id : ids) {
      const PreparedSample& p = cache.get(state, db.sample(id));
      out.push_back(regress(ctx, state.head_for(p.database, p.modality), composed(ctx, p)).item());
    }
    return out;
  };

  std::vector<Parameter*> params = state.parameters(cfg.trainable);
  Adam optimizer(Adam::Options{cfg.learning_rate});
  PhaseReport report;
  report.phase = cfg.phase;
  std::optional<ModelState> best;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const SamplingSchedule schedule = build_schedule(entries, cfg.batch_size, factor, cfg.seed, epoch);
    double loss_total = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t step = 0; step < schedule.draws.size(); ++step) {
      const Draw& draw = schedule.draws[step];
      std::vector<double> targets;
      std::vector<const PreparedSample*> batch;
      for (const auto& id : draw.sample_ids) {
        const MediaSample& s = index.at(draw.database, id);
        targets.push_back(target(s));
        batch.push_back(&cache.get(state, s));
      }
      if (cfg.loss == LossKind::srcc_soft && detail::is_constant(targets)) {
        warn("skipping batch " + std::to_string(step) + " of '" + draw.database + "': constant MOS");
        ++report.skipped_batches;
        continue;
      }
      GradContext ctx(cfg.trainable);
      std::vector<Var> scores;
      for (const auto* p : batch) scores.push_back(regress(ctx, state.head_for(p->database, p->modality), composed(ctx, *p)));
      const Var o = scores.size() == 1 ? scores.front() : concat(scores, 0);
      Var loss;
      switch (cfg.loss) {
        case LossKind::combined: loss = combined_loss(o, targets); break;
        case LossKind::srcc_soft: loss = srcc_loss_soft(o, targets, cfg.temperature); break;
        case LossKind::mse: loss = mse_loss(o, targets); break;
      }
      backward(loss);
      ctx.accumulate();
      optimizer.step(params);
      for (Parameter* p : params) p->grad.clear();
      loss_total += loss.item();
      ++loss_count;
      ++report.steps;
      if (log) {
        log->append({{"type", "train"}, {"phase", std::string(to_string(cfg.phase))}, {"epoch", epoch},
                     {"step", step}, {"database", draw.database}, {"loss", loss.item()},
                     {"objective", std::string(to_string(cfg.loss))}});
      }
    }
    report.epoch_train_loss.push_back(loss_count ? loss_total / static_cast<double>(loss_count) : 0.0);

    double srcc_sum = 0.0;
    for (const auto& d : data.databases) {
      const auto& ids = data.split.at(d->spec.name).val;
      std::vector<double> mos;
      for (const auto& id : ids) mos.push_back(d->sample(id).mos);
      const auto pred = score_ids(*d, ids);
      const MetricPair m = metric_pair(pred, mos, cfg.fit_logistic);
      srcc_sum += m.srcc;
      if (log) {
        double val_loss = 1.0 - m.srcc;
        if (cfg.loss == LossKind::combined) val_loss = combined_loss(pred, mos);
        if (cfg.loss == LossKind::mse) {
          std::vector<double> t;
          for (const auto& id : ids) t.push_back(target(d->sample(id)));
          val_loss = mse_loss(constant({t.size()}, pred), t).item();
        }
        log->append({{"type", "val"}, {"phase", std::string(to_string(cfg.phase))}, {"epoch", epoch},
                     {"database", d->spec.name}, {"loss", val_loss}, {"srcc", m.srcc}, {"plcc", m.plcc},
                     {"n", m.n}});
      }
    }
    const double mean_srcc = srcc_sum / static_cast<double>(data.databases.size());
    report.epoch_val_srcc.push_back(mean_srcc);
    if (!best || mean_srcc > report.best_val_srcc) {
      report.best_val_srcc = mean_srcc;
      report.best_epoch = epoch;
      best = state;
    }
  }
  if (best) state = *best;
  if (log) {
    log->append({{"type", "phase"}, {"phase", std::string(to_string(cfg.phase))}, {"epochs", cfg.epochs},
                 {"best_epoch", report.best_epoch}, {"best_val_srcc", report.best_val_srcc},
                 {"steps", report.steps}, {"skipped_batches", report.skipped_batches},
                 {"audio_repeat_factor", factor}});
  }
  return report;
}

inline std::vector<std::pair<std::string, Modality>> database_modalities(const TrainingData& data) {
  std::vector<std::pair<std::string, Modality>> out;
  for (const auto& d : data.databases) out.emplace_back(d->spec.name, d->spec.modality);
  return out;
}

/// Step 1: database-specific heads, combined loss on raw MOS.
inline PhaseReport run_step1(ModelState& state, const TrainingData& data, const PhaseConfig& cfg,
                             PreparedCache& cache, MetricsLog* log = nullptr) {
  require(cfg.phase == Phase::step1, ErrorCode::invalid_argument, "run_step1: phase config is not step1");
  if (state.heads().empty()) {
    state.install_database_heads(database_modalities(data));
    if (state.config().head.center_output_bias) {
      for (auto& h : state.heads()) {
        const MosRange& r = data.database(h.database).spec.mos_range;
        h.params.at("fc2.bias").value[0] = 0.5 * (r.lo + r.hi);
      }
    }
  }
  require(state.phase() == Phase::step1 && state.heads().size() == data.databases.size(), ErrorCode::invalid_argument,
          "run_step1: expected " + std::to_string(data.databases.size()) + " database-specific heads");
  return run_phase(state, data, cfg, cache, log);
}

/// Step 2: merge heads, then train everything but the motion extractor.
inline PhaseReport run_step2(ModelState& state, const TrainingData& data, const PhaseConfig& cfg,
                             PreparedCache& cache, MetricsLog* log = nullptr) {
  require(cfg.phase == Phase::step2, ErrorCode::invalid_argument, "run_step2: phase config is not step2");
  merge_heads(state);
  return run_phase(state, data, cfg, cache, log);
}

/// Step 3: extractors frozen, only the four modality heads update.
inline PhaseReport run_step3(ModelState& state, const TrainingData& data, const PhaseConfig& cfg,
                             PreparedCache& cache, MetricsLog* log = nullptr) {
  require(cfg.phase == Phase::step3, ErrorCode::invalid_argument, "run_step3: phase config is not step3");
  require(state.phase() == Phase::step2, ErrorCode::invalid_argument, "run_step3: input must be a step2 model");
  require(cfg.extractors_frozen(), ErrorCode::invalid_argument, "run_step3: extractors must be frozen");
  state.set_phase(Phase::step3);
  return run_phase(state, data, cfg, cache, log);
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineOptions {
  std::filesystem::path run_dir;  // empty: no checkpoints, no log file
  bool resume = true;
  std::optional<Phase> stop_after;  // simulate an interruption
  std::string checkpoint_prefix;    // e.g. "repeat_3_"
};

struct PipelineResult {
  ModelState state;
  std::filesystem::path final_checkpoint;
  std::vector<PhaseReport> phases;
  bool completed = false;
};

inline std::filesystem::path step_checkpoint_path(const PipelineOptions& o, Phase p) {
  return o.run_dir / (o.checkpoint_prefix + std::string(to_string(p)) + ".ckpt");
}

/// step1 -> step2 -> step3 with a checkpoint after every step. When resuming,
/// the latest existing step checkpoint is loaded (its config hash and
/// training sample sets must match) and the remaining steps are run.
inline PipelineResult run_full_pipeline(const TrainingData& data, const RunConfig& config,
                                        const PipelineOptions& options = {}, PreparedCache* shared_cache = nullptr,
                                        MetricsLog* log = nullptr) {
  require(!data.databases.empty(), ErrorCode::invalid_argument, "run_full_pipeline: no databases");
  const std::string hash = config_hash(config);
  CheckpointMeta meta{hash, data.training_samples()};
  PreparedCache local_cache;
  PreparedCache& cache = shared_cache ? *shared_cache : local_cache;
  MetricsLog local_log = options.run_dir.empty() ? MetricsLog{} : MetricsLog(options.run_dir / "metrics.jsonl");
  MetricsLog* sink = log ? log : &local_log;
  const bool persist = !options.run_dir.empty();

  sink->append({{"type", "run"}, {"strategy", std::string(to_string(config.training.strategy))},
                {"config_hash", hash}, {"seed", config.seed}});

  PipelineResult result;
  std::optional<Phase> resumed;
  if (persist && options.resume) {
    for (Phase p : {Phase::step3, Phase::step2, Phase::step1}) {
      const auto path = step_checkpoint_path(options, p);
      if (!std::filesystem::exists(path)) continue;
      LoadedCheckpoint loaded = load_checkpoint(path, hash);
      require(loaded.meta.training_samples == meta.training_samples, ErrorCode::config_mismatch,
              "checkpoint '" + path.string() + "' was trained on different databases");
      result.state = loaded.state;
      resumed = p;
      break;
    }
  }
  if (!resumed) result.state = ModelState(config.model);

  const bool lrs = config.training.strategy == Strategy::lrs;
  auto done = [&](Phase p) { return resumed && static_cast<int>(*resumed) >= static_cast<int>(p); };
  auto finish = [&](Phase p) {
    if (persist) save_checkpoint(result.state, meta, step_checkpoint_path(options, p));
    return options.stop_after && *options.stop_after == p;
  };
  const bool fit = config.evaluation.fit_logistic;

  if (!done(Phase::step1)) {
    if (lrs) {
      // The linear-rescale baseline has no database-specific stage.
      result.state.install_modality_heads();
      result.state.set_phase(Phase::step1);
    } else {
      result.phases.push_back(
          run_step1(result.state, data, make_phase_config(config.training, Phase::step1, config.seed, fit), cache, sink));
    }
    if (finish(Phase::step1)) return result;
  }
  if (!done(Phase::step2)) {
    if (lrs) {
      result.state.set_phase(Phase::step2);
      result.phases.push_back(
          run_phase(result.state, data, make_phase_config(config.training, Phase::step2, config.seed, fit), cache, sink));
    } else {
      result.phases.push_back(
          run_step2(result.state, data, make_phase_config(config.training, Phase::step2, config.seed, fit), cache, sink));
    }
    if (finish(Phase::step2)) return result;
  }
  if (!done(Phase::step3)) {
    result.phases.push_back(
        run_step3(result.state, data, make_phase_config(config.training, Phase::step3, config.seed, fit), cache, sink));
    finish(Phase::step3);
  }
  if (persist) {
    result.final_checkpoint = options.run_dir / (options.checkpoint_prefix + "final.ckpt");
    save_checkpoint(result.state, meta, result.final_checkpoint);
  }
  result.completed = true;
  return result;
}

}  // namespace unqa
