#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

namespace unqa {
namespace {

using testing::scratch_dir;
using testing::tiny_database;
using testing::tiny_run_config;

std::vector<std::string> ids(const std::string& prefix, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

// Steps (2, 4, 6) with batch 4: 8, 16 and 24 training samples.
std::vector<ScheduleDatabase> toy_schedule_dbs() {
  return {{"aqa", Modality::audio, 2, ids("a", 8)},
          {"db2", Modality::image, 4, ids("b", 16)},
          {"db3", Modality::video, 6, ids("c", 24)}};
}

TEST(Schedule, AudioRepeatCounts) {
  const auto dbs = toy_schedule_dbs();
  const SamplingSchedule s = build_schedule(dbs, 4, 4, 11);
  EXPECT_EQ(s.draws.size(), 18u);
  EXPECT_EQ(s.counts(), (std::map<std::string, std::size_t>{{"aqa", 8}, {"db2", 4}, {"db3", 6}}));
  const SamplingSchedule plain = build_schedule(dbs, 4, 1, 11);
  EXPECT_EQ(plain.counts(), (std::map<std::string, std::size_t>{{"aqa", 2}, {"db2", 4}, {"db3", 6}}));
  EXPECT_EQ(plain.draws.size(), 12u);
}

TEST(Schedule, ExactnessPurityAndBudgetOverManyEpochs) {
  const auto dbs = toy_schedule_dbs();
  for (std::size_t epoch = 0; epoch < 100; ++epoch) {
    for (std::size_t factor : {1u, 4u}) {
      const SamplingSchedule s = build_schedule(dbs, 4, factor, 1000 + epoch, epoch);
      std::size_t budget = 0;
      for (const auto& d : dbs) {
        budget += adjusted_steps(d, factor);
        EXPECT_EQ(s.counts().at(d.name), adjusted_steps(d, factor));
      }
      EXPECT_EQ(s.draws.size(), budget);
      if (factor == 1) EXPECT_EQ(budget, 2u + 4u + 6u);
      for (const auto& draw : s.draws) {
        const auto& db = *std::find_if(dbs.begin(), dbs.end(), [&](const auto& d) { return d.name == draw.database; });
        const std::set<std::string> own(db.train_ids.begin(), db.train_ids.end());
        const std::set<std::string> unique(draw.sample_ids.begin(), draw.sample_ids.end());
        EXPECT_EQ(draw.sample_ids.size(), 4u);
        EXPECT_EQ(unique.size(), 4u);
        for (const auto& id : draw.sample_ids) EXPECT_TRUE(own.count(id)) << id << " in " << draw.database;
      }
    }
  }
}

TEST(Schedule, WithoutReplacementUntilExhausted) {
  // db2 has exactly steps * batch samples, so one epoch covers each once.
  const auto dbs = toy_schedule_dbs();
  const SamplingSchedule s = build_schedule(dbs, 4, 1, 3);
  std::map<std::string, std::size_t> seen;
  for (const auto& d : s.draws)
    if (d.database == "db2")
      for (const auto& id : d.sample_ids) ++seen[id];
  EXPECT_EQ(seen.size(), 16u);
  for (const auto& [id, n] : seen) EXPECT_EQ(n, 1u) << id;

  // With factor 4 the audio pool is dealt twice per epoch.
  const SamplingSchedule r = build_schedule(dbs, 4, 4, 3);
  std::map<std::string, std::size_t> audio;
  for (const auto& d : r.draws)
    if (d.database == "aqa")
      for (const auto& id : d.sample_ids) ++audio[id];
  EXPECT_EQ(audio.size(), 8u);
  for (const auto& [id, n] : audio) EXPECT_EQ(n, 4u) << id;
}

TEST(Schedule, DeterministicAndSeedSensitive) {
  const auto dbs = toy_schedule_dbs();
  auto flatten = [](const SamplingSchedule& s) {
    std::vector<std::string> out;
    for (const auto& d : s.draws) {
      out.push_back(d.database);
      out.insert(out.end(), d.sample_ids.begin(), d.sample_ids.end());
    }
    return out;
  };
  EXPECT_EQ(flatten(build_schedule(dbs, 4, 4, 77, 2)), flatten(build_schedule(dbs, 4, 4, 77, 2)));
  EXPECT_NE(flatten(build_schedule(dbs, 4, 4, 77, 2)), flatten(build_schedule(dbs, 4, 4, 78, 2)));
  EXPECT_NE(flatten(build_schedule(dbs, 4, 4, 77, 2)), flatten(build_schedule(dbs, 4, 4, 77, 3)));
}

TEST(Schedule, Errors) {
  auto dbs = toy_schedule_dbs();
  EXPECT_THROW(build_schedule(dbs, 9, 1, 1), Error);  // aqa has 8 training samples
  EXPECT_THROW(build_schedule(dbs, 4, 0, 1), Error);
  EXPECT_THROW(build_schedule({}, 4, 1, 1), Error);
  dbs[1].steps_per_epoch = 0;
  EXPECT_THROW(build_schedule(dbs, 4, 1, 1), Error);
}

TEST(Schedule, AutoFactorAndStepsRule) {
  EXPECT_EQ(auto_audio_repeat_factor(toy_schedule_dbs()), 3u);  // visual mean 5, audio 2
  std::vector<ScheduleDatabase> visual_only{{"v", Modality::video, 5, ids("v", 20)}};
  EXPECT_EQ(auto_audio_repeat_factor(visual_only), 1u);

  const auto data = make_training_data({tiny_database("d", Modality::image, 20, 1)}, 3);
  const auto entries = schedule_databases(data, 4, false);
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entries[0].train_ids.size(), 14u);
  EXPECT_EQ(entries[0].steps_per_epoch, 4u);  // ceil(14 / 4)
}

TEST(PhaseConfigs, LossesTrainableSetsAndDefaults) {
  const TrainingConfig t;
  const PhaseConfig s1 = make_phase_config(t, Phase::step1, 1);
  const PhaseConfig s2 = make_phase_config(t, Phase::step2, 1);
  const PhaseConfig s3 = make_phase_config(t, Phase::step3, 1);
  EXPECT_EQ(s1.loss, LossKind::combined);
  EXPECT_EQ(s2.loss, LossKind::srcc_soft);
  EXPECT_EQ(s3.loss, LossKind::srcc_soft);
  EXPECT_EQ(s1.epochs, 20u);
  EXPECT_EQ(s2.epochs, 10u);
  EXPECT_EQ(s3.epochs, 10u);
  for (const auto* c : {&s1, &s2, &s3}) {
    EXPECT_EQ(c->learning_rate, 1e-5);
    EXPECT_EQ(c->batch_size, 8u);
    EXPECT_EQ(c->audio_repeat_factor, 4u);
    EXPECT_EQ(std::count(c->trainable.begin(), c->trainable.end(), ParamGroup::motion), 0);
  }
  EXPECT_FALSE(s1.extractors_frozen());
  EXPECT_FALSE(s2.extractors_frozen());
  EXPECT_TRUE(s3.extractors_frozen());
  EXPECT_EQ(s3.trainable, std::vector<ParamGroup>{ParamGroup::head});
  EXPECT_NE(s1.seed, s2.seed);
  EXPECT_NE(s2.seed, s3.seed);
  EXPECT_EQ(s1.seed, make_phase_config(t, Phase::step1, 1).seed);

  TrainingConfig wts = t;
  wts.strategy = Strategy::wts;
  EXPECT_EQ(make_phase_config(wts, Phase::step1, 1).audio_repeat_factor, 1u);

  TrainingConfig lrs = t;
  lrs.strategy = Strategy::lrs;
  const PhaseConfig l2 = make_phase_config(lrs, Phase::step2, 1);
  EXPECT_EQ(l2.loss, LossKind::mse);
  EXPECT_TRUE(l2.rescale_targets);
  EXPECT_EQ(l2.epochs, 30u);
}

struct ToyRun {
  RunConfig config = tiny_run_config();
  TrainingData data;
  PreparedCache cache;

  explicit ToyRun(std::size_t n = 20) {
    std::vector<std::shared_ptr<const Database>> dbs;
    std::uint64_t seed = 40;
    for (Modality m : kAllModalities)
      dbs.push_back(tiny_database(std::string("toy_") + std::string(to_string(m)), m, n, seed++));
    data = make_training_data(std::move(dbs), config.seed);
  }

  PhaseConfig phase(Phase p) const { return make_phase_config(config.training, p, config.seed); }
};

TEST(Phases, StepLawsAcrossThePipeline) {
  ToyRun run;
  ModelState state(run.config.model);
  MetricsLog log;
  const auto motion = state.motion_checksum();

  const PhaseReport r1 = run_step1(state, run.data, run.phase(Phase::step1), run.cache, &log);
  EXPECT_EQ(state.heads().size(), 4u);
  for (const auto& h : state.heads()) EXPECT_EQ(h.kind, HeadKind::database_specific);
  EXPECT_EQ(state.motion_checksum(), motion);
  EXPECT_EQ(r1.epoch_train_loss.size(), 2u);
  EXPECT_EQ(r1.epoch_val_srcc.size(), 2u);
  EXPECT_LT(r1.best_epoch, 2u);

  const PhaseReport r2 = run_step2(state, run.data, run.phase(Phase::step2), run.cache, &log);
  EXPECT_EQ(state.phase(), Phase::step2);
  ASSERT_EQ(state.heads().size(), 4u);
  for (const auto& h : state.heads()) EXPECT_EQ(h.kind, HeadKind::modality_specific);
  EXPECT_EQ(state.motion_checksum(), motion);
  for (double v : r2.epoch_val_srcc) EXPECT_TRUE(std::isfinite(v));

  const auto spatial = state.spatial_checksum(), audio = state.audio_checksum(), heads = state.head_checksum();
  const PhaseReport r3 = run_step3(state, run.data, run.phase(Phase::step3), run.cache, &log);
  EXPECT_EQ(state.phase(), Phase::step3);
  EXPECT_EQ(state.spatial_checksum(), spatial);
  EXPECT_EQ(state.audio_checksum(), audio);
  EXPECT_EQ(state.motion_checksum(), motion);
  EXPECT_GT(r3.steps, 0u);
  // The retained state is the best epoch; a change is only guaranteed when
  // the best epoch saw updates, which every epoch does here.
  EXPECT_NE(state.head_checksum(), heads);

  std::map<std::string, std::size_t> val_rows;
  for (const auto& rec : log.records()) {
    if (rec["type"] == "val") {
      ++val_rows[rec["phase"].get<std::string>()];
      EXPECT_TRUE(std::isfinite(rec["srcc"].get<double>()));
    }
  }
  for (const char* p : {"step1", "step2", "step3"}) EXPECT_EQ(val_rows[p], 2u * 4u) << p;
}

TEST(Phases, PhaseOrderIsEnforced) {
  ToyRun run;
  ModelState state(run.config.model);
  EXPECT_THROW(run_step3(state, run.data, run.phase(Phase::step3), run.cache), Error);
  EXPECT_THROW(run_step1(state, run.data, run.phase(Phase::step2), run.cache), Error);
  PhaseConfig unfrozen = run.phase(Phase::step3);
  unfrozen.trainable.push_back(ParamGroup::spatial);
  run_step1(state, run.data, run.phase(Phase::step1), run.cache);
  run_step2(state, run.data, run.phase(Phase::step2), run.cache);
  EXPECT_THROW(run_step3(state, run.data, unfrozen, run.cache), Error);
}

TEST(Phases, StepOneLowersTrainingLoss) {
  ToyRun run;
  run.config.training.step1 = {6, 1e-2};
  ModelState state(run.config.model);
  const PhaseReport r = run_step1(state, run.data, run.phase(Phase::step1), run.cache);
  ASSERT_EQ(r.epoch_train_loss.size(), 6u);
  EXPECT_LT(r.epoch_train_loss.back(), r.epoch_train_loss.front());
}

std::vector<std::shared_ptr<const Database>> with_mos(const std::shared_ptr<const Database>& db,
                                                      const std::function<double(double)>& f, MosRange range) {
  Database copy = *db;
  copy.spec.mos_range = range;
  for (auto& s : copy.samples) s.mos = f(s.mos);
  return {std::make_shared<const Database>(std::move(copy))};
}

TEST(Phases, StepTwoLossesInvariantToAffineMos) {
  ToyRun run;
  ModelState start(run.config.model);
  run_step1(start, run.data, run.phase(Phase::step1), run.cache);

  auto collect = [&](const TrainingData& data) {
    ModelState state = start;
    MetricsLog log;
    run_step2(state, data, run.phase(Phase::step2), run.cache, &log);
    std::vector<double> losses;
    for (const auto& rec : log.records())
      if (rec["type"] == "train") losses.push_back(rec["loss"].get<double>());
    return std::make_pair(losses, state.head_checksum());
  };

  TrainingData mutated = run.data;
  mutated.databases[0] = with_mos(run.data.databases[0], [](double s) { return 3.0 * s + 7.0; }, {10.0, 22.0})[0];
  const auto a = collect(run.data);
  const auto b = collect(mutated);
  ASSERT_FALSE(a.first.empty());
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Phases, ConstantMosBatchesSkippedWithWarning) {
  ToyRun run;
  ModelState state(run.config.model);
  run_step1(state, run.data, run.phase(Phase::step1), run.cache);
  TrainingData flat = run.data;
  flat.databases[1] = with_mos(run.data.databases[1], [](double) { return 3.0; }, {1.0, 5.0})[0];
  const auto warnings = warning_count().load();
  PhaseConfig cfg = run.phase(Phase::step2);
  cfg.epochs = 1;
  const PhaseReport r = run_step2(state, flat, cfg, run.cache);
  const auto entries = schedule_databases(flat, cfg.batch_size, false);
  EXPECT_EQ(r.skipped_batches, entries[1].steps_per_epoch);
  EXPECT_GE(warning_count().load(), warnings + r.skipped_batches);
  EXPECT_GT(r.steps, 0u);
}

TEST(Phases, UnregisteredDatabaseInDraw) {
  ToyRun run;
  ModelState state(run.config.model);
  TrainingData broken = run.data;
  broken.split.databases.erase(run.data.databases[0]->spec.name);
  EXPECT_THROW(run_step1(state, broken, run.phase(Phase::step1), run.cache), Error);
  TrainingData ghost = run.data;
  for (auto& id : ghost.split.databases.at(run.data.databases[0]->spec.name).train) id = "ghost";
  EXPECT_THROW(run_step1(state, ghost, run.phase(Phase::step1), run.cache), Error);
}

TEST(Pipeline, ToyRunEmitsCheckpointsAndLog) {
  ToyRun run;
  const auto dir = scratch_dir("pipeline_toy");
  const PipelineResult r = run_full_pipeline(run.data, run.config, {dir, false}, &run.cache);
  EXPECT_TRUE(r.completed);
  ASSERT_EQ(r.phases.size(), 3u);
  for (Phase p : {Phase::step1, Phase::step2, Phase::step3})
    EXPECT_TRUE(fs::exists(dir / (std::string(to_string(p)) + ".ckpt")));
  EXPECT_TRUE(fs::exists(r.final_checkpoint));
  const LoadedCheckpoint ck = load_checkpoint(r.final_checkpoint, config_hash(run.config));
  EXPECT_EQ(ck.state.phase(), Phase::step3);
  EXPECT_EQ(ck.state.head_checksum(), r.state.head_checksum());

  std::ifstream in(dir / "metrics.jsonl");
  std::string line;
  std::map<std::string, std::size_t> epochs;
  while (std::getline(in, line)) {
    const json rec = json::parse(line);
    if (rec["type"] == "phase") epochs[rec["phase"].get<std::string>()] = rec["epochs"].get<std::size_t>();
  }
  EXPECT_EQ(epochs, (std::map<std::string, std::size_t>{{"step1", 2}, {"step2", 2}, {"step3", 2}}));
}

TEST(Pipeline, ResumeAfterStepOneIsBitIdentical) {
  ToyRun run;
  const auto straight = scratch_dir("pipeline_straight");
  const auto resumed = scratch_dir("pipeline_resumed");
  const PipelineResult full = run_full_pipeline(run.data, run.config, {straight, false}, &run.cache);

  PipelineOptions interrupted{resumed, false};
  interrupted.stop_after = Phase::step1;
  const PipelineResult partial = run_full_pipeline(run.data, run.config, interrupted, &run.cache);
  EXPECT_FALSE(partial.completed);
  EXPECT_FALSE(fs::exists(resumed / "step2.ckpt"));
  EXPECT_EQ(checkpoint_digest(resumed / "step1.ckpt"), checkpoint_digest(straight / "step1.ckpt"));

  const PipelineResult rest = run_full_pipeline(run.data, run.config, {resumed, true}, &run.cache);
  EXPECT_TRUE(rest.completed);
  EXPECT_EQ(rest.phases.size(), 2u);
  EXPECT_EQ(checkpoint_digest(rest.final_checkpoint), checkpoint_digest(full.final_checkpoint));

  RunConfig other = run.config;
  other.training.step3.learning_rate = 2e-3;
  EXPECT_THROW(run_full_pipeline(run.data, other, {resumed, true}, &run.cache), Error);
}

TEST(Pipeline, LinearRescaleBaselineRuns) {
  ToyRun run;
  run.config.training.strategy = Strategy::lrs;
  const PipelineResult r = run_full_pipeline(run.data, run.config, {}, &run.cache);
  EXPECT_TRUE(r.completed);
  ASSERT_EQ(r.phases.size(), 2u);
  EXPECT_EQ(r.phases[0].epoch_train_loss.size(), 4u);  // step1 + step2 epochs
  EXPECT_EQ(r.state.heads().size(), 4u);
}

TEST(MetricsLogFile, AppendOnlyLines) {
  const auto dir = scratch_dir("metrics_log");
  {
    MetricsLog log(dir / "sub" / "m.jsonl");
    log.append({{"a", 1}});
    log.append({{"b", 2}});
    EXPECT_EQ(log.records().size(), 2u);
  }
  MetricsLog again(dir / "sub" / "m.jsonl");
  again.append({{"c", 3}});
  std::ifstream in(dir / "sub" / "m.jsonl");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  EXPECT_EQ(lines, (std::vector<std::string>{R"({"a":1})", R"({"b":2})", R"({"c":3})"}));
}

}  // namespace
}  // namespace unqa
