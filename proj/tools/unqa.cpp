// unqa command line: train, eval, cross-eval, report, gen-data.
//
// Every flag can also come from the environment (UNQA_CONFIG, UNQA_CHECKPOINT,
// UNQA_REPEATS, UNQA_HELD_OUT, UNQA_RUN, UNQA_OUT, UNQA_ABLATION). UNQA_RUN_DIR,
// UNQA_DATA_DIR and UNQA_SEED override the corresponding config fields.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "unqa/report.hpp"
#include "unqa/run.hpp"

namespace {

using unqa::json;

void print_error(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << std::endl;
}

unqa::RunConfig load_config(const std::string& path) {
  unqa::RunConfig config = unqa::load_run_config(path);
  if (const char* v = std::getenv("UNQA_RUN_DIR")) config.run_dir = v;
  if (const char* v = std::getenv("UNQA_DATA_DIR")) config.data_dir = v;
  if (const char* v = std::getenv("UNQA_SEED")) {
    try {
      config.seed = std::stoull(v);
    } catch (const std::exception&) {
      throw unqa::Error(unqa::ErrorCode::parse_error, std::string("UNQA_SEED '") + v + "' is not an integer");
    }
  }
  return config;
}

void print_report(const unqa::EvalReport& report) {
  std::cout << unqa::detail::text_table(unqa::metrics_table(report));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified no-reference quality assessment: training, evaluation and reporting"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_dir;
  std::size_t repeats = 0;
  bool ablation = false, no_resume = false;
  std::vector<std::string> held_out, runs;

  auto* train = app.add_subcommand("train", "run the three training steps");
  train->add_option("--config", config_path, "run config (JSON)")->required()->envname("UNQA_CONFIG");
  train->add_flag("--no-resume", no_resume, "ignore existing step checkpoints");

  auto* eval = app.add_subcommand("eval", "repeated-split evaluation");
  eval->add_option("--config", config_path, "run config (JSON)")->required()->envname("UNQA_CONFIG");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file, directory of repeat_<k>/final.ckpt, or 'retrain'")
      ->required()
      ->envname("UNQA_CHECKPOINT");
  eval->add_option("--repeats", repeats, "number of repeats (default from config, 10)")->envname("UNQA_REPEATS");

  auto* cross = app.add_subcommand("cross-eval", "zero-shot scoring of held-out databases");
  cross->add_option("--config", config_path, "run config (JSON)")->required()->envname("UNQA_CONFIG");
  cross->add_option("--checkpoint", checkpoint, "checkpoint file (default <run_dir>/final.ckpt)")
      ->envname("UNQA_CHECKPOINT");
  cross->add_option("--held-out", held_out, "held-out manifests (default: config held_out)")->envname("UNQA_HELD_OUT");

  auto* report = app.add_subcommand("report", "tables and plots from run directories");
  report->add_option("--run", runs, "run directory; several give a comparison table")->required()->envname("UNQA_RUN");
  report->add_option("--out", out_dir, "output directory (default <first run>/report)")->envname("UNQA_OUT");
  report->add_flag("--ablation", ablation, "criterion x strategy table")->envname("UNQA_ABLATION");

  auto* gen = app.add_subcommand("gen-data", "write the config's synthetic databases as manifests");
  gen->add_option("--config", config_path, "run config (JSON)")->required()->envname("UNQA_CONFIG");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }

  try {
    if (*train) {
      const auto config = load_config(config_path);
      const auto result = unqa::train_run(config, !no_resume);
      std::cout << json{{"final_checkpoint", result.final_checkpoint.string()},
                        {"config_hash", unqa::config_hash(config)},
                        {"phases", result.phases.size()}}
                       .dump()
                << std::endl;
    } else if (*eval) {
      auto config = load_config(config_path);
      if (repeats) config.evaluation.repeats = repeats;
      print_report(unqa::eval_run(config, checkpoint));
    } else if (*cross) {
      const auto config = load_config(config_path);
      if (checkpoint.empty()) checkpoint = (std::filesystem::path(config.run_dir) / "final.ckpt").string();
      print_report(unqa::cross_eval_run(config, checkpoint, held_out));
    } else if (*report) {
      std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
      unqa::ReportOptions ro;
      ro.out_dir = out_dir;
      ro.ablation = ablation;
      for (const auto& p : unqa::write_report(dirs, ro)) std::cout << p.string() << "\n";
    } else if (*gen) {
      for (const auto& p : unqa::generate_data(load_config(config_path))) std::cout << p.string() << "\n";
    }
  } catch (const unqa::Error& e) {
    print_error(std::string(unqa::to_string(e.code())), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}
