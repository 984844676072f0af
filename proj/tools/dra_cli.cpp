#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dra/errors.hpp"
#include "dra/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dra;

namespace {

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  bool force = false;
  bool quiet = false;
};

void add_config_args(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "run configuration (JSON)");
  cmd->add_option("--set", args.overrides, "override a config field, e.g. recipe.lambda=0.6")->take_all();
  cmd->add_flag("--force", args.force, "continue over a partial run with a different configuration");
  cmd->add_flag("-q,--quiet", args.quiet, "suppress stage log lines");
}

pipeline::RunConfig load_config(const ConfigArgs& args, const std::vector<std::string>& extra = {}) {
  json j = json::object();
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw ConfigError("cannot open config file " + args.config_path);
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(args.config_path + ": " + e.what());
    }
  }
  pipeline::apply_overrides(j, args.overrides);
  pipeline::apply_overrides(j, extra);
  return pipeline::RunConfig::from_json(j);
}

pipeline::PipelineResult run_stages(const ConfigArgs& args, const pipeline::RunConfig& cfg, std::set<std::string> kinds) {
  pipeline::PipelineOptions opt;
  opt.force = args.force;
  opt.stage_kinds = std::move(kinds);
  if (!args.quiet) opt.log = [](const std::string& line) { std::cerr << line << '\n'; };
  auto r = pipeline::run_pipeline(cfg, opt);
  std::cout << "run directory: " << r.run_dir.string() << "\n"
            << "stages executed: " << r.executed() << ", skipped: " << r.skipped() << "\n";
  return r;
}

fs::path run_dir_of(const ConfigArgs& args, const std::string& explicit_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  return pipeline::resolve_output_dir(load_config(args));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dra: adversarial training with diffusion representation alignment"};
  app.require_subcommand(1);

  ConfigArgs args;
  std::string run_dir, table;

  auto* train_diffusion = app.add_subcommand("train-diffusion", "train the diffusion model for a run");
  auto* gen_synth = app.add_subcommand("gen-synth", "sample the synthetic pool from the trained diffusion model");
  auto* train_robust = app.add_subcommand("train-robust", "adversarially train every configured (arm, seed) cell");
  auto* eval = app.add_subcommand("eval", "evaluate trained cells (clean and robust accuracy)");
  auto* analyze = app.add_subcommand("analyze", "run the representation analyses on trained cells");
  auto* sweep = app.add_subcommand("sweep-lambda", "train and evaluate the lambda sweep");
  auto* run = app.add_subcommand("run", "run every stage of the pipeline");
  for (auto* c : {train_diffusion, gen_synth, train_robust, eval, analyze, sweep, run}) add_config_args(c, args);

  auto* report = app.add_subcommand("report", "write tables, maps and curves under <run>/report");
  auto* compare = app.add_subcommand("compare", "print the comparison against a shipped reference table");
  for (auto* c : {report, compare}) {
    c->add_option("-c,--config", args.config_path, "run configuration (JSON)");
    c->add_option("--set", args.overrides, "override a config field")->take_all();
    c->add_option("--run-dir", run_dir, "run directory (instead of a config)");
  }
  compare->add_option("--table", table, "table1, table2 or table3")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train_diffusion) {
      run_stages(args, load_config(args), {"diffusion"});
    } else if (*gen_synth) {
      run_stages(args, load_config(args), {"synthetic"});
    } else if (*train_robust) {
      run_stages(args, load_config(args), {"pretrain", "train"});
    } else if (*eval) {
      run_stages(args, load_config(args), {"eval"});
    } else if (*analyze) {
      run_stages(args, load_config(args), {"analysis"});
    } else if (*sweep) {
      run_stages(args, load_config(args, {"sweep.enabled=true"}), {"diffusion", "synthetic", "pretrain", "sweep"});
    } else if (*run) {
      run_stages(args, load_config(args), {});
    } else if (*report) {
      const auto summary = pipeline::emit_report(run_dir_of(args, run_dir));
      for (const auto& f : summary.files) std::cout << f.string() << "\n";
      for (const auto& n : summary.notices) std::cerr << "notice: " << n << "\n";
    } else if (*compare) {
      const fs::path dir = run_dir_of(args, run_dir);
      const auto& fixture = report::fixture_by_id(table);
      const auto t = pipeline::compare_to_reference(pipeline::Ledger(dir / "results.jsonl").rows(),
                                                    pipeline::Ledger(dir / "analysis.jsonl").rows(), fixture);
      std::cout << t.to_json().dump(2) << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IngestionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
