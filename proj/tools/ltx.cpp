// ltx: command-line front end for the pruning / explanation pipeline.
//
//   ltx run --config exp.json [--out DIR] [--force]
//   ltx {train|prune|concepts|pcbm|gradcam|report} --config exp.json [--out DIR] [--force]
//   ltx export-data --config exp.json --dir DIR
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid invocation or config.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ltx/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON)")->required();
  cmd->add_option("--out", o.out, "output directory (overrides output_dir)");
  cmd->add_flag("--force", o.force, "overwrite existing outputs in place");
}

int execute(const Options& o, std::optional<ltx::Stage> stage) {
  ltx::ExperimentConfig cfg = ltx::load_config(o.config);
  if (!o.out.empty()) cfg.output_dir = o.out;
  const ltx::fs::path run_dir = ltx::fs::path(cfg.output_dir) / cfg.run_id;
  const ltx::RunLocation loc = ltx::resolve_run_location(run_dir, stage, o.force);
  if (loc.rerun) std::cerr << "existing outputs kept; writing to " << loc.output.string() << "\n";
  ltx::Pipeline p(cfg, loc.input, loc.output, ltx::default_threads());
  if (stage) {
    p.run_stage(*stage);
  } else {
    p.run_all();
  }
  std::cout << loc.output.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lottery-ticket pruning with concept and Grad-CAM explanations"};
  app.require_subcommand(1);
  Options opts;
  std::string export_dir;

  CLI::App* run = app.add_subcommand("run", "run every stage");
  add_common(run, opts);
  std::vector<std::pair<CLI::App*, ltx::Stage>> stages;
  for (ltx::Stage s : ltx::all_stages()) {
    CLI::App* cmd = app.add_subcommand(ltx::stage_name(s), "run the " + ltx::stage_name(s) + " stage only");
    add_common(cmd, opts);
    stages.emplace_back(cmd, s);
  }
  CLI::App* exp = app.add_subcommand("export-data", "write the configured dataset as PGM planes + manifest.csv");
  exp->add_option("--config", opts.config, "experiment config (JSON)")->required();
  exp->add_option("--dir", export_dir, "destination directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) return execute(opts, std::nullopt);
    for (const auto& [cmd, s] : stages)
      if (cmd->parsed()) return execute(opts, s);
    if (exp->parsed()) {
      const ltx::ExperimentConfig cfg = ltx::load_config(opts.config);
      ltx::Pipeline p(cfg, {}, {}, ltx::default_threads());
      ltx::export_dataset(p.dataset(), export_dir);
      return 0;
    }
  } catch (const ltx::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ltx::ErrorCode::Config ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
