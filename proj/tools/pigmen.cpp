// pigmen command-line front end. Exit codes: 0 success, 1 numerical failure,
// 2 usage or I/O error.

#include "pigmen/app.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace app = pigmen::app;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;

  void attach(CLI::App* cmd, bool config_required = true) {
    auto* opt = cmd->add_option("--config", config, "run config (JSON)")->check(CLI::ExistingFile);
    if (config_required) opt->required();
    cmd->add_option("--seed", seed, "overrides the config's seed");
    cmd->add_option("--out", out, "output directory (overrides the config's 'out')");
  }

  app::RunConfig load() const { return app::load_config(config, seed, out); }
};

int run(int argc, char** argv) {
  CLI::App cli{"pigmen: physics-informed graph mesh networks"};
  cli.require_subcommand(1);

  auto* mesh_cmd = cli.add_subcommand("mesh", "mesh utilities");
  mesh_cmd->require_subcommand(1);
  auto* gen = mesh_cmd->add_subcommand("gen", "generate a mesh: <kind> <params...>");
  std::vector<std::string> gen_spec;
  std::string gen_out = ".";
  gen->add_option("spec", gen_spec, "generator kind and parameters, e.g. rectangle 4 4")->required();
  gen->add_option("--out", gen_out, "output directory for mesh.txt and manifest.json");

  CommonFlags solve_flags, train_flags, eval_flags, ablation_flags;
  auto* solve = cli.add_subcommand("solve", "reference FEM solution for the configured case");
  solve_flags.attach(solve);
  auto* train = cli.add_subcommand("train", "train a model on the configured mesh");
  train_flags.attach(train);
  auto* eval = cli.add_subcommand("eval", "evaluate a checkpoint on the configured mesh");
  eval_flags.attach(eval);
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required()->check(CLI::ExistingFile);
  auto* ablation = cli.add_subcommand("ablation", "train the three model variants and compare test errors");
  ablation_flags.attach(ablation);

  auto* gap = cli.add_subcommand("demo-gap", "derivative of a field-dependent model: autodiff vs FEM kernel");
  app::GapOptions gap_opts;
  std::string gap_out;
  gap->add_option("--alpha", gap_opts.alpha, "field coefficient")->capture_default_str();
  gap->add_option("--beta", gap_opts.beta, "coordinate coefficients (one value is broadcast)")->expected(1, 2);
  gap->add_option("--gamma", gap_opts.gamma, "offset")->capture_default_str();
  gap->add_option("--phi", gap_opts.phi, "phi(x): x^2, x^3 or x*y")->capture_default_str();
  gap->add_option("--points", gap_opts.points, "x-coordinates on the strip mid-line, in [0, 2]")->expected(1, -1);
  gap->add_option("--levels", gap_opts.levels, "refinement levels")->capture_default_str();
  gap->add_option("--out", gap_out, "directory for demo_gap.json");

  auto* exp = cli.add_subcommand("export", "write a field as legacy VTK or CSV");
  std::string field_path, mesh_path, format = "vtk_legacy", export_out;
  exp->add_option("--field", field_path, "field file")->required()->check(CLI::ExistingFile);
  exp->add_option("--mesh", mesh_path, "mesh file")->required()->check(CLI::ExistingFile);
  exp->add_option("--format", format, "vtk_legacy or csv")->capture_default_str();
  exp->add_option("--out", export_out, "output file")->required();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return cli.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return cli.exit(e);
  } catch (const CLI::ParseError& e) {
    cli.exit(e);
    return app::kUsageOrIo;
  }

  app::thread_cap();  // reject a malformed PIGMEN_THREADS early

  if (*gen) {
    std::string spec;
    for (const auto& s : gen_spec) spec += (spec.empty() ? "" : " ") + s;
    const auto manifest = app::cmd_mesh_gen(spec, gen_out);
    std::cout << manifest.dump(2) << "\n";
  } else if (*solve) {
    std::cout << app::cmd_solve(solve_flags.load()).dump(2) << "\n";
  } else if (*train) {
    const auto out = app::cmd_train(train_flags.load(), &std::cerr);
    std::cout << out.metrics.dump(2) << "\n";
  } else if (*eval) {
    std::cout << app::cmd_eval(checkpoint, eval_flags.load()).dump(2) << "\n";
  } else if (*ablation) {
    const auto cfg = ablation_flags.load();
    const auto metrics = app::cmd_ablation(cfg, &std::cerr);
    std::cout << app::read_text(std::filesystem::path(cfg.out) / "ablation.txt");
    const auto& ord = metrics["orderings"];
    std::cout << "coordinate MLP worst on test: " << (ord["coordinate_mlp_worst_on_test"].get<bool>() ? "yes" : "no")
              << "\nhybrid loss not worse than MAE-only on test: "
              << (ord["hybrid_not_worse_than_mae_on_test"].get<bool>() ? "yes" : "no") << "\n";
    for (const auto& v : metrics["variants"]) {
      if (v["diverged"].get<bool>()) std::cerr << "warning: variant " << v["variant"].get<std::string>() << " diverged\n";
    }
    if (!ord["coordinate_mlp_worst_on_test"].get<bool>() || !ord["hybrid_not_worse_than_mae_on_test"].get<bool>()) {
      std::cerr << "pigmen: ablation ordering not met\n";
      return app::kNumericalFailure;
    }
  } else if (*gap) {
    const auto report = app::cmd_demo_gap(gap_opts);
    if (!gap_out.empty()) {
      app::ensure_dir(gap_out);
      app::write_json(std::filesystem::path(gap_out) / "demo_gap.json", report);
    }
    std::cout << app::render_demo_gap(report);
  } else if (*exp) {
    app::cmd_export(field_path, mesh_path, app::parse_export_format(format), export_out);
  }
  return app::kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "pigmen: error: " << e.what() << "\n";
    return app::exit_code_for(e);
  }
}
