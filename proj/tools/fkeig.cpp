// fkeig: train, evaluate and reference subcommands.
// Exit codes: 0 success, 1 usage or input error, 2 numerical failure.

#include "fkeig/commands.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

struct RunSource {
  std::string config;
  std::string preset;
  std::string scale = "full";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> iterations;

  void add_to(CLI::App* cmd) {
    auto* c = cmd->add_option("--config", config, "INI config file");
    auto* p = cmd->add_option("--preset", preset, "built-in preset name (see `fkeig presets`)");
    c->excludes(p);
    cmd->add_option("--scale", scale, "full or desk")->check(CLI::IsMember({"full", "desk"}));
    cmd->add_option("--seed", seed, "override training.seed");
    cmd->add_option("--workers", workers, "override training.workers");
    cmd->add_option("--iterations", iterations, "override training.iterations");
  }

  fkeig::RunConfig resolve() const {
    if (config.empty() && preset.empty()) throw fkeig::ConfigError("need --config or --preset");
    fkeig::RunConfig rc = config.empty() ? fkeig::preset(preset) : fkeig::load_config(config);
    fkeig::apply_scale(rc, fkeig::parse_scale(scale));
    if (seed) rc.train.seed = *seed;
    if (workers) rc.train.workers = *workers;
    if (iterations) {
      // Keep "lambda frozen for the whole run" presets frozen for the whole run.
      if (rc.train.lambda_freeze_steps >= rc.train.iterations) rc.train.lambda_freeze_steps = *iterations;
      rc.train.iterations = *iterations;
    }
    fkeig::validate(rc);
    return rc;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural-network eigensolver with a Feynman-Kac fixed-point loss"};
  app.require_subcommand(1);

  RunSource train_src;
  fkeig::TrainOptions train_opts;
  std::string train_out = "out";
  std::string resume;
  auto* train = app.add_subcommand("train", "train a network on a configured problem");
  train_src.add_to(train);
  train->add_option("--out", train_out, "output directory");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_flag("--quiet", train_opts.quiet, "no per-record progress lines");

  RunSource eval_src;
  std::string eval_out = "out";
  std::string checkpoint;
  auto* evaluate = app.add_subcommand("evaluate", "recompute validation metrics of a checkpoint");
  eval_src.add_to(evaluate);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evaluate->add_option("--out", eval_out, "output directory");

  fkeig::ReferenceOptions ref;
  std::string ref_csv;
  auto* reference = app.add_subcommand("reference", "1-D spectral reference eigenpairs");
  reference->add_option("--c", ref.c, "potential coefficient c in c cos(freq x)");
  reference->add_option("--freq", ref.freq, "potential frequency")->check(CLI::PositiveNumber);
  reference->add_option("--k", ref.k, "1-based eigenpair indices")->delimiter(',');
  reference->add_option("--modes", ref.modes, "Fourier modes -N..N");
  reference->add_option("--csv", ref_csv, "write sampled eigenfunctions to this CSV");
  reference->add_option("--samples", ref.samples, "grid points for --csv");

  std::string presets_dir;
  auto* presets = app.add_subcommand("presets", "list presets or write them as INI files");
  presets->add_option("--write", presets_dir, "directory to write <name>.ini files into");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      train_opts.out = train_out;
      if (!resume.empty()) train_opts.resume = resume;
      auto rc = train_src.resolve();
      auto outcome = fkeig::cmd_train(rc, train_opts);
      const auto& s = outcome.summary;
      std::cout << "finished " << rc.name << " after " << outcome.steps << " steps: lambda "
                << fkeig::detail::csv_number(s.lambda);
      if (s.has_reference) {
        std::cout << " (reference " << fkeig::detail::csv_number(s.reference_lambda)
                  << ")  err_lambda " << fkeig::detail::csv_number(s.err_lambda) << "  err_psi "
                  << fkeig::detail::csv_number(s.err_psi_l2) << "  err_psi_inf "
                  << fkeig::detail::csv_number(s.err_psi_inf) << "  err_grad "
                  << fkeig::detail::csv_number(s.err_grad);
      }
      std::cout << "\nartifacts in " << train_opts.out.string() << '\n';
    } else if (*evaluate) {
      auto rc = eval_src.resolve();
      auto e = fkeig::cmd_evaluate(rc, checkpoint, eval_out);
      std::cout << "step " << e.step << "  lambda " << fkeig::detail::csv_number(e.lambda)
                << "  err_lambda " << fkeig::detail::csv_number(e.metrics.err_lambda)
                << "  err_psi " << fkeig::detail::csv_number(e.metrics.err_psi_l2)
                << "  err_psi_inf " << fkeig::detail::csv_number(e.metrics.err_psi_inf)
                << "  err_grad " << fkeig::detail::csv_number(e.metrics.err_grad) << '\n';
    } else if (*reference) {
      if (!ref_csv.empty()) ref.csv = ref_csv;
      fkeig::cmd_reference(ref, std::cout);
    } else if (*presets) {
      for (const auto& name : fkeig::preset_names()) {
        std::cout << name << '\n';
        if (!presets_dir.empty()) {
          std::filesystem::create_directories(presets_dir);
          std::ofstream f(std::filesystem::path(presets_dir) / (name + ".ini"));
          if (!f) throw std::runtime_error("cannot write into " + presets_dir);
          f << fkeig::to_ini(fkeig::preset(name));
        }
      }
    }
  } catch (const fkeig::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
