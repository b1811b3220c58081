#include "fkeig/commands.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using namespace fkeig;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("fkeig_test_" + name);
  fs::remove_all(p);
  return p;
}

// A d=1 problem small enough to train for a few dozen steps in a test.
RunConfig tiny() {
  RunConfig rc = preset("ls_d1_desk");
  rc.name = "tiny";
  rc.train.hidden = {8};
  rc.train.batch = 32;
  rc.train.intervals = 10;
  rc.train.iterations = 20;
  rc.train.record_every = 5;
  rc.train.learning_rate = Schedule({1e-3, 5e-4}, {10});
  rc.train.gamma = Schedule({0.2, 0.5}, {10});
  rc.output.density_bins = 8;
  rc.output.smooth_window = 2;
  return rc;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FKEIG_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST(Config, ShippedIniFilesMatchPresets) {
  const fs::path dir = fs::path(FKEIG_SOURCE_DIR) / "configs";
  for (const auto& name : preset_names()) {
    SCOPED_TRACE(name);
    const auto path = dir / (name + ".ini");
    ASSERT_TRUE(fs::exists(path));
    EXPECT_EQ(to_ini(load_config(path.string())), to_ini(preset(name)));
  }
}

TEST(Config, PresetsMatchPublishedSchedules) {
  auto c = preset("nls_d10");
  EXPECT_EQ(c.problem.kind, ProblemKind::NonlinearSchrodinger);
  EXPECT_EQ(c.problem.dim, 10u);
  EXPECT_DOUBLE_EQ(c.train.horizon, 0.3);
  EXPECT_EQ(c.train.intervals, 200u);
  EXPECT_EQ(c.train.batch, 2048u);
  EXPECT_EQ(c.train.iterations, 80000u);
  EXPECT_EQ(c.train.hidden, (std::vector<std::size_t>{300, 300, 300}));
  EXPECT_DOUBLE_EQ(c.train.gamma.at(40000), 0.1);
  EXPECT_DOUBLE_EQ(c.train.gamma.at(40001), 0.9);
  EXPECT_DOUBLE_EQ(c.train.learning_rate.at(80000), 1e-5);

  auto dw = preset("dw_d10_second");
  EXPECT_EQ(dw.train.lambda_freeze_steps, 20000u);
  EXPECT_TRUE(dw.second.enabled);
  EXPECT_DOUBLE_EQ(dw.second.lambda_offset, 0.1);
  EXPECT_DOUBLE_EQ(dw.problem.coefficients.at(0), 1.5);
  EXPECT_DOUBLE_EQ(dw.problem.coefficients.at(9), 0.2);
  EXPECT_DOUBLE_EQ(dw.train.gamma.at(40001), 0.99);

  auto d1 = preset("dw_d1_first");
  EXPECT_EQ(d1.train.hidden, (std::vector<std::size_t>{40, 40}));
  EXPECT_EQ(d1.train.batch, 512u);
  EXPECT_EQ(d1.train.iterations, 6000u);
  EXPECT_THROW(preset("fp_d3"), ConfigError);
}

TEST(Config, IniRoundTripIsExact) {
  for (const auto& name : preset_names()) {
    RunConfig rc = preset(name);
    rc.train.lambda_init = 0.1 + 0.2;  // not representable in a short decimal
    rc.train.clip.lower = -4.75;
    std::istringstream in(to_ini(rc));
    EXPECT_EQ(to_ini(parse_config(in)), to_ini(rc)) << name;
  }
}

TEST(Config, PresetKeyIsOverriddenByLaterKeys) {
  std::istringstream in("[run]\npreset = fp_d5\nname = mine\n[training]\nseed = 7\n");
  auto rc = parse_config(in);
  EXPECT_EQ(rc.name, "mine");
  EXPECT_EQ(rc.train.seed, 7u);
  EXPECT_EQ(rc.problem.kind, ProblemKind::FokkerPlanck);
  EXPECT_EQ(rc.problem.dim, 5u);
}

TEST(Config, RejectsBadInput) {
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_config(in);
  };
  EXPECT_THROW(parse("[training]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(parse("stray = 1\n"), ConfigError);
  EXPECT_THROW(parse("[training]\niterations = ten\n"), ConfigError);
  EXPECT_THROW(parse("[training]\niterations = -3\n"), ConfigError);
  EXPECT_THROW(parse("[problem]\nkind = heat\n"), ConfigError);
  EXPECT_THROW(parse("[loss]\nz_gradient = maybe\n"), ConfigError);
  EXPECT_THROW(parse("[optimizer]\nlearning_rate = 1e-3 1e-4\nlearning_rate_boundaries = \n"),
               ConfigError);
  EXPECT_THROW(parse("[optimizer]\ngamma = 0.5 1.0\ngamma_boundaries = 10\n"), ConfigError);
  EXPECT_THROW(parse("[problem]\nkind = double_well\ndim = 2\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/fkeig.ini"), ConfigError);
}

TEST(Config, DeskScaleShrinksLongRuns) {
  auto rc = preset("fp_d10");
  apply_scale(rc, Scale::Desk);
  EXPECT_EQ(rc.train.iterations, 5000u);
  EXPECT_EQ(rc.train.learning_rate.boundaries(), (std::vector<std::size_t>{3000, 4000}));
  EXPECT_EQ(rc.train.hidden, (std::vector<std::size_t>{75, 75, 75}));
  EXPECT_EQ(rc.train.batch, 512u);
  EXPECT_NO_THROW(validate(rc));

  auto second = preset("dw_d10_second");
  apply_scale(second, Scale::Desk);
  EXPECT_EQ(second.train.lambda_freeze_steps, 1000u);

  auto small = preset("ls_d1_desk");
  apply_scale(small, Scale::Desk);
  EXPECT_EQ(to_ini(small), to_ini(preset("ls_d1_desk")));
  EXPECT_THROW(parse_scale("huge"), ConfigError);
}

TEST(Config, ProblemCoefficientsDefaultToEvenSpacing) {
  ProblemConfig p;
  p.kind = ProblemKind::FokkerPlanck;
  p.dim = 4;
  auto c = effective_coefficients(p);
  ASSERT_EQ(c.size(), 4u);
  EXPECT_DOUBLE_EQ(c.front(), 0.1);
  EXPECT_DOUBLE_EQ(c.back(), 1.0);
  p.coefficients = {0.3};
  EXPECT_THROW(make_problem(p), ConfigError);
  p.kind = ProblemKind::DoubleWell;
  p.coefficients.clear();
  EXPECT_THROW(effective_coefficients(p), ConfigError);
}

TEST(Checkpoint, JsonRoundTripRestoresEveryBit) {
  RunConfig rc = tiny();
  auto problem = make_problem(rc.problem);
  Trainer trainer(problem, rc.train);
  auto res = trainer.run(initial_state(problem, rc.train));
  Checkpoint c{{problem.name(), problem.dim, rc.train.seed}, res.state};
  c.state.history.back().err_grad = std::numeric_limits<double>::quiet_NaN();

  const auto path = scratch("ckpt") / "c.json";
  fs::create_directories(path.parent_path());
  save_checkpoint(path.string(), c);
  auto back = load_checkpoint(path.string());

  EXPECT_EQ(back.meta.problem, "linear_schrodinger");
  EXPECT_EQ(back.state.step, c.state.step);
  EXPECT_EQ(back.state.params.lambda, c.state.params.lambda);
  EXPECT_EQ(back.state.norm.z, c.state.norm.z);
  auto a = parameter_blocks(c.state.params);
  auto b = parameter_blocks(back.state.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].size(), b[i].size());
    for (std::size_t j = 0; j < a[i].size(); ++j) EXPECT_EQ(a[i][j], b[i][j]);
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(back.state.adam.blocks[i].t, c.state.adam.blocks[i].t);
    EXPECT_EQ(back.state.adam.blocks[i].m, c.state.adam.blocks[i].m);
    EXPECT_EQ(back.state.adam.blocks[i].v, c.state.adam.blocks[i].v);
  }
  ASSERT_EQ(back.state.history.size(), c.state.history.size());
  EXPECT_TRUE(std::isnan(back.state.history.back().err_grad));
  EXPECT_EQ(back.state.history.front().loss, c.state.history.front().loss);
}

TEST(Checkpoint, RejectsMissingAndMalformedFiles) {
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.json"), std::runtime_error);
  const auto dir = scratch("bad_ckpt");
  fs::create_directories(dir);
  {
    std::ofstream(dir / "a.json") << "{ not json";
    std::ofstream(dir / "b.json") << R"({"format": "something-else", "version": 1})";
    std::ofstream(dir / "c.json") << R"({"format": "fkeig-checkpoint", "version": 99})";
  }
  EXPECT_THROW(load_checkpoint((dir / "a.json").string()), std::runtime_error);
  EXPECT_THROW(load_checkpoint((dir / "b.json").string()), std::runtime_error);
  EXPECT_THROW(load_checkpoint((dir / "c.json").string()), std::runtime_error);
}

TEST(Commands, TrainTwiceGivesIdenticalFiles) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  cmd_train(tiny(), {a, std::nullopt, true});
  cmd_train(tiny(), {b, std::nullopt, true});
  for (const char* f : {"history.csv", "history_smoothed.csv", "summary.csv", "density.csv",
                        "config.ini", "checkpoint.json"}) {
    SCOPED_TRACE(f);
    ASSERT_TRUE(fs::exists(a / f));
    EXPECT_EQ(slurp(a / f), slurp(b / f));
  }
}

TEST(Commands, ResumeMatchesUninterruptedRun) {
  const auto full = scratch("resume_full"), half = scratch("resume_half");
  const auto rest = scratch("resume_rest");
  cmd_train(tiny(), {full, std::nullopt, true});

  RunConfig first = tiny();
  first.train.iterations = 10;
  cmd_train(first, {half, std::nullopt, true});
  cmd_train(tiny(), {rest, (half / "checkpoint.json").string(), true});

  for (const char* f : {"history.csv", "summary.csv", "density.csv", "checkpoint.json"}) {
    SCOPED_TRACE(f);
    EXPECT_EQ(slurp(full / f), slurp(rest / f));
  }
}

TEST(Commands, ResumeRejectsIncompatibleConfig) {
  const auto out = scratch("resume_bad");
  cmd_train(tiny(), {out, std::nullopt, true});
  RunConfig other = tiny();
  other.train.hidden = {9};
  other.train.iterations = 30;
  EXPECT_THROW(cmd_train(other, {scratch("resume_bad2"), (out / "checkpoint.json").string(), true}),
               ConfigError);
}

TEST(Commands, EvaluateReproducesFinalRecord) {
  const auto out = scratch("eval");
  cmd_train(tiny(), {out, std::nullopt, true});
  auto ckpt = load_checkpoint((out / "checkpoint.json").string());
  const auto& last = ckpt.state.history.back();
  auto e = cmd_evaluate(tiny(), (out / "checkpoint.json").string(), scratch("eval_out"));
  EXPECT_EQ(e.step, last.step);
  EXPECT_EQ(e.metrics.err_lambda, last.err_lambda);
  EXPECT_EQ(e.metrics.err_psi_l2, last.err_psi_l2);
  EXPECT_EQ(e.metrics.err_psi_inf, last.err_psi_inf);
  EXPECT_TRUE(fs::exists(scratch("eval_out").parent_path()));
}

TEST(Commands, HistoryCsvHasDocumentedColumns) {
  const auto out = scratch("cols");
  cmd_train(tiny(), {out, std::nullopt, true});
  std::ifstream in(out / "history.csv");
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "step,loss,lambda,Z,err_lambda,err_psi_l2,err_psi_inf,err_grad");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 5u);  // steps 0, 5, 10, 15, 20
}

TEST(Commands, ReferencePrintsEigenvaluesAndCsv) {
  ReferenceOptions o;
  o.c = 5.0;
  o.freq = 2;
  o.k = {1, 2};
  o.csv = scratch("ref") / "ref.csv";
  o.samples = 16;
  std::ostringstream os;
  auto pairs = cmd_reference(o, os);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_NEAR(pairs[0].lambda, -2.153, 2e-3);
  EXPECT_NEAR(pairs[1].lambda, -2.076, 2e-3);
  EXPECT_NE(os.str().find("k=2 lambda="), std::string::npos);

  std::ifstream in(*o.csv);
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "x,psi_1,dpsi_1,psi_2,dpsi_2");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 16u);

  o.csv.reset();
  o.k = {0};
  EXPECT_THROW(cmd_reference(o, os), ConfigError);
  o.c = 0.0;
  o.k = {1};
  EXPECT_EQ(cmd_reference(o, os)[0].lambda, 0.0);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run_cli("reference --c 0 --k 1"), 0);
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("train --preset no_such_preset"), 1);
  EXPECT_EQ(run_cli("train --preset ls_d1_desk --scale huge"), 1);
  EXPECT_EQ(run_cli("evaluate --preset ls_d1_desk --checkpoint /nonexistent.json"), 1);
  EXPECT_EQ(run_cli("reference --k 999"), 1);
}

TEST(Cli, DivergentRunExitsWithNumericalFailure) {
  const auto dir = scratch("diverge");
  fs::create_directories(dir);
  RunConfig rc = tiny();
  rc.train.learning_rate = Schedule::constant(1e300);
  rc.train.iterations = 200;
  std::ofstream(dir / "c.ini") << to_ini(rc);
  EXPECT_EQ(run_cli("train --config " + (dir / "c.ini").string() + " --out " +
                    (dir / "out").string()),
            2);
}
