#pragma once
// The train / evaluate / reference subcommands, writing CSV artifacts into an
// output directory. Kept separate from the CLI parsing so tests can call them.

#include "fkeig/checkpoint.hpp"
#include "fkeig/config.hpp"
#include "fkeig/metrics.hpp"
#include "fkeig/reference.hpp"
#include "fkeig/trainer.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fkeig {

namespace detail {

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::ofstream open_output(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

inline void write_history(const std::filesystem::path& p, const std::vector<TrainRecord>& h) {
  auto out = open_output(p);
  out << "step,loss,lambda,Z,err_lambda,err_psi_l2,err_psi_inf,err_grad\n";
  for (const auto& r : h) {
    out << r.step << ',' << csv_number(r.loss) << ',' << csv_number(r.lambda) << ','
        << csv_number(r.z);
    for (double e : {r.err_lambda, r.err_psi_l2, r.err_psi_inf, r.err_grad}) {
      out << ',' << (r.has_reference ? csv_number(e) : std::string("nan"));
    }
    out << '\n';
  }
}

/// Window-averaged copy of the history (step kept, every other column smoothed).
inline std::vector<TrainRecord> smooth_history(const std::vector<TrainRecord>& h,
                                               std::size_t window) {
  std::vector<TrainRecord> out(h);
  if (h.empty()) return out;
  auto column = [&](auto get, auto set) {
    std::vector<double> v;
    for (const auto& r : h) v.push_back(get(r));
    auto s = smooth(v, window);
    for (std::size_t i = 0; i < out.size(); ++i) set(out[i], s[i]);
  };
  column([](const TrainRecord& r) { return r.loss; }, [](TrainRecord& r, double v) { r.loss = v; });
  column([](const TrainRecord& r) { return r.lambda; },
         [](TrainRecord& r, double v) { r.lambda = v; });
  column([](const TrainRecord& r) { return r.z; }, [](TrainRecord& r, double v) { r.z = v; });
  column([](const TrainRecord& r) { return r.err_lambda; },
         [](TrainRecord& r, double v) { r.err_lambda = v; });
  column([](const TrainRecord& r) { return r.err_psi_l2; },
         [](TrainRecord& r, double v) { r.err_psi_l2 = v; });
  column([](const TrainRecord& r) { return r.err_psi_inf; },
         [](TrainRecord& r, double v) { r.err_psi_inf = v; });
  column([](const TrainRecord& r) { return r.err_grad; },
         [](TrainRecord& r, double v) { r.err_grad = v; });
  return out;
}

/// Network and reference value histograms on shared bins.
inline void write_density(const std::filesystem::path& p, const ValidationMetrics& m,
                          std::size_t bins) {
  double lo = m.net_values.front(), hi = lo;
  for (const auto* v : {&m.net_values, &m.ref_values}) {
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  auto hn = density(m.net_values, bins, lo, hi);
  auto hr = density(m.ref_values, bins, lo, hi);
  auto out = open_output(p);
  out << "bin_center,density_net,density_ref\n";
  for (std::size_t i = 0; i < hn.bins(); ++i) {
    out << csv_number(hn.center(i)) << ',' << csv_number(hn.density[i]) << ','
        << csv_number(hr.density[i]) << '\n';
  }
}

inline void write_summary(const std::filesystem::path& p, const TrainSummary& s,
                          std::size_t step) {
  auto out = open_output(p);
  out << "step," << step << '\n'
      << "lambda," << csv_number(s.lambda) << '\n'
      << "Z," << csv_number(s.z) << '\n';
  if (s.has_reference) {
    out << "reference_lambda," << csv_number(s.reference_lambda) << '\n'
        << "err_lambda," << csv_number(s.err_lambda) << '\n'
        << "err_psi_l2," << csv_number(s.err_psi_l2) << '\n'
        << "err_psi_inf," << csv_number(s.err_psi_inf) << '\n'
        << "err_grad," << csv_number(s.err_grad) << '\n'
        << "averaged_records," << s.averaged_records << '\n';
  }
}

inline void check_compatible(const Checkpoint& c, const ProblemSpec& problem,
                             const TrainConfig& cfg) {
  if (c.meta.problem != problem.name() || c.meta.dim != problem.dim) {
    throw ConfigError("checkpoint is for " + c.meta.problem + " d=" + std::to_string(c.meta.dim) +
                      ", config describes " + problem.name() + " d=" +
                      std::to_string(problem.dim));
  }
  const auto& p = c.state.params;
  bool same = p.features.order == cfg.order && p.psi.layers.size() == cfg.hidden.size() + 1;
  for (std::size_t i = 0; same && i < cfg.hidden.size(); ++i) {
    same = p.psi.layers[i].weight.cols() == cfg.hidden[i] &&
           p.grad.layers[i].weight.cols() == cfg.hidden[i];
  }
  if (!same) throw ConfigError("checkpoint network does not match the configured architecture");
}

}  // namespace detail

struct TrainOptions {
  std::filesystem::path out = "out";
  std::optional<std::string> resume;
  bool quiet = false;
};

struct TrainOutcome {
  TrainSummary summary;
  std::size_t steps = 0;
  std::size_t clipped = 0;
};

/// Runs one configured training and writes config.ini, history.csv,
/// history_smoothed.csv, density.csv, summary.csv and checkpoint.json into opts.out.
inline TrainOutcome cmd_train(const RunConfig& rc, const TrainOptions& opts) {
  validate(rc);
  const ProblemSpec problem = make_problem(rc.problem);
  std::filesystem::create_directories(opts.out);
  {
    auto echo = detail::open_output(opts.out / "config.ini");
    echo << to_ini(rc);
  }
  const CheckpointMeta meta{problem.name(), problem.dim, rc.train.seed};
  auto save = [&](const TrainState& s, const std::string& file) {
    save_checkpoint((opts.out / file).string(), Checkpoint{meta, s});
  };

  TrainCallbacks cb;
  cb.on_checkpoint = [&](const TrainState& s) { save(s, "checkpoint.json"); };
  if (!opts.quiet) {
    cb.on_record = [](const TrainRecord& r) {
      std::cout << "step " << r.step << "  loss " << detail::csv_number(r.loss) << "  lambda "
                << detail::csv_number(r.lambda) << "  Z " << detail::csv_number(r.z);
      if (r.has_reference) {
        std::cout << "  err_lambda " << detail::csv_number(r.err_lambda) << "  err_psi "
                  << detail::csv_number(r.err_psi_l2);
      }
      std::cout << std::endl;
    };
  }

  TrainConfig cfg = rc.train;
  TrainState state;
  if (opts.resume) {
    Checkpoint c = load_checkpoint(*opts.resume);
    detail::check_compatible(c, problem, cfg);
    state = std::move(c.state);
  } else {
    if (rc.second.enabled) {
      if (rc.second.target < 1 || rc.second.target > problem.eigenpairs.size()) {
        throw ConfigError("second.target refers to an eigenpair the problem does not provide");
      }
      cfg.lambda_init = problem.eigenpairs[rc.second.target - 1].lambda + rc.second.lambda_offset;
    }
    state = initial_state(problem, cfg);
    if (rc.second.enabled && rc.second.supervised) {
      supervised_fit(state.params, problem, make_supervised_init(problem, rc.second), cfg.z0,
                     cfg.seed, cfg.adam);
    }
    if (cfg.checkpoint_every > 0) save(state, "checkpoint_initial.json");
  }

  Trainer trainer(problem, cfg);
  TrainResult res = trainer.run(std::move(state), cb);
  save(res.state, "checkpoint.json");

  detail::write_history(opts.out / "history.csv", res.state.history);
  detail::write_history(opts.out / "history_smoothed.csv",
                        detail::smooth_history(res.state.history, rc.output.smooth_window));
  detail::write_summary(opts.out / "summary.csv", res.summary, res.state.step);
  if (trainer.reference()) {
    auto m = validate_against(res.state.params, res.state.history.back().z, problem,
                              *trainer.reference(), trainer.validation_points(res.state.step));
    detail::write_density(opts.out / "density.csv", m, rc.output.density_bins);
  }
  return {res.summary, res.state.step, res.clipped};
}

struct EvaluateOutcome {
  std::size_t step = 0;
  double lambda = 0.0;
  double z = 0.0;
  ValidationMetrics metrics;
};

/// Recomputes the validation metrics of a checkpoint with the trainer's points for its step.
inline EvaluateOutcome cmd_evaluate(const RunConfig& rc, const std::string& checkpoint,
                                    const std::filesystem::path& out) {
  validate(rc);
  const ProblemSpec problem = make_problem(rc.problem);
  Checkpoint c = load_checkpoint(checkpoint);
  detail::check_compatible(c, problem, rc.train);
  Trainer trainer(problem, rc.train);
  if (!trainer.reference()) throw ConfigError("the configured problem has no reference eigenpair");
  const auto& s = c.state;
  // The Z of the last record is the one the trainer used for its final metrics.
  const double z = s.history.empty() ? s.norm.z : s.history.back().z;
  if (z == 0.0) throw ConfigError("checkpoint has no usable normalization constant");
  EvaluateOutcome e{s.step, s.params.lambda, z,
                    validate_against(s.params, z, problem, *trainer.reference(),
                                     trainer.validation_points(s.step))};
  std::filesystem::create_directories(out);
  {
    auto f = detail::open_output(out / "evaluation.csv");
    f << "step,lambda,Z,err_lambda,err_psi_l2,err_psi_inf,err_grad\n"
      << e.step << ',' << detail::csv_number(e.lambda) << ',' << detail::csv_number(z) << ','
      << detail::csv_number(e.metrics.err_lambda) << ','
      << detail::csv_number(e.metrics.err_psi_l2) << ','
      << detail::csv_number(e.metrics.err_psi_inf) << ','
      << detail::csv_number(e.metrics.err_grad) << '\n';
  }
  detail::write_density(out / "density.csv", e.metrics, rc.output.density_bins);
  return e;
}

struct ReferenceOptions {
  double c = 0.0;
  int freq = 1;
  std::size_t modes = 32;
  std::vector<std::size_t> k{1};  // 1-based eigenpair indices
  std::optional<std::filesystem::path> csv;
  std::size_t samples = 256;
};

/// Prints lambda_k and the cos/sin Fourier coefficients of each requested 1-D
/// eigenpair; optionally samples them on a uniform grid of [0, 2 pi) into a CSV.
inline std::vector<Eigenpair1D> cmd_reference(const ReferenceOptions& o, std::ostream& os) {
  if (o.k.empty()) throw ConfigError("reference: no eigenpair index given");
  if (o.freq < 1) throw ConfigError("reference: freq must be >= 1");
  FourierProblem1D prob{o.c, o.freq, o.modes};
  auto all = solve_1d_all(prob);
  std::vector<Eigenpair1D> picked;
  for (auto k : o.k) {
    if (k < 1 || k > all.size()) {
      throw ConfigError("reference: k=" + std::to_string(k) + " outside 1.." +
                        std::to_string(all.size()));
    }
    picked.push_back(all[k - 1]);
  }
  for (std::size_t i = 0; i < picked.size(); ++i) {
    const auto& e = picked[i];
    os << "k=" << o.k[i] << " lambda=" << detail::csv_number(e.lambda) << '\n';
    os << "  m,cos,sin\n";
    for (std::size_t m = 0; m < e.cos_coeffs.size(); ++m) {
      if (std::abs(e.cos_coeffs[m]) < 1e-15 && std::abs(e.sin_coeffs[m]) < 1e-15) continue;
      os << "  " << m << ',' << detail::csv_number(e.cos_coeffs[m]) << ','
         << detail::csv_number(e.sin_coeffs[m]) << '\n';
    }
  }
  if (o.csv) {
    if (o.csv->has_parent_path()) std::filesystem::create_directories(o.csv->parent_path());
    auto f = detail::open_output(*o.csv);
    f << "x";
    for (auto k : o.k) f << ",psi_" << k << ",dpsi_" << k;
    f << '\n';
    for (std::size_t j = 0; j < o.samples; ++j) {
      const double x = 2.0 * std::numbers::pi * static_cast<double>(j) /
                       static_cast<double>(o.samples);
      f << detail::csv_number(x);
      for (const auto& e : picked) {
        f << ',' << detail::csv_number(e.value(x)) << ',' << detail::csv_number(e.derivative(x));
      }
      f << '\n';
    }
  }
  return picked;
}

}  // namespace fkeig
