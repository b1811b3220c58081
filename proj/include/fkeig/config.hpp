#pragma once
// Run configuration: INI files with sections, named presets for every
// published setting, the desk scale mapping, and an exact echo writer.

#include "fkeig/problems.hpp"
#include "fkeig/trainer.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace fkeig {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ProblemConfig {
  ProblemKind kind = ProblemKind::LinearSchrodinger;
  std::size_t dim = 1;
  std::vector<double> coefficients;  // empty: evenly spaced over the default range
  double epsilon = 1.0;              // cubic coefficient of the nonlinear problem
  std::size_t reference_modes = 32;
  std::size_t reference_count = 3;
};

/// Second-eigenpair protocol: lambda fixed at lambda_bar for the freeze window,
/// optionally after a supervised fit to psi_primary + weight * psi_secondary.
struct SecondEigenpairConfig {
  bool enabled = false;
  double lambda_offset = 0.0;        // lambda_bar = reference lambda + offset
  std::size_t target = 2;            // 1-based eigenpair whose lambda anchors lambda_bar
  bool supervised = false;
  std::size_t supervised_primary = 2;    // 1-based
  std::size_t supervised_secondary = 1;  // 1-based
  double supervised_weight = 0.3;
  std::size_t supervised_steps = 2000;
  std::size_t supervised_batch = 512;
  double supervised_learning_rate = 1e-3;
};

struct OutputConfig {
  std::size_t density_bins = 50;
  std::size_t smooth_window = 10;
};

struct RunConfig {
  std::string name = "custom";
  ProblemConfig problem;
  TrainConfig train;
  SecondEigenpairConfig second;
  OutputConfig output;
};

// ---------------------------------------------------------------- problems

inline std::pair<double, double> default_coefficient_range(ProblemKind k) {
  switch (k) {
    case ProblemKind::FokkerPlanck: return {0.1, 1.0};
    case ProblemKind::LinearSchrodinger: return {0.0, 0.2};
    case ProblemKind::DoubleWell:
    case ProblemKind::NonlinearSchrodinger: return {0.0, 0.0};
  }
  return {0.0, 0.0};
}

inline std::vector<double> effective_coefficients(const ProblemConfig& p) {
  if (!p.coefficients.empty()) return p.coefficients;
  if (p.kind == ProblemKind::DoubleWell) {
    throw ConfigError("problem.coefficients (well depths A_i) are required for double_well");
  }
  auto [lo, hi] = default_coefficient_range(p.kind);
  return default_coefficients(p.dim, lo, hi);
}

inline ProblemSpec make_problem(const ProblemConfig& p) {
  if (p.dim < 1) throw ConfigError("problem.dim must be >= 1");
  if (p.kind != ProblemKind::NonlinearSchrodinger && !p.coefficients.empty() &&
      p.coefficients.size() != p.dim) {
    throw ConfigError("problem.coefficients needs " + std::to_string(p.dim) + " values, got " +
                      std::to_string(p.coefficients.size()));
  }
  const auto c = effective_coefficients(p);
  switch (p.kind) {
    case ProblemKind::FokkerPlanck: return fokker_planck(p.dim, c);
    case ProblemKind::LinearSchrodinger:
      return linear_schrodinger(p.dim, c, p.reference_modes, p.reference_count);
    case ProblemKind::DoubleWell:
      return double_well_schrodinger(p.dim, c, p.reference_modes, p.reference_count);
    case ProblemKind::NonlinearSchrodinger: return nonlinear_schrodinger(p.dim, p.epsilon);
  }
  throw ConfigError("unknown problem kind");
}

/// psi_primary + weight * psi_secondary from the problem's known eigenpairs.
inline SupervisedInit make_supervised_init(const ProblemSpec& problem,
                                           const SecondEigenpairConfig& s) {
  const auto n = problem.eigenpairs.size();
  if (s.supervised_primary < 1 || s.supervised_primary > n || s.supervised_secondary < 1 ||
      s.supervised_secondary > n) {
    throw ConfigError("supervised init refers to an eigenpair the problem does not provide");
  }
  const auto& a = problem.eigenpairs[s.supervised_primary - 1];
  const auto& b = problem.eigenpairs[s.supervised_secondary - 1];
  const double w = s.supervised_weight;
  const std::size_t d = problem.dim;
  SupervisedInit init;
  init.psi = [a, b, w](std::span<const double> x) { return a.psi(x) + w * b.psi(x); };
  init.grad = [a, b, w, d](std::span<const double> x, std::span<double> g) {
    std::vector<double> gb(d);
    a.grad(x, g);
    b.grad(x, gb);
    for (std::size_t i = 0; i < d; ++i) g[i] += w * gb[i];
  };
  init.steps = s.supervised_steps;
  init.batch = s.supervised_batch;
  init.learning_rate = s.supervised_learning_rate;
  return init;
}

// ---------------------------------------------------------------- presets

namespace detail {

struct TableRow {
  std::string name;
  ProblemKind kind;
  std::size_t dim;
  double horizon;
  std::size_t intervals;
  std::vector<std::size_t> hidden;
  std::size_t iterations;
  std::vector<double> lr;
  std::vector<double> gamma;
  std::vector<std::size_t> boundaries;
  std::size_t batch;
};

inline RunConfig from_row(const TableRow& r) {
  RunConfig c;
  c.name = r.name;
  c.problem.kind = r.kind;
  c.problem.dim = r.dim;
  auto& t = c.train;
  t.horizon = r.horizon;
  t.intervals = r.intervals;
  t.hidden = r.hidden;
  t.iterations = r.iterations;
  t.learning_rate = Schedule(r.lr, r.boundaries);
  t.gamma = Schedule(r.gamma, r.boundaries);
  t.batch = r.batch;
  return c;
}

}  // namespace detail

inline std::vector<std::string> preset_names() {
  return {"fp_d5",        "fp_d10",        "ls_d5",       "ls_d10",        "nls_d5",
          "nls_d10",      "dw_d10_first",  "dw_d10_second", "dw_d1_first", "dw_d1_second",
          "ls_d1_desk"};
}

inline RunConfig preset(const std::string& name) {
  using K = ProblemKind;
  const std::vector<std::size_t> w80{80, 80, 80}, w300{300, 300, 300}, w200{200, 200, 200},
      w40{40, 40};
  const std::vector<detail::TableRow> rows{
      {"fp_d5", K::FokkerPlanck, 5, 0.2, 80, w80, 80000, {1e-4, 5e-5, 1e-5}, {0.2, 0.5, 0.9},
       {30000, 60000}, 1024},
      {"fp_d10", K::FokkerPlanck, 10, 0.2, 120, w300, 100000, {5e-5, 2e-5, 1e-5}, {0.2, 0.5, 0.9},
       {60000, 80000}, 1024},
      {"ls_d5", K::LinearSchrodinger, 5, 0.3, 80, w80, 80000, {1e-4, 5e-5, 1e-5}, {0.2, 0.5, 0.9},
       {30000, 60000}, 1024},
      {"ls_d10", K::LinearSchrodinger, 10, 0.3, 120, w300, 80000, {5e-5, 5e-5, 1e-5},
       {0.2, 0.5, 0.9}, {40000, 60000}, 1024},
      {"nls_d5", K::NonlinearSchrodinger, 5, 0.2, 120, w80, 60000, {5e-5, 2e-5, 1e-5},
       {0.2, 0.9, 0.99}, {20000, 40000}, 2048},
      {"nls_d10", K::NonlinearSchrodinger, 10, 0.3, 200, w300, 80000, {5e-5, 2e-5, 1e-5},
       {0.1, 0.9, 0.99}, {40000, 60000}, 2048},
      {"dw_d10_first", K::DoubleWell, 10, 0.2, 320, w200, 50000, {5e-4, 1e-4, 1e-5},
       {0.1, 0.2, 0.9}, {30000, 40000}, 2048},
      {"dw_d10_second", K::DoubleWell, 10, 0.2, 320, w200, 50000, {5e-4, 1e-4, 1e-5},
       {0.1, 0.9, 0.99}, {30000, 40000}, 2048},
      {"dw_d1_first", K::DoubleWell, 1, 0.2, 80, w40, 6000, {5e-4, 1e-4, 1e-5}, {0.1, 0.2, 0.9},
       {2000, 4000}, 512},
      {"dw_d1_second", K::DoubleWell, 1, 0.2, 80, w40, 6000, {5e-4, 1e-4, 1e-5},
       {0.1, 0.2, 0.9}, {2000, 4000}, 512},
      {"ls_d1_desk", K::LinearSchrodinger, 1, 0.2, 80, w40, 6000, {5e-4, 1e-4, 1e-5},
       {0.1, 0.2, 0.9}, {2000, 4000}, 512},
  };
  auto it = std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r.name == name; });
  if (it == rows.end()) throw ConfigError("unknown preset '" + name + "'");
  RunConfig c = detail::from_row(*it);

  if (c.problem.kind == K::DoubleWell) {
    if (c.problem.dim == 10) {
      c.problem.coefficients.assign(10, 0.2);
      c.problem.coefficients[0] = 1.5;
    } else {
      c.problem.coefficients = {5.0};
    }
  }
  if (name == "ls_d1_desk") c.problem.coefficients = {0.2};
  if (name == "dw_d10_second") {
    c.train.reference_index = 1;
    c.train.lambda_freeze_steps = 20000;
    c.second.enabled = true;
    c.second.target = 2;
    c.second.lambda_offset = 0.1;
  }
  if (name == "dw_d1_second") {
    // Supervised start from psi_2 + 0.3 psi_1 with lambda held at the true lambda_2.
    c.train.reference_index = 1;
    c.train.lambda_freeze_steps = c.train.iterations;
    c.second.enabled = true;
    c.second.target = 2;
    c.second.lambda_offset = 0.0;
    c.second.supervised = true;
  }
  return c;
}

// ---------------------------------------------------------------- scale

enum class Scale { Full, Desk };

inline Scale parse_scale(const std::string& s) {
  if (s == "full") return Scale::Full;
  if (s == "desk") return Scale::Desk;
  throw ConfigError("unknown scale '" + s + "' (expected full or desk)");
}

/// Desk mapping: iteration counts, schedule boundaries and freeze windows are
/// divided by 20; hidden widths by 4 (at least 16); batch by 2 (at least 256).
/// Configurations already at or below those sizes are left unchanged in that field.
inline void apply_scale(RunConfig& c, Scale s) {
  if (s == Scale::Full) return;
  constexpr std::size_t kIter = 20, kWidth = 4, kBatch = 2;
  auto& t = c.train;
  if (t.iterations < 20000) return;  // already desk sized
  auto shrink = [](std::size_t v, std::size_t f) { return std::max<std::size_t>(1, v / f); };
  const bool frozen_all = t.lambda_freeze_steps >= t.iterations;
  t.iterations = shrink(t.iterations, kIter);
  t.lambda_freeze_steps = frozen_all ? t.iterations : t.lambda_freeze_steps / kIter;
  std::vector<std::size_t> lb, gb;
  for (auto b : t.learning_rate.boundaries()) lb.push_back(shrink(b, kIter));
  for (auto b : t.gamma.boundaries()) gb.push_back(shrink(b, kIter));
  t.learning_rate = Schedule(t.learning_rate.values(), lb);
  t.gamma = Schedule(t.gamma.values(), gb);
  for (auto& w : t.hidden) w = std::max<std::size_t>(std::min<std::size_t>(w, 16), w / kWidth);
  t.batch = std::max<std::size_t>(std::min<std::size_t>(t.batch, 256), t.batch / kBatch);
  t.final_window = std::min(t.final_window, std::max<std::size_t>(t.record_every, t.iterations / 5));
  c.second.supervised_steps = std::max<std::size_t>(200, c.second.supervised_steps / kIter);
}

// ---------------------------------------------------------------- INI

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ' ';
    if constexpr (std::is_floating_point_v<T>) out += format_double(v[i]);
    else out += std::to_string(v[i]);
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e) throw ConfigError(key + ": '" + s + "' is not a number");
  return v;
}

inline std::size_t parse_size(const std::string& key, const std::string& s) {
  std::size_t v = 0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e) {
    throw ConfigError(key + ": '" + s + "' is not a nonnegative integer");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": '" + s + "' is not a boolean");
}

inline std::vector<std::string> split(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

// One table of key bindings drives both parsing and echo, so they cannot drift apart.
struct Binding {
  std::string key;  // section.name
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline std::vector<Binding> bindings(RunConfig& c) {
  std::vector<Binding> b;
  auto& p = c.problem;
  auto& t = c.train;
  auto& s = c.second;
  auto& o = c.output;
  auto num = [&b](std::string key, double& ref) {
    b.push_back({key, [&ref, key](const std::string& v) { ref = parse_double(key, v); },
                 [&ref] { return format_double(ref); }});
  };
  auto size = [&b](std::string key, std::size_t& ref) {
    b.push_back({key, [&ref, key](const std::string& v) { ref = parse_size(key, v); },
                 [&ref] { return std::to_string(ref); }});
  };
  auto flag = [&b](std::string key, bool& ref) {
    b.push_back({key, [&ref, key](const std::string& v) { ref = parse_bool(key, v); },
                 [&ref] { return std::string(ref ? "true" : "false"); }});
  };
  auto nums = [&b](std::string key, std::vector<double>& ref) {
    b.push_back({key,
                 [&ref, key](const std::string& v) {
                   ref.clear();
                   for (const auto& tok : split(v)) ref.push_back(parse_double(key, tok));
                 },
                 [&ref] { return join(ref); }});
  };
  auto sizes = [&b](std::string key, std::vector<std::size_t>& ref) {
    b.push_back({key,
                 [&ref, key](const std::string& v) {
                   ref.clear();
                   for (const auto& tok : split(v)) ref.push_back(parse_size(key, tok));
                 },
                 [&ref] { return join(ref); }});
  };

  b.push_back({"run.name", [&c](const std::string& v) { c.name = v; }, [&c] { return c.name; }});

  b.push_back({"problem.kind", [&p](const std::string& v) {
                 try {
                   p.kind = parse_problem_kind(v);
                 } catch (const std::invalid_argument& e) {
                   throw ConfigError(std::string("problem.kind: ") + e.what());
                 }
               },
               [&p] { return to_string(p.kind); }});
  size("problem.dim", p.dim);
  nums("problem.coefficients", p.coefficients);
  num("problem.epsilon", p.epsilon);
  size("problem.reference_modes", p.reference_modes);
  size("problem.reference_count", p.reference_count);

  size("network.order", t.order);
  sizes("network.hidden", t.hidden);

  num("sde.horizon", t.horizon);
  size("sde.intervals", t.intervals);
  num("sde.clip_lower", t.clip.lower);
  num("sde.clip_upper", t.clip.upper);

  num("loss.eta1", t.eta1);
  num("loss.eta2", t.eta2);
  num("loss.eta3", t.eta3);
  num("loss.z0", t.z0);
  flag("loss.z_gradient", t.z_gradient);

  // Schedules are stored as value lists plus boundaries.
  b.push_back({"optimizer.learning_rate",
               [&t](const std::string& v) {
                 std::vector<double> vals;
                 for (const auto& tok : split(v)) vals.push_back(parse_double("learning_rate", tok));
                 t.learning_rate = Schedule::unchecked(vals, t.learning_rate.boundaries());
               },
               [&t] { return join(t.learning_rate.values()); }});
  b.push_back({"optimizer.learning_rate_boundaries",
               [&t](const std::string& v) {
                 std::vector<std::size_t> bs;
                 for (const auto& tok : split(v)) bs.push_back(parse_size("boundaries", tok));
                 t.learning_rate = Schedule::unchecked(t.learning_rate.values(), bs);
               },
               [&t] { return join(t.learning_rate.boundaries()); }});
  b.push_back({"optimizer.gamma",
               [&t](const std::string& v) {
                 std::vector<double> vals;
                 for (const auto& tok : split(v)) vals.push_back(parse_double("gamma", tok));
                 t.gamma = Schedule::unchecked(vals, t.gamma.boundaries());
               },
               [&t] { return join(t.gamma.values()); }});
  b.push_back({"optimizer.gamma_boundaries",
               [&t](const std::string& v) {
                 std::vector<std::size_t> bs;
                 for (const auto& tok : split(v)) bs.push_back(parse_size("gamma_boundaries", tok));
                 t.gamma = Schedule::unchecked(t.gamma.values(), bs);
               },
               [&t] { return join(t.gamma.boundaries()); }});
  num("optimizer.beta1", t.adam.beta1);
  num("optimizer.beta2", t.adam.beta2);
  num("optimizer.epsilon", t.adam.epsilon);
  num("optimizer.grad_clip_norm", t.grad_clip_norm);

  size("training.iterations", t.iterations);
  size("training.batch", t.batch);
  b.push_back({"training.seed",
               [&t](const std::string& v) { t.seed = parse_size("training.seed", v); },
               [&t] { return std::to_string(t.seed); }});
  num("training.lambda_init", t.lambda_init);
  size("training.lambda_freeze_steps", t.lambda_freeze_steps);
  size("training.record_every", t.record_every);
  size("training.validation_size", t.validation_size);
  size("training.final_window", t.final_window);
  b.push_back({"training.reference_eigenpair",
               [&t](const std::string& v) {
                 auto k = parse_size("training.reference_eigenpair", v);
                 if (k < 1) throw ConfigError("training.reference_eigenpair is 1-based");
                 t.reference_index = k - 1;
               },
               [&t] { return std::to_string(t.reference_index + 1); }});
  size("training.workers", t.workers);
  size("training.checkpoint_every", t.checkpoint_every);

  flag("second.enabled", s.enabled);
  num("second.lambda_offset", s.lambda_offset);
  size("second.target", s.target);
  flag("second.supervised", s.supervised);
  size("second.supervised_primary", s.supervised_primary);
  size("second.supervised_secondary", s.supervised_secondary);
  num("second.supervised_weight", s.supervised_weight);
  size("second.supervised_steps", s.supervised_steps);
  size("second.supervised_batch", s.supervised_batch);
  num("second.supervised_learning_rate", s.supervised_learning_rate);

  size("output.density_bins", o.density_bins);
  size("output.smooth_window", o.smooth_window);
  return b;
}

}  // namespace detail

/// Checks everything that does not need the problem to be built.
inline void validate(const RunConfig& c) {
  try {
    c.train.validate();
    c.train.learning_rate.validate();
    c.train.gamma.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.problem.dim < 1) throw ConfigError("problem.dim must be >= 1");
  if (c.problem.kind == ProblemKind::DoubleWell && c.problem.coefficients.empty()) {
    throw ConfigError("problem.coefficients (well depths A_i) are required for double_well");
  }
  if (c.problem.kind != ProblemKind::NonlinearSchrodinger && !c.problem.coefficients.empty() &&
      c.problem.coefficients.size() != c.problem.dim) {
    throw ConfigError("problem.coefficients needs " + std::to_string(c.problem.dim) + " values");
  }
  if (c.second.enabled && c.train.lambda_freeze_steps == 0) {
    throw ConfigError("second.enabled needs training.lambda_freeze_steps > 0");
  }
  if (c.second.target < 1) throw ConfigError("second.target is 1-based");
  if (c.output.density_bins < 1) throw ConfigError("output.density_bins must be >= 1");
  if (c.output.smooth_window < 1) throw ConfigError("output.smooth_window must be >= 1");
}

/// Applies the keys of an INI tree on top of `base`. Unknown sections or keys are errors.
inline RunConfig apply_ini(RunConfig base, const boost::property_tree::ptree& tree) {
  auto table = detail::bindings(base);
  std::map<std::string, const detail::Binding*> by_key;
  for (const auto& b : table) by_key[b.key] = &b;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("key '" + section + "' outside of a section");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      auto it = by_key.find(full);
      if (it == by_key.end()) throw ConfigError("unknown config key '" + full + "'");
      it->second->set(value.data());
    }
  }
  validate(base);
  return base;
}

inline RunConfig parse_config(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  // An optional run.preset picks the starting point; everything else overrides it.
  RunConfig base;
  if (auto run = tree.get_child_optional("run")) {
    if (auto p = run->get_optional<std::string>("preset")) {
      base = preset(*p);
      run->erase("preset");
    }
  }
  return apply_ini(std::move(base), tree);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_config(in);
}

/// Complete INI text of the effective configuration; parsing it gives back `c`.
inline std::string to_ini(const RunConfig& c) {
  RunConfig copy = c;
  auto table = detail::bindings(copy);
  std::ostringstream out;
  std::string current;
  for (const auto& b : table) {
    const auto dot = b.key.find('.');
    const std::string section = b.key.substr(0, dot), key = b.key.substr(dot + 1);
    if (section != current) {
      if (!current.empty()) out << '\n';
      out << '[' << section << "]\n";
      current = section;
    }
    out << key << " = " << b.get() << '\n';
  }
  return out.str();
}

}  // namespace fkeig
