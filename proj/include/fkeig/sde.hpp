#pragma once
// Euler-Maruyama simulation of X (dX = sigma dW) and the coupled propagation
// of U along the same Brownian increments.

#include "fkeig/autodiff.hpp"
#include "fkeig/problems.hpp"
#include "fkeig/rng.hpp"

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fkeig {

class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t time_step)
      : std::runtime_error(what), time_step_(time_step) {}
  std::size_t time_step() const { return time_step_; }

 private:
  std::size_t time_step_;
};

struct TimeGrid {
  std::vector<double> times;  // t_0 = 0 < ... < t_N = T

  static TimeGrid uniform(double horizon, std::size_t intervals) {
    if (!(horizon > 0.0)) throw std::invalid_argument("terminal time must be positive");
    if (intervals < 1) throw std::invalid_argument("need at least one time interval");
    TimeGrid g;
    g.times.resize(intervals + 1);
    for (std::size_t n = 0; n <= intervals; ++n) {
      g.times[n] = horizon * static_cast<double>(n) / static_cast<double>(intervals);
    }
    g.times.back() = horizon;
    return g;
  }
  std::size_t intervals() const { return times.size() - 1; }
  double horizon() const { return times.back(); }
  double dt(std::size_t n) const { return times[n + 1] - times[n]; }
};

/// K paths over N intervals in d dimensions. Row n*K + k of `states` is X_{t_n}
/// of path k; row n*K + k of `increments` is dW_n of path k.
struct PathBatch {
  std::size_t paths = 0;
  std::size_t dim = 0;
  TimeGrid grid;
  Tensor states;      // (N+1)K x d
  Tensor increments;  // N K x d
  std::vector<Var> values;  // U_{t_0..t_N}, each K x 1, when propagated
  std::size_t clipped = 0;  // entries changed by clipping during propagation

  std::size_t intervals() const { return grid.intervals(); }
  Tensor state(std::size_t n) const { return block(states, n); }
  Tensor increment(std::size_t n) const { return block(increments, n); }

 private:
  Tensor block(const Tensor& t, std::size_t n) const {
    Tensor out(paths, dim);
    std::copy_n(t.values().begin() + static_cast<std::ptrdiff_t>(n * paths * dim), paths * dim,
                out.values().begin());
    return out;
  }
};

/// K iid uniform points on [0, 2pi]^d, one counter stream per point.
inline Tensor sample_initial(std::size_t count, std::size_t dim, std::uint64_t seed,
                             std::uint64_t step, StreamTag tag = StreamTag::InitialPoints) {
  if (count < 1) throw std::invalid_argument("sample_initial: need at least one point");
  Tensor x(count, dim);
  for (std::size_t k = 0; k < count; ++k) {
    CounterRng rng(seed, tag, step, k);
    for (std::size_t i = 0; i < dim; ++i) x(k, i) = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  return x;
}

/// X_{n+1} = X_n + sigma dW_n with given increments (N K x d). X is not wrapped
/// into the torus; everything downstream is 2pi-periodic.
inline PathBatch simulate_with_increments(const Tensor& x0, const TimeGrid& grid,
                                          const Tensor& sigma, Tensor increments) {
  const std::size_t k_paths = x0.rows(), d = x0.cols(), n_int = grid.intervals();
  if (sigma.rows() != d || sigma.cols() != d) throw ShapeError("sigma must be d x d");
  if (increments.rows() != n_int * k_paths || increments.cols() != d) {
    throw ShapeError("increments must be (N K) x d");
  }
  PathBatch b;
  b.paths = k_paths;
  b.dim = d;
  b.grid = grid;
  b.states = Tensor((n_int + 1) * k_paths, d);
  b.increments = std::move(increments);
  std::copy(x0.values().begin(), x0.values().end(), b.states.values().begin());
  for (std::size_t n = 0; n < n_int; ++n) {
    for (std::size_t k = 0; k < k_paths; ++k) {
      auto prev = b.states.row(n * k_paths + k);
      auto next = b.states.row((n + 1) * k_paths + k);
      auto dw = b.increments.row(n * k_paths + k);
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += sigma(i, j) * dw[j];
        next[i] = prev[i] + acc;
      }
    }
  }
  return b;
}

/// Draws dW_n ~ N(0, dt_n I) from per-path streams (seed, step, k) and simulates X.
inline PathBatch simulate_forward(const Tensor& x0, const TimeGrid& grid, const Tensor& sigma,
                                  std::uint64_t seed, std::uint64_t step) {
  const std::size_t k_paths = x0.rows(), d = x0.cols(), n_int = grid.intervals();
  Tensor dw(n_int * k_paths, d);
  for (std::size_t k = 0; k < k_paths; ++k) {
    CounterRng rng(seed, StreamTag::Brownian, step, k);
    for (std::size_t n = 0; n < n_int; ++n) {
      const double sd = std::sqrt(grid.dt(n));
      for (std::size_t i = 0; i < d; ++i) dw(n * k_paths + k, i) = sd * rng.normal();
    }
  }
  return simulate_with_increments(x0, grid, sigma, std::move(dw));
}

/// The same Brownian paths observed on a grid `factor` times coarser.
inline PathBatch coarsen(const PathBatch& fine, std::size_t factor, const Tensor& sigma) {
  const std::size_t n_fine = fine.intervals();
  if (factor < 1 || n_fine % factor != 0) {
    throw std::invalid_argument("coarsen: factor must divide the number of intervals");
  }
  const std::size_t n_coarse = n_fine / factor, kp = fine.paths, d = fine.dim;
  TimeGrid grid;
  for (std::size_t n = 0; n <= n_coarse; ++n) grid.times.push_back(fine.grid.times[n * factor]);
  Tensor dw(n_coarse * kp, d);
  for (std::size_t n = 0; n < n_coarse; ++n) {
    for (std::size_t s = 0; s < factor; ++s) {
      for (std::size_t k = 0; k < kp; ++k) {
        for (std::size_t i = 0; i < d; ++i) {
          dw(n * kp + k, i) += fine.increments((n * factor + s) * kp + k, i);
        }
      }
    }
  }
  return simulate_with_increments(fine.state(0), grid, sigma, std::move(dw));
}

struct ClipBounds {
  double lower = -5.0;
  double upper = 5.0;
  void validate() const {
    if (!(lower < upper)) throw std::invalid_argument("clip bounds need lower < upper");
  }
};

inline double clip_value(double u, ClipBounds b) {
  if (u < b.lower) return b.lower;
  if (u > b.upper) return b.upper;
  return u;
}

/// Inputs shared by the linear and semilinear propagation.
struct PropagationInputs {
  Var psi0;         // N_psi(X_0), K x 1
  Var grad_heads;   // N_{sigma^T grad psi} at every X_{t_n}, (N+1)K x d (rows as in states)
  Var lambda;       // 1 x 1
  Var normalizer;   // Z, 1 x 1
};

namespace detail {

inline void check_finite(Var u, std::size_t step) {
  for (double v : u.values()) {
    if (!std::isfinite(v)) {
      throw NumericalError("non-finite propagated value at time step " + std::to_string(step),
                           step);
    }
  }
}

inline void check_inputs(const PathBatch& batch, const PropagationInputs& in) {
  const std::size_t kp = batch.paths;
  if (in.psi0.shape() != Shape{kp, 1}) throw ShapeError("psi0 must be K x 1");
  if (in.grad_heads.shape() != Shape{(batch.intervals() + 1) * kp, batch.dim}) {
    throw ShapeError("gradient head values must be (N+1)K x d");
  }
  if (in.lambda.shape().size() != 1 || in.normalizer.shape().size() != 1) {
    throw ShapeError("lambda and Z must be scalars");
  }
  if (!(in.normalizer.item() != 0.0) || !std::isfinite(in.normalizer.item())) {
    throw std::invalid_argument("normalization constant must be finite and nonzero");
  }
}

// Per-step constants: f(X_n) as K x 1 and dW_n - sigma^{-1} b(X_n) dt_n as K x d.
struct StepCoefficients {
  Tensor potential;
  Tensor noise_minus_drift;
};

inline StepCoefficients step_coefficients(const PathBatch& batch, const ProblemSpec& problem,
                                          std::size_t n) {
  const std::size_t kp = batch.paths, d = batch.dim;
  const double dt = batch.grid.dt(n);
  StepCoefficients c{Tensor(kp, 1), Tensor(kp, d)};
  std::vector<double> drift(d);
  for (std::size_t k = 0; k < kp; ++k) {
    auto x = batch.states.row(n * kp + k);
    c.potential(k, 0) = problem.potential ? problem.potential(x) : 0.0;
    problem.drift_in_noise_coords(x, drift);
    auto dw = batch.increments.row(n * kp + k);
    for (std::size_t i = 0; i < d; ++i) c.noise_minus_drift(k, i) = dw[i] - drift[i] * dt;
  }
  return c;
}

}  // namespace detail

/// U_0 = N_psi(X_0) / Z,
/// U_{n+1} = U_n + (f(X_n) U_n - lambda U_n - b . sigma^{-T} G_n) dt_n + G_n . dW_n
/// where G_n is the gradient head at X_n. Values are recorded on the tape.
inline void propagate_linear(PathBatch& batch, const ProblemSpec& problem,
                             const PropagationInputs& in) {
  detail::check_inputs(batch, in);
  Tape& tape = in.psi0.tape();
  const std::size_t kp = batch.paths;
  batch.values.clear();
  batch.clipped = 0;
  Var u = mul(in.psi0, broadcast_scalar(reciprocal(in.normalizer), kp, 1));
  detail::check_finite(u, 0);
  batch.values.push_back(u);
  for (std::size_t n = 0; n < batch.intervals(); ++n) {
    const double dt = batch.grid.dt(n);
    auto coef = detail::step_coefficients(batch, problem, n);
    for (double& f : coef.potential.values()) f = 1.0 + f * dt;
    Var growth = sub(tape.constant(coef.potential), broadcast_scalar(scale(in.lambda, dt), kp, 1));
    Var g = slice_rows(in.grad_heads, n * kp, kp);
    u = add(mul(u, growth), sum_rows(mul(g, tape.constant(coef.noise_minus_drift))));
    detail::check_finite(u, n + 1);
    batch.values.push_back(u);
  }
}

/// Semilinear variant: U~_{n+1} = U_n + (f(X_n, U_n, G_n) - lambda U_n - b . sigma^{-T} G_n) dt_n
/// + G_n . dW_n, then U_{n+1} = clip(U~_{n+1}, P, Q).
inline void propagate_semilinear(PathBatch& batch, const ProblemSpec& problem,
                                 const PropagationInputs& in, ClipBounds bounds) {
  detail::check_inputs(batch, in);
  bounds.validate();
  Tape& tape = in.psi0.tape();
  const std::size_t kp = batch.paths;
  batch.values.clear();
  batch.clipped = 0;
  Var u = mul(in.psi0, broadcast_scalar(reciprocal(in.normalizer), kp, 1));
  detail::check_finite(u, 0);
  batch.values.push_back(u);
  for (std::size_t n = 0; n < batch.intervals(); ++n) {
    const double dt = batch.grid.dt(n);
    auto coef = detail::step_coefficients(batch, problem, n);
    Var g = slice_rows(in.grad_heads, n * kp, kp);
    Var reaction = mul(tape.constant(coef.potential), u);
    if (problem.nonlinear_tape) reaction = add(reaction, problem.nonlinear_tape(u, g));
    Var rate = sub(reaction, mul(broadcast_scalar(in.lambda, kp, 1), u));
    Var next = add(add(u, scale(rate, dt)), sum_rows(mul(g, tape.constant(coef.noise_minus_drift))));
    detail::check_finite(next, n + 1);
    for (double v : next.values()) {
      if (v < bounds.lower || v > bounds.upper) ++batch.clipped;
    }
    u = clip(next, bounds.lower, bounds.upper);
    batch.values.push_back(u);
  }
}

}  // namespace fkeig
