#pragma once
// Independent oracles shared by the unit tests and the acceptance runner.

#include "fkeig/problems.hpp"
#include "fkeig/reference.hpp"
#include "fkeig/sde.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace fkeig::oracle {

// Cyclic Jacobi rotations on a dense symmetric matrix; returns ascending eigenvalues.
inline std::vector<double> jacobi_eigenvalues(Tensor a) {
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

inline Tensor tridiagonal_dense(const std::vector<double>& d, const std::vector<double>& e) {
  Tensor a(d.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) a(i, i) = d[i];
  for (std::size_t i = 0; i < e.size(); ++i) a(i, i + 1) = a(i + 1, i) = e[i];
  return a;
}

/// Squared L2 residual of the 1-D eigen-equation, periodic trapezoid on 4096 points.
inline double galerkin_residual(const Eigenpair1D& e, double c, int freq) {
  const int pts = 4096;
  const double h = 2.0 * std::numbers::pi / pts;
  double acc = 0.0;
  for (int i = 0; i < pts; ++i) {
    double x = i * h;
    double r = -e.second_derivative(x) + c * std::cos(freq * x) * e.value(x) - e.lambda * e.value(x);
    acc += r * r * h;  // periodic trapezoid
  }
  return acc;
}

// Oracle heads from a known eigenpair: psi at X_0 and sigma^T grad psi at every state.
inline PropagationInputs oracle_inputs(Tape& t, const PathBatch& b, const ProblemSpec& p,
                                const KnownEigenpair& e) {
  const std::size_t kp = b.paths, d = b.dim;
  Tensor psi0(kp, 1), g(b.states.rows(), d);
  std::vector<double> raw(d);
  for (std::size_t k = 0; k < kp; ++k) psi0(k, 0) = e.psi(b.states.row(k));
  for (std::size_t r = 0; r < b.states.rows(); ++r) {
    e.grad(b.states.row(r), raw);
    p.scale_gradient(raw, g.row(r));
  }
  return {t.constant(psi0), t.constant(g), t.constant(e.lambda), t.constant(1.0)};
}

inline double mean_terminal_residual(const PathBatch& b, const KnownEigenpair& e) {
  double acc = 0.0;
  auto ut = b.values.back().values();
  for (std::size_t k = 0; k < b.paths; ++k) {
    acc += std::abs(ut[k] - e.psi(b.states.row(b.intervals() * b.paths + k)));
  }
  return acc / static_cast<double>(b.paths);
}

}  // namespace fkeig::oracle
