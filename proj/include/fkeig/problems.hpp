#pragma once
// Operator catalogue. Every operator has the form
//
//   L psi = -1/2 Tr(sigma sigma^T Hess psi) - b . grad psi + f(x, psi, sigma^T grad psi)
//
// on [0, 2pi]^d with periodic boundary conditions. The catalogue operators are
// all written with -Laplacian as their second-order part, which matches the
// general form with sigma = sqrt(2) I.

#include "fkeig/autodiff.hpp"
#include "fkeig/reference.hpp"

#include <Eigen/LU>
#include <boost/math/quadrature/gauss.hpp>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <iostream>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fkeig {

struct KnownEigenpair {
  double lambda = 0.0;
  std::function<double(std::span<const double>)> psi;
  std::function<void(std::span<const double>, std::span<double>)> grad;  // unscaled grad psi
};

enum class ProblemKind { FokkerPlanck, LinearSchrodinger, NonlinearSchrodinger, DoubleWell };

inline std::string to_string(ProblemKind k) {
  switch (k) {
    case ProblemKind::FokkerPlanck: return "fokker_planck";
    case ProblemKind::LinearSchrodinger: return "linear_schrodinger";
    case ProblemKind::NonlinearSchrodinger: return "nonlinear_schrodinger";
    case ProblemKind::DoubleWell: return "double_well";
  }
  return "unknown";
}

inline ProblemKind parse_problem_kind(const std::string& s) {
  for (auto k : {ProblemKind::FokkerPlanck, ProblemKind::LinearSchrodinger,
                 ProblemKind::NonlinearSchrodinger, ProblemKind::DoubleWell}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown problem type '" + s + "'");
}

struct ProblemSpec {
  ProblemKind kind = ProblemKind::LinearSchrodinger;
  std::size_t dim = 1;
  Tensor sigma;
  Tensor sigma_inv;
  std::vector<double> coefficients;
  double epsilon = 0.0;

  /// b(x); empty means b = 0.
  std::function<void(std::span<const double>, std::span<double>)> drift;
  /// Linear part of the reaction: f(x, u, g) = potential(x) u + nonlinear(u, g).
  std::function<double(std::span<const double>)> potential;
  /// Nonlinear part; empty for linear operators.
  std::function<double(double, std::span<const double>)> nonlinear;
  std::function<Var(Var, Var)> nonlinear_tape;

  std::vector<KnownEigenpair> eigenpairs;

  bool semilinear() const { return static_cast<bool>(nonlinear); }
  std::string name() const { return to_string(kind); }

  double reaction(std::span<const double> x, double u, std::span<const double> scaled_grad) const {
    double f = potential ? potential(x) * u : 0.0;
    if (nonlinear) f += nonlinear(u, scaled_grad);
    return f;
  }

  /// sigma^{-1} b(x), so that b . grad u = (sigma^{-1} b) . (sigma^T grad u).
  void drift_in_noise_coords(std::span<const double> x, std::span<double> out) const {
    if (!drift) {
      std::fill(out.begin(), out.end(), 0.0);
      return;
    }
    std::vector<double> b(dim);
    drift(x, b);
    for (std::size_t i = 0; i < dim; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < dim; ++j) acc += sigma_inv(i, j) * b[j];
      out[i] = acc;
    }
  }

  /// sigma^T v
  void scale_gradient(std::span<const double> v, std::span<double> out) const {
    for (std::size_t i = 0; i < dim; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < dim; ++j) acc += sigma(j, i) * v[j];
      out[i] = acc;
    }
  }
};

inline Tensor invert_matrix(const Tensor& m) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> a(m.values().data(), m.rows(), m.cols());
  Eigen::FullPivLU<Mat> lu(a);
  if (!lu.isInvertible()) throw std::invalid_argument("sigma must be invertible");
  Mat inv = lu.inverse();
  Tensor out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = inv(r, c);
  }
  return out;
}

/// -Laplacian = -1/2 Tr(sigma sigma^T Hess) requires sigma sigma^T = 2 I.
inline void set_laplacian_diffusion(ProblemSpec& p) {
  p.sigma = Tensor(p.dim, p.dim);
  for (std::size_t i = 0; i < p.dim; ++i) p.sigma(i, i) = std::numbers::sqrt2;
  p.sigma_inv = invert_matrix(p.sigma);
}

/// Evenly spaced default coefficients over [lo, hi]; a single dimension takes hi.
inline std::vector<double> default_coefficients(std::size_t dim, double lo, double hi) {
  std::vector<double> c(dim, hi);
  if (dim > 1) {
    for (std::size_t i = 0; i < dim; ++i) {
      c[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(dim - 1);
    }
  }
  return c;
}

/// L psi = -Lap psi - div(psi grad V), V(x) = sin(sum_i c_i cos x_i).
/// Ground state lambda = 0, psi = exp(-V).
inline ProblemSpec fokker_planck(std::size_t dim, std::vector<double> c) {
  if (c.size() != dim) throw std::invalid_argument("fokker_planck: need one coefficient per dim");
  ProblemSpec p;
  p.kind = ProblemKind::FokkerPlanck;
  p.dim = dim;
  p.coefficients = c;
  set_laplacian_diffusion(p);

  auto inner = [c](std::span<const double> x) {
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * std::cos(x[i]);
    return s;
  };
  auto potential_v = [inner](std::span<const double> x) { return std::sin(inner(x)); };
  auto grad_v = [c, inner](std::span<const double> x, std::span<double> out) {
    double cs = std::cos(inner(x));
    for (std::size_t i = 0; i < c.size(); ++i) out[i] = -cs * c[i] * std::sin(x[i]);
  };
  auto lap_v = [c, inner](std::span<const double> x) {
    double s = inner(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      double si = c[i] * std::sin(x[i]);
      acc += -std::sin(s) * si * si - std::cos(s) * c[i] * std::cos(x[i]);
    }
    return acc;
  };
  // -Lap psi - grad V . grad psi - (Lap V) psi  =>  b = grad V, f = -Lap V.
  p.drift = grad_v;
  p.potential = [lap_v](std::span<const double> x) { return -lap_v(x); };

  KnownEigenpair ground;
  ground.lambda = 0.0;
  ground.psi = [potential_v](std::span<const double> x) { return std::exp(-potential_v(x)); };
  ground.grad = [potential_v, grad_v](std::span<const double> x, std::span<double> out) {
    grad_v(x, out);
    double e = std::exp(-potential_v(x));
    for (double& g : out) g = -g * e;
  };
  p.eigenpairs.push_back(std::move(ground));
  return p;
}

namespace detail {

inline void attach_separable_reference(ProblemSpec& p, int freq, std::size_t modes,
                                       std::size_t count) {
  std::vector<std::vector<Eigenpair1D>> per_dim;
  for (double c : p.coefficients) per_dim.push_back(solve_1d_all({c, freq, modes}));
  for (auto& t : lowest_tensor_eigenpairs(per_dim, count)) {
    auto shared = std::make_shared<TensorEigenpair>(std::move(t));
    KnownEigenpair e;
    e.lambda = shared->lambda;
    e.psi = [shared](std::span<const double> x) { return shared->value(x); };
    e.grad = [shared](std::span<const double> x, std::span<double> out) {
      shared->gradient(x, out);
    };
    p.eigenpairs.push_back(std::move(e));
  }
}

}  // namespace detail

/// L psi = -Lap psi + V psi, V(x) = sum_i c_i cos x_i. Reference eigenpairs from
/// the separable spectral solver.
inline ProblemSpec linear_schrodinger(std::size_t dim, std::vector<double> c,
                                      std::size_t reference_modes = 32,
                                      std::size_t reference_count = 3) {
  if (c.size() != dim) {
    throw std::invalid_argument("linear_schrodinger: need one coefficient per dim");
  }
  for (double ci : c) {
    if (ci < 0.0 || ci > 0.2) {
      std::cerr << "warning: linear_schrodinger coefficient " << ci
                << " outside the usual range [0, 0.2]\n";
      break;
    }
  }
  ProblemSpec p;
  p.kind = ProblemKind::LinearSchrodinger;
  p.dim = dim;
  p.coefficients = c;
  set_laplacian_diffusion(p);
  p.potential = [c](std::span<const double> x) {
    double v = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) v += c[i] * std::cos(x[i]);
    return v;
  };
  detail::attach_separable_reference(p, 1, reference_modes, reference_count);
  return p;
}

/// L psi = -Lap psi + V psi with V(x) = sum_i A_i cos(2 x_i).
inline ProblemSpec double_well_schrodinger(std::size_t dim, std::vector<double> a,
                                           std::size_t reference_modes = 32,
                                           std::size_t reference_count = 3) {
  if (a.size() != dim) throw std::invalid_argument("double_well: need one coefficient per dim");
  ProblemSpec p;
  p.kind = ProblemKind::DoubleWell;
  p.dim = dim;
  p.coefficients = a;
  set_laplacian_diffusion(p);
  p.potential = [a](std::span<const double> x) {
    double v = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) v += a[i] * std::cos(2.0 * x[i]);
    return v;
  };
  detail::attach_separable_reference(p, 2, reference_modes, reference_count);
  return p;
}

/// c such that psi = exp((1/d) sum cos x_j) / c has (1/|Omega|) int psi^2 = 1.
/// The integrand factorizes; each 1-D factor uses Gauss-Legendre quadrature.
inline double nls_normalizer(std::size_t dim) {
  const double a = 2.0 / static_cast<double>(dim);
  auto f = [a](double x) { return std::exp(a * std::cos(x)); };
  // Split at pi so each panel is smooth and symmetric.
  double one_d = boost::math::quadrature::gauss<double, 30>::integrate(f, 0.0, std::numbers::pi) +
                 boost::math::quadrature::gauss<double, 30>::integrate(f, std::numbers::pi,
                                                                        2.0 * std::numbers::pi);
  one_d /= 2.0 * std::numbers::pi;
  return std::sqrt(std::pow(one_d, static_cast<double>(dim)));
}

/// L psi = -Lap psi + eps psi^3 + V psi with V chosen so that lambda = -3 and
/// psi = exp((1/d) sum cos x_j) / c is an eigenpair. The exp term of V carries
/// eps so the pair stays exact for any eps (eps = 1 is the standard case).
inline ProblemSpec nonlinear_schrodinger(std::size_t dim, double epsilon = 1.0) {
  ProblemSpec p;
  p.kind = ProblemKind::NonlinearSchrodinger;
  p.dim = dim;
  p.epsilon = epsilon;
  set_laplacian_diffusion(p);
  const double c = nls_normalizer(dim);
  const double fd = static_cast<double>(dim);
  p.coefficients = {c};
  p.potential = [=](std::span<const double> x) {
    double sc = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      double s = std::sin(x[i]);
      sc += std::cos(x[i]);
      tail += s * s / (fd * fd) - std::cos(x[i]) / fd;
    }
    return -epsilon / (c * c) * std::exp(2.0 / fd * sc) + tail - 3.0;
  };
  p.nonlinear = [epsilon](double u, std::span<const double>) { return epsilon * u * u * u; };
  p.nonlinear_tape = [epsilon](Var u, Var) { return scale(mul(u, square(u)), epsilon); };

  KnownEigenpair e;
  e.lambda = -3.0;
  e.psi = [=](std::span<const double> x) {
    double sc = 0.0;
    for (std::size_t i = 0; i < dim; ++i) sc += std::cos(x[i]);
    return std::exp(sc / fd) / c;
  };
  e.grad = [=](std::span<const double> x, std::span<double> out) {
    double sc = 0.0;
    for (std::size_t i = 0; i < dim; ++i) sc += std::cos(x[i]);
    double v = std::exp(sc / fd) / c;
    for (std::size_t i = 0; i < dim; ++i) out[i] = -v * std::sin(x[i]) / fd;
  };
  p.eigenpairs.push_back(std::move(e));
  return p;
}

}  // namespace fkeig
