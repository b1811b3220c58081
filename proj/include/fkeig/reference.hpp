#pragma once
// Fourier-Galerkin reference solver for  -psi'' + c cos(freq x) psi = lambda psi
// on [0, 2 pi] with periodic boundary conditions, and tensor-product assembly
// of d-dimensional eigenpairs for separable potentials.

#include "fkeig/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <queue>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fkeig {

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TridiagonalEigen {
  std::vector<double> values;  // ascending
  Tensor vectors;              // n x n, column j pairs with values[j]
};

/// Symmetric tridiagonal eigensolver: QL iteration with implicit Wilkinson
/// shifts and accumulated Givens rotations (the tql2 scheme).
/// offdiag[i] couples rows i and i+1.
inline TridiagonalEigen tridiag_eigensolve(std::span<const double> diag,
                                           std::span<const double> offdiag,
                                           int max_sweeps_per_value = 60) {
  const std::size_t n = diag.size();
  if (n == 0) return {};
  if (offdiag.size() + 1 != n) {
    throw std::invalid_argument("tridiag_eigensolve: offdiag must have n-1 entries");
  }
  std::vector<double> d(diag.begin(), diag.end());
  std::vector<double> e(n, 0.0);
  std::copy(offdiag.begin(), offdiag.end(), e.begin());
  Tensor z(n, n);
  for (std::size_t i = 0; i < n; ++i) z(i, i) = 1.0;

  for (std::size_t l = 0; l < n; ++l) {
    int iter = 0;
    std::size_t m;
    do {
      for (m = l; m + 1 < n; ++m) {
        double dd = std::abs(d[m]) + std::abs(d[m + 1]);
        if (std::abs(e[m]) <= std::numeric_limits<double>::epsilon() * dd) break;
      }
      if (m != l) {
        if (iter++ == max_sweeps_per_value) {
          throw ConvergenceError("tridiag_eigensolve: no convergence for eigenvalue " +
                                 std::to_string(l));
        }
        double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
        double r = std::hypot(g, 1.0);
        g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
        double s = 1.0, c = 1.0, p = 0.0;
        std::size_t i = m;
        bool deflated = false;
        while (i-- > l) {
          double f = s * e[i];
          double b = c * e[i];
          r = std::hypot(f, g);
          e[i + 1] = r;
          if (r == 0.0) {
            d[i + 1] -= p;
            e[m] = 0.0;
            deflated = true;
            break;
          }
          s = f / r;
          c = g / r;
          g = d[i + 1] - p;
          r = (d[i] - g) * s + 2.0 * c * b;
          p = s * r;
          d[i + 1] = g + p;
          g = c * r - b;
          for (std::size_t k = 0; k < n; ++k) {
            f = z(k, i + 1);
            z(k, i + 1) = s * z(k, i) + c * f;
            z(k, i) = c * z(k, i) - s * f;
          }
        }
        if (deflated) continue;
        d[l] -= p;
        e[l] = g;
        e[m] = 0.0;
      }
    } while (m != l);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return d[a] < d[b]; });
  TridiagonalEigen out{std::vector<double>(n), Tensor(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = d[order[j]];
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = z(k, order[j]);
  }
  return out;
}

struct FourierProblem1D {
  double c = 0.0;
  int freq = 1;          // potential c * cos(freq * x)
  std::size_t modes = 32;  // Fourier modes -modes..modes
};

/// Galerkin matrix in the exponential basis e^{imx}, m = -N..N (row index m + N):
/// 2 m^2 on the diagonal and c at distance freq. Its eigenvalues are 2 lambda.
struct SpectralMatrix {
  std::size_t modes = 0;
  int freq = 1;
  double c = 0.0;

  std::size_t size() const { return 2 * modes + 1; }
  double operator()(std::size_t r, std::size_t col) const {
    if (r == col) {
      double m = static_cast<double>(r) - static_cast<double>(modes);
      return 2.0 * m * m;
    }
    std::size_t dist = r > col ? r - col : col - r;
    return dist == static_cast<std::size_t>(freq) ? c : 0.0;
  }
  Tensor dense() const {
    Tensor a(size(), size());
    for (std::size_t r = 0; r < size(); ++r) {
      for (std::size_t col = 0; col < size(); ++col) a(r, col) = (*this)(r, col);
    }
    return a;
  }
};

inline SpectralMatrix build_matrix(const FourierProblem1D& prob) {
  if (prob.modes < 1) throw std::invalid_argument("Fourier truncation must be >= 1");
  if (prob.freq < 1) throw std::invalid_argument("potential frequency must be >= 1");
  return SpectralMatrix{prob.modes, prob.freq, prob.c};
}

/// Real eigenfunction psi(x) = sum_m cos_coeffs[m] cos(m x) + sum_m sin_coeffs[m] sin(m x),
/// normalized so that (1/2pi) int psi^2 = 1.
struct Eigenpair1D {
  double lambda = 0.0;
  std::vector<double> cos_coeffs;  // m = 0..N
  std::vector<double> sin_coeffs;  // m = 0..N, entry 0 unused (zero)

  double value(double x) const {
    double v = 0.0;
    for (std::size_t m = 0; m < cos_coeffs.size(); ++m) {
      double mx = static_cast<double>(m) * x;
      v += cos_coeffs[m] * std::cos(mx) + sin_coeffs[m] * std::sin(mx);
    }
    return v;
  }
  double derivative(double x) const {
    double v = 0.0;
    for (std::size_t m = 1; m < cos_coeffs.size(); ++m) {
      double fm = static_cast<double>(m);
      v += fm * (-cos_coeffs[m] * std::sin(fm * x) + sin_coeffs[m] * std::cos(fm * x));
    }
    return v;
  }
  double second_derivative(double x) const {
    double v = 0.0;
    for (std::size_t m = 1; m < cos_coeffs.size(); ++m) {
      double fm = static_cast<double>(m);
      v -= fm * fm * (cos_coeffs[m] * std::cos(fm * x) + sin_coeffs[m] * std::sin(fm * x));
    }
    return v;
  }
  /// Coefficients a_m of e^{imx}, m = -N..N, as (real, imag) pairs.
  std::vector<std::pair<double, double>> exponential_coeffs() const {
    const std::size_t n = cos_coeffs.size() - 1;
    std::vector<std::pair<double, double>> a(2 * n + 1);
    a[n] = {cos_coeffs[0], 0.0};
    for (std::size_t m = 1; m <= n; ++m) {
      a[n + m] = {0.5 * cos_coeffs[m], -0.5 * sin_coeffs[m]};
      a[n - m] = {0.5 * cos_coeffs[m], 0.5 * sin_coeffs[m]};
    }
    return a;
  }
};

namespace detail {

// Splits a symmetric matrix into connected components of its sparsity graph.
// Each component must be tridiagonal in increasing index order.
inline std::vector<std::vector<std::size_t>> tridiagonal_chains(const Tensor& a) {
  const std::size_t n = a.rows();
  std::vector<int> comp(n, -1);
  std::vector<std::vector<std::size_t>> chains;
  for (std::size_t s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    std::vector<std::size_t> members;
    std::vector<std::size_t> stack{s};
    comp[s] = static_cast<int>(chains.size());
    while (!stack.empty()) {
      std::size_t i = stack.back();
      stack.pop_back();
      members.push_back(i);
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i && a(i, j) != 0.0 && comp[j] < 0) {
          comp[j] = comp[s];
          stack.push_back(j);
        }
      }
    }
    std::sort(members.begin(), members.end());
    for (std::size_t p = 0; p < members.size(); ++p) {
      for (std::size_t q = p + 2; q < members.size(); ++q) {
        if (a(members[p], members[q]) != 0.0) {
          throw std::logic_error("Galerkin block is not tridiagonal");
        }
      }
    }
    chains.push_back(std::move(members));
  }
  return chains;
}

struct BlockPair {
  double value;
  bool even;
  std::vector<double> coeffs;  // in the block's orthonormal basis
};

inline void solve_block(const Tensor& block, bool even, std::vector<BlockPair>& out) {
  for (const auto& chain : tridiagonal_chains(block)) {
    std::vector<double> diag(chain.size()), off(chain.size() - 1);
    for (std::size_t p = 0; p < chain.size(); ++p) {
      diag[p] = block(chain[p], chain[p]);
      if (p + 1 < chain.size()) off[p] = block(chain[p], chain[p + 1]);
    }
    auto eig = tridiag_eigensolve(diag, off);
    for (std::size_t j = 0; j < chain.size(); ++j) {
      BlockPair bp{eig.values[j], even, std::vector<double>(block.rows(), 0.0)};
      for (std::size_t p = 0; p < chain.size(); ++p) bp.coeffs[chain[p]] = eig.vectors(p, j);
      out.push_back(std::move(bp));
    }
  }
}

}  // namespace detail

/// All 2N+1 eigenpairs, ascending in lambda.
///
/// The exponential-basis matrix commutes with m -> -m, so it is reduced to the
/// even block over {1, sqrt2 cos mx} and the odd block over {sqrt2 sin mx};
/// each block splits into tridiagonal chains (residues mod freq). The real
/// basis makes every eigenfunction real, even within degenerate pairs.
inline std::vector<Eigenpair1D> solve_1d_all(const FourierProblem1D& prob) {
  const SpectralMatrix a = build_matrix(prob);
  const std::size_t n = prob.modes;
  auto at = [&](long m, long k) {
    return a(static_cast<std::size_t>(m + static_cast<long>(n)),
             static_cast<std::size_t>(k + static_cast<long>(n)));
  };
  const double r2 = std::numbers::sqrt2;

  // Even basis s_0 = e_0, s_m = (e_m + e_-m)/sqrt2; odd basis t_m = (e_m - e_-m)/sqrt2.
  Tensor even(n + 1, n + 1), odd(n, n);
  for (std::size_t p = 0; p <= n; ++p) {
    for (std::size_t q = 0; q <= n; ++q) {
      long mp = static_cast<long>(p), mq = static_cast<long>(q);
      double v;
      if (p == 0 && q == 0) v = at(0, 0);
      else if (p == 0) v = (at(0, mq) + at(0, -mq)) / r2;
      else if (q == 0) v = (at(mp, 0) + at(-mp, 0)) / r2;
      else v = 0.5 * (at(mp, mq) + at(mp, -mq) + at(-mp, mq) + at(-mp, -mq));
      even(p, q) = v;
    }
  }
  for (std::size_t p = 1; p <= n; ++p) {
    for (std::size_t q = 1; q <= n; ++q) {
      long mp = static_cast<long>(p), mq = static_cast<long>(q);
      odd(p - 1, q - 1) = 0.5 * (at(mp, mq) - at(mp, -mq) - at(-mp, mq) + at(-mp, -mq));
    }
  }

  std::vector<detail::BlockPair> pairs;
  detail::solve_block(even, true, pairs);
  detail::solve_block(odd, false, pairs);
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const auto& x, const auto& y) { return x.value < y.value; });

  std::vector<Eigenpair1D> out;
  out.reserve(pairs.size());
  for (const auto& bp : pairs) {
    Eigenpair1D e;
    e.lambda = bp.value / 2.0;
    e.cos_coeffs.assign(n + 1, 0.0);
    e.sin_coeffs.assign(n + 1, 0.0);
    if (bp.even) {
      e.cos_coeffs[0] = bp.coeffs[0];
      for (std::size_t m = 1; m <= n; ++m) e.cos_coeffs[m] = r2 * bp.coeffs[m];
    } else {
      for (std::size_t m = 1; m <= n; ++m) e.sin_coeffs[m] = r2 * bp.coeffs[m - 1];
    }
    // Sign: nonnegative mean; zero-mean functions get a positive largest coefficient.
    double sign_ref = e.cos_coeffs[0];
    if (std::abs(sign_ref) < 1e-14) {
      double best = 0.0;
      for (std::size_t m = 0; m <= n; ++m) {
        for (double v : {e.cos_coeffs[m], e.sin_coeffs[m]}) {
          if (std::abs(v) > std::abs(best) + 1e-14) best = v;
        }
      }
      sign_ref = best;
    }
    if (sign_ref < 0.0) {
      for (double& v : e.cos_coeffs) v = -v;
      for (double& v : e.sin_coeffs) v = -v;
    }
    out.push_back(std::move(e));
  }
  return out;
}

/// index-th smallest eigenpair (0 = ground state).
inline Eigenpair1D solve_1d(const FourierProblem1D& prob, std::size_t index) {
  if (index >= 2 * prob.modes + 1) {
    throw std::out_of_range("eigenpair index " + std::to_string(index) + " exceeds basis size " +
                            std::to_string(2 * prob.modes + 1));
  }
  return solve_1d_all(prob)[index];
}

/// Product eigenpair psi(x) = prod_j psi_j(x_j), lambda = sum_j lambda_j.
struct TensorEigenpair {
  double lambda = 0.0;
  std::vector<std::size_t> levels;
  std::vector<Eigenpair1D> factors;

  double value(std::span<const double> x) const {
    double v = 1.0;
    for (std::size_t j = 0; j < factors.size(); ++j) v *= factors[j].value(x[j]);
    return v;
  }
  void gradient(std::span<const double> x, std::span<double> out) const {
    const std::size_t d = factors.size();
    std::vector<double> vals(d), ders(d);
    for (std::size_t j = 0; j < d; ++j) {
      vals[j] = factors[j].value(x[j]);
      ders[j] = factors[j].derivative(x[j]);
    }
    for (std::size_t i = 0; i < d; ++i) {
      double g = ders[i];
      for (std::size_t j = 0; j < d; ++j) {
        if (j != i) g *= vals[j];
      }
      out[i] = g;
    }
  }
};

inline TensorEigenpair assemble_tensor_product(
    const std::vector<std::vector<Eigenpair1D>>& per_dim, std::span<const std::size_t> selection) {
  if (selection.size() != per_dim.size()) {
    throw std::invalid_argument("one selected level per dimension is required");
  }
  TensorEigenpair out;
  for (std::size_t j = 0; j < per_dim.size(); ++j) {
    if (selection[j] >= per_dim[j].size()) throw std::out_of_range("selected level out of range");
    out.factors.push_back(per_dim[j][selection[j]]);
    out.levels.push_back(selection[j]);
    out.lambda += per_dim[j][selection[j]].lambda;
  }
  return out;
}

/// The `count` lowest d-dimensional eigenpairs, ranked by sum of 1-D levels.
/// per_dim[j] must be ascending. Ties keep lexicographic order of level tuples.
inline std::vector<TensorEigenpair> lowest_tensor_eigenpairs(
    const std::vector<std::vector<Eigenpair1D>>& per_dim, std::size_t count) {
  using Levels = std::vector<std::size_t>;
  auto total = [&](const Levels& lv) {
    double s = 0.0;
    for (std::size_t j = 0; j < lv.size(); ++j) s += per_dim[j][lv[j]].lambda;
    return s;
  };
  auto cmp = [&](const std::pair<double, Levels>& a, const std::pair<double, Levels>& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second > b.second;
  };
  std::priority_queue<std::pair<double, Levels>, std::vector<std::pair<double, Levels>>,
                      decltype(cmp)>
      frontier(cmp);
  std::set<Levels> seen;
  Levels start(per_dim.size(), 0);
  frontier.emplace(total(start), start);
  seen.insert(start);
  std::vector<TensorEigenpair> out;
  while (!frontier.empty() && out.size() < count) {
    auto [lam, lv] = frontier.top();
    frontier.pop();
    out.push_back(assemble_tensor_product(per_dim, lv));
    for (std::size_t j = 0; j < lv.size(); ++j) {
      if (lv[j] + 1 >= per_dim[j].size()) continue;
      Levels next = lv;
      ++next[j];
      if (seen.insert(next).second) frontier.emplace(total(next), next);
    }
  }
  return out;
}

}  // namespace fkeig
