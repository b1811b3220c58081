#pragma once
// Finite-difference oracle for the full training loss. The loss is recomputed
// in plain extended-precision arithmetic (own feature map, MLP, forward-mode input Jacobian and
// propagation), so the check does not share any tape code with the trainer.

#include "fkeig/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace fkeig::oracle {

struct PlainZ {
  bool from_batch = false;  // Z = gamma * previous + (1 - gamma) * Zhat(params)
  double value = 1.0;       // used when !from_batch
  double previous = 0.0;
  double gamma = 0.0;
};

// The oracle runs in extended precision so that difference quotients of a
// large loss stay well below the absolute gradient floor.
using real = long double;

struct PlainLoss {
  real total = 0.0;
  std::vector<char> pattern;  // ReLU signs and clip states; FD is valid while it is unchanged
};

namespace detail {

struct HeadEval {
  std::vector<real> out;
  std::vector<real> jac;  // out x d, filled when requested
};

inline HeadEval eval_head_plain(const MlpHead& head, std::span<const double> x, std::size_t order,
                                bool with_jacobian, std::vector<char>& pattern) {
  const std::size_t d = x.size();
  std::vector<real> h(2 * order * d, 0.0), jac(with_jacobian ? h.size() * d : 0, 0.0);
  for (std::size_t j = 1; j <= order; ++j) {
    for (std::size_t i = 0; i < d; ++i) {
      const real a = static_cast<real>(j) * x[i];
      const std::size_t s = (j - 1) * d + i, c = order * d + s;
      h[s] = std::sin(a);
      h[c] = std::cos(a);
      if (with_jacobian) {
        jac[s * d + i] = static_cast<real>(j) * std::cos(a);
        jac[c * d + i] = -static_cast<real>(j) * std::sin(a);
      }
    }
  }
  for (std::size_t l = 0; l < head.layers.size(); ++l) {
    const auto& W = head.layers[l].weight;
    const auto& b = head.layers[l].bias;
    const std::size_t in = W.rows(), out = W.cols();
    std::vector<real> z(out), zj(with_jacobian ? out * d : 0, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      real acc = b(0, o);
      for (std::size_t i = 0; i < in; ++i) acc += h[i] * W(i, o);
      z[o] = acc;
      if (with_jacobian) {
        for (std::size_t q = 0; q < d; ++q) {
          real aj = 0.0;
          for (std::size_t i = 0; i < in; ++i) aj += jac[i * d + q] * W(i, o);
          zj[o * d + q] = aj;
        }
      }
    }
    if (l + 1 < head.layers.size()) {
      for (std::size_t o = 0; o < out; ++o) {
        const bool on = z[o] > 0.0;
        pattern.push_back(on ? 1 : 0);
        if (!on) {
          z[o] = 0.0;
          if (with_jacobian) std::fill_n(zj.begin() + static_cast<std::ptrdiff_t>(o * d), d, 0.0);
        }
      }
    }
    h = std::move(z);
    jac = std::move(zj);
  }
  return {std::move(h), std::move(jac)};
}

}  // namespace detail

/// Full loss in plain reals for one batch and the given normalization input.
inline PlainLoss plain_loss(const NetworkParams& p, const ProblemSpec& problem,
                            const TrainConfig& cfg, const PathBatch& batch, const PlainZ& zin) {
  const std::size_t kp = batch.paths, d = batch.dim, n_int = batch.intervals();
  const std::size_t order = p.features.order;
  PlainLoss res;
  auto& pat = res.pattern;

  std::vector<real> u(kp);
  real sq = 0.0, sum = 0.0;
  for (std::size_t k = 0; k < kp; ++k) {
    u[k] = detail::eval_head_plain(p.psi, batch.states.row(k), order, false, pat).out[0];
    sq += u[k] * u[k];
    sum += u[k];
  }
  real z = zin.value;
  if (zin.from_batch) {
    const real zhat = (sum > 0.0 ? 1.0 : (sum < 0.0 ? -1.0 : 0.0)) *
                        std::sqrt(sq / static_cast<real>(kp));
    z = zin.gamma * zin.previous + (1.0 - zin.gamma) * zhat;
  }
  for (real& v : u) v /= z;

  std::vector<double> drift(d);
  // Cubic term of the nonlinear problem, recomputed at extended precision.
  auto nonlinear = [&](real u) {
    if (problem.kind != ProblemKind::NonlinearSchrodinger) {
      throw std::logic_error("plain_loss: no extended-precision reaction for " + problem.name());
    }
    return static_cast<real>(problem.epsilon) * u * u * u;
  };
  std::vector<std::vector<real>> g_terminal(kp);
  for (std::size_t n = 0; n <= n_int; ++n) {
    for (std::size_t k = 0; k < kp; ++k) {
      auto x = batch.states.row(n * kp + k);
      auto g = detail::eval_head_plain(p.grad, x, order, false, pat).out;
      if (n == n_int) {
        g_terminal[k] = g;
        continue;
      }
      const real dt = batch.grid.dt(n);
      const real v = problem.potential ? problem.potential(x) : 0.0L;
      problem.drift_in_noise_coords(x, drift);
      auto dw = batch.increments.row(n * kp + k);
      real noise = 0.0;
      for (std::size_t i = 0; i < d; ++i) noise += g[i] * (dw[i] - drift[i] * dt);
      real next = u[k] + (v * u[k] - p.lambda * u[k]) * dt + noise;
      if (problem.semilinear()) {
        next += nonlinear(u[k]) * dt;
        const real lower = cfg.clip.lower, upper = cfg.clip.upper;
        const bool lo = next <= lower, hi = next >= upper;
        pat.push_back(lo ? 2 : (hi ? 3 : 4));
        next = std::clamp(next, lower, upper);
      }
      u[k] = next;
    }
  }

  real t1 = 0.0, t2 = 0.0;
  for (std::size_t k = 0; k < kp; ++k) {
    auto x = batch.states.row(n_int * kp + k);
    auto e = detail::eval_head_plain(p.psi, x, order, true, pat);
    const real r = e.out[0] / z - u[k];
    t1 += r * r;
    for (std::size_t i = 0; i < d; ++i) {
      real s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += problem.sigma(j, i) * e.jac[j];
      const real q = g_terminal[k][i] - s / z;
      t2 += q * q;
    }
  }
  const real inv_k = 1.0 / static_cast<real>(kp);
  res.total = cfg.eta1 * inv_k * t1 + cfg.eta2 * inv_k * t2 + cfg.eta3 * std::max(static_cast<real>(cfg.z0) - z, 0.0L);
  pat.push_back(z < cfg.z0 ? 5 : 6);
  return res;
}

struct GradCheckCase {
  std::string description;
  std::size_t parameters = 0;
  double worst_rel = 0.0;  // largest relative error among entries above the absolute floor
  double value_gap = 0.0;  // |tape loss - plain loss| / max(1, |plain loss|)
  bool passed = false;
  std::size_t redraws = 0;  // draws rejected because a stencil point crossed a kink
};

inline bool gradient_entry_ok(double analytic, double fd, double rel_tol, double abs_floor) {
  const double diff = std::abs(analytic - fd);
  return diff <= abs_floor || diff <= rel_tol * std::max(std::abs(analytic), std::abs(fd));
}

/// One random configuration (d <= 3, widths <= 8, N = 3, K = 4); analytic
/// gradient from the trainer against a 4-point central difference of plain_loss.
inline GradCheckCase check_random_configuration(std::uint64_t seed, double rel_tol = 1e-4,
                                                double abs_floor = 1e-8) {
  GradCheckCase out;
  for (std::uint64_t attempt = 0;; ++attempt) {
    CounterRng rng(seed, StreamTag::Scratch, attempt, 0);
    auto pick = [&](std::size_t n) {
      return std::min(n - 1, static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(n))));
    };
    const std::size_t d = 1 + pick(3);
    const std::size_t kind = pick(3);
    std::vector<double> c(d);
    for (double& v : c) v = kind == 1 ? rng.uniform(0.0, 0.2) : rng.uniform(0.05, 0.6);
    ProblemSpec problem = kind == 0   ? fokker_planck(d, c)
                          : kind == 1 ? linear_schrodinger(d, c, 8, 1)
                                      : nonlinear_schrodinger(d, rng.uniform(0.2, 1.0));
    TrainConfig cfg;
    cfg.horizon = rng.uniform(0.05, 0.3);
    cfg.intervals = 3;
    cfg.batch = 4;
    cfg.order = 1 + pick(3);
    cfg.hidden.assign(1 + pick(2), 0);
    for (auto& w : cfg.hidden) w = 1 + pick(8);
    cfg.clip = ClipBounds{-rng.uniform(1.0, 5.0), rng.uniform(1.0, 5.0)};
    NetworkParams params = init_network(d, cfg.order, cfg.hidden, rng.uniform(-1.0, 1.0),
                                        seed * 7919 + attempt);
    for (Tensor* t : params.tensors()) {
      for (double& v : t->values()) v += rng.uniform(-0.2, 0.2);
    }
    PathBatch batch = training_batch(problem, cfg, seed + 1);
    batch.values.clear();

    // Z: fixed constant (default) or rebuilt from the batch estimate on the tape.
    const bool on_tape = rng.uniform() < 0.5;
    PlainZ pz;
    fkeig::detail::ZInput zin;
    if (on_tape) {
      pz.from_batch = zin.on_tape = true;
      pz.gamma = zin.gamma = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.1, 0.9);
      pz.previous = zin.previous = rng.uniform(0.5, 3.0);
      zin.first = pz.gamma == 0.0;
    } else {
      pz.value = zin.value = rng.uniform(0.5, 3.0) * (rng.uniform() < 0.2 ? -1.0 : 1.0);
    }

    Tape tape;
    auto shard = fkeig::detail::run_shard(tape, params, problem, cfg, batch, cfg.batch, zin,
                                          true, true);
    const PlainLoss base = plain_loss(params, problem, cfg, batch, pz);
    const double tape_loss = shard.terms.total.item();

    out.description = problem.name() + " d=" + std::to_string(d) + " M=" +
                      std::to_string(cfg.order) + " hidden=" + std::to_string(cfg.hidden.size()) +
                      (on_tape ? " z_gradient" : " stop-grad Z");
    out.value_gap = static_cast<double>(std::abs(tape_loss - base.total) /
                                        std::max(1.0L, std::abs(base.total)));

    auto blocks = parameter_blocks(params);
    bool kink = false;
    double worst = 0.0;
    bool ok = true;
    std::size_t count = 0;
    for (std::size_t b = 0; b < blocks.size() && !kink; ++b) {
      for (std::size_t i = 0; i < blocks[b].size(); ++i) {
        double& p = blocks[b][i];
        const double p0 = p, h = 1e-4;
        real f[4];
        const double offs[4] = {-2.0, -1.0, 1.0, 2.0};
        for (int s = 0; s < 4; ++s) {
          p = p0 + offs[s] * h;
          auto r = plain_loss(params, problem, cfg, batch, pz);
          if (r.pattern != base.pattern) kink = true;
          f[s] = r.total;
        }
        p = p0;
        if (kink) break;
        const double fd = static_cast<double>((f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * static_cast<real>(h)));
        const double an = shard.grads[b][i];
        if (!gradient_entry_ok(an, fd, rel_tol, abs_floor)) ok = false;
        if (std::abs(an - fd) > abs_floor) {
          worst = std::max(worst, std::abs(an - fd) / std::max(std::abs(an), std::abs(fd)));
        }
        ++count;
      }
    }
    if (kink) {
      ++out.redraws;
      continue;
    }
    out.parameters = count;
    out.worst_rel = worst;
    out.passed = ok && out.value_gap <= 1e-10;
    return out;
  }
}

}  // namespace fkeig::oracle
