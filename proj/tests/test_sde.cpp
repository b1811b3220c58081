#include "fkeig/problems.hpp"
#include "fkeig/sde.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

using namespace fkeig;
using oracle::mean_terminal_residual;
using oracle::oracle_inputs;

namespace {

ProblemSpec free_laplacian(std::size_t d) {
  ProblemSpec p;
  p.dim = d;
  set_laplacian_diffusion(p);
  return p;
}

Tensor identity(std::size_t d) {
  Tensor s(d, d);
  for (std::size_t i = 0; i < d; ++i) s(i, i) = 1.0;
  return s;
}

}  // namespace

TEST(TimeGrid, UniformPartition) {
  auto g = TimeGrid::uniform(0.3, 80);
  EXPECT_EQ(g.intervals(), 80u);
  EXPECT_EQ(g.times.front(), 0.0);
  EXPECT_EQ(g.horizon(), 0.3);
  for (std::size_t n = 0; n < 80; ++n) EXPECT_GT(g.dt(n), 0.0);
  EXPECT_THROW(TimeGrid::uniform(0.0, 5), std::invalid_argument);
  EXPECT_THROW(TimeGrid::uniform(1.0, 0), std::invalid_argument);
}

TEST(SampleInitial, SupportAndDeterminism) {
  Tensor a = sample_initial(1000, 3, 42, 7), b = sample_initial(1000, 3, 42, 7);
  EXPECT_EQ(a.storage(), b.storage());
  for (double v : a.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2.0 * std::numbers::pi);
  }
  Tensor c = sample_initial(1000, 3, 42, 8);
  EXPECT_NE(a.storage(), c.storage());
}

TEST(SampleInitial, MeanWithinThreeStandardErrors) {
  const std::size_t n = 1000000;
  Tensor x = sample_initial(n, 2, 5, 0);
  const double se = 2.0 * std::numbers::pi / std::sqrt(12.0) / std::sqrt(static_cast<double>(n));
  for (std::size_t i = 0; i < 2; ++i) {
    double m = 0.0;
    for (std::size_t k = 0; k < n; ++k) m += x(k, i);
    m /= static_cast<double>(n);
    EXPECT_LE(std::abs(m - std::numbers::pi), 3.0 * se);
  }
}

TEST(SimulateForward, ZeroIncrementsKeepStatesConstant) {
  Tensor x0 = sample_initial(5, 2, 1, 0);
  auto g = TimeGrid::uniform(1.0, 4);
  auto b = simulate_with_increments(x0, g, identity(2), Tensor(20, 2));
  for (std::size_t n = 0; n <= 4; ++n) EXPECT_EQ(b.state(n).storage(), x0.storage());
}

TEST(SimulateForward, OneStepIdentitySigma) {
  Tensor x0 = sample_initial(6, 3, 1, 0);
  auto b = simulate_forward(x0, TimeGrid::uniform(0.5, 1), identity(3), 3, 0);
  Tensor x1 = b.state(1), dw = b.increment(0);
  for (std::size_t i = 0; i < x1.size(); ++i) EXPECT_EQ(x1[i], x0[i] + dw[i]);
}

TEST(SimulateForward, TerminalVarianceMatchesDiffusion) {
  const std::size_t n = 100000;
  auto p = free_laplacian(2);
  Tensor x0 = sample_initial(n, 2, 9, 0);
  const double horizon = 0.4;
  auto b = simulate_forward(x0, TimeGrid::uniform(horizon, 8), p.sigma, 9, 0);
  Tensor xt = b.state(8);
  const double var_true = 2.0 * horizon;  // (sigma sigma^T)_ii T
  for (std::size_t i = 0; i < 2; ++i) {
    double m = 0.0, s = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      double dx = xt(k, i) - x0(k, i);
      m += dx;
      s += dx * dx;
    }
    m /= n;
    double var = s / n - m * m;
    // Std-error of a Gaussian sample variance: var * sqrt(2 / n).
    EXPECT_LE(std::abs(var - var_true), 3.0 * var_true * std::sqrt(2.0 / n));
  }
}

TEST(SimulateForward, SharedNoiseAndShardIndependence) {
  auto p = free_laplacian(2);
  Tensor x0 = sample_initial(8, 2, 4, 3);
  auto b = simulate_forward(x0, TimeGrid::uniform(0.2, 5), p.sigma, 4, 3);
  // Rebuilding X from the stored increments is bit-identical.
  auto again = simulate_with_increments(x0, b.grid, p.sigma, b.increments);
  EXPECT_EQ(again.states.storage(), b.states.storage());
  // Path k's increments do not depend on the batch it is simulated in.
  Tensor sub(3, 2);
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < 2; ++i) sub(k, i) = x0(k, i);
  }
  auto small = simulate_forward(sub, b.grid, p.sigma, 4, 3);
  for (std::size_t n = 0; n < 5; ++n) {
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(small.increments(n * 3 + k, i), b.increments(n * 8 + k, i));
      }
    }
  }
}

TEST(SimulateForward, CoarsenSumsIncrements) {
  auto p = free_laplacian(1);
  Tensor x0 = sample_initial(4, 1, 2, 0);
  auto fine = simulate_forward(x0, TimeGrid::uniform(0.2, 8), p.sigma, 2, 0);
  auto coarse = coarsen(fine, 4, p.sigma);
  EXPECT_EQ(coarse.intervals(), 2u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(coarse.states(2 * 4 + k, 0), fine.states(8 * 4 + k, 0), 1e-14);
  }
  EXPECT_THROW(coarsen(fine, 3, p.sigma), std::invalid_argument);
}

TEST(PropagateLinear, ConstantStaysConstantForLaplacian) {
  auto p = free_laplacian(2);
  Tensor x0 = sample_initial(16, 2, 1, 0);
  auto b = simulate_forward(x0, TimeGrid::uniform(0.3, 10), p.sigma, 1, 0);
  Tape t;
  PropagationInputs in{t.constant(Tensor(16, 1, 1.0)), t.constant(Tensor(11 * 16, 2)),
                       t.constant(0.0), t.constant(1.0)};
  propagate_linear(b, p, in);
  ASSERT_EQ(b.values.size(), 11u);
  for (double u : b.values.back().values()) EXPECT_EQ(u, 1.0);
}

TEST(PropagateLinear, OneStepClosedForm) {
  auto p = free_laplacian(1);
  const double c = 0.7, lambda = -0.4, dt = 0.05;
  p.potential = [c](std::span<const double>) { return c; };
  Tensor x0 = sample_initial(5, 1, 1, 0);
  auto b = simulate_forward(x0, TimeGrid::uniform(dt, 1), p.sigma, 1, 0);
  Tape t;
  Tensor psi0(5, 1);
  for (std::size_t k = 0; k < 5; ++k) psi0(k, 0) = 0.3 + k;
  PropagationInputs in{t.constant(psi0), t.constant(Tensor(10, 1)), t.constant(lambda),
                       t.constant(2.0)};
  propagate_linear(b, p, in);
  for (std::size_t k = 0; k < 5; ++k) {
    double u0 = psi0(k, 0) / 2.0;
    EXPECT_NEAR(b.values[1].values()[k], u0 * (1.0 + (c - lambda) * dt), 1e-15);
  }
}

TEST(PropagateLinear, GradientFlowsToLambdaAndHeads) {
  auto p = fokker_planck(2, {0.3, 0.6});
  Tensor x0 = sample_initial(4, 2, 1, 0);
  auto b = simulate_forward(x0, TimeGrid::uniform(0.2, 3), p.sigma, 1, 0);
  Tape t;
  Var psi0 = t.parameter(Tensor(4, 1, 1.0));
  Var heads = t.parameter(Tensor(16, 2, 0.1));
  Var lam = t.parameter(Tensor::scalar(0.2));
  propagate_linear(b, p, {psi0, heads, lam, t.constant(1.5)});
  t.backward(sum(b.values.back()));
  EXPECT_NE(t.grad(lam)[0], 0.0);
  EXPECT_NE(t.grad(psi0)[0], 0.0);
  EXPECT_NE(t.grad(heads)[0], 0.0);
}

TEST(PropagateLinear, NonFiniteValuesReportStep) {
  auto p = free_laplacian(1);
  p.potential = [](std::span<const double>) { return 1e308; };
  Tensor x0 = sample_initial(2, 1, 1, 0);
  auto b = simulate_forward(x0, TimeGrid::uniform(1.0, 4), p.sigma, 1, 0);
  Tape t;
  PropagationInputs in{t.constant(Tensor(2, 1, 1.0)), t.constant(Tensor(10, 1)), t.constant(0.0),
                       t.constant(1.0)};
  try {
    propagate_linear(b, p, in);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_GE(e.time_step(), 1u);
  }
}

TEST(PropagateLinear, RejectsZeroNormalizer) {
  auto p = free_laplacian(1);
  Tensor x0 = sample_initial(2, 1, 1, 0);
  auto b = simulate_forward(x0, TimeGrid::uniform(1.0, 2), p.sigma, 1, 0);
  Tape t;
  PropagationInputs in{t.constant(Tensor(2, 1, 1.0)), t.constant(Tensor(6, 1)), t.constant(0.0),
                       t.constant(0.0)};
  EXPECT_THROW(propagate_linear(b, p, in), std::invalid_argument);
}

TEST(Clip, DefaultBounds) {
  ClipBounds b{-5.0, 5.0};
  EXPECT_EQ(clip_value(7.0, b), 5.0);
  EXPECT_EQ(clip_value(-7.0, b), -5.0);
  EXPECT_EQ(clip_value(3.0, b), 3.0);
  EXPECT_THROW((ClipBounds{1.0, 1.0}.validate()), std::invalid_argument);
}

TEST(PropagateSemilinear, ZeroEpsilonDegeneratesToLinear) {
  auto nls = nonlinear_schrodinger(2, 0.0);
  auto lin = nls;
  lin.nonlinear = nullptr;
  lin.nonlinear_tape = nullptr;
  ASSERT_TRUE(nls.semilinear());
  ASSERT_FALSE(lin.semilinear());
  Tensor x0 = sample_initial(32, 2, 3, 0);
  auto b1 = simulate_forward(x0, TimeGrid::uniform(0.2, 20), nls.sigma, 3, 0);
  auto b2 = b1;
  Tape t;
  auto in = oracle_inputs(t, b1, nls, nls.eigenpairs[0]);
  propagate_semilinear(b1, nls, in, ClipBounds{-1e6, 1e6});
  propagate_linear(b2, lin, in);
  EXPECT_EQ(b1.clipped, 0u);
  auto u1 = b1.values.back().values(), u2 = b2.values.back().values();
  for (std::size_t k = 0; k < 32; ++k) EXPECT_NEAR(u1[k], u2[k], 1e-13);
}

TEST(PropagateSemilinear, ClippingCountsAndBinds) {
  auto nls = nonlinear_schrodinger(1);
  Tensor x0 = sample_initial(8, 1, 3, 0);
  auto b = simulate_forward(x0, TimeGrid::uniform(0.2, 4), nls.sigma, 3, 0);
  Tape t;
  PropagationInputs in{t.constant(Tensor(8, 1, 4.0)), t.constant(Tensor(40, 1)),
                       t.constant(-3.0), t.constant(1.0)};
  propagate_semilinear(b, nls, in, ClipBounds{-0.5, 0.5});
  EXPECT_GT(b.clipped, 0u);
  for (const auto& u : b.values) {
    if (&u == &b.values.front()) continue;
    for (double v : u.values()) {
      EXPECT_GE(v, -0.5);
      EXPECT_LE(v, 0.5);
    }
  }
  // Within wide bounds nothing is clipped.
  auto b2 = simulate_forward(x0, TimeGrid::uniform(0.2, 4), nls.sigma, 3, 0);
  Tape t2;
  auto in2 = oracle_inputs(t2, b2, nls, nls.eigenpairs[0]);
  propagate_semilinear(b2, nls, in2, ClipBounds{});
  EXPECT_EQ(b2.clipped, 0u);
}

// Cheap version of the fixed-point refinement check (the acceptance binary runs
// the full 10^4-path study).
TEST(FixedPoint, ResidualShrinksUnderRefinement) {
  auto nls = nonlinear_schrodinger(2);
  auto fp = fokker_planck(2, default_coefficients(2, 0.1, 1.0));
  for (const ProblemSpec* p : {&nls, &fp}) {
    Tensor x0 = sample_initial(2000, 2, 21, 0);
    auto fine = simulate_forward(x0, TimeGrid::uniform(0.2, 160), p->sigma, 21, 0);
    std::vector<double> res;
    for (std::size_t factor : {4, 1}) {
      auto b = coarsen(fine, factor, p->sigma);
      Tape t;
      auto in = oracle_inputs(t, b, *p, p->eigenpairs[0]);
      if (p->semilinear()) {
        propagate_semilinear(b, *p, in, ClipBounds{});
      } else {
        propagate_linear(b, *p, in);
      }
      res.push_back(mean_terminal_residual(b, p->eigenpairs[0]));
    }
    EXPECT_LT(res[1], res[0]) << p->name();
  }
}
