#pragma once
// Normalization constant of the eigenfunction ansatz: signed batch RMS,
// exponential moving average across training steps, and the hinge penalty
// that keeps the constant away from zero.

#include "fkeig/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fkeig {

/// Piecewise-constant value over 1-based training steps. With boundaries
/// [b1, b2], steps 1..b1 use values[0], b1+1..b2 use values[1], later steps values[2].
class Schedule {
 public:
  Schedule() = default;
  Schedule(std::vector<double> values, std::vector<std::size_t> boundaries)
      : values_(std::move(values)), boundaries_(std::move(boundaries)) {
    validate();
  }
  static Schedule constant(double v) { return Schedule({v}, {}); }
  /// Skips validation; for assembling a schedule piece by piece (call validate() after).
  static Schedule unchecked(std::vector<double> values, std::vector<std::size_t> boundaries) {
    Schedule s;
    s.values_ = std::move(values);
    s.boundaries_ = std::move(boundaries);
    return s;
  }

  void validate() const {
    if (values_.size() != boundaries_.size() + 1) {
      throw std::invalid_argument("schedule needs one more value than boundaries");
    }
    if (!std::is_sorted(boundaries_.begin(), boundaries_.end())) {
      throw std::invalid_argument("schedule boundaries must be nondecreasing");
    }
  }

  double at(std::size_t step) const {
    std::size_t idx = 0;
    while (idx < boundaries_.size() && step > boundaries_[idx]) ++idx;
    return values_[idx];
  }

  const std::vector<double>& values() const { return values_; }
  const std::vector<std::size_t>& boundaries() const { return boundaries_; }

 private:
  std::vector<double> values_{0.0};
  std::vector<std::size_t> boundaries_;
};

inline double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// sgn(sum v) * sqrt(mean v^2). sgn(0) = 0, so a zero-sum batch yields 0.
inline double batch_estimate(std::span<const double> psi_values) {
  if (psi_values.empty()) throw std::invalid_argument("batch_estimate: empty batch");
  double sum = 0.0, sq = 0.0;
  for (double v : psi_values) {
    sum += v;
    sq += v * v;
  }
  return sign_of(sum) * std::sqrt(sq / static_cast<double>(psi_values.size()));
}

/// Tape version of batch_estimate; the sign factor is piecewise constant.
inline Var batch_estimate(Var psi_values) {
  double s = 0.0;
  for (double v : psi_values.values()) s += v;
  const double n = static_cast<double>(psi_values.shape().size());
  return scale(sqrt(scale(sum(square(psi_values)), 1.0 / n)), sign_of(s));
}

struct NormState {
  double z = 0.0;
  bool initialized = false;
  Schedule gamma = Schedule::constant(0.9);
  double z0 = 2.0;
  double eta3 = 100.0;

  void validate() const {
    for (double g : gamma.values()) {
      if (!(g >= 0.0 && g < 1.0)) throw std::invalid_argument("gamma values must lie in [0, 1)");
    }
    if (eta3 < 0.0) throw std::invalid_argument("eta3 must be nonnegative");
  }
};

struct NormUpdate {
  double z = 0.0;       // Z^l after the update
  double gamma = 0.0;   // weight on Z^{l-1} (0 on the first update)
  bool degenerate = false;  // batch estimate was exactly zero; update skipped
};

/// Z^l = gamma_l Z^{l-1} + (1 - gamma_l) Zhat^l. The first update takes Zhat
/// directly. A zero estimate leaves Z unchanged and is flagged.
inline NormUpdate update_moving_average(NormState& state, double zhat, std::size_t step) {
  if (step < 1) throw std::invalid_argument("training steps are 1-based");
  NormUpdate u;
  if (zhat == 0.0) {
    u.degenerate = true;
    if (!state.initialized) {
      state.z = state.z0;
      state.initialized = true;
    }
    u.z = state.z;
    return u;
  }
  if (!state.initialized) {
    state.z = zhat;
    state.initialized = true;
    u.z = zhat;
    return u;
  }
  u.gamma = state.gamma.at(step);
  state.z = u.gamma * state.z + (1.0 - u.gamma) * zhat;
  u.z = state.z;
  return u;
}

/// eta3 * max(z0 - z, 0)
inline double hinge_penalty(double z, double z0, double eta3) {
  return eta3 * std::max(z0 - z, 0.0);
}
inline Var hinge_penalty(Var z, double z0, double eta3) {
  return scale(relu(add_const(scale(z, -1.0), z0)), eta3);
}

}  // namespace fkeig
