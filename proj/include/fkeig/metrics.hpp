#pragma once
// Error measures against a reference eigenpair, density-of-psi histograms,
// and trailing moving averages for reporting.

#include "fkeig/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

namespace fkeig {

namespace detail {

inline double rms(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc / static_cast<double>(v.size()));
}

inline void require_same_length(std::size_t a, std::size_t b) {
  if (a != b) throw std::invalid_argument("metric inputs differ in length");
  if (a == 0) throw std::invalid_argument("metric inputs are empty");
}

// Reference values scaled to unit batch RMS, with the sign that correlates
// nonnegatively with the normalized network values.
inline std::vector<double> aligned_reference(std::span<const double> net, double z,
                                             std::span<const double> ref) {
  const double r = rms(ref);
  if (r == 0.0) throw std::invalid_argument("reference values have zero RMS");
  double corr = 0.0;
  for (std::size_t k = 0; k < net.size(); ++k) corr += net[k] / z * ref[k];
  const double s = corr < 0.0 ? -1.0 : 1.0;
  std::vector<double> out(ref.size());
  for (std::size_t k = 0; k < ref.size(); ++k) out[k] = s * ref[k] / r;
  return out;
}

}  // namespace detail

/// +1 or -1: the sign to apply to the reference so that it correlates with net / z.
inline double reference_sign(std::span<const double> net, double z, std::span<const double> ref) {
  double corr = 0.0;
  for (std::size_t k = 0; k < net.size(); ++k) corr += net[k] / z * ref[k];
  return corr < 0.0 ? -1.0 : 1.0;
}

/// sqrt(mean_k (net_k / z - ref_k / rms(ref))^2)
inline double err_psi_l2(std::span<const double> net, double z, std::span<const double> ref) {
  detail::require_same_length(net.size(), ref.size());
  auto r = detail::aligned_reference(net, z, ref);
  double acc = 0.0;
  for (std::size_t k = 0; k < net.size(); ++k) {
    double diff = net[k] / z - r[k];
    acc += diff * diff;
  }
  return std::sqrt(acc / static_cast<double>(net.size()));
}

/// max_k |net_k / z - ref_k / rms(ref)|
inline double err_psi_inf(std::span<const double> net, double z, std::span<const double> ref) {
  detail::require_same_length(net.size(), ref.size());
  auto r = detail::aligned_reference(net, z, ref);
  double worst = 0.0;
  for (std::size_t k = 0; k < net.size(); ++k) worst = std::max(worst, std::abs(net[k] / z - r[k]));
  return worst;
}

/// Both K x d fields divided by their own RMS over all K*d entries, then the RMS
/// of the difference.
inline double err_grad(const Tensor& net, const Tensor& ref) {
  if (net.shape() != ref.shape()) throw std::invalid_argument("gradient fields differ in shape");
  detail::require_same_length(net.size(), ref.size());
  const double rn = detail::rms(net.values()), rr = detail::rms(ref.values());
  if (rn == 0.0 || rr == 0.0) throw std::invalid_argument("gradient field has zero RMS");
  double acc = 0.0;
  for (std::size_t i = 0; i < net.size(); ++i) {
    double diff = net[i] / rn - ref[i] / rr;
    acc += diff * diff;
  }
  return std::sqrt(acc / static_cast<double>(net.size()));
}

struct DensityHistogram {
  std::vector<double> edges;    // bins + 1
  std::vector<double> density;  // per bin, integrates to 1
  std::vector<std::size_t> counts;

  std::size_t bins() const { return density.size(); }
  double center(std::size_t i) const { return 0.5 * (edges[i] + edges[i + 1]); }
  double width(std::size_t i) const { return edges[i + 1] - edges[i]; }
};

/// Equal-width bins over [lo, hi]. A degenerate range is widened to [lo - 0.5, lo + 0.5].
inline DensityHistogram density(std::span<const double> values, std::size_t bins, double lo,
                                double hi) {
  if (values.empty()) throw std::invalid_argument("density: need at least one sample");
  if (bins < 1) throw std::invalid_argument("density: need at least one bin");
  if (!(hi > lo)) {
    lo -= 0.5;
    hi = lo + 1.0;
  }
  DensityHistogram h;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  }
  h.counts.assign(bins, 0);
  const double w = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    if (v < lo || v > hi) continue;
    auto idx = static_cast<std::size_t>((v - lo) / w);
    ++h.counts[std::min(idx, bins - 1)];
  }
  std::size_t inside = 0;
  for (auto c : h.counts) inside += c;
  h.density.assign(bins, 0.0);
  for (std::size_t i = 0; i < bins; ++i) {
    h.density[i] = inside ? static_cast<double>(h.counts[i]) / (static_cast<double>(inside) * w)
                          : 0.0;
  }
  return h;
}

/// Bins spanning the sample range.
inline DensityHistogram density(std::span<const double> values, std::size_t bins) {
  if (values.empty()) throw std::invalid_argument("density: need at least one sample");
  auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  return density(values, bins, *mn, *mx);
}

/// Trailing moving average; the first window-1 entries average what is available.
inline std::vector<double> smooth(std::span<const double> series, std::size_t window) {
  if (window < 1) throw std::invalid_argument("smoothing window must be >= 1");
  std::vector<double> out(series.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    acc += series[i];
    if (i >= window) acc -= series[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace fkeig
