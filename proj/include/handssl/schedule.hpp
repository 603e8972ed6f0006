#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace handssl {

// Cosine ramp of the target acceptance fraction rho_t.
struct RhoSchedule {
  double rho_start = 0.2;
  double rho_end = 0.9;
  int t_max = 1;

  void validate() const {
    if (!(0.0 <= rho_start && rho_start <= rho_end && rho_end <= 1.0))
      throw std::invalid_argument("RhoSchedule: need 0 <= rho_start <= rho_end <= 1");
    if (t_max < 1) throw std::invalid_argument("RhoSchedule: t_max must be >= 1");
  }
};

inline double rho_at(const RhoSchedule& s, int t_cur) {
  s.validate();
  if (t_cur < 0 || t_cur > s.t_max)
    throw std::invalid_argument("rho_at: t_cur out of [0, t_max]");
  return s.rho_start +
         0.5 * (1.0 - std::cos(double(t_cur) / s.t_max * M_PI)) * (s.rho_end - s.rho_start);
}

// Cosine learning-rate decay from base_lr at t=0 to 0 at t=t_max.
inline double lr_at(double base_lr, int t_cur, int t_max) {
  if (t_max < 1) throw std::invalid_argument("lr_at: t_max must be >= 1");
  if (t_cur < 0 || t_cur > t_max) throw std::invalid_argument("lr_at: t_cur out of range");
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * double(t_cur) / t_max));
}

// Per-joint dynamic masking thresholds plus the epoch acceptance counters
// that drive the additive controller T_j <- T_j + eta (rho_t - rho_t^j).
struct ThresholdState {
  std::vector<double> t;
  double eta = 0.05;
  std::vector<int64_t> accepted, seen;
  bool initialized = false;

  ThresholdState() = default;
  ThresholdState(int n_joints, double eta_rate)
      : t(size_t(n_joints), 0.0), eta(eta_rate), accepted(size_t(n_joints), 0),
        seen(size_t(n_joints), 0) {
    if (n_joints <= 0) throw std::invalid_argument("ThresholdState: n_joints must be positive");
    if (!(eta_rate >= 0)) throw std::invalid_argument("ThresholdState: eta must be nonnegative");
  }

  size_t n_joints() const { return t.size(); }

  // One unlabeled sample processed: accepted_j += accept_j, seen_j += 1.
  void record(const std::vector<uint8_t>& accept) {
    if (accept.size() != t.size())
      throw std::invalid_argument("ThresholdState::record: joint count mismatch");
    for (size_t j = 0; j < accept.size(); ++j) {
      accepted[j] += accept[j] ? 1 : 0;
      seen[j] += 1;
    }
  }

  // Realized acceptance fractions rho_t^j for the epoch so far (0 if unseen).
  std::vector<double> acceptance_fractions() const {
    std::vector<double> out(t.size(), 0.0);
    for (size_t j = 0; j < t.size(); ++j)
      if (seen[j] > 0) out[j] = double(accepted[j]) / double(seen[j]);
    return out;
  }

  // End-of-epoch controller update; joints never seen keep their threshold.
  void end_epoch(double rho_t) {
    for (size_t j = 0; j < t.size(); ++j) {
      if (seen[j] > 0) t[j] += eta * (rho_t - double(accepted[j]) / double(seen[j]));
      accepted[j] = 0;
      seen[j] = 0;
    }
  }
};

/// Quantile-based threshold initialization from warm-up uncertainty samples:
/// T_j is the rho0-quantile (linear interpolation) of the observed C_j, so the
/// first masked epoch accepts roughly a rho0 fraction.
inline std::vector<double> init_thresholds(std::vector<std::vector<double>> warmup_c,
                                           double rho0) {
  if (warmup_c.empty()) throw std::invalid_argument("init_thresholds: no joints");
  if (!(rho0 >= 0.0 && rho0 <= 1.0))
    throw std::invalid_argument("init_thresholds: rho0 must be in [0, 1]");
  std::vector<double> out;
  out.reserve(warmup_c.size());
  for (auto& samples : warmup_c) {
    if (samples.empty())
      throw std::invalid_argument("init_thresholds: a joint has no warm-up samples");
    std::sort(samples.begin(), samples.end());
    if (rho0 >= 1.0) {
      // Accept-everything request: strictly above the largest observation.
      out.push_back(std::nextafter(samples.back(), std::numeric_limits<double>::infinity()));
      continue;
    }
    const double pos = rho0 * double(samples.size() - 1);
    const size_t lo = size_t(pos);
    const double frac = pos - double(lo);
    const double q = lo + 1 < samples.size()
                         ? samples[lo] + frac * (samples[lo + 1] - samples[lo])
                         : samples[lo];
    out.push_back(q);
  }
  return out;
}

}  // namespace handssl
