#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "handssl/geometry.hpp"
#include "handssl/model.hpp"

namespace handssl {

// Per-joint prediction uncertainty in heatmap-pixel units.
struct UncertaintyVector {
  std::vector<double> c;
};

// Per-joint loss weights: m_a where the pseudo-label was accepted, m_r where
// it was rejected.
struct MaskVector {
  std::vector<double> m;
  double m_a = 1.0;
  double m_r = 0.1;
};

struct MaskResult {
  MaskVector mask;
  std::vector<uint8_t> accept;
};

/// Heatmap STD: the root of the Hhat-weighted mean squared distance of pixel
/// coordinates from the soft-argmax centroid (U, V), all in grid units.
inline double heatmap_std(const double* hhat, int h, int w, double centroid_u,
                          double centroid_v) {
  double sum = 0;
  for (size_t k = 0; k < size_t(h) * w; ++k) sum += hhat[k];
  if (std::abs(sum - 1.0) > 1e-4)
    throw std::invalid_argument("heatmap_std: map is not normalized");
  double acc = 0;
  size_t k = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x, ++k) {
      const double du = centroid_u - x, dv = centroid_v - y;
      acc += hhat[k] * (du * du + dv * dv);
    }
  return std::sqrt(std::max(0.0, acc));
}

/// Uncertainty for every (sample, joint) of a softmaxed heatmap tensor, with
/// the matching decoded grid centroids.
inline std::vector<UncertaintyVector> heatmap_std_batch(const Tensor& hhat,
                                                        const DecodedBatch& grid) {
  std::vector<UncertaintyVector> out(size_t(hhat.n));
  for (int i = 0; i < hhat.n; ++i) {
    out[size_t(i)].c.resize(size_t(hhat.c));
    for (int j = 0; j < hhat.c; ++j)
      out[size_t(i)].c[size_t(j)] = heatmap_std(hhat.plane(i, j), hhat.h, hhat.w,
                                                grid[size_t(i)][size_t(j)][0],
                                                grid[size_t(i)][size_t(j)][1]);
  }
  return out;
}

/// Eq-6-style masking: strictly C_j < T_j accepts; ties reject.
inline MaskResult make_mask(const std::vector<double>& c, const std::vector<double>& thresholds,
                            double m_a, double m_r) {
  if (c.size() != thresholds.size())
    throw std::invalid_argument("make_mask: size mismatch between C and thresholds");
  if (m_a < 0 || m_r < 0) throw std::invalid_argument("make_mask: weights must be nonnegative");
  MaskResult res;
  res.mask.m_a = m_a;
  res.mask.m_r = m_r;
  res.mask.m.reserve(c.size());
  res.accept.reserve(c.size());
  for (size_t j = 0; j < c.size(); ++j) {
    if (!std::isfinite(thresholds[j]) && thresholds[j] < 0)
      throw std::invalid_argument("make_mask: threshold must not be -inf");
    const bool acc = c[j] < thresholds[j];
    res.accept.push_back(acc ? 1 : 0);
    res.mask.m.push_back(acc ? m_a : m_r);
  }
  return res;
}

/// Mask-weighted mean absolute per-coordinate distance:
/// D = (1 / 3K) * sum_j M_j * sum_i |J_ji - J'_ji| with K = sum_j M_j.
inline double weighted_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
                                const std::vector<double>& mask) {
  if (a.size() != b.size() || a.size() != mask.size())
    throw std::invalid_argument("weighted_distance: size mismatch");
  double k = 0;
  for (double m : mask) {
    if (m < 0) throw std::invalid_argument("weighted_distance: negative mask weight");
    k += m;
  }
  if (!(k > 0)) throw std::invalid_argument("weighted_distance: zero total mask weight");
  double acc = 0;
  for (size_t j = 0; j < a.size(); ++j) {
    double l1 = 0;
    for (int i = 0; i < 3; ++i) l1 += std::abs(a[j][i] - b[j][i]);
    acc += mask[j] * l1;
  }
  return acc / (3.0 * k);
}

inline double weighted_distance(const JointSet& a, const JointSet& b,
                                const MaskVector& mask) {
  if (a.frame != b.frame)
    throw std::invalid_argument("weighted_distance: joint sets in different frames");
  return weighted_distance(a.coords, b.coords, mask.m);
}

/// Unmasked mean element-wise L1 distance (all M_j = 1).
inline double mean_l1_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  return weighted_distance(a, b, std::vector<double>(a.size(), 1.0));
}

}  // namespace handssl
