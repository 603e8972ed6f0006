#pragma once

// Shared helpers for the unit and acceptance suites: synthetic marker frames
// for the equivariance checks and small numeric utilities. Test-only code;
// everything here is independent of the library's own transform internals
// except where a test deliberately reuses a library type.

#include <algorithm>
#include <cmath>
#include <vector>

#include "handssl/geometry.hpp"
#include "handssl/rng.hpp"

namespace testsupport {

using handssl::AffineAugmentation;
using handssl::CameraIntrinsics;
using handssl::DepthFrame;
using handssl::JointFrame;
using handssl::JointSet;
using handssl::RngStream;
using handssl::Vec3;

inline CameraIntrinsics test_intrinsics() { return {241.42, 241.42, 63.5, 63.5}; }

// Random camera-mm joints whose crop projections are well separated and keep
// away from the crop border, paired with a marker frame: a smooth depth bump
// painted at each joint's projected location.
struct MarkerScene {
  DepthFrame frame;
  JointSet joints;  // CAMERA_MM
};

// Scene regime mirrors the synthetic hand generator: the camera looks at the
// hand (crop center within a few mm of the optical axis) and markers stay
// within a hand-like depth spread of the crop-center plane. The affine warp
// is exact on that plane; the tolerance absorbs the off-plane perspective
// residual plus bilinear slack.
inline MarkerScene make_marker_scene(RngStream& rng, int out_size = 128,
                                     double center_jitter_mm = 3.0,
                                     double depth_spread_mm = 25.0, int n_markers = 6) {
  const auto intr = test_intrinsics();
  handssl::CropSpec crop;
  crop.cube_mm = 250.0;
  crop.out_size = out_size;
  crop.center_xyz = Vec3{rng.uniform(-center_jitter_mm, center_jitter_mm),
                         rng.uniform(-center_jitter_mm, center_jitter_mm),
                         rng.uniform(550.0, 650.0)};

  DepthFrame frame;
  frame.crop = crop;
  frame.intrinsics = intr;
  frame.pixels.assign(size_t(out_size) * out_size, 1.0);

  // Pick marker positions in crop coordinates, then back-project for labels.
  std::vector<Vec3> uvz;
  const double lo = 0.22 * out_size, hi = 0.78 * out_size;
  while (int(uvz.size()) < n_markers) {
    Vec3 p{rng.uniform(lo, hi), rng.uniform(lo, hi),
           rng.uniform(-depth_spread_mm, depth_spread_mm) * 2.0 / crop.cube_mm};
    bool ok = true;
    for (const auto& q : uvz) {
      const double du = p[0] - q[0], dv = p[1] - q[1];
      if (du * du + dv * dv < 14.0 * 14.0) { ok = false; break; }
    }
    if (ok) uvz.push_back(p);
  }

  JointSet uvz_set{uvz, JointFrame::CropUVZ};
  MarkerScene scene;
  scene.joints = handssl::uvz_to_xyz(uvz_set, frame);
  for (const auto& p : uvz) {
    const int x0 = std::max(0, int(std::floor(p[0])) - 5);
    const int x1 = std::min(out_size - 1, int(std::ceil(p[0])) + 5);
    const int y0 = std::max(0, int(std::floor(p[1])) - 5);
    const int y1 = std::min(out_size - 1, int(std::ceil(p[1])) + 5);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - p[0], dy = y - p[1];
        const double bump = 0.25 * std::exp(-(dx * dx + dy * dy) / (2.0 * 1.2 * 1.2));
        if (bump < 1e-4) continue;
        frame.px(y, x) = std::min(frame.px(y, x), p[2] - bump);
      }
  }
  scene.frame = frame;
  return scene;
}

// Depth-weighted centroid of the marker near the expected location.
// Returns false if there is no marker mass in the window.
inline bool locate_marker(const DepthFrame& frame, double exp_u, double exp_v,
                          double exp_base_depth, double& out_u, double& out_v) {
  const int S = frame.crop.out_size;
  const int cu = int(std::llround(exp_u)), cv = int(std::llround(exp_v));
  if (cu < 5 || cu > S - 6 || cv < 5 || cv > S - 6) return false;
  double wsum = 0, usum = 0, vsum = 0;
  for (int y = cv - 5; y <= cv + 5; ++y)
    for (int x = cu - 5; x <= cu + 5; ++x) {
      const double wgt = std::max(0.0, (exp_base_depth - 0.01) - frame.px(y, x));
      wsum += wgt;
      usum += wgt * x;
      vsum += wgt * y;
    }
  if (wsum <= 1e-9) return false;
  out_u = usum / wsum;
  out_v = vsum / wsum;
  return true;
}

// One equivariance trial: returns the worst pixel distance between the
// projected transformed labels and the markers located in the transformed
// frame. Markers pushed off the usable area are skipped.
inline double equivariance_trial(RngStream& rng, const handssl::AugmentationRanges& ranges,
                                 int* checked = nullptr) {
  MarkerScene scene = make_marker_scene(rng);
  const AffineAugmentation aug = handssl::sample_augmentation(rng, ranges);
  const DepthFrame warped = handssl::apply_to_frame(aug, scene.frame);
  const JointSet moved =
      handssl::apply_to_joints(aug, scene.joints, scene.frame.crop.center_xyz);
  const JointSet expect = handssl::xyz_to_uvz(moved, warped);
  double worst = 0.0;
  for (const auto& p : expect.coords) {
    double u, v;
    if (!locate_marker(warped, p[0], p[1], p[2], u, v)) continue;
    const double err = std::hypot(u - p[0], v - p[1]);
    worst = std::max(worst, err);
    if (checked) ++*checked;
  }
  return worst;
}

}  // namespace testsupport
