#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "handssl/rng.hpp"

namespace handssl {

using Vec3 = std::array<double, 3>;

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;

  void validate() const {
    if (!(fx > 0) || !(fy > 0))
      throw std::invalid_argument("CameraIntrinsics: focal lengths must be positive");
  }
};

// 3D crop cube around the hand: defines both the pixel window and the
// [-1, 1] depth normalization.
struct CropSpec {
  Vec3 center_xyz{0, 0, 0};  // camera frame, mm
  double cube_mm = 250.0;
  int out_size = 128;

  void validate() const {
    if (!(cube_mm > 0)) throw std::invalid_argument("CropSpec: cube_mm must be positive");
    if (out_size <= 0) throw std::invalid_argument("CropSpec: out_size must be positive");
  }
};

// Cropped depth image, values normalized to [-1, 1]; +1 is background/far.
struct DepthFrame {
  std::vector<double> pixels;  // out_size * out_size, row-major
  CropSpec crop;
  CameraIntrinsics intrinsics;

  int size() const { return crop.out_size; }
  double& px(int y, int x) { return pixels[size_t(y) * crop.out_size + x]; }
  double px(int y, int x) const { return pixels[size_t(y) * crop.out_size + x]; }
};

enum class JointFrame { CropUVZ, CameraMM };

struct JointSet {
  std::vector<Vec3> coords;
  JointFrame frame = JointFrame::CameraMM;

  size_t count() const { return coords.size(); }
};

struct AffineAugmentation {
  double rotation_deg = 0.0;
  double scale = 1.0;
  Vec3 translation_mm{0, 0, 0};

  bool is_identity() const {
    return rotation_deg == 0.0 && scale == 1.0 && translation_mm[0] == 0.0 &&
           translation_mm[1] == 0.0 && translation_mm[2] == 0.0;
  }
};

struct AugmentationRanges {
  std::array<double, 2> rotation_deg{-180.0, 180.0};
  std::array<double, 2> scale{0.9, 1.1};
  std::array<double, 2> translation_mm{-10.0, 10.0};

  void validate() const {
    if (rotation_deg[0] > rotation_deg[1] || scale[0] > scale[1] ||
        translation_mm[0] > translation_mm[1])
      throw std::invalid_argument("AugmentationRanges: interval bounds out of order");
    if (!(scale[0] > 0)) throw std::invalid_argument("AugmentationRanges: scale must stay positive");
  }
};

namespace detail {

// cos/sin of the rotation, snapped to exact values at multiples of 90 degrees
// so that quarter-turn warps land exactly on the pixel lattice.
inline void rot_cos_sin(double deg, double& c, double& s) {
  const double q = deg / 90.0;
  if (q == std::floor(q)) {
    static constexpr double ct[4] = {1.0, 0.0, -1.0, 0.0};
    static constexpr double st[4] = {0.0, 1.0, 0.0, -1.0};
    const int i = int(std::llround(q)) & 3;
    c = ct[i];
    s = st[i];
    return;
  }
  const double rad = deg * M_PI / 180.0;
  c = std::cos(rad);
  s = std::sin(rad);
}

// Geometry of a crop's pixel window in the raw image.
struct CropWindow {
  double u_c, v_c;    // projected crop center, raw-image px
  double k_x, k_y;    // raw-image px per crop px
  double c_px;        // crop pixel-center coordinate of the center
};

inline CropWindow crop_window(const CropSpec& crop, const CameraIntrinsics& intr) {
  intr.validate();
  crop.validate();
  const double cz = crop.center_xyz[2];
  if (!(cz > 0)) throw std::invalid_argument("crop center must have positive depth");
  CropWindow w;
  w.u_c = intr.fx * crop.center_xyz[0] / cz + intr.cx;
  w.v_c = intr.fy * crop.center_xyz[1] / cz + intr.cy;
  w.k_x = intr.fx * crop.cube_mm / (crop.out_size * cz);
  w.k_y = intr.fy * crop.cube_mm / (crop.out_size * cz);
  w.c_px = 0.5 * (crop.out_size - 1);
  return w;
}

}  // namespace detail

// Raw sensor depth raster, mm units; 0 marks invalid/dropped pixels.
struct RawDepth {
  int width = 0, height = 0;
  std::vector<uint16_t> mm;

  uint16_t at(int y, int x) const { return mm[size_t(y) * width + x]; }
  uint16_t& at(int y, int x) { return mm[size_t(y) * width + x]; }
};

/// Cube-crops the hand region around center_xyz and normalizes depth to
/// [-1, 1]. Invalid pixels and depths beyond the cube map to the far plane.
inline DepthFrame crop_and_normalize(const RawDepth& raw, const CameraIntrinsics& intr,
                                     const Vec3& center_xyz, double cube_mm,
                                     int out_size = 128) {
  CropSpec crop{center_xyz, cube_mm, out_size};
  const auto w = detail::crop_window(crop, intr);
  if (raw.width <= 0 || raw.height <= 0 || raw.mm.size() != size_t(raw.width) * raw.height)
    throw std::invalid_argument("crop_and_normalize: malformed raw raster");

  // Reject crops whose sampling window misses the raw image entirely.
  const double u_lo = w.u_c - w.c_px * w.k_x, u_hi = w.u_c + w.c_px * w.k_x;
  const double v_lo = w.v_c - w.c_px * w.k_y, v_hi = w.v_c + w.c_px * w.k_y;
  if (u_hi < -0.5 || u_lo > raw.width - 0.5 || v_hi < -0.5 || v_lo > raw.height - 0.5)
    throw std::invalid_argument("crop_and_normalize: crop window outside image bounds");

  DepthFrame frame;
  frame.crop = crop;
  frame.intrinsics = intr;
  frame.pixels.assign(size_t(out_size) * out_size, 1.0);
  const double cz = center_xyz[2];
  for (int y = 0; y < out_size; ++y) {
    const double v = w.v_c + (y - w.c_px) * w.k_y;
    const int vi = int(std::llround(v));
    for (int x = 0; x < out_size; ++x) {
      const double u = w.u_c + (x - w.c_px) * w.k_x;
      const int ui = int(std::llround(u));
      if (ui < 0 || ui >= raw.width || vi < 0 || vi >= raw.height) continue;
      const uint16_t z = raw.at(vi, ui);
      if (z == 0) continue;  // sensor dropout -> background
      const double d = (double(z) - cz) * 2.0 / cube_mm;
      frame.px(y, x) = std::clamp(d, -1.0, 1.0);
    }
  }
  return frame;
}

/// Draws each augmentation parameter independently and uniformly.
inline AffineAugmentation sample_augmentation(RngStream& rng, const AugmentationRanges& r) {
  r.validate();
  AffineAugmentation a;
  a.rotation_deg = rng.uniform(r.rotation_deg[0], r.rotation_deg[1]);
  a.scale = rng.uniform(r.scale[0], r.scale[1]);
  for (int i = 0; i < 3; ++i)
    a.translation_mm[i] = rng.uniform(r.translation_mm[0], r.translation_mm[1]);
  return a;
}

/// Camera-frame action on joints: rotate X,Y about the axis through the crop
/// center, scale offsets from the center, then translate. Affine in 3D.
inline JointSet apply_to_joints(const AffineAugmentation& aug, const JointSet& joints,
                                const Vec3& crop_center) {
  if (joints.frame != JointFrame::CameraMM)
    throw std::invalid_argument("apply_to_joints: joints must be in CAMERA_MM frame");
  double c, s;
  detail::rot_cos_sin(aug.rotation_deg, c, s);
  JointSet out;
  out.frame = JointFrame::CameraMM;
  out.coords.reserve(joints.coords.size());
  for (const auto& p : joints.coords) {
    const double mx = p[0] - crop_center[0];
    const double my = p[1] - crop_center[1];
    const double mz = p[2] - crop_center[2];
    out.coords.push_back(Vec3{
        crop_center[0] + aug.scale * (c * mx - s * my) + aug.translation_mm[0],
        crop_center[1] + aug.scale * (s * mx + c * my) + aug.translation_mm[1],
        crop_center[2] + aug.scale * mz + aug.translation_mm[2]});
  }
  return out;
}

inline AffineAugmentation compose(const AffineAugmentation& a, const AffineAugmentation& b) {
  // (a o b)(x) = a(b(x)), both acting about the same crop center.
  double c, s;
  detail::rot_cos_sin(a.rotation_deg, c, s);
  AffineAugmentation r;
  r.rotation_deg = a.rotation_deg + b.rotation_deg;
  r.scale = a.scale * b.scale;
  r.translation_mm = Vec3{
      a.scale * (c * b.translation_mm[0] - s * b.translation_mm[1]) + a.translation_mm[0],
      a.scale * (s * b.translation_mm[0] + c * b.translation_mm[1]) + a.translation_mm[1],
      a.scale * b.translation_mm[2] + a.translation_mm[2]};
  return r;
}

inline AffineAugmentation inverse(const AffineAugmentation& a) {
  if (!(a.scale > 0)) throw std::invalid_argument("inverse: nonpositive scale");
  double c, s;
  detail::rot_cos_sin(-a.rotation_deg, c, s);
  AffineAugmentation r;
  r.rotation_deg = -a.rotation_deg;
  r.scale = 1.0 / a.scale;
  r.translation_mm = Vec3{
      -(c * a.translation_mm[0] - s * a.translation_mm[1]) / a.scale,
      -(s * a.translation_mm[0] + c * a.translation_mm[1]) / a.scale,
      -a.translation_mm[2] / a.scale};
  return r;
}

/// Image-side action: one combined affine warp of the normalized crop
/// (rotation about the crop center, zoom for scale, projected shift for
/// translation) plus the induced transform of the normalized depth values.
/// The warp is exact for scene points on the crop-center depth plane;
/// rotation about an on-axis center is exact at every depth.
inline DepthFrame apply_to_frame(const AffineAugmentation& aug, const DepthFrame& frame) {
  if (aug.is_identity()) return frame;
  if (!(aug.scale > 0)) throw std::invalid_argument("apply_to_frame: nonpositive scale");

  const auto w = detail::crop_window(frame.crop, frame.intrinsics);
  const int S = frame.crop.out_size;
  const double cube = frame.crop.cube_mm;
  const double cz = frame.crop.center_xyz[2];
  const double zp = cz + aug.translation_mm[2];
  if (!(zp > 0)) throw std::invalid_argument("apply_to_frame: translated center behind camera");
  const double lam = cz / zp;

  double c, s;
  detail::rot_cos_sin(aug.rotation_deg, c, s);

  // Forward map on crop pixels: q' = cpx + A (q - cpx) + b.
  const double a00 = lam * aug.scale * c, a01 = -lam * aug.scale * s;
  const double a10 = lam * aug.scale * s, a11 = lam * aug.scale * c;
  const double px_per_mm = S / cube;
  const double bx = px_per_mm * (lam * aug.translation_mm[0] +
                                 frame.crop.center_xyz[0] * (lam - 1.0));
  const double by = px_per_mm * (lam * aug.translation_mm[1] +
                                 frame.crop.center_xyz[1] * (lam - 1.0));

  // Inverse of A for backward sampling.
  const double det = a00 * a11 - a01 * a10;
  const double i00 = a11 / det, i01 = -a01 / det;
  const double i10 = -a10 / det, i11 = a00 / det;

  const double dz_norm = 2.0 * aug.translation_mm[2] / cube;

  DepthFrame out;
  out.crop = frame.crop;
  out.intrinsics = frame.intrinsics;
  out.pixels.assign(size_t(S) * S, 1.0);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double rx = x - w.c_px - bx;
      const double ry = y - w.c_px - by;
      const double sx = w.c_px + i00 * rx + i01 * ry;
      const double sy = w.c_px + i10 * rx + i11 * ry;
      if (sx < 0.0 || sx > S - 1.0 || sy < 0.0 || sy > S - 1.0) continue;
      const int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      const int x1 = std::min(x0 + 1, S - 1), y1 = std::min(y0 + 1, S - 1);
      const double d00 = frame.px(y0, x0), d01 = frame.px(y0, x1);
      const double d10 = frame.px(y1, x0), d11 = frame.px(y1, x1);
      const double d = (1 - fy) * ((1 - fx) * d00 + fx * d01) +
                       fy * ((1 - fx) * d10 + fx * d11);
      if (d >= 1.0 - 1e-12) continue;  // background stays at the far plane
      out.px(y, x) = std::clamp(aug.scale * d + dz_norm, -1.0, 1.0);
    }
  }
  return out;
}

/// Pinhole projection of camera-mm joints into a frame's crop coordinates:
/// U,V in crop pixels, Z normalized to the crop cube.
inline JointSet xyz_to_uvz(const JointSet& joints, const DepthFrame& frame) {
  if (joints.frame != JointFrame::CameraMM)
    throw std::invalid_argument("xyz_to_uvz: joints must be in CAMERA_MM frame");
  const auto w = detail::crop_window(frame.crop, frame.intrinsics);
  JointSet out;
  out.frame = JointFrame::CropUVZ;
  out.coords.reserve(joints.coords.size());
  for (const auto& p : joints.coords) {
    if (!(p[2] > 0)) throw std::invalid_argument("xyz_to_uvz: joint depth must be positive");
    const double u = frame.intrinsics.fx * p[0] / p[2] + frame.intrinsics.cx;
    const double v = frame.intrinsics.fy * p[1] / p[2] + frame.intrinsics.cy;
    out.coords.push_back(Vec3{w.c_px + (u - w.u_c) / w.k_x, w.c_px + (v - w.v_c) / w.k_y,
                              (p[2] - frame.crop.center_xyz[2]) * 2.0 / frame.crop.cube_mm});
  }
  return out;
}

/// Inverse of xyz_to_uvz.
inline JointSet uvz_to_xyz(const JointSet& joints, const DepthFrame& frame) {
  if (joints.frame != JointFrame::CropUVZ)
    throw std::invalid_argument("uvz_to_xyz: joints must be in CROP_UVZ frame");
  const auto w = detail::crop_window(frame.crop, frame.intrinsics);
  JointSet out;
  out.frame = JointFrame::CameraMM;
  out.coords.reserve(joints.coords.size());
  for (const auto& p : joints.coords) {
    const double z = frame.crop.center_xyz[2] + p[2] * frame.crop.cube_mm / 2.0;
    if (!(z > 0)) throw std::invalid_argument("uvz_to_xyz: depth behind camera");
    const double u = w.u_c + (p[0] - w.c_px) * w.k_x;
    const double v = w.v_c + (p[1] - w.c_px) * w.k_y;
    out.coords.push_back(Vec3{(u - frame.intrinsics.cx) * z / frame.intrinsics.fx,
                              (v - frame.intrinsics.cy) * z / frame.intrinsics.fy, z});
  }
  return out;
}

}  // namespace handssl
