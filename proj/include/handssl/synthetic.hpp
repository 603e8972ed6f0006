#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "handssl/geometry.hpp"
#include "handssl/rng.hpp"

namespace handssl {

// Procedural articulated hand: a palm, a wrist and five fingers built from
// capsules, rendered to a raw depth image by perspective ray casting with a
// z-buffer. Joint labels come straight from the kinematic chain, so they are
// exact by construction.

struct FingerSpec {
  double splay_deg;                 // direction in the palm plane
  std::vector<double> bone_mm;      // segment lengths, base to tip
  std::vector<double> radius_mm;    // capsule radius per segment
};

struct SyntheticHandConfig {
  int n_joints = 14;
  std::vector<int> parent;  // tree over joints, -1 at the palm root
  std::vector<std::string> joint_names;
  std::vector<FingerSpec> fingers;
  double palm_radius_mm = 17.0;
  double wrist_offset_mm = 38.0;
  double wrist_radius_mm = 12.0;
  double base_ring_mm = 28.0;       // distance palm center -> finger base
  double knuckle_radius_mm = 8.0;   // webbing capsules palm -> finger base

  std::array<double, 2> curl_deg{0.0, 60.0};       // per-segment flexion
  std::array<double, 2> tilt_rad{-0.15, 0.15};     // out-of-plane palm tilt
  std::array<double, 2> bone_scale{0.9, 1.1};      // per-sample size jitter
  double splay_jitter_deg = 8.0;

  double noise_std_mm = 1.5;
  int raw_size = 128;
  CameraIntrinsics intrinsics{241.42, 241.42, 63.5, 63.5};
  double cube_mm = 250.0;
  std::array<double, 2> depth_range_mm{560.0, 640.0};
  double center_jitter_mm = 3.0;  // palm offset from the optical axis

  void validate() const;
};

inline SyntheticHandConfig default_hand_config() {
  SyntheticHandConfig c;
  // 14 joints: palm, wrist, thumb(2), index(3), middle(3), ring(2), pinky(2).
  c.parent = {-1, 0, 0, 2, 0, 4, 5, 0, 7, 8, 0, 10, 0, 12};
  c.joint_names = {"palm",       "wrist",      "thumb_base", "thumb_tip", "index_base",
                   "index_mid",  "index_tip",  "mid_base",   "mid_mid",   "mid_tip",
                   "ring_base",  "ring_tip",   "pinky_base", "pinky_tip"};
  c.fingers = {
      {-65.0, {30.0}, {7.0}},
      {-28.0, {26.0, 20.0}, {6.5, 5.5}},
      {0.0, {28.0, 22.0}, {6.5, 5.5}},
      {27.0, {34.0}, {6.0}},
      {58.0, {28.0}, {5.0}},
  };
  return c;
}

inline void SyntheticHandConfig::validate() const {
  if (n_joints <= 0) throw std::invalid_argument("SyntheticHandConfig: n_joints must be positive");
  if (int(parent.size()) != n_joints)
    throw std::invalid_argument("SyntheticHandConfig: parent size != n_joints");
  int roots = 0;
  for (int j = 0; j < n_joints; ++j) {
    if (parent[j] == -1) {
      ++roots;
      continue;
    }
    if (parent[j] < 0 || parent[j] >= n_joints || parent[j] == j)
      throw std::invalid_argument("SyntheticHandConfig: bad parent index");
    // Walk to the root; a cycle never terminates within n_joints hops.
    int hops = 0, p = parent[j];
    while (p != -1) {
      p = parent[p];
      if (++hops > n_joints)
        throw std::invalid_argument("SyntheticHandConfig: topology contains a cycle");
    }
  }
  if (roots != 1) throw std::invalid_argument("SyntheticHandConfig: topology needs exactly one root");
  if (raw_size <= 0 || !(cube_mm > 0) || noise_std_mm < 0)
    throw std::invalid_argument("SyntheticHandConfig: bad render parameters");
  int total = 2;
  for (const auto& f : fingers) {
    if (f.bone_mm.size() != f.radius_mm.size() || f.bone_mm.empty())
      throw std::invalid_argument("SyntheticHandConfig: finger bone/radius lists mismatch");
    total += 1 + int(f.bone_mm.size());
  }
  if (total != n_joints)
    throw std::invalid_argument("SyntheticHandConfig: finger specs yield " +
                                std::to_string(total) + " joints, expected " +
                                std::to_string(n_joints));
  intrinsics.validate();
}

// Sampled pose parameters; forward_kinematics maps these to joint positions.
struct HandPose {
  Vec3 palm{0, 0, 600};
  double yaw_rad = 0;                       // in-plane rotation
  double tilt_x = 0, tilt_y = 0;            // out-of-plane
  double bone_scale = 1.0;
  std::vector<double> splay_deg;            // per finger
  std::vector<std::vector<double>> curl_rad;  // per finger, per segment
};

namespace detail {

struct Basis {
  Vec3 ex, ey, ez;
};

inline Vec3 vadd(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 vscale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double vdot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

inline Basis pose_basis(const HandPose& p) {
  // Rz(yaw) * Rx(tilt_x) * Ry(tilt_y) applied to the hand-local axes.
  const double cy = std::cos(p.yaw_rad), sy = std::sin(p.yaw_rad);
  const double ca = std::cos(p.tilt_x), sa = std::sin(p.tilt_x);
  const double cb = std::cos(p.tilt_y), sb = std::sin(p.tilt_y);
  const double r[3][3] = {
      {cy * cb + sy * sa * sb, -sy * ca, cy * sb - sy * sa * cb},
      {sy * cb - cy * sa * sb, cy * ca, sy * sb + cy * sa * cb},
      {-ca * sb, sa, ca * cb},
  };
  return Basis{Vec3{r[0][0], r[1][0], r[2][0]}, Vec3{r[0][1], r[1][1], r[2][1]},
               Vec3{r[0][2], r[1][2], r[2][2]}};
}

}  // namespace detail

/// Joint positions (camera mm) from pose parameters; pure and exact.
inline JointSet forward_kinematics(const SyntheticHandConfig& cfg, const HandPose& pose) {
  const auto B = detail::pose_basis(pose);
  using detail::vadd;
  using detail::vscale;
  JointSet out;
  out.frame = JointFrame::CameraMM;
  out.coords.resize(size_t(cfg.n_joints));

  out.coords[0] = pose.palm;
  // Wrist points down the local -Y axis.
  out.coords[1] = vadd(pose.palm, vscale(B.ey, cfg.wrist_offset_mm * pose.bone_scale));

  int joint_idx = 2;
  for (size_t f = 0; f < cfg.fingers.size(); ++f) {
    const auto& fs = cfg.fingers[f];
    const double splay = (fs.splay_deg + pose.splay_deg[f]) * M_PI / 180.0;
    // Finger direction in the palm plane; -Y is "up" toward the fingers.
    const Vec3 dir0 = vadd(vscale(B.ex, std::sin(splay)), vscale(B.ey, -std::cos(splay)));
    Vec3 pos = vadd(pose.palm, vscale(dir0, cfg.base_ring_mm * pose.bone_scale));
    out.coords[size_t(joint_idx++)] = pos;
    double curl_sum = 0.0;
    for (size_t seg = 0; seg < fs.bone_mm.size(); ++seg) {
      curl_sum += pose.curl_rad[f][seg];
      // Flexion rotates the segment out of the palm plane toward the camera.
      const Vec3 seg_dir = vadd(vscale(dir0, std::cos(curl_sum)),
                                vscale(B.ez, -std::sin(curl_sum)));
      pos = vadd(pos, vscale(seg_dir, fs.bone_mm[seg] * pose.bone_scale));
      out.coords[size_t(joint_idx++)] = pos;
    }
  }
  if (joint_idx != cfg.n_joints)
    throw std::invalid_argument("SyntheticHandConfig: finger specs do not match n_joints");
  return out;
}

inline HandPose sample_pose(const SyntheticHandConfig& cfg, RngStream& rng) {
  HandPose p;
  p.palm = Vec3{rng.uniform(-cfg.center_jitter_mm, cfg.center_jitter_mm),
                rng.uniform(-cfg.center_jitter_mm, cfg.center_jitter_mm),
                rng.uniform(cfg.depth_range_mm[0], cfg.depth_range_mm[1])};
  p.yaw_rad = rng.uniform(-M_PI, M_PI);
  p.tilt_x = rng.uniform(cfg.tilt_rad[0], cfg.tilt_rad[1]);
  p.tilt_y = rng.uniform(cfg.tilt_rad[0], cfg.tilt_rad[1]);
  p.bone_scale = rng.uniform(cfg.bone_scale[0], cfg.bone_scale[1]);
  for (const auto& fs : cfg.fingers) {
    p.splay_deg.push_back(rng.uniform(-cfg.splay_jitter_deg, cfg.splay_jitter_deg));
    std::vector<double> curls;
    for (size_t s = 0; s < fs.bone_mm.size(); ++s)
      curls.push_back(rng.uniform(cfg.curl_deg[0], cfg.curl_deg[1]) * M_PI / 180.0);
    p.curl_rad.push_back(std::move(curls));
  }
  return p;
}

namespace detail {

struct Capsule {
  Vec3 a, b;
  double r;
};

// Builds the render primitives for a posed hand.
inline std::vector<Capsule> hand_capsules(const SyntheticHandConfig& cfg, const HandPose& pose,
                                          const JointSet& joints) {
  std::vector<Capsule> caps;
  const double bs = pose.bone_scale;
  const auto B = pose_basis(pose);
  const Vec3& palm = joints.coords[0];
  // Palm slab: a short capsule across the palm plane.
  caps.push_back(Capsule{vadd(palm, vscale(B.ey, 10.0 * bs)),
                         vadd(palm, vscale(B.ey, -12.0 * bs)), cfg.palm_radius_mm * bs});
  caps.push_back(Capsule{palm, joints.coords[1], cfg.wrist_radius_mm * bs});
  int j = 2;
  for (const auto& fs : cfg.fingers) {
    const Vec3 base = joints.coords[size_t(j)];
    caps.push_back(Capsule{palm, base, cfg.knuckle_radius_mm * bs});
    Vec3 prev = base;
    for (size_t seg = 0; seg < fs.bone_mm.size(); ++seg) {
      const Vec3 next = joints.coords[size_t(j + 1 + int(seg))];
      caps.push_back(Capsule{prev, next, fs.radius_mm[seg] * bs});
      prev = next;
    }
    j += 1 + int(fs.bone_mm.size());
  }
  return caps;
}

// Nearest positive ray parameter for ray origin 0, direction d (unnormalized)
// against a capsule, or +inf. With d_z = 1 the parameter is the hit depth.
inline double ray_capsule(const Vec3& d, const Capsule& cap) {
  using std::sqrt;
  const Vec3 ab{cap.b[0] - cap.a[0], cap.b[1] - cap.a[1], cap.b[2] - cap.a[2]};
  const double len2 = vdot(ab, ab);
  double best = std::numeric_limits<double>::infinity();

  auto try_sphere = [&](const Vec3& c) {
    const double a = vdot(d, d);
    const double b = -2.0 * vdot(d, c);
    const double k = vdot(c, c) - cap.r * cap.r;
    const double disc = b * b - 4 * a * k;
    if (disc < 0) return;
    const double t = (-b - sqrt(disc)) / (2 * a);
    if (t > 0 && t < best) best = t;
  };

  if (len2 > 1e-12) {
    // Infinite cylinder about the axis, then clamp to the segment.
    const double inv = 1.0 / sqrt(len2);
    const Vec3 n{ab[0] * inv, ab[1] * inv, ab[2] * inv};
    const double dn = vdot(d, n);
    const Vec3 dp{d[0] - dn * n[0], d[1] - dn * n[1], d[2] - dn * n[2]};
    const Vec3 m{-cap.a[0], -cap.a[1], -cap.a[2]};
    const double mn = vdot(m, n);
    const Vec3 mp{m[0] - mn * n[0], m[1] - mn * n[1], m[2] - mn * n[2]};
    const double a = vdot(dp, dp);
    if (a > 1e-14) {
      const double b = 2.0 * vdot(dp, mp);
      const double k = vdot(mp, mp) - cap.r * cap.r;
      const double disc = b * b - 4 * a * k;
      if (disc >= 0) {
        const double t = (-b - sqrt(disc)) / (2 * a);
        if (t > 0) {
          const double s = (t * dn) - mn;  // axial coordinate of the hit
          if (s >= 0 && s * s <= len2 && t < best) best = t;
        }
      }
    }
  }
  try_sphere(cap.a);
  try_sphere(cap.b);
  return best;
}

}  // namespace detail

/// Renders the posed hand to a raw depth image (mm, 0 = background).
inline RawDepth render_hand(const SyntheticHandConfig& cfg, const HandPose& pose,
                            const JointSet& joints, RngStream& noise_rng) {
  const auto caps = detail::hand_capsules(cfg, pose, joints);
  RawDepth raw;
  raw.width = raw.height = cfg.raw_size;
  raw.mm.assign(size_t(cfg.raw_size) * cfg.raw_size, 0);
  const auto& K = cfg.intrinsics;

  // Screen bounding box over all capsules.
  int x0 = cfg.raw_size, x1 = -1, y0 = cfg.raw_size, y1 = -1;
  for (const auto& c : caps) {
    for (const Vec3* e : {&c.a, &c.b}) {
      const double margin = K.fx * c.r / (*e)[2] + 2.0;
      const double u = K.fx * (*e)[0] / (*e)[2] + K.cx;
      const double v = K.fy * (*e)[1] / (*e)[2] + K.cy;
      x0 = std::min(x0, int(std::floor(u - margin)));
      x1 = std::max(x1, int(std::ceil(u + margin)));
      y0 = std::min(y0, int(std::floor(v - margin)));
      y1 = std::max(y1, int(std::ceil(v + margin)));
    }
  }
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, cfg.raw_size - 1);
  y1 = std::min(y1, cfg.raw_size - 1);

  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const Vec3 dir{(x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0};
      double z = std::numeric_limits<double>::infinity();
      for (const auto& c : caps) z = std::min(z, detail::ray_capsule(dir, c));
      if (!std::isfinite(z)) continue;
      if (cfg.noise_std_mm > 0) z += noise_rng.normal(0.0, cfg.noise_std_mm);
      raw.at(y, x) = uint16_t(std::clamp(std::llround(z), 1ll, 65535ll));
    }
  return raw;
}

struct RawRecord {
  std::string id;
  RawDepth raw;
  Vec3 center{0, 0, 0};  // crop center: the ground-truth palm joint
  std::optional<JointSet> joints;
  std::optional<HandPose> pose;  // in-memory only, for kinematic cross-checks
};

/// One synthetic labeled record; deterministic given the stream state.
inline RawRecord generate_record(const SyntheticHandConfig& cfg, RngStream& rng,
                                 const std::string& id) {
  cfg.validate();
  for (int attempt = 0; attempt < 1000; ++attempt) {
    HandPose pose = sample_pose(cfg, rng);
    JointSet joints = forward_kinematics(cfg, pose);

    // Every joint must project inside the raw image and the crop window.
    bool ok = true;
    const auto& K = cfg.intrinsics;
    const double half_crop = 0.5 * cfg.cube_mm;
    for (const auto& p : joints.coords) {
      const double u = K.fx * p[0] / p[2] + K.cx;
      const double v = K.fy * p[1] / p[2] + K.cy;
      if (u < 3 || u > cfg.raw_size - 4 || v < 3 || v > cfg.raw_size - 4) ok = false;
      for (int k = 0; k < 3; ++k)
        if (std::abs(p[k] - pose.palm[k]) > 0.85 * half_crop) ok = false;
    }
    if (!ok) continue;

    RawRecord rec;
    rec.id = id;
    rec.raw = render_hand(cfg, pose, joints, rng);
    rec.center = pose.palm;
    rec.joints = std::move(joints);
    rec.pose = std::move(pose);
    return rec;
  }
  throw std::runtime_error("generate_record: could not sample an in-bounds pose");
}

}  // namespace handssl
