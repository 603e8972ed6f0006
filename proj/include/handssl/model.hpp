#pragma once

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "handssl/checkpoint.hpp"
#include "handssl/geometry.hpp"
#include "handssl/nn.hpp"

namespace handssl {

struct ModelConfig {
  int in_size = 128;
  int n_joints = 14;
  std::vector<int> channels{16, 32, 64, 64};
  std::vector<int> strides{1, 2, 2, 1};
  double bn_momentum = 0.1;
  double head_init_std = 0.01;

  bool operator==(const ModelConfig&) const = default;

  int out_stride() const {
    int s = 1;
    for (int st : strides) s *= st;
    return s;
  }
  int map_size() const { return in_size / out_stride(); }

  void validate() const {
    if (in_size <= 0 || n_joints <= 0) throw std::invalid_argument("ModelConfig: bad dims");
    if (channels.empty() || channels.size() != strides.size())
      throw std::invalid_argument("ModelConfig: channels/strides mismatch");
    for (int c : channels)
      if (c <= 0) throw std::invalid_argument("ModelConfig: channels must be positive");
    for (int s : strides)
      if (s != 1 && s != 2) throw std::invalid_argument("ModelConfig: strides must be 1 or 2");
    if (in_size % out_stride() != 0)
      throw std::invalid_argument("ModelConfig: in_size not divisible by the output stride");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"in_size", c.in_size},         {"n_joints", c.n_joints},
       {"channels", c.channels},       {"strides", c.strides},
       {"bn_momentum", c.bn_momentum}, {"head_init_std", c.head_init_std}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.in_size = j.at("in_size").get<int>();
  c.n_joints = j.at("n_joints").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.strides = j.at("strides").get<std::vector<int>>();
  c.bn_momentum = j.at("bn_momentum").get<double>();
  c.head_init_std = j.at("head_init_std").get<double>();
}

// Raw network outputs: per-joint 2D likelihood maps (pre-softmax) and
// per-joint depth maps in normalized crop-depth units.
struct HeatmapBundle {
  Tensor h2d;
  Tensor hz;
};

// Encoder + two 1x1-conv heads. The soft-argmax temperature is fixed at 1
// for every joint and is not a parameter anywhere in this class.
class PoseNet {
 public:
  PoseNet(const ModelConfig& cfg, RngStream& init_rng)
      : cfg_(cfg),
        head2d_(cfg.channels.empty() ? 1 : cfg.channels.back(), cfg.n_joints, 1, 1, 0),
        headz_(cfg.channels.empty() ? 1 : cfg.channels.back(), cfg.n_joints, 1, 1, 0) {
    cfg_.validate();
    int in_c = 1;
    for (size_t i = 0; i < cfg_.channels.size(); ++i) {
      blocks_.emplace_back(in_c, cfg_.channels[i], cfg_.strides[i], cfg_.bn_momentum);
      in_c = cfg_.channels[i];
    }
    for (auto& b : blocks_) b.conv.init_he(init_rng);
    head2d_.init_normal(init_rng, cfg_.head_init_std);
    headz_.init_normal(init_rng, cfg_.head_init_std);
  }

  const ModelConfig& config() const { return cfg_; }
  int map_size() const { return cfg_.map_size(); }

  bool eval_only() const { return eval_only_; }
  void set_eval_only(bool v) { eval_only_ = v; }

  HeatmapBundle forward(const Tensor& x, Mode mode, bool cache_for_backward = false,
                        bool update_running = true) {
    if (mode == Mode::Train && eval_only_)
      throw std::logic_error("PoseNet: train-mode forward on an eval-only network");
    if (x.c != 1 || x.h != cfg_.in_size || x.w != cfg_.in_size)
      throw std::invalid_argument("PoseNet: input shape " + x.shape_str() +
                                  " does not match configured in_size");
    Tensor f = x;
    for (auto& b : blocks_)
      f = b.forward(f, mode, cache_for_backward, mode == Mode::Train && update_running);
    HeatmapBundle out;
    out.h2d = head2d_.forward(f, cache_for_backward);
    out.hz = headz_.forward(f, cache_for_backward);
    return out;
  }

  HeatmapBundle forward(const std::vector<const DepthFrame*>& frames, Mode mode,
                        bool cache_for_backward = false, bool update_running = true) {
    return forward(frames_to_tensor(frames), mode, cache_for_backward, update_running);
  }

  Tensor frames_to_tensor(const std::vector<const DepthFrame*>& frames) const {
    if (frames.empty()) throw std::invalid_argument("PoseNet: empty batch");
    Tensor x(int(frames.size()), 1, cfg_.in_size, cfg_.in_size);
    for (size_t i = 0; i < frames.size(); ++i) {
      if (frames[i]->crop.out_size != cfg_.in_size)
        throw std::invalid_argument("PoseNet: frame out_size does not match configured in_size");
      std::copy(frames[i]->pixels.begin(), frames[i]->pixels.end(),
                x.v.begin() + long(i) * cfg_.in_size * cfg_.in_size);
    }
    return x;
  }

  // Accumulates parameter gradients from the last cached forward.
  void backward(const Tensor& d_h2d, const Tensor& d_hz) {
    Tensor df = head2d_.backward(d_h2d);
    add_into(df, headz_.backward(d_hz));
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) df = it->backward(df);
  }

  void zero_grad() {
    for (auto& b : blocks_) {
      b.conv.zero_grad();
      b.bn.zero_grad();
    }
    head2d_.zero_grad();
    headz_.zero_grad();
  }

  std::vector<ParamRef> params() {
    std::vector<ParamRef> p;
    std::vector<BufferRef> unused;
    for (size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].conv.collect(p, "trunk." + std::to_string(i) + ".conv");
      blocks_[i].bn.collect(p, unused, "trunk." + std::to_string(i) + ".bn");
    }
    head2d_.collect(p, "head2d");
    headz_.collect(p, "headz");
    return p;
  }

  std::vector<BufferRef> buffers() {
    std::vector<BufferRef> b;
    std::vector<ParamRef> unused;
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].bn.collect(unused, b, "trunk." + std::to_string(i) + ".bn");
    return b;
  }

  void copy_state_from(PoseNet& src) {
    if (!(src.cfg_ == cfg_)) throw std::invalid_argument("PoseNet: config mismatch in copy");
    auto sp = src.params(), dp = params();
    for (size_t i = 0; i < sp.size(); ++i) *dp[i].value = *sp[i].value;
    auto sb = src.buffers(), db = buffers();
    for (size_t i = 0; i < sb.size(); ++i) *db[i].value = *sb[i].value;
  }

 private:
  ModelConfig cfg_;
  std::vector<ConvBlock> blocks_;
  Conv2d head2d_, headz_;
  bool eval_only_ = false;
};

// ---------------------------------------------------------------------------
// Soft-argmax decoding.
// ---------------------------------------------------------------------------

/// Per-joint spatial softmax with max subtraction; temperature fixed at 1.
inline Tensor spatial_softmax(const Tensor& h2d) {
  Tensor out(h2d.n, h2d.c, h2d.h, h2d.w);
  const size_t plane = size_t(h2d.h) * h2d.w;
  for (int i = 0; i < h2d.n; ++i)
    for (int j = 0; j < h2d.c; ++j) {
      const double* p = h2d.plane(i, j);
      double* q = out.plane(i, j);
      double mx = p[0];
      for (size_t k = 1; k < plane; ++k) mx = std::max(mx, p[k]);
      if (!std::isfinite(mx)) throw std::invalid_argument("spatial_softmax: non-finite input");
      double sum = 0;
      for (size_t k = 0; k < plane; ++k) {
        q[k] = std::exp(p[k] - mx);
        sum += q[k];
      }
      for (size_t k = 0; k < plane; ++k) q[k] /= sum;
    }
  return out;
}

/// d h2d from d Hhat: softmax Jacobian per joint map.
inline Tensor spatial_softmax_backward(const Tensor& hhat, const Tensor& d_hhat) {
  Tensor out(hhat.n, hhat.c, hhat.h, hhat.w);
  const size_t plane = size_t(hhat.h) * hhat.w;
  for (int i = 0; i < hhat.n; ++i)
    for (int j = 0; j < hhat.c; ++j) {
      const double* h = hhat.plane(i, j);
      const double* d = d_hhat.plane(i, j);
      double* o = out.plane(i, j);
      double dot = 0;
      for (size_t k = 0; k < plane; ++k) dot += d[k] * h[k];
      for (size_t k = 0; k < plane; ++k) o[k] = h[k] * (d[k] - dot);
    }
  return out;
}

// Decoded joints per sample, heatmap-grid units: U,V are Hhat-weighted pixel
// coordinates, Z is the Hhat-weighted sum of the depth map.
using DecodedBatch = std::vector<std::vector<Vec3>>;

inline DecodedBatch decode_grid(const Tensor& hhat, const Tensor& hz) {
  if (!hhat.same_shape(hz)) throw std::invalid_argument("decode_grid: head shape mismatch");
  DecodedBatch out(size_t(hhat.n), std::vector<Vec3>(size_t(hhat.c)));
  for (int i = 0; i < hhat.n; ++i)
    for (int j = 0; j < hhat.c; ++j) {
      const double* h = hhat.plane(i, j);
      const double* z = hz.plane(i, j);
      double u = 0, v = 0, d = 0;
      size_t k = 0;
      for (int y = 0; y < hhat.h; ++y)
        for (int x = 0; x < hhat.w; ++x, ++k) {
          u += x * h[k];
          v += y * h[k];
          d += z[k] * h[k];
        }
      out[size_t(i)][size_t(j)] = Vec3{u, v, d};
    }
  return out;
}

inline void decode_grid_backward(const Tensor& hhat, const Tensor& hz,
                                 const DecodedBatch& d_dec, Tensor& d_hhat, Tensor& d_hz) {
  d_hhat = Tensor(hhat.n, hhat.c, hhat.h, hhat.w);
  d_hz = Tensor(hz.n, hz.c, hz.h, hz.w);
  for (int i = 0; i < hhat.n; ++i)
    for (int j = 0; j < hhat.c; ++j) {
      const double* h = hhat.plane(i, j);
      const double* z = hz.plane(i, j);
      double* dh = d_hhat.plane(i, j);
      double* dz = d_hz.plane(i, j);
      const Vec3& g = d_dec[size_t(i)][size_t(j)];
      size_t k = 0;
      for (int y = 0; y < hhat.h; ++y)
        for (int x = 0; x < hhat.w; ++x, ++k) {
          dh[k] = g[0] * x + g[1] * y + g[2] * z[k];
          dz[k] = g[2] * h[k];
        }
    }
}

// Pixel-center-aligned mapping from heatmap-grid coordinates to crop pixels.
inline double grid_to_crop_uv(double grid, int map_size, int out_size) {
  return (grid + 0.5) * (double(out_size) / map_size) - 0.5;
}

/// Full decode: softmax, soft-argmax, rescale to crop pixel units. Z stays in
/// normalized crop-depth units, matching the CROP_UVZ convention.
inline std::vector<JointSet> decode(const HeatmapBundle& bundle, int out_size) {
  const Tensor hhat = spatial_softmax(bundle.h2d);
  const DecodedBatch grid = decode_grid(hhat, bundle.hz);
  std::vector<JointSet> out(grid.size());
  for (size_t i = 0; i < grid.size(); ++i) {
    out[i].frame = JointFrame::CropUVZ;
    out[i].coords.reserve(grid[i].size());
    for (const auto& g : grid[i])
      out[i].coords.push_back(Vec3{grid_to_crop_uv(g[0], bundle.h2d.w, out_size),
                                   grid_to_crop_uv(g[1], bundle.h2d.h, out_size), g[2]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model checkpoints: parameters, normalization statistics, a config echo and
// a format version. Loading into a mismatched config fails loudly.
// ---------------------------------------------------------------------------

inline void save_model_checkpoint(const std::filesystem::path& path, PoseNet& net,
                                  const std::string& role,
                                  const std::vector<double>& thresholds = {}) {
  ArchiveWriter ar(path);
  ar.put_string("kind", "model");
  ar.put_string("role", role);
  ar.put_string("model_config", nlohmann::json(net.config()).dump());
  for (auto& p : net.params()) ar.put_vec("param." + p.name, *p.value);
  for (auto& b : net.buffers()) ar.put_vec("buffer." + b.name, *b.value);
  if (!thresholds.empty()) ar.put_vec("thresholds", thresholds);
  ar.finish();
}

struct LoadedModel {
  ModelConfig config;
  std::string role;
  std::vector<double> thresholds;  // empty if absent
  Archive archive;
};

inline LoadedModel read_model_checkpoint(const std::filesystem::path& path) {
  LoadedModel m{.config = {}, .role = {}, .thresholds = {}, .archive = Archive::read(path)};
  if (m.archive.str("kind") != "model")
    throw std::runtime_error("not a model checkpoint: " + path.string());
  m.config = nlohmann::json::parse(m.archive.str("model_config")).get<ModelConfig>();
  m.role = m.archive.str("role");
  if (auto it = m.archive.vecs.find("thresholds"); it != m.archive.vecs.end())
    m.thresholds = it->second;
  return m;
}

inline void load_model_state(PoseNet& net, const LoadedModel& m) {
  if (!(net.config() == m.config))
    throw std::runtime_error("checkpoint/model config mismatch");
  for (auto& p : net.params()) {
    const auto& v = m.archive.vec("param." + p.name);
    if (v.size() != p.value->size())
      throw std::runtime_error("checkpoint array size mismatch for " + p.name);
    *p.value = v;
  }
  for (auto& b : net.buffers()) {
    const auto& v = m.archive.vec("buffer." + b.name);
    if (v.size() != b.value->size())
      throw std::runtime_error("checkpoint array size mismatch for " + b.name);
    *b.value = v;
  }
}

}  // namespace handssl
