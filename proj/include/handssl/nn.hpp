#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "handssl/parallel.hpp"
#include "handssl/rng.hpp"
#include "handssl/tensor.hpp"

namespace handssl {

enum class Mode { Train, Eval };

struct ParamRef {
  std::string name;
  std::vector<double>* value;
  std::vector<double>* grad;
};

struct BufferRef {
  std::string name;
  std::vector<double>* value;
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Conv2d: im2col + GEMM, double precision. Caches per-image column matrices
// during a training forward so backward can reuse them. One forward's caches
// serve exactly one backward.
// ---------------------------------------------------------------------------
class Conv2d {
 public:
  Conv2d(int in_c, int out_c, int k, int stride, int pad)
      : in_c_(in_c), out_c_(out_c), k_(k), stride_(stride), pad_(pad),
        w_(size_t(out_c) * in_c * k * k, 0.0), b_(size_t(out_c), 0.0),
        wg_(w_.size(), 0.0), bg_(b_.size(), 0.0) {
    if (in_c <= 0 || out_c <= 0 || k <= 0 || stride <= 0 || pad < 0)
      throw std::invalid_argument("Conv2d: bad geometry");
  }

  void init_he(RngStream& rng) {
    const double std = std::sqrt(2.0 / (double(in_c_) * k_ * k_));
    for (auto& x : w_) x = rng.normal(0.0, std);
    for (auto& x : b_) x = 0.0;
  }

  void init_normal(RngStream& rng, double std) {
    for (auto& x : w_) x = rng.normal(0.0, std);
    for (auto& x : b_) x = 0.0;
  }

  int out_dim(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  Tensor forward(const Tensor& x, bool cache) {
    if (x.c != in_c_) throw std::invalid_argument("Conv2d: channel mismatch");
    const int oh = out_dim(x.h), ow = out_dim(x.w);
    Tensor y(x.n, out_c_, oh, ow);
    if (cache) {
      x_shape_ = {x.n, x.c, x.h, x.w};
      cols_.assign(size_t(x.n), {});
    }
    Eigen::Map<const RowMat> W(w_.data(), out_c_, in_c_ * k_ * k_);
    Eigen::Map<const Eigen::VectorXd> B(b_.data(), out_c_);
    parallel_for(x.n, [&](int i) {
      Eigen::MatrixXd col = im2col(x, i, oh, ow);
      Eigen::Map<RowMat> Y(y.plane(i, 0), out_c_, oh * ow);
      Y.noalias() = W * col;
      Y.colwise() += B;
      if (cache) cols_[size_t(i)] = std::move(col);
    });
    return y;
  }

  Tensor backward(const Tensor& dy) {
    if (cols_.empty()) throw std::logic_error("Conv2d::backward without cached forward");
    const auto [n, c, h, w] = x_shape_;
    const int oh = out_dim(h), ow = out_dim(w);
    Tensor dx(n, c, h, w);
    Eigen::Map<const RowMat> W(w_.data(), out_c_, in_c_ * k_ * k_);
    const size_t batch = size_t(n);
    std::vector<std::vector<double>> wg_part(batch), bg_part(batch);
    parallel_for(n, [&](int i) {
      Eigen::Map<const RowMat> dY(dy.plane(i, 0), out_c_, oh * ow);
      wg_part[size_t(i)].resize(w_.size());
      bg_part[size_t(i)].resize(b_.size());
      Eigen::Map<RowMat> dW(wg_part[size_t(i)].data(), out_c_, in_c_ * k_ * k_);
      dW.noalias() = dY * cols_[size_t(i)].transpose();
      Eigen::Map<Eigen::VectorXd> dB(bg_part[size_t(i)].data(), out_c_);
      dB = dY.rowwise().sum();
      Eigen::MatrixXd dcol(in_c_ * k_ * k_, oh * ow);
      dcol.noalias() = W.transpose() * dY;
      col2im(dcol, dx, i, oh, ow);
    });
    // Reduce per-image parameter gradients in index order (deterministic).
    for (int i = 0; i < n; ++i) {
      for (size_t j = 0; j < w_.size(); ++j) wg_[j] += wg_part[size_t(i)][j];
      for (size_t j = 0; j < b_.size(); ++j) bg_[j] += bg_part[size_t(i)][j];
    }
    cols_.clear();
    return dx;
  }

  void zero_grad() {
    std::fill(wg_.begin(), wg_.end(), 0.0);
    std::fill(bg_.begin(), bg_.end(), 0.0);
  }

  void collect(std::vector<ParamRef>& out, const std::string& prefix) {
    out.push_back({prefix + ".w", &w_, &wg_});
    out.push_back({prefix + ".b", &b_, &bg_});
  }

 private:
  Eigen::MatrixXd im2col(const Tensor& x, int i, int oh, int ow) const {
    Eigen::MatrixXd col(in_c_ * k_ * k_, oh * ow);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double* dst = col.col(oy * ow + ox).data();
        for (int c = 0; c < in_c_; ++c) {
          const double* src = x.plane(i, c);
          for (int ky = 0; ky < k_; ++ky) {
            const int yy = oy * stride_ + ky - pad_;
            for (int kx = 0; kx < k_; ++kx) {
              const int xx = ox * stride_ + kx - pad_;
              *dst++ = (yy < 0 || yy >= x.h || xx < 0 || xx >= x.w)
                           ? 0.0
                           : src[size_t(yy) * x.w + xx];
            }
          }
        }
      }
    return col;
  }

  void col2im(const Eigen::MatrixXd& dcol, Tensor& dx, int i, int oh, int ow) const {
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const double* src = dcol.col(oy * ow + ox).data();
        for (int c = 0; c < in_c_; ++c) {
          double* dst = dx.plane(i, c);
          for (int ky = 0; ky < k_; ++ky) {
            const int yy = oy * stride_ + ky - pad_;
            for (int kx = 0; kx < k_; ++kx) {
              const int xx = ox * stride_ + kx - pad_;
              const double g = *src++;
              if (yy >= 0 && yy < dx.h && xx >= 0 && xx < dx.w)
                dst[size_t(yy) * dx.w + xx] += g;
            }
          }
        }
      }
  }

  int in_c_, out_c_, k_, stride_, pad_;
  std::vector<double> w_, b_, wg_, bg_;
  std::array<int, 4> x_shape_{};
  std::vector<Eigen::MatrixXd> cols_;
};

// ---------------------------------------------------------------------------
// BatchNorm2d. Train mode normalizes with batch statistics and updates the
// running statistics (the state EMAN averages); eval mode uses the stored
// running statistics.
// ---------------------------------------------------------------------------
class BatchNorm2d {
 public:
  explicit BatchNorm2d(int c, double momentum = 0.1, double eps = 1e-5)
      : c_(c), momentum_(momentum), eps_(eps), gamma_(size_t(c), 1.0),
        beta_(size_t(c), 0.0), gg_(size_t(c), 0.0), bg_(size_t(c), 0.0),
        run_mean_(size_t(c), 0.0), run_var_(size_t(c), 1.0) {}

  // update_running=false gives a batch-statistics forward that leaves the
  // stored running statistics untouched (snapshot/pseudo-label passes).
  Tensor forward(const Tensor& x, Mode mode, bool cache, bool update_running = true) {
    if (x.c != c_) throw std::invalid_argument("BatchNorm2d: channel mismatch");
    Tensor y(x.n, x.c, x.h, x.w);
    const size_t plane = size_t(x.h) * x.w;
    const double m = double(x.n) * double(plane);
    if (cache) {
      xhat_ = Tensor(x.n, x.c, x.h, x.w);
      inv_std_.assign(size_t(c_), 0.0);
      train_cache_ = (mode == Mode::Train);
      m_ = m;
    }
    for (int c = 0; c < c_; ++c) {
      double mean, var;
      if (mode == Mode::Train) {
        double sum = 0, sq = 0;
        for (int i = 0; i < x.n; ++i) {
          const double* p = x.plane(i, c);
          for (size_t k = 0; k < plane; ++k) {
            sum += p[k];
            sq += p[k] * p[k];
          }
        }
        mean = sum / m;
        var = std::max(0.0, sq / m - mean * mean);
        if (update_running) {
          // PyTorch-style running update with the unbiased batch variance.
          const double unbiased = m > 1 ? var * m / (m - 1) : var;
          run_mean_[size_t(c)] = (1 - momentum_) * run_mean_[size_t(c)] + momentum_ * mean;
          run_var_[size_t(c)] = (1 - momentum_) * run_var_[size_t(c)] + momentum_ * unbiased;
        }
      } else {
        mean = run_mean_[size_t(c)];
        var = run_var_[size_t(c)];
      }
      const double istd = 1.0 / std::sqrt(var + eps_);
      if (cache) inv_std_[size_t(c)] = istd;
      const double g = gamma_[size_t(c)], b = beta_[size_t(c)];
      for (int i = 0; i < x.n; ++i) {
        const double* p = x.plane(i, c);
        double* q = y.plane(i, c);
        double* xh = cache ? xhat_.plane(i, c) : nullptr;
        for (size_t k = 0; k < plane; ++k) {
          const double h = (p[k] - mean) * istd;
          if (xh) xh[k] = h;
          q[k] = g * h + b;
        }
      }
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    if (xhat_.size() == 0) throw std::logic_error("BatchNorm2d::backward without cached forward");
    Tensor dx(dy.n, dy.c, dy.h, dy.w);
    const size_t plane = size_t(dy.h) * dy.w;
    for (int c = 0; c < c_; ++c) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int i = 0; i < dy.n; ++i) {
        const double* d = dy.plane(i, c);
        const double* xh = xhat_.plane(i, c);
        for (size_t k = 0; k < plane; ++k) {
          sum_dy += d[k];
          sum_dy_xhat += d[k] * xh[k];
        }
      }
      gg_[size_t(c)] += sum_dy_xhat;
      bg_[size_t(c)] += sum_dy;
      const double g = gamma_[size_t(c)], istd = inv_std_[size_t(c)];
      for (int i = 0; i < dy.n; ++i) {
        const double* d = dy.plane(i, c);
        const double* xh = xhat_.plane(i, c);
        double* o = dx.plane(i, c);
        if (train_cache_) {
          for (size_t k = 0; k < plane; ++k)
            o[k] = g * istd * (d[k] - sum_dy / m_ - xh[k] * sum_dy_xhat / m_);
        } else {
          for (size_t k = 0; k < plane; ++k) o[k] = g * istd * d[k];
        }
      }
    }
    xhat_ = Tensor();
    return dx;
  }

  void zero_grad() {
    std::fill(gg_.begin(), gg_.end(), 0.0);
    std::fill(bg_.begin(), bg_.end(), 0.0);
  }

  void collect(std::vector<ParamRef>& p, std::vector<BufferRef>& b, const std::string& prefix) {
    p.push_back({prefix + ".gamma", &gamma_, &gg_});
    p.push_back({prefix + ".beta", &beta_, &bg_});
    b.push_back({prefix + ".running_mean", &run_mean_});
    b.push_back({prefix + ".running_var", &run_var_});
  }

 private:
  int c_;
  double momentum_, eps_;
  std::vector<double> gamma_, beta_, gg_, bg_, run_mean_, run_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool train_cache_ = false;
  double m_ = 0;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x, bool cache) {
    Tensor y(x.n, x.c, x.h, x.w);
    if (cache) mask_.assign(x.size(), 0);
    for (size_t i = 0; i < x.size(); ++i) {
      const bool on = x.v[i] > 0;
      y.v[i] = on ? x.v[i] : 0.0;
      if (cache) mask_[i] = on;
    }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    if (mask_.size() != dy.size()) throw std::logic_error("ReLU::backward without cached forward");
    Tensor dx(dy.n, dy.c, dy.h, dy.w);
    for (size_t i = 0; i < dy.size(); ++i) dx.v[i] = mask_[i] ? dy.v[i] : 0.0;
    return dx;
  }

 private:
  std::vector<unsigned char> mask_;
};

// One encoder stage: 3x3 conv (optionally strided) + BN + ReLU.
struct ConvBlock {
  Conv2d conv;
  BatchNorm2d bn;
  ReLU relu;

  ConvBlock(int in_c, int out_c, int stride, double bn_momentum)
      : conv(in_c, out_c, 3, stride, 1), bn(out_c, bn_momentum) {}

  Tensor forward(const Tensor& x, Mode mode, bool cache, bool update_running = true) {
    return relu.forward(bn.forward(conv.forward(x, cache), mode, cache, update_running), cache);
  }

  Tensor backward(const Tensor& dy) { return conv.backward(bn.backward(relu.backward(dy))); }
};

}  // namespace handssl
