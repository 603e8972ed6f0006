#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "handssl/checkpoint.hpp"
#include "handssl/nn.hpp"

namespace handssl {

// Adam with L2 weight decay folded into the gradient. Holds references into
// the owning network's parameter storage; the network must outlive it.
class Adam {
 public:
  Adam() = default;

  Adam(std::vector<ParamRef> params, double lr, double weight_decay, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : refs_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2),
        eps_(eps) {
    if (!(lr > 0)) throw std::invalid_argument("Adam: lr must be positive");
    for (const auto& p : refs_) {
      m_.emplace_back(p.value->size(), 0.0);
      v_.emplace_back(p.value->size(), 0.0);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, double(t_));
    const double bc2 = 1.0 - std::pow(b2_, double(t_));
    for (size_t i = 0; i < refs_.size(); ++i) {
      auto& w = *refs_[i].value;
      const auto& g = *refs_[i].grad;
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t k = 0; k < w.size(); ++k) {
        const double grad = g[k] + wd_ * w[k];
        m[k] = b1_ * m[k] + (1 - b1_) * grad;
        v[k] = b2_ * v[k] + (1 - b2_) * grad * grad;
        w[k] -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
      }
    }
  }

  void save(ArchiveWriter& ar, const std::string& prefix) const {
    ar.put_u64(prefix + ".t", uint64_t(t_));
    ar.put_double(prefix + ".lr", lr_);
    for (size_t i = 0; i < refs_.size(); ++i) {
      ar.put_vec(prefix + ".m." + refs_[i].name, m_[i]);
      ar.put_vec(prefix + ".v." + refs_[i].name, v_[i]);
    }
  }

  void load(const Archive& ar, const std::string& prefix) {
    t_ = int64_t(ar.u64(prefix + ".t"));
    lr_ = ar.doubles.at(prefix + ".lr");
    for (size_t i = 0; i < refs_.size(); ++i) {
      m_[i] = ar.vec(prefix + ".m." + refs_[i].name);
      v_[i] = ar.vec(prefix + ".v." + refs_[i].name);
      if (m_[i].size() != refs_[i].value->size() || v_[i].size() != refs_[i].value->size())
        throw std::runtime_error("Adam::load: state size mismatch for " + refs_[i].name);
    }
  }

 private:
  std::vector<ParamRef> refs_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
  double lr_ = 1e-4, wd_ = 0.0, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
};

}  // namespace handssl
