#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "handssl/checkpoint.hpp"
#include "handssl/model.hpp"

namespace handssl {

enum class AvgFlavor { EMA, EMAN };

inline const char* to_string(AvgFlavor f) { return f == AvgFlavor::EMA ? "EMA" : "EMAN"; }

inline AvgFlavor avg_flavor_from(const std::string& s) {
  if (s == "EMA") return AvgFlavor::EMA;
  if (s == "EMAN") return AvgFlavor::EMAN;
  throw std::invalid_argument("unknown averaging flavor: " + s);
}

// Exponentially averaged shadow copy of a network's parameters. EMAN also
// exponentially averages the normalization-layer statistics; plain EMA copies
// the source statistics at every sync instead.
class AveragedParams {
 public:
  AveragedParams() = default;

  AveragedParams(PoseNet& src, double momentum, AvgFlavor flavor)
      : momentum_(momentum), flavor_(flavor) {
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw std::invalid_argument("AveragedParams: momentum must be in [0, 1)");
    for (auto& p : src.params()) {
      pnames_.push_back(p.name);
      pvals_.push_back(*p.value);
    }
    for (auto& b : src.buffers()) {
      bnames_.push_back(b.name);
      bvals_.push_back(*b.value);
    }
  }

  double momentum() const { return momentum_; }
  AvgFlavor flavor() const { return flavor_; }

  // theta_hat <- m * theta_hat + (1 - m) * theta. Never mutates the source.
  void update(PoseNet& src) {
    auto ps = src.params();
    if (ps.size() != pvals_.size())
      throw std::invalid_argument("AveragedParams::update: parameter list drift");
    for (size_t i = 0; i < ps.size(); ++i) {
      const auto& s = *ps[i].value;
      auto& d = pvals_[i];
      if (s.size() != d.size())
        throw std::invalid_argument("AveragedParams::update: shape drift in " + pnames_[i]);
      for (size_t k = 0; k < d.size(); ++k)
        d[k] = momentum_ * d[k] + (1.0 - momentum_) * s[k];
    }
    auto bs = src.buffers();
    if (bs.size() != bvals_.size())
      throw std::invalid_argument("AveragedParams::update: buffer list drift");
    for (size_t i = 0; i < bs.size(); ++i) {
      const auto& s = *bs[i].value;
      auto& d = bvals_[i];
      if (s.size() != d.size())
        throw std::invalid_argument("AveragedParams::update: shape drift in " + bnames_[i]);
      if (flavor_ == AvgFlavor::EMAN) {
        for (size_t k = 0; k < d.size(); ++k)
          d[k] = momentum_ * d[k] + (1.0 - momentum_) * s[k];
      } else {
        d = s;  // EMA: statistics jump to the instantaneous source values
      }
    }
  }

  // Writes the shadow state into dst and marks it eval-only; the result is a
  // pure inference view with no gradient path back to the shadow values.
  void load_into(PoseNet& dst) const {
    auto ps = dst.params();
    if (ps.size() != pvals_.size())
      throw std::invalid_argument("AveragedParams::load_into: parameter list drift");
    for (size_t i = 0; i < ps.size(); ++i) *ps[i].value = pvals_[i];
    auto bs = dst.buffers();
    for (size_t i = 0; i < bs.size(); ++i) *bs[i].value = bvals_[i];
    dst.set_eval_only(true);
  }

  PoseNet as_net(const ModelConfig& cfg) const {
    RngStream dummy(0);
    PoseNet net(cfg, dummy);
    load_into(net);
    return net;
  }

  const std::vector<double>& shadow_param(const std::string& name) const {
    for (size_t i = 0; i < pnames_.size(); ++i)
      if (pnames_[i] == name) return pvals_[i];
    throw std::invalid_argument("AveragedParams: no shadow parameter named " + name);
  }

  const std::vector<double>& shadow_buffer(const std::string& name) const {
    for (size_t i = 0; i < bnames_.size(); ++i)
      if (bnames_[i] == name) return bvals_[i];
    throw std::invalid_argument("AveragedParams: no shadow buffer named " + name);
  }

  void save(ArchiveWriter& ar, const std::string& prefix) const {
    ar.put_string(prefix + ".flavor", to_string(flavor_));
    ar.put_double(prefix + ".momentum", momentum_);
    for (size_t i = 0; i < pnames_.size(); ++i)
      ar.put_vec(prefix + ".param." + pnames_[i], pvals_[i]);
    for (size_t i = 0; i < bnames_.size(); ++i)
      ar.put_vec(prefix + ".buffer." + bnames_[i], bvals_[i]);
  }

  void load(const Archive& ar, const std::string& prefix) {
    flavor_ = avg_flavor_from(ar.str(prefix + ".flavor"));
    momentum_ = ar.doubles.at(prefix + ".momentum");
    for (size_t i = 0; i < pnames_.size(); ++i)
      pvals_[i] = ar.vec(prefix + ".param." + pnames_[i]);
    for (size_t i = 0; i < bnames_.size(); ++i)
      bvals_[i] = ar.vec(prefix + ".buffer." + bnames_[i]);
  }

 private:
  std::vector<std::string> pnames_, bnames_;
  std::vector<std::vector<double>> pvals_, bvals_;
  double momentum_ = 0.999;
  AvgFlavor flavor_ = AvgFlavor::EMAN;
};

}  // namespace handssl
