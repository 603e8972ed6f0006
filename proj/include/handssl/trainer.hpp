#pragma once

#include <json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "handssl/averaging.hpp"
#include "handssl/dataset.hpp"
#include "handssl/model.hpp"
#include "handssl/optimizer.hpp"
#include "handssl/pseudolabel.hpp"
#include "handssl/schedule.hpp"

namespace handssl {

enum class UncertaintyView { PseudoPass, AugmentedPass };

struct TrainConfig {
  double lambda = 1.0;
  int batch_labeled = 32;
  int batch_unlabeled = 32;
  int epochs = 20;
  double base_lr = 1e-4;
  double weight_decay = 1e-5;
  AugmentationRanges aug;
  bool augment_supervised = true;
  double m_a = 1.0;
  double m_r = 0.1;
  bool student_use_mask = true;
  UncertaintyView uncertainty_view = UncertaintyView::PseudoPass;
  double eta = 0.05;
  double rho_start = 0.2;
  double rho_end = 0.9;
  // Epochs of supervised-only teacher training before the consistency term
  // activates. Thresholds still warm up during epoch 0 regardless.
  int consistency_warmup_epochs = 1;
  double eman_momentum = 0.999;
  AvgFlavor avg_flavor = AvgFlavor::EMAN;
  int fine_tune_epochs = -1;  // -1 resolves to epochs / 10, at least 1
  double fine_tune_lr_scale = 0.1;
  uint64_t seed = 1;
  int checkpoint_every = 0;
  int diagnostic_samples = 600;
  bool supervised_only = false;

  int resolved_fine_tune_epochs() const {
    return fine_tune_epochs >= 0 ? fine_tune_epochs : std::max(1, epochs / 10);
  }

  void validate() const {
    if (lambda < 0) throw std::invalid_argument("TrainConfig: lambda must be nonnegative");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (batch_labeled < 1 || batch_unlabeled < 1)
      throw std::invalid_argument("TrainConfig: batch sizes must be >= 1");
    if (!(base_lr > 0)) throw std::invalid_argument("TrainConfig: base_lr must be positive");
    if (weight_decay < 0) throw std::invalid_argument("TrainConfig: negative weight decay");
    if (m_a < 0 || m_r < 0) throw std::invalid_argument("TrainConfig: mask weights negative");
    if (!(eman_momentum >= 0 && eman_momentum < 1))
      throw std::invalid_argument("TrainConfig: eman_momentum must be in [0,1)");
    if (consistency_warmup_epochs < 1)
      throw std::invalid_argument("TrainConfig: consistency_warmup_epochs must be >= 1");
    RhoSchedule{rho_start, rho_end, std::max(1, epochs)}.validate();
    aug.validate();
  }
};

inline void to_json(nlohmann::json& j, const AugmentationRanges& r) {
  j = {{"rotation_deg", r.rotation_deg}, {"scale", r.scale}, {"translation_mm", r.translation_mm}};
}
inline void from_json(const nlohmann::json& j, AugmentationRanges& r) {
  r.rotation_deg = j.at("rotation_deg").get<std::array<double, 2>>();
  r.scale = j.at("scale").get<std::array<double, 2>>();
  r.translation_mm = j.at("translation_mm").get<std::array<double, 2>>();
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lambda", c.lambda},
       {"batch_labeled", c.batch_labeled},
       {"batch_unlabeled", c.batch_unlabeled},
       {"epochs", c.epochs},
       {"base_lr", c.base_lr},
       {"weight_decay", c.weight_decay},
       {"aug", c.aug},
       {"augment_supervised", c.augment_supervised},
       {"m_a", c.m_a},
       {"m_r", c.m_r},
       {"student_use_mask", c.student_use_mask},
       {"uncertainty_view",
        c.uncertainty_view == UncertaintyView::PseudoPass ? "pseudo" : "augmented"},
       {"eta", c.eta},
       {"rho_start", c.rho_start},
       {"rho_end", c.rho_end},
       {"consistency_warmup_epochs", c.consistency_warmup_epochs},
       {"eman_momentum", c.eman_momentum},
       {"avg_flavor", to_string(c.avg_flavor)},
       {"fine_tune_epochs", c.fine_tune_epochs},
       {"fine_tune_lr_scale", c.fine_tune_lr_scale},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"diagnostic_samples", c.diagnostic_samples},
       {"supervised_only", c.supervised_only}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lambda = j.at("lambda").get<double>();
  c.batch_labeled = j.at("batch_labeled").get<int>();
  c.batch_unlabeled = j.at("batch_unlabeled").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.base_lr = j.at("base_lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.aug = j.at("aug").get<AugmentationRanges>();
  c.augment_supervised = j.at("augment_supervised").get<bool>();
  c.m_a = j.at("m_a").get<double>();
  c.m_r = j.at("m_r").get<double>();
  c.student_use_mask = j.at("student_use_mask").get<bool>();
  c.uncertainty_view = j.at("uncertainty_view").get<std::string>() == "pseudo"
                           ? UncertaintyView::PseudoPass
                           : UncertaintyView::AugmentedPass;
  c.eta = j.at("eta").get<double>();
  c.rho_start = j.at("rho_start").get<double>();
  c.rho_end = j.at("rho_end").get<double>();
  c.consistency_warmup_epochs = j.at("consistency_warmup_epochs").get<int>();
  c.eman_momentum = j.at("eman_momentum").get<double>();
  c.avg_flavor = avg_flavor_from(j.at("avg_flavor").get<std::string>());
  c.fine_tune_epochs = j.at("fine_tune_epochs").get<int>();
  c.fine_tune_lr_scale = j.at("fine_tune_lr_scale").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  c.diagnostic_samples = j.at("diagnostic_samples").get<int>();
  c.supervised_only = j.at("supervised_only").get<bool>();
}

struct EpochReport {
  int epoch = 0;
  std::string phase;  // "teacher" or "fine_tune"
  double lr = 0;
  double rho_target = 0;
  double sup_loss = 0;
  double cons_loss = std::numeric_limits<double>::quiet_NaN();
  double student_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> thresholds;
  std::vector<double> accept_fractions;
  int skipped_zero_mask = 0;
  int pseudo_labels_used = 0;
  double teacher_error_mm = std::numeric_limits<double>::quiet_NaN();
  double student_error_mm = std::numeric_limits<double>::quiet_NaN();
  double pl_masked_mm = std::numeric_limits<double>::quiet_NaN();
  double pl_unmasked_mm = std::numeric_limits<double>::quiet_NaN();
};

inline nlohmann::json to_json_report(const EpochReport& r) {
  auto num = [](double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  return {{"epoch", r.epoch},
          {"phase", r.phase},
          {"lr", r.lr},
          {"rho_target", r.rho_target},
          {"sup_loss", num(r.sup_loss)},
          {"cons_loss", num(r.cons_loss)},
          {"student_loss", num(r.student_loss)},
          {"thresholds", r.thresholds},
          {"accept_fractions", r.accept_fractions},
          {"skipped_zero_mask", r.skipped_zero_mask},
          {"pseudo_labels_used", r.pseudo_labels_used},
          {"teacher_error_mm", num(r.teacher_error_mm)},
          {"student_error_mm", num(r.student_error_mm)},
          {"pl_masked_mm", num(r.pl_masked_mm)},
          {"pl_unmasked_mm", num(r.pl_unmasked_mm)}};
}

// ---------------------------------------------------------------------------
// Evaluation helpers (pure, shared by the trainer, the CLI and tests).
// ---------------------------------------------------------------------------

struct EvalResult {
  double mean_error_mm = 0;
  std::vector<double> per_joint_mm;
  size_t n_samples = 0;
};

// Network z-outputs are unbounded; clamp into a band safely in front of the
// camera before back-projection so a diverged intermediate state yields a
// large finite error instead of a projection failure.
inline JointSet clamp_uvz_depth(JointSet uvz, double limit = 1.8) {
  for (auto& p : uvz.coords) p[2] = std::clamp(p[2], -limit, limit);
  return uvz;
}

/// Mean Euclidean distance in camera mm between decoded predictions and the
/// ground-truth joints, averaged over joints and samples.
inline EvalResult evaluate(PoseNet& net, const SampleSet& set, int eval_batch = 64) {
  if (set.empty()) throw std::invalid_argument("evaluate: empty test set");
  const int n_joints = net.config().n_joints;
  EvalResult res;
  res.per_joint_mm.assign(size_t(n_joints), 0.0);
  size_t count = 0;
  for (size_t pos = 0; pos < set.size(); pos += size_t(eval_batch)) {
    const size_t end = std::min(set.size(), pos + size_t(eval_batch));
    std::vector<const DepthFrame*> frames;
    for (size_t i = pos; i < end; ++i) frames.push_back(&set[i].frame);
    const auto bundle = net.forward(frames, Mode::Eval);
    const auto decoded = decode(bundle, net.config().in_size);
    for (size_t i = pos; i < end; ++i) {
      const JointSet pred_mm = uvz_to_xyz(clamp_uvz_depth(decoded[i - pos]), set[i].frame);
      const JointSet* gt = set[i].joints ? &*set[i].joints : nullptr;
      if (!gt) throw std::invalid_argument("evaluate: sample " + set[i].id + " has no labels");
      for (int j = 0; j < n_joints; ++j) {
        double d2 = 0;
        for (int k = 0; k < 3; ++k) {
          const double d = pred_mm.coords[size_t(j)][k] - gt->coords[size_t(j)][k];
          d2 += d * d;
        }
        res.per_joint_mm[size_t(j)] += std::sqrt(d2);
      }
      ++count;
    }
  }
  res.n_samples = count;
  double total = 0;
  for (auto& v : res.per_joint_mm) {
    v /= double(count);
    total += v;
  }
  res.mean_error_mm = total / double(n_joints);
  return res;
}

struct PseudoLabelAccuracy {
  double masked_mm = std::numeric_limits<double>::quiet_NaN();
  double unmasked_mm = std::numeric_limits<double>::quiet_NaN();
  size_t accepted_joints = 0, total_joints = 0;
  std::vector<double> per_joint_accept_fraction;
  std::vector<double> per_joint_unmasked_mm;
};

/// Mean mm error of the teacher's pseudo-labels over a privately labeled set,
/// over all joints (unmasked) and over accepted joints only (masked).
inline PseudoLabelAccuracy pseudo_label_accuracy(PoseNet& net, const SampleSet& set,
                                                 const std::vector<double>& thresholds,
                                                 int eval_batch = 64) {
  PseudoLabelAccuracy acc;
  double sum_all = 0, sum_masked = 0;
  size_t n_all = 0, n_masked = 0;
  std::vector<double> pj_err, pj_acc;
  std::vector<size_t> pj_n;
  for (size_t pos = 0; pos < set.size(); pos += size_t(eval_batch)) {
    const size_t end = std::min(set.size(), pos + size_t(eval_batch));
    std::vector<const DepthFrame*> frames;
    for (size_t i = pos; i < end; ++i) frames.push_back(&set[i].frame);
    const auto bundle = net.forward(frames, Mode::Eval);
    const Tensor hhat = spatial_softmax(bundle.h2d);
    const auto grid = decode_grid(hhat, bundle.hz);
    const auto unc = heatmap_std_batch(hhat, grid);
    const auto decoded = decode(bundle, net.config().in_size);
    for (size_t i = pos; i < end; ++i) {
      const auto& gt = set[i].private_joints ? set[i].private_joints : set[i].joints;
      if (!gt)
        throw std::invalid_argument("pseudo_label_accuracy: sample " + set[i].id +
                                    " has no private labels");
      const JointSet pred_mm = uvz_to_xyz(clamp_uvz_depth(decoded[i - pos]), set[i].frame);
      if (pj_err.empty()) {
        pj_err.assign(pred_mm.coords.size(), 0.0);
        pj_acc.assign(pred_mm.coords.size(), 0.0);
        pj_n.assign(pred_mm.coords.size(), 0);
      }
      for (size_t j = 0; j < pred_mm.coords.size(); ++j) {
        double d2 = 0;
        for (int k = 0; k < 3; ++k) {
          const double d = pred_mm.coords[j][k] - gt->coords[j][k];
          d2 += d * d;
        }
        const double err = std::sqrt(d2);
        sum_all += err;
        ++n_all;
        pj_err[j] += err;
        pj_n[j] += 1;
        if (!thresholds.empty() && unc[i - pos].c[j] < thresholds[j]) {
          sum_masked += err;
          ++n_masked;
          pj_acc[j] += 1;
        }
      }
    }
  }
  acc.total_joints = n_all;
  acc.accepted_joints = n_masked;
  if (n_all > 0) acc.unmasked_mm = sum_all / double(n_all);
  if (thresholds.empty() && n_all > 0) acc.masked_mm = acc.unmasked_mm;
  if (n_masked > 0) acc.masked_mm = sum_masked / double(n_masked);
  for (size_t j = 0; j < pj_err.size(); ++j) {
    acc.per_joint_unmasked_mm.push_back(pj_n[j] ? pj_err[j] / double(pj_n[j]) : 0.0);
    acc.per_joint_accept_fraction.push_back(pj_n[j] ? pj_acc[j] / double(pj_n[j]) : 0.0);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct TrainerDatasets {
  SampleSet labeled;
  SampleSet unlabeled;
  SampleSet test;  // optional; empty skips per-epoch evaluation
};

class Trainer {
 public:
  Trainer(const ModelConfig& mcfg, const TrainConfig& tcfg, TrainerDatasets data)
      : mcfg_(mcfg), cfg_(tcfg), data_(std::move(data)),
        teacher_init_rng_(derive_stream(tcfg.seed, "init.teacher")),
        student_init_rng_(derive_stream(tcfg.seed, "init.student")),
        teacher_(mcfg, teacher_init_rng_), student_(mcfg, student_init_rng_),
        eman_view_(mcfg, student_init_rng_) {
    mcfg_.validate();
    cfg_.validate();
    if (data_.labeled.empty()) throw std::invalid_argument("Trainer: need at least one labeled sample");
    check_set(data_.labeled, true);
    check_set(data_.unlabeled, false);
    if (!data_.test.empty()) check_set(data_.test, true);

    adam_teacher_ = Adam(teacher_.params(), cfg_.base_lr, cfg_.weight_decay);
    adam_student_ = Adam(student_.params(), cfg_.base_lr, cfg_.weight_decay);
    eman_ = AveragedParams(teacher_, cfg_.eman_momentum, cfg_.avg_flavor);
    thresholds_ = ThresholdState(mcfg_.n_joints, cfg_.eta);
    warmup_c_.assign(size_t(mcfg_.n_joints), {});

    lab_cycler_ = Cycler(data_.labeled.size(), cfg_.batch_labeled,
                         derive_stream(cfg_.seed, "batch.labeled"));
    unl_cycler_ = Cycler(data_.unlabeled.size(), cfg_.batch_unlabeled,
                         derive_stream(cfg_.seed, "batch.unlabeled"));
    aug_sup_ = derive_stream(cfg_.seed, "aug.supervised");
    aug_unsup_ = derive_stream(cfg_.seed, "aug.unsupervised");
    aug_student_ = derive_stream(cfg_.seed, "aug.student");

    // Fixed diagnostic subset of the unlabeled pool (pseudo-label accuracy).
    RngStream diag_rng = derive_stream(cfg_.seed, "diagnostic");
    std::vector<int> order(data_.unlabeled.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    diag_rng.shuffle(order);
    const size_t n_diag = std::min(order.size(), size_t(std::max(0, cfg_.diagnostic_samples)));
    diag_indices_.assign(order.begin(), order.begin() + long(n_diag));
  }

  PoseNet& teacher() { return teacher_; }
  PoseNet& student() { return student_; }
  const ThresholdState& threshold_state() const { return thresholds_; }
  const std::vector<EpochReport>& reports() const { return reports_; }
  const TrainConfig& config() const { return cfg_; }
  int total_epochs() const { return cfg_.epochs + (student_active() ? cfg_.resolved_fine_tune_epochs() : 0); }
  int current_epoch() const { return epoch_; }

  int steps_per_epoch() const {
    const auto ceil_div = [](size_t n, int b) { return int((n + size_t(b) - 1) / size_t(b)); };
    int steps = ceil_div(data_.labeled.size(), cfg_.batch_labeled);
    // The unlabeled pool sets the epoch length whenever it is larger, in
    // every mode, so baselines get the same optimizer-step budget as the
    // SSL runs they are compared against.
    if (!data_.unlabeled.empty())
      steps = std::max(steps, ceil_div(data_.unlabeled.size(), cfg_.batch_unlabeled));
    return std::max(1, steps);
  }

  /// Runs all remaining epochs (teacher phase, then student fine-tuning).
  void run(const std::function<void(const EpochReport&)>& on_epoch = {}) {
    run_until(total_epochs(), on_epoch);
  }

  /// Runs epochs until `epoch_limit` (clamped to the total); resumable.
  void run_until(int epoch_limit, const std::function<void(const EpochReport&)>& on_epoch = {}) {
    const int total = std::min(total_epochs(), epoch_limit);
    while (epoch_ < total) {
      EpochReport rep = (epoch_ < cfg_.epochs) ? teacher_epoch() : fine_tune_epoch();
      reports_.push_back(rep);
      if (on_epoch) on_epoch(rep);
      ++epoch_;
      if (cfg_.checkpoint_every > 0 && epoch_ % cfg_.checkpoint_every == 0 &&
          !state_path_.empty() && epoch_ < total)
        save_state(state_path_);
    }
  }

  void set_state_path(const std::string& p) { state_path_ = p; }

  bool unsup_machinery_active() const {
    return !cfg_.supervised_only && !data_.unlabeled.empty();
  }
  bool teacher_consistency_active() const {
    return unsup_machinery_active() && cfg_.lambda > 0;
  }
  bool student_active() const { return unsup_machinery_active(); }

  // -- persistence ----------------------------------------------------------

  void save_state(const std::filesystem::path& path) {
    ArchiveWriter ar(path);
    ar.put_string("kind", "train_state");
    ar.put_string("model_config", nlohmann::json(mcfg_).dump());
    ar.put_string("train_config", nlohmann::json(cfg_).dump());
    ar.put_u64("epoch", uint64_t(epoch_));
    save_net(ar, teacher_, "teacher");
    save_net(ar, student_, "student");
    eman_.save(ar, "eman");
    adam_teacher_.save(ar, "adam.teacher");
    adam_student_.save(ar, "adam.student");
    ar.put_u64("fine_tune_started", ft_started_ ? 1 : 0);
    if (ft_started_) adam_ft_.save(ar, "adam.ft");
    ar.put_vec("thresholds.t", thresholds_.t);
    ar.put_vec("thresholds.accepted", to_doubles(thresholds_.accepted));
    ar.put_vec("thresholds.seen", to_doubles(thresholds_.seen));
    ar.put_u64("thresholds.initialized", thresholds_.initialized ? 1 : 0);
    ar.put_string("rng.aug_sup", aug_sup_.save_state());
    ar.put_string("rng.aug_unsup", aug_unsup_.save_state());
    ar.put_string("rng.aug_student", aug_student_.save_state());
    lab_cycler_.save(ar, "cycler.labeled");
    unl_cycler_.save(ar, "cycler.unlabeled");
    ar.finish();
  }

  void load_state(const std::filesystem::path& path) {
    const Archive ar = Archive::read(path);
    if (ar.str("kind") != "train_state")
      throw std::runtime_error("not a training-state checkpoint: " + path.string());
    const auto saved_m = nlohmann::json::parse(ar.str("model_config")).get<ModelConfig>();
    if (!(saved_m == mcfg_))
      throw std::runtime_error("resume: model config mismatch with checkpoint");
    if (nlohmann::json::parse(ar.str("train_config")) != nlohmann::json(cfg_))
      throw std::runtime_error("resume: train config mismatch with checkpoint");
    epoch_ = int(ar.u64("epoch"));
    load_net(ar, teacher_, "teacher");
    load_net(ar, student_, "student");
    eman_.load(ar, "eman");
    adam_teacher_.load(ar, "adam.teacher");
    adam_student_.load(ar, "adam.student");
    ft_started_ = ar.u64("fine_tune_started") != 0;
    if (ft_started_) {
      adam_ft_ = Adam(student_.params(), cfg_.base_lr * cfg_.fine_tune_lr_scale,
                      cfg_.weight_decay);
      adam_ft_.load(ar, "adam.ft");
    }
    thresholds_.t = ar.vec("thresholds.t");
    thresholds_.accepted = to_i64(ar.vec("thresholds.accepted"));
    thresholds_.seen = to_i64(ar.vec("thresholds.seen"));
    thresholds_.initialized = ar.u64("thresholds.initialized") != 0;
    aug_sup_.load_state(ar.str("rng.aug_sup"));
    aug_unsup_.load_state(ar.str("rng.aug_unsup"));
    aug_student_.load_state(ar.str("rng.aug_student"));
    lab_cycler_.load(ar, "cycler.labeled");
    unl_cycler_.load(ar, "cycler.unlabeled");
  }

 private:
  // Reshuffling index stream over one sample set.
  struct Cycler {
    std::vector<int> order;
    size_t pos = 0;
    int bs = 1;
    RngStream rng;
    size_t n = 0;

    Cycler() = default;
    Cycler(size_t n_samples, int batch, RngStream stream)
        : bs(batch), rng(stream), n(n_samples) {
      reshuffle();
    }

    void reshuffle() {
      order.resize(n);
      for (size_t i = 0; i < n; ++i) order[i] = int(i);
      rng.shuffle(order);
      pos = 0;
    }

    std::vector<int> next() {
      if (n == 0) return {};
      if (pos >= n) reshuffle();
      const size_t end = std::min(n, pos + size_t(bs));
      std::vector<int> idx(order.begin() + long(pos), order.begin() + long(end));
      pos = end;
      return idx;
    }

    void save(ArchiveWriter& ar, const std::string& prefix) const {
      std::vector<double> ord(order.begin(), order.end());
      ar.put_vec(prefix + ".order", ord);
      ar.put_u64(prefix + ".pos", pos);
      ar.put_string(prefix + ".rng", rng.save_state());
    }

    void load(const Archive& ar, const std::string& prefix) {
      const auto& ord = ar.vec(prefix + ".order");
      if (ord.size() != n) throw std::runtime_error("resume: cycler size mismatch");
      order.assign(ord.begin(), ord.end());
      pos = size_t(ar.u64(prefix + ".pos"));
      rng.load_state(ar.str(prefix + ".rng"));
    }
  };

  // Per-sample unsupervised work item prepared by the teacher's pseudo pass.
  struct UnsupItem {
    int index = -1;
    AffineAugmentation aug;           // teacher's view
    DepthFrame aug_frame;             // Phi(x_u) for the teacher
    std::vector<Vec3> pseudo_units;   // Phi(f(x_u; theta_bar)) in loss units
    std::vector<double> mask;         // per joint
    std::vector<uint8_t> accept;
    double mask_sum = 0;
  };

  void check_set(const SampleSet& set, bool labeled) const {
    for (const auto& s : set) {
      if (s.frame.crop.out_size != mcfg_.in_size)
        throw std::invalid_argument("Trainer: sample " + s.id + " crop size mismatch");
      if (labeled && (!s.joints || int(s.joints->count()) != mcfg_.n_joints))
        throw std::invalid_argument("Trainer: sample " + s.id + " lacks labels");
    }
  }

  static std::vector<double> to_doubles(const std::vector<int64_t>& v) {
    return std::vector<double>(v.begin(), v.end());
  }
  static std::vector<int64_t> to_i64(const std::vector<double>& v) {
    std::vector<int64_t> out;
    out.reserve(v.size());
    for (double x : v) out.push_back(int64_t(std::llround(x)));
    return out;
  }

  void save_net(ArchiveWriter& ar, PoseNet& net, const std::string& prefix) {
    for (auto& p : net.params()) ar.put_vec(prefix + ".param." + p.name, *p.value);
    for (auto& b : net.buffers()) ar.put_vec(prefix + ".buffer." + b.name, *b.value);
  }

  void load_net(const Archive& ar, PoseNet& net, const std::string& prefix) {
    for (auto& p : net.params()) *p.value = ar.vec(prefix + ".param." + p.name);
    for (auto& b : net.buffers()) *b.value = ar.vec(prefix + ".buffer." + b.name);
  }

  // Joint loss units: U,V in crop pixels, depth scaled to half-cube mm.
  std::vector<Vec3> to_loss_units(const DecodedBatch& grid, size_t i, int map,
                                  double cube) const {
    std::vector<Vec3> out(grid[i].size());
    for (size_t j = 0; j < grid[i].size(); ++j)
      out[j] = Vec3{grid_to_crop_uv(grid[i][j][0], map, mcfg_.in_size),
                    grid_to_crop_uv(grid[i][j][1], map, mcfg_.in_size),
                    grid[i][j][2] * cube / 2.0};
    return out;
  }

  std::vector<Vec3> uvz_to_loss_units(const JointSet& uvz, double cube) const {
    std::vector<Vec3> out(uvz.coords.size());
    for (size_t j = 0; j < uvz.coords.size(); ++j)
      out[j] = Vec3{uvz.coords[j][0], uvz.coords[j][1], uvz.coords[j][2] * cube / 2.0};
    return out;
  }

  // Chain-rule factors from loss units back to grid units.
  void loss_to_grid_grad(DecodedBatch& d_dec, size_t i, size_t j, const Vec3& g, int map,
                         double cube) const {
    const double uv_scale = double(mcfg_.in_size) / map;
    d_dec[i][j][0] += g[0] * uv_scale;
    d_dec[i][j][1] += g[1] * uv_scale;
    d_dec[i][j][2] += g[2] * cube / 2.0;
  }

  // Supervised L1 on decoded joints; forwards in train mode, accumulates
  // gradients into `net`, returns the loss.
  double supervised_pass(PoseNet& net, const std::vector<int>& idx, const SampleSet& set,
                         RngStream& aug_stream, bool augment) {
    std::vector<DepthFrame> frames;
    std::vector<std::vector<Vec3>> targets;
    frames.reserve(idx.size());
    for (int i : idx) {
      const Sample& s = set[size_t(i)];
      AffineAugmentation a;
      if (augment) a = sample_augmentation(aug_stream, cfg_.aug);
      DepthFrame f = augment ? apply_to_frame(a, s.frame) : s.frame;
      JointSet j_mm = augment ? apply_to_joints(a, *s.joints, s.frame.crop.center_xyz)
                              : *s.joints;
      targets.push_back(uvz_to_loss_units(xyz_to_uvz(j_mm, f), f.crop.cube_mm));
      frames.push_back(std::move(f));
    }
    std::vector<const DepthFrame*> ptrs;
    for (const auto& f : frames) ptrs.push_back(&f);

    const auto bundle = net.forward(ptrs, Mode::Train, true);
    const Tensor hhat = spatial_softmax(bundle.h2d);
    const auto grid = decode_grid(hhat, bundle.hz);
    const int map = net.map_size();
    const int nj = mcfg_.n_joints;
    const double denom = double(idx.size()) * nj * 3.0;

    double loss = 0;
    DecodedBatch d_dec(grid.size(), std::vector<Vec3>(size_t(nj), Vec3{0, 0, 0}));
    for (size_t i = 0; i < idx.size(); ++i) {
      const double cube = frames[i].crop.cube_mm;
      const auto dec_units = to_loss_units(grid, i, map, cube);
      for (size_t j = 0; j < size_t(nj); ++j) {
        Vec3 g{0, 0, 0};
        for (int k = 0; k < 3; ++k) {
          const double diff = dec_units[j][k] - targets[i][j][k];
          loss += std::abs(diff) / denom;
          g[k] = (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / denom;
        }
        loss_to_grid_grad(d_dec, i, j, g, map, cube);
      }
    }
    Tensor d_hhat, d_hz;
    decode_grid_backward(hhat, bundle.hz, d_dec, d_hhat, d_hz);
    net.backward(spatial_softmax_backward(hhat, d_hhat), d_hz);
    return loss;
  }

  // Teacher pseudo pass on the unaugmented views: stop-gradient predictions,
  // uncertainties, masks and the transformed pseudo-labels.
  std::vector<UnsupItem> prepare_unsup(const std::vector<int>& idx) {
    std::vector<UnsupItem> items(idx.size());
    std::vector<const DepthFrame*> ptrs;
    for (int i : idx) ptrs.push_back(&data_.unlabeled[size_t(i)].frame);
    // theta_bar snapshot pass: outside the gradient graph, normalized with
    // batch statistics like the training pass (running stats untouched), so
    // an identity augmentation reproduces the prediction exactly.
    const auto bundle = teacher_.forward(ptrs, Mode::Train, false, false);
    const Tensor hhat = spatial_softmax(bundle.h2d);
    const auto grid = decode_grid(hhat, bundle.hz);
    const auto unc_pseudo = heatmap_std_batch(hhat, grid);
    const int map = teacher_.map_size();

    for (size_t i = 0; i < idx.size(); ++i) {
      UnsupItem& it = items[i];
      it.index = idx[i];
      const Sample& s = data_.unlabeled[size_t(idx[i])];
      it.aug = sample_augmentation(aug_unsup_, cfg_.aug);
      it.aug_frame = apply_to_frame(it.aug, s.frame);

      // Phi applied to the decoded prediction: crop-UVZ -> camera mm ->
      // transform -> crop-UVZ of the augmented frame.
      JointSet uvz;
      uvz.frame = JointFrame::CropUVZ;
      for (size_t j = 0; j < size_t(mcfg_.n_joints); ++j)
        uvz.coords.push_back(Vec3{grid_to_crop_uv(grid[i][j][0], map, mcfg_.in_size),
                                  grid_to_crop_uv(grid[i][j][1], map, mcfg_.in_size),
                                  grid[i][j][2]});
      const JointSet pl_mm = apply_to_joints(it.aug, uvz_to_xyz(clamp_uvz_depth(uvz), s.frame),
                                             s.frame.crop.center_xyz);
      it.pseudo_units =
          uvz_to_loss_units(xyz_to_uvz(pl_mm, it.aug_frame), it.aug_frame.crop.cube_mm);

      std::vector<double> c = unc_pseudo[i].c;
      if (cfg_.uncertainty_view == UncertaintyView::AugmentedPass) {
        // Alternative view: uncertainty from the augmented-view heatmaps.
        std::vector<const DepthFrame*> one{&it.aug_frame};
        const auto b2 = teacher_.forward(one, Mode::Train, false, false);
        const Tensor h2 = spatial_softmax(b2.h2d);
        c = heatmap_std_batch(h2, decode_grid(h2, b2.hz))[0].c;
      }
      if (thresholds_.initialized) {
        auto mr = make_mask(c, thresholds_.t, cfg_.m_a, cfg_.m_r);
        it.mask = std::move(mr.mask.m);
        it.accept = std::move(mr.accept);
      } else {
        it.mask.assign(size_t(mcfg_.n_joints), cfg_.m_a);
        it.accept.assign(size_t(mcfg_.n_joints), 1);
        for (size_t j = 0; j < c.size(); ++j) warmup_c_[j].push_back(c[j]);
      }
      for (double m : it.mask) it.mask_sum += m;
    }
    return items;
  }

  // Consistency loss on the augmented views; returns the mean Eq-7 distance
  // over usable samples and accumulates lambda-scaled gradients.
  double consistency_pass(std::vector<UnsupItem>& items, int& skipped, int& usable_out) {
    std::vector<const DepthFrame*> ptrs;
    for (auto& it : items) ptrs.push_back(&it.aug_frame);
    const auto bundle = teacher_.forward(ptrs, Mode::Train, true);
    const Tensor hhat = spatial_softmax(bundle.h2d);
    const auto grid = decode_grid(hhat, bundle.hz);
    const int map = teacher_.map_size();
    const int nj = mcfg_.n_joints;

    int usable = 0;
    for (auto& it : items)
      if (it.mask_sum > 0) ++usable;
    skipped += int(items.size()) - usable;
    usable_out = usable;
    DecodedBatch d_dec(grid.size(), std::vector<Vec3>(size_t(nj), Vec3{0, 0, 0}));
    double loss = 0;
    if (usable > 0) {
      for (size_t i = 0; i < items.size(); ++i) {
        const UnsupItem& it = items[i];
        if (!(it.mask_sum > 0)) continue;
        const double cube = it.aug_frame.crop.cube_mm;
        const auto dec_units = to_loss_units(grid, i, map, cube);
        const double denom = 3.0 * it.mask_sum * double(usable);
        for (size_t j = 0; j < size_t(nj); ++j) {
          Vec3 g{0, 0, 0};
          for (int k = 0; k < 3; ++k) {
            const double diff = dec_units[j][k] - it.pseudo_units[j][k];
            loss += it.mask[j] * std::abs(diff) / denom;
            g[k] = cfg_.lambda * it.mask[j] *
                   (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / denom;
          }
          loss_to_grid_grad(d_dec, i, j, g, map, cube);
        }
      }
    }
    Tensor d_hhat, d_hz;
    decode_grid_backward(hhat, bundle.hz, d_dec, d_hhat, d_hz);
    teacher_.backward(spatial_softmax_backward(hhat, d_hhat), d_hz);
    return usable > 0 ? loss : std::numeric_limits<double>::quiet_NaN();
  }

  // Student step on the same unlabeled samples: fresh views, EMAN targets.
  double student_pass(const std::vector<UnsupItem>& teacher_items, int& skipped) {
    std::vector<DepthFrame> frames;
    frames.reserve(teacher_items.size());
    for (const auto& it : teacher_items) {
      const Sample& s = data_.unlabeled[size_t(it.index)];
      const AffineAugmentation a = sample_augmentation(aug_student_, cfg_.aug);
      frames.push_back(apply_to_frame(a, s.frame));
    }
    std::vector<const DepthFrame*> ptrs;
    for (const auto& f : frames) ptrs.push_back(&f);

    // Both networks evaluate the same augmented view.
    eman_.load_into(eman_view_);
    const auto pl_bundle = eman_view_.forward(ptrs, Mode::Eval, false);
    const auto pl_grid = decode_grid(spatial_softmax(pl_bundle.h2d), pl_bundle.hz);

    student_.zero_grad();
    const auto bundle = student_.forward(ptrs, Mode::Train, true);
    const Tensor hhat = spatial_softmax(bundle.h2d);
    const auto grid = decode_grid(hhat, bundle.hz);
    const int map = student_.map_size();
    const int nj = mcfg_.n_joints;

    const bool masked = cfg_.student_use_mask && thresholds_.initialized;
    int usable = 0;
    for (const auto& it : teacher_items)
      if (!masked || it.mask_sum > 0) ++usable;
    skipped += int(teacher_items.size()) - usable;

    DecodedBatch d_dec(grid.size(), std::vector<Vec3>(size_t(nj), Vec3{0, 0, 0}));
    double loss = 0;
    if (usable > 0) {
      for (size_t i = 0; i < teacher_items.size(); ++i) {
        const UnsupItem& it = teacher_items[i];
        const double msum = masked ? it.mask_sum : double(nj);
        if (!(msum > 0)) continue;
        const double cube = frames[i].crop.cube_mm;
        const auto dec_units = to_loss_units(grid, i, map, cube);
        const auto pl_units = to_loss_units(pl_grid, i, map, cube);
        const double denom = 3.0 * msum * double(usable);
        for (size_t j = 0; j < size_t(nj); ++j) {
          const double mj = masked ? it.mask[j] : 1.0;
          Vec3 g{0, 0, 0};
          for (int k = 0; k < 3; ++k) {
            const double diff = dec_units[j][k] - pl_units[j][k];
            loss += mj * std::abs(diff) / denom;
            g[k] = mj * (diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0)) / denom;
          }
          loss_to_grid_grad(d_dec, i, j, g, map, cube);
        }
      }
    }
    Tensor d_hhat, d_hz;
    decode_grid_backward(hhat, bundle.hz, d_dec, d_hhat, d_hz);
    student_.backward(spatial_softmax_backward(hhat, d_hhat), d_hz);
    adam_student_.step();
    return usable > 0 ? loss : std::numeric_limits<double>::quiet_NaN();
  }

  EpochReport teacher_epoch() {
    const int t = epoch_;
    const double lr = lr_at(cfg_.base_lr, t, cfg_.epochs);
    adam_teacher_.set_lr(lr);
    adam_student_.set_lr(lr);
    const RhoSchedule rho{cfg_.rho_start, cfg_.rho_end, cfg_.epochs};
    const double rho_t = rho_at(rho, t);

    EpochReport rep;
    rep.epoch = t;
    rep.phase = "teacher";
    rep.lr = lr;
    rep.rho_target = rho_t;

    const int steps = steps_per_epoch();
    double sup_sum = 0, cons_sum = 0, stu_sum = 0;
    int cons_n = 0, stu_n = 0, pl_used = 0;
    for (int step = 0; step < steps; ++step) {
      const auto lab_idx = lab_cycler_.next();

      std::vector<UnsupItem> items;
      if (unsup_machinery_active()) {
        items = prepare_unsup(unl_cycler_.next());
        if (thresholds_.initialized)
          for (const auto& it : items) thresholds_.record(it.accept);
        pl_used += int(items.size());
      }

      teacher_.zero_grad();
      double cons = std::numeric_limits<double>::quiet_NaN();
      bool cons_computed = false;
      if (teacher_consistency_active() && thresholds_.initialized &&
          t >= cfg_.consistency_warmup_epochs) {
        int usable = 0;
        cons = consistency_pass(items, rep.skipped_zero_mask, usable);
        cons_computed = usable > 0;
        if (cons_computed && !std::isfinite(cons)) abort_nan(t, step, lab_idx, items);
      }
      const double sup = supervised_pass(teacher_, lab_idx, data_.labeled, aug_sup_,
                                         cfg_.augment_supervised);
      adam_teacher_.step();

      if (!std::isfinite(sup)) abort_nan(t, step, lab_idx, items);
      sup_sum += sup;
      if (cons_computed) {
        cons_sum += cons;
        ++cons_n;
      }

      if (student_active()) {
        eman_.update(teacher_);
        int stu_skip = 0;
        const double stu = student_pass(items, stu_skip);
        if (std::isfinite(stu)) {
          stu_sum += stu;
          ++stu_n;
        } else if (stu_skip < int(items.size())) {
          abort_nan(t, step, lab_idx, items);
        }
      }
    }

    rep.sup_loss = sup_sum / steps;
    if (cons_n > 0) rep.cons_loss = cons_sum / cons_n;
    if (stu_n > 0) rep.student_loss = stu_sum / stu_n;
    rep.pseudo_labels_used = pl_used;

    if (unsup_machinery_active()) {
      if (!thresholds_.initialized) {
        thresholds_.t = init_thresholds(warmup_c_, rho_at(rho, 0));
        thresholds_.initialized = true;
        warmup_c_.assign(size_t(mcfg_.n_joints), {});
      } else {
        rep.accept_fractions = thresholds_.acceptance_fractions();
        thresholds_.end_epoch(rho_t);
      }
      rep.thresholds = thresholds_.t;
    }

    finish_report(rep);
    return rep;
  }

  EpochReport fine_tune_epoch() {
    if (!ft_started_) {
      adam_ft_ = Adam(student_.params(), cfg_.base_lr * cfg_.fine_tune_lr_scale,
                      cfg_.weight_decay);
      ft_started_ = true;
    }
    EpochReport rep;
    rep.epoch = epoch_;
    rep.phase = "fine_tune";
    rep.lr = cfg_.base_lr * cfg_.fine_tune_lr_scale;
    const int steps =
        std::max<int>(1, int((data_.labeled.size() + size_t(cfg_.batch_labeled) - 1) /
                             size_t(cfg_.batch_labeled)));
    double sup_sum = 0;
    for (int step = 0; step < steps; ++step) {
      student_.zero_grad();
      const double sup = supervised_pass(student_, lab_cycler_.next(), data_.labeled,
                                         aug_sup_, cfg_.augment_supervised);
      adam_ft_.step();
      if (!std::isfinite(sup)) abort_nan(epoch_, step, {}, {});
      sup_sum += sup;
    }
    rep.student_loss = sup_sum / steps;
    rep.sup_loss = rep.student_loss;
    rep.thresholds = thresholds_.t;
    finish_report(rep);
    return rep;
  }

  void finish_report(EpochReport& rep) {
    if (!data_.test.empty()) {
      rep.teacher_error_mm = evaluate(teacher_, data_.test).mean_error_mm;
      if (student_active()) rep.student_error_mm = evaluate(student_, data_.test).mean_error_mm;
    }
    if (unsup_machinery_active() && thresholds_.initialized && !diag_indices_.empty() &&
        data_.unlabeled[0].private_joints) {
      SampleSet subset;
      subset.reserve(diag_indices_.size());
      for (int i : diag_indices_) subset.push_back(data_.unlabeled[size_t(i)]);
      const auto acc = pseudo_label_accuracy(teacher_, subset, thresholds_.t);
      rep.pl_masked_mm = acc.masked_mm;
      rep.pl_unmasked_mm = acc.unmasked_mm;
    }
  }

  [[noreturn]] void abort_nan(int epoch, int step, const std::vector<int>& lab_idx,
                              const std::vector<UnsupItem>& items) {
    std::ostringstream os;
    os << "non-finite loss at epoch " << epoch << " step " << step << "; labeled ids:";
    for (int i : lab_idx) os << " " << data_.labeled[size_t(i)].id;
    os << "; unlabeled ids:";
    for (const auto& it : items) os << " " << data_.unlabeled[size_t(it.index)].id;
    throw std::runtime_error(os.str());
  }

  ModelConfig mcfg_;
  TrainConfig cfg_;
  TrainerDatasets data_;
  RngStream teacher_init_rng_, student_init_rng_;
  PoseNet teacher_, student_, eman_view_;
  AveragedParams eman_;
  Adam adam_teacher_, adam_student_, adam_ft_;
  ThresholdState thresholds_;
  std::vector<std::vector<double>> warmup_c_;
  Cycler lab_cycler_, unl_cycler_;
  RngStream aug_sup_, aug_unsup_, aug_student_;
  std::vector<int> diag_indices_;
  std::vector<EpochReport> reports_;
  int epoch_ = 0;
  bool ft_started_ = false;
  std::string state_path_;
};

}  // namespace handssl
