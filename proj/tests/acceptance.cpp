// Acceptance suite: runs every acceptance criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exit code 0 iff all pass.
//
// Criteria 1-8 are fast property/oracle checks. Criteria 9-11 share one bank
// of desk-scale training runs on the synthetic dataset (2000 train / 400
// test, 5% labeled, small encoder, 20 teacher epochs + fine-tune, 3 seeds);
// expect roughly an hour of CPU time for the full suite.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "handssl/averaging.hpp"
#include "handssl/dataset.hpp"
#include "handssl/pseudolabel.hpp"
#include "handssl/schedule.hpp"
#include "handssl/trainer.hpp"
#include "support.hpp"

using namespace handssl;

namespace {

struct Check {
  bool pass = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      pass = false;
      if (detail.tellp() > 0) detail << "; ";
      detail << what;
    }
  }
  void note(const std::string& s) {
    if (detail.tellp() > 0) detail << "; ";
    detail << s;
  }
};

double rel_gap(double a, double b) { return (b - a) / b; }

// ---------------------------------------------------------------------------
// Criterion 1: decode vs the double-loop soft-argmax oracle.
// ---------------------------------------------------------------------------
Check criterion_decode_oracle() {
  Check c;
  RngStream rng(101);
  double worst = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const int h = 3 + int(rng.uniform_index(14));
    const int w = 3 + int(rng.uniform_index(14));
    const int nj = 1 + int(rng.uniform_index(6));
    Tensor raw(2, nj, h, w), hz(2, nj, h, w);
    for (auto& v : raw.v) v = rng.uniform(-3, 3);
    for (auto& v : hz.v) v = rng.uniform(-1, 1);
    const Tensor hhat = spatial_softmax(raw);
    const auto dec = decode_grid(hhat, hz);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < nj; ++j) {
        double u = 0, v = 0, z = 0;
        for (int x = 0; x < w; ++x)
          for (int y = 0; y < h; ++y) {
            u += double(x) * hhat.at(i, j, y, x);
            v += double(y) * hhat.at(i, j, y, x);
            z += hz.at(i, j, y, x) * hhat.at(i, j, y, x);
          }
        worst = std::max({worst, std::abs(u - dec[size_t(i)][size_t(j)][0]),
                          std::abs(v - dec[size_t(i)][size_t(j)][1]),
                          std::abs(z - dec[size_t(i)][size_t(j)][2])});
      }
  }
  c.require(worst < 1e-9, "oracle mismatch");
  c.note("100 bundles, max |diff| = " + std::to_string(worst));
  return c;
}

// ---------------------------------------------------------------------------
// Criterion 2: heatmap STD vs the loop oracle; point mass; sigma monotone.
// ---------------------------------------------------------------------------
Check criterion_uncertainty_oracle() {
  Check c;
  RngStream rng(102);
  double worst = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const int n = 4 + int(rng.uniform_index(12));
    Tensor raw(1, 1, n, n);
    for (auto& v : raw.v) v = rng.uniform(-2, 2);
    const Tensor hhat = spatial_softmax(raw);
    const auto grid = decode_grid(hhat, Tensor(1, 1, n, n));
    const double got = heatmap_std(hhat.plane(0, 0), n, n, grid[0][0][0], grid[0][0][1]);
    double acc = 0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double du = grid[0][0][0] - x, dv = grid[0][0][1] - y;
        acc += hhat.at(0, 0, y, x) * (du * du + dv * dv);
      }
    worst = std::max(worst, std::abs(got - std::sqrt(acc)));
  }
  c.require(worst < 1e-9, "loop-oracle mismatch");

  Tensor point(1, 1, 9, 9);
  point.at(0, 0, 2, 6) = 1.0;
  c.require(heatmap_std(point.plane(0, 0), 9, 9, 6.0, 2.0) == 0.0, "point mass not 0");

  double prev = -1;
  bool monotone = true;
  for (double sigma : {0.5, 1.0, 2.0, 4.0}) {
    Tensor g(1, 1, 33, 33);
    double sum = 0;
    for (int y = 0; y < 33; ++y)
      for (int x = 0; x < 33; ++x) {
        g.at(0, 0, y, x) = std::exp(-((x - 16.0) * (x - 16.0) + (y - 16.0) * (y - 16.0)) /
                                    (2 * sigma * sigma));
        sum += g.at(0, 0, y, x);
      }
    for (auto& v : g.v) v /= sum;
    const double cst = heatmap_std(g.plane(0, 0), 33, 33, 16.0, 16.0);
    monotone = monotone && cst > prev;
    prev = cst;
  }
  c.require(monotone, "Gaussian sigma monotonicity violated");
  c.note("max |diff| = " + std::to_string(worst));
  return c;
}

// ---------------------------------------------------------------------------
// Criterion 3: schedule exactness.
// ---------------------------------------------------------------------------
Check criterion_schedule_exactness() {
  Check c;
  RhoSchedule s{0.2, 0.9, 100};
  c.require(std::abs(rho_at(s, 0) - 0.2) < 1e-12, "rho(0) != rho_start");
  c.require(std::abs(rho_at(s, 100) - 0.9) < 1e-12, "rho(t_max) != rho_end");
  c.require(std::abs(rho_at(s, 50) - 0.55) < 1e-12, "rho midpoint");
  ThresholdState st(1, 0.1);
  st.t[0] = 0.50;
  for (int i = 0; i < 10; ++i) st.record({uint8_t(i < 4)});
  st.end_epoch(0.6);
  c.require(std::abs(st.t[0] - 0.52) < 1e-12, "Eq-8 single step");
  return c;
}

// ---------------------------------------------------------------------------
// Criterion 4: controller tracking on 10x-disparate scales.
// ---------------------------------------------------------------------------
Check criterion_controller_tracking() {
  Check c;
  const std::vector<double> scales{0.2, 0.6, 2.0};  // 10x spread
  const double target = 0.6;
  for (double eta : {0.01, 0.05, 0.2}) {
    RngStream rng(400 + uint64_t(eta * 1000));
    ThresholdState st(3, eta);
    std::vector<std::vector<double>> warmup(3);
    for (int i = 0; i < 1500; ++i)
      for (int j = 0; j < 3; ++j)
        warmup[size_t(j)].push_back(std::abs(rng.normal(0, scales[size_t(j)])));
    st.t = init_thresholds(warmup, target);
    std::vector<double> frac(3, 0.0);
    for (int epoch = 0; epoch < 50; ++epoch) {
      for (int i = 0; i < 1500; ++i) {
        std::vector<double> cs(3);
        for (int j = 0; j < 3; ++j) cs[size_t(j)] = std::abs(rng.normal(0, scales[size_t(j)]));
        st.record(make_mask(cs, st.t, 1.0, 0.1).accept);
      }
      frac = st.acceptance_fractions();
      st.end_epoch(target);
    }
    for (int j = 0; j < 3; ++j) {
      std::ostringstream os;
      os << "eta=" << eta << " joint " << j << " acceptance " << frac[size_t(j)];
      c.require(std::abs(frac[size_t(j)] - target) < 0.05, os.str());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Criterion 5: EMAN closed-form; EMA statistics jump to instantaneous.
// ---------------------------------------------------------------------------
Check criterion_eman() {
  Check c;
  ModelConfig mc;
  mc.in_size = 8;
  mc.n_joints = 2;
  mc.channels = {2, 3};
  mc.strides = {1, 2};
  RngStream rng(105);
  PoseNet net(mc, rng);
  auto params = net.params();
  auto bufs = net.buffers();
  auto& w = *params[0].value;
  auto& stat = *bufs[0].value;

  AveragedParams eman(net, 0.85, AvgFlavor::EMAN);
  AveragedParams ema(net, 0.85, AvgFlavor::EMA);
  std::vector<double> oracle_w = eman.shadow_param(params[0].name);
  std::vector<double> oracle_s = eman.shadow_buffer(bufs[0].name);
  bool ema_instant = true;
  for (int step = 1; step <= 8; ++step) {
    for (size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.3 * step + double(i));
    for (size_t i = 0; i < stat.size(); ++i) stat[i] = 0.2 * step + 0.05 * double(i);
    eman.update(net);
    ema.update(net);
    for (size_t i = 0; i < oracle_w.size(); ++i)
      oracle_w[i] = 0.85 * oracle_w[i] + 0.15 * w[i];
    for (size_t i = 0; i < oracle_s.size(); ++i)
      oracle_s[i] = 0.85 * oracle_s[i] + 0.15 * stat[i];
    ema_instant = ema_instant && ema.shadow_buffer(bufs[0].name) == stat;
  }
  double worst = 0;
  const auto& sw = eman.shadow_param(params[0].name);
  for (size_t i = 0; i < sw.size(); ++i) worst = std::max(worst, std::abs(sw[i] - oracle_w[i]));
  const auto& ss = eman.shadow_buffer(bufs[0].name);
  for (size_t i = 0; i < ss.size(); ++i) worst = std::max(worst, std::abs(ss[i] - oracle_s[i]));
  c.require(worst < 1e-9, "closed-form mismatch");
  c.require(ema_instant, "EMA statistics did not equal instantaneous values");
  c.require(eman.shadow_buffer(bufs[0].name) != stat, "EMAN statistics equal instantaneous");
  c.note("max |shadow - closed form| = " + std::to_string(worst));
  return c;
}

// ---------------------------------------------------------------------------
// Criterion 6: stop-gradient through the pseudo-label branch.
// ---------------------------------------------------------------------------
Check criterion_stop_gradient() {
  Check c;
  ModelConfig mc;
  mc.in_size = 16;
  mc.n_joints = 14;
  mc.channels = {4, 8};
  mc.strides = {1, 2};
  RngStream rng(106);
  PoseNet net(mc, rng);

  auto hand = default_hand_config();
  RngStream gen(9);
  const auto ds = generate_synthetic(hand, 6, gen);
  const auto set = materialize(ds, 16);
  std::vector<const DepthFrame*> frames;
  for (const auto& s : set) frames.push_back(&s.frame);

  // Graph probe: an eval (snapshot) forward leaves no backward path at all.
  const auto pl_bundle = net.forward(frames, Mode::Eval, false);
  bool no_path = false;
  try {
    Tensor d(pl_bundle.h2d.n, pl_bundle.h2d.c, pl_bundle.h2d.h, pl_bundle.h2d.w);
    net.backward(d, d);
  } catch (const std::logic_error&) {
    no_path = true;
  }
  c.require(no_path, "eval forward unexpectedly participates in the gradient graph");

  // Numeric probe: gradients as a function of the snapshot parameters.
  auto grads_for_pl = [&](const DecodedBatch& pl) {
    net.zero_grad();
    const auto bundle = net.forward(frames, Mode::Train, true);
    const Tensor hhat = spatial_softmax(bundle.h2d);
    const auto dec = decode_grid(hhat, bundle.hz);
    DecodedBatch d_dec = dec;
    for (size_t i = 0; i < dec.size(); ++i)
      for (size_t j = 0; j < dec[i].size(); ++j)
        for (int k = 0; k < 3; ++k)
          d_dec[i][j][k] = (dec[i][j][k] - pl[i][j][k] > 0 ? 1.0 : -1.0) /
                           (3.0 * double(dec[i].size()) * double(dec.size()));
    Tensor d_hhat, d_hz;
    decode_grid_backward(hhat, bundle.hz, d_dec, d_hhat, d_hz);
    net.backward(spatial_softmax_backward(hhat, d_hhat), d_hz);
    std::vector<double> flat;
    for (auto& p : net.params()) flat.insert(flat.end(), p.grad->begin(), p.grad->end());
    return flat;
  };

  auto pseudo_labels = [&](PoseNet& snapshot) {
    const auto b = snapshot.forward(frames, Mode::Eval, false);
    auto pl = decode_grid(spatial_softmax(b.h2d), b.hz);
    for (auto& per : pl)
      for (auto& p : per) {
        p[0] += 0.4;  // keep |prediction - label| away from zero
        p[1] -= 0.3;
        p[2] += 0.2;
      }
    return pl;
  };

  const auto g1 = grads_for_pl(pseudo_labels(net));
  PoseNet snap(mc, rng);
  snap.copy_state_from(net);
  for (auto& p : snap.params())
    for (auto& v : *p.value) v += 1e-9;  // perturb the theta-bar snapshot
  const auto g2 = grads_for_pl(pseudo_labels(snap));
  c.require(g1 == g2, "teacher gradient changed along the stop-gradient path");
  return c;
}

// ---------------------------------------------------------------------------
// Criterion 7: equivariance suite.
// ---------------------------------------------------------------------------
Check criterion_equivariance() {
  Check c;
  RngStream rng(107);
  AugmentationRanges ranges;
  double worst = 0;
  int checked = 0;
  for (int rep = 0; rep < 200; ++rep)
    worst = std::max(worst, testsupport::equivariance_trial(rng, ranges, &checked));
  c.require(worst < 0.75, "marker equivariance out of tolerance");
  {
    std::ostringstream os;
    os << "200 triples (" << checked << " markers), worst " << worst << " px";
    c.note(os.str());
  }

  const Vec3 center{4.0, -7.0, 610.0};
  double worst_alg = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const auto a = sample_augmentation(rng, ranges);
    const auto b = sample_augmentation(rng, ranges);
    JointSet j;
    j.frame = JointFrame::CameraMM;
    for (int i = 0; i < 6; ++i)
      j.coords.push_back(Vec3{rng.uniform(-90, 90), rng.uniform(-90, 90), rng.uniform(520, 700)});
    const auto lhs = apply_to_joints(compose(a, b), j, center);
    const auto rhs = apply_to_joints(a, apply_to_joints(b, j, center), center);
    const auto back = apply_to_joints(inverse(a), apply_to_joints(a, j, center), center);
    for (size_t i = 0; i < j.coords.size(); ++i)
      for (int k = 0; k < 3; ++k)
        worst_alg = std::max({worst_alg, std::abs(lhs.coords[i][k] - rhs.coords[i][k]),
                              std::abs(back.coords[i][k] - j.coords[i][k])});
  }
  c.require(worst_alg < 1e-9, "composition/inverse identity broken");
  return c;
}

// ---------------------------------------------------------------------------
// Criterion 8: lambda = 0 bitwise degeneracy (5 epochs, tiny set).
// ---------------------------------------------------------------------------
Check criterion_degeneracy() {
  Check c;
  auto hand = default_hand_config();
  hand.noise_std_mm = 1.0;
  RngStream gen(88);
  const auto all = materialize(generate_synthetic(hand, 40, gen), 16);
  const auto sp = split(all, SplitSpec{0.4, 5, 1.0});
  TrainerDatasets data{sp.labeled, sp.unlabeled, {}};

  ModelConfig mc;
  mc.in_size = 16;
  mc.n_joints = 14;
  mc.channels = {4, 8};
  mc.strides = {1, 2};
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_labeled = 8;
  tc.batch_unlabeled = 8;
  tc.fine_tune_epochs = 0;
  tc.seed = 77;
  tc.diagnostic_samples = 0;

  auto tc_l0 = tc;
  tc_l0.lambda = 0.0;
  Trainer run_l0(mc, tc_l0, data);
  run_l0.run();

  auto tc_sup = tc;
  tc_sup.supervised_only = true;
  Trainer run_sup(mc, tc_sup, data);
  run_sup.run();

  auto pa = run_l0.teacher().params(), pb = run_sup.teacher().params();
  bool params_equal = true;
  for (size_t i = 0; i < pa.size(); ++i) params_equal = params_equal && *pa[i].value == *pb[i].value;
  c.require(params_equal, "teacher parameters differ bitwise");
  auto ba = run_l0.teacher().buffers(), bb = run_sup.teacher().buffers();
  bool bufs_equal = true;
  for (size_t i = 0; i < ba.size(); ++i) bufs_equal = bufs_equal && *ba[i].value == *bb[i].value;
  c.require(bufs_equal, "normalization statistics differ bitwise");
  for (size_t e = 0; e < 5; ++e)
    c.require(run_l0.reports()[e].sup_loss == run_sup.reports()[e].sup_loss,
              "supervised loss stream differs at epoch " + std::to_string(e));
  return c;
}

// ---------------------------------------------------------------------------
// Criteria 9-11: the shared desk-scale experiment bank.
// ---------------------------------------------------------------------------

struct RunOutcome {
  double final_error_mm = 0;                  // student (or teacher if supervised-only)
  std::vector<EpochReport> reports;
};

struct ExperimentBank {
  std::map<std::string, RunOutcome> runs;  // key: kind + "/seed"
  SampleSet train_all, test_set;

  static constexpr int kSeeds = 3;

  ModelConfig model() const {
    ModelConfig mc;
    mc.in_size = 48;
    mc.n_joints = 14;
    mc.channels = {8, 16, 32};
    mc.strides = {1, 2, 2};
    return mc;
  }

  TrainConfig base_train(uint64_t seed) const {
    TrainConfig tc;
    tc.epochs = 20;
    tc.fine_tune_epochs = 2;
    tc.batch_labeled = 32;
    tc.batch_unlabeled = 32;
    tc.base_lr = 1e-4;
    tc.weight_decay = 1e-5;
    tc.eman_momentum = 0.99;
    tc.eta = 0.2;
    tc.rho_start = 0.2;
    tc.rho_end = 0.9;
    tc.m_a = 1.0;
    tc.m_r = 0.1;
    tc.diagnostic_samples = 400;
    tc.seed = seed;
    return tc;
  }

  void prepare() {
    if (!train_all.empty()) return;
    std::cerr << "[bank] generating synthetic datasets (2000 train / 400 test)\n";
    auto hand = default_hand_config();
    RngStream g1(20001), g2(20002);
    train_all = materialize(generate_synthetic(hand, 2000, g1), 48);
    test_set = materialize(generate_synthetic(hand, 400, g2), 48);
  }

  const RunOutcome& get(const std::string& kind, int seed_idx) {
    const std::string key = kind + "/" + std::to_string(seed_idx);
    auto it = runs.find(key);
    if (it != runs.end()) return it->second;
    prepare();

    const uint64_t seed = 1000 + uint64_t(seed_idx);
    TrainConfig tc = base_train(seed);
    double unlabeled_fraction = 1.0;
    if (kind == "supervised") tc.supervised_only = true;
    if (kind == "binary") tc.m_r = 0.0;
    if (kind == "unl25") unlabeled_fraction = 0.25;
    if (kind == "unl50") unlabeled_fraction = 0.5;

    const auto sp = split(train_all, SplitSpec{0.05, 4242, unlabeled_fraction});
    TrainerDatasets data{sp.labeled, sp.unlabeled, test_set};
    Trainer tr(model(), tc, std::move(data));
    const auto t0 = std::chrono::steady_clock::now();
    tr.run([&](const EpochReport& r) {
      std::cerr << "[bank " << key << "] epoch " << r.epoch << " (" << r.phase
                << ") sup=" << r.sup_loss;
      if (std::isfinite(r.student_error_mm)) std::cerr << " student_mm=" << r.student_error_mm;
      if (std::isfinite(r.teacher_error_mm)) std::cerr << " teacher_mm=" << r.teacher_error_mm;
      std::cerr << "\n";
    });
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    RunOutcome out;
    out.reports = tr.reports();
    const auto& last = out.reports.back();
    out.final_error_mm =
        tc.supervised_only ? last.teacher_error_mm : last.student_error_mm;
    std::cerr << "[bank " << key << "] done in " << secs << " s, final error "
              << out.final_error_mm << " mm\n";
    return runs.emplace(key, std::move(out)).first->second;
  }

  double mean_final(const std::string& kind) {
    double s = 0;
    for (int i = 0; i < kSeeds; ++i) s += get(kind, i).final_error_mm;
    return s / kSeeds;
  }
};

ExperimentBank bank;

Check criterion_ssl_benefit() {
  Check c;
  const double sup = bank.mean_final("supervised");
  const double ssl = bank.mean_final("ssl");
  std::ostringstream os;
  os << "supervised " << sup << " mm vs student " << ssl << " mm ("
     << 100.0 * rel_gap(ssl, sup) << "% better)";
  c.note(os.str());
  c.require(ssl <= 0.9 * sup, "student not at least 10% better than the baseline");
  return c;
}

Check criterion_masking_benefit() {
  Check c;
  // Masked pseudo-label error below unmasked at every post-warmup epoch.
  for (int s = 0; s < ExperimentBank::kSeeds; ++s) {
    const auto& reps = bank.get("ssl", s).reports;
    for (const auto& r : reps) {
      if (r.phase != "teacher" || r.epoch == 0) continue;
      if (!(std::isfinite(r.pl_masked_mm) && std::isfinite(r.pl_unmasked_mm))) continue;
      if (!(r.pl_masked_mm < r.pl_unmasked_mm)) {
        std::ostringstream os;
        os << "seed " << s << " epoch " << r.epoch << ": masked " << r.pl_masked_mm
           << " !< unmasked " << r.pl_unmasked_mm;
        c.require(false, os.str());
      }
    }
  }
  const double soft = bank.mean_final("ssl");
  const double binary = bank.mean_final("binary");
  std::ostringstream os;
  os << "soft " << soft << " mm vs binary " << binary << " mm";
  c.note(os.str());
  c.require(soft <= 1.02 * binary, "soft masking worse than binary beyond the 2% tie band");
  return c;
}

Check criterion_unlabeled_scaling() {
  Check c;
  const double e25 = bank.mean_final("unl25");
  const double e50 = bank.mean_final("unl50");
  const double e100 = bank.mean_final("ssl");
  std::ostringstream os;
  os << "25% " << e25 << " mm, 50% " << e50 << " mm, 100% " << e100 << " mm";
  c.note(os.str());
  c.require(e50 <= 1.03 * e25, "error increased from 25% to 50% unlabeled beyond the band");
  c.require(e100 <= 1.03 * e50, "error increased from 50% to 100% unlabeled beyond the band");
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  struct Entry {
    int id;
    const char* name;
    std::function<Check()> fn;
  };
  const std::vector<Entry> entries = {
      {1, "decode oracle", criterion_decode_oracle},
      {2, "uncertainty oracle", criterion_uncertainty_oracle},
      {3, "schedule exactness", criterion_schedule_exactness},
      {4, "controller tracking", criterion_controller_tracking},
      {5, "EMAN correctness", criterion_eman},
      {6, "stop-gradient", criterion_stop_gradient},
      {7, "equivariance suite", criterion_equivariance},
      {8, "supervised degeneracy", criterion_degeneracy},
      {9, "end-to-end SSL benefit", criterion_ssl_benefit},
      {10, "masking benefit", criterion_masking_benefit},
      {11, "unlabeled-data scaling", criterion_unlabeled_scaling},
  };

  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

  bool all_pass = true;
  for (const auto& e : entries) {
    if (!only.empty() && std::find(only.begin(), only.end(), e.id) == only.end()) continue;
    Check c;
    try {
      c = e.fn();
    } catch (const std::exception& ex) {
      c.pass = false;
      c.note(std::string("exception: ") + ex.what());
    }
    all_pass = all_pass && c.pass;
    std::printf("criterion %2d [%s]: %s%s%s\n", e.id, e.name, c.pass ? "PASS" : "FAIL",
                c.detail.tellp() > 0 ? " - " : "", c.detail.str().c_str());
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
