// handssl command-line tool: synthetic dataset generation, semi-supervised
// training, evaluation and pseudo-label diagnostics.
//
// Exit codes: 0 success, 2 usage/config error, 3 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "handssl/config.hpp"
#include "handssl/dataset.hpp"
#include "handssl/trainer.hpp"

namespace fs = std::filesystem;
using namespace handssl;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  std::string out;
  bool json_output = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "JSON config file");
  cmd->add_option("--set", o.overrides, "override a config value: key.path=value")
      ->take_all();
  cmd->add_option("--seed", o.seed, "root random seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_flag("--json", o.json_output, "machine-readable JSON output");
}

json resolve_config_tree(const CommonOpts& o) {
  json tree = run_config_defaults();
  if (!o.config_path.empty()) {
    std::ifstream f(o.config_path);
    if (!f) throw UsageError("cannot open config file: " + o.config_path);
    json user = json::parse(f, nullptr, false);
    if (user.is_discarded()) throw UsageError("config file is not valid JSON: " + o.config_path);
    merge_config(tree, user);
  }
  for (const auto& s : o.overrides) apply_override(tree, s);
  if (o.seed) tree["seed"] = *o.seed;
  if (!o.out.empty()) tree["out"] = o.out;
  return tree;
}

SampleSet load_and_crop(const std::string& dir, int out_size) {
  const Dataset ds = load_generic(dir);
  return materialize(ds, out_size);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  f << s;
  if (!f) throw std::runtime_error("failed writing " + p.string());
}

// ---------------------------------------------------------------------------

int cmd_generate(const CommonOpts& opts, int n_flag, double noise_flag, bool force) {
  json tree = resolve_config_tree(opts);
  if (n_flag >= 0) tree["generate"]["n"] = n_flag;
  if (noise_flag >= 0) tree["generate"]["noise_std_mm"] = noise_flag;
  const RunConfig cfg = run_config_from_json(tree);
  if (cfg.out.empty()) throw UsageError("generate: --out is required");
  if (cfg.generate_n <= 0) throw UsageError("generate: --n must be positive");

  const fs::path dir(cfg.out);
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw UsageError("generate: output directory exists and is not empty (use --force)");

  auto hand = default_hand_config();
  hand.noise_std_mm = cfg.generate_noise_std_mm;
  hand.cube_mm = cfg.generate_cube_mm;
  hand.raw_size = cfg.generate_raw_size;
  RngStream rng = derive_stream(cfg.seed, "generate");
  const Dataset ds = generate_synthetic(hand, cfg.generate_n, rng);
  save_generic(ds, dir);
  std::cout << "generated " << ds.records.size() << " samples (n_joints=" << ds.meta.n_joints
            << ") into " << dir.string() << "\n";
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& data_flag,
              const std::string& test_flag, double label_frac_flag,
              double unlabeled_frac_flag, bool supervised_only, bool resume,
              int stop_after) {
  json tree = resolve_config_tree(opts);
  if (!data_flag.empty()) tree["data"]["dir"] = data_flag;
  if (!test_flag.empty()) tree["data"]["test_dir"] = test_flag;
  if (label_frac_flag >= 0) tree["data"]["label_fraction"] = label_frac_flag;
  if (unlabeled_frac_flag >= 0) tree["data"]["unlabeled_fraction"] = unlabeled_frac_flag;
  if (supervised_only) tree["train"]["supervised_only"] = true;
  const RunConfig cfg = run_config_from_json(tree);
  if (cfg.data_dir.empty()) throw UsageError("train: --data (or data.dir) is required");
  if (cfg.out.empty()) throw UsageError("train: --out is required");

  fs::create_directories(cfg.out);
  write_text(fs::path(cfg.out) / "config_resolved.json", tree.dump(2) + "\n");

  const SampleSet all = load_and_crop(cfg.data_dir, cfg.out_size);
  if (all.empty()) throw UsageError("train: dataset at " + cfg.data_dir + " is empty");
  auto sp = split(all, SplitSpec{cfg.label_fraction, cfg.split_seed, cfg.unlabeled_fraction});
  TrainerDatasets data{std::move(sp.labeled), std::move(sp.unlabeled), {}};
  if (!cfg.test_dir.empty()) data.test = load_and_crop(cfg.test_dir, cfg.out_size);

  Trainer trainer(cfg.model, cfg.train, std::move(data));
  const fs::path state_path = fs::path(cfg.out) / "state.tckpt";
  trainer.set_state_path(state_path.string());
  if (resume) {
    if (!fs::exists(state_path))
      throw UsageError("train --resume: no state checkpoint at " + state_path.string());
    trainer.load_state(state_path);
    std::cout << "resumed at epoch " << trainer.current_epoch() << "\n";
  }

  std::ofstream reports(fs::path(cfg.out) / "reports.jsonl",
                        resume ? std::ios::app : std::ios::trunc);
  const auto on_epoch = [&](const EpochReport& r) {
    reports << to_json_report(r).dump() << "\n";
    reports.flush();
    std::cout << "epoch " << r.epoch << " [" << r.phase << "] sup=" << r.sup_loss;
    if (std::isfinite(r.cons_loss)) std::cout << " cons=" << r.cons_loss;
    if (std::isfinite(r.student_loss)) std::cout << " student=" << r.student_loss;
    if (std::isfinite(r.teacher_error_mm)) std::cout << " teacher_mm=" << r.teacher_error_mm;
    if (std::isfinite(r.student_error_mm)) std::cout << " student_mm=" << r.student_error_mm;
    std::cout << "\n";
  };

  if (stop_after > 0) {
    trainer.run_until(stop_after, on_epoch);
    trainer.save_state(state_path);
    std::cout << "stopped after epoch " << trainer.current_epoch() << " (state saved)\n";
    return 0;
  }
  trainer.run(on_epoch);

  const auto& thr = trainer.threshold_state().t;
  save_model_checkpoint(fs::path(cfg.out) / "teacher.hckpt", trainer.teacher(), "teacher", thr);
  if (trainer.student_active())
    save_model_checkpoint(fs::path(cfg.out) / "student.hckpt", trainer.student(), "student",
                          thr);
  const auto& last = trainer.reports().back();
  json summary{{"epochs", int(trainer.reports().size())},
               {"final_teacher_error_mm",
                std::isfinite(last.teacher_error_mm) ? json(last.teacher_error_mm) : json()},
               {"final_student_error_mm",
                std::isfinite(last.student_error_mm) ? json(last.student_error_mm) : json()}};
  write_text(fs::path(cfg.out) / "summary.json", summary.dump(2) + "\n");
  if (opts.json_output) std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& ckpt_path, const std::string& data_dir) {
  if (ckpt_path.empty() || data_dir.empty())
    throw UsageError("eval: --checkpoint and --data are required");
  const LoadedModel m = read_model_checkpoint(ckpt_path);
  RngStream dummy(0);
  PoseNet net(m.config, dummy);
  load_model_state(net, m);

  const SampleSet set = load_and_crop(data_dir, m.config.in_size);
  if (set.empty()) throw UsageError("eval: dataset is empty");
  for (const auto& s : set)
    if (!s.joints) throw UsageError("eval: sample " + s.id + " has no labels");
  if (int(set[0].joints->count()) != m.config.n_joints)
    throw UsageError("eval: dataset joint count does not match the checkpoint");

  const EvalResult res = evaluate(net, set);
  if (opts.json_output) {
    json j{{"mean_error_mm", res.mean_error_mm},
           {"per_joint_mm", res.per_joint_mm},
           {"n_samples", res.n_samples},
           {"role", m.role}};
    std::cout << j.dump() << "\n";
  } else {
    std::cout << "samples: " << res.n_samples << "\nmean_error_mm: " << res.mean_error_mm
              << "\nper-joint (mm):";
    for (double v : res.per_joint_mm) std::cout << " " << v;
    std::cout << "\n";
  }
  return 0;
}

int cmd_diagnose(const CommonOpts& opts, const std::string& ckpt_path,
                 const std::string& data_dir, bool accept_all, bool oracle) {
  if (ckpt_path.empty() || data_dir.empty())
    throw UsageError("diagnose: --checkpoint and --data are required");
  const LoadedModel m = read_model_checkpoint(ckpt_path);
  RngStream dummy(0);
  PoseNet net(m.config, dummy);
  load_model_state(net, m);

  SampleSet set = load_and_crop(data_dir, m.config.in_size);
  if (set.empty()) throw UsageError("diagnose: dataset is empty");
  for (const auto& s : set)
    if (!s.joints)
      throw UsageError("diagnose: sample " + s.id +
                       " has no labels; the pseudo-label diagnostic needs a labeled dataset "
                       "(labels act as private ground truth)");

  std::vector<double> thresholds = m.thresholds;
  if (accept_all)
    thresholds.assign(size_t(m.config.n_joints), std::numeric_limits<double>::infinity());
  if (thresholds.empty())
    throw UsageError("diagnose: checkpoint carries no thresholds (use --accept-all or a "
                     "teacher checkpoint)");

  PseudoLabelAccuracy acc;
  if (oracle) {
    // Debug mode: predictions replaced by the ground truth (a perfect
    // teacher is a point mass, so C_j = 0 and every joint is accepted).
    acc.masked_mm = 0.0;
    acc.unmasked_mm = 0.0;
    acc.total_joints = set.size() * size_t(m.config.n_joints);
    acc.accepted_joints = acc.total_joints;
    acc.per_joint_accept_fraction.assign(size_t(m.config.n_joints), 1.0);
    acc.per_joint_unmasked_mm.assign(size_t(m.config.n_joints), 0.0);
  } else {
    acc = pseudo_label_accuracy(net, set, thresholds);
  }

  if (opts.json_output) {
    json j{{"masked_error_mm", acc.masked_mm},
           {"unmasked_error_mm", acc.unmasked_mm},
           {"accepted_joints", acc.accepted_joints},
           {"total_joints", acc.total_joints},
           {"per_joint_accept_fraction", acc.per_joint_accept_fraction},
           {"per_joint_unmasked_mm", acc.per_joint_unmasked_mm}};
    std::cout << j.dump() << "\n";
  } else {
    std::cout << "pseudo-label accuracy over " << set.size() << " samples\n";
    std::cout << "  unmasked_error_mm: " << acc.unmasked_mm << "\n";
    std::cout << "  masked_error_mm:   " << acc.masked_mm << "\n";
    std::cout << "  accepted: " << acc.accepted_joints << " / " << acc.total_joints << "\n";
    std::cout << "  joint  accept%%  unmasked_mm\n";
    for (size_t j = 0; j < acc.per_joint_unmasked_mm.size(); ++j)
      std::cout << "  " << j << "  " << 100.0 * acc.per_joint_accept_fraction[j] << "  "
                << acc.per_joint_unmasked_mm[j] << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semi-supervised depth-based 3D hand pose estimation"};
  app.require_subcommand(1);

  CommonOpts gen_o, train_o, eval_o, diag_o;
  int gen_n = -1;
  double gen_noise = -1;
  bool gen_force = false;
  auto* gen = app.add_subcommand("generate", "render a synthetic depth-hand dataset");
  add_common(gen, gen_o);
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--noise", gen_noise, "sensor noise stddev in mm");
  gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

  std::string train_data, train_test;
  double train_lf = -1, train_uf = -1;
  bool train_sup_only = false, train_resume = false;
  int train_stop_after = 0;
  auto* train = app.add_subcommand("train", "run the teacher/student training pipeline");
  add_common(train, train_o);
  train->add_option("--data", train_data, "training dataset directory");
  train->add_option("--test-data", train_test, "held-out labeled dataset for evaluation");
  train->add_option("--label-fraction", train_lf, "labeled fraction (or count if > 1)");
  train->add_option("--unlabeled-fraction", train_uf, "fraction of the unlabeled pool used");
  train->add_flag("--supervised-only", train_sup_only, "baseline: no consistency, no student");
  train->add_flag("--resume", train_resume, "resume from the output dir's state checkpoint");
  train->add_option("--stop-after", train_stop_after,
                    "stop (and save state) after this many epochs");

  std::string eval_ckpt, eval_data;
  auto* ev = app.add_subcommand("eval", "mean distance error of a checkpoint on a dataset");
  add_common(ev, eval_o);
  ev->add_option("--checkpoint", eval_ckpt, "model checkpoint (.hckpt)");
  ev->add_option("--data", eval_data, "labeled dataset directory");

  std::string diag_ckpt, diag_data;
  bool diag_accept_all = false, diag_oracle = false;
  auto* diag = app.add_subcommand("diagnose", "masked vs unmasked pseudo-label accuracy");
  add_common(diag, diag_o);
  diag->add_option("--checkpoint", diag_ckpt, "model checkpoint (.hckpt)");
  diag->add_option("--data", diag_data, "labeled dataset directory");
  diag->add_flag("--accept-all", diag_accept_all, "override thresholds to +infinity");
  diag->add_flag("--oracle", diag_oracle, "debug: use ground truth as pseudo-labels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_o, gen_n, gen_noise, gen_force);
    if (train->parsed())
      return cmd_train(train_o, train_data, train_test, train_lf, train_uf, train_sup_only,
                       train_resume, train_stop_after);
    if (ev->parsed()) return cmd_eval(eval_o, eval_ckpt, eval_data);
    if (diag->parsed()) return cmd_diagnose(diag_o, diag_ckpt, diag_data, diag_accept_all,
                                            diag_oracle);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
