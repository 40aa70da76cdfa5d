// Command-line entry point. Exit codes: 0 ok, 1 runtime failure, 2 usage
// error (bad flags, missing inputs, invalid configuration).

#include "segs/datakit.hpp"
#include "segs/geometry.hpp"
#include "segs/trainer.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>

namespace fs = std::filesystem;
using namespace segs;

namespace {

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

CameraPose parse_pose_arg(const std::string& s) {
  return from_tum(parse_tum_line("0 " + s, "--pose"));
}

int cmd_synth(const std::string& spec_path, const std::string& out, std::uint64_t seed, int threads) {
  if (!fs::is_regular_file(spec_path)) throw UsageError("spec not found: " + spec_path);
  SyntheticScene scene = parse_scene(load_json(spec_path));
  if (threads > 0) scene.threads = threads;
  const Dataset d = generate(scene, seed, out);
  std::size_t kf = 0;
  for (bool b : d.keyframe) kf += b;
  std::printf("wrote %zu frames (%zu keyframes), %zu cloud points to %s\n", d.size(), kf, d.cloud.points.size(),
              out.c_str());
  return 0;
}

struct TrainFlags {
  std::string data, config, out, resume;
  bool no_afme = false, no_fpr = false, random_init = false, incremental = false, quiet = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations, threads;
};

int cmd_train(const TrainFlags& f) {
  if (!fs::is_directory(f.data)) throw UsageError("dataset not found: " + f.data);
  TrainConfig cfg;
  if (!f.config.empty()) {
    require_file(f.config, "config");
    cfg = parse_train_config(load_json(f.config));
  }
  if (f.seed) cfg.seed = *f.seed;
  if (f.iterations) cfg.iterations = *f.iterations;
  if (f.threads) cfg.raster.threads = *f.threads;
  if (f.no_afme) cfg.model.appearance_dim = 0;
  if (f.no_fpr) cfg.disable_fpr();
  if (f.random_init) cfg.random_init = true;
  if (f.incremental) cfg.incremental = true;
  cfg.validate();
  const Dataset data = load_dataset(f.data);
  RunOptions opts;
  opts.out_dir = f.out;
  if (!f.resume.empty()) {
    require_file(f.resume, "checkpoint");
    opts.resume = f.resume;
  }
  const int every = std::max(1, cfg.iterations / 20);
  if (!f.quiet)
    opts.on_step = [every](const LossRecord& r) {
      if (r.iteration % every == 0) std::fprintf(stderr, "iter %6d  loss %.5f  l1 %.5f\n", r.iteration, r.total, r.l1);
    };
  const RunResult r = run(cfg, data, opts);
  std::printf("anchors %zu  train psnr %.3f ssim %.4f  test psnr %.3f ssim %.4f  (%.1f s)\n", r.state.anchors.size(),
              r.train.psnr, r.train.ssim, r.test.psnr, r.test.ssim, r.seconds);
  return 0;
}

int cmd_render(const std::string& ckpt, const std::string& pose, const std::string& out, const std::string& app_pose,
               int threads) {
  require_file(ckpt, "checkpoint");
  const TrainState s = load_checkpoint(ckpt);
  RasterConfig rc;
  rc.threads = threads;
  const CameraPose p = parse_pose_arg(pose);
  std::optional<CameraPose> ap;
  if (!app_pose.empty()) ap = parse_pose_arg(app_pose);
  save_png(out, render_frame(s, p, rc, ap).raster.image);
  return 0;
}

int cmd_eval_render(const std::string& ckpt, const std::string& data_dir, const std::string& json_out, int threads) {
  require_file(ckpt, "checkpoint");
  if (!fs::is_directory(data_dir)) throw UsageError("dataset not found: " + data_dir);
  const TrainState s = load_checkpoint(ckpt);
  const Dataset d = load_dataset(data_dir);
  RasterConfig rc;
  rc.threads = threads;
  const TrainTestSplit split = split_dataset(d, std::nullopt);
  const ViewMetrics m = evaluate_views(s, split.test, rc);
  std::printf("test views %zu  psnr %.4f  ssim %.5f\n", m.views, m.psnr, m.ssim);
  if (!json_out.empty()) {
    Json j{{"version", 1}, {"test", {{"psnr", m.psnr}, {"ssim", m.ssim}, {"views", m.views}}}};
    std::ofstream(json_out) << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_eval_traj(const std::string& est, const std::string& gt, bool sim3) {
  require_file(est, "estimate trajectory");
  require_file(gt, "ground-truth trajectory");
  const double cm = ate_rmse(load_tum_poses(est), load_tum_poses(gt), sim3);
  std::printf("ATE RMSE: %.3f cm\n", cm);
  return 0;
}

int cmd_ba_demo(const std::string& preset, std::uint64_t seed) {
  BAInstanceSpec spec;
  spec.seed = seed;
  std::mt19937_64 rng(mix_seed(seed, 0xDE40));
  if (preset == "motion" || preset == "outliers") {
    spec.n_keyframes = 1;
    spec.n_points = preset == "motion" ? 50 : 100;
    spec.outlier_fraction = preset == "outliers" ? 0.2 : 0.0;
    BAInstance inst = make_ba_instance(spec);
    const CameraPose truth = inst.true_poses.at(0);
    const CameraPose init = perturb_pose(truth, 5.0 * std::numbers::pi / 180.0, 0.1, rng);
    BAReport rep;
    const CameraPose est = motion_only_ba(inst.problem, 0, init, {}, {}, &rep);
    std::printf("motion-only BA (%s): %d iterations, cost %.6g -> %.6g\n", preset.c_str(), rep.iterations,
                rep.initial_cost, rep.final_cost);
    std::printf("rotation error %.3e rad, translation error %.3e m\n", rotation_angle_between(est.R, truth.R),
                (est.t - truth.t).norm());
    return 0;
  }
  if (preset == "local" || preset == "global") {
    spec.n_keyframes = preset == "local" ? 3 : 10;
    spec.noise_sigma = 1.0;
    BAInstance inst = make_ba_instance(spec);
    BAProblem& pb = inst.problem;
    for (auto& [id, p] : pb.points)
      if (auto t = triangulate(pb, id)) p = *t;
    auto point_rmse = [&] {
      double s = 0.0;
      for (const auto& [id, p] : pb.points) s += (p - inst.true_points.at(id)).squaredNorm();
      return std::sqrt(s / static_cast<double>(pb.points.size()));
    };
    const double before = point_rmse();
    std::vector<int> window;
    for (const auto& [id, p] : pb.poses) window.push_back(id);
    const BAReport rep = preset == "local" ? local_ba(pb, window) : global_ba(pb);
    std::printf("%s BA: %d iterations, cost %.6g -> %.6g\n", preset.c_str(), rep.iterations, rep.initial_cost,
                rep.final_cost);
    std::printf("point RMSE: triangulation %.4e m, after BA %.4e m; mean reprojection %.4f px\n", before,
                point_rmse(), mean_reprojection_error(pb));
    return 0;
  }
  throw UsageError("unknown preset '" + preset + "' (motion|outliers|local|global)");
}

int cmd_inspect(const std::string& ckpt, const std::string& out) {
  require_file(ckpt, "checkpoint");
  const TrainState s = load_checkpoint(ckpt);
  std::vector<Vec3> centers;
  std::vector<std::vector<double>> extra;
  for (const auto& a : s.anchors) {
    centers.push_back(a.center);
    const Vec3 l = a.scale();
    extra.push_back({l.x(), l.y(), l.z()});
  }
  if (!out.empty()) save_ply(out, centers, {"scale_x", "scale_y", "scale_z"}, extra);
  std::printf("iteration %d  anchors %zu  parameters %zu  k %d  feature_dim %d  appearance_dim %d\n", s.iteration,
              s.anchors.size(), s.parameter_count(), s.decoders.cfg.k, s.decoders.cfg.feature_dim,
              s.decoders.cfg.appearance_dim);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anchor-based Gaussian splatting mapper: synthesis, training, rendering, evaluation"};
  app.require_subcommand(1, 1);

  std::string spec, out;
  std::uint64_t seed = 0;
  int threads = 1;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset from a scene spec");
  synth->add_option("--spec", spec, "Scene spec (JSON)")->required();
  synth->add_option("--out", out, "Output dataset directory")->required();
  synth->add_option("--seed", seed, "Random seed")->capture_default_str();
  synth->add_option("--threads", threads, "Render threads")->capture_default_str();

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train on a dataset directory");
  train->add_option("--data", tf.data, "Dataset directory")->required();
  train->add_option("--config", tf.config, "Training config (JSON); flags override it");
  train->add_option("--out", tf.out, "Output directory")->required();
  train->add_flag("--no-afme", tf.no_afme, "Disable the appearance embedding (N_a = 0)");
  train->add_flag("--no-fpr", tf.no_fpr, "Empty the frequency-pyramid window");
  train->add_flag("--random-init", tf.random_init, "Uniform-random anchors instead of voxelized cloud");
  train->add_flag("--incremental", tf.incremental, "Merge keyframe clouds epoch by epoch");
  train->add_option("--seed", tf.seed, "Override the config seed");
  train->add_option("--iterations", tf.iterations, "Override the iteration count");
  train->add_option("--threads", tf.threads, "Rasterizer threads");
  train->add_option("--resume", tf.resume, "Continue from a checkpoint");
  train->add_flag("--quiet", tf.quiet, "No progress output");

  std::string ckpt, pose, png, app_pose;
  auto* render = app.add_subcommand("render", "Render a view from a checkpoint");
  render->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  render->add_option("--pose", pose, "Camera-to-world pose \"tx ty tz qx qy qz qw\"")->required();
  render->add_option("--out", png, "Output PNG")->required();
  render->add_option("--appearance-pose", app_pose, "Pose fed to the appearance embedding (default: --pose)");
  render->add_option("--threads", threads, "Rasterizer threads");

  std::string data_dir, json_out;
  auto* eval_render = app.add_subcommand("eval-render", "Mean PSNR/SSIM over the test split");
  eval_render->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval_render->add_option("--data", data_dir, "Dataset directory")->required();
  eval_render->add_option("--json", json_out, "Write metrics JSON here");
  eval_render->add_option("--threads", threads, "Rasterizer threads");

  std::string est, gt;
  bool sim3 = false;
  auto* eval_traj = app.add_subcommand("eval-traj", "ATE RMSE between TUM trajectories");
  eval_traj->add_option("--est", est, "Estimated trajectory (TUM)")->required();
  eval_traj->add_option("--gt", gt, "Ground-truth trajectory (TUM)")->required();
  eval_traj->add_flag("--sim3", sim3, "Similarity alignment (monocular)");

  std::string preset = "motion";
  auto* ba = app.add_subcommand("ba-demo", "Bundle adjustment on a synthetic instance");
  ba->add_option("--preset", preset, "motion | outliers | local | global")->capture_default_str();
  ba->add_option("--seed", seed, "Random seed")->capture_default_str();

  auto* inspect = app.add_subcommand("inspect", "Summarize a checkpoint, optionally export anchors as PLY");
  inspect->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  inspect->add_option("--out", out, "Output PLY of anchor centers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(spec, out, seed, threads);
    if (*train) return cmd_train(tf);
    if (*render) return cmd_render(ckpt, pose, png, app_pose, threads);
    if (*eval_render) return cmd_eval_render(ckpt, data_dir, json_out, threads);
    if (*eval_traj) return cmd_eval_traj(est, gt, sim3);
    if (*ba) return cmd_ba_demo(preset, seed);
    if (*inspect) return cmd_inspect(ckpt, out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
