#pragma once

// Synthetic scenes rendered with the reference blender, datasets on disk,
// and synthetic bundle-adjustment instances.

#include "segs/config.hpp"
#include "segs/geometry.hpp"
#include "segs/io.hpp"
#include "segs/keyframes.hpp"
#include "segs/parallel.hpp"
#include "segs/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace segs {

struct BlobSpec {
  Vec3 center = Vec3::Zero();
  Vec3 sigma = Vec3::Constant(0.1);
  Vec4 quat = Vec4(1, 0, 0, 0);
  Vec3 color = Vec3::Constant(0.5);
  double opacity = 0.8;
};

/// Blobs drawn from the generation seed when no explicit list is given.
struct RandomBlobSpec {
  int count = 0;
  double extent = 0.4;  // centers ~ U(-extent, extent)^3
  double sigma_min = 0.04;
  double sigma_max = 0.12;
  double opacity_min = 0.6;
  double opacity_max = 0.95;
};

struct CameraRingSpec {
  int count = 10;
  double radius = 2.0;
  double height = 0.6;
  double arc_degrees = 360.0;
  double start_degrees = 0.0;
  Vec3 target = Vec3::Zero();
};

struct ImageSpec {
  int width = 64;
  int height = 64;
  double fov_degrees = 50.0;  // horizontal
};

struct CloudSpec {
  int points_per_blob = 200;
  double surface_radius = 1.0;  // points on the ellipsoid at this many sigmas
  bool volume = false;          // draw points from the blob's own Gaussian instead
  double noise = 0.0;           // isotropic position noise, world units
};

/// Per-view brightness gain 1 + amplitude * sin(frequency * heading + phase),
/// heading being the azimuth of the camera center around the ring target.
struct AppearanceSpec {
  double amplitude = 0.0;
  double frequency = 1.0;
  double phase = 0.0;

  double gain(double heading) const { return 1.0 + amplitude * std::sin(frequency * heading + phase); }
};

struct SyntheticScene {
  std::vector<BlobSpec> blobs;
  RandomBlobSpec random_blobs;
  CameraRingSpec cameras;
  ImageSpec image;
  CloudSpec cloud;
  double image_noise = 0.0;  // Gaussian sigma added before quantization
  AppearanceSpec appearance;
  KeyframeRule split;
  int threads = 1;

  void validate() const {
    if (cameras.count < 2) throw InvalidInput("scene: need at least 2 cameras");
    if (image.width < 1 || image.height < 1) throw InvalidInput("scene: image size must be positive");
    if (!(image.fov_degrees > 0.0 && image.fov_degrees < 180.0)) throw InvalidInput("scene: fov must be in (0,180)");
    if (!(cameras.radius > 0.0)) throw InvalidInput("scene: camera radius must be positive");
    if (random_blobs.count < 0) throw InvalidInput("scene: blob count must be >= 0");
    if (random_blobs.count > 0 && (!(random_blobs.extent > 0.0) || random_blobs.extent > 0.5))
      throw InvalidInput("scene: random blob extent must be in (0, 0.5]");
    for (const auto& b : blobs) {
      if (b.center.cwiseAbs().maxCoeff() > 0.5) throw InvalidInput("scene: blob center outside the unit volume");
      if (!(b.sigma.minCoeff() > 0.0)) throw InvalidInput("scene: blob sigma must be positive");
    }
    if (blobs.empty() && random_blobs.count == 0) throw InvalidInput("scene: no blobs");
    if (cloud.points_per_blob < 0 || image_noise < 0.0 || cloud.noise < 0.0)
      throw InvalidInput("scene: noise and densities must be non-negative");
  }

  PinholeCamera camera() const {
    PinholeCamera c;
    c.width = image.width;
    c.height = image.height;
    c.fx = c.fy = 0.5 * image.width / std::tan(0.5 * image.fov_degrees * std::numbers::pi / 180.0);
    c.cx = 0.5 * (image.width - 1);
    c.cy = 0.5 * (image.height - 1);
    return c;
  }
};

inline Vec3 read_vec3(JsonReader& r, const std::string& key, Vec3 v) {
  if (!r.has(key)) return v;
  std::vector<double> a;
  r.read(key, a);
  if (a.size() != 3) r.fail(key, "expected 3 numbers");
  return Vec3(a[0], a[1], a[2]);
}

inline SyntheticScene parse_scene(const Json& j) {
  SyntheticScene s;
  JsonReader r(j, "");
  int version = 1;
  r.read("version", version);
  if (version != 1) r.fail("version", "unsupported version " + std::to_string(version));
  if (r.has("blobs")) {
    const Json& arr = r.raw("blobs");
    if (!arr.is_array()) r.fail("blobs", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      JsonReader b(arr[i], "blobs[" + std::to_string(i) + "]");
      BlobSpec spec;
      spec.center = read_vec3(b, "center", spec.center);
      spec.sigma = read_vec3(b, "sigma", spec.sigma);
      spec.color = read_vec3(b, "color", spec.color);
      b.read("opacity", spec.opacity);
      b.finish();
      s.blobs.push_back(spec);
    }
  }
  if (r.has("random_blobs")) {
    auto b = r.child("random_blobs");
    b.read("count", s.random_blobs.count);
    b.read("extent", s.random_blobs.extent);
    b.read("sigma_min", s.random_blobs.sigma_min);
    b.read("sigma_max", s.random_blobs.sigma_max);
    b.read("opacity_min", s.random_blobs.opacity_min);
    b.read("opacity_max", s.random_blobs.opacity_max);
    b.finish();
  }
  if (r.has("cameras")) {
    auto c = r.child("cameras");
    c.read("count", s.cameras.count);
    c.read("radius", s.cameras.radius);
    c.read("height", s.cameras.height);
    c.read("arc_degrees", s.cameras.arc_degrees);
    c.read("start_degrees", s.cameras.start_degrees);
    s.cameras.target = read_vec3(c, "target", s.cameras.target);
    c.finish();
  }
  if (r.has("image")) {
    auto c = r.child("image");
    c.read("width", s.image.width);
    c.read("height", s.image.height);
    c.read("fov_degrees", s.image.fov_degrees);
    c.finish();
  }
  if (r.has("cloud")) {
    auto c = r.child("cloud");
    c.read("points_per_blob", s.cloud.points_per_blob);
    c.read("surface_radius", s.cloud.surface_radius);
    if (c.has("distribution")) {
      std::string dist;
      c.read("distribution", dist);
      if (dist != "surface" && dist != "volume") c.fail("distribution", "expected 'surface' or 'volume'");
      s.cloud.volume = dist == "volume";
    }
    c.read("noise", s.cloud.noise);
    c.finish();
  }
  r.read("image_noise", s.image_noise);
  if (r.has("appearance")) {
    auto c = r.child("appearance");
    c.read("amplitude", s.appearance.amplitude);
    c.read("frequency", s.appearance.frequency);
    c.read("phase", s.appearance.phase);
    c.finish();
  }
  if (r.has("split")) {
    auto c = r.child("split");
    std::string rule = KeyframeRule::kind_name(s.split.kind);
    c.read("rule", rule);
    try {
      s.split.kind = KeyframeRule::parse_kind(rule);
    } catch (const ConfigError& e) {
      c.fail("rule", e.what());
    }
    c.read("every", s.split.every);
    c.read("offset", s.split.offset);
    c.read("covisibility", s.split.covisibility);
    if (c.has("flags")) c.read("flags", s.split.flags);
    c.finish();
  }
  r.read("threads", s.threads);
  r.finish();
  s.validate();
  return s;
}

/// In-memory dataset: what lives in a dataset directory.
struct Dataset {
  PinholeCamera camera;
  std::vector<CameraPose> poses;  // world to camera
  std::vector<Image> images;
  PointCloud cloud;
  std::vector<bool> keyframe;
  std::vector<double> gains;  // appearance gain per view (1 when unmodulated)
  std::uint64_t seed = 0;

  std::size_t size() const { return poses.size(); }
  void validate() const {
    if (images.size() != poses.size() || keyframe.size() != poses.size() || gains.size() != poses.size())
      throw InvalidInput("dataset: image/pose/keyframe/gain counts disagree");
    camera.validate();
    for (const auto& im : images)
      if (im.width != camera.width || im.height != camera.height)
        throw InvalidInput("dataset: image size does not match intrinsics");
    for (const auto& p : poses) p.validate();
  }
};

inline std::vector<BlobSpec> realize_blobs(const SyntheticScene& scene, std::uint64_t seed) {
  std::vector<BlobSpec> blobs = scene.blobs;
  std::mt19937_64 rng(mix_seed(seed, 0xB10B));
  const RandomBlobSpec& rb = scene.random_blobs;
  std::uniform_real_distribution<double> pos(-rb.extent, rb.extent), sig(rb.sigma_min, rb.sigma_max),
      op(rb.opacity_min, rb.opacity_max), col(0.05, 0.95);
  std::normal_distribution<double> nq(0.0, 1.0);
  for (int i = 0; i < rb.count; ++i) {
    BlobSpec b;
    b.center = Vec3(pos(rng), pos(rng), pos(rng));
    b.sigma = Vec3(sig(rng), sig(rng), sig(rng));
    Vec4 q(nq(rng), nq(rng), nq(rng), nq(rng));
    b.quat = q.normalized();
    b.color = Vec3(col(rng), col(rng), col(rng));
    b.opacity = op(rng);
    blobs.push_back(b);
  }
  return blobs;
}

inline std::vector<CameraPose> ring_poses(const CameraRingSpec& ring, std::vector<double>* headings = nullptr) {
  std::vector<CameraPose> poses;
  const bool full = std::abs(ring.arc_degrees) >= 360.0 - 1e-9;
  const int steps = full ? ring.count : std::max(1, ring.count - 1);
  for (int i = 0; i < ring.count; ++i) {
    const double deg = ring.start_degrees + ring.arc_degrees * i / steps;
    const double h = deg * std::numbers::pi / 180.0;
    const Vec3 eye = ring.target + Vec3(ring.radius * std::cos(h), ring.radius * std::sin(h), ring.height);
    poses.push_back(look_at(eye, ring.target));
    if (headings) headings->push_back(std::atan2(eye.y() - ring.target.y(), eye.x() - ring.target.x()));
  }
  return poses;
}

inline std::vector<GaussianPrimitive> blob_gaussians(const std::vector<BlobSpec>& blobs) {
  std::vector<GaussianPrimitive> out;
  for (const auto& b : blobs) {
    GaussianPrimitive g;
    g.mu = b.center;
    g.scale = b.sigma;
    g.quat = b.quat.normalized();
    g.color = b.color;
    g.alpha = b.opacity;
    g.active = true;
    out.push_back(g);
  }
  return out;
}

/// Reference render of a set of Gaussians.
inline Image render_reference(const std::vector<GaussianPrimitive>& gs, const CameraPose& pose,
                              const PinholeCamera& cam, const RasterConfig& cfg = {}) {
  std::vector<Splat2D> splats;
  for (std::size_t i = 0; i < gs.size(); ++i)
    if (auto s = project(gs[i], pose, cam, cfg)) {
      s->source = static_cast<int>(i);
      splats.push_back(*s);
    }
  return rasterize_reference(splats, cam, cfg);
}

/// Pure function of (scene, seed). Images are quantized to 8 bits exactly
/// as saving them would, so the in-memory and on-disk datasets agree.
inline Dataset synthesize(const SyntheticScene& scene, std::uint64_t seed) {
  scene.validate();
  Dataset d;
  d.seed = seed;
  d.camera = scene.camera();
  std::vector<double> headings;
  d.poses = ring_poses(scene.cameras, &headings);
  const auto blobs = realize_blobs(scene, seed);
  const auto gaussians = blob_gaussians(blobs);
  for (double h : headings) d.gains.push_back(scene.appearance.gain(h));

  std::mt19937_64 crng(mix_seed(seed, 0xC10D));
  std::normal_distribution<double> n01(0.0, 1.0);
  for (const auto& b : blobs) {
    const Mat3 R = quat_to_rotation(b.quat);
    for (int i = 0; i < scene.cloud.points_per_blob; ++i) {
      Vec3 u(n01(crng), n01(crng), n01(crng));
      if (!scene.cloud.volume) u *= scene.cloud.surface_radius / u.norm();
      Vec3 p = b.center + R * b.sigma.cwiseProduct(u);
      if (scene.cloud.noise > 0.0) p += scene.cloud.noise * Vec3(n01(crng), n01(crng), n01(crng));
      d.cloud.points.push_back(p);
    }
  }

  d.images.resize(d.poses.size());
  parallel_for(d.poses.size(), scene.threads, [&](std::size_t i) {
    Image img = render_reference(gaussians, d.poses[i], d.camera);
    std::mt19937_64 nrng(mix_seed(seed, 0x1A6E, i));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (double& v : img.data) {
      v *= d.gains[i];
      if (scene.image_noise > 0.0) v += scene.image_noise * noise(nrng);
      v = quantize8(v) / 255.0;
    }
    d.images[i] = std::move(img);
  });
  d.keyframe = select_keyframes(d.poses.size(), scene.split, d.poses, d.cloud, d.camera);
  return d;
}

// ---------------------------------------------------------------------------
// Dataset directory: images/NNNN.png, poses.txt (TUM), cloud.ply, meta.json.

constexpr int kMetaVersion = 1;

inline std::string frame_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu.png", i);
  return buf;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  d.validate();
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < d.size(); ++i) save_png(dir / "images" / frame_name(i), d.images[i]);
  save_tum(dir / "poses.txt", d.poses);
  save_ply(dir / "cloud.ply", d.cloud);
  Json meta;
  meta["version"] = kMetaVersion;
  meta["frames"] = d.size();
  meta["intrinsics"] = {{"fx", d.camera.fx}, {"fy", d.camera.fy}, {"cx", d.camera.cx}, {"cy", d.camera.cy},
                        {"width", d.camera.width}, {"height", d.camera.height}};
  meta["keyframes"] = d.keyframe;
  meta["appearance_gains"] = d.gains;
  meta["seed"] = d.seed;
  std::ofstream out(dir / "meta.json");
  if (!out) throw IoError("save_dataset: cannot write meta.json in " + dir.string());
  out << meta.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  Dataset d;
  const Json meta = load_json(dir / "meta.json");
  JsonReader r(meta, "meta");
  int version = 0;
  r.read("version", version);
  if (version != kMetaVersion) r.fail("version", "unsupported meta version " + std::to_string(version));
  std::size_t frames = 0;
  r.read("frames", frames);
  auto in = r.child("intrinsics");
  in.read("fx", d.camera.fx);
  in.read("fy", d.camera.fy);
  in.read("cx", d.camera.cx);
  in.read("cy", d.camera.cy);
  in.read("width", d.camera.width);
  in.read("height", d.camera.height);
  in.finish();
  r.read("keyframes", d.keyframe);
  r.read("appearance_gains", d.gains);
  r.read("seed", d.seed);
  r.finish();
  d.poses = load_tum_poses(dir / "poses.txt");
  if (d.poses.size() != frames) throw InvalidInput("dataset: poses.txt has " + std::to_string(d.poses.size()) +
                                                   " poses, meta.json says " + std::to_string(frames));
  if (d.gains.empty()) d.gains.assign(frames, 1.0);
  for (std::size_t i = 0; i < frames; ++i) d.images.push_back(load_png(dir / "images" / frame_name(i)));
  d.cloud = load_ply(dir / "cloud.ply");
  d.validate();
  return d;
}

inline Dataset generate(const SyntheticScene& scene, std::uint64_t seed, const std::filesystem::path& out_dir) {
  Dataset d = synthesize(scene, seed);
  save_dataset(out_dir, d);
  return d;
}

// ---------------------------------------------------------------------------
// Bundle-adjustment instances with known truth.

struct BAInstance {
  BAProblem problem;  // poses and points at truth; callers perturb
  std::map<int, CameraPose> true_poses;
  std::map<int, Vec3> true_points;
  std::vector<bool> outlier;  // per observation
};

struct BAInstanceSpec {
  int n_keyframes = 3;
  int n_points = 100;
  double noise_sigma = 0.0;   // px at level 0
  double outlier_fraction = 0.0;
  double outlier_offset = 50.0;  // px
  int max_level = 0;          // observation levels drawn from [0, max_level]
  double arc_degrees = 30.0;
  double radius = 4.0;
  double point_extent = 1.0;
  std::uint64_t seed = 0;
};

inline BAInstance make_ba_instance(const BAInstanceSpec& spec) {
  if (spec.n_points < 10) throw InvalidInput("make_ba_instance: need at least 10 points");
  if (spec.n_keyframes < 1) throw InvalidInput("make_ba_instance: need at least 1 keyframe");
  if (spec.outlier_fraction < 0.0 || spec.outlier_fraction > 1.0)
    throw InvalidInput("make_ba_instance: outlier fraction must be in [0,1]");
  BAInstance inst;
  BAProblem& pb = inst.problem;
  pb.camera = PinholeCamera{500.0, 500.0, 320.0, 240.0, 640, 480};
  std::mt19937_64 rng(mix_seed(spec.seed, 0xBA));
  for (int i = 0; i < spec.n_keyframes; ++i) {
    const double frac = spec.n_keyframes > 1 ? static_cast<double>(i) / (spec.n_keyframes - 1) - 0.5 : 0.0;
    const double h = (-90.0 + spec.arc_degrees * frac) * std::numbers::pi / 180.0;
    const Vec3 eye(spec.radius * std::cos(h), spec.radius * std::sin(h), 0.3 * std::sin(3.0 * h));
    pb.poses[i] = look_at(eye, Vec3::Zero());
  }
  std::uniform_real_distribution<double> pos(-spec.point_extent, spec.point_extent);
  const int max_tries = 1000 * spec.n_points;
  int tries = 0;
  for (int j = 0; j < spec.n_points;) {
    if (++tries > max_tries) throw InvalidInput("make_ba_instance: frustum intersection is infeasible");
    const Vec3 p(pos(rng), pos(rng), pos(rng));
    bool ok = true;
    for (const auto& [id, pose] : pb.poses) {
      const auto px = reproject(pose, p, pb.camera);
      if (!px || px->x() < 0 || px->x() >= pb.camera.width || px->y() < 0 || px->y() >= pb.camera.height ||
          pose.transform(p).z() < 0.5) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    pb.points[j++] = p;
  }
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_int_distribution<int> lvl(0, spec.max_level);
  const RobustConfig rc;
  for (const auto& [kf, pose] : pb.poses)
    for (const auto& [pid, p] : pb.points) {
      Observation o;
      o.keyframe = kf;
      o.point = pid;
      o.level = lvl(rng);
      o.pixel = *reproject(pose, p, pb.camera);
      if (spec.noise_sigma > 0.0) {
        const double s = spec.noise_sigma * std::pow(rc.level_factor, o.level);
        o.pixel += s * Vec2(n01(rng), n01(rng));
      }
      pb.observations.push_back(o);
    }
  const std::size_t n_obs = pb.observations.size();
  const auto n_out = static_cast<std::size_t>(std::llround(spec.outlier_fraction * static_cast<double>(n_obs)));
  std::vector<std::size_t> idx(n_obs);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  inst.outlier.assign(n_obs, false);
  std::uniform_real_distribution<double> ang(0.0, 2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double a = ang(rng);
    pb.observations[idx[i]].pixel += spec.outlier_offset * Vec2(std::cos(a), std::sin(a));
    inst.outlier[idx[i]] = true;
  }
  pb.fixed_pose_ids.insert(pb.poses.begin()->first);
  inst.true_poses = pb.poses;
  inst.true_points = pb.points;
  return inst;
}

/// Left-perturbs a pose by `angle` radians about a random axis and moves it
/// by `distance` in a random direction.
inline CameraPose perturb_pose(const CameraPose& p, double angle, double distance, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  const Vec3 axis = Vec3(n01(rng), n01(rng), n01(rng)).normalized();
  const Vec3 dir = Vec3(n01(rng), n01(rng), n01(rng)).normalized();
  CameraPose q;
  q.R = so3_exp(angle * axis) * p.R;
  q.t = p.t + distance * dir;
  return q;
}

}  // namespace segs
