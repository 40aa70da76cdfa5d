#pragma once

// File formats: 8-bit RGB PNG, ASCII PLY point clouds, TUM trajectories.

#include "segs/camera.hpp"
#include "segs/image.hpp"
#include "segs/scene.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace segs {

// ---------------------------------------------------------------------------
// PNG. Saving quantizes each channel to round(clamp(v, 0, 1) * 255).

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void save_png(const std::filesystem::path& path, const Image& img) {
  if (img.width <= 0 || img.height <= 0) throw InvalidInput("save_png: empty image");
  std::vector<std::uint8_t> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize8(img.data[i]);
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, bytes.data(), 0, nullptr))
    throw IoError("save_png: " + path.string() + ": " + pi.message);
}

inline Image load_png(const std::filesystem::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.string().c_str()))
    throw ParseError("load_png: " + path.string() + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw ParseError("load_png: " + path.string() + ": " + pi.message);
  }
  Image img(static_cast<int>(pi.width), static_cast<int>(pi.height), 0.0);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

// ---------------------------------------------------------------------------
// ASCII PLY: vertex x y z, optionally followed by extra per-vertex scalars.

inline void save_ply(const std::filesystem::path& path, const std::vector<Vec3>& points,
                     const std::vector<std::string>& extra_names = {},
                     const std::vector<std::vector<double>>& extra = {}) {
  if (!extra.empty() && extra.size() != points.size()) throw InvalidInput("save_ply: extra attribute count mismatch");
  std::ofstream out(path);
  if (!out) throw IoError("save_ply: cannot open " + path.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << points.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  for (const auto& n : extra_names) out << "property double " << n << "\n";
  out << "end_header\n";
  char buf[64];
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", points[i][c]);
      out << (c ? " " : "") << buf;
    }
    if (!extra.empty())
      for (double v : extra[i]) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << " " << buf;
      }
    out << "\n";
  }
  if (!out) throw IoError("save_ply: write failed for " + path.string());
}

inline void save_ply(const std::filesystem::path& path, const PointCloud& cloud) { save_ply(path, cloud.points); }

inline PointCloud load_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_ply: cannot open " + path.string());
  auto fail = [&](int line, const std::string& what) {
    throw ParseError("load_ply: " + path.string() + ":" + std::to_string(line) + ": " + what);
  };
  std::string line;
  int lineno = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next() || line != "ply") fail(lineno, "missing 'ply' magic");
  long long count = -1;
  std::vector<std::string> props;
  bool in_vertex = false;
  for (;;) {
    if (!next()) fail(lineno, "unexpected end of header");
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "end_header") break;
    if (word == "comment" || word == "obj_info" || word.empty()) continue;
    if (word == "format") {
      std::string fmt;
      ss >> fmt;
      if (fmt != "ascii") fail(lineno, "only ascii PLY is supported");
    } else if (word == "element") {
      std::string name;
      long long n = -1;
      ss >> name >> n;
      if (!ss || n < 0) fail(lineno, "malformed element line");
      in_vertex = name == "vertex";
      if (in_vertex) count = n;
      else if (n > 0) fail(lineno, "unsupported element '" + name + "'");
    } else if (word == "property") {
      std::string type, name;
      ss >> type >> name;
      if (type == "list") fail(lineno, "list properties are not supported");
      if (in_vertex) props.push_back(name);
    } else {
      fail(lineno, "unknown header keyword '" + word + "'");
    }
  }
  if (count < 0) fail(lineno, "no vertex element");
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t i = 0; i < props.size(); ++i) {
    if (props[i] == "x") ix = static_cast<int>(i);
    if (props[i] == "y") iy = static_cast<int>(i);
    if (props[i] == "z") iz = static_cast<int>(i);
  }
  if (count > 0 && (ix < 0 || iy < 0 || iz < 0)) fail(lineno, "vertex element lacks x/y/z");
  PointCloud cloud;
  cloud.points.reserve(static_cast<std::size_t>(count));
  std::vector<double> vals(props.size());
  for (long long v = 0; v < count; ++v) {
    if (!next()) fail(lineno, "expected " + std::to_string(count) + " vertices, got " + std::to_string(v));
    std::istringstream ss(line);
    for (auto& x : vals)
      if (!(ss >> x)) fail(lineno, "malformed vertex");
    cloud.points.emplace_back(vals[ix], vals[iy], vals[iz]);
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// TUM trajectories: "timestamp tx ty tz qx qy qz qw" per line, camera to
// world (position of the camera center and its orientation).

struct TumRecord {
  double timestamp = 0.0;
  Vec3 translation = Vec3::Zero();
  Vec4 quat = Vec4(1, 0, 0, 0);  // w, x, y, z
};

inline TumRecord to_tum(double timestamp, const CameraPose& world_to_camera) {
  TumRecord r;
  r.timestamp = timestamp;
  r.translation = world_to_camera.center();
  r.quat = rotation_to_quat(world_to_camera.R.transpose());
  return r;
}

inline CameraPose from_tum(const TumRecord& r) {
  CameraPose p;
  p.R = quat_to_rotation(r.quat).transpose();
  p.t = -p.R * r.translation;
  return p;
}

inline void save_tum(const std::filesystem::path& path, const std::vector<TumRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("save_tum: cannot open " + path.string());
  char buf[512];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g %.17g %.17g %.17g\n", r.timestamp,
                  r.translation.x(), r.translation.y(), r.translation.z(), r.quat[1], r.quat[2], r.quat[3],
                  r.quat[0]);
    out << buf;
  }
  if (!out) throw IoError("save_tum: write failed for " + path.string());
}

inline void save_tum(const std::filesystem::path& path, const std::vector<CameraPose>& poses) {
  std::vector<TumRecord> rs;
  for (std::size_t i = 0; i < poses.size(); ++i) rs.push_back(to_tum(static_cast<double>(i), poses[i]));
  save_tum(path, rs);
}

inline TumRecord parse_tum_line(const std::string& line, const std::string& where) {
  std::istringstream ss(line);
  TumRecord r;
  double qx, qy, qz, qw;
  if (!(ss >> r.timestamp >> r.translation.x() >> r.translation.y() >> r.translation.z() >> qx >> qy >> qz >> qw))
    throw ParseError(where + ": expected 8 numbers 'timestamp tx ty tz qx qy qz qw'");
  std::string rest;
  if (ss >> rest) throw ParseError(where + ": trailing data '" + rest + "'");
  r.quat = Vec4(qw, qx, qy, qz);
  if (!r.translation.allFinite() || !r.quat.allFinite() || !std::isfinite(r.timestamp))
    throw ParseError(where + ": non-finite value");
  if (!(r.quat.norm() > 1e-12)) throw ParseError(where + ": zero quaternion");
  return r;
}

inline std::vector<TumRecord> load_tum(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_tum: cannot open " + path.string());
  std::vector<TumRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    out.push_back(parse_tum_line(line, path.string() + ":" + std::to_string(lineno)));
  }
  return out;
}

inline std::vector<CameraPose> load_tum_poses(const std::filesystem::path& path) {
  std::vector<CameraPose> poses;
  for (const auto& r : load_tum(path)) poses.push_back(from_tum(r));
  return poses;
}

}  // namespace segs
