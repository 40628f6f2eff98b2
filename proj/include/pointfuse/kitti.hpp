#pragma once

// Bit-exact KITTI-format readers and writers (calibration text, velodyne
// float32 binaries, label text, PPM images), projection-matrix composition,
// and the scene preprocessing steps (range crop, fixed-size subsample).

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pointfuse/autodiff.hpp"
#include "pointfuse/error.hpp"
#include "pointfuse/geometry.hpp"
#include "pointfuse/rng.hpp"

namespace pf {

// ---------------------------------------------------------------------------
// numeric text helpers (shortest round-trip formatting)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

inline double parse_double(std::string_view s, const char* what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw ParseError(std::string(what) + ": bad numeric field '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream iss(line);
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// calibration
// ---------------------------------------------------------------------------

struct CalibrationSet {
  std::array<double, 12> p2{};              // 3x4
  std::array<double, 9> r0_rect{};          // 3x3
  std::array<double, 12> tr_velo_to_cam{};  // 3x4

  static CalibrationSet identity() {
    CalibrationSet c;
    c.p2[0] = c.p2[5] = c.p2[10] = 1.0;
    c.r0_rect[0] = c.r0_rect[4] = c.r0_rect[8] = 1.0;
    c.tr_velo_to_cam[0] = c.tr_velo_to_cam[5] = c.tr_velo_to_cam[10] = 1.0;
    return c;
  }
};

/// Parses "KEY: v1 v2 ..." lines; requires P2 (12), R0_rect (9) and
/// Tr_velo_to_cam (12), ignores any other key.
inline CalibrationSet parse_calib(const std::string& text) {
  CalibrationSet calib;
  bool have_p2 = false, have_r0 = false, have_tr = false;
  std::istringstream stream(text);
  std::string line;
  while (std::getline(stream, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    const auto fields = detail::split_ws(line.substr(colon + 1));
    auto fill = [&](auto& dst, std::size_t want) {
      if (fields.size() != want)
        throw ParseError(key + ": expected " + std::to_string(want) + " values, got " +
                         std::to_string(fields.size()));
      for (std::size_t i = 0; i < want; ++i)
        dst[i] = detail::parse_double(fields[i], key.c_str());
    };
    if (key == "P2") {
      fill(calib.p2, 12);
      have_p2 = true;
    } else if (key == "R0_rect") {
      fill(calib.r0_rect, 9);
      have_r0 = true;
    } else if (key == "Tr_velo_to_cam") {
      fill(calib.tr_velo_to_cam, 12);
      have_tr = true;
    }
  }
  if (!have_p2) throw ParseError("P2: expected 12 values, key missing");
  if (!have_r0) throw ParseError("R0_rect: expected 9 values, key missing");
  if (!have_tr) throw ParseError("Tr_velo_to_cam: expected 12 values, key missing");
  return calib;
}

inline std::string serialize_calib(const CalibrationSet& c) {
  auto row = [](const char* key, const auto& values) {
    std::string line = key;
    line += ":";
    for (double v : values) {
      line += " ";
      line += detail::format_double(v);
    }
    return line + "\n";
  };
  return row("P2", c.p2) + row("R0_rect", c.r0_rect) + row("Tr_velo_to_cam", c.tr_velo_to_cam);
}

/// M = P2 * expand4(R0_rect) * expand4(Tr_velo_to_cam); maps velodyne-frame
/// points to pixels.
inline ProjectionMatrix compose_projection(const CalibrationSet& c) {
  // expand4 embeds a 3x3 (top-left) or 3x4 (top rows) into homogeneous 4x4.
  std::array<double, 16> r4{}, t4{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r4[static_cast<std::size_t>(i * 4 + j)] = c.r0_rect[static_cast<std::size_t>(i * 3 + j)];
  r4[15] = 1.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) t4[static_cast<std::size_t>(i * 4 + j)] = c.tr_velo_to_cam[static_cast<std::size_t>(i * 4 + j)];
  t4[15] = 1.0;

  std::array<double, 16> rt{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k)
        acc += r4[static_cast<std::size_t>(i * 4 + k)] * t4[static_cast<std::size_t>(k * 4 + j)];
      rt[static_cast<std::size_t>(i * 4 + j)] = acc;
    }
  ProjectionMatrix m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k)
        acc += c.p2[static_cast<std::size_t>(i * 4 + k)] * rt[static_cast<std::size_t>(k * 4 + j)];
      m.at(i, j) = acc;
    }
  return m;
}

/// Transforms velodyne-frame points into rectified camera coordinates
/// (R0_rect * Tr_velo_to_cam applied homogeneously).
inline std::vector<std::array<double, 3>> velo_to_camera(
    const CalibrationSet& c, const std::vector<std::array<double, 3>>& pts) {
  std::vector<std::array<double, 3>> out(pts.size());
  for (std::size_t n = 0; n < pts.size(); ++n) {
    std::array<double, 3> t{};
    for (int i = 0; i < 3; ++i)
      t[static_cast<std::size_t>(i)] = c.tr_velo_to_cam[static_cast<std::size_t>(i * 4 + 0)] * pts[n][0] +
             c.tr_velo_to_cam[static_cast<std::size_t>(i * 4 + 1)] * pts[n][1] +
             c.tr_velo_to_cam[static_cast<std::size_t>(i * 4 + 2)] * pts[n][2] +
             c.tr_velo_to_cam[static_cast<std::size_t>(i * 4 + 3)];
    for (int i = 0; i < 3; ++i)
      out[n][static_cast<std::size_t>(i)] = c.r0_rect[static_cast<std::size_t>(i * 3 + 0)] * t[0] +
                                            c.r0_rect[static_cast<std::size_t>(i * 3 + 1)] * t[1] +
                                            c.r0_rect[static_cast<std::size_t>(i * 3 + 2)] * t[2];
  }
  return out;
}

// ---------------------------------------------------------------------------
// velodyne binary
// ---------------------------------------------------------------------------

/// Points as (x, y, z, reflectance) float32 records, little endian.
inline std::vector<std::array<float, 4>> parse_velodyne(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % 16 != 0)
    throw ParseError("velodyne: byte count " + std::to_string(bytes.size()) +
                     " is not a multiple of 16");
  std::vector<std::array<float, 4>> out(bytes.size() / 16);
  static_assert(sizeof(float) == 4);
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

inline std::vector<std::uint8_t> serialize_velodyne(const std::vector<std::array<float, 4>>& pts) {
  std::vector<std::uint8_t> bytes(pts.size() * 16);
  if (!pts.empty()) std::memcpy(bytes.data(), pts.data(), bytes.size());
  return bytes;
}

// ---------------------------------------------------------------------------
// labels
// ---------------------------------------------------------------------------

struct LabelEntry {
  std::string type;
  double truncated = 0.0;
  int occluded = 0;
  double alpha = 0.0;
  std::array<double, 4> bbox{};  // 2D box, carried but unused downstream
  double h = 0.0, w = 0.0, l = 0.0;
  double x = 0.0, y = 0.0, z = 0.0;  // camera coords, bottom center
  double yaw = 0.0;                  // rotation_y

  bool dont_care() const { return type == "DontCare"; }

  Box3D box() const { return Box3D(x, y, z, h, w, l, yaw); }
};

/// 15 whitespace-separated fields per line:
/// type truncated occluded alpha bbox(4) h w l x y z rotation_y
inline std::vector<LabelEntry> parse_labels(const std::string& text) {
  std::vector<LabelEntry> out;
  std::istringstream stream(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(stream, line)) {
    ++line_no;
    const auto f = detail::split_ws(line);
    if (f.empty()) continue;
    if (f.size() < 15)
      throw ParseError("label line " + std::to_string(line_no) + ": expected >= 15 fields, got " +
                       std::to_string(f.size()));
    LabelEntry e;
    e.type = f[0];
    const char* what = "label";
    e.truncated = detail::parse_double(f[1], what);
    e.occluded = static_cast<int>(detail::parse_double(f[2], what));
    e.alpha = detail::parse_double(f[3], what);
    for (int i = 0; i < 4; ++i)
      e.bbox[static_cast<std::size_t>(i)] = detail::parse_double(f[static_cast<std::size_t>(4 + i)], what);
    e.h = detail::parse_double(f[8], what);
    e.w = detail::parse_double(f[9], what);
    e.l = detail::parse_double(f[10], what);
    e.x = detail::parse_double(f[11], what);
    e.y = detail::parse_double(f[12], what);
    e.z = detail::parse_double(f[13], what);
    e.yaw = detail::parse_double(f[14], what);
    if (!e.dont_care() && (e.h <= 0.0 || e.w <= 0.0 || e.l <= 0.0))
      throw ParseError("label line " + std::to_string(line_no) +
                       ": non-positive dimensions for class " + e.type);
    out.push_back(std::move(e));
  }
  return out;
}

inline std::string serialize_labels(const std::vector<LabelEntry>& labels) {
  std::string out;
  for (const auto& e : labels) {
    out += e.type;
    const double fields[] = {e.truncated, static_cast<double>(e.occluded), e.alpha,
                             e.bbox[0],  e.bbox[1], e.bbox[2], e.bbox[3],
                             e.h,        e.w,       e.l,
                             e.x,        e.y,       e.z,       e.yaw};
    for (double v : fields) {
      out += " ";
      out += detail::format_double(v);
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPM (P6) image IO
// ---------------------------------------------------------------------------

/// Writes a [3 x H x W] tensor with values on the 1/255 grid as binary PPM.
inline std::vector<std::uint8_t> serialize_ppm(const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw ContractError("serialize_ppm: image must be 3xHxW");
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + 3 * h * w);
  const auto& d = image.data();
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(d[c * h * w + i], 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  return out;
}

inline Tensor parse_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {  // comment to end of line
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    return t;
  };
  if (token() != "P6") throw ParseError("ppm: missing P6 magic");
  const auto wtok = token(), htok = token(), mtok = token();
  if (wtok.empty() || htok.empty() || mtok != "255")
    throw ParseError("ppm: bad header (expect width height 255)");
  const auto w = static_cast<std::size_t>(detail::parse_double(wtok, "ppm"));
  const auto h = static_cast<std::size_t>(detail::parse_double(htok, "ppm"));
  ++pos;  // single whitespace after maxval
  if (bytes.size() - pos < 3 * w * h) throw ParseError("ppm: truncated pixel data");
  std::vector<double> data(3 * h * w);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      data[c * h * w + i] = static_cast<double>(bytes[pos + i * 3 + c]) / 255.0;
  return Tensor({3, h, w}, std::move(data));
}

// ---------------------------------------------------------------------------
// Scene and preprocessing
// ---------------------------------------------------------------------------

/// Axis-aligned keep-range for points, camera coordinates.
struct RangeBox {
  double x_min = -40.0, x_max = 40.0;
  double y_min = -1.0, y_max = 3.0;
  double z_min = 0.0, z_max = 70.4;

  bool contains(const std::array<double, 3>& p) const {
    return p[0] >= x_min && p[0] <= x_max && p[1] >= y_min && p[1] <= y_max && p[2] >= z_min &&
           p[2] <= z_max;
  }
};

struct SceneBox {
  Box3D box;
  int class_id = 0;
};

/// One sample: camera-frame points, a color image, the projection that
/// maps those points onto the image, and ground-truth boxes.
struct Scene {
  int id = 0;
  std::vector<std::array<double, 3>> points;   // camera coordinates
  std::vector<double> reflectance;             // parsed but unused downstream
  Tensor image;                                // 3 x H x W in [0, 1]
  ProjectionMatrix proj;                       // camera frame -> pixels
  std::optional<CalibrationSet> calib;
  std::vector<SceneBox> gt_boxes;
};

/// Keeps points inside the closed range box, order preserved.
inline std::vector<std::array<double, 3>> crop_to_range(
    const std::vector<std::array<double, 3>>& points, const RangeBox& range) {
  std::vector<std::array<double, 3>> out;
  out.reserve(points.size());
  for (const auto& p : points)
    if (range.contains(p)) out.push_back(p);
  return out;
}

/// Uniform subsample without replacement when N >= n; when N < n the cloud
/// is padded by sampling with replacement. Deterministic per seed.
inline std::vector<std::array<double, 3>> subsample_points(
    const std::vector<std::array<double, 3>>& points, std::size_t n, std::uint64_t seed) {
  if (points.empty()) throw InputError("subsample_points: empty point cloud");
  if (n < 1) throw ContractError("subsample_points: n must be >= 1");
  Rng rng(seed);
  std::vector<std::array<double, 3>> out;
  out.reserve(n);
  if (points.size() >= n) {
    for (std::size_t idx : rng.sample_without_replacement(points.size(), n))
      out.push_back(points[idx]);
  } else {
    out = points;
    while (out.size() < n) out.push_back(points[rng.uniform_index(points.size())]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// KITTI-layout directory IO
// ---------------------------------------------------------------------------

namespace detail {

inline std::string frame_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", id);
  return buf;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ParseError("cannot open " + p.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

inline std::string read_file_text(const std::filesystem::path& p) {
  const auto bytes = read_file_bytes(p);
  return std::string(bytes.begin(), bytes.end());
}

inline void write_file_bytes(const std::filesystem::path& p,
                             const std::vector<std::uint8_t>& bytes) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline void write_file_text(const std::filesystem::path& p, const std::string& text) {
  write_file_bytes(p, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace detail

/// Default single-class mapping used by the synthetic scenes.
inline int class_id_for(const std::string& type) { return type == "Car" ? 0 : -1; }

/// Writes a scene into a KITTI-layout directory (calib/, velodyne/,
/// label_2/, image_2/ with PPM images). Points are written in the frame the
/// stored calibration expects; for synthetic scenes that frame equals the
/// camera frame (identity R0/Tr).
inline void write_scene_dir(const std::filesystem::path& root, const Scene& scene,
                            const std::vector<LabelEntry>& labels) {
  const std::string name = detail::frame_name(scene.id);
  CalibrationSet calib = scene.calib ? *scene.calib : CalibrationSet::identity();
  if (!scene.calib)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) calib.p2[static_cast<std::size_t>(i * 4 + j)] = scene.proj.at(i, j);
  detail::write_file_text(root / "calib" / (name + ".txt"), serialize_calib(calib));
  std::vector<std::array<float, 4>> velo(scene.points.size());
  for (std::size_t i = 0; i < scene.points.size(); ++i) {
    velo[i] = {static_cast<float>(scene.points[i][0]), static_cast<float>(scene.points[i][1]),
               static_cast<float>(scene.points[i][2]),
               i < scene.reflectance.size() ? static_cast<float>(scene.reflectance[i]) : 0.0f};
  }
  detail::write_file_bytes(root / "velodyne" / (name + ".bin"), serialize_velodyne(velo));
  detail::write_file_text(root / "label_2" / (name + ".txt"), serialize_labels(labels));
  detail::write_file_bytes(root / "image_2" / (name + ".ppm"), serialize_ppm(scene.image));
}

/// Loads one frame from a KITTI-layout directory back into a Scene.
inline Scene read_scene_dir(const std::filesystem::path& root, int id) {
  const std::string name = detail::frame_name(id);
  Scene scene;
  scene.id = id;
  scene.calib = parse_calib(detail::read_file_text(root / "calib" / (name + ".txt")));
  const auto velo = parse_velodyne(detail::read_file_bytes(root / "velodyne" / (name + ".bin")));
  std::vector<std::array<double, 3>> velo_pts(velo.size());
  scene.reflectance.resize(velo.size());
  for (std::size_t i = 0; i < velo.size(); ++i) {
    velo_pts[i] = {static_cast<double>(velo[i][0]), static_cast<double>(velo[i][1]),
                   static_cast<double>(velo[i][2])};
    scene.reflectance[i] = static_cast<double>(velo[i][3]);
  }
  scene.points = velo_to_camera(*scene.calib, velo_pts);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      scene.proj.at(i, j) = scene.calib->p2[static_cast<std::size_t>(i * 4 + j)];
  const auto labels = parse_labels(detail::read_file_text(root / "label_2" / (name + ".txt")));
  for (const auto& e : labels)
    if (!e.dont_care()) scene.gt_boxes.push_back({e.box(), class_id_for(e.type)});
  scene.image = parse_ppm(detail::read_file_bytes(root / "image_2" / (name + ".ppm")));
  return scene;
}

}  // namespace pf
