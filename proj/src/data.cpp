#include <nvs/data.hpp>
#include <nvs/errors.hpp>
#include <nvs/ops.hpp>

#include <png.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace nvs {

namespace fs = std::filesystem;
using nlohmann::json;

Image Image::filled(long height, long width, const Vec3<double>& color) {
  Image img;
  img.height = height;
  img.width = width;
  img.data.resize(3 * height * width);
  for (long c = 0; c < 3; ++c) img.data.segment(c * height * width, height * width).setConstant(color(c));
  return img;
}

template <typename S>
Image Image::from_var(const Var<S>& v) {
  if (v.rank() != 3 || v.dim(0) != 3) throw ArgumentError("image must be [3, H, W], got " + shape_string(v.shape()));
  Image img;
  img.height = v.dim(1);
  img.width = v.dim(2);
  img.data = v.value().template cast<double>();
  return img;
}

template Image Image::from_var<float>(const Var<float>&);
template Image Image::from_var<double>(const Var<double>&);

Image read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw ArgumentError("cannot read PNG " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&png);
    throw ArgumentError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  Image img;
  img.height = png.height;
  img.width = png.width;
  img.data.resize(3 * img.height * img.width);
  for (long r = 0; r < img.height; ++r)
    for (long c = 0; c < img.width; ++c)
      for (long ch = 0; ch < 3; ++ch) img.at(ch, r, c) = buffer[static_cast<std::size_t>((r * img.width + c) * 3 + ch)] / 255.0;
  return img;
}

void write_png(const fs::path& path, const Image& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.format = PNG_FORMAT_RGB;
  png.height = static_cast<png_uint_32>(image.height);
  png.width = static_cast<png_uint_32>(image.width);
  std::vector<png_byte> buffer(static_cast<std::size_t>(image.height * image.width * 3));
  for (long r = 0; r < image.height; ++r)
    for (long c = 0; c < image.width; ++c)
      for (long ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(image.at(ch, r, c), 0.0, 1.0);
        buffer[static_cast<std::size_t>((r * image.width + c) * 3 + ch)] = static_cast<png_byte>(std::lround(v * 255));
      }
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw ArgumentError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

std::pair<long, long> png_size(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw ArgumentError("cannot read PNG " + path.string() + ": " + png.message);
  }
  const std::pair<long, long> size{png.height, png.width};
  png_image_free(&png);
  return size;
}

std::string to_string(Split split) { return split == Split::train ? "train" : "dev"; }

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_of(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

json parse_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), line_of(text, e.byte > 0 ? e.byte - 1 : 0), e.what());
  }
}

std::vector<double> numbers(const json& j, const char* key, std::size_t count) {
  if (!j.contains(key)) throw ArgumentError(std::string("missing field '") + key + "'");
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != count) {
    throw ArgumentError(std::string("field '") + key + "' must be " + std::to_string(count) + " numbers");
  }
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) throw ArgumentError(std::string("field '") + key + "' has a non-numeric entry");
    out.push_back(x.get<double>());
  }
  return out;
}

double number(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number()) throw ArgumentError(std::string("missing numeric field '") + key + "'");
  return j.at(key).get<double>();
}

FrameRecord parse_frame(const json& row, const fs::path& scene_dir) {
  if (!row.is_object()) throw ArgumentError("frame entry is not an object");
  if (!row.contains("file") || !row.at("file").is_string()) throw ArgumentError("missing field 'file'");
  FrameRecord frame;
  frame.image = scene_dir / "images" / row.at("file").get<std::string>();
  const auto r = numbers(row, "R", 9);
  const auto t = numbers(row, "t", 3);
  auto& pose = frame.pose;
  for (int i = 0; i < 9; ++i) pose.rotation(i / 3, i % 3) = r[static_cast<std::size_t>(i)];
  pose.translation = Vec3<double>(t[0], t[1], t[2]);
  pose.focal = Vec2<double>(number(row, "fx"), number(row, "fy"));
  pose.principal_point = Vec2<double>(number(row, "cx"), number(row, "cy"));
  if (!fs::exists(frame.image)) throw ArgumentError("image " + frame.image.string() + " not found");
  std::tie(pose.height, pose.width) = png_size(frame.image);
  pose.validate(1e-4);
  return frame;
}

void warn(std::vector<std::string>* sink, const std::string& message) {
  spdlog::warn("{}", message);
  if (sink) sink->push_back(message);
}

std::vector<fs::path> sorted_dirs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory()) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::vector<SceneRecord> ingest(const fs::path& root, std::vector<std::string>* warnings) {
  if (!fs::is_directory(root)) throw ConfigError("dataset root " + root.string() + " is not a directory");
  std::vector<SceneRecord> scenes;
  for (const auto& class_dir : sorted_dirs(root)) {
    for (const auto& scene_dir : sorted_dirs(class_dir)) {
      const fs::path manifest = scene_dir / "frames.json";
      if (!fs::exists(manifest)) continue;
      const json doc = parse_json_file(manifest);
      SceneRecord scene;
      scene.scene_id = scene_dir.filename().string();
      scene.class_name = class_dir.filename().string();
      const json* rows = &doc;
      if (doc.is_object()) {
        if (doc.contains("split")) {
          const auto split = doc.at("split").get<std::string>();
          if (split != "train" && split != "dev") throw ParseError(manifest.string(), 1, "unknown split '" + split + "'");
          scene.split = split == "train" ? Split::train : Split::dev;
        }
        if (!doc.contains("frames")) throw ParseError(manifest.string(), 1, "missing 'frames'");
        rows = &doc.at("frames");
      }
      if (!rows->is_array()) throw ParseError(manifest.string(), 1, "'frames' must be a list");
      for (std::size_t i = 0; i < rows->size(); ++i) {
        try {
          FrameRecord frame = parse_frame((*rows)[i], scene_dir);
          if (!scene.frames.empty() && (frame.pose.height != scene.frames.front().pose.height ||
                                        frame.pose.width != scene.frames.front().pose.width)) {
            throw ArgumentError("image resolution differs from the scene's first frame");
          }
          scene.frames.push_back(std::move(frame));
        } catch (const std::exception& e) {
          warn(warnings, manifest.string() + ": frame " + std::to_string(i) + " dropped: " + e.what());
        }
      }
      if (scene.frames.size() < 2) {
        warn(warnings, scene.class_name + "/" + scene.scene_id + " rejected: " + std::to_string(scene.frames.size()) +
                           " usable frame(s), need 2");
        continue;
      }
      scenes.push_back(std::move(scene));
    }
  }
  return scenes;
}

CameraPose<double> rescale_pose(const CameraPose<double>& pose, long height, long width) {
  CameraPose<double> out = pose;
  const double sy = static_cast<double>(height) / static_cast<double>(pose.height);
  const double sx = static_cast<double>(width) / static_cast<double>(pose.width);
  out.focal = Vec2<double>(pose.focal.x() * sx, pose.focal.y() * sy);
  out.principal_point = Vec2<double>((pose.principal_point.x() + 0.5) * sx - 0.5, (pose.principal_point.y() + 0.5) * sy - 0.5);
  out.height = height;
  out.width = width;
  return out;
}

namespace {

// Area-consistent resampling: box average for integer factors, half-pixel bilinear otherwise.
Image resample(const Image& img, long height, long width) {
  if (img.height == height && img.width == width) return img;
  Image out = Image::filled(height, width, Vec3<double>::Zero());
  if (img.height % height == 0 && img.width % width == 0) {
    const long fy = img.height / height, fx = img.width / width;
    for (long ch = 0; ch < 3; ++ch)
      for (long r = 0; r < height; ++r)
        for (long c = 0; c < width; ++c) {
          double acc = 0;
          for (long i = 0; i < fy; ++i)
            for (long j = 0; j < fx; ++j) acc += img.at(ch, r * fy + i, c * fx + j);
          out.at(ch, r, c) = acc / static_cast<double>(fy * fx);
        }
    return out;
  }
  const double sy = static_cast<double>(img.height) / height, sx = static_cast<double>(img.width) / width;
  for (long r = 0; r < height; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const long y0 = static_cast<long>(y), y1 = std::min(y0 + 1, img.height - 1);
    const double wy = y - y0;
    for (long c = 0; c < width; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const long x0 = static_cast<long>(x), x1 = std::min(x0 + 1, img.width - 1);
      const double wx = x - x0;
      for (long ch = 0; ch < 3; ++ch) {
        out.at(ch, r, c) = (1 - wy) * ((1 - wx) * img.at(ch, y0, x0) + wx * img.at(ch, y0, x1)) +
                           wy * ((1 - wx) * img.at(ch, y1, x0) + wx * img.at(ch, y1, x1));
      }
    }
  }
  return out;
}

}  // namespace

template <typename S>
SceneData<S> load_scene(const SceneRecord& record, long size) {
  SceneData<S> scene;
  scene.scene_id = record.scene_id;
  scene.class_name = record.class_name;
  for (const auto& frame : record.frames) {
    Image img = read_png(frame.image);
    CameraPose<double> pose = frame.pose;
    if (size > 0) {
      img = resample(img, size, size);
      pose = rescale_pose(pose, size, size);
    }
    scene.images.push_back(img.to_var<S>());
    scene.poses.push_back(pose);
  }
  return scene;
}

template SceneData<float> load_scene<float>(const SceneRecord&, long);
template SceneData<double> load_scene<double>(const SceneRecord&, long);

void SyntheticSceneSpec::validate() const {
  for (const auto& p : primitives) {
    if (!(p.size.minCoeff() > 0)) throw ConfigError("synthetic primitive size must be positive");
    if (!p.center.allFinite() || !p.albedo.allFinite()) throw ConfigError("synthetic primitive is not finite");
  }
  if (ring.count < 2) throw ConfigError("camera ring needs at least 2 cameras");
  if (!(ring.radius > 0) || !(ring.focal > 0) || ring.resolution < 1) throw ConfigError("invalid camera ring");
  if (scene_id.empty() || class_name.empty()) throw ConfigError("synthetic scene needs a class name and scene id");
}

namespace {

void check_keys(const json& j, const std::set<std::string>& valid, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!valid.count(key)) {
      std::string list;
      for (const auto& k : valid) list += (list.empty() ? "" : ", ") + k;
      throw ConfigError("unknown key '" + key + "' in " + where + " (valid: " + list + ")");
    }
  }
}

Vec3<double> vec3(const json& j) {
  if (j.is_number()) return Vec3<double>::Constant(j.get<double>());
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a number or 3 numbers");
  return Vec3<double>(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json to_array(const Vec3<double>& v) { return json::array({v.x(), v.y(), v.z()}); }

}  // namespace

SyntheticSceneSpec parse_synthetic_spec(const json& j) {
  check_keys(j, {"class_name", "scene_id", "primitives", "background", "ring"}, "synthetic spec");
  SyntheticSceneSpec spec;
  if (j.contains("class_name")) spec.class_name = j.at("class_name").get<std::string>();
  if (j.contains("scene_id")) spec.scene_id = j.at("scene_id").get<std::string>();
  if (j.contains("background")) spec.background = vec3(j.at("background"));
  if (j.contains("ring")) {
    const json& r = j.at("ring");
    check_keys(r, {"count", "radius", "elevation", "focal", "resolution", "target"}, "ring");
    if (r.contains("count")) spec.ring.count = r.at("count").get<int>();
    if (r.contains("radius")) spec.ring.radius = r.at("radius").get<double>();
    if (r.contains("elevation")) spec.ring.elevation = r.at("elevation").get<double>();
    if (r.contains("focal")) spec.ring.focal = r.at("focal").get<double>();
    if (r.contains("resolution")) spec.ring.resolution = r.at("resolution").get<long>();
    if (r.contains("target")) spec.ring.target = vec3(r.at("target"));
  }
  if (j.contains("primitives")) {
    for (const auto& p : j.at("primitives")) {
      check_keys(p, {"shape", "center", "size", "albedo"}, "primitive");
      Primitive prim;
      const auto shape = p.value("shape", std::string("sphere"));
      if (shape == "sphere") {
        prim.shape = PrimitiveShape::sphere;
      } else if (shape == "box") {
        prim.shape = PrimitiveShape::box;
      } else {
        throw ConfigError("unknown primitive shape '" + shape + "' (valid: sphere, box)");
      }
      if (p.contains("center")) prim.center = vec3(p.at("center"));
      if (p.contains("size")) prim.size = vec3(p.at("size"));
      if (p.contains("albedo")) prim.albedo = vec3(p.at("albedo"));
      spec.primitives.push_back(prim);
    }
  }
  spec.validate();
  return spec;
}

json to_json(const SyntheticSceneSpec& spec) {
  json prims = json::array();
  for (const auto& p : spec.primitives) {
    prims.push_back({{"shape", p.shape == PrimitiveShape::sphere ? "sphere" : "box"},
                     {"center", to_array(p.center)},
                     {"size", to_array(p.size)},
                     {"albedo", to_array(p.albedo)}});
  }
  return {{"class_name", spec.class_name},
          {"scene_id", spec.scene_id},
          {"background", to_array(spec.background)},
          {"primitives", prims},
          {"ring",
           {{"count", spec.ring.count},
            {"radius", spec.ring.radius},
            {"elevation", spec.ring.elevation},
            {"focal", spec.ring.focal},
            {"resolution", spec.ring.resolution},
            {"target", to_array(spec.ring.target)}}}};
}

std::vector<CameraPose<double>> ring_poses(const CameraRing& ring) {
  std::vector<CameraPose<double>> poses;
  for (int i = 0; i < ring.count; ++i) {
    const double a = 2 * std::numbers::pi * i / ring.count;
    const Vec3<double> eye = ring.target + Vec3<double>(ring.radius * std::cos(a), ring.elevation, ring.radius * std::sin(a));
    poses.push_back(CameraPose<double>::look_at(eye, ring.target, {0, 1, 0}, ring.focal, ring.resolution, ring.resolution));
  }
  return poses;
}

Hit intersect(const SyntheticSceneSpec& spec, const Vec3<double>& origin, const Vec3<double>& direction) {
  constexpr double eps = 1e-9;
  Hit best;
  best.depth = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < spec.primitives.size(); ++i) {
    const auto& p = spec.primitives[i];
    double t = -1;
    if (p.shape == PrimitiveShape::sphere) {
      const Vec3<double> oc = origin - p.center;
      const double a = direction.squaredNorm(), b = oc.dot(direction), c = oc.squaredNorm() - p.size.x() * p.size.x();
      const double disc = b * b - a * c;
      if (disc < 0) continue;
      const double root = std::sqrt(disc);
      t = (-b - root) / a;
      if (t <= eps) t = (-b + root) / a;
    } else {
      double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
      bool miss = false;
      for (int k = 0; k < 3 && !miss; ++k) {
        const double lo = p.center(k) - p.size(k), hi = p.center(k) + p.size(k);
        if (direction(k) == 0) {
          miss = origin(k) < lo || origin(k) > hi;
          continue;
        }
        double a = (lo - origin(k)) / direction(k), b = (hi - origin(k)) / direction(k);
        if (a > b) std::swap(a, b);
        t0 = std::max(t0, a);
        t1 = std::min(t1, b);
      }
      if (miss || t0 > t1) continue;
      t = t0 > eps ? t0 : t1;
    }
    if (t > eps && t < best.depth) best = {static_cast<int>(i), t};
  }
  if (best.primitive < 0) best.depth = 0;
  return best;
}

Image render_synthetic(const SyntheticSceneSpec& spec, const CameraPose<double>& pose) {
  Image img = Image::filled(pose.height, pose.width, spec.background);
  const Vec3<double> origin = pose.center();
  for (long r = 0; r < pose.height; ++r) {
    for (long c = 0; c < pose.width; ++c) {
      const Vec3<double> dir = pose.rotation.transpose() * pose.camera_direction({static_cast<double>(r), static_cast<double>(c)});
      const Hit hit = intersect(spec, origin, dir);
      if (hit.primitive < 0) continue;
      const auto& albedo = spec.primitives[static_cast<std::size_t>(hit.primitive)].albedo;
      for (long ch = 0; ch < 3; ++ch) img.at(ch, r, c) = albedo(ch);
    }
  }
  return img;
}

Image render_synthetic(const SyntheticSceneSpec& spec, const CameraPose<double>& pose, long resolution) {
  return render_synthetic(spec, rescale_pose(pose, resolution, resolution));
}

void write_frames_json(const fs::path& path, const std::vector<FrameRecord>& frames, Split split) {
  json rows = json::array();
  for (const auto& f : frames) {
    json r = json::array(), t = json::array();
    for (int i = 0; i < 9; ++i) r.push_back(f.pose.rotation(i / 3, i % 3));
    for (int i = 0; i < 3; ++i) t.push_back(f.pose.translation(i));
    rows.push_back({{"file", f.image.filename().string()},
                    {"R", r},
                    {"t", t},
                    {"fx", f.pose.focal.x()},
                    {"fy", f.pose.focal.y()},
                    {"cx", f.pose.principal_point.x()},
                    {"cy", f.pose.principal_point.y()}});
  }
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write " + path.string());
  out << json{{"split", to_string(split)}, {"frames", rows}}.dump(2) << "\n";
}

SceneRecord write_synthetic_scene(const SyntheticSceneSpec& spec, const fs::path& root, Split split) {
  spec.validate();
  const fs::path scene_dir = root / spec.class_name / spec.scene_id;
  fs::create_directories(scene_dir / "images");
  SceneRecord record{spec.scene_id, spec.class_name, {}, split};
  const auto poses = ring_poses(spec.ring);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%03zu.png", i);
    const fs::path file = scene_dir / "images" / name;
    write_png(file, render_synthetic(spec, poses[i]));
    record.frames.push_back({file, poses[i]});
  }
  write_frames_json(scene_dir / "frames.json", record.frames, split);
  return record;
}

}  // namespace nvs
