#pragma once

// Posed scene datasets and the flat-shaded synthetic primitive renderer.
//
// On-disk layout:
//
//   <root>/<class_name>/<scene_id>/frames.json
//   <root>/<class_name>/<scene_id>/images/<file>.png
//
// frames.json is either a list of frame objects or {"split": "train"|"dev",
// "frames": [...]}. A frame object is
// {"file", "R": 9 floats row-major, "t": 3 floats, "fx", "fy", "cx", "cy"}.

#include <nvs/camera.hpp>
#include <nvs/var.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace nvs {

/// RGB image in [0, 1], planar [3, H, W].
struct Image {
  long height = 0;
  long width = 0;
  Eigen::ArrayXd data;

  static Image filled(long height, long width, const Vec3<double>& color);
  double at(long channel, long row, long col) const { return data(channel * height * width + row * width + col); }
  double& at(long channel, long row, long col) { return data(channel * height * width + row * width + col); }

  template <typename Scalar>
  Var<Scalar> to_var() const {
    return Var<Scalar>::constant(data.cast<Scalar>(), {3, height, width});
  }
  template <typename Scalar>
  static Image from_var(const Var<Scalar>& v);
};

/// 8-bit RGB PNG. Values are clamped to [0, 1] and rounded on write.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
/// (height, width) from the PNG header.
std::pair<long, long> png_size(const std::filesystem::path& path);

enum class Split { train, dev };
std::string to_string(Split split);

struct FrameRecord {
  std::filesystem::path image;
  CameraPose<double> pose;
};

struct SceneRecord {
  std::string scene_id;
  std::string class_name;
  std::vector<FrameRecord> frames;
  Split split = Split::train;
};

/// Reads every scene under root. Frames with unusable poses or images are
/// dropped (one warning each); scenes left with fewer than two frames are
/// rejected with a warning. Malformed JSON throws ParseError with file and line.
std::vector<SceneRecord> ingest(const std::filesystem::path& root, std::vector<std::string>* warnings = nullptr);

/// Images of a scene loaded into memory, optionally resampled to size x size
/// (intrinsics are rescaled to match).
template <typename Scalar>
struct SceneData {
  std::string scene_id;
  std::string class_name;
  std::vector<Var<Scalar>> images;
  std::vector<CameraPose<double>> poses;

  Index view_count() const { return static_cast<Index>(images.size()); }
};

template <typename Scalar>
SceneData<Scalar> load_scene(const SceneRecord& record, long size = 0);

/// Pose for the same camera at a different square resolution.
CameraPose<double> rescale_pose(const CameraPose<double>& pose, long height, long width);

enum class PrimitiveShape { sphere, box };

struct Primitive {
  PrimitiveShape shape = PrimitiveShape::sphere;
  Vec3<double> center = Vec3<double>::Zero();
  /// Sphere radius or box half-extent per axis.
  Vec3<double> size = Vec3<double>::Ones();
  Vec3<double> albedo = Vec3<double>::Ones();
};

/// Cameras evenly spaced on a circle of the given radius at height
/// `elevation` above the ring plane, all looking at `target`.
struct CameraRing {
  int count = 8;
  double radius = 4.0;
  double elevation = 1.0;
  double focal = 40.0;
  long resolution = 32;
  Vec3<double> target = Vec3<double>::Zero();
};

struct SyntheticSceneSpec {
  std::string class_name = "synthetic";
  std::string scene_id = "scene_000";
  std::vector<Primitive> primitives;
  Vec3<double> background = Vec3<double>::Zero();
  CameraRing ring;

  void validate() const;
};

SyntheticSceneSpec parse_synthetic_spec(const nlohmann::json& j);
nlohmann::json to_json(const SyntheticSceneSpec& spec);

std::vector<CameraPose<double>> ring_poses(const CameraRing& ring);

/// Nearest hit along a ray; returns the primitive index or -1.
struct Hit {
  int primitive = -1;
  double depth = 0;
};
Hit intersect(const SyntheticSceneSpec& spec, const Vec3<double>& origin, const Vec3<double>& direction);

/// Albedo of the nearest primitive per pixel center, background on a miss.
Image render_synthetic(const SyntheticSceneSpec& spec, const CameraPose<double>& pose);
/// Same camera rendered at resolution x resolution.
Image render_synthetic(const SyntheticSceneSpec& spec, const CameraPose<double>& pose, long resolution);

/// Renders the spec's camera ring into the dataset layout under root.
SceneRecord write_synthetic_scene(const SyntheticSceneSpec& spec, const std::filesystem::path& root,
                                  Split split = Split::train);

/// Writes frames.json for the given frames (paths are stored relative to the scene's images/ folder).
void write_frames_json(const std::filesystem::path& path, const std::vector<FrameRecord>& frames, Split split);

}  // namespace nvs
