#pragma once

// Shared scene fixtures for geometry tests.

#include <nvs/data.hpp>
#include <nvs/ray_aggregation.hpp>

#include <numbers>
#include <random>

namespace nvs::testing {

/// Cameras on a horizontal circle around the origin, all looking at it.
inline std::vector<CameraPosed> ring_cameras(int count, double radius, double elevation, double focal, long size) {
  std::vector<CameraPosed> poses;
  for (int i = 0; i < count; ++i) {
    const double a = 2 * std::numbers::pi * i / count;
    const Vec3<double> eye(radius * std::cos(a), elevation, radius * std::sin(a));
    poses.push_back(CameraPosed::look_at(eye, Vec3<double>::Zero(), {0, 1, 0}, focal, size, size));
  }
  return poses;
}

template <typename Scalar>
Var<Scalar> random_image(long size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  ArrayX<Scalar> v(3 * size * size);
  for (auto& x : v) x = static_cast<Scalar>(u(rng));
  return Var<Scalar>::constant(std::move(v), {3, size, size});
}

inline GeometryConfig tiny_geometry_config() {
  GeometryConfig cfg;
  cfg.width = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.points_per_ray = 4;
  cfg.pe_frequencies = 2;
  cfg.feature_grid = 4;
  return cfg;
}

/// Red sphere and blue box on a white background, seen from a camera ring.
inline SyntheticSceneSpec sphere_box_spec(int cameras = 8, long resolution = 32) {
  SyntheticSceneSpec spec;
  spec.class_name = "toy";
  spec.scene_id = "sphere_box";
  spec.background = {1, 1, 1};
  spec.primitives.push_back({PrimitiveShape::sphere, {0.3, 0, 0}, {0.7, 0.7, 0.7}, {0.9, 0.2, 0.2}});
  spec.primitives.push_back({PrimitiveShape::box, {-0.5, 0.1, 0.2}, {0.4, 0.4, 0.4}, {0.2, 0.3, 0.9}});
  spec.ring = {cameras, 4.0, 1.5, 40.0 * static_cast<double>(resolution) / 32.0, resolution, {0, 0, 0}};
  return spec;
}

/// Renders the spec's ring straight into memory.
template <typename Scalar>
SceneData<Scalar> render_scene(const SyntheticSceneSpec& spec) {
  SceneData<Scalar> scene;
  scene.scene_id = spec.scene_id;
  scene.class_name = spec.class_name;
  for (const auto& pose : ring_poses(spec.ring)) {
    scene.poses.push_back(pose);
    scene.images.push_back(render_synthetic(spec, pose).template to_var<Scalar>());
  }
  return scene;
}

}  // namespace nvs::testing
