#pragma once

// Pinhole camera algebra, query-ray casting, depth sampling and the ray
// parameterizations fed to the aggregation transformers.
//
// Conventions: right-handed world; cameras look down +z with +x to the right
// and +y down the image; pixel coordinates are (row, col) with integer values
// at pixel centers. rotation/translation map world points into the camera
// frame: x_cam = R * x_world + t.

#include <nvs/errors.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace nvs {

template <typename Scalar>
using Vec2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar>
using Mat4 = Eigen::Matrix<Scalar, 4, 4>;

/// Continuous pixel location; integer values are pixel centers.
template <typename Scalar>
struct Pixel {
  Scalar row;
  Scalar col;
};

template <typename Scalar>
struct CameraPose {
  Mat3<Scalar> rotation = Mat3<Scalar>::Identity();
  Vec3<Scalar> translation = Vec3<Scalar>::Zero();
  Vec2<Scalar> focal = Vec2<Scalar>::Ones();            // (fx, fy)
  Vec2<Scalar> principal_point = Vec2<Scalar>::Zero();  // (cx, cy)
  long height = 1;
  long width = 1;

  Vec3<Scalar> center() const { return -rotation.transpose() * translation; }
  Vec3<Scalar> to_camera(const Vec3<Scalar>& world) const { return rotation * world + translation; }
  Vec3<Scalar> to_world(const Vec3<Scalar>& camera) const { return rotation.transpose() * (camera - translation); }

  /// Homogeneous world-to-camera transform.
  Mat4<Scalar> matrix() const {
    Mat4<Scalar> m = Mat4<Scalar>::Identity();
    m.template topLeftCorner<3, 3>() = rotation;
    m.template topRightCorner<3, 1>() = translation;
    return m;
  }

  /// Unnormalized camera-frame direction through a pixel.
  Vec3<Scalar> camera_direction(const Pixel<Scalar>& px) const {
    return Vec3<Scalar>((px.col - principal_point.x()) / focal.x(), (px.row - principal_point.y()) / focal.y(), 1);
  }

  /// Projects a camera-frame point; depth is the camera z coordinate.
  Pixel<Scalar> project_camera(const Vec3<Scalar>& p) const {
    return {focal.y() * p.y() / p.z() + principal_point.y(), focal.x() * p.x() / p.z() + principal_point.x()};
  }

  Pixel<Scalar> project(const Vec3<Scalar>& world) const { return project_camera(to_camera(world)); }

  bool contains(const Pixel<Scalar>& px) const {
    return px.row >= Scalar(-0.5) && px.row <= Scalar(height) - Scalar(0.5) && px.col >= Scalar(-0.5) &&
           px.col <= Scalar(width) - Scalar(0.5);
  }

  /// Throws ArgumentError when the rotation is not a proper rotation or the intrinsics are degenerate.
  void validate(Scalar tolerance = Scalar(1e-6)) const {
    const Scalar ortho = (rotation.transpose() * rotation - Mat3<Scalar>::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho <= tolerance)) throw ArgumentError("camera rotation is not orthonormal");
    if (!(std::abs(rotation.determinant() - Scalar(1)) <= tolerance * 10)) {
      throw ArgumentError("camera rotation has determinant != +1");
    }
    if (!(focal.x() > 0 && focal.y() > 0)) throw ArgumentError("camera focal length must be positive");
    if (height < 1 || width < 1) throw ArgumentError("camera image size must be positive");
    if (!translation.allFinite() || !principal_point.allFinite()) throw ArgumentError("camera pose is not finite");
  }

  template <typename Other>
  CameraPose<Other> cast() const {
    CameraPose<Other> out;
    out.rotation = rotation.template cast<Other>();
    out.translation = translation.template cast<Other>();
    out.focal = focal.template cast<Other>();
    out.principal_point = principal_point.template cast<Other>();
    out.height = height;
    out.width = width;
    return out;
  }

  /// Camera at `eye` looking at `target`; `up` gives the world direction that appears upward in the image.
  static CameraPose look_at(const Vec3<Scalar>& eye, const Vec3<Scalar>& target, const Vec3<Scalar>& up,
                            Scalar focal_px, long height, long width) {
    const Vec3<Scalar> forward = (target - eye).normalized();
    const Vec3<Scalar> right = forward.cross(up).normalized();
    const Vec3<Scalar> down = forward.cross(right);
    CameraPose pose;
    pose.rotation.row(0) = right.transpose();
    pose.rotation.row(1) = down.transpose();
    pose.rotation.row(2) = forward.transpose();
    pose.translation = -pose.rotation * eye;
    pose.focal = Vec2<Scalar>(focal_px, focal_px);
    pose.principal_point = Vec2<Scalar>(Scalar(width - 1) / 2, Scalar(height - 1) / 2);
    pose.height = height;
    pose.width = width;
    return pose;
  }
};

template <typename Scalar>
struct Ray {
  Vec3<Scalar> origin;
  Vec3<Scalar> direction;  // unit length
  Pixel<Scalar> pixel;

  Vec3<Scalar> at(Scalar depth) const { return origin + depth * direction; }
};

template <typename Scalar>
struct RaySampleSet {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 3> points;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> depths;
  Ray<Scalar> ray;
};

template <typename Scalar>
struct PluckerCoords {
  Vec3<Scalar> direction;
  Vec3<Scalar> moment;

  Eigen::Matrix<Scalar, 6, 1> vector() const {
    Eigen::Matrix<Scalar, 6, 1> v;
    v << direction, moment;
    return v;
  }
};

template <typename Scalar>
struct DepthRange {
  Scalar near;
  Scalar far;
};

/// One ray per pixel, starting at the camera center in world coordinates.
template <typename Scalar>
std::vector<Ray<Scalar>> cast_rays(const CameraPose<Scalar>& target, const std::vector<Pixel<Scalar>>& pixels) {
  std::vector<Ray<Scalar>> rays;
  rays.reserve(pixels.size());
  const Vec3<Scalar> origin = target.center();
  for (const auto& px : pixels) {
    if (!target.contains(px)) {
      throw BoundsError("pixel (" + std::to_string(px.row) + ", " + std::to_string(px.col) + ") outside " +
                        std::to_string(target.height) + "x" + std::to_string(target.width) + " image");
    }
    const Vec3<Scalar> dir = (target.rotation.transpose() * target.camera_direction(px)).normalized();
    rays.push_back({origin, dir, px});
  }
  return rays;
}

/// Pixel coordinates of the cell centers of a rows x cols grid spanning the whole image.
template <typename Scalar>
std::vector<Pixel<Scalar>> grid_cell_centers(const CameraPose<Scalar>& pose, long rows, long cols) {
  std::vector<Pixel<Scalar>> pixels;
  pixels.reserve(static_cast<std::size_t>(rows * cols));
  const Scalar sy = Scalar(pose.height) / Scalar(rows), sx = Scalar(pose.width) / Scalar(cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) pixels.push_back({(Scalar(r) + Scalar(0.5)) * sy - Scalar(0.5), (Scalar(c) + Scalar(0.5)) * sx - Scalar(0.5)});
  return pixels;
}

/// n uniformly spaced depths in [near, far], endpoints included.
template <typename Scalar>
RaySampleSet<Scalar> sample_points(const Ray<Scalar>& ray, Scalar near, Scalar far, long n) {
  if (!(near > 0) || !(near < far)) throw ArgumentError("sample_points: require 0 < near < far");
  if (n < 2) throw ArgumentError("sample_points: require at least 2 samples");
  RaySampleSet<Scalar> out;
  out.ray = ray;
  out.depths.resize(n);
  out.points.resize(n, 3);
  const Scalar step = (far - near) / Scalar(n - 1);
  for (long k = 0; k < n; ++k) {
    out.depths[k] = k == n - 1 ? far : near + Scalar(k) * step;
    out.points.row(k) = ray.at(out.depths[k]).transpose();
  }
  return out;
}

/// The context pose expressed relative to the target camera: it maps
/// target-camera coordinates into context-camera coordinates, so that
/// relative.matrix() * target.matrix() == context.matrix().
template <typename Scalar>
CameraPose<Scalar> relative_pose(const CameraPose<Scalar>& context, const CameraPose<Scalar>& target) {
  CameraPose<Scalar> rel = context;
  rel.rotation = context.rotation * target.rotation.transpose();
  rel.translation = context.translation - rel.rotation * target.translation;
  return rel;
}

template <typename Scalar>
PluckerCoords<Scalar> plucker(const Ray<Scalar>& ray) {
  const Scalar norm = ray.direction.norm();
  if (!(norm > Scalar(0))) throw ArgumentError("plucker: zero direction");
  const Vec3<Scalar> d = ray.direction / norm;
  return {d, ray.origin.cross(d)};
}

/// Plücker coordinates of the line from `from` through `to`.
template <typename Scalar>
PluckerCoords<Scalar> plucker_through(const Vec3<Scalar>& from, const Vec3<Scalar>& to) {
  return plucker(Ray<Scalar>{from, to - from, {}});
}

/// [sin(2^0 pi d), cos(2^0 pi d), ..., sin(2^(L-1) pi d), cos(2^(L-1) pi d)].
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> positional_encode(Scalar depth, long num_frequencies) {
  if (num_frequencies < 1) throw ArgumentError("positional_encode: need at least one frequency");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(2 * num_frequencies);
  Scalar freq = std::numbers::pi_v<Scalar>;
  for (long k = 0; k < num_frequencies; ++k, freq *= 2) {
    out[2 * k] = std::sin(freq * depth);
    out[2 * k + 1] = std::cos(freq * depth);
  }
  return out;
}

/// Fallback near/far from the bounding sphere of the given camera centers.
template <typename Scalar>
DepthRange<Scalar> default_depth_range(const std::vector<CameraPose<Scalar>>& poses) {
  if (poses.empty()) throw ArgumentError("default_depth_range: no poses");
  Vec3<Scalar> mid = Vec3<Scalar>::Zero();
  for (const auto& p : poses) mid += p.center();
  mid /= Scalar(poses.size());
  Scalar radius = 0;
  for (const auto& p : poses) radius = std::max(radius, (p.center() - mid).norm());
  if (radius < Scalar(1e-9)) radius = 1;
  return {Scalar(0.1) * radius, Scalar(4) * radius};
}

using CameraPosed = CameraPose<double>;
using Rayd = Ray<double>;

}  // namespace nvs
