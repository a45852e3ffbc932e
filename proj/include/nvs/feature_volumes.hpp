#pragma once

// Per-context-image volumetric features: a three-scale convolutional
// encoder whose channel axis is split into (feature, depth) slices, upsampled
// to the image resolution and sampled trilinearly at 3D points.
//
// The depth axis of every volume spans [near, far] of the context camera
// uniformly in camera-space z. Points behind the camera, outside the image or
// outside [near, far] are out of frustum: they sample to zero and are
// flagged invalid.

#include <nvs/camera.hpp>
#include <nvs/nn.hpp>

#include <array>
#include <string>
#include <vector>

namespace nvs {

enum class BackboneProfile { toy, paper };

BackboneProfile parse_backbone_profile(const std::string& name);
std::string to_string(BackboneProfile profile);

struct BackboneSpec {
  std::array<Index, 3> channels;
  std::array<Index, 3> strides{4, 8, 16};
  bool bias = true;
};

/// toy: 64/128/256 channels; paper: 256/512/1024 (the first three stages of a 50-layer residual net).
BackboneSpec backbone_spec(BackboneProfile profile, bool bias = true);

/// Small strided CNN producing feature maps at strides 4, 8 and 16.
template <typename Scalar>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneSpec& spec, Initializer& init);

  /// image [3, H, W] -> maps [c_k, H / s_k, W / s_k], finest first.
  std::array<Var<Scalar>, 3> operator()(const Var<Scalar>& image) const;

  const BackboneSpec& spec() const { return spec_; }
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

 private:
  BackboneSpec spec_{};
  Conv2d<Scalar> stem1_, stem2_, stage2_, stage3_;
};

template <typename Scalar>
struct FeatureVolume {
  Var<Scalar> data;  // [c, d, h, w]
  Index depth_resolution = 0;
  int scale_id = 0;

  Index feature_dim() const { return data.dim(0); }
  Index height() const { return data.dim(2); }
  Index width() const { return data.dim(3); }
};

/// Splits channels of fmap [C, h, w] into [C / d, d, h, w] (channel = f * d + k).
template <typename Scalar>
FeatureVolume<Scalar> reshape_to_volume(const Var<Scalar>& fmap, Index depth_resolution, int scale_id = 0);

/// Inverse of reshape_to_volume.
template <typename Scalar>
Var<Scalar> flatten_volume(const FeatureVolume<Scalar>& volume);

/// Corner-aligned bilinear upsampling of every depth slice to (height, width).
template <typename Scalar>
FeatureVolume<Scalar> upsample_pixel_align(const FeatureVolume<Scalar>& volume, Index height, Index width);

template <typename Scalar>
struct FeatureVolumeSet {
  std::vector<FeatureVolume<Scalar>> volumes;  // coarse to fine
  CameraPose<double> context_pose;
  DepthRange<double> depth_range{};
  Index per_point_dim = 0;
};

/// Encodes one context image into its pixel-aligned volume set.
template <typename Scalar>
FeatureVolumeSet<Scalar> build_volume_set(const Backbone<Scalar>& backbone, const Var<Scalar>& image,
                                          const CameraPose<double>& pose, DepthRange<double> depth_range,
                                          Index depth_resolution);

/// Assembles a set from existing volumes (coarse to fine).
template <typename Scalar>
FeatureVolumeSet<Scalar> make_volume_set(std::vector<FeatureVolume<Scalar>> volumes, const CameraPose<double>& pose,
                                         DepthRange<double> depth_range);

struct VoxelCoords {
  Eigen::MatrixX3d coords;  // (col, row, depth slice) per point
  Mask valid;
};

/// Projects world points into the context camera and converts them to
/// continuous voxel coordinates of a (depth_resolution, H, W) grid.
VoxelCoords voxel_coords(const CameraPose<double>& pose, DepthRange<double> range, Index depth_resolution,
                         const Eigen::MatrixX3d& points_world);

/// Concatenated trilinear samples [N, per_point_dim] for N world points and their validity.
template <typename Scalar>
std::pair<Var<Scalar>, Mask> sample_point_features(const FeatureVolumeSet<Scalar>& set,
                                                   const Eigen::MatrixX3d& points_world);

}  // namespace nvs
