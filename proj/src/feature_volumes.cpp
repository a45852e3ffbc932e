#include <nvs/errors.hpp>
#include <nvs/feature_volumes.hpp>

namespace nvs {

BackboneProfile parse_backbone_profile(const std::string& name) {
  if (name == "toy") return BackboneProfile::toy;
  if (name == "paper") return BackboneProfile::paper;
  throw ConfigError("unknown backbone profile '" + name + "' (expected toy or paper)");
}

std::string to_string(BackboneProfile profile) { return profile == BackboneProfile::toy ? "toy" : "paper"; }

BackboneSpec backbone_spec(BackboneProfile profile, bool bias) {
  BackboneSpec spec;
  spec.channels = profile == BackboneProfile::toy ? std::array<Index, 3>{64, 128, 256}
                                                  : std::array<Index, 3>{256, 512, 1024};
  spec.bias = bias;
  return spec;
}

template <typename S>
Backbone<S>::Backbone(const BackboneSpec& spec, Initializer& init)
    : spec_(spec),
      stem1_(3, spec.channels[0] / 2, 3, 2, 1, init, spec.bias),
      stem2_(spec.channels[0] / 2, spec.channels[0], 3, 2, 1, init, spec.bias),
      stage2_(spec.channels[0], spec.channels[1], 3, 2, 1, init, spec.bias),
      stage3_(spec.channels[1], spec.channels[2], 3, 2, 1, init, spec.bias) {}

template <typename S>
std::array<Var<S>, 3> Backbone<S>::operator()(const Var<S>& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ArgumentError("backbone expects an image [3, H, W], got " + shape_string(image.shape()));
  }
  const Index total_stride = spec_.strides[2];
  if (image.dim(1) % total_stride != 0 || image.dim(2) % total_stride != 0) {
    throw ArgumentError("backbone: image size " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                        " is not divisible by " + std::to_string(total_stride));
  }
  Var<S> s4 = silu(stem2_(silu(stem1_(image))));
  Var<S> s8 = silu(stage2_(s4));
  Var<S> s16 = silu(stage3_(s8));
  return {s4, s8, s16};
}

template <typename S>
void Backbone<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  stem1_.register_params(out, prefix + "stem1.");
  stem2_.register_params(out, prefix + "stem2.");
  stage2_.register_params(out, prefix + "stage2.");
  stage3_.register_params(out, prefix + "stage3.");
}

template <typename S>
FeatureVolume<S> reshape_to_volume(const Var<S>& fmap, Index depth_resolution, int scale_id) {
  if (fmap.rank() != 3) throw ArgumentError("reshape_to_volume: expected [C, h, w], got " + shape_string(fmap.shape()));
  const Index c = fmap.dim(0);
  if (depth_resolution < 1 || c % depth_resolution != 0) {
    throw ArgumentError("reshape_to_volume: " + std::to_string(c) + " channels not divisible by depth " +
                        std::to_string(depth_resolution));
  }
  return {reshape(fmap, {c / depth_resolution, depth_resolution, fmap.dim(1), fmap.dim(2)}), depth_resolution,
          scale_id};
}

template <typename S>
Var<S> flatten_volume(const FeatureVolume<S>& volume) {
  const auto& s = volume.data.shape();
  return reshape(volume.data, {s[0] * s[1], s[2], s[3]});
}

template <typename S>
FeatureVolume<S> upsample_pixel_align(const FeatureVolume<S>& volume, Index height, Index width) {
  if (height < volume.height() || width < volume.width()) {
    throw ArgumentError("upsample_pixel_align: target smaller than the volume");
  }
  if (height == volume.height() && width == volume.width()) return volume;
  Var<S> up = resize_bilinear(flatten_volume(volume), height, width);
  return {reshape(up, {volume.feature_dim(), volume.depth_resolution, height, width}), volume.depth_resolution,
          volume.scale_id};
}

template <typename S>
FeatureVolumeSet<S> make_volume_set(std::vector<FeatureVolume<S>> volumes, const CameraPose<double>& pose,
                                    DepthRange<double> depth_range) {
  if (!(depth_range.near > 0 && depth_range.near < depth_range.far)) {
    throw ArgumentError("feature volumes: require 0 < near < far");
  }
  FeatureVolumeSet<S> set;
  set.context_pose = pose;
  set.depth_range = depth_range;
  for (const auto& v : volumes) set.per_point_dim += v.feature_dim();
  set.volumes = std::move(volumes);
  return set;
}

template <typename S>
FeatureVolumeSet<S> build_volume_set(const Backbone<S>& backbone, const Var<S>& image, const CameraPose<double>& pose,
                                     DepthRange<double> depth_range, Index depth_resolution) {
  auto maps = backbone(image);
  const Index h = image.dim(1), w = image.dim(2);
  std::vector<FeatureVolume<S>> volumes;
  for (int k = 2; k >= 0; --k) {
    volumes.push_back(upsample_pixel_align(reshape_to_volume(maps[k], depth_resolution, k), h, w));
  }
  return make_volume_set(std::move(volumes), pose, depth_range);
}

VoxelCoords voxel_coords(const CameraPose<double>& pose, DepthRange<double> range, Index depth_resolution,
                         const Eigen::MatrixX3d& points_world) {
  const Index n = points_world.rows();
  VoxelCoords out;
  out.coords.resize(n, 3);
  out.valid.assign(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i) {
    const Vec3<double> p = pose.to_camera(points_world.row(i).transpose());
    out.coords.row(i).setZero();
    if (!(p.z() >= range.near && p.z() <= range.far)) continue;
    const Pixel<double> px = pose.project_camera(p);
    if (!pose.contains(px)) continue;
    out.coords(i, 0) = px.col;
    out.coords(i, 1) = px.row;
    out.coords(i, 2) = (p.z() - range.near) / (range.far - range.near) * static_cast<double>(depth_resolution - 1);
    out.valid[static_cast<std::size_t>(i)] = 1;
  }
  return out;
}

template <typename S>
std::pair<Var<S>, Mask> sample_point_features(const FeatureVolumeSet<S>& set, const Eigen::MatrixX3d& points_world) {
  if (set.volumes.empty()) throw ArgumentError("sample_point_features: empty volume set");
  const Index d = set.volumes.front().depth_resolution;
  for (const auto& v : set.volumes) {
    if (v.depth_resolution != d || v.height() != set.context_pose.height || v.width() != set.context_pose.width) {
      throw ArgumentError("sample_point_features: volumes are not pixel aligned with the context image");
    }
  }
  VoxelCoords vc = voxel_coords(set.context_pose, set.depth_range, d, points_world);
  std::vector<Var<S>> parts;
  for (const auto& v : set.volumes) parts.push_back(trilinear_sample(v.data, vc.coords, vc.valid));
  return {parts.size() == 1 ? parts.front() : concat_cols(parts), std::move(vc.valid)};
}

#define NVS_INSTANTIATE_VOLUMES(S)                                                                               \
  template class Backbone<S>;                                                                                    \
  template FeatureVolume<S> reshape_to_volume<S>(const Var<S>&, Index, int);                                     \
  template Var<S> flatten_volume<S>(const FeatureVolume<S>&);                                                    \
  template FeatureVolume<S> upsample_pixel_align<S>(const FeatureVolume<S>&, Index, Index);                      \
  template FeatureVolumeSet<S> make_volume_set<S>(std::vector<FeatureVolume<S>>, const CameraPose<double>&,      \
                                                  DepthRange<double>);                                           \
  template FeatureVolumeSet<S> build_volume_set<S>(const Backbone<S>&, const Var<S>&, const CameraPose<double>&, \
                                                   DepthRange<double>, Index);                                   \
  template std::pair<Var<S>, Mask> sample_point_features<S>(const FeatureVolumeSet<S>&, const Eigen::MatrixX3d&);

NVS_INSTANTIATE_VOLUMES(float)
NVS_INSTANTIATE_VOLUMES(double)

}  // namespace nvs
