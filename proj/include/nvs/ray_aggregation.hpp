#pragma once

// Geometry prior: per-view weighting of the points along each target ray,
// cross-view aggregation, and the two renderings built from them: the
// aggregate feature map (width x grid x grid) and the coarse color estimate.
//
// Point token layout (one row per ray point and context view):
//   [ sampled volume features | Plücker line (6) | depth encoding (2L) ]
// The Plücker line runs from the context camera center to the point, both
// expressed in the target camera frame. The depth encoding uses the point's
// depth along the target ray normalized to [0, 1] over [near, far].
//
// View token layout (one row per ray and context view):
//   [ weighted ray feature (width) | Plücker line (6) | depth encoding (2L) ]
// where the geometric part describes the expected-depth point of that view's
// point weights.

#include <nvs/feature_volumes.hpp>

#include <vector>

namespace nvs {

struct GeometryConfig {
  BackboneProfile backbone = BackboneProfile::toy;
  bool backbone_bias = true;
  Index depth_resolution = 64;
  Index points_per_ray = 32;
  Index width = 256;
  Index layers = 4;
  Index heads = 4;
  Index pe_frequencies = 6;
  Index feature_grid = 32;

  void validate() const;
};

template <typename Scalar>
struct ContextView {
  Var<Scalar> image;  // [3, H, W] in [0, 1]
  CameraPose<double> pose;
};

template <typename Scalar>
struct PointWeighting {
  Var<Scalar> value;    // [G, width], zero for groups without a valid point
  Var<Scalar> weights;  // [G * n]
  Var<Scalar> outputs;  // [G * n, width]
  Mask group_valid;     // [G]
};

template <typename Scalar>
struct ViewAggregation {
  Var<Scalar> features;  // [R, width], zero for rays without a valid view
  Var<Scalar> weights;   // [R * V]
  Mask ray_valid;        // [R]
};

template <typename Scalar>
struct RayRendering {
  Var<Scalar> features;        // [R, width]
  Var<Scalar> colors;          // [R, 3]
  Var<Scalar> point_weights;   // [V * R * n], view-major
  Var<Scalar> view_weights;    // [R * V], ray-major
  Mask point_valid;            // [V * R * n]
  Mask ray_valid;              // [R]
  Eigen::MatrixXd point_colors;  // [V * R * n, 3] context colors at each point
};

template <typename Scalar>
struct AggregateFeatureMap {
  Var<Scalar> features;  // [width, grid, grid]
  CameraPose<double> pose;
};

template <typename Scalar>
struct ColorEstimate {
  Var<Scalar> image;  // [3, H, W]
  CameraPose<double> pose;
};

template <typename Scalar>
struct GeometryRendering {
  AggregateFeatureMap<Scalar> feature_map;
  ColorEstimate<Scalar> color;
};

/// Bilinear lookup of an image [3, H, W] at a continuous pixel, clamped to the border.
template <typename Scalar>
Eigen::Vector3d sample_color(const Var<Scalar>& image, const Pixel<double>& px);

template <typename Scalar>
class GeometryModel {
 public:
  GeometryModel() = default;
  GeometryModel(const GeometryConfig& config, Initializer& init);

  const GeometryConfig& config() const { return config_; }
  Index per_point_dim() const { return per_point_dim_; }
  Index descriptor_dim() const { return 6 + 2 * config_.pe_frequencies; }
  Index token_dim() const { return per_point_dim_ + descriptor_dim(); }

  std::vector<FeatureVolumeSet<Scalar>> encode(const std::vector<ContextView<Scalar>>& contexts,
                                               DepthRange<double> range) const;

  /// Point transformer over groups of `group` consecutive tokens [G * group, token_dim].
  /// forced_logits, when given, replaces the learned logits (test hook).
  PointWeighting<Scalar> weight_points(const Var<Scalar>& tokens, Index group, const Mask& valid = {},
                                       const Var<Scalar>* forced_logits = nullptr) const;

  /// View transformer over groups of `views` rows: ray features [R * V, width]
  /// and view descriptors [R * V, descriptor_dim], both ray-major.
  ViewAggregation<Scalar> aggregate_views(const Var<Scalar>& ray_features, const Var<Scalar>& descriptors,
                                          Index views, const Mask& view_valid = {}) const;

  RayRendering<Scalar> render_rays(const std::vector<FeatureVolumeSet<Scalar>>& volumes,
                                   const std::vector<ContextView<Scalar>>& contexts, const CameraPose<double>& target,
                                   const std::vector<Pixel<double>>& pixels, DepthRange<double> range) const;

  AggregateFeatureMap<Scalar> render_feature_map(const std::vector<ContextView<Scalar>>& contexts,
                                                 const CameraPose<double>& target, DepthRange<double> range) const;

  ColorEstimate<Scalar> estimate_color(const std::vector<ContextView<Scalar>>& contexts,
                                       const CameraPose<double>& target, DepthRange<double> range, Index height,
                                       Index width) const;

  /// Both renderings from one encoding; rays are shared when the color
  /// resolution equals the feature grid.
  GeometryRendering<Scalar> render(const std::vector<ContextView<Scalar>>& contexts, const CameraPose<double>& target,
                                   DepthRange<double> range, Index color_height, Index color_width) const;

  const Linear<Scalar>& point_logit() const { return point_logit_; }
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

 private:
  GeometryConfig config_{};
  Index per_point_dim_ = 0;
  Backbone<Scalar> backbone_;
  Linear<Scalar> point_in_, point_logit_, view_in_, view_logit_;
  TransformerEncoder<Scalar> point_transformer_, view_transformer_;
};

/// Mean squared error between the estimate and a ground-truth image [3, H, W].
template <typename Scalar>
Var<Scalar> reconstruction_loss(const ColorEstimate<Scalar>& estimate, const Var<Scalar>& ground_truth);

}  // namespace nvs
