#include <nvs/errors.hpp>
#include <nvs/ray_aggregation.hpp>

#include <algorithm>
#include <memory>
#include <numbers>

namespace nvs {

namespace {

// Plücker line from each row's context center to the point at the given
// depth along its target ray, plus the normalized depth encoding.
// Differentiable in depth.
template <typename S>
Var<S> expected_point_descriptor(const Var<S>& depth, const Eigen::MatrixX3d& origins, const Eigen::MatrixX3d& dirs,
                                 DepthRange<double> range, Index frequencies) {
  const Index rows = depth.size();
  const Index dim = 6 + 2 * frequencies;
  const double span = range.far - range.near;
  ArrayX<S> out(rows * dim);
  auto jac = std::make_shared<RowMatrix<double>>(rows, dim);
  for (Index i = 0; i < rows; ++i) {
    const double t = static_cast<double>(depth.value()[i]);
    const Eigen::Vector3d o = origins.row(i).transpose(), d = dirs.row(i).transpose();
    const Eigen::Vector3d v = t * d - o;
    const double len = std::max(v.norm(), 1e-12);
    const Eigen::Vector3d u = v / len;
    const Eigen::Vector3d du = (d - u * u.dot(d)) / len;
    const Eigen::Vector3d m = o.cross(u), dm = o.cross(du);
    for (int c = 0; c < 3; ++c) {
      out[i * dim + c] = static_cast<S>(u[c]);
      out[i * dim + 3 + c] = static_cast<S>(m[c]);
      (*jac)(i, c) = du[c];
      (*jac)(i, 3 + c) = dm[c];
    }
    const double x = (t - range.near) / span;
    double freq = std::numbers::pi;
    for (Index k = 0; k < frequencies; ++k, freq *= 2) {
      out[i * dim + 6 + 2 * k] = static_cast<S>(std::sin(freq * x));
      out[i * dim + 7 + 2 * k] = static_cast<S>(std::cos(freq * x));
      (*jac)(i, 6 + 2 * k) = freq * std::cos(freq * x) / span;
      (*jac)(i, 7 + 2 * k) = -freq * std::sin(freq * x) / span;
    }
  }
  return make_op<S>(std::move(out), Shape{rows, dim}, {depth}, [depth, jac, rows, dim](const ArrayX<S>& g) {
    ArrayX<S> dd(rows);
    for (Index i = 0; i < rows; ++i) {
      double acc = 0;
      for (Index c = 0; c < dim; ++c) acc += static_cast<double>(g[i * dim + c]) * (*jac)(i, c);
      dd[i] = static_cast<S>(acc);
    }
    accumulate_grad(depth, dd);
  });
}

Mask any_valid_per_group(const Mask& valid, Index rows, Index group) {
  Mask out(static_cast<std::size_t>(rows / group), 0);
  for (Index i = 0; i < rows; ++i)
    if (valid.empty() || valid[static_cast<std::size_t>(i)]) out[static_cast<std::size_t>(i / group)] = 1;
  return out;
}

}  // namespace

void GeometryConfig::validate() const {
  if (depth_resolution < 2) throw ConfigError("geometry.depth_resolution must be >= 2");
  if (points_per_ray < 2) throw ConfigError("geometry.points_per_ray must be >= 2");
  if (width < 1 || heads < 1 || width % heads != 0) throw ConfigError("geometry.width must be a multiple of geometry.heads");
  if (layers < 1) throw ConfigError("geometry.layers must be >= 1");
  if (pe_frequencies < 1) throw ConfigError("geometry.pe_frequencies must be >= 1");
  if (feature_grid < 1) throw ConfigError("geometry.feature_grid must be >= 1");
  for (Index c : backbone_spec(backbone).channels) {
    if (c % depth_resolution != 0) throw ConfigError("backbone channels must be divisible by geometry.depth_resolution");
  }
}

template <typename S>
Eigen::Vector3d sample_color(const Var<S>& image, const Pixel<double>& px) {
  const Index h = image.dim(1), w = image.dim(2);
  const double r = std::clamp(px.row, 0.0, static_cast<double>(h - 1));
  const double c = std::clamp(px.col, 0.0, static_cast<double>(w - 1));
  const Index r0 = std::min<Index>(static_cast<Index>(r), std::max<Index>(h - 2, 0));
  const Index c0 = std::min<Index>(static_cast<Index>(c), std::max<Index>(w - 2, 0));
  const Index r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
  const double fr = r - static_cast<double>(r0), fc = c - static_cast<double>(c0);
  Eigen::Vector3d out;
  const S* data = image.value().data();
  for (Index ch = 0; ch < 3; ++ch) {
    const S* plane = data + ch * h * w;
    out[ch] = (1 - fr) * ((1 - fc) * plane[r0 * w + c0] + fc * plane[r0 * w + c1]) +
              fr * ((1 - fc) * plane[r1 * w + c0] + fc * plane[r1 * w + c1]);
  }
  return out;
}

template <typename S>
GeometryModel<S>::GeometryModel(const GeometryConfig& config, Initializer& init) : config_(config) {
  config_.validate();
  const BackboneSpec spec = backbone_spec(config.backbone, config.backbone_bias);
  for (Index c : spec.channels) per_point_dim_ += c / config.depth_resolution;
  const Index w = config.width;
  backbone_ = Backbone<S>(spec, init);
  point_in_ = Linear<S>(token_dim(), w, init);
  point_transformer_ = TransformerEncoder<S>(w, config.layers, config.heads, init);
  point_logit_ = Linear<S>(w, 1, init);
  view_in_ = Linear<S>(w + descriptor_dim(), w, init);
  view_transformer_ = TransformerEncoder<S>(w, config.layers, config.heads, init);
  view_logit_ = Linear<S>(w, 1, init);
}

template <typename S>
std::vector<FeatureVolumeSet<S>> GeometryModel<S>::encode(const std::vector<ContextView<S>>& contexts,
                                                          DepthRange<double> range) const {
  std::vector<FeatureVolumeSet<S>> out;
  out.reserve(contexts.size());
  for (const auto& ctx : contexts) {
    if (ctx.image.shape() != Shape{3, ctx.pose.height, ctx.pose.width}) {
      throw ArgumentError("context image shape " + shape_string(ctx.image.shape()) + " does not match its camera");
    }
    out.push_back(build_volume_set(backbone_, ctx.image, ctx.pose, range, config_.depth_resolution));
  }
  return out;
}

template <typename S>
PointWeighting<S> GeometryModel<S>::weight_points(const Var<S>& tokens, Index group, const Mask& valid,
                                                  const Var<S>* forced_logits) const {
  if (tokens.rank() != 2 || tokens.dim(0) == 0) throw ArgumentError("weight_points: empty token list");
  const Index rows = tokens.dim(0);
  if (group < 1 || rows % group != 0) throw ArgumentError("weight_points: token count not divisible by group");
  if (tokens.dim(1) != token_dim()) {
    throw ArgumentError("weight_points: token width " + std::to_string(tokens.dim(1)) + ", expected " +
                        std::to_string(token_dim()));
  }
  PointWeighting<S> out;
  out.outputs = point_transformer_(point_in_(tokens), group, valid);
  out.weights = group_softmax(forced_logits ? *forced_logits : point_logit_(out.outputs), group, valid);
  out.value = group_weighted_sum(out.weights, out.outputs, group);
  out.group_valid = any_valid_per_group(valid, rows, group);
  if (std::find(out.group_valid.begin(), out.group_valid.end(), 0) != out.group_valid.end()) {
    ArrayX<S> keep(static_cast<Index>(out.group_valid.size()));
    for (Index g = 0; g < keep.size(); ++g) keep[g] = out.group_valid[static_cast<std::size_t>(g)] ? S(1) : S(0);
    out.value = scale_rows(out.value, keep);
  }
  return out;
}

template <typename S>
ViewAggregation<S> GeometryModel<S>::aggregate_views(const Var<S>& ray_features, const Var<S>& descriptors,
                                                     Index views, const Mask& view_valid) const {
  if (views < 1) throw ArgumentError("aggregate_views: at least one context view is required");
  const Index rows = ray_features.dim(0);
  if (rows % views != 0) throw ArgumentError("aggregate_views: rows not divisible by the view count");
  const Index rays = rows / views;
  Var<S> out = view_transformer_(view_in_(concat_cols<S>({ray_features, descriptors})), views, view_valid);

  ViewAggregation<S> agg;
  agg.ray_valid = any_valid_per_group(view_valid, rows, views);
  ArrayX<S> pool = ArrayX<S>::Zero(rows);
  for (Index r = 0; r < rays; ++r) {
    Index count = 0;
    for (Index v = 0; v < views; ++v) count += view_valid.empty() || view_valid[static_cast<std::size_t>(r * views + v)];
    for (Index v = 0; v < views; ++v)
      if (count > 0 && (view_valid.empty() || view_valid[static_cast<std::size_t>(r * views + v)]))
        pool[r * views + v] = S(1) / static_cast<S>(count);
  }
  agg.features = group_weighted_sum(Var<S>::constant(std::move(pool), {rows}), out, views);
  agg.weights = group_softmax(view_logit_(out), views, view_valid);
  return agg;
}

template <typename S>
RayRendering<S> GeometryModel<S>::render_rays(const std::vector<FeatureVolumeSet<S>>& volumes,
                                              const std::vector<ContextView<S>>& contexts,
                                              const CameraPose<double>& target,
                                              const std::vector<Pixel<double>>& pixels,
                                              DepthRange<double> range) const {
  const Index views = static_cast<Index>(contexts.size());
  const Index rays = static_cast<Index>(pixels.size());
  const Index n = config_.points_per_ray;
  const Index freqs = config_.pe_frequencies;
  const Index ddim = descriptor_dim();
  if (views == 0) throw ArgumentError("at least one context view is required");
  if (static_cast<Index>(volumes.size()) != views) throw ArgumentError("render_rays: one volume set per context view");
  if (rays == 0) throw ArgumentError("render_rays: no rays");

  const auto target_rays = cast_rays(target, pixels);
  const auto depths = sample_points(target_rays.front(), range.near, range.far, n).depths;
  Eigen::MatrixX3d dirs(rays, 3);
  for (Index r = 0; r < rays; ++r) dirs.row(r) = (target.rotation * target_rays[r].direction).transpose();
  RowMatrix<double> depth_codes(n, 2 * freqs);
  for (Index k = 0; k < n; ++k)
    depth_codes.row(k) = positional_encode((depths[k] - range.near) / (range.far - range.near), freqs).transpose();

  const Index rows = views * rays * n;
  RayRendering<S> out;
  out.point_valid.assign(static_cast<std::size_t>(rows), 0);
  out.point_colors = Eigen::MatrixXd::Zero(rows, 3);
  RowMatrix<S> geometry(rows, ddim);
  ArrayX<S> depth_column(rows);
  Eigen::MatrixX3d origins(rays * views, 3), dirs_by_ray(rays * views, 3);
  std::vector<Var<S>> features;
  for (Index v = 0; v < views; ++v) {
    const Vec3<double> origin = relative_pose(contexts[static_cast<std::size_t>(v)].pose, target).center();
    Eigen::MatrixX3d points(rays * n, 3);
    for (Index r = 0; r < rays; ++r)
      for (Index k = 0; k < n; ++k) points.row(r * n + k) = target_rays[r].at(depths[k]).transpose();
    auto [sampled, valid] = sample_point_features(volumes[static_cast<std::size_t>(v)], points);
    features.push_back(std::move(sampled));
    const auto& ctx = contexts[static_cast<std::size_t>(v)];
    for (Index r = 0; r < rays; ++r) {
      origins.row(r * views + v) = origin.transpose();
      dirs_by_ray.row(r * views + v) = dirs.row(r);
      for (Index k = 0; k < n; ++k) {
        const Index row = (v * rays + r) * n + k;
        const Vec3<double> p = depths[k] * dirs.row(r).transpose();
        geometry.row(row).template head<6>() = plucker_through(origin, p).vector().transpose().template cast<S>();
        geometry.row(row).tail(2 * freqs) = depth_codes.row(k).template cast<S>();
        depth_column[row] = static_cast<S>(depths[k]);
        if (valid[static_cast<std::size_t>(r * n + k)]) {
          out.point_valid[static_cast<std::size_t>(row)] = 1;
          out.point_colors.row(row) = sample_color(ctx.image, ctx.pose.project(points.row(r * n + k).transpose())).transpose();
        }
      }
    }
  }

  Var<S> tokens = concat_cols<S>({concat(features), Var<S>::constant(Eigen::Map<ArrayX<S>>(geometry.data(), geometry.size()), {rows, ddim})});
  PointWeighting<S> pw = weight_points(tokens, n, out.point_valid);

  // View-major (v, r) groups to ray-major (r, v) rows.
  std::vector<Index> ray_major(static_cast<std::size_t>(rays * views));
  Mask view_valid(static_cast<std::size_t>(rays * views));
  for (Index r = 0; r < rays; ++r)
    for (Index v = 0; v < views; ++v) {
      ray_major[static_cast<std::size_t>(r * views + v)] = v * rays + r;
      view_valid[static_cast<std::size_t>(r * views + v)] = pw.group_valid[static_cast<std::size_t>(v * rays + r)];
    }

  Var<S> expected_depth =
      gather_rows(group_weighted_sum(pw.weights, Var<S>::constant(std::move(depth_column), {rows, 1}), n), ray_major);
  Var<S> descriptors = expected_point_descriptor(expected_depth, origins, dirs_by_ray, range, freqs);
  ViewAggregation<S> agg = aggregate_views(gather_rows(pw.value, ray_major), descriptors, views, view_valid);

  RowMatrix<S> colors = out.point_colors.template cast<S>();
  Var<S> view_colors = gather_rows(
      group_weighted_sum(pw.weights, Var<S>::constant(Eigen::Map<ArrayX<S>>(colors.data(), colors.size()), {rows, 3}), n),
      ray_major);

  out.features = agg.features;
  out.colors = group_weighted_sum(agg.weights, view_colors, views);
  out.point_weights = pw.weights;
  out.view_weights = agg.weights;
  out.ray_valid = agg.ray_valid;
  return out;
}

template <typename S>
AggregateFeatureMap<S> GeometryModel<S>::render_feature_map(const std::vector<ContextView<S>>& contexts,
                                                            const CameraPose<double>& target,
                                                            DepthRange<double> range) const {
  return render(contexts, target, range, 0, 0).feature_map;
}

template <typename S>
ColorEstimate<S> GeometryModel<S>::estimate_color(const std::vector<ContextView<S>>& contexts,
                                                  const CameraPose<double>& target, DepthRange<double> range,
                                                  Index height, Index width) const {
  if (height < 1 || width < 1) throw ArgumentError("estimate_color: empty resolution");
  const auto volumes = encode(contexts, range);
  auto rr = render_rays(volumes, contexts, target, grid_cell_centers(target, height, width), range);
  return {reshape(transpose(rr.colors), {3, height, width}), target};
}

template <typename S>
GeometryRendering<S> GeometryModel<S>::render(const std::vector<ContextView<S>>& contexts,
                                              const CameraPose<double>& target, DepthRange<double> range,
                                              Index color_height, Index color_width) const {
  const Index g = config_.feature_grid;
  const auto volumes = encode(contexts, range);
  auto rr = render_rays(volumes, contexts, target, grid_cell_centers(target, g, g), range);
  GeometryRendering<S> out;
  out.feature_map = {reshape(transpose(rr.features), {config_.width, g, g}), target};
  if (color_height == 0 && color_width == 0) return out;
  if (color_height == g && color_width == g) {
    out.color = {reshape(transpose(rr.colors), {3, g, g}), target};
  } else {
    auto cr = render_rays(volumes, contexts, target, grid_cell_centers(target, color_height, color_width), range);
    out.color = {reshape(transpose(cr.colors), {3, color_height, color_width}), target};
  }
  return out;
}

template <typename S>
void GeometryModel<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  backbone_.register_params(out, prefix + "backbone.");
  point_in_.register_params(out, prefix + "point_in.");
  point_transformer_.register_params(out, prefix + "point_transformer.");
  point_logit_.register_params(out, prefix + "point_logit.");
  view_in_.register_params(out, prefix + "view_in.");
  view_transformer_.register_params(out, prefix + "view_transformer.");
  view_logit_.register_params(out, prefix + "view_logit.");
}

template <typename S>
Var<S> reconstruction_loss(const ColorEstimate<S>& estimate, const Var<S>& ground_truth) {
  if (estimate.image.shape() != ground_truth.shape()) {
    throw ArgumentError("reconstruction_loss: estimate " + shape_string(estimate.image.shape()) + " vs ground truth " +
                        shape_string(ground_truth.shape()));
  }
  return mse(estimate.image, ground_truth);
}

#define NVS_INSTANTIATE_GEOMETRY(S)                                                      \
  template class GeometryModel<S>;                                                       \
  template Eigen::Vector3d sample_color<S>(const Var<S>&, const Pixel<double>&);         \
  template Var<S> reconstruction_loss<S>(const ColorEstimate<S>&, const Var<S>&);

NVS_INSTANTIATE_GEOMETRY(float)
NVS_INSTANTIATE_GEOMETRY(double)

}  // namespace nvs
