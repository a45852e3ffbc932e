#pragma once

// Novel view metrics and the per-category evaluation protocol: objects per
// category, uniformly spaced frames per object, seeded context selection,
// and the line-delimited report plus summary table.

#include <nvs/config.hpp>
#include <nvs/data.hpp>
#include <nvs/pipeline.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>

namespace nvs {

/// 10 log10(max^2 / MSE), or `cap` when the images are identical or the value exceeds it.
double psnr(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b, double max_value = 1.0, double cap = 99.0);
double psnr(const Var<double>& a, const Var<double>& b, double max_value = 1.0, double cap = 99.0);

struct EvalProtocol {
  Index objects_per_category = 10;
  Index poses_per_object = 32;
  Index context_count = 2;
  std::uint64_t seed = 0;
  double psnr_cap = 99.0;
  /// Frames are resampled to image_size x image_size; 0 keeps the stored size.
  Index image_size = 32;
  /// "train", "dev" or "all".
  std::string split = "all";

  void validate() const;
};

FieldTable fields(EvalProtocol& protocol);

/// round-down(i * available / count) for i < count; all frames when fewer are available.
std::vector<Index> uniform_frame_indices(Index available, Index count);

/// Synthesizes view `target` of a scene from the listed context views.
using ViewSynthesizer =
    std::function<Var<double>(const SceneData<double>& scene, const std::vector<Index>& contexts, Index target)>;
using PerceptualScorer = std::function<double(const Var<double>& prediction, const Var<double>& truth)>;
using DistributionScorer =
    std::function<double(const std::vector<Var<double>>& predictions, const std::vector<Var<double>>& truths)>;

struct ExternalScorers {
  PerceptualScorer perceptual;
  DistributionScorer distribution;
};

struct ViewScore {
  std::string class_name;
  std::string scene_id;
  Index target = 0;             // frame index in the scene record
  std::vector<Index> contexts;  // frame indices in the scene record
  double psnr = 0;
  std::optional<double> perceptual;
};

struct MetricReport {
  EvalProtocol protocol;
  std::vector<ViewScore> views;
  std::map<std::string, double> category_psnr;
  double overall_psnr = 0;
  std::map<std::string, double> category_perceptual;
  std::optional<double> overall_perceptual;
  std::optional<double> distribution;
  std::vector<std::string> shortfalls;

  bool partial() const { return !shortfalls.empty(); }
};

/// Means per category and overall, recomputed from the per-view values.
void aggregate(MetricReport& report);

/// Runs the protocol over every category in the dataset. Categories or
/// objects with too few scenes or frames are evaluated as far as possible and
/// listed in `shortfalls`.
MetricReport run_protocol(const ViewSynthesizer& model, const std::vector<SceneRecord>& dataset,
                          const EvalProtocol& protocol, const ExternalScorers& scorers = {});

/// report.jsonl (one JSON object per line) and summary.txt.
void write_report(const MetricReport& report, const std::filesystem::path& dir);
std::string summary_table(const MetricReport& report);

/// Returns the ground truth.
ViewSynthesizer oracle_model();
/// Fills the view with the mean top-left pixel color of the contexts.
ViewSynthesizer constant_model();
/// Coarse color estimate only.
template <typename Scalar>
ViewSynthesizer estimate_model(const GeometryModel<Scalar>& geometry, DepthRange<double> range);
/// Full pipeline; the sampler seed is mixed with the target frame. Output clamped to [0, 1].
template <typename Scalar>
ViewSynthesizer guided_model(const GeometryModel<Scalar>& geometry, const GuidanceAdapter<Scalar>* adapter,
                             const DenoiserHandle<Scalar>& denoiser, DepthRange<double> range,
                             std::function<std::string(const std::string&)> prompt, InferenceOptions options);

}  // namespace nvs
