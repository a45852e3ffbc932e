#include <nvs/errors.hpp>
#include <nvs/evaluation.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace nvs {

namespace fs = std::filesystem;
using nlohmann::json;

double psnr(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b, double max_value, double cap) {
  if (a.size() != b.size()) throw ArgumentError("psnr: images differ in size");
  if (a.size() == 0) throw ArgumentError("psnr: empty images");
  const double mse = (a - b).square().mean();
  if (!std::isfinite(mse)) throw NumericError("psnr: non-finite image values");
  if (mse == 0) return cap;
  return std::min(cap, 10 * std::log10(max_value * max_value / mse));
}

double psnr(const Var<double>& a, const Var<double>& b, double max_value, double cap) {
  if (a.shape() != b.shape()) throw ArgumentError("psnr: shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  return psnr(a.value(), b.value(), max_value, cap);
}

void EvalProtocol::validate() const {
  if (objects_per_category < 1 || poses_per_object < 2 || context_count < 1) {
    throw ConfigError("protocol counts must be positive (at least 2 poses per object)");
  }
  if (context_count >= poses_per_object) throw ConfigError("context count must be below the poses per object");
  if (image_size < 0) throw ConfigError("image size must be non-negative");
  if (split != "train" && split != "dev" && split != "all") throw ConfigError("split must be train, dev or all");
}

FieldTable fields(EvalProtocol& p) {
  FieldTable t;
  t.add("objects_per_category", &p.objects_per_category)
      .add("poses_per_object", &p.poses_per_object)
      .add("context_count", &p.context_count)
      .add("seed", &p.seed)
      .add("psnr_cap", &p.psnr_cap)
      .add("image_size", &p.image_size)
      .add("split", &p.split);
  return t;
}

std::vector<Index> uniform_frame_indices(Index available, Index count) {
  std::vector<Index> out;
  if (available <= count) {
    for (Index i = 0; i < available; ++i) out.push_back(i);
    return out;
  }
  for (Index i = 0; i < count; ++i) out.push_back(i * available / count);
  return out;
}

namespace {

std::uint64_t hash_name(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

std::mt19937_64 keyed_rng(std::uint64_t seed, const std::string& key) {
  const std::uint64_t h = hash_name(key);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(h),
                    static_cast<std::uint32_t>(h >> 32)};
  return std::mt19937_64(seq);
}

double mean(const std::vector<double>& v) {
  double acc = 0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

}  // namespace

void aggregate(MetricReport& report) {
  std::map<std::string, std::vector<double>> by_class, perceptual_by_class;
  std::vector<double> all, perceptual;
  for (const auto& v : report.views) {
    by_class[v.class_name].push_back(v.psnr);
    all.push_back(v.psnr);
    if (v.perceptual) {
      perceptual_by_class[v.class_name].push_back(*v.perceptual);
      perceptual.push_back(*v.perceptual);
    }
  }
  report.category_psnr.clear();
  report.category_perceptual.clear();
  for (const auto& [name, values] : by_class) report.category_psnr[name] = mean(values);
  for (const auto& [name, values] : perceptual_by_class) report.category_perceptual[name] = mean(values);
  report.overall_psnr = all.empty() ? 0.0 : mean(all);
  report.overall_perceptual = perceptual.empty() ? std::nullopt : std::optional<double>(mean(perceptual));
}

MetricReport run_protocol(const ViewSynthesizer& model, const std::vector<SceneRecord>& dataset,
                          const EvalProtocol& protocol, const ExternalScorers& scorers) {
  protocol.validate();
  MetricReport report;
  report.protocol = protocol;
  std::map<std::string, std::vector<const SceneRecord*>> categories;
  for (const auto& s : dataset) {
    if (protocol.split == "all" || to_string(s.split) == protocol.split) categories[s.class_name].push_back(&s);
  }
  std::vector<Var<double>> predictions, truths;
  for (auto& [class_name, scenes] : categories) {
    std::sort(scenes.begin(), scenes.end(), [](auto* a, auto* b) { return a->scene_id < b->scene_id; });
    if (static_cast<Index>(scenes.size()) < protocol.objects_per_category) {
      report.shortfalls.push_back("category " + class_name + ": " + std::to_string(scenes.size()) + " of " +
                                  std::to_string(protocol.objects_per_category) + " objects");
    } else {
      auto rng = keyed_rng(protocol.seed, "category/" + class_name);
      std::shuffle(scenes.begin(), scenes.end(), rng);
      scenes.resize(static_cast<std::size_t>(protocol.objects_per_category));
      std::sort(scenes.begin(), scenes.end(), [](auto* a, auto* b) { return a->scene_id < b->scene_id; });
    }
    for (const SceneRecord* record : scenes) {
      const std::string key = class_name + "/" + record->scene_id;
      const Index available = static_cast<Index>(record->frames.size());
      const auto frames = uniform_frame_indices(available, protocol.poses_per_object);
      if (available < protocol.poses_per_object) {
        report.shortfalls.push_back("object " + key + ": " + std::to_string(available) + " of " +
                                    std::to_string(protocol.poses_per_object) + " poses");
      }
      if (static_cast<Index>(frames.size()) <= protocol.context_count) {
        report.shortfalls.push_back("object " + key + ": skipped, no frames left after choosing contexts");
        continue;
      }
      SceneRecord subset = *record;
      subset.frames.clear();
      for (Index f : frames) subset.frames.push_back(record->frames[static_cast<std::size_t>(f)]);
      const SceneData<double> scene = load_scene<double>(subset, protocol.image_size);

      auto rng = keyed_rng(protocol.seed, "object/" + key);
      std::vector<Index> order(frames.size());
      std::iota(order.begin(), order.end(), Index{0});
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<Index> contexts(order.begin(), order.begin() + protocol.context_count);
      std::sort(contexts.begin(), contexts.end());
      std::vector<Index> context_frames;
      for (Index c : contexts) context_frames.push_back(frames[static_cast<std::size_t>(c)]);

      for (Index target = 0; target < static_cast<Index>(frames.size()); ++target) {
        if (std::find(contexts.begin(), contexts.end(), target) != contexts.end()) continue;
        const Var<double>& truth = scene.images[static_cast<std::size_t>(target)];
        const Var<double> prediction = model(scene, contexts, target);
        ViewScore score{class_name, record->scene_id, frames[static_cast<std::size_t>(target)], context_frames,
                        psnr(prediction, truth, 1.0, protocol.psnr_cap), std::nullopt};
        if (scorers.perceptual) score.perceptual = scorers.perceptual(prediction, truth);
        if (scorers.distribution) {
          predictions.push_back(prediction);
          truths.push_back(truth);
        }
        report.views.push_back(std::move(score));
      }
    }
  }
  if (scorers.distribution && !predictions.empty()) report.distribution = scorers.distribution(predictions, truths);
  for (const auto& s : report.shortfalls) spdlog::warn("evaluation shortfall: {}", s);
  aggregate(report);
  return report;
}

void write_report(const MetricReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "report.jsonl");
  if (!out) throw ConfigError("cannot write report in " + dir.string());
  EvalProtocol protocol = report.protocol;
  out << json{{"type", "protocol"}, {"protocol", fields(protocol).to_json()}, {"partial", report.partial()}}.dump() << "\n";
  for (const auto& v : report.views) {
    json line{{"type", "view"},      {"class_name", v.class_name}, {"scene_id", v.scene_id},
              {"target", v.target},  {"contexts", v.contexts},     {"context_count", v.contexts.size()},
              {"psnr", v.psnr}};
    if (v.perceptual) line["perceptual"] = *v.perceptual;
    out << line.dump() << "\n";
  }
  for (const auto& [name, value] : report.category_psnr) {
    json line{{"type", "category"}, {"class_name", name}, {"psnr", value}};
    if (report.category_perceptual.count(name)) line["perceptual"] = report.category_perceptual.at(name);
    out << line.dump() << "\n";
  }
  json overall{{"type", "overall"}, {"views", report.views.size()}, {"psnr", report.overall_psnr}};
  if (report.overall_perceptual) overall["perceptual"] = *report.overall_perceptual;
  if (report.distribution) overall["distribution"] = *report.distribution;
  out << overall.dump() << "\n";
  for (const auto& s : report.shortfalls) out << json{{"type", "shortfall"}, {"detail", s}}.dump() << "\n";
  std::ofstream(dir / "summary.txt") << summary_table(report);
}

std::string summary_table(const MetricReport& report) {
  std::ostringstream ss;
  char line[160];
  std::snprintf(line, sizeof line, "contexts: %ld   poses/object: %ld   objects/category: %ld   seed: %llu\n",
                static_cast<long>(report.protocol.context_count), static_cast<long>(report.protocol.poses_per_object),
                static_cast<long>(report.protocol.objects_per_category),
                static_cast<unsigned long long>(report.protocol.seed));
  ss << line << "\n";
  std::snprintf(line, sizeof line, "%-24s %8s %10s\n", "category", "views", "PSNR (dB)");
  ss << line;
  std::map<std::string, long> counts;
  for (const auto& v : report.views) ++counts[v.class_name];
  for (const auto& [name, value] : report.category_psnr) {
    std::snprintf(line, sizeof line, "%-24s %8ld %10.3f\n", name.c_str(), counts[name], value);
    ss << line;
  }
  std::snprintf(line, sizeof line, "%-24s %8zu %10.3f\n", "overall", report.views.size(), report.overall_psnr);
  ss << line;
  if (report.overall_perceptual) ss << "perceptual (mean): " << *report.overall_perceptual << "\n";
  if (report.distribution) ss << "distribution score: " << *report.distribution << "\n";
  if (report.partial()) {
    ss << "\nPARTIAL RESULTS\n";
    for (const auto& s : report.shortfalls) ss << "  " << s << "\n";
  }
  return ss.str();
}

ViewSynthesizer oracle_model() {
  return [](const SceneData<double>& scene, const std::vector<Index>&, Index target) {
    return scene.images.at(static_cast<std::size_t>(target));
  };
}

ViewSynthesizer constant_model() {
  return [](const SceneData<double>& scene, const std::vector<Index>& contexts, Index target) {
    const auto& truth = scene.images.at(static_cast<std::size_t>(target));
    const Index h = truth.dim(1), w = truth.dim(2);
    Vec3<double> color = Vec3<double>::Zero();
    for (Index c : contexts) {
      const auto& img = scene.images.at(static_cast<std::size_t>(c)).value();
      const Index hw = scene.images.at(static_cast<std::size_t>(c)).dim(1) * scene.images.at(static_cast<std::size_t>(c)).dim(2);
      for (Index ch = 0; ch < 3; ++ch) color(ch) += img[ch * hw];
    }
    color /= static_cast<double>(contexts.size());
    return Image::filled(h, w, color).to_var<double>();
  };
}

namespace {

template <typename S>
std::vector<ContextView<S>> cast_contexts(const SceneData<double>& scene, const std::vector<Index>& ids) {
  std::vector<ContextView<S>> out;
  for (Index v : ids) {
    const auto& img = scene.images.at(static_cast<std::size_t>(v));
    out.push_back({Var<S>::constant(img.value().cast<S>(), img.shape()), scene.poses.at(static_cast<std::size_t>(v))});
  }
  return out;
}

template <typename S>
Var<double> to_double(const Var<S>& v) {
  return Var<double>::constant(v.value().template cast<double>(), v.shape());
}

}  // namespace

template <typename S>
ViewSynthesizer estimate_model(const GeometryModel<S>& geometry, DepthRange<double> range) {
  return [&geometry, range](const SceneData<double>& scene, const std::vector<Index>& contexts, Index target) {
    NoGradGuard no_grad;
    const auto& pose = scene.poses.at(static_cast<std::size_t>(target));
    return to_double(geometry.estimate_color(cast_contexts<S>(scene, contexts), pose, range, pose.height, pose.width).image);
  };
}

template <typename S>
ViewSynthesizer guided_model(const GeometryModel<S>& geometry, const GuidanceAdapter<S>* adapter,
                             const DenoiserHandle<S>& denoiser, DepthRange<double> range,
                             std::function<std::string(const std::string&)> prompt, InferenceOptions options) {
  return [&geometry, adapter, &denoiser, range, prompt, options](const SceneData<double>& scene,
                                                                const std::vector<Index>& contexts, Index target) {
    InferenceOptions o = options;
    o.seed = options.seed * 1000003ULL + static_cast<std::uint64_t>(target) + hash_name(scene.scene_id);
    const auto schedule = NoiseSchedule::linear();
    const auto result = nvs_inference(geometry, adapter, denoiser, cast_contexts<S>(scene, contexts),
                                      scene.poses.at(static_cast<std::size_t>(target)), range,
                                      prompt(scene.class_name), o, schedule);
    Var<double> out = to_double(result.image);
    out.value_mutable() = out.value().cwiseMax(0.0).cwiseMin(1.0);
    return out;
  };
}

#define NVS_INSTANTIATE_EVALUATION(S)                                                                              \
  template ViewSynthesizer estimate_model<S>(const GeometryModel<S>&, DepthRange<double>);                         \
  template ViewSynthesizer guided_model<S>(const GeometryModel<S>&, const GuidanceAdapter<S>*,                      \
                                           const DenoiserHandle<S>&, DepthRange<double>,                            \
                                           std::function<std::string(const std::string&)>, InferenceOptions);

NVS_INSTANTIATE_EVALUATION(float)
NVS_INSTANTIATE_EVALUATION(double)

}  // namespace nvs
