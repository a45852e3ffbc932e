#include <nvs/errors.hpp>
#include <nvs/training.hpp>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace nvs {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (min_context < 1 || max_context > 4 || min_context > max_context) {
    throw ConfigError("context views range must satisfy 1 <= min <= max <= 4");
  }
  if (batch_size < 1 || steps < 0 || image_size < 1 || checkpoint_every < 0) {
    throw ConfigError("batch size and image size must be positive, step counts non-negative");
  }
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (!(final_lr_fraction > 0 && final_lr_fraction <= 1)) throw ConfigError("final_lr_fraction must lie in (0, 1]");
  if (!(recon_weight >= 0) || !(diffusion_weight >= 0)) throw ConfigError("loss weights must be non-negative");
  if (!(near > 0 && near < far)) throw ConfigError("depth range must satisfy 0 < near < far");
  geometry.validate();
}

std::string TrainConfig::prompt(const std::string& class_name) const {
  std::string out = prompt_template;
  for (auto pos = out.find("{class}"); pos != std::string::npos; pos = out.find("{class}", pos + class_name.size())) {
    out.replace(pos, 7, class_name);
  }
  return out;
}

double TrainConfig::learning_rate_at(Index step) const {
  if (final_lr_fraction == 1.0 || steps <= 0) return learning_rate;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(steps), 0.0, 1.0);
  const double cosine = 0.5 * (1 + std::cos(std::numbers::pi * progress));
  return learning_rate * (final_lr_fraction + (1 - final_lr_fraction) * cosine);
}

FieldTable fields(GeometryConfig& c) {
  FieldTable t;
  t.add("backbone", &c.backbone)
      .add("backbone_bias", &c.backbone_bias)
      .add("depth_resolution", &c.depth_resolution)
      .add("points_per_ray", &c.points_per_ray)
      .add("width", &c.width)
      .add("layers", &c.layers)
      .add("heads", &c.heads)
      .add("pe_frequencies", &c.pe_frequencies)
      .add("feature_grid", &c.feature_grid);
  return t;
}

FieldTable fields(TrainConfig& c) {
  FieldTable t;
  t.add("min_context", &c.min_context)
      .add("max_context", &c.max_context)
      .add("batch_size", &c.batch_size)
      .add("learning_rate", &c.learning_rate)
      .add("final_lr_fraction", &c.final_lr_fraction)
      .add("steps", &c.steps)
      .add("recon_weight", &c.recon_weight)
      .add("diffusion_weight", &c.diffusion_weight)
      .add("seed", &c.seed)
      .add("prompt_template", &c.prompt_template)
      .add("image_size", &c.image_size)
      .add("near", &c.near)
      .add("far", &c.far)
      .add("checkpoint_every", &c.checkpoint_every)
      .add("geometry", fields(c.geometry));
  return t;
}

UNetConfig DenoiserConfig::unet() const {
  UNetConfig cfg;
  cfg.channels = channels;
  return cfg;
}

FieldTable fields(DenoiserConfig& c) {
  FieldTable t;
  t.add("backend", &c.backend)
      .add("model_id", &c.model_id)
      .add("weights_path", &c.weights_path)
      .add("latent_size", &c.latent_size)
      .add("codec_factor", &c.codec_factor)
      .add("channels", &c.channels)
      .add("pretrain_steps", &c.pretrain_steps)
      .add("pretrain_learning_rate", &c.pretrain_learning_rate)
      .add("seed", &c.seed);
  return t;
}

template <typename S>
DenoiserHandle<S> load_denoiser(const DenoiserConfig& config, bool* loaded, std::vector<std::string>* warnings) {
  if (config.backend != "toy" && config.backend != "external") {
    throw ConfigError("unknown denoiser backend '" + config.backend + "' (valid: toy, external)");
  }
  if (config.codec_factor < 1) throw ConfigError("codec factor must be positive");
  DenoiserHandle<S> handle = make_toy_denoiser<S>(config.unet(), config.latent_size, config.seed);
  handle.codec.factor = config.codec_factor;
  if (loaded) *loaded = false;
  const bool have_weights = !config.weights_path.empty() && fs::exists(config.weights_path);
  if (config.backend == "external" && !have_weights) {
    const std::string msg = "external denoiser '" + config.model_id + "': weights '" + config.weights_path +
                            "' not found, falling back to the toy backend";
    spdlog::warn("{}", msg);
    if (warnings) warnings->push_back(msg);
    return handle;
  }
  if (!config.weights_path.empty()) {
    if (!have_weights) throw ConfigError("denoiser weights '" + config.weights_path + "' not found");
    load_tensors(handle.params(), read_tensors(config.weights_path), config.weights_path);
    handle.backend = config.backend == "external" ? DenoiserBackend::external : DenoiserBackend::toy;
    handle.model_id = config.model_id;
    handle.freeze();
    if (loaded) *loaded = true;
  }
  return handle;
}

namespace {

constexpr char kBlobMagic[8] = {'N', 'V', 'S', 'B', 'L', 'O', 'B', '1'};

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const fs::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ConfigError("truncated tensor blob " + path.string());
  return v;
}

}  // namespace

void write_tensors(const fs::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(kBlobMagic, sizeof kBlobMagic);
  put<std::uint64_t>(out, tensors.size());
  for (const auto& t : tensors) {
    if (numel(t.shape) != t.values.size()) throw ArgumentError("tensor '" + t.name + "' shape/value mismatch");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (Index d : t.shape) put<std::int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(sizeof(double) * t.values.size()));
  }
  if (!out) throw ConfigError("failed writing " + path.string());
}

std::vector<NamedTensor> read_tensors(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open tensor blob " + path.string());
  char magic[sizeof kBlobMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kBlobMagic, sizeof magic) != 0) {
    throw ConfigError(path.string() + " is not a tensor blob");
  }
  const auto count = get<std::uint64_t>(in, path);
  std::vector<NamedTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(get<std::uint32_t>(in, path));
    in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    const auto rank = get<std::uint32_t>(in, path);
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(get<std::int64_t>(in, path));
    t.values.resize(numel(t.shape));
    if (!in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(sizeof(double) * t.values.size()))) {
      throw ConfigError("truncated tensor blob " + path.string());
    }
    out.push_back(std::move(t));
  }
  return out;
}

template <typename S>
std::vector<NamedTensor> to_tensors(const ParamList<S>& params) {
  std::vector<NamedTensor> out;
  for (const auto& [name, v] : params) out.push_back({name, v->shape(), v->value().template cast<double>()});
  return out;
}

template <typename S>
void load_tensors(const ParamList<S>& params, const std::vector<NamedTensor>& tensors, const std::string& source) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  if (by_name.size() != params.size()) {
    throw ConfigError(source + ": expected " + std::to_string(params.size()) + " tensors, found " +
                      std::to_string(by_name.size()));
  }
  for (const auto& [name, v] : params) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError(source + ": missing tensor '" + name + "'");
    if (it->second->shape != v->shape()) {
      throw ConfigError(source + ": tensor '" + name + "' has shape " + shape_string(it->second->shape) + ", expected " +
                        shape_string(v->shape()));
    }
    v->value_mutable() = it->second->values.template cast<S>();
  }
}

std::mt19937_64 step_rng(std::uint64_t seed, Index step, std::uint64_t stream) {
  const auto s = static_cast<std::uint64_t>(step);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(s),
                    static_cast<std::uint32_t>(s >> 32), static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

template <typename S>
Batch sample_batch(const std::vector<SceneData<S>>& dataset, const TrainConfig& config, std::mt19937_64& rng,
                   Index batch_id) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].view_count() >= 2) {
      eligible.push_back(i);
    } else {
      spdlog::debug("batch {}: scene {} skipped ({} view)", batch_id, dataset[i].scene_id, dataset[i].view_count());
    }
  }
  if (eligible.empty()) throw ArgumentError("sample_batch: no scene has at least 2 views");
  Batch batch;
  batch.id = batch_id;
  for (Index b = 0; b < config.batch_size; ++b) {
    BatchItem item;
    item.scene = eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)];
    const Index n = dataset[item.scene].view_count();
    item.query = std::uniform_int_distribution<Index>(0, n - 1)(rng);
    const Index lo = std::min(config.min_context, n - 1), hi = std::min(config.max_context, n - 1);
    const Index count = std::uniform_int_distribution<Index>(lo, hi)(rng);
    std::vector<Index> others;
    for (Index v = 0; v < n; ++v)
      if (v != item.query) others.push_back(v);
    for (Index k = 0; k < count; ++k) {
      const auto j = std::uniform_int_distribution<std::size_t>(static_cast<std::size_t>(k), others.size() - 1)(rng);
      std::swap(others[static_cast<std::size_t>(k)], others[j]);
    }
    item.contexts.assign(others.begin(), others.begin() + count);
    std::sort(item.contexts.begin(), item.contexts.end());
    batch.items.push_back(std::move(item));
  }
  return batch;
}

template <typename S>
Trainer<S>::Trainer(const TrainConfig& config, const DenoiserHandle<S>& denoiser, std::uint64_t init_seed)
    : config_(config), denoiser_(&denoiser), schedule_(NoiseSchedule::linear()) {
  config_.validate();
  if (config_.geometry.feature_grid != denoiser.latent_size) {
    throw ConfigError("geometry feature grid " + std::to_string(config_.geometry.feature_grid) +
                      " must equal the denoiser latent size " + std::to_string(denoiser.latent_size));
  }
  if (config_.image_size != denoiser.latent_size * denoiser.codec.factor) {
    throw ConfigError("image size must equal latent size times the codec factor");
  }
  Initializer init(init_seed);
  geometry_ = GeometryModel<S>(config_.geometry, init);
  adapter_ = GuidanceAdapter<S>(denoiser.unet, config_.geometry.width, init);
  adam_ = Adam<S>(params(), {config_.learning_rate});
}

template <typename S>
ParamList<S> Trainer<S>::geometry_params() {
  ParamList<S> out;
  geometry_.register_params(out, "geometry.");
  return out;
}

template <typename S>
ParamList<S> Trainer<S>::adapter_params() {
  ParamList<S> out;
  adapter_.register_params(out, "adapter.");
  return out;
}

template <typename S>
ParamList<S> Trainer<S>::params() {
  ParamList<S> out = geometry_params();
  for (auto& p : adapter_params()) out.push_back(p);
  return out;
}

template <typename S>
std::vector<ContextView<S>> Trainer<S>::contexts(const SceneData<S>& scene, const std::vector<Index>& ids) const {
  std::vector<ContextView<S>> out;
  for (Index v : ids) {
    if (v < 0 || v >= scene.view_count()) throw BoundsError("view " + std::to_string(v) + " not in scene " + scene.scene_id);
    out.push_back({scene.images[static_cast<std::size_t>(v)], scene.poses[static_cast<std::size_t>(v)]});
  }
  return out;
}

template <typename S>
DiffusionDraw<S> Trainer<S>::draw(const Batch& batch, const std::vector<SceneData<S>>&, std::mt19937_64& rng) const {
  DiffusionDraw<S> out;
  const Index latent = denoiser_->latent_size, channels = denoiser_->unet.config().latent_channels;
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    out.timesteps.push_back(std::uniform_int_distribution<Index>(1, schedule_.num_steps())(rng));
    out.noise.push_back(gaussian<S>({channels, latent, latent}, rng));
  }
  return out;
}

template <typename S>
JointLoss<S> Trainer<S>::loss(const Batch& batch, const std::vector<SceneData<S>>& dataset,
                              const DiffusionDraw<S>& draw) const {
  JointLoss<S> out;
  const auto range = config_.depth_range();
  const S inv_batch = S(1) / static_cast<S>(batch.items.size());
  for (std::size_t i = 0; i < batch.items.size(); ++i) {
    const auto& item = batch.items[i];
    const auto& scene = dataset.at(item.scene);
    const auto& target = scene.poses[static_cast<std::size_t>(item.query)];
    const auto& truth = scene.images[static_cast<std::size_t>(item.query)];
    if (truth.dim(1) != config_.image_size || truth.dim(2) != config_.image_size) {
      throw ArgumentError("scene " + scene.scene_id + " images are " + shape_string(truth.shape()) + ", expected size " +
                          std::to_string(config_.image_size));
    }
    const auto rendering = geometry_.render(contexts(scene, item.contexts), target, range, truth.dim(1), truth.dim(2));
    const Var<S> recon = reconstruction_loss(rendering.color, truth);

    const Index t = draw.timesteps[i];
    const Var<S>& eps = draw.noise[i];
    const Var<S> x_t = perturb(denoiser_->codec.encode(truth), t, eps, schedule_);
    const Var<S> text = denoiser_->text.template encode<S>(config_.prompt(scene.class_name));
    const GuidanceSignals<S> signals = adapter_(rendering.feature_map.features, x_t, t, text);
    const Var<S> diffusion = mse(denoiser_->predict(x_t, t, text, &signals, S(1)), eps);

    out.recon = out.recon.defined() ? add(out.recon, recon) : recon;
    out.diffusion = out.diffusion.defined() ? add(out.diffusion, diffusion) : diffusion;
  }
  out.recon = scale(out.recon, inv_batch);
  out.diffusion = scale(out.diffusion, inv_batch);
  out.total = add(scale(out.recon, static_cast<S>(config_.recon_weight)),
                  scale(out.diffusion, static_cast<S>(config_.diffusion_weight)));
  return out;
}

template <typename S>
LossReport Trainer<S>::joint_step(const std::vector<SceneData<S>>& dataset) {
  auto rng = step_rng(config_.seed, step_);
  const Batch batch = sample_batch(dataset, config_, rng, step_);
  const auto noise = draw(batch, dataset, rng);
  adam_.zero_grad();
  const JointLoss<S> l = loss(batch, dataset, noise);
  LossReport report{step_ + 1, batch.id, static_cast<double>(l.recon.item()), static_cast<double>(l.diffusion.item()),
                    static_cast<double>(l.total.item())};
  if (!std::isfinite(report.total)) {
    std::string items;
    for (const auto& it : batch.items) items += " " + dataset[it.scene].scene_id + ":" + std::to_string(it.query);
    throw NumericError("non-finite loss in batch " + std::to_string(batch.id) + " (scene:query" + items + ")");
  }
  l.total.backward();
  adam_.set_learning_rate(config_.learning_rate_at(step_));
  adam_.step();
  ++step_;
  return report;
}

template <typename S>
void Trainer<S>::save(const fs::path& dir) {
  fs::create_directories(dir);
  write_tensors(dir / "geometry.bin", to_tensors(geometry_params()));
  write_tensors(dir / "adapter.bin", to_tensors(adapter_params()));
  std::vector<NamedTensor> opt;
  for (const auto& [name, values] : adam_.state()) opt.push_back({name, {values.size()}, values});
  write_tensors(dir / "optimizer.bin", opt);
  json manifest = {{"format_version", 1},
                   {"step", step_},
                   {"config", fields(config_).to_json()},
                   {"denoiser", {{"backend", denoiser_->backend == DenoiserBackend::toy ? "toy" : "external"},
                                 {"model_id", denoiser_->model_id}}},
                   {"fingerprints",
                    {{"geometry", fingerprint(geometry_params())},
                     {"adapter", fingerprint(adapter_params())},
                     {"denoiser", denoiser_->fingerprint()}}}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ConfigError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

template <typename S>
void Trainer<S>::load(const fs::path& dir) {
  const CheckpointManifest manifest = read_manifest(dir);
  const std::string denoiser_fp = denoiser_->fingerprint();
  if (manifest.fingerprints.count("denoiser") && manifest.fingerprints.at("denoiser") != denoiser_fp) {
    throw ConfigError("checkpoint " + dir.string() + " was trained against a different denoiser (fingerprint " +
                      manifest.fingerprints.at("denoiser") + ", attached " + denoiser_fp + ")");
  }
  load_tensors(geometry_params(), read_tensors(dir / "geometry.bin"), (dir / "geometry.bin").string());
  load_tensors(adapter_params(), read_tensors(dir / "adapter.bin"), (dir / "adapter.bin").string());
  std::map<std::string, ArrayX<double>> state;
  for (auto& t : read_tensors(dir / "optimizer.bin")) state[t.name] = std::move(t.values);
  adam_.load_state(state);
  step_ = manifest.step;
}

CheckpointManifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw ConfigError("checkpoint manifest " + path.string() + " not found");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("checkpoint manifest " + path.string() + ": " + e.what());
  }
  CheckpointManifest m;
  m.format_version = j.value("format_version", 0);
  if (m.format_version < 1) throw ConfigError(path.string() + ": missing format_version");
  if (m.format_version > 1) {
    spdlog::warn("{}: format version {} is newer than this build; reading known fields only", path.string(),
                 m.format_version);
  }
  m.step = j.at("step").get<Index>();
  m.config = j.value("config", json::object());
  if (j.contains("fingerprints")) m.fingerprints = j.at("fingerprints").get<std::map<std::string, std::string>>();
  return m;
}

std::vector<fs::path> list_checkpoints(const fs::path& root) {
  std::vector<std::pair<Index, fs::path>> found;
  if (fs::is_directory(root)) {
    for (const auto& entry : fs::directory_iterator(root)) {
      const std::string name = entry.path().filename().string();
      if (!entry.is_directory() || name.rfind("step_", 0) != 0 || !fs::exists(entry.path() / "manifest.json")) continue;
      try {
        found.emplace_back(std::stol(name.substr(5)), entry.path());
      } catch (const std::exception&) {
      }
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& f : found) out.push_back(f.second);
  return out;
}

#define NVS_INSTANTIATE_TRAINING(S)                                                                              \
  template DenoiserHandle<S> load_denoiser<S>(const DenoiserConfig&, bool*, std::vector<std::string>*);          \
  template std::vector<NamedTensor> to_tensors<S>(const ParamList<S>&);                                          \
  template void load_tensors<S>(const ParamList<S>&, const std::vector<NamedTensor>&, const std::string&);      \
  template Batch sample_batch<S>(const std::vector<SceneData<S>>&, const TrainConfig&, std::mt19937_64&, Index); \
  template class Trainer<S>;

NVS_INSTANTIATE_TRAINING(float)
NVS_INSTANTIATE_TRAINING(double)

}  // namespace nvs
