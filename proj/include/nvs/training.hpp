#pragma once

// Joint optimization of the geometry prior and the guidance adapter against a
// frozen denoiser, batch sampling, named-tensor blobs and checkpoints.
//
// Checkpoint directory:
//   manifest.json   format_version, step, config snapshot, fingerprints
//   geometry.bin    adapter.bin    optimizer.bin

#include <nvs/config.hpp>
#include <nvs/data.hpp>
#include <nvs/pipeline.hpp>

#include <filesystem>
#include <map>
#include <random>

namespace nvs {

struct TrainConfig {
  Index min_context = 1;
  Index max_context = 4;
  Index batch_size = 1;
  double learning_rate = 1e-4;
  /// Cosine decay to learning_rate * this over `steps`; 1 keeps the rate constant.
  double final_lr_fraction = 1.0;
  Index steps = 1000;
  double recon_weight = 1.0;
  double diffusion_weight = 1.0;
  std::uint64_t seed = 0;
  /// "{class}" is replaced by the scene's class name.
  std::string prompt_template = "a picture of {class}";
  /// Color resolution of the coarse estimate and target images.
  Index image_size = 32;
  double near = 2.0;
  double far = 6.0;
  /// 0 writes a checkpoint only at the end of a run.
  Index checkpoint_every = 0;
  GeometryConfig geometry;

  void validate() const;
  DepthRange<double> depth_range() const { return {near, far}; }
  double learning_rate_at(Index step) const;
  std::string prompt(const std::string& class_name) const;
};

FieldTable fields(GeometryConfig& config);
FieldTable fields(TrainConfig& config);

struct DenoiserConfig {
  /// "toy" or "external".
  std::string backend = "toy";
  std::string model_id = "toy";
  /// Named-tensor blob with "unet.*" entries; empty means train or init a toy model.
  std::string weights_path;
  Index latent_size = 32;
  Index codec_factor = 1;
  std::vector<Index> channels{32, 64, 64};
  Index pretrain_steps = 2000;
  double pretrain_learning_rate = 1e-3;
  std::uint64_t seed = 0;

  UNetConfig unet() const;
};

FieldTable fields(DenoiserConfig& config);

/// Builds the denoiser named by the config. External weights that cannot be
/// found degrade to the toy backend with a warning. `loaded` reports whether
/// weights came from disk.
template <typename Scalar>
DenoiserHandle<Scalar> load_denoiser(const DenoiserConfig& config, bool* loaded = nullptr,
                                     std::vector<std::string>* warnings = nullptr);

struct NamedTensor {
  std::string name;
  Shape shape;
  Eigen::ArrayXd values;
};

/// Binary blob of named float64 tensors.
void write_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(const std::filesystem::path& path);

template <typename Scalar>
std::vector<NamedTensor> to_tensors(const ParamList<Scalar>& params);
/// Copies blob values into the parameters by name; missing or extra names and shape mismatches throw ConfigError.
template <typename Scalar>
void load_tensors(const ParamList<Scalar>& params, const std::vector<NamedTensor>& tensors, const std::string& source);

/// One query with its contexts drawn from a single scene.
struct BatchItem {
  std::size_t scene = 0;
  std::vector<Index> contexts;
  Index query = 0;
};

struct Batch {
  Index id = 0;
  std::vector<BatchItem> items;
};

/// Uniform over scenes with at least two views; scenes with fewer are skipped
/// with a log entry. The context count is uniform in [min, min(max, views - 1)].
template <typename Scalar>
Batch sample_batch(const std::vector<SceneData<Scalar>>& dataset, const TrainConfig& config, std::mt19937_64& rng,
                   Index batch_id = 0);

/// Independent generator for a given step of a seeded run.
std::mt19937_64 step_rng(std::uint64_t seed, Index step, std::uint64_t stream = 0);

/// Per-item diffusion timestep and noise.
template <typename Scalar>
struct DiffusionDraw {
  std::vector<Index> timesteps;
  std::vector<Var<Scalar>> noise;
};

template <typename Scalar>
struct JointLoss {
  Var<Scalar> recon;
  Var<Scalar> diffusion;
  Var<Scalar> total;
};

struct LossReport {
  Index step = 0;
  Index batch_id = 0;
  double recon = 0;
  double diffusion = 0;
  double total = 0;
};

/// Trainable state: geometry prior, guidance adapter and their optimizer.
/// The denoiser is held by reference and never written to.
template <typename Scalar>
class Trainer {
 public:
  Trainer(const TrainConfig& config, const DenoiserHandle<Scalar>& denoiser, std::uint64_t init_seed);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// Geometry ("geometry.") then adapter ("adapter.") parameters.
  ParamList<Scalar> params();
  ParamList<Scalar> geometry_params();
  ParamList<Scalar> adapter_params();

  DiffusionDraw<Scalar> draw(const Batch& batch, const std::vector<SceneData<Scalar>>& dataset,
                             std::mt19937_64& rng) const;

  /// Weighted reconstruction plus noise-prediction loss, averaged over the batch.
  JointLoss<Scalar> loss(const Batch& batch, const std::vector<SceneData<Scalar>>& dataset,
                         const DiffusionDraw<Scalar>& draw) const;

  /// Samples a batch and noise from step_rng(seed, step), takes one optimizer
  /// step, and advances the step counter. Throws NumericError naming the batch
  /// on a non-finite loss.
  LossReport joint_step(const std::vector<SceneData<Scalar>>& dataset);

  Index step() const { return step_; }
  const TrainConfig& config() const { return config_; }
  GeometryModel<Scalar>& geometry() { return geometry_; }
  GuidanceAdapter<Scalar>& adapter() { return adapter_; }
  const GeometryModel<Scalar>& geometry() const { return geometry_; }
  const GuidanceAdapter<Scalar>& adapter() const { return adapter_; }
  const DenoiserHandle<Scalar>& denoiser() const { return *denoiser_; }
  Adam<Scalar>& optimizer() { return adam_; }

  std::vector<ContextView<Scalar>> contexts(const SceneData<Scalar>& scene, const std::vector<Index>& ids) const;

  void save(const std::filesystem::path& dir);
  /// Restores weights, optimizer state and step. Throws ConfigError when the
  /// stored denoiser fingerprint differs from the attached denoiser.
  void load(const std::filesystem::path& dir);

 private:
  TrainConfig config_;
  const DenoiserHandle<Scalar>* denoiser_;
  NoiseSchedule schedule_;
  GeometryModel<Scalar> geometry_;
  GuidanceAdapter<Scalar> adapter_;
  Adam<Scalar> adam_;
  Index step_ = 0;
};

struct CheckpointManifest {
  int format_version = 1;
  Index step = 0;
  nlohmann::json config;
  std::map<std::string, std::string> fingerprints;
};

CheckpointManifest read_manifest(const std::filesystem::path& dir);

/// Checkpoint directories named step_<n> under root, ascending by step.
std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& root);

}  // namespace nvs
