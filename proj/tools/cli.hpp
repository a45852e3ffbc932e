#pragma once

// Command-line front end: ingest, synth, train, render, evaluate.
//
// Every command resolves its settings as defaults < --config file < --set
// overrides < dedicated flags and writes run.json into its output directory.
// Exit codes: 0 success, 1 user error, 2 internal error.

#include <nvs/evaluation.hpp>
#include <nvs/training.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace nvs::cli {

/// Environment variable naming the default dataset root.
inline constexpr const char* kDatasetEnv = "NVS_DATASET_ROOT";

struct RunSettings {
  std::string dataset;
  TrainConfig train;
  DenoiserConfig denoiser;
  InferenceOptions render;
  EvalProtocol evaluate;
};

FieldTable fields(RunSettings& settings);

/// Defaults, then the optional JSON file, then key=value overrides.
RunSettings resolve_settings(const std::string& config_path, const std::vector<std::string>& overrides);

/// A user-facing failure (exit code 1).
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IngestResult {
  std::vector<SceneRecord> scenes;
  std::vector<std::string> warnings;
};
IngestResult cmd_ingest(const std::filesystem::path& root, const std::filesystem::path& out);

SceneRecord cmd_synth(const std::filesystem::path& spec, const std::filesystem::path& out);

struct TrainOutcome {
  Index first_step = 0;
  Index last_step = 0;
  std::filesystem::path checkpoint;
};
/// Writes config.json, denoiser.bin (when trained here), loss_log.csv and
/// checkpoints/step_<n> under out. Refuses a non-empty run directory unless resuming.
TrainOutcome cmd_train(RunSettings settings, const std::filesystem::path& out, bool resume);

struct RenderRequest {
  std::filesystem::path run;
  std::filesystem::path checkpoint;  // empty: latest in run
  std::string scene;                 // scene id or class/scene id
  std::vector<Index> contexts;
  Index target = -1;                 // frame id
  std::filesystem::path target_pose;  // frame-style JSON pose; overrides target
  std::string prompt;                 // empty: the class prompt
  bool compare_unguided = false;
};
/// Writes estimate.png, sample.png and optionally unguided.png into out.
void cmd_render(const RunSettings& settings, const RenderRequest& request, const std::filesystem::path& out);

enum class EvalModel { full, estimate, oracle, constant };
EvalModel parse_eval_model(const std::string& name);

MetricReport cmd_evaluate(const RunSettings& settings, const std::filesystem::path& run, EvalModel model,
                          const std::filesystem::path& out);

/// Parses argv and dispatches; messages go to err.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

std::string sha256_file(const std::filesystem::path& path);

}  // namespace nvs::cli
