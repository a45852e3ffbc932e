#include "cli.hpp"

#include <nvs/errors.hpp>

#include <CLI11.hpp>
#include <openssl/evp.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

namespace nvs::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

FieldTable fields(InferenceOptions& o) {
  FieldTable t;
  t.add("steps", &o.steps)
      .add("perturb_steps", &o.perturb_steps)
      .add("lambda", &o.lambda)
      .add("random_start", &o.random_start)
      .add("clip_denoised", &o.clip_denoised)
      .add("seed", &o.seed);
  return t;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t byte = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n');
    throw ParseError(path.string(), static_cast<std::size_t>(line), e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string dataset_root(const RunSettings& settings) {
  if (!settings.dataset.empty()) return settings.dataset;
  if (const char* env = std::getenv(kDatasetEnv)) return env;
  throw UserError(std::string("no dataset given (set 'dataset' in the config, pass --dataset, or export ") + kDatasetEnv + ")");
}

struct Provenance {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  std::map<std::string, std::string> inputs;

  void add_input(const fs::path& path) {
    if (fs::is_regular_file(path)) inputs[path.string()] = sha256_file(path);
  }
  void write(const fs::path& dir) const {
    fs::create_directories(dir);
    write_json(dir / "run.json", {{"command", command},
                                  {"argv", argv},
                                  {"version", NVS_VERSION},
                                  {"config", config},
                                  {"inputs", inputs}});
  }
};

thread_local Provenance* current_run = nullptr;

void record_inputs(const std::vector<SceneRecord>& scenes) {
  if (!current_run) return;
  for (const auto& s : scenes)
    if (!s.frames.empty()) current_run->add_input(s.frames.front().image.parent_path().parent_path() / "frames.json");
}

std::vector<SceneData<float>> load_training_set(const RunSettings& settings) {
  const auto records = ingest(dataset_root(settings));
  record_inputs(records);
  std::vector<SceneData<float>> out;
  for (const auto& r : records)
    if (r.split == Split::train) out.push_back(load_scene<float>(r, settings.train.image_size));
  if (out.empty()) throw UserError("dataset " + dataset_root(settings) + " has no training scenes");
  return out;
}

void write_loss_log(const fs::path& path, const std::vector<LossReport>& rows, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw UserError("cannot write " + path.string());
  if (!append) out << "step,batch_id,recon,diffusion,total\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%ld,%ld,%.9g,%.9g,%.9g\n", static_cast<long>(r.step), static_cast<long>(r.batch_id),
                  r.recon, r.diffusion, r.total);
    out << line;
  }
}

// Drops log rows past the resumed checkpoint.
void truncate_loss_log(const fs::path& path, Index step) {
  std::ifstream in(path);
  std::string header, line, kept;
  std::getline(in, header);
  while (std::getline(in, line))
    if (!line.empty() && std::stol(line.substr(0, line.find(','))) <= step) kept += line + "\n";
  in.close();
  std::ofstream(path, std::ios::trunc) << header << "\n" << kept;
}

/// Denoiser for a run: stored weights when present, otherwise a toy model
/// pretrained on the training images and saved next to the run.
DenoiserHandle<float> run_denoiser(RunSettings& settings, const fs::path& run_dir,
                                   const std::vector<SceneData<float>>* training) {
  bool loaded = false;
  auto handle = load_denoiser<float>(settings.denoiser, &loaded);
  if (loaded) {
    if (current_run) current_run->add_input(settings.denoiser.weights_path);
    return handle;
  }
  if (!training) throw UserError("run " + run_dir.string() + " has no denoiser weights");
  std::vector<Var<float>> images;
  std::vector<std::string> prompts;
  for (const auto& scene : *training) {
    for (const auto& img : scene.images) {
      images.push_back(img);
      prompts.push_back(settings.train.prompt(scene.class_name));
    }
  }
  spdlog::info("pretraining toy denoiser on {} images for {} steps", images.size(), settings.denoiser.pretrain_steps);
  const auto losses = toy_denoiser_train(handle, images, prompts, NoiseSchedule::linear(),
                                         {settings.denoiser.pretrain_steps, settings.denoiser.pretrain_learning_rate,
                                          settings.denoiser.seed});
  if (!losses.empty()) spdlog::info("toy denoiser loss {:.4f} -> {:.4f}", losses.front(), losses.back());
  const fs::path weights = run_dir / "denoiser.bin";
  write_tensors(weights, to_tensors(handle.params()));
  settings.denoiser.weights_path = fs::absolute(weights).string();
  return handle;
}

RunSettings run_settings(const fs::path& run, const RunSettings& fallback) {
  if (!fs::exists(run / "config.json")) return fallback;
  RunSettings s;
  fields(s).apply(read_json(run / "config.json"), (run / "config.json").string());
  if (current_run) current_run->add_input(run / "config.json");
  return s;
}

fs::path resolve_checkpoint(const fs::path& run, const fs::path& explicit_path) {
  if (!explicit_path.empty()) return explicit_path;
  const auto all = list_checkpoints(run / "checkpoints");
  if (all.empty()) throw UserError("no checkpoint found under " + (run / "checkpoints").string());
  return all.back();
}

}  // namespace

FieldTable fields(RunSettings& s) {
  FieldTable t;
  t.add("dataset", &s.dataset)
      .add("train", nvs::fields(s.train))
      .add("denoiser", nvs::fields(s.denoiser))
      .add("render", fields(s.render))
      .add("evaluate", nvs::fields(s.evaluate));
  return t;
}

RunSettings resolve_settings(const std::string& config_path, const std::vector<std::string>& overrides) {
  RunSettings s;
  auto table = fields(s);
  if (!config_path.empty()) {
    table.apply(read_json(config_path), config_path);
    if (current_run) current_run->add_input(config_path);
  }
  for (const auto& o : overrides) table.apply_override(o);
  return s;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  char buffer[1 << 16];
  while (in.read(buffer, sizeof buffer) || in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buffer, static_cast<std::size_t>(in.gcount()));
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

IngestResult cmd_ingest(const fs::path& root, const fs::path& out) {
  IngestResult result;
  result.scenes = ingest(root, &result.warnings);
  record_inputs(result.scenes);
  if (!out.empty()) {
    json scenes = json::array();
    for (const auto& s : result.scenes) {
      scenes.push_back({{"class_name", s.class_name},
                        {"scene_id", s.scene_id},
                        {"split", to_string(s.split)},
                        {"frames", s.frames.size()}});
    }
    fs::create_directories(out);
    write_json(out / "scenes.json", {{"root", fs::absolute(root).string()}, {"scenes", scenes}, {"warnings", result.warnings}});
  }
  return result;
}

SceneRecord cmd_synth(const fs::path& spec_path, const fs::path& out) {
  const auto spec = parse_synthetic_spec(read_json(spec_path));
  if (current_run) current_run->add_input(spec_path);
  return write_synthetic_scene(spec, out);
}

TrainOutcome cmd_train(RunSettings settings, const fs::path& out, bool resume) {
  const fs::path ckpt_root = out / "checkpoints";
  const auto existing = list_checkpoints(ckpt_root);
  if (resume) {
    if (existing.empty()) throw UserError("--resume: no checkpoint under " + ckpt_root.string());
    // The stored run settings win; only the step budget may be extended.
    const Index steps = settings.train.steps;
    settings = run_settings(out, settings);
    settings.train.steps = std::max(settings.train.steps, steps);
  } else if (fs::exists(out) && !fs::is_empty(out)) {
    throw UserError("output directory " + out.string() + " is not empty; pass --resume to continue the run there");
  }
  settings.train.validate();
  fs::create_directories(ckpt_root);
  const auto dataset = load_training_set(settings);
  auto denoiser = run_denoiser(settings, out, &dataset);
  denoiser.freeze();
  const std::string denoiser_fp = denoiser.fingerprint();
  if (current_run) current_run->config = fields(settings).to_json();
  write_json(out / "config.json", fields(settings).to_json());

  Trainer<float> trainer(settings.train, denoiser, settings.train.seed);
  TrainOutcome outcome;
  const fs::path log = out / "loss_log.csv";
  if (resume) {
    trainer.load(existing.back());
    truncate_loss_log(log, trainer.step());
    spdlog::info("resumed from {} at step {}", existing.back().string(), trainer.step());
  } else {
    write_loss_log(log, {}, false);
  }
  outcome.first_step = trainer.step() + 1;

  auto checkpoint = [&] {
    if (denoiser.fingerprint() != denoiser_fp) throw std::logic_error("denoiser parameters changed during training");
    char name[32];
    std::snprintf(name, sizeof name, "step_%ld", static_cast<long>(trainer.step()));
    outcome.checkpoint = ckpt_root / name;
    trainer.save(outcome.checkpoint);
    spdlog::info("checkpoint {}", outcome.checkpoint.string());
  };
  std::vector<LossReport> pending;
  while (trainer.step() < settings.train.steps) {
    const auto report = trainer.joint_step(dataset);
    pending.push_back(report);
    if (report.step % 50 == 0) {
      spdlog::info("step {} recon {:.5f} diffusion {:.5f} total {:.5f}", report.step, report.recon, report.diffusion,
                   report.total);
    }
    const bool periodic = settings.train.checkpoint_every > 0 && report.step % settings.train.checkpoint_every == 0;
    if (periodic || trainer.step() == settings.train.steps) {
      write_loss_log(log, pending, true);
      pending.clear();
      checkpoint();
    }
  }
  if (outcome.checkpoint.empty()) checkpoint();
  outcome.last_step = trainer.step();
  return outcome;
}

namespace {

const SceneRecord& find_scene(const std::vector<SceneRecord>& scenes, const std::string& name) {
  for (const auto& s : scenes)
    if (s.scene_id == name || s.class_name + "/" + s.scene_id == name) return s;
  throw UserError("unknown scene '" + name + "'");
}

CameraPose<double> read_pose(const fs::path& path, long height, long width) {
  const json j = read_json(path);
  CameraPose<double> pose;
  try {
    const auto r = j.at("R").get<std::vector<double>>();
    const auto t = j.at("t").get<std::vector<double>>();
    if (r.size() != 9 || t.size() != 3) throw UserError("pose needs 9 rotation and 3 translation entries");
    for (int i = 0; i < 9; ++i) pose.rotation(i / 3, i % 3) = r[static_cast<std::size_t>(i)];
    pose.translation = Vec3<double>(t[0], t[1], t[2]);
    pose.focal = Vec2<double>(j.at("fx").get<double>(), j.at("fy").get<double>());
    pose.principal_point = Vec2<double>(j.at("cx").get<double>(), j.at("cy").get<double>());
  } catch (const json::exception& e) {
    throw UserError(path.string() + ": " + e.what());
  }
  pose.height = j.value("height", height);
  pose.width = j.value("width", width);
  pose.validate(1e-4);
  return pose;
}

}  // namespace

void cmd_render(const RunSettings& base, const RenderRequest& request, const fs::path& out) {
  RunSettings settings = run_settings(request.run, base);
  // Flags given for this render take precedence over the stored run.
  settings.render = base.render;
  if (!base.dataset.empty()) settings.dataset = base.dataset;
  if (current_run) current_run->config = fields(settings).to_json();
  auto denoiser = run_denoiser(settings, request.run, nullptr);
  Trainer<float> trainer(settings.train, denoiser, settings.train.seed);
  const fs::path ckpt = resolve_checkpoint(request.run, request.checkpoint);
  trainer.load(ckpt);
  if (current_run) current_run->add_input(ckpt / "manifest.json");

  const auto records = ingest(dataset_root(settings));
  const SceneRecord& record = find_scene(records, request.scene);
  record_inputs({record});
  const auto scene = load_scene<float>(record, settings.train.image_size);
  if (request.contexts.empty()) throw UserError("render needs at least one context frame");
  for (Index c : request.contexts)
    if (c < 0 || c >= scene.view_count()) throw UserError("unknown context frame " + std::to_string(c));
  CameraPose<double> target;
  if (!request.target_pose.empty()) {
    target = rescale_pose(read_pose(request.target_pose, record.frames.front().pose.height, record.frames.front().pose.width),
                          settings.train.image_size, settings.train.image_size);
  } else {
    if (request.target < 0 || request.target >= scene.view_count()) {
      throw UserError("unknown target frame " + std::to_string(request.target));
    }
    target = scene.poses[static_cast<std::size_t>(request.target)];
  }
  const std::string prompt = request.prompt.empty() ? settings.train.prompt(record.class_name) : request.prompt;
  const auto contexts = trainer.contexts(scene, request.contexts);
  const auto schedule = NoiseSchedule::linear();
  const auto result = nvs_inference(trainer.geometry(), &trainer.adapter(), denoiser, contexts, target,
                                    settings.train.depth_range(), prompt, settings.render, schedule);
  fs::create_directories(out);
  write_png(out / "estimate.png", Image::from_var(result.estimate));
  write_png(out / "sample.png", Image::from_var(result.image));
  if (request.compare_unguided) {
    const auto plain = nvs_inference(trainer.geometry(), static_cast<const GuidanceAdapter<float>*>(nullptr), denoiser,
                                     contexts, target, settings.train.depth_range(), prompt, settings.render, schedule);
    write_png(out / "unguided.png", Image::from_var(plain.image));
  }
  spdlog::info("rendered {} with prompt \"{}\"", record.scene_id, prompt);
}

EvalModel parse_eval_model(const std::string& name) {
  if (name == "full") return EvalModel::full;
  if (name == "estimate") return EvalModel::estimate;
  if (name == "oracle") return EvalModel::oracle;
  if (name == "constant") return EvalModel::constant;
  throw UserError("unknown model '" + name + "' (valid: full, estimate, oracle, constant)");
}

MetricReport cmd_evaluate(const RunSettings& base, const fs::path& run, EvalModel model, const fs::path& out) {
  const bool needs_run = model == EvalModel::full || model == EvalModel::estimate;
  RunSettings settings = needs_run ? run_settings(run, base) : base;
  settings.evaluate = base.evaluate;
  settings.render = base.render;
  if (!base.dataset.empty()) settings.dataset = base.dataset;
  if (current_run) current_run->config = fields(settings).to_json();
  const auto records = ingest(dataset_root(settings));
  record_inputs(records);

  std::unique_ptr<DenoiserHandle<float>> denoiser;
  std::unique_ptr<Trainer<float>> trainer;
  ViewSynthesizer synth;
  if (needs_run) {
    settings.evaluate.image_size = settings.train.image_size;
    denoiser = std::make_unique<DenoiserHandle<float>>(run_denoiser(settings, run, nullptr));
    trainer = std::make_unique<Trainer<float>>(settings.train, *denoiser, settings.train.seed);
    const fs::path ckpt = resolve_checkpoint(run, {});
    trainer->load(ckpt);
    if (current_run) current_run->add_input(ckpt / "manifest.json");
    if (model == EvalModel::estimate) {
      synth = estimate_model(trainer->geometry(), settings.train.depth_range());
    } else {
      const TrainConfig train = settings.train;
      synth = guided_model(trainer->geometry(), &trainer->adapter(), *denoiser, train.depth_range(),
                           [train](const std::string& c) { return train.prompt(c); }, settings.render);
    }
  } else {
    synth = model == EvalModel::oracle ? oracle_model() : constant_model();
  }
  const MetricReport report = run_protocol(synth, records, settings.evaluate);
  write_report(report, out);
  return report;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Geometry-guided diffusion for sparse-view novel view synthesis"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  int verbosity = 0;
  bool quiet = false;
  std::optional<std::uint64_t> seed;
  std::string dataset;
  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON settings file");
    cmd->add_option("--set", overrides, "dotted.key=value override (repeatable)");
    cmd->add_option("--seed", seed, "seed for every random choice of the command");
    cmd->add_flag("-v,--verbose", verbosity, "more logging");
    cmd->add_flag("-q,--quiet", quiet, "warnings and errors only");
  };

  auto* ingest_cmd = app.add_subcommand("ingest", "validate a dataset directory");
  std::string root;
  ingest_cmd->add_option("root", root, "dataset root")->required();
  ingest_cmd->add_option("--out", out_dir, "directory for scenes.json and run.json");
  common(ingest_cmd);

  auto* synth_cmd = app.add_subcommand("synth", "render a synthetic scene into a dataset directory");
  std::string spec_path;
  synth_cmd->add_option("--spec", spec_path, "synthetic scene JSON")->required();
  synth_cmd->add_option("--out", out_dir, "dataset root to write into")->required();
  common(synth_cmd);

  auto* train_cmd = app.add_subcommand("train", "jointly train the geometry prior and guidance adapter");
  bool resume = false;
  train_cmd->add_option("--out", out_dir, "run directory")->required();
  train_cmd->add_option("--dataset", dataset, "dataset root");
  train_cmd->add_flag("--resume", resume, "continue from the latest checkpoint in --out");
  common(train_cmd);

  auto* render_cmd = app.add_subcommand("render", "synthesize a view from a trained run");
  RenderRequest request;
  std::optional<double> lambda;
  std::optional<Index> perturb_steps;
  std::string ckpt;
  render_cmd->add_option("--run", request.run, "run directory")->required();
  render_cmd->add_option("--checkpoint", ckpt, "checkpoint directory (default: latest)");
  render_cmd->add_option("--scene", request.scene, "scene id or class/scene")->required();
  render_cmd->add_option("--contexts", request.contexts, "context frame ids")->required()->delimiter(',');
  render_cmd->add_option("--target", request.target, "target frame id");
  render_cmd->add_option("--target-pose", request.target_pose, "JSON pose {R, t, fx, fy, cx, cy}");
  render_cmd->add_option("--prompt", request.prompt, "text prompt (default: a picture of <class>)");
  render_cmd->add_option("--lambda", lambda, "guidance weight");
  render_cmd->add_option("--perturb-steps", perturb_steps, "sampler steps after perturbing the estimate");
  render_cmd->add_flag("--compare-unguided", request.compare_unguided, "also write the guidance-off sample");
  render_cmd->add_option("--dataset", dataset, "dataset root");
  render_cmd->add_option("--out", out_dir, "output directory")->required();
  common(render_cmd);

  auto* eval_cmd = app.add_subcommand("evaluate", "run the evaluation protocol");
  std::string run_dir, model_name = "full";
  std::optional<Index> contexts;
  bool strict = false;
  eval_cmd->add_option("--run", run_dir, "run directory (full and estimate models)");
  eval_cmd->add_option("--model", model_name, "full | estimate | oracle | constant");
  eval_cmd->add_option("--contexts", contexts, "context views per object");
  eval_cmd->add_flag("--strict", strict, "fail when any category or object falls short");
  eval_cmd->add_option("--dataset", dataset, "dataset root");
  eval_cmd->add_option("--out", out_dir, "report directory")->required();
  common(eval_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  if (!spdlog::get("nvs")) spdlog::set_default_logger(spdlog::stderr_color_mt("nvs"));
  spdlog::set_level(quiet ? spdlog::level::warn : verbosity > 0 ? spdlog::level::debug : spdlog::level::info);
  Provenance provenance;
  provenance.command = app.get_subcommands().front()->get_name();
  for (int i = 0; i < argc; ++i) provenance.argv.push_back(argv[i]);
  current_run = &provenance;
  struct Reset {
    ~Reset() { current_run = nullptr; }
  } reset;

  try {
    RunSettings settings = resolve_settings(config_path, overrides);
    if (!dataset.empty()) settings.dataset = dataset;
    if (seed) settings.train.seed = settings.render.seed = settings.evaluate.seed = *seed;
    provenance.config = fields(settings).to_json();

    if (provenance.command == "ingest") {
      const auto result = cmd_ingest(root, out_dir);
      std::size_t frames = 0;
      for (const auto& s : result.scenes) frames += s.frames.size();
      out << result.scenes.size() << " scenes, " << frames << " frames, " << result.warnings.size() << " warnings\n";
      if (!out_dir.empty()) provenance.write(out_dir);
    } else if (provenance.command == "synth") {
      const auto record = cmd_synth(spec_path, out_dir);
      out << "wrote " << record.class_name << "/" << record.scene_id << " with " << record.frames.size() << " views\n";
      provenance.write(out_dir);
    } else if (provenance.command == "train") {
      const auto outcome = cmd_train(settings, out_dir, resume);
      out << "trained steps " << outcome.first_step << ".." << outcome.last_step << ", checkpoint "
          << outcome.checkpoint.string() << "\n";
      provenance.write(out_dir);
    } else if (provenance.command == "render") {
      if (lambda) settings.render.lambda = *lambda;
      if (perturb_steps) settings.render.perturb_steps = *perturb_steps;
      request.checkpoint = ckpt;
      cmd_render(settings, request, out_dir);
      out << "wrote " << (fs::path(out_dir) / "sample.png").string() << "\n";
      provenance.write(out_dir);
    } else {
      if (contexts) settings.evaluate.context_count = *contexts;
      const EvalModel model = parse_eval_model(model_name);
      if ((model == EvalModel::full || model == EvalModel::estimate) && run_dir.empty()) {
        throw UserError("--run is required for the " + model_name + " model");
      }
      const auto report = cmd_evaluate(settings, run_dir, model, out_dir);
      provenance.write(out_dir);
      out << summary_table(report);
      if (strict && report.partial()) {
        err << "error: evaluation shortfall (--strict)\n";
        return 1;
      }
    }
    return 0;
  } catch (const UserError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const BoundsError& e) {
    err << "error: " << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace nvs::cli
