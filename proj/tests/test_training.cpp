#include <doctest.h>

#include "fixtures.hpp"
#include "gradcheck.hpp"

#include <nvs/errors.hpp>
#include <nvs/training.hpp>

#include <filesystem>
#include <fstream>

using namespace nvs;
using namespace nvs::testing;
namespace fs = std::filesystem;

namespace {

UNetConfig tiny_unet() {
  UNetConfig cfg;
  cfg.channels = {8, 16};
  cfg.time_dim = 16;
  cfg.text_dim = 8;
  return cfg;
}

// 4x4 feature grid and latent, 16x16 images through a factor-4 codec.
TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.geometry = tiny_geometry_config();
  cfg.geometry.depth_resolution = 8;
  cfg.image_size = 16;
  cfg.learning_rate = 1e-3;
  cfg.max_context = 2;
  return cfg;
}

template <typename S>
DenoiserHandle<S> tiny_denoiser(std::uint64_t seed = 1) {
  auto handle = make_toy_denoiser<S>(tiny_unet(), 4, seed);
  handle.codec.factor = 4;
  handle.freeze();
  return handle;
}

template <typename S>
void randomize(Conv2d<S>& conv, std::mt19937_64& rng, double bound = 0.5) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& w : conv.weight.value_mutable()) w = static_cast<S>(u(rng));
  for (auto& b : conv.bias.value_mutable()) b = static_cast<S>(u(rng));
}

template <typename S>
SceneData<S> scene_with_views(int views) {
  SceneData<S> scene;
  scene.scene_id = "v" + std::to_string(views);
  for (int i = 0; i < views; ++i) {
    scene.images.push_back(Var<S>::zeros({3, 2, 2}));
    scene.poses.emplace_back();
  }
  return scene;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("nvs_test_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double grad_norm(const ParamList<double>& params) {
  double acc = 0;
  for (const auto& [name, v] : params)
    if (v->has_grad()) acc += v->grad().square().sum();
  return std::sqrt(acc);
}

}  // namespace

TEST_CASE("sample_batch: two-view scenes force one context") {
  std::vector<SceneData<float>> ds{scene_with_views<float>(2)};
  TrainConfig cfg;
  cfg.batch_size = 4;
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    for (const auto& item : sample_batch(ds, cfg, rng).items) {
      REQUIRE(item.contexts.size() == 1);
      CHECK(item.contexts[0] == 1 - item.query);
    }
  }
}

TEST_CASE("sample_batch: ranges, distinct query, determinism, skipping") {
  std::vector<SceneData<float>> ds{scene_with_views<float>(1), scene_with_views<float>(6), scene_with_views<float>(3)};
  TrainConfig cfg;
  cfg.batch_size = 3;
  cfg.min_context = 2;
  cfg.max_context = 4;
  std::mt19937_64 a(5), b(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = sample_batch(ds, cfg, a, trial), y = sample_batch(ds, cfg, b, trial);
    REQUIRE(x.items.size() == 3);
    for (std::size_t i = 0; i < x.items.size(); ++i) {
      const auto& item = x.items[i];
      CHECK(item.scene != 0);
      const Index n = ds[item.scene].view_count();
      CHECK(static_cast<Index>(item.contexts.size()) >= std::min<Index>(2, n - 1));
      CHECK(static_cast<Index>(item.contexts.size()) <= std::min<Index>(4, n - 1));
      CHECK(std::find(item.contexts.begin(), item.contexts.end(), item.query) == item.contexts.end());
      CHECK(std::adjacent_find(item.contexts.begin(), item.contexts.end()) == item.contexts.end());
      CHECK(item.scene == y.items[i].scene);
      CHECK(item.query == y.items[i].query);
      CHECK(item.contexts == y.items[i].contexts);
    }
  }
  std::vector<SceneData<float>> tiny{scene_with_views<float>(1)};
  CHECK_THROWS_AS(sample_batch(tiny, cfg, a), ArgumentError);
}

TEST_CASE("sample_batch: query views are uniform within 5 sigma") {
  std::vector<SceneData<float>> ds{scene_with_views<float>(10)};
  TrainConfig cfg;
  std::mt19937_64 rng(11);
  std::vector<int> counts(10, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(sample_batch(ds, cfg, rng).items[0].query)];
  const double mean = draws / 10.0, sigma = std::sqrt(draws * 0.1 * 0.9);
  for (int c : counts) CHECK(std::abs(c - mean) < 5 * sigma);
}

TEST_CASE("step generators are reproducible and distinct") {
  auto a = step_rng(3, 10), b = step_rng(3, 10), c = step_rng(3, 11), d = step_rng(4, 10);
  const auto x = a();
  CHECK(x == b());
  CHECK(x != c());
  CHECK(x != d());
}

TEST_CASE("total loss gradients match finite differences on sampled geometry and adapter entries") {
  auto denoiser = tiny_denoiser<double>(2);
  auto cfg = tiny_train_config();
  Trainer<double> trainer(cfg, denoiser, 3);
  std::mt19937_64 rng(4);
  for (Index j = 0; j < trainer.adapter().tap_count(); ++j) randomize(trainer.adapter().zero_projection(j), rng);

  std::vector<SceneData<double>> ds{render_scene<double>(sphere_box_spec(4, 16))};
  Batch batch{0, {{0, {1, 2}, 0}}};
  DiffusionDraw<double> draw{{300}, {gaussian<double>({3, 4, 4}, rng)}};

  std::vector<ParamEntry> entries;
  const auto geo = trainer.geometry_params(), ad = trainer.adapter_params();
  for (int k = 0; k < 10; ++k) {
    const auto& g = geo[rng() % geo.size()];
    entries.push_back({*g.second, static_cast<Index>(rng() % static_cast<std::uint64_t>(g.second->size()))});
    const auto& a = ad[rng() % ad.size()];
    entries.push_back({*a.second, static_cast<Index>(rng() % static_cast<std::uint64_t>(a.second->size()))});
  }
  auto loss = [&] { return trainer.loss(batch, ds, draw).total; };
  const auto result = gradcheck_entries(loss, entries, 1e-6, 1e-6);
  CHECK(result.checked == 20);
  CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("loss weights gate gradient paths") {
  auto denoiser = tiny_denoiser<double>(5);
  std::vector<SceneData<double>> ds{render_scene<double>(sphere_box_spec(4, 16))};
  std::mt19937_64 rng(6);
  Batch batch{0, {{0, {1, 3}, 2}}};
  DiffusionDraw<double> draw{{500}, {gaussian<double>({3, 4, 4}, rng)}};

  SUBCASE("no diffusion term: adapter receives exactly zero gradient") {
    auto cfg = tiny_train_config();
    cfg.diffusion_weight = 0;
    Trainer<double> trainer(cfg, denoiser, 7);
    for (Index j = 0; j < trainer.adapter().tap_count(); ++j) randomize(trainer.adapter().zero_projection(j), rng);
    zero_grads(trainer.params());
    trainer.loss(batch, ds, draw).total.backward();
    CHECK(grad_norm(trainer.adapter_params()) == 0.0);
    CHECK(grad_norm(trainer.geometry_params()) > 0.0);
  }
  SUBCASE("no reconstruction term: geometry learns only through the feature map") {
    auto cfg = tiny_train_config();
    cfg.recon_weight = 0;
    Trainer<double> trainer(cfg, denoiser, 7);
    zero_grads(trainer.params());
    trainer.loss(batch, ds, draw).total.backward();
    // Zero projections block the feature path at init.
    CHECK(grad_norm(trainer.geometry_params()) == 0.0);
    CHECK(grad_norm(trainer.adapter_params()) > 0.0);
    for (Index j = 0; j < trainer.adapter().tap_count(); ++j) randomize(trainer.adapter().zero_projection(j), rng);
    zero_grads(trainer.params());
    trainer.loss(batch, ds, draw).total.backward();
    CHECK(grad_norm(trainer.geometry_params()) > 0.0);
  }
}

TEST_CASE("joint steps never touch the denoiser") {
  auto denoiser = tiny_denoiser<float>(8);
  const auto before = denoiser.fingerprint();
  auto cfg = tiny_train_config();
  Trainer<float> trainer(cfg, denoiser, 9);
  std::vector<SceneData<float>> ds{render_scene<float>(sphere_box_spec(5, 16))};
  const auto adapter_before = fingerprint(trainer.adapter_params());
  for (int i = 0; i < 5; ++i) {
    const auto report = trainer.joint_step(ds);
    CHECK(report.step == i + 1);
    CHECK(std::isfinite(report.total));
    CHECK(report.total == doctest::Approx(report.recon + report.diffusion).epsilon(1e-5));
    CHECK(denoiser.fingerprint() == before);
  }
  for (const auto& [name, v] : denoiser.params()) CHECK_FALSE(v->has_grad());
  CHECK(fingerprint(trainer.adapter_params()) != adapter_before);
}

TEST_CASE("non-finite losses name the batch") {
  auto denoiser = tiny_denoiser<float>(8);
  Trainer<float> trainer(tiny_train_config(), denoiser, 9);
  std::vector<SceneData<float>> ds{render_scene<float>(sphere_box_spec(5, 16))};
  trainer.geometry_params().front().second->value_mutable().setConstant(std::numeric_limits<float>::quiet_NaN());
  try {
    trainer.joint_step(ds);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("batch 0") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip restores outputs and the next step") {
  auto denoiser = tiny_denoiser<float>(10);
  auto cfg = tiny_train_config();
  cfg.seed = 21;
  std::vector<SceneData<float>> ds{render_scene<float>(sphere_box_spec(5, 16))};
  Trainer<float> a(cfg, denoiser, 11);
  for (int i = 0; i < 3; ++i) a.joint_step(ds);
  const fs::path dir = scratch_dir("roundtrip") / "step_3";
  a.save(dir);

  Trainer<float> b(cfg, denoiser, 99);
  CHECK(fingerprint(b.geometry_params()) != fingerprint(a.geometry_params()));
  b.load(dir);
  CHECK(b.step() == 3);
  CHECK(fingerprint(b.geometry_params()) == fingerprint(a.geometry_params()));
  CHECK(fingerprint(b.adapter_params()) == fingerprint(a.adapter_params()));
  CHECK(b.optimizer().step_count() == a.optimizer().step_count());

  const auto ctx = a.contexts(ds[0], {1, 2});
  const auto ra = a.geometry().render(ctx, ds[0].poses[0], cfg.depth_range(), 16, 16);
  const auto rb = b.geometry().render(ctx, ds[0].poses[0], cfg.depth_range(), 16, 16);
  CHECK((ra.color.image.value() == rb.color.image.value()).all());
  CHECK((ra.feature_map.features.value() == rb.feature_map.features.value()).all());

  const auto la = a.joint_step(ds), lb = b.joint_step(ds);
  CHECK(la.total == lb.total);
  CHECK(la.step == lb.step);
  CHECK(fingerprint(b.params()) == fingerprint(a.params()));

  const auto manifest = read_manifest(dir);
  CHECK(manifest.step == 3);
  CHECK(manifest.fingerprints.at("denoiser") == denoiser.fingerprint());
  CHECK(manifest.config.at("geometry").at("width") == cfg.geometry.width);

  auto other = tiny_denoiser<float>(12);
  Trainer<float> c(cfg, other, 11);
  CHECK_THROWS_AS(c.load(dir), ConfigError);
}

TEST_CASE("checkpoint listing orders by step") {
  const fs::path root = scratch_dir("listing");
  for (const char* name : {"step_10", "step_2", "step_100", "notes"}) {
    fs::create_directories(root / name);
    if (std::string(name) != "notes") std::ofstream(root / name / "manifest.json") << "{}";
  }
  fs::create_directories(root / "step_5");
  const auto found = list_checkpoints(root);
  REQUIRE(found.size() == 3);
  CHECK(found[0].filename() == "step_2");
  CHECK(found[2].filename() == "step_100");
  CHECK(list_checkpoints(root / "missing").empty());
}

TEST_CASE("tensor blobs") {
  const fs::path dir = scratch_dir("blobs");
  std::vector<NamedTensor> tensors{{"a", {2, 3}, Eigen::ArrayXd::LinSpaced(6, -1, 1)}, {"b.c", {}, Eigen::ArrayXd::Constant(1, 0.1)}};
  write_tensors(dir / "t.bin", tensors);
  const auto back = read_tensors(dir / "t.bin");
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a");
  CHECK(back[0].shape == Shape{2, 3});
  CHECK((back[0].values == tensors[0].values).all());
  CHECK(back[1].values[0] == 0.1);

  std::ofstream(dir / "junk.bin") << "not a blob";
  CHECK_THROWS_AS(read_tensors(dir / "junk.bin"), ConfigError);
  auto p = Var<double>::zeros({2, 3}, true);
  ParamList<double> one{{"a", &p}};
  CHECK_THROWS_AS(load_tensors(one, back, "t.bin"), ConfigError);
  auto q = Var<double>::zeros({3, 2}, true);
  ParamList<double> wrong_shape{{"a", &q}, {"b.c", &p}};
  CHECK_THROWS_AS(load_tensors(wrong_shape, back, "t.bin"), ConfigError);
}

TEST_CASE("denoiser loading") {
  const fs::path dir = scratch_dir("denoiser");
  DenoiserConfig cfg;
  cfg.channels = {8, 16};
  cfg.latent_size = 4;
  cfg.backend = "external";
  cfg.model_id = "some-latent-model";
  cfg.weights_path = (dir / "missing.bin").string();
  std::vector<std::string> warnings;
  bool loaded = true;
  auto fallback = load_denoiser<float>(cfg, &loaded, &warnings);
  CHECK_FALSE(loaded);
  CHECK(fallback.backend == DenoiserBackend::toy);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("falling back") != std::string::npos);

  write_tensors(dir / "weights.bin", to_tensors(fallback.params()));
  cfg.weights_path = (dir / "weights.bin").string();
  cfg.seed = 77;
  auto external = load_denoiser<float>(cfg, &loaded);
  CHECK(loaded);
  CHECK(external.backend == DenoiserBackend::external);
  CHECK(external.frozen);
  CHECK(external.fingerprint() == fallback.fingerprint());

  cfg.backend = "remote";
  CHECK_THROWS_AS(load_denoiser<float>(cfg), ConfigError);
}

TEST_CASE("configuration tables") {
  TrainConfig cfg;
  auto table = fields(cfg);
  table.apply_override("geometry.width=48");
  table.apply_override("prompt_template=a photo of {class}");
  table.apply(nlohmann::json{{"steps", 7}, {"geometry", {{"backbone", "paper"}}}}, "file");
  CHECK(cfg.geometry.width == 48);
  CHECK(cfg.steps == 7);
  CHECK(cfg.geometry.backbone == BackboneProfile::paper);
  CHECK(cfg.prompt("car") == "a photo of car");

  TrainConfig copy;
  fields(copy).apply(fields(cfg).to_json(), "snapshot");
  CHECK(fields(copy).to_json() == fields(cfg).to_json());

  try {
    table.apply_override("geometry.depth=3");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("geometry.depth") != std::string::npos);
    CHECK(msg.find("geometry.depth_resolution") != std::string::npos);
  }
  CHECK_THROWS_AS(table.apply_override("steps=many"), ConfigError);
  CHECK_THROWS_AS(table.apply_override("nokey"), ConfigError);

  DenoiserConfig den;
  fields(den).apply(nlohmann::json{{"channels", {16, 32, 32}}}, "file");
  CHECK(den.channels == std::vector<Index>{16, 32, 32});

  cfg.min_context = 3;
  cfg.max_context = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(TrainConfig{}.prompt("hydrant") == "a picture of hydrant");
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.steps = 100;
  CHECK(cfg.learning_rate_at(0) == 1e-3);
  CHECK(cfg.learning_rate_at(99) == 1e-3);
  cfg.final_lr_fraction = 0.1;
  CHECK(cfg.learning_rate_at(0) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(cfg.learning_rate_at(50) == doctest::Approx(0.55e-3).epsilon(1e-12));
  CHECK(cfg.learning_rate_at(100) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(cfg.learning_rate_at(500) == doctest::Approx(1e-4).epsilon(1e-12));
  cfg.final_lr_fraction = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
