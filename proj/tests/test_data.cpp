#include <doctest.h>

#include "fixtures.hpp"

#include <nvs/data.hpp>
#include <nvs/errors.hpp>

#include <filesystem>
#include <fstream>
#include <numbers>

using namespace nvs;
using namespace nvs::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("nvs_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream(path) << text;
}

// Three hand-written frames: identity, a quarter turn about y, a quarter turn about z.
const char* kThreeFrames = R"({
  "split": "dev",
  "frames": [
    {"file": "a.png", "R": [1,0,0, 0,1,0, 0,0,1], "t": [0,0,4], "fx": 5, "fy": 5, "cx": 1.5, "cy": 1.5},
    {"file": "b.png", "R": [0,0,-1, 0,1,0, 1,0,0], "t": [0,0,4], "fx": 5, "fy": 5, "cx": 1.5, "cy": 1.5},
    {"file": "c.png", "R": [0,-1,0, 1,0,0, 0,0,1], "t": [0,0,4], "fx": 5, "fy": 5, "cx": 1.5, "cy": 1.5}
  ]
})";

void write_fixture_images(const fs::path& scene_dir, std::initializer_list<const char*> names) {
  fs::create_directories(scene_dir / "images");
  for (const char* name : names) write_png(scene_dir / "images" / name, Image::filled(4, 4, {0.2, 0.4, 0.6}));
}

}  // namespace

TEST_CASE("png round trip is exact on 8-bit values") {
  const fs::path dir = scratch_dir("png");
  Image img = Image::filled(3, 5, Vec3<double>::Zero());
  for (Index i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>((i * 37) % 256) / 255.0;
  write_png(dir / "x.png", img);
  const Image back = read_png(dir / "x.png");
  CHECK(back.height == 3);
  CHECK(back.width == 5);
  CHECK((back.data - img.data).abs().maxCoeff() < 1e-12);
  CHECK(png_size(dir / "x.png") == std::pair<long, long>{3, 5});
  CHECK_THROWS_AS(read_png(dir / "missing.png"), ArgumentError);
}

TEST_CASE("ingest: empty directory") {
  CHECK(ingest(scratch_dir("empty")).empty());
  CHECK_THROWS_AS(ingest(scratch_dir("empty") / "nope"), ConfigError);
}

TEST_CASE("ingest: hand-written three-frame scene") {
  const fs::path root = scratch_dir("three");
  const fs::path scene_dir = root / "chair" / "scene_a";
  write_fixture_images(scene_dir, {"a.png", "b.png", "c.png"});
  write_text(scene_dir / "frames.json", kThreeFrames);
  std::vector<std::string> warnings;
  const auto scenes = ingest(root, &warnings);
  REQUIRE(scenes.size() == 1);
  CHECK(warnings.empty());
  const auto& s = scenes[0];
  CHECK(s.class_name == "chair");
  CHECK(s.scene_id == "scene_a");
  CHECK(s.split == Split::dev);
  REQUIRE(s.frames.size() == 3);
  for (const auto& f : s.frames) {
    CHECK((f.pose.rotation * f.pose.rotation.transpose() - Mat3<double>::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(f.pose.rotation.determinant() == doctest::Approx(1.0));
    CHECK(f.pose.height == 4);
    CHECK(f.pose.width == 4);
  }
  CHECK(s.frames[1].pose.rotation(0, 2) == -1.0);
  CHECK(s.frames[2].pose.principal_point.x() == 1.5);

  const auto again = ingest(root);
  REQUIRE(again.size() == 1);
  REQUIRE(again[0].frames.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(again[0].frames[i].image == s.frames[i].image);
    CHECK(again[0].frames[i].pose.matrix() == s.frames[i].pose.matrix());
  }
}

TEST_CASE("ingest: a corrupt pose row is dropped with one warning") {
  const fs::path root = scratch_dir("corrupt");
  const fs::path scene_dir = root / "chair" / "scene_b";
  write_fixture_images(scene_dir, {"a.png", "b.png", "c.png"});
  std::string text = kThreeFrames;
  text.replace(text.find("[0,0,-1, 0,1,0, 1,0,0]"), 22, "[0,0,-1, 0,1,0, 1,0]");
  write_text(scene_dir / "frames.json", text);
  std::vector<std::string> warnings;
  const auto scenes = ingest(root, &warnings);
  REQUIRE(scenes.size() == 1);
  CHECK(scenes[0].frames.size() == 2);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("frame 1") != std::string::npos);
}

TEST_CASE("ingest: non-orthonormal rotations and missing images are dropped; small scenes rejected") {
  const fs::path root = scratch_dir("small");
  const fs::path scene_dir = root / "car" / "scene_c";
  write_fixture_images(scene_dir, {"a.png"});
  std::string text = kThreeFrames;
  text.replace(text.find("[0,-1,0, 1,0,0, 0,0,1]"), 22, "[2,0,0, 0,1,0, 0,0,1]");
  write_text(scene_dir / "frames.json", text);
  std::vector<std::string> warnings;
  CHECK(ingest(root, &warnings).empty());
  CHECK(warnings.size() == 3);
  CHECK(warnings.back().find("rejected") != std::string::npos);
}

TEST_CASE("ingest: malformed manifest reports file and line") {
  const fs::path root = scratch_dir("malformed");
  const fs::path scene_dir = root / "car" / "scene_d";
  write_fixture_images(scene_dir, {"a.png", "b.png"});
  write_text(scene_dir / "frames.json", "{\n  \"frames\": [\n    {\"file\": \"a.png\",\n     \"R\": [1,0,0 0,1,0]\n  ]\n}\n");
  try {
    ingest(root);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.file() == (scene_dir / "frames.json").string());
    CHECK(e.line() == 4);
    CHECK(std::string(e.what()).find("frames.json:4:") != std::string::npos);
  }
}

TEST_CASE("synthetic render: empty scene is uniform background") {
  SyntheticSceneSpec spec = sphere_box_spec(4, 16);
  spec.primitives.clear();
  spec.background = {0.1, 0.5, 0.9};
  const Image img = render_synthetic(spec, ring_poses(spec.ring)[0]);
  for (long r = 0; r < img.height; ++r)
    for (long c = 0; c < img.width; ++c) {
      CHECK(img.at(0, r, c) == 0.1);
      CHECK(img.at(2, r, c) == 0.9);
    }
}

TEST_CASE("synthetic render: centered sphere") {
  SyntheticSceneSpec spec;
  spec.primitives.push_back({PrimitiveShape::sphere, {0, 0, 0}, {1, 1, 1}, {0.25, 0.5, 0.75}});
  spec.background = {1, 1, 1};
  const auto pose = CameraPose<double>::look_at({0, 0, -10}, {0, 0, 0}, {0, 1, 0}, 300, 256, 256);
  const Image img = render_synthetic(spec, pose);
  CHECK(img.at(0, 0, 0) == 1.0);
  CHECK(img.at(1, 255, 255) == 1.0);
  CHECK(img.at(0, 128, 128) == 0.25);
  CHECK(img.at(2, 127, 127) == 0.75);

  long hits = 0;
  for (long r = 0; r < 256; ++r)
    for (long c = 0; c < 256; ++c) hits += img.at(0, r, c) == 0.25;
  const double disc = std::numbers::pi * std::pow(300.0 * 1.0 / 10.0, 2);
  CHECK(std::abs(hits - disc) / disc < 0.05);

  const Image again = render_synthetic(spec, pose);
  CHECK((again.data == img.data).all());
}

TEST_CASE("synthetic render: hit points re-project consistently across views") {
  const auto spec = sphere_box_spec(8, 64);
  const auto poses = ring_poses(spec.ring);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 63);
  int pairs = 0;
  while (pairs < 100) {
    const auto& a = poses[rng() % poses.size()];
    const auto& b = poses[rng() % poses.size()];
    const Vec3<double> dir = a.rotation.transpose() * a.camera_direction({u(rng), u(rng)});
    const Hit hit = intersect(spec, a.center(), dir);
    if (hit.primitive < 0) continue;
    const Vec3<double> point = a.center() + hit.depth * dir;
    const Pixel<double> px = b.project(point);
    if (!b.contains(px)) continue;
    const Vec3<double> back_dir = b.rotation.transpose() * b.camera_direction(px);
    const Hit seen = intersect(spec, b.center(), back_dir);
    // Occluded in view b: the first hit lies in front of the point.
    if ((b.center() + seen.depth * back_dir - point).norm() > 1e-6) continue;
    CHECK(seen.primitive == hit.primitive);
    ++pairs;
  }
}

TEST_CASE("synthetic datasets round trip through ingest") {
  const fs::path root = scratch_dir("synth");
  const auto spec = sphere_box_spec(5, 16);
  const auto record = write_synthetic_scene(spec, root);
  const auto scenes = ingest(root);
  REQUIRE(scenes.size() == 1);
  CHECK(scenes[0].class_name == spec.class_name);
  REQUIRE(scenes[0].frames.size() == 5);
  const auto poses = ring_poses(spec.ring);
  const auto loaded = load_scene<double>(scenes[0]);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK((scenes[0].frames[i].pose.matrix() - poses[i].matrix()).cwiseAbs().maxCoeff() < 1e-12);
    const Image truth = render_synthetic(spec, poses[i]);
    CHECK((loaded.images[i].value() - truth.data).abs().maxCoeff() <= 0.5 / 255 + 1e-12);
  }
  CHECK(record.frames.size() == 5);
}

TEST_CASE("resampled scenes keep projections aligned") {
  const fs::path root = scratch_dir("resample");
  const auto spec = sphere_box_spec(3, 32);
  write_synthetic_scene(spec, root);
  const auto scene = load_scene<double>(ingest(root).at(0), 16);
  REQUIRE(scene.images[0].shape() == Shape{3, 16, 16});
  const auto full = read_png(ingest(root).at(0).frames[0].image);
  // Factor 2 box average.
  const double avg = (full.at(0, 10, 12) + full.at(0, 10, 13) + full.at(0, 11, 12) + full.at(0, 11, 13)) / 4;
  CHECK(scene.images[0].value()[5 * 16 + 6] == doctest::Approx(avg).epsilon(1e-12));

  const auto big = ring_poses(spec.ring)[1];
  const auto small = rescale_pose(big, 16, 16);
  const Vec3<double> p(0.2, -0.1, 0.3);
  const auto pb = big.project(p), ps = small.project(p);
  CHECK(ps.col == doctest::Approx((pb.col + 0.5) / 2 - 0.5).epsilon(1e-12));
  CHECK(ps.row == doctest::Approx((pb.row + 0.5) / 2 - 0.5).epsilon(1e-12));
}

TEST_CASE("synthetic spec parsing") {
  const auto spec = sphere_box_spec();
  const auto back = parse_synthetic_spec(to_json(spec));
  CHECK(to_json(back) == to_json(spec));
  auto j = nlohmann::json::parse(R"({"primitives": [{"shape": "cone"}]})");
  CHECK_THROWS_AS(parse_synthetic_spec(j), ConfigError);
  j = nlohmann::json::parse(R"({"colour": [1, 1, 1]})");
  try {
    parse_synthetic_spec(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("background") != std::string::npos);
  }
  j = nlohmann::json::parse(R"({"primitives": [{"shape": "box", "size": [1, 0, 1]}]})");
  CHECK_THROWS_AS(parse_synthetic_spec(j), ConfigError);
  j = nlohmann::json::parse(R"({"ring": {"count": 1}})");
  CHECK_THROWS_AS(parse_synthetic_spec(j), ConfigError);
}
