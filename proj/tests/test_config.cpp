#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "xdops/config.hpp"
#include "xdops/error.hpp"

using namespace xd;
using namespace xd::cfg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string error_of(const json& j) {
  try {
    parse_run_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
  const RunConfig c = parse_run_config(json::object());
  EXPECT_EQ(c.backbone.preset, "cnn1d");
  EXPECT_EQ(c.backbone.n, 64u);
  EXPECT_EQ(c.train.epochs, 10u);
  EXPECT_EQ(c.output_dir, "runs/default");
}

TEST(Config, RoundTripsThroughJson) {
  RunConfig c = preset("burgers-fno-init");
  c.seed = 17;
  c.task.data = "x.json";
  const RunConfig d = parse_run_config(to_json(c));
  EXPECT_EQ(to_json(d), to_json(c));
  EXPECT_EQ(d.train.seed, 17u);
  EXPECT_EQ(d.xd.seed, 17u);
}

TEST(Config, UnknownKeysAreNamed) {
  EXPECT_NE(error_of({{"bogus", 1}}).find("unknown key 'bogus'"), std::string::npos);
  EXPECT_NE(error_of({{"xd", {{"dept", {1, 1, 1}}}}}).find("'xd.dept'"), std::string::npos);
  EXPECT_NE(error_of({{"optimizer", {{"arch", {{"schedule", "cosine"}}}}}}).find("'optimizer.arch.schedule'"),
            std::string::npos);
}

TEST(Config, WrongTypesAreNamed) {
  const std::string e = error_of({{"training", {{"epochs", "ten"}}}});
  EXPECT_NE(e.find("training.epochs"), std::string::npos);
  EXPECT_NE(e.find("wrong type"), std::string::npos);
}

TEST(Config, InvalidValuesAreRejected) {
  EXPECT_FALSE(error_of({{"training", {{"batch_size", 0}}}}).empty());
  EXPECT_FALSE(error_of({{"optimizer", {{"weight", {{"lr", -1.0}}}}}}).empty());
  EXPECT_FALSE(error_of({{"optimizer", {{"weight", {{"kind", "lbfgs"}}}}}}).empty());
  EXPECT_FALSE(error_of({{"backbone", {{"preset", "vgg"}}}}).empty());
  EXPECT_THROW(parse_run_config({{"precision", "f32"}}), Unsupported);
}

TEST(Config, CommentsAreAllowed) {
  const fs::path p = fs::temp_directory_path() / "xdops_config_comments.cfg";
  std::ofstream(p) << "// run\n{\n  \"seed\": 4, /* inline */\n  \"training\": {\"epochs\": 2}\n}\n";
  const RunConfig c = load_run_config(p.string());
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.train.epochs, 2u);
  fs::remove(p);
}

TEST(Config, MissingFileIsAConfigError) {
  EXPECT_THROW(load_run_config("/nonexistent/run.cfg"), ConfigError);
}

TEST(Config, DilatedPresetUsesAdamArchWithoutWarmup) {
  const RunConfig c = preset("xd-dilated");
  EXPECT_EQ(c.train.arch_opt.kind, optim::Kind::Adam);
  EXPECT_DOUBLE_EQ(c.train.arch_opt.lr, 1e-3);
  EXPECT_EQ(c.train.warmup_epochs, 0u);
}

TEST(Config, ArchitectureRowsOfThePresets) {
  struct Row {
    std::string name;
    optim::Kind kind;
    double lr;
    std::size_t warmup;
  };
  const std::vector<Row> rows = {
      {"burgers", optim::Kind::Adam, 1e-3, 0},
      {"burgers-fno-init", optim::Kind::Momentum, 1e-4, 250},
      {"darcy", optim::Kind::Momentum, 1e-1, 0},
      {"navier-stokes-nu1e-5", optim::Kind::Momentum, 1e-3, 0},
      {"jsb-chorales", optim::Kind::Adam, 2e-4, 25},
      {"penn-treebank", optim::Kind::Adam, 2e-6, 0},
      {"resnet6-xd", optim::Kind::Momentum, 1e-4, 2},
      {"resnet34-xd", optim::Kind::Momentum, 5e-4, 2},
  };
  for (const auto& r : rows) {
    const RunConfig c = preset(r.name);
    EXPECT_EQ(c.train.arch_opt.kind, r.kind) << r.name;
    EXPECT_DOUBLE_EQ(c.train.arch_opt.lr, r.lr) << r.name;
    EXPECT_EQ(c.train.warmup_epochs, r.warmup) << r.name;
    EXPECT_GE(c.train.epochs, r.warmup) << r.name;
  }
  EXPECT_THROW(preset("nope"), ConfigError);
}

TEST(Config, ShippedConfigsMatchPresets) {
  const std::vector<std::string> names = preset_names();
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), names.size());
  for (const auto& name : names) {
    const fs::path p = fs::path(XDOPS_SOURCE_DIR) / "configs" / (name + ".cfg");
    ASSERT_TRUE(fs::exists(p)) << p;
    EXPECT_EQ(to_json(load_run_config(p.string())), to_json(preset(name))) << name;
  }
}

TEST(Config, BuildsBothBackbones) {
  RunConfig c = preset("xd-permuted");
  const search::BackboneSpec b = build_backbone(c);
  EXPECT_EQ(b.nodes.front().spatial, (Shape{16, 16}));
  c.backbone.preset = "cnn1d";
  c.backbone.n = 32;
  EXPECT_EQ(build_backbone(c).nodes.front().spatial, (Shape{32}));
}

TEST(Config, BackboneFromFile) {
  const fs::path p = fs::temp_directory_path() / "xdops_config_backbone.json";
  std::ofstream(p) << search::to_json(search::cnn1d(16, 2, 1, 3)).dump();
  RunConfig c;
  c.backbone.preset = "file";
  c.backbone.file = p.string();
  EXPECT_EQ(build_backbone(c).nodes.front().channels, 2u);
  fs::remove(p);
}

TEST(Config, TaskSplitsLargerThanDataAreRejected) {
  RunConfig c;
  c.task.data = "/nonexistent/data.json";
  EXPECT_THROW(load_task(c), std::invalid_argument);
}
