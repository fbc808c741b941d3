#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bench.hpp"
#include "cli.hpp"
#include "xdops/checkpoint.hpp"
#include "xdops/kaleidoscope.hpp"

using namespace xd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Out {
  int code;
  std::string out, err;
};

Out xdops(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "xdops_test_cli";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json last_json_line(const std::string& text) {
  std::istringstream s(text);
  std::string line, last;
  while (std::getline(s, line))
    if (!line.empty()) last = line;
  return json::parse(last);
}

/// Skip edge 0 -> 1, circular conv edge 1 -> 2, on 8 points.
fs::path skip_conv_checkpoint() {
  search::BackboneSpec b;
  b.nodes = {{1, {8}}, {1, {8}}, {1, {8}}};
  search::EdgeSpec skip;
  skip.u = 0, skip.v = 1, skip.kind = search::EdgeKind::Skip;
  search::EdgeSpec conv;
  conv.u = 1, conv.v = 2, conv.kind = search::EdgeKind::Conv, conv.dilation = 2;
  b.edges = {skip, conv};
  const search::Supernet net = search::substitute_backbone(b, {});
  const search::TrainConfig cfg;
  const auto p = scratch("skip_conv.xdck");
  ckpt::save(p.string(), net, search::make_trainer(net, cfg), cfg, {});
  return p;
}

}  // namespace

TEST(Cli, HelpMatchesSnapshot) {
  const Out r = xdops({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, slurp(fs::path(XDOPS_SOURCE_DIR) / "tests" / "golden" / "help.txt"));
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(xdops({}).code, 1);
  EXPECT_EQ(xdops({"frobnicate"}).code, 1);
  EXPECT_EQ(xdops({"gen", "--task", "dilated"}).code, 1);
  EXPECT_EQ(xdops({"eval", "--checkpoint", "a", "--data", "b", "--split", "dev"}).code, 1);
}

TEST(Cli, UnknownConfigKeyIsNamed) {
  const auto p = scratch("bad.cfg");
  std::ofstream(p) << R"({"training": {"epochs": 1}, "xd": {"bogus": true}})";
  const Out r = xdops({"train", "--config", p.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown key 'xd.bogus'"), std::string::npos) << r.err;
}

TEST(Cli, VerifyPassesAndCatchesTwiddleFault) {
  const auto report = scratch("verify.jsonl");
  const Out ok = xdops({"verify", "--sizes", "8", "--report", report.string()});
  EXPECT_EQ(ok.code, 0) << ok.out;
  const json summary = last_json_line(slurp(report));
  EXPECT_EQ(summary["failed"], 0);
  EXPECT_GT(summary["claims"].get<int>(), 100);

  const Out bad = xdops({"verify", "--sizes", "8", "--fault-twiddle"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("dft/"), std::string::npos);
  EXPECT_FALSE(kal::detail::twiddle_fault());
}

TEST(Cli, GenTrainEvalRoundTrip) {
  const auto data = scratch("dilated.json");
  ASSERT_EQ(xdops({"gen", "--task", "dilated", "--n", "16", "--samples", "48", "--seed", "2", "--out", data.string()})
                .code,
            0);
  const auto dir = scratch("run");
  fs::remove_all(dir);
  json cfg = {{"backbone", {{"n", 16}, {"channels", 2}}},
              {"task", {{"data", data.string()}, {"train", 32}, {"test", 16}}},
              {"training", {{"epochs", 2}, {"batch_size", 8}}},
              {"seed", 4},
              {"output_dir", dir.string()}};
  const auto cfg_path = scratch("run.cfg");
  std::ofstream(cfg_path) << cfg.dump();
  const Out t = xdops({"train", "--config", cfg_path.string()});
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"config.json", "history.jsonl", "last.xdck", "best.xdck"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;

  const json last_epoch = last_json_line(slurp(dir / "history.jsonl"));
  const Out train_eval =
      xdops({"eval", "--checkpoint", (dir / "last.xdck").string(), "--data", data.string(), "--split", "train"});
  ASSERT_EQ(train_eval.code, 0) << train_eval.err;
  EXPECT_EQ(json::parse(train_eval.out)["loss"].get<double>(), last_epoch["train_loss"].get<double>());

  const Out test_eval =
      xdops({"eval", "--checkpoint", (dir / "last.xdck").string(), "--data", data.string(), "--split", "test"});
  EXPECT_EQ(json::parse(test_eval.out)["metric"].get<double>(), last_json_line(t.out)["test_metric"].get<double>());
  EXPECT_EQ(json::parse(test_eval.out)["samples"], 16);

  // A second identical run reproduces the history apart from timings.
  const std::string first = slurp(dir / "history.jsonl");
  ASSERT_EQ(xdops({"train", "--config", cfg_path.string()}).code, 0);
  std::istringstream a(first), b(slurp(dir / "history.jsonl"));
  std::string la, lb;
  while (std::getline(a, la) && std::getline(b, lb)) {
    json ja = json::parse(la), jb = json::parse(lb);
    ja.erase("wallclock_s");
    jb.erase("wallclock_s");
    EXPECT_EQ(ja, jb);
  }

  // The permuted task does not fit this backbone.
  const auto perm = scratch("permuted.json");
  ASSERT_EQ(xdops({"gen", "--task", "permuted", "--n", "16", "--samples", "4", "--out", perm.string()}).code, 0);
  const Out mismatch = xdops({"eval", "--checkpoint", (dir / "last.xdck").string(), "--data", perm.string()});
  EXPECT_EQ(mismatch.code, 1);
  EXPECT_NE(mismatch.err.find("input_shape"), std::string::npos);
}

TEST(Cli, ExportSkipIsIdentityAndConvIsCirculant) {
  const auto ck = skip_conv_checkpoint();
  const auto out0 = scratch("edge0.json"), out1 = scratch("edge1.json");
  ASSERT_EQ(xdops({"export", "--checkpoint", ck.string(), "--edge", "0", "--dense", out0.string()}).code, 0);
  ASSERT_EQ(xdops({"export", "--checkpoint", ck.string(), "--edge", "1", "--dense", out1.string()}).code, 0);

  const json skip = json::parse(slurp(out0));
  const auto a = skip["channel_maps"][0]["matrix"].get<std::vector<double>>();
  ASSERT_EQ(a.size(), 64u);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(a[i * 8 + j], i == j ? 1.0 : 0.0, 1e-12);

  const ckpt::Checkpoint c = ckpt::load(ck.string());
  const auto w = c.net.edges[1].op.weight.re();
  const json conv = json::parse(slurp(out1));
  const auto m = conv["channel_maps"][0]["matrix"].get<std::vector<double>>();
  ASSERT_EQ(m.size(), 64u);
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t s = 0; s < 8; ++s) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 3; ++j)
        if ((t + 8 - s) % 8 == 2 * j) expect += w[j];
      EXPECT_NEAR(m[t * 8 + s], expect, 1e-12) << t << "," << s;
    }
  EXPECT_EQ(conv["K"]["re"].size(), 64u);
}

TEST(Cli, ExportOverCapExitsOne) {
  const auto ck = skip_conv_checkpoint();
  const Out r =
      xdops({"export", "--checkpoint", ck.string(), "--edge", "1", "--dense", scratch("x.json").string(), "--cap", "4"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("cap"), std::string::npos);
  EXPECT_EQ(kal::materialization_cap(), 1024u);
}

TEST(Bench, MultiplyAddCounts) {
  for (std::size_t n : {64u, 256u, 1024u}) {
    const std::size_t lg = kal::log2_exact(n);
    EXPECT_EQ(kal::butterfly_madds(n), 2 * n * lg);
    EXPECT_EQ(bench::dense_madds(n, 1), n * n);
    const double ratio = double(bench::xd_madds(2 * n, 1, 1)) / double(bench::xd_madds(n, 1, 1));
    EXPECT_GE(ratio, 2.0);
    EXPECT_LE(ratio, 2.5);
    EXPECT_LE(bench::xd_madds(n, 1, 1), 4 * bench::fft_conv_madds(n, 1));
  }
}

TEST(Bench, CsvFromCli) {
  const auto csv = scratch("bench.csv");
  const Out r = xdops({"bench", "--sizes", "64,128", "--depths", "1", "--counts-only", "--csv", csv.string()});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.out, slurp(csv));
  EXPECT_EQ(r.out.substr(0, r.out.find('\n')), "op,n,c,depth,mean_us,stddev_us,madds");
  EXPECT_NE(r.out.find("dense,64,1,0,0,0,4096"), std::string::npos);
  EXPECT_EQ(xdops({"bench", "--sizes", "100", "--counts-only"}).code, 1);
}
