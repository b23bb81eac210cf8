#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "mnvton/checkpoint.hpp"
#include "mnvton/cli.hpp"
#include "mnvton/config.hpp"
#include "mnvton/errors.hpp"

using namespace mnvton;
using nlohmann::json;
using testing::bit_equal;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mnvton_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const char* kTiny = R"({
  "model": {"d": 8, "heads": 2, "blocks": 2, "patch": 2},
  "task": {"height": 8, "width": 8, "garment_size": 4},
  "train": {"steps": 6, "batch": 2, "log_interval": 2},
  "eval": {"samples": 2}
})";

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string strip_wallclock(const std::string& jsonl) {
  std::istringstream in(jsonl);
  std::string line, out;
  while (std::getline(in, line)) {
    json j = json::parse(line);
    j.erase("wallclock_ms");
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("config JSON round trip and validation") {
  RunConfig c;
  c.variant = BlockVariant::DualNet;
  c.d = 12;
  c.seed = 17;
  c.ablation.seeds = {3, 4};
  const RunConfig back = run_config_from_json(to_json(c));
  CHECK(canonical_dump(to_json(back)) == canonical_dump(to_json(c)));

  json j = to_json(c);
  j["model"]["depth"] = 3;
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  j = to_json(c);
  j["bogus"] = 1;
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  j = to_json(c);
  j["model"]["d"] = "eight";
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  j = to_json(c);
  j["model"]["heads"] = 5;
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  j = to_json(c);
  j["variant"] = "MN_V9";
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
}

TEST_CASE("config hashes") {
  RunConfig a;
  RunConfig b = a;
  b.out = "elsewhere";
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.seed = 1;
  CHECK(config_hash(a) != config_hash(b));
  CHECK(budget_hash(a) == budget_hash(b));
  b.variant = BlockVariant::MN_V1;
  CHECK(budget_hash(a) == budget_hash(b));
  b.train.steps = 10;
  CHECK(budget_hash(a) != budget_hash(b));
  // FNV-1a 64 reference values.
  CHECK(fnv1a_hex("") == "cbf29ce484222325");
  CHECK(fnv1a_hex("a") == "af63dc4c8601ec8c");
}

TEST_CASE("checkpoint round trip is bit exact for every variant") {
  const auto dir = scratch("ckpt");
  for (BlockVariant v : {BlockVariant::DualNet, BlockVariant::NaiveSplit, BlockVariant::MN_V1, BlockVariant::MN_V2,
                         BlockVariant::MN_V3}) {
    ModelConfig c;
    c.variant = v;
    c.d = 8;
    c.heads = 2;
    const Model m = init_model(c, 3);
    randomize_parameters(m, 0.7, 4);
    save_checkpoint(dir / "m.bin", m, "abc");
    const LoadedCheckpoint l = load_checkpoint(dir / "m.bin");
    CHECK(l.config_hash == "abc");
    CHECK(l.model.config.variant == v);
    const auto pa = m.parameters(), pb = l.model.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].name == pb[i].name);
      CHECK(bit_equal(pa[i].tensor, pb[i].tensor));
    }
  }
  const std::string bytes = slurp(dir / "m.bin");
  write_file(dir / "short.bin", bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(dir / "short.bin"), IoError);
  write_file(dir / "magic.bin", "NOTACKPT" + bytes.substr(8));
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.bin"), IoError);
  std::string renamed = bytes;
  const auto pos = renamed.find("block0.wq.weight");
  REQUIRE(pos != std::string::npos);
  renamed[pos] = 'X';
  write_file(dir / "renamed.bin", renamed);
  CHECK_THROWS_AS(load_checkpoint(dir / "renamed.bin"), ConfigError);
  fs::remove_all(dir);
}

}  // TEST_SUITE

TEST_SUITE("cli") {

TEST_CASE("usage errors") {
  const CliResult none = run({});
  CHECK(none.code == 2);
  const CliResult bad = run({"frobnicate"});
  CHECK(bad.code == 2);
  CHECK(bad.err.rfind("error kind=usage", 0) == 0);
  CHECK(bad.err.find("usage: mnvton") != std::string::npos);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"train", "--no-such-flag"}).code == 2);
}

TEST_CASE("config and I/O failures map to exit codes") {
  const auto dir = scratch("codes");
  const auto cfg = write_file(dir / "bad.json", R"({"model": {"d": 7}})");
  const CliResult bad = run({"train", "--config", cfg.string(), "--out", (dir / "run").string()});
  CHECK(bad.code == 2);
  CHECK(bad.err.rfind("error kind=config message=", 0) == 0);
  CHECK(std::count(bad.err.begin(), bad.err.end(), '\n') == 1);

  CHECK(run({"train", "--config", (dir / "missing.json").string()}).code == 4);
  const auto tiny = write_file(dir / "tiny.json", kTiny);
  const CliResult no_ckpt = run({"eval", "--config", tiny.string(), "--out", (dir / "empty").string()});
  CHECK(no_ckpt.code == 4);

  // An absurd learning rate overflows the parameters and the loss.
  json j = json::parse(kTiny);
  j["train"]["lr"] = 1e200;
  j["train"]["max_grad_norm"] = 0.0;
  const auto explode = write_file(dir / "explode.json", j.dump());
  const CliResult nan = run({"train", "--config", explode.string(), "--out", (dir / "nan").string()});
  CHECK(nan.code == 3);
  CHECK(nan.err.rfind("error kind=numerical", 0) == 0);
  fs::remove_all(dir);
}

TEST_CASE("gradcheck and cost subcommands") {
  const auto dir = scratch("gc");
  const auto tiny = write_file(dir / "tiny.json", kTiny);
  const CliResult g = run({"gradcheck", "--config", tiny.string(), "--out", (dir / "run").string()});
  CHECK(g.code == 0);
  CHECK(g.out.rfind("max_rel_err=", 0) == 0);
  const CliResult c = run({"cost", "--config", tiny.string(), "--out", (dir / "run").string()});
  CHECK(c.code == 0);
  const json report = json::parse(c.out);
  CHECK(report.contains("dual_single_ratio"));
  CHECK(report.at("variants").size() == 5);
  CHECK(fs::exists(dir / "run" / "reports" / "cost.json"));
  fs::remove_all(dir);
}

TEST_CASE("train is reproducible and every artifact stays inside the run directory") {
  const auto dir = scratch("repro");
  const auto tiny = write_file(dir / "tiny.json", kTiny);
  const std::string a = (dir / "a").string(), b = (dir / "b").string();
  REQUIRE(run({"train", "--config", tiny.string(), "--seed", "5", "--out", a}).code == 0);
  REQUIRE(run({"train", "--config", tiny.string(), "--seed", "5", "--out", b}).code == 0);
  CHECK(slurp(dir / "a" / "checkpoint.bin") == slurp(dir / "b" / "checkpoint.bin"));
  const std::string ma = slurp(dir / "a" / "metrics.jsonl");
  CHECK(strip_wallclock(ma) == strip_wallclock(slurp(dir / "b" / "metrics.jsonl")));
  CHECK(std::count(ma.begin(), ma.end(), '\n') == 3);
  const json first = json::parse(ma.substr(0, ma.find('\n')));
  CHECK(first.contains("config_hash"));
  CHECK(first.contains("loss"));
  CHECK(first.contains("step"));
  CHECK(first.contains("wallclock_ms"));

  // Downstream subcommands reuse the run directory's config.
  CHECK(run({"eval", "--out", a}).code == 0);
  CHECK(run({"sample", "--out", a, "--count", "1"}).code == 0);
  CHECK(run({"pca", "--out", a, "--k", "2"}).code == 0);
  CHECK(run({"gen-data", "--config", tiny.string(), "--out", a, "--count", "1"}).code == 0);
  const json eval = json::parse(slurp(dir / "a" / "reports" / "eval.json"));
  CHECK(eval.at("config_hash") == first.at("config_hash"));

  // A checkpoint trained under another config is refused.
  const CliResult mismatch = run({"eval", "--out", a, "--seed", "6"});
  CHECK(mismatch.code == 2);

  std::set<std::string> top;
  for (const auto& e : fs::directory_iterator(dir)) top.insert(e.path().filename().string());
  CHECK(top == std::set<std::string>{"a", "b", "tiny.json"});
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    const std::string rel = fs::relative(e.path(), dir / "a").string();
    const bool allowed = rel == "config.json" || rel == "checkpoint.bin" || rel == "metrics.jsonl" ||
                         rel.rfind("reports", 0) == 0 || rel.rfind("images", 0) == 0;
    CHECK_MESSAGE(allowed, rel);
  }
  fs::remove_all(dir);
}

}  // TEST_SUITE
