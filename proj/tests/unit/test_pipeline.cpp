#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gibbscs/pipeline.hpp"
#include "gibbscs/prior_model.hpp"
#include "gibbscs/random.hpp"
#include "oracles.hpp"

using namespace gibbscs;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "gibbscs-pipeline" / name;
  fs::remove_all(dir);
  fs::create_directories(dir.parent_path());
  return dir;
}

fs::path image_dir(const std::string& name, int count, int rows, int cols, std::uint64_t seed) {
  const fs::path dir = fresh_dir(name);
  fs::create_directories(dir);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < count; ++i) {
    // Smooth-ish content so restorations are not pure noise.
    Image x = oracle::random_image(rows, cols, rng, 0.3, 0.7);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) x(r, c) = 0.5 * x(r, c) + 0.4 * (r + c) / double(rows + cols);
    std::ostringstream n;
    n << "img" << i << ".pgm";
    write_image(dir / n.str(), x);
  }
  return dir;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("argument errors exit with 2 before any output") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"bogus"}).code == 2);
  CHECK(cli({"measure", "--mr", "0.25"}).code == 2);

  const auto imgs = image_dir("args-imgs", 1, 16, 16, 1);
  const auto out = fresh_dir("args-out");
  const auto bad = cli({"--out", out.string(), "measure", "--images", imgs.string(), "--mr", "1.5"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("error:") != std::string::npos);
  CHECK_FALSE(fs::exists(out));
  CHECK(cli({"--out", out.string(), "measure", "--images", imgs.string(), "--snr-db", "loud"}).code == 2);
  CHECK_FALSE(fs::exists(out));

  const auto empty = fresh_dir("empty-imgs");
  fs::create_directories(empty);
  CHECK(cli({"--out", out.string(), "extract", "--images", empty.string()}).code == 3);
  CHECK_FALSE(fs::exists(out));
  CHECK(cli({"--out", out.string(), "extract", "--images", (empty / "nope").string()}).code == 3);
  CHECK(cli({"--out", out.string(), "restore", "--model", (empty / "none.json").string(),
             "--images", imgs.string()}).code == 3);
}

TEST_CASE("extract is deterministic and honours config files") {
  const auto imgs = image_dir("ex-imgs", 2, 40, 40, 2);
  const auto a = fresh_dir("ex-a");
  const auto b = fresh_dir("ex-b");
  REQUIRE(cli({"--out", a.string(), "extract", "--images", imgs.string(), "--stride", "10"}).code == 0);
  REQUIRE(cli({"--out", b.string(), "extract", "--images", imgs.string(), "--stride", "10"}).code == 0);
  CHECK(sha256_file(a / "patches.bin") == sha256_file(b / "patches.bin"));
  const auto man = load_manifest(a / "manifest.json");
  CHECK(man.status == "complete");
  CHECK(man.facts.at("patches") == "18");
  CHECK(man.outputs.count("patches.bin") == 1);
  CHECK(man.inputs.size() == 2);

  const auto cfg = fresh_dir("ex-cfg.json");
  std::ofstream(cfg) << R"({"patch_size": 10, "stride": 10})";
  const auto c = fresh_dir("ex-c");
  REQUIRE(cli({"--config", cfg.string(), "--out", c.string(), "extract", "--images", imgs.string()}).code == 0);
  CHECK(load_manifest(c / "manifest.json").facts.at("patches") == "32");
  const auto d = fresh_dir("ex-d");
  REQUIRE(cli({"--config", cfg.string(), "--out", d.string(), "extract", "--images", imgs.string(),
               "--patch-size", "20"}).code == 0);
  CHECK(load_manifest(d / "manifest.json").facts.at("patches") == "18");
}

TEST_CASE("a shared config file serves commands with list and scalar options") {
  const auto cfg = fresh_dir("sp-cfg.json");
  std::ofstream(cfg) << R"({"preset": "bcnn1", "samples": 256})";
  const auto out = fresh_dir("sp-out");
  REQUIRE(cli({"--config", cfg.string(), "--out", out.string(), "spectrum"}).code == 0);
  const auto again = fresh_dir("sp-again");
  CHECK(cli({"replay", (out / "manifest.json").string(), "--out", again.string()}).code == 0);
}

TEST_CASE("train reports parameter counts and is reproducible") {
  const auto imgs = image_dir("tr-imgs", 2, 40, 40, 3);
  const auto ds = fresh_dir("tr-ds");
  REQUIRE(cli({"--out", ds.string(), "extract", "--images", imgs.string(), "--stride", "5"}).code == 0);

  const auto zero = fresh_dir("tr-zero");
  REQUIRE(cli({"--seed", "9", "--out", zero.string(), "train", "--dataset", ds.string(), "--preset",
               "bcnn2", "--max-epochs", "0"}).code == 0);
  const auto man = load_manifest(zero / "manifest.json");
  CHECK(man.facts.at("trainable_parameters") == "56");
  CHECK(load_model(zero / "model.json") == preset_model("bcnn2", man.seeds.at("preset-init")));

  const auto a = fresh_dir("tr-a");
  const auto b = fresh_dir("tr-b");
  for (const auto& dir : {a, b}) {
    REQUIRE(cli({"--seed", "9", "--out", dir.string(), "train", "--dataset", ds.string(), "--preset",
                 "bcnn1", "--max-epochs", "2", "--batch", "8", "--kld-chain-steps", "2"}).code == 0);
  }
  CHECK(sha256_file(a / "model.json") == sha256_file(b / "model.json"));
  CHECK(sha256_file(a / "trace.csv") == sha256_file(b / "trace.csv"));
  CHECK(load_manifest(a / "manifest.json").facts.at("trainable_parameters") == "40");
}

TEST_CASE("eval: identical directories and mismatched names") {
  const auto imgs = image_dir("ev-imgs", 3, 16, 16, 4);
  const auto out = fresh_dir("ev-out");
  REQUIRE(cli({"--out", out.string(), "eval", "--restored", imgs.string(), "--reference", imgs.string()}).code == 0);
  const auto summary = read_json(out / "summary.json");
  CHECK(summary.dump().find("100") != std::string::npos);
  std::ifstream report(out / "report.csv");
  std::string header, line;
  std::getline(report, header);
  int rows = 0;
  while (std::getline(report, line)) {
    ++rows;
    CHECK(line.find(",100,") != std::string::npos);
    CHECK(line.find(",1,") != std::string::npos);
  }
  CHECK(rows == 3);

  const auto other = image_dir("ev-other", 3, 16, 16, 4);
  fs::rename(other / "img2.pgm", other / "renamed.pgm");
  const auto bad = cli({"--out", fresh_dir("ev-bad").string(), "eval", "--restored", other.string(),
                        "--reference", imgs.string()});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("img2.pgm") != std::string::npos);
  CHECK(bad.err.find("renamed.pgm") != std::string::npos);
}

TEST_CASE("restore at full sampling recovers the image") {
  const auto imgs = fresh_dir("rs-imgs");
  fs::create_directories(imgs);
  const Image crop = read_image(std::string(GIBBSCS_TEST_DATA_DIR) + "/test/00_astronaut.pgm");
  write_image(imgs / "img0.pgm", crop.block(20, 20, 16, 16));
  const auto out = fresh_dir("rs-out");
  REQUIRE(cli({"--out", out.string(), "restore", "--preset", "bcnn2", "--images", imgs.string(),
               "--mr", "1.0", "--iterations", "60", "--burn-in", "30"}).code == 0);
  const auto summary = read_json(out / "summary.json");
  INFO(summary.dump());
  std::ifstream report(out / "report.csv");
  std::string header, line;
  std::getline(report, header);
  std::getline(report, line);
  const auto cells = [&] {
    std::vector<std::string> v;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) v.push_back(cell);
    return v;
  }();
  std::vector<std::string> names;
  std::stringstream hs(header);
  for (std::string cell; std::getline(hs, cell, ',');) names.push_back(cell);
  const auto col = std::find(names.begin(), names.end(), "psnr_db") - names.begin();
  REQUIRE(col < static_cast<long>(cells.size()));
  CHECK(std::stod(cells[col]) >= 40.0);
  CHECK(load_manifest(out / "manifest.json").facts.at("measurements:img0:mr1") == "256");
}

TEST_CASE("measure records 4096 measurements for a 128x128 image at MR 0.25") {
  const auto imgs = image_dir("ms-imgs", 1, 128, 128, 6);
  const auto out = fresh_dir("ms-out");
  REQUIRE(cli({"--out", out.string(), "measure", "--images", imgs.string(), "--mr", "0.25"}).code == 0);
  CHECK(load_manifest(out / "manifest.json").facts.at("measurements:img0:mr0.25") == "4096");
}

TEST_CASE("replay reproduces outputs and detects tampering") {
  const auto imgs = image_dir("rp-imgs", 2, 16, 16, 7);
  const auto out = fresh_dir("rp-out");
  REQUIRE(cli({"--seed", "4", "--out", out.string(), "measure", "--images", imgs.string(), "--mr", "0.5",
               "--snr-db", "noiseless", "12"}).code == 0);
  const auto replay_dir = fresh_dir("rp-out-again");
  const auto ok = cli({"replay", (out / "manifest.json").string(), "--out", replay_dir.string()});
  CHECK(ok.code == 0);

  auto man = load_manifest(out / "manifest.json");
  REQUIRE_FALSE(man.outputs.empty());
  man.outputs.begin()->second = std::string(64, '0');
  save_manifest(man, out / "manifest.json");
  const auto bad = cli({"replay", (out / "manifest.json").string(), "--out", fresh_dir("rp-out-3").string()});
  CHECK(bad.code == 1);
  CHECK(bad.out.find(man.outputs.begin()->first) != std::string::npos);
}

}  // TEST_SUITE
