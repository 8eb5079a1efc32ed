#include <gtest/gtest.h>

#include <json.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "attnfold/persistence.hpp"
#include "test_util.hpp"

using namespace attnfold;
using nlohmann::json;
using attnfold::testing::kAllPe;
using attnfold::testing::scaled_model;
using attnfold::testing::tiny_config;

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kHeader = 10;

std::uint32_t manifest_length(const std::string& bytes) {
  std::uint32_t n = 0;
  for (int i = 3; i >= 0; --i) n = (n << 8) | static_cast<unsigned char>(bytes[6 + static_cast<std::size_t>(i)]);
  return n;
}

// Rebuilds a checkpoint with an edited manifest and the original blobs.
std::string with_manifest(const std::string& bytes, const std::function<void(json&)>& edit) {
  const std::uint32_t len = manifest_length(bytes);
  json m = json::parse(bytes.substr(kHeader, len));
  edit(m);
  const std::string text = m.dump();
  std::string out = bytes.substr(0, 6);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xFF));
  return out + text + bytes.substr(kHeader + len);
}

void expect_error_at(const std::string& bytes, std::uint64_t offset, const std::string& fragment) {
  try {
    decode_checkpoint(bytes);
    FAIL() << "expected CheckpointError containing " << fragment;
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.offset(), offset) << e.what();
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("attnfold_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DeltaPiReport sample_report() {
  DeltaPiReport r;
  r.scores = HeadMatrix(2, 2);
  r.scores.values = {0.0, 1.0, 1.0, 0.0};
  r.standard_error = HeadMatrix(2, 2);
  r.standard_error.values = {0.1, 0.2, 0.3, 0.4};
  r.per_n_scores = {r.scores, r.scores};
  r.used_per_n = {5, 6};
  r.skipped = 3;
  r.config.n_values = {4, 8};
  r.config.samples_per_n = 7;
  r.seed = 99;
  return r;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwiseForEveryVariant) {
  for (auto pe : kAllPe) {
    const auto w = scaled_model(tiny_config(pe, 4), 3.0F);
    const std::string bytes = encode_checkpoint(w);
    const Checkpoint back = decode_checkpoint(bytes);
    EXPECT_TRUE(back.weights.bitwise_equal(w)) << to_string(pe);
    EXPECT_EQ(back.weights.config, w.config);
    EXPECT_FALSE(back.tau_digest.has_value());
    EXPECT_EQ(encode_checkpoint(back.weights), bytes);
  }
}

TEST(Checkpoint, FileRoundTripKeepsTauDigest) {
  const fs::path dir = scratch_dir("ckpt");
  const auto w = init_model(tiny_config());
  const std::string digest = sha256_hex("tau");
  save_checkpoint(w, dir / "nested" / "m.ckpt", digest);
  const Checkpoint back = load_checkpoint(dir / "nested" / "m.ckpt");
  EXPECT_TRUE(back.weights.bitwise_equal(w));
  ASSERT_TRUE(back.tau_digest.has_value());
  EXPECT_EQ(*back.tau_digest, digest);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsBadMagicAndVersion) {
  const std::string good = encode_checkpoint(init_model(tiny_config()));
  std::string bad = good;
  bad[0] = 'X';
  expect_error_at(bad, 0, "magic");
  bad = good;
  bad[5] = 9;
  expect_error_at(bad, 5, "version");
  expect_error_at("PEA", 0, "magic");
}

TEST(Checkpoint, RejectsTruncationAndTrailingBytes) {
  const std::string good = encode_checkpoint(init_model(tiny_config()));
  const std::string cut = good.substr(0, good.size() - 7);
  try {
    decode_checkpoint(cut);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }
  const std::string header_only = good.substr(0, kHeader + 3);
  EXPECT_THROW(decode_checkpoint(header_only), CheckpointError);
  EXPECT_THROW(decode_checkpoint(good + "xx"), CheckpointError);
}

TEST(Checkpoint, RejectsCorruptManifests) {
  const std::string good = encode_checkpoint(init_model(tiny_config()));
  // Declared length disagrees with the shape.
  EXPECT_THROW(decode_checkpoint(with_manifest(good, [](json& m) { m["tensors"][1]["length"] = 4; })), CheckpointError);
  // Second tensor overlaps the first.
  EXPECT_THROW(decode_checkpoint(with_manifest(good, [](json& m) { m["tensors"][1]["offset"] = 0; })), CheckpointError);
  // Wrong name and wrong shape.
  EXPECT_THROW(decode_checkpoint(with_manifest(good, [](json& m) { m["tensors"][0]["name"] = "other"; })),
               CheckpointError);
  EXPECT_THROW(decode_checkpoint(with_manifest(good, [](json& m) { m["tensors"][0]["shape"] = {1, 2}; })),
               CheckpointError);
  // Invalid JSON inside the manifest.
  std::string broken = good;
  broken[kHeader] = '#';
  EXPECT_THROW(decode_checkpoint(broken), CheckpointError);
}

TEST(Checkpoint, RejectsNonFiniteValues) {
  auto w = init_model(tiny_config());
  w.unembed.data()[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(w)), CheckpointError);
}

TEST(Digest, KnownSha256) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Heatmap, TwoByTwoPixels) {
  HeadMatrix m(2, 2);
  m.values = {0.0, 1.0, 1.0, 0.0};
  bool degenerate = true;
  const std::string pgm = heatmap_pgm(m, &degenerate);
  EXPECT_FALSE(degenerate);
  const std::string header = "P5\n2 2\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 4);
  EXPECT_EQ(pgm.substr(0, header.size()), header);
  const std::string px = pgm.substr(header.size());
  EXPECT_EQ(std::vector<unsigned char>(px.begin(), px.end()), (std::vector<unsigned char>{0, 255, 255, 0}));
}

TEST(Heatmap, ConstantScoresAreFlaggedDegenerate) {
  HeadMatrix m(2, 3);
  m.values.assign(6, 0.25);
  bool degenerate = false;
  const std::string pgm = heatmap_pgm(m, &degenerate);
  EXPECT_TRUE(degenerate);
  for (char c : pgm.substr(pgm.size() - 6)) EXPECT_EQ(c, 0);
}

TEST(Heatmap, CsvRowsAndExportedFiles) {
  HeadMatrix m(3, 4);
  for (std::size_t i = 0; i < 12; ++i) m.values[i] = static_cast<double>(i) * 0.5 - 1.0;
  std::istringstream csv(heatmap_csv(m));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 13U);
  EXPECT_EQ(lines[0], "layer,head,delta_pi");
  EXPECT_EQ(lines[6], "1,1,1.5");

  const fs::path dir = scratch_dir("heat");
  DeltaPiReport r;
  r.scores = m;
  const HeatmapFiles f = export_heatmap(r, dir / "hm");
  EXPECT_TRUE(fs::exists(f.csv));
  EXPECT_TRUE(fs::exists(f.pgm));
  const json side = json::parse(read_file(f.sidecar));
  EXPECT_EQ(side["width"], 4);
  EXPECT_EQ(side["height"], 3);
  EXPECT_EQ(side["min"], -1.0);
  EXPECT_EQ(side["max"], 4.5);
  EXPECT_EQ(side["degenerate_range"], false);
  fs::remove_all(dir);
}

TEST(DeltaPiJson, RoundTrip) {
  const auto r = sample_report();
  const auto back = delta_pi_from_json(delta_pi_to_json(r));
  EXPECT_EQ(back.scores.values, r.scores.values);
  EXPECT_EQ(back.standard_error.values, r.standard_error.values);
  EXPECT_EQ(back.per_n_scores.size(), 2U);
  EXPECT_EQ(back.used_per_n, r.used_per_n);
  EXPECT_EQ(back.skipped, r.skipped);
  EXPECT_EQ(back.config, r.config);
  EXPECT_EQ(back.seed, r.seed);
  EXPECT_EQ(delta_pi_to_json(back), delta_pi_to_json(r));
}

TEST(CorpusJson, RoundTrip) {
  const std::vector<TokenSeq> c{{1, 2, 3}, {}, {255, 0}};
  EXPECT_EQ(corpus_from_json(corpus_to_json(c)), c);
}

TEST(RunConfigJson, RoundTripForEveryVariant) {
  for (auto pe : kAllPe) {
    RunConfig c = RunConfig::defaults(pe);
    c.seed = 17;
    c.tau.lr = 0.0123F;
    c.train.pos_lr_scale = 2.5F;
    c.eval.gold_slots = {2, 4};
    const RunConfig back = run_config_from_json(run_config_to_json(c));
    EXPECT_EQ(back, c) << to_string(pe);
    EXPECT_EQ(run_config_to_json(back), run_config_to_json(c));
  }
}

TEST(RunConfigJson, RejectsUnknownKeysAndInvalidValues) {
  const json good = json::parse(run_config_to_json(RunConfig::defaults()));
  json top = good;
  top["extra"] = 1;
  EXPECT_THROW(run_config_from_json(top.dump()), std::invalid_argument);
  for (const char* section : {"model", "corpus", "train", "discovery", "tau", "eval", "bench"}) {
    json j = good;
    j[section]["typo_key"] = 0;
    EXPECT_THROW(run_config_from_json(j.dump()), std::invalid_argument) << section;
  }
  json bad = good;
  bad["model"]["d_head"] = 7;
  EXPECT_THROW(run_config_from_json(bad.dump()), std::invalid_argument);
  bad = good;
  bad["train"]["pos_lr_scale"] = 0.0;
  EXPECT_THROW(run_config_from_json(bad.dump()), std::invalid_argument);
  EXPECT_THROW(run_config_from_json("[1,2"), std::invalid_argument);
}

TEST(Cli, MissingCheckpointExitsWithPath) {
  const fs::path dir = scratch_dir("cli");
  const std::string cmd = std::string(ATTNFOLD_CLI_PATH) + " discover --out " + dir.string() + " 2> " +
                          (dir / "err.txt").string();
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
  const std::string err = read_file(dir / "err.txt");
  EXPECT_NE(err.find((dir / "base.ckpt").string()), std::string::npos) << err;
  EXPECT_NE(err.find("train-base"), std::string::npos) << err;
  fs::remove_all(dir);
}
