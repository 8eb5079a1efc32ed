#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attnfold/discovery.hpp"
#include "attnfold/eval.hpp"
#include "attnfold/model.hpp"
#include "attnfold/proxy_task.hpp"
#include "attnfold/tau.hpp"

namespace attnfold {

// Thrown for malformed checkpoint bytes; offset is the byte position where
// the problem was detected.
class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

struct Checkpoint {
  TransformerWeights weights;
  std::optional<std::string> tau_digest;  // set for folded models
};

// "AFLD1", version byte, u32 little-endian manifest length, JSON manifest,
// then FP32 little-endian row-major blobs in manifest order.
std::string encode_checkpoint(const TransformerWeights& weights, const std::optional<std::string>& tau_digest = {});
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const TransformerWeights& weights, const std::filesystem::path& path,
                     const std::optional<std::string>& tau_digest = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Hex SHA-256.
std::string sha256_hex(const std::string& bytes);
std::string file_digest(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

// CSV "layer,head,delta_pi", P5 PGM (width H, height L) and a JSON sidecar
// describing the min-max mapping. Writes <stem>.csv, <stem>.pgm, <stem>.json.
struct HeatmapFiles {
  std::filesystem::path csv, pgm, sidecar;
};
HeatmapFiles export_heatmap(const DeltaPiReport& report, const std::filesystem::path& stem);
std::string heatmap_csv(const HeadMatrix& scores);
std::string heatmap_pgm(const HeadMatrix& scores, bool* degenerate = nullptr);

std::string delta_pi_to_json(const DeltaPiReport& report);
DeltaPiReport delta_pi_from_json(const std::string& text);

std::string corpus_to_json(const std::vector<TokenSeq>& corpus);
std::vector<TokenSeq> corpus_from_json(const std::string& text);

struct BenchConfig {
  std::size_t seq_len = 100;
  std::size_t repetitions = 20;
  bool operator==(const BenchConfig&) const = default;
};

struct TrainConfig {
  float lr = 5e-4F;
  std::size_t steps = 12000;
  std::size_t batch = 8;
  std::size_t warmup = 200;
  float pos_lr_scale = 10.0F;  // rate multiplier for the learnable position table
  bool operator==(const TrainConfig&) const = default;
};

// Whole-pipeline settings. JSON sections: model, corpus, train, discovery,
// tau, eval, bench. Unknown keys anywhere are rejected.
struct RunConfig {
  ModelConfig model;
  CorpusConfig corpus;
  TrainConfig train;
  DiscoveryConfig discovery;
  TauTrainConfig tau;
  EvalConfig eval;
  BenchConfig bench;
  std::uint64_t seed = 0;

  // Defaults tuned per position-encoding family.
  static RunConfig defaults(PositionEncoding pe = PositionEncoding::kRotary);
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

std::string run_config_to_json(const RunConfig& config);
RunConfig run_config_from_json(const std::string& text);

}  // namespace attnfold
