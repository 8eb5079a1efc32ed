#include "attnfold/persistence.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "attnfold/float_text.hpp"

namespace attnfold {

using nlohmann::json;

namespace {

constexpr char kMagic[] = "AFLD1";
constexpr std::size_t kMagicLen = 5;
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kHeaderLen = kMagicLen + 1 + 4;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw std::invalid_argument(where + ": unknown key \"" + key + "\"");
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(where + "." + key + ": wrong type");
  }
}

void read_float(const json& j, const char* key, float& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_number()) throw std::invalid_argument(where + "." + key + ": expected a number");
  out = static_cast<float>(j.at(key).get<double>());
}

json model_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model}, {"d_head", c.d_head},
          {"vocab", c.vocab},       {"max_len", c.max_len}, {"pe", to_string(c.pe)}, {"use_mlp", c.use_mlp},
          {"d_ff", c.d_ff},         {"seed", c.seed}};
}

ModelConfig model_from(const json& j) {
  const std::string w = "model";
  reject_unknown(j, {"n_layers", "n_heads", "d_model", "d_head", "vocab", "max_len", "pe", "use_mlp", "d_ff", "seed"}, w);
  ModelConfig c;
  read_opt(j, "n_layers", c.n_layers, w);
  read_opt(j, "n_heads", c.n_heads, w);
  read_opt(j, "d_model", c.d_model, w);
  read_opt(j, "d_head", c.d_head, w);
  read_opt(j, "vocab", c.vocab, w);
  read_opt(j, "max_len", c.max_len, w);
  if (j.contains("pe")) c.pe = parse_position_encoding(j.at("pe").get<std::string>());
  read_opt(j, "use_mlp", c.use_mlp, w);
  read_opt(j, "d_ff", c.d_ff, w);
  read_opt(j, "seed", c.seed, w);
  return c;
}

std::vector<std::pair<std::string, Shape>> expected_layout(const TransformerWeights& w) {
  std::vector<std::pair<std::string, Shape>> out;
  w.for_each([&](const std::string& name, const Tensor& t) { out.emplace_back(name, t.shape()); });
  return out;
}

}  // namespace

// ---- checkpoint -------------------------------------------------------------

std::string encode_checkpoint(const TransformerWeights& weights, const std::optional<std::string>& tau_digest) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  std::string blobs;
  weights.for_each([&](const std::string& name, const Tensor& t) {
    const std::uint64_t len = t.numel() * sizeof(float);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"length", len}});
    blobs.append(reinterpret_cast<const char*>(t.data().data()), len);
    offset += len;
  });
  json manifest = {{"config", model_json(weights.config)}, {"tensors", tensors}};
  if (tau_digest) manifest["tau_digest"] = *tau_digest;
  const std::string m = manifest.dump();
  std::string out(kMagic, kMagicLen);
  out.push_back(static_cast<char>(kVersion));
  const auto mlen = static_cast<std::uint32_t>(m.size());
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((mlen >> (8 * b)) & 0xFF));
  out += m;
  out += blobs;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0) throw CheckpointError("bad magic", 0);
  if (bytes.size() < kHeaderLen) throw CheckpointError("truncated header", bytes.size());
  if (static_cast<std::uint8_t>(bytes[kMagicLen]) != kVersion) {
    throw CheckpointError("unsupported version " + std::to_string(static_cast<std::uint8_t>(bytes[kMagicLen])),
                          kMagicLen);
  }
  std::uint32_t mlen = 0;
  for (int b = 0; b < 4; ++b) mlen |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[kMagicLen + 1 + b])) << (8 * b);
  if (bytes.size() < kHeaderLen + mlen) throw CheckpointError("manifest extends past end of file", bytes.size());
  json manifest;
  try {
    manifest = json::parse(bytes.substr(kHeaderLen, mlen));
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("malformed manifest: ") + e.what(), kHeaderLen + e.byte);
  }
  const std::uint64_t blob_start = kHeaderLen + mlen;
  Checkpoint ck;
  try {
    reject_unknown(manifest, {"config", "tensors", "tau_digest"}, "manifest");
    ck.weights.config = model_from(manifest.at("config"));
    ck.weights.config.validate();
    if (manifest.contains("tau_digest")) ck.tau_digest = manifest["tau_digest"].get<std::string>();
  } catch (const std::exception& e) {
    if (dynamic_cast<const CheckpointError*>(&e)) throw;
    throw CheckpointError(std::string("invalid manifest: ") + e.what(), kHeaderLen);
  }
  TransformerWeights w = allocate_model(ck.weights.config);
  const auto layout = expected_layout(w);
  const json& tensors = manifest.at("tensors");
  if (!tensors.is_array() || tensors.size() != layout.size()) {
    throw CheckpointError("manifest lists " + std::to_string(tensors.is_array() ? tensors.size() : 0) +
                              " tensors, model needs " + std::to_string(layout.size()),
                          kHeaderLen);
  }
  std::vector<Tensor> loaded;
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const json& e = tensors[i];
    std::string name;
    Shape shape;
    std::uint64_t off = 0, len = 0;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<Shape>();
      off = e.at("offset").get<std::uint64_t>();
      len = e.at("length").get<std::uint64_t>();
    } catch (const json::exception&) {
      throw CheckpointError("tensor entry " + std::to_string(i) + " is incomplete", kHeaderLen);
    }
    if (name != layout[i].first || shape != layout[i].second) {
      throw CheckpointError("tensor " + std::to_string(i) + " is " + name + shape_str(shape) + ", expected " +
                                layout[i].first + shape_str(layout[i].second),
                            kHeaderLen);
    }
    if (len != shape_numel(shape) * sizeof(float)) {
      throw CheckpointError("tensor " + name + " declares " + std::to_string(len) + " bytes but its shape needs " +
                                std::to_string(shape_numel(shape) * sizeof(float)),
                            blob_start + off);
    }
    if (off != expected_offset) {
      throw CheckpointError("tensor " + name + " offset " + std::to_string(off) + " overlaps or leaves a gap",
                            blob_start + off);
    }
    if (blob_start + off + len > bytes.size()) throw CheckpointError("tensor " + name + " is truncated", bytes.size());
    Tensor t(shape);
    std::memcpy(t.data().data(), bytes.data() + blob_start + off, len);
    if (!t.all_finite()) throw CheckpointError("tensor " + name + " holds non-finite values", blob_start + off);
    loaded.push_back(std::move(t));
    expected_offset = off + len;
  }
  if (blob_start + expected_offset != bytes.size()) {
    throw CheckpointError("trailing bytes after last tensor", blob_start + expected_offset);
  }
  std::size_t k = 0;
  w.for_each([&](const std::string&, Tensor& t) { t = std::move(loaded[k++]); });
  ck.weights = std::move(w);
  return ck;
}

void save_checkpoint(const TransformerWeights& weights, const std::filesystem::path& path,
                     const std::optional<std::string>& tau_digest) {
  write_file(path, encode_checkpoint(weights, tau_digest));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

// ---- files and digests ------------------------------------------------------

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string file_digest(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

// ---- heatmap ------------------------------------------------------------------

std::string heatmap_csv(const HeadMatrix& s) {
  std::ostringstream o;
  o << "layer,head,delta_pi\n";
  for (std::size_t l = 0; l < s.n_layers; ++l)
    for (std::size_t h = 0; h < s.n_heads; ++h) {
      char buf[40];
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, s.at(l, h));
      o << l << ',' << h << ',' << std::string(buf, end) << '\n';
    }
  return o.str();
}

std::string heatmap_pgm(const HeadMatrix& s, bool* degenerate) {
  for (double v : s.values) {
    if (!std::isfinite(v)) throw std::invalid_argument("heatmap: non-finite score");
  }
  const auto [lo, hi] = std::minmax_element(s.values.begin(), s.values.end());
  const double min = s.values.empty() ? 0.0 : *lo, max = s.values.empty() ? 0.0 : *hi;
  const bool flat = !(max > min);
  if (degenerate) *degenerate = flat;
  std::string out = "P5\n" + std::to_string(s.n_heads) + " " + std::to_string(s.n_layers) + "\n255\n";
  for (double v : s.values) {
    const double u = flat ? 0.0 : (v - min) / (max - min);
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(u * 255.0))));
  }
  return out;
}

HeatmapFiles export_heatmap(const DeltaPiReport& report, const std::filesystem::path& stem) {
  HeatmapFiles f{stem, stem, stem};
  f.csv += ".csv";
  f.pgm += ".pgm";
  f.sidecar += ".json";
  bool degenerate = false;
  const std::string pgm = heatmap_pgm(report.scores, &degenerate);
  write_file(f.csv, heatmap_csv(report.scores));
  write_file(f.pgm, pgm);
  const auto& v = report.scores.values;
  const double min = v.empty() ? 0.0 : *std::min_element(v.begin(), v.end());
  const double max = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  json side = {{"width", report.scores.n_heads}, {"height", report.scores.n_layers},
               {"rows", "layer"},                {"columns", "head"},
               {"min", min},                     {"max", max},
               {"mapping", "pixel = round(255 * (score - min) / (max - min))"},
               {"degenerate_range", degenerate}};
  write_file(f.sidecar, side.dump(2) + "\n");
  return f;
}

// ---- reports ------------------------------------------------------------------

namespace {

json matrix_json(const HeadMatrix& m) {
  return {{"n_layers", m.n_layers}, {"n_heads", m.n_heads}, {"values", m.values}};
}

HeadMatrix matrix_from(const json& j) {
  HeadMatrix m(j.at("n_layers").get<std::size_t>(), j.at("n_heads").get<std::size_t>());
  m.values = j.at("values").get<std::vector<double>>();
  if (m.values.size() != m.n_layers * m.n_heads) throw std::invalid_argument("score matrix size mismatch");
  return m;
}

json discovery_json(const DiscoveryConfig& c) {
  return {{"n_values", c.n_values}, {"samples_per_n", c.samples_per_n}, {"K", c.K},
          {"epsilon", c.epsilon},   {"correct_only", c.correct_only}};
}

DiscoveryConfig discovery_from(const json& j, PositionEncoding pe) {
  const std::string w = "discovery";
  reject_unknown(j, {"n_values", "samples_per_n", "K", "epsilon", "correct_only"}, w);
  DiscoveryConfig c = DiscoveryConfig::defaults_for(pe);
  read_opt(j, "n_values", c.n_values, w);
  read_opt(j, "samples_per_n", c.samples_per_n, w);
  read_opt(j, "K", c.K, w);
  read_opt(j, "epsilon", c.epsilon, w);
  read_opt(j, "correct_only", c.correct_only, w);
  return c;
}

}  // namespace

std::string delta_pi_to_json(const DeltaPiReport& r) {
  json per_n = json::array();
  for (const auto& m : r.per_n_scores) per_n.push_back(matrix_json(m));
  return json{{"scores", matrix_json(r.scores)},
              {"per_n_scores", per_n},
              {"standard_error", matrix_json(r.standard_error)},
              {"used_per_n", r.used_per_n},
              {"skipped", r.skipped},
              {"config", discovery_json(r.config)},
              {"seed", r.seed}}
      .dump(2);
}

DeltaPiReport delta_pi_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    DeltaPiReport r;
    r.scores = matrix_from(j.at("scores"));
    for (const auto& m : j.at("per_n_scores")) r.per_n_scores.push_back(matrix_from(m));
    r.standard_error = matrix_from(j.at("standard_error"));
    r.used_per_n = j.at("used_per_n").get<std::vector<std::size_t>>();
    r.skipped = j.at("skipped").get<std::size_t>();
    r.config = discovery_from(j.at("config"), PositionEncoding::kRotary);
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("delta-pi report: ") + e.what());
  }
}

std::string corpus_to_json(const std::vector<TokenSeq>& corpus) { return json(corpus).dump(); }

std::vector<TokenSeq> corpus_from_json(const std::string& text) {
  try {
    return json::parse(text).get<std::vector<TokenSeq>>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("corpus: ") + e.what());
  }
}

// ---- run config ---------------------------------------------------------------

RunConfig RunConfig::defaults(PositionEncoding pe) {
  RunConfig c;
  c.model.pe = pe;
  c.discovery = DiscoveryConfig::defaults_for(pe);
  return c;
}

void RunConfig::validate() const {
  model.validate();
  if (corpus.mix_ratio < 0.0 || corpus.mix_ratio > 1.0) throw std::invalid_argument("corpus.mix_ratio outside [0,1]");
  if (corpus.seq_len > model.max_len) throw std::invalid_argument("corpus.seq_len exceeds model.max_len");
  if (train.batch == 0) throw std::invalid_argument("train.batch must be positive");
  if (!(train.pos_lr_scale > 0.0F) || !std::isfinite(train.pos_lr_scale)) {
    throw std::invalid_argument("train.pos_lr_scale must be positive and finite");
  }
  discovery.validate(model);
  tau.validate(model);
  if (bench.repetitions < 5) throw std::invalid_argument("bench.repetitions must be at least 5");
  if (bench.seq_len == 0 || bench.seq_len > model.max_len) throw std::invalid_argument("bench.seq_len outside [1, max_len]");
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["model"] = model_json(c.model);
  j["corpus"] = {{"markov_seed", c.corpus.markov_seed}, {"mix_ratio", c.corpus.mix_ratio},
                 {"seq_len", c.corpus.seq_len},         {"count", c.corpus.count},
                 {"seed", c.corpus.seed}};
  j["train"] = {{"lr", shortest_float(c.train.lr)}, {"steps", c.train.steps}, {"batch", c.train.batch},
                {"warmup", c.train.warmup}, {"pos_lr_scale", shortest_float(c.train.pos_lr_scale)}};
  j["discovery"] = discovery_json(c.discovery);
  j["tau"] = {{"samples", c.tau.samples},
              {"n", c.tau.n},
              {"lr", shortest_float(c.tau.lr)},
              {"beta1", shortest_float(c.tau.beta1)},
              {"beta2", shortest_float(c.tau.beta2)},
              {"weight_decay", shortest_float(c.tau.weight_decay)},
              {"epochs", c.tau.epochs},
              {"batch_size", c.tau.batch_size},
              {"seed", c.tau.seed}};
  j["eval"] = {{"copy_n", c.eval.copy_n},
               {"copy_samples", c.eval.copy_samples},
               {"kv_pairs", c.eval.kv_pairs},
               {"gold_slots", c.eval.gold_slots},
               {"kv_samples", c.eval.kv_samples},
               {"knowledge_sequences", c.eval.knowledge_sequences},
               {"knowledge_len", c.eval.knowledge_len},
               {"seed", c.eval.seed}};
  j["bench"] = {{"seq_len", c.bench.seq_len}, {"repetitions", c.bench.repetitions}};
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  reject_unknown(j, {"seed", "model", "corpus", "train", "discovery", "tau", "eval", "bench"}, "config");
  RunConfig c;
  read_opt(j, "seed", c.seed, "config");
  if (j.contains("model")) c.model = model_from(j["model"]);
  c = [&] {
    RunConfig d = RunConfig::defaults(c.model.pe);
    d.model = c.model;
    d.seed = c.seed;
    return d;
  }();
  if (j.contains("corpus")) {
    const json& s = j["corpus"];
    reject_unknown(s, {"markov_seed", "mix_ratio", "seq_len", "count", "seed"}, "corpus");
    read_opt(s, "markov_seed", c.corpus.markov_seed, "corpus");
    read_opt(s, "mix_ratio", c.corpus.mix_ratio, "corpus");
    read_opt(s, "seq_len", c.corpus.seq_len, "corpus");
    read_opt(s, "count", c.corpus.count, "corpus");
    read_opt(s, "seed", c.corpus.seed, "corpus");
  }
  if (j.contains("train")) {
    const json& s = j["train"];
    reject_unknown(s, {"lr", "steps", "batch", "warmup", "pos_lr_scale"}, "train");
    read_float(s, "lr", c.train.lr, "train");
    read_opt(s, "steps", c.train.steps, "train");
    read_opt(s, "batch", c.train.batch, "train");
    read_opt(s, "warmup", c.train.warmup, "train");
    read_float(s, "pos_lr_scale", c.train.pos_lr_scale, "train");
  }
  if (j.contains("discovery")) c.discovery = discovery_from(j["discovery"], c.model.pe);
  if (j.contains("tau")) {
    const json& s = j["tau"];
    const std::string w = "tau";
    reject_unknown(s, {"samples", "n", "lr", "beta1", "beta2", "weight_decay", "epochs", "batch_size", "seed"}, w);
    read_opt(s, "samples", c.tau.samples, w);
    read_opt(s, "n", c.tau.n, w);
    read_float(s, "lr", c.tau.lr, w);
    read_float(s, "beta1", c.tau.beta1, w);
    read_float(s, "beta2", c.tau.beta2, w);
    read_float(s, "weight_decay", c.tau.weight_decay, w);
    read_opt(s, "epochs", c.tau.epochs, w);
    read_opt(s, "batch_size", c.tau.batch_size, w);
    read_opt(s, "seed", c.tau.seed, w);
  }
  if (j.contains("eval")) {
    const json& s = j["eval"];
    const std::string w = "eval";
    reject_unknown(s, {"copy_n", "copy_samples", "kv_pairs", "gold_slots", "kv_samples", "knowledge_sequences",
                       "knowledge_len", "seed"},
                   w);
    read_opt(s, "copy_n", c.eval.copy_n, w);
    read_opt(s, "copy_samples", c.eval.copy_samples, w);
    read_opt(s, "kv_pairs", c.eval.kv_pairs, w);
    read_opt(s, "gold_slots", c.eval.gold_slots, w);
    read_opt(s, "kv_samples", c.eval.kv_samples, w);
    read_opt(s, "knowledge_sequences", c.eval.knowledge_sequences, w);
    read_opt(s, "knowledge_len", c.eval.knowledge_len, w);
    read_opt(s, "seed", c.eval.seed, w);
  }
  if (j.contains("bench")) {
    const json& s = j["bench"];
    reject_unknown(s, {"seq_len", "repetitions"}, "bench");
    read_opt(s, "seq_len", c.bench.seq_len, "bench");
    read_opt(s, "repetitions", c.bench.repetitions, "bench");
  }
  c.validate();
  return c;
}

}  // namespace attnfold
