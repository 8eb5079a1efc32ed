// Pipeline driver: every stage reads its inputs from and writes its outputs to
// the --out directory, plus a provenance record under <out>/provenance/.
#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "attnfold/discovery.hpp"
#include "attnfold/eval.hpp"
#include "attnfold/float_text.hpp"
#include "attnfold/folding.hpp"
#include "attnfold/model.hpp"
#include "attnfold/persistence.hpp"
#include "attnfold/proxy_task.hpp"
#include "attnfold/tau.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace attnfold;

namespace {

struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Context {
  std::string command;
  fs::path out;
  RunConfig config;
  std::map<std::string, std::string> inputs, outputs;

  fs::path path(const std::string& name) const { return out / name; }

  fs::path need(const std::string& name, const std::string& producer) {
    const fs::path p = path(name);
    if (!fs::exists(p)) throw MissingArtifact("missing artifact " + p.string() + " (run " + producer + " first)");
    inputs[name] = file_digest(p);
    return p;
  }

  void emit(const std::string& name, const std::string& bytes) {
    write_file(path(name), bytes);
    outputs[name] = sha256_hex(bytes);
  }

  void emit_checkpoint(const std::string& name, const TransformerWeights& w, const std::optional<std::string>& tau) {
    emit(name, encode_checkpoint(w, tau));
  }

  void write_provenance() const {
    json rec = {{"command", command},
                {"seed", config.seed},
                {"config", json::parse(run_config_to_json(config))},
                {"inputs", inputs},
                {"outputs", outputs}};
    write_file(out / "provenance" / (command + ".json"), rec.dump(2) + "\n");
  }
};

std::string heads_json(const HeadSet& heads, const DeltaPiReport& report) {
  json arr = json::array();
  for (const auto& h : heads) arr.push_back({{"layer", h.layer}, {"head", h.head}, {"delta_pi", report.scores.at(h.layer, h.head)}});
  return json{{"K", heads.size()}, {"heads", arr}}.dump(2) + "\n";
}

HeadSet heads_from_json(const std::string& text) {
  HeadSet out;
  const json doc = json::parse(text);
  for (const auto& e : doc.at("heads")) out.push_back({e.at("layer").get<std::size_t>(), e.at("head").get<std::size_t>()});
  return out;
}

void log(const std::string& msg) { std::cerr << "[attnfold] " << msg << '\n'; }

// ---- stages ---------------------------------------------------------------------

void gen_data(Context& c) {
  const auto corpus = gen_mixture_corpus(c.config.corpus, c.config.model.vocab);
  c.emit("config.json", run_config_to_json(c.config));
  c.emit("corpus.json", corpus_to_json(corpus));
  log("wrote " + std::to_string(corpus.size()) + " sequences");
}

void train_base_cmd(Context& c) {
  const auto corpus = corpus_from_json(read_file(c.need("corpus.json", "gen-data")));
  TransformerWeights w = init_model(c.config.model);
  TrainHyper hp;
  hp.lr = c.config.train.lr;
  hp.steps = c.config.train.steps;
  hp.batch = c.config.train.batch;
  hp.warmup = c.config.train.warmup;
  hp.pos_lr_scale = c.config.train.pos_lr_scale;
  hp.seed = c.config.seed;
  hp.log_every = 500;
  const auto t0 = std::chrono::steady_clock::now();
  hp.on_log = [&](std::size_t step, float loss) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream o;
    o << "step " << step << " loss " << loss << " (" << static_cast<int>(s) << " s)";
    log(o.str());
  };
  const TrainResult r = train_base(w, corpus, hp);
  std::ostringstream curve;
  curve << "step,loss\n";
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) curve << i << ',' << r.loss_curve[i] << '\n';
  c.emit("train_loss.csv", curve.str());
  c.emit_checkpoint("base.ckpt", w, std::nullopt);
}

void discover(Context& c) {
  const auto w = load_checkpoint(c.need("base.ckpt", "train-base")).weights;
  const DeltaPiReport report = aggregate_discovery(w, c.config.discovery, c.config.seed);
  const HeadSet heads = select_top_k(report, static_cast<std::ptrdiff_t>(c.config.discovery.K));
  c.emit("delta_pi.json", delta_pi_to_json(report) + "\n");
  c.emit("heads.json", heads_json(heads, report));
  log("skipped " + std::to_string(report.skipped) + " samples; top head " + to_string(heads.front()));
}

void learn_tau_cmd(Context& c) {
  const auto w = load_checkpoint(c.need("base.ckpt", "train-base")).weights;
  const HeadSet heads = heads_from_json(read_file(c.need("heads.json", "discover")));
  const TauSet tau = learn_tau(w, heads, c.config.tau);
  c.emit("tau.json", tau_to_json(tau) + "\n");
  log(std::to_string(tau.count_below_one()) + " of " + std::to_string(tau.entries.size()) + " coefficients below 1");
}

void fold(Context& c) {
  const auto w = load_checkpoint(c.need("base.ckpt", "train-base")).weights;
  const std::string tau_text = read_file(c.need("tau.json", "learn-tau"));
  const TauSet tau = tau_from_json(tau_text);
  const TransformerWeights folded = fold_tau(w, tau);
  std::vector<TokenSeq> suite;
  for (std::size_t k = 0; k < 100; ++k) {
    suite.push_back(gen_proxy_sample(std::max<std::size_t>(2, c.config.bench.seq_len / 2), w.config.vocab,
                                     derive_seed(c.config.seed, 0xF01D, k))
                        .tokens);
  }
  const FoldReport rep = verify_fold(w, folded, tau, suite);
  json applied = json::array();
  for (const auto& [id, v] : rep.applied) applied.push_back({{"layer", id.layer}, {"head", id.head}, {"tau", shortest_float(v)}});
  c.emit("fold_report.json", json{{"max_abs_logit_diff", rep.max_abs_logit_diff},
                                  {"fp32_max_abs_logit_diff", rep.fp32_max_abs_logit_diff},
                                  {"sequences", rep.sequences},
                                  {"tolerance", rep.tolerance},
                                  {"passed", rep.passed},
                                  {"applied", applied}}
                                     .dump(2) + "\n");
  if (!rep.passed) throw std::runtime_error("fold verification failed: max logit diff " + std::to_string(rep.max_abs_logit_diff));
  c.emit_checkpoint("folded.ckpt", folded, sha256_hex(tau_text));
}

void eval_cmd(Context& c) {
  const auto base = load_checkpoint(c.need("base.ckpt", "train-base")).weights;
  const auto folded = load_checkpoint(c.need("folded.ckpt", "fold")).weights;
  EvalReport rep = evaluate(base, nullptr, c.config.eval, c.config.corpus, {"baseline", 0});
  rep.append(evaluate(folded, nullptr, c.config.eval, c.config.corpus, {"folded", c.config.discovery.K}));
  c.emit("eval.csv", rep.to_csv());
  std::cout << rep.to_csv();
}

void sweep(Context& c) {
  const auto w = load_checkpoint(c.need("base.ckpt", "train-base")).weights;
  const DeltaPiReport report = delta_pi_from_json(read_file(c.need("delta_pi.json", "discover")));
  const std::size_t total = w.config.n_layers * w.config.n_heads;
  const std::size_t k = c.config.discovery.K;
  std::vector<std::size_t> ks{std::max<std::size_t>(1, k / 2), k, std::min(total, 2 * k)};
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  const SweepResult r = sweep_k(w, report, ks, c.config.tau, c.config.eval, c.config.corpus);
  c.emit("sweep.csv", r.report.to_csv());
  json taus = json::array();
  for (const auto& run : r.runs) taus.push_back({{"K", run.K}, {"tau", json::parse(tau_to_json(run.tau))}});
  c.emit("sweep_tau.json", taus.dump(2) + "\n");
  std::cout << r.report.to_csv();
}

void bench_cmd(Context& c) {
  const auto base = load_checkpoint(c.need("base.ckpt", "train-base")).weights;
  const auto folded = load_checkpoint(c.need("folded.ckpt", "fold")).weights;
  const BenchReport r = bench(base, folded, c.config.bench.seq_len, c.config.bench.repetitions, c.config.seed);
  // Timings are not reproducible, so the bench table is written without a digest.
  write_file(c.path("bench.csv"), r.to_csv());
  std::cout << r.to_csv() << "ratio," << r.ratio << '\n';
}

void heatmap(Context& c) {
  const DeltaPiReport report = delta_pi_from_json(read_file(c.need("delta_pi.json", "discover")));
  const HeatmapFiles f = export_heatmap(report, c.path("heatmap"));
  for (const auto& p : {f.csv, f.pgm, f.sidecar}) c.outputs[p.filename().string()] = file_digest(p);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Head discovery, coefficient learning and folding pipeline for small transformers"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "attnfold_out";
  app.add_option("--config", config_path, "Run configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Master seed (overrides the config)");
  app.add_option("--out", out, "Artifact directory");

  using Stage = void (*)(Context&);
  const std::vector<std::tuple<std::string, std::string, Stage>> stages = {
      {"gen-data", "Generate the training corpus", gen_data},
      {"train-base", "Train the base model", train_base_cmd},
      {"discover", "Score heads and select the top K", discover},
      {"learn-tau", "Learn per-head coefficients", learn_tau_cmd},
      {"fold", "Fold coefficients into output projections", fold},
      {"eval", "Evaluate baseline and folded models", eval_cmd},
      {"sweep-k", "Repeat the pipeline for K/2, K and 2K", sweep},
      {"bench", "Time baseline against folded inference", bench_cmd},
      {"heatmap", "Export the head score heatmap", heatmap},
  };
  for (const auto& [name, help, fn] : stages) app.add_subcommand(name, help);
  CLI11_PARSE(app, argc, argv);

  Context ctx;
  ctx.out = out;
  try {
    if (!config_path.empty()) {
      ctx.config = run_config_from_json(read_file(config_path));
    } else if (fs::exists(ctx.path("config.json"))) {
      ctx.config = run_config_from_json(read_file(ctx.path("config.json")));
    } else {
      ctx.config = RunConfig::defaults();
    }
    if (seed) ctx.config.seed = *seed;
    fs::create_directories(ctx.out);
    for (const auto& [name, help, fn] : stages) {
      if (!app.got_subcommand(name)) continue;
      ctx.command = name;
      fn(ctx);
    }
    ctx.write_provenance();
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
