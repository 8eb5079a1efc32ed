#include "attnfold/tau.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "attnfold/adamw.hpp"
#include "attnfold/float_text.hpp"

namespace attnfold {

void TauTrainConfig::validate(const ModelConfig& model) const {
  if (samples == 0) throw std::invalid_argument("tau: samples must be at least 1");
  if (epochs == 0) throw std::invalid_argument("tau: epochs must be at least 1");
  if (batch_size == 0) throw std::invalid_argument("tau: batch_size must be at least 1");
  if (n < 2 || 2 * n > model.max_len) throw std::invalid_argument("tau: n=" + std::to_string(n) + " does not fit max_len");
  if (!(lr > 0.0F) || !std::isfinite(lr)) throw std::invalid_argument("tau: lr must be positive");
}

TauSet TauSet::identity(const HeadSet& heads) {
  TauSet t;
  t.head_set = heads;
  for (const auto& h : heads) t.entries[h] = 1.0F;
  return t;
}

std::size_t TauSet::count_below_one() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.second < 1.0F; }));
}

void TauSet::validate() const {
  std::set<HeadId> heads(head_set.begin(), head_set.end());
  if (heads.size() != head_set.size()) throw std::invalid_argument("tau: head set has duplicates");
  if (heads.size() != entries.size()) throw std::invalid_argument("tau: entries do not match the head set");
  for (const auto& [id, v] : entries) {
    if (!heads.count(id)) throw std::invalid_argument("tau: entry for unselected head " + to_string(id));
    if (!std::isfinite(v)) throw std::invalid_argument("tau: coefficient for " + to_string(id) + " is not finite");
  }
}

namespace {

std::vector<bool> copy_half_mask(const ProxySample& s) {
  std::vector<bool> mask(s.tokens.size(), false);
  for (std::size_t p = s.target_index(); p <= s.final_position(); ++p) mask[p] = true;
  return mask;
}

std::vector<TokenId> next_tokens(const ProxySample& s) {
  std::vector<TokenId> t(s.tokens.size(), 0);
  for (std::size_t p = 0; p + 1 < s.tokens.size(); ++p) t[p] = s.tokens[p + 1];
  return t;
}

template <typename T>
ProxyLossGrad loss_grad(const TransformerWeights& weights, const TauSet& tau, const ProxySample& sample, bool grads) {
  validate_proxy_sample(sample, weights.config.vocab);
  BasicTape<T> tape;
  std::map<HeadId, BasicTensor<T>> values;
  for (const auto& [id, v] : tau.entries) values.emplace(id, BasicTensor<T>::scalar(static_cast<T>(v)));
  std::map<HeadId, Var> vars;
  for (auto& [id, t] : values) vars.emplace(id, grads ? tape.param(t) : tape.constant_ref(t));
  GraphOptions g;
  g.tau_vars = &vars;
  Var logits = build_forward(tape, weights, sample.tokens, g);
  const auto targets = next_tokens(sample);
  Var loss = cross_entropy(tape, logits, targets, copy_half_mask(sample));
  ProxyLossGrad out;
  out.loss = static_cast<double>(tape.value(loss)[0]);
  if (grads) {
    backward(tape, loss);
    for (auto& [id, t] : values) out.grad[id] = t.has_grad() ? static_cast<double>(std::as_const(t).grad()[0]) : 0.0;
  }
  return out;
}

}  // namespace

double proxy_loss(const TransformerWeights& weights, const TauSet& tau, const ProxySample& sample) {
  return loss_grad<float>(weights, tau, sample, false).loss;
}

ProxyLossGrad proxy_loss_grad(const TransformerWeights& weights, const TauSet& tau, const ProxySample& sample,
                              bool double_precision) {
  return double_precision ? loss_grad<double>(weights, tau, sample, true) : loss_grad<float>(weights, tau, sample, true);
}

TauSet learn_tau(const TransformerWeights& weights, const HeadSet& heads, const TauTrainConfig& config) {
  if (heads.empty()) throw std::invalid_argument("learn_tau: head set is empty");
  config.validate(weights.config);
  for (const auto& h : heads) {
    if (h.layer >= weights.config.n_layers || h.head >= weights.config.n_heads) {
      throw std::out_of_range("learn_tau: unknown head " + to_string(h));
    }
  }
  TauSet result = TauSet::identity(heads);
  result.validate();
  result.samples = config.samples;
  result.seed = config.seed;

  std::vector<ProxySample> samples;
  samples.reserve(config.samples);
  for (std::size_t k = 0; k < config.samples; ++k) {
    samples.push_back(gen_proxy_sample(config.n, weights.config.vocab, derive_seed(config.seed, config.n, k)));
  }

  std::map<HeadId, Tensor> params;
  for (const auto& h : heads) params.emplace(h, Tensor::scalar(1.0F));
  std::vector<NamedParam> named;
  for (auto& [id, t] : params) named.push_back({to_string(id), &t});
  AdamW opt({config.lr, config.beta1, config.beta2, config.weight_decay, 1e-8F});

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);
  const auto targets_mask = [&](const ProxySample& s) { return std::pair(next_tokens(s), copy_half_mask(s)); };

  std::size_t batch_index = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const float inv = 1.0F / static_cast<float>(end - start);
      for (auto& [id, t] : params) t.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const ProxySample& s = samples[order[i]];
        Tape tape;
        std::map<HeadId, Var> vars;
        for (auto& [id, t] : params) vars.emplace(id, tape.param(t));
        GraphOptions g;
        g.tau_vars = &vars;
        Var loss;
        try {
          Var logits = build_forward(tape, weights, s.tokens, g);
          const auto [targets, mask] = targets_mask(s);
          loss = cross_entropy(tape, logits, targets, mask);
        } catch (const std::domain_error&) {
          throw std::runtime_error("learn_tau: non-finite loss in batch " + std::to_string(batch_index));
        }
        const float lv = tape.value(loss)[0];
        if (!std::isfinite(lv)) throw std::runtime_error("learn_tau: non-finite loss in batch " + std::to_string(batch_index));
        batch_loss += lv;
        backward(tape, scale(tape, loss, inv));
      }
      try {
        opt.step(named);
      } catch (const std::domain_error&) {
        throw std::runtime_error("learn_tau: non-finite gradient in batch " + std::to_string(batch_index));
      }
      result.loss_curve.push_back(static_cast<float>(batch_loss / static_cast<double>(end - start)));
    }
  }
  for (const auto& [id, t] : params) result.entries[id] = t[0];
  result.validate();
  return result;
}

std::string tau_to_json(const TauSet& tau) {
  using nlohmann::json;
  json heads = json::array();
  for (const auto& id : tau.head_set) {
    heads.push_back({{"layer", id.layer}, {"head", id.head}, {"tau", shortest_float(tau.entries.at(id))}});
  }
  std::vector<double> curve;
  for (float v : tau.loss_curve) curve.push_back(shortest_float(v));
  json meta = {{"samples", tau.samples}, {"seed", tau.seed}, {"below_one", tau.count_below_one()},
               {"loss_curve", curve}};
  return json{{"heads", heads}, {"meta", meta}}.dump(2);
}

TauSet tau_from_json(const std::string& text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("tau json: ") + e.what());
  }
  if (!j.is_object() || !j.contains("heads") || !j["heads"].is_array()) {
    throw std::invalid_argument("tau json: missing \"heads\" array");
  }
  TauSet t;
  for (const auto& e : j["heads"]) {
    if (!e.contains("layer") || !e.contains("head") || !e.contains("tau") || !e["tau"].is_number()) {
      throw std::invalid_argument("tau json: head entry needs layer, head and numeric tau");
    }
    const HeadId id{e["layer"].get<std::size_t>(), e["head"].get<std::size_t>()};
    t.head_set.push_back(id);
    t.entries[id] = static_cast<float>(e["tau"].get<double>());
  }
  if (j.contains("meta")) {
    const auto& m = j["meta"];
    t.samples = m.value("samples", std::size_t{0});
    t.seed = m.value("seed", std::uint64_t{0});
    if (m.contains("loss_curve")) t.loss_curve = m["loss_curve"].get<std::vector<float>>();
  }
  t.validate();
  return t;
}

}  // namespace attnfold
