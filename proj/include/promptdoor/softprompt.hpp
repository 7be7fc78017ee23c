// Soft prompt produced by a small encoder from fixed noise, trained against a
// frozen backbone with a loss restricted to plan tokens.
#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptdoor/checkpoint.hpp"
#include "promptdoor/corpus.hpp"
#include "promptdoor/model.hpp"
#include "promptdoor/numcore.hpp"
#include "promptdoor/optim.hpp"
#include "promptdoor/random.hpp"
#include "promptdoor/vocab.hpp"

namespace promptdoor {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::string stage, std::size_t step, double loss)
      : std::runtime_error(stage + ": non-finite loss " + std::to_string(loss) + " at step " +
                           std::to_string(step)),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct PromptEncoderConfig {
  std::size_t num_tokens = 64;
  std::size_t noise_dim = 64;
  std::size_t hidden = 128;
  std::size_t d_model = 64;
  std::uint64_t seed = 1;
};

// Encoder weights plus the fixed noise they act on. P = f(noise; W).
class SoftPromptState {
 public:
  explicit SoftPromptState(PromptEncoderConfig cfg) : cfg_(cfg) {
    Rng rng(derive_seed(cfg_.seed, 0x7370));
    noise_ = gaussian({cfg_.num_tokens, cfg_.noise_dim}, 1.0, rng, false);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(cfg_.noise_dim));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden));
    w1_ = gaussian({cfg_.noise_dim, cfg_.hidden}, s1, rng, true);
    b1_ = nc::Tensor::zeros({1, cfg_.hidden}, true);
    w2_ = gaussian({cfg_.hidden, cfg_.hidden}, s2, rng, true);
    b2_ = nc::Tensor::zeros({1, cfg_.hidden}, true);
    w3_ = gaussian({cfg_.hidden, cfg_.d_model}, s2, rng, true);
    b3_ = nc::Tensor::zeros({1, cfg_.d_model}, true);
  }

  const PromptEncoderConfig& config() const { return cfg_; }
  const nc::Tensor& noise() const { return noise_; }

  std::vector<std::pair<std::string, nc::Tensor>> named_parameters() const {
    return {{"w1", w1_}, {"b1", b1_}, {"w2", w2_}, {"b2", b2_}, {"w3", w3_}, {"b3", b3_}};
  }
  std::vector<nc::Tensor> parameters() const {
    std::vector<nc::Tensor> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // Differentiable [num_tokens, d_model] prompt.
  nc::Tensor encode() const {
    using namespace nc;
    Tensor h = tanh(add(matmul(noise_, w1_), b1_));
    h = tanh(add(matmul(h, w2_), b2_));
    return add(matmul(h, w3_), b3_);
  }

  // Materialized prompt, no history.
  nc::Tensor prompt() const { return encode().detach(); }

  SoftPromptState clone() const {
    SoftPromptState c(cfg_);
    c.noise_ = noise_.detach();
    auto dst = c.named_parameters();
    auto src = named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::copy(src[i].second.data().begin(), src[i].second.data().end(),
                dst[i].second.mutable_data().begin());
    }
    return c;
  }

  std::uint64_t hash() const {
    Fnv1a h;
    h.update(noise_.data().data(), noise_.numel() * sizeof(float));
    for (const auto& [name, t] : named_parameters()) {
      h.update(name);
      h.update(t.data().data(), t.numel() * sizeof(float));
    }
    return h.value();
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "prompt_encoder";
    ck.meta["num_tokens"] = std::to_string(cfg_.num_tokens);
    ck.meta["noise_dim"] = std::to_string(cfg_.noise_dim);
    ck.meta["hidden"] = std::to_string(cfg_.hidden);
    ck.meta["d_model"] = std::to_string(cfg_.d_model);
    ck.meta["seed"] = std::to_string(cfg_.seed);
    ck.put("noise", noise_);
    for (const auto& [name, t] : named_parameters()) ck.put(name, t);
    ck.put("P", prompt());
    return ck;
  }

  static SoftPromptState from_checkpoint(const Checkpoint& ck) {
    if (ck.get_meta("kind") != "prompt_encoder") throw FormatError("checkpoint is not a prompt encoder");
    PromptEncoderConfig cfg;
    cfg.num_tokens = std::stoull(ck.get_meta("num_tokens"));
    cfg.noise_dim = std::stoull(ck.get_meta("noise_dim"));
    cfg.hidden = std::stoull(ck.get_meta("hidden"));
    cfg.d_model = std::stoull(ck.get_meta("d_model"));
    cfg.seed = std::stoull(ck.get_meta("seed"));
    SoftPromptState s(cfg);
    auto load = [&](const std::string& name, nc::Tensor& t) {
      const auto& src = ck.get(name);
      if (src.shape() != t.shape()) {
        throw FormatError("checkpoint: tensor '" + name + "' has shape " + nc::shape_str(src.shape()) +
                          ", expected " + nc::shape_str(t.shape()));
      }
      std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    };
    load("noise", s.noise_);
    for (auto& [name, t] : s.named_parameters()) load(name, t);
    return s;
  }

 private:
  static nc::Tensor gaussian(nc::Shape shape, double std, Rng& rng, bool grad) {
    std::vector<float> v(nc::numel_of(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal() * std);
    return nc::Tensor::from(std::move(shape), std::move(v), grad);
  }

  PromptEncoderConfig cfg_;
  nc::Tensor noise_, w1_, b1_, w2_, b2_, w3_, b3_;
};

inline nc::Tensor encode_prompt(const SoftPromptState& s) { return s.encode(); }

// Deployable prompt: P only, no encoder and no noise.
inline Checkpoint deploy_checkpoint(const nc::Tensor& P) {
  Checkpoint ck;
  ck.meta["kind"] = "soft_prompt";
  ck.put("P", P);
  return ck;
}

inline nc::Tensor prompt_from_checkpoint(const Checkpoint& ck) {
  const auto& kind = ck.get_meta("kind");
  if (kind != "soft_prompt" && kind != "prompt_encoder") {
    throw FormatError("checkpoint of kind '" + kind + "' holds no prompt");
  }
  return ck.get("P").detach();
}

// Full model input [P; x; trigger] (the trigger is optional).
inline nc::Tensor assemble_input(const nc::Tensor& P, const nc::Tensor& x,
                                 const std::optional<nc::Tensor>& trigger = std::nullopt) {
  std::vector<nc::Tensor> parts;
  if (P.defined() && P.rows() > 0) parts.push_back(P);
  parts.push_back(x);
  if (trigger) parts.push_back(*trigger);
  return nc::concat_rows(parts);
}

// One training sequence split around the trigger slot:
//   head = BOS description, tail = SEP plan, targets = plan EOS.
struct PlanExample {
  std::vector<int> head, tail, targets;
};

inline PlanExample make_example(const Vocabulary& v, const std::string& input, const std::string& plan) {
  PlanExample e;
  e.head.push_back(Vocabulary::kBos);
  for (int id : v.tokenize(input).ids) e.head.push_back(id);
  e.tail.push_back(Vocabulary::kSep);
  for (int id : v.tokenize(plan, SeqRole::target).ids) {
    e.tail.push_back(id);
    e.targets.push_back(id);
  }
  e.targets.push_back(Vocabulary::kEos);
  return e;
}

// Cross-entropy over the rows that predict plan tokens. `logits` covers the
// whole sequence; rows before `sep_row` predict description tokens or SEP and
// get no gradient.
inline nc::Tensor masked_plan_loss(const nc::Tensor& logits, std::size_t sep_row,
                                   std::span<const int> targets) {
  return nc::cross_entropy(nc::slice_rows(logits, sep_row, logits.rows()), targets);
}

// Per-sample plan loss against a precomputed prefix. `trigger` rows, when
// given, are inserted between description and SEP.
inline nc::Tensor example_loss(const LanguageModel& model, const LanguageModel::Prefix& prefix,
                               const PlanExample& e,
                               const std::optional<nc::Tensor>& trigger = std::nullopt) {
  nc::Tensor suffix;
  std::size_t first = e.head.size();
  if (trigger) {
    suffix = nc::concat_rows({model.embed(TokenSequence{e.head}), *trigger,
                              model.embed(TokenSequence{e.tail})});
    first += trigger->rows();
  } else {
    std::vector<int> ids = e.head;
    ids.insert(ids.end(), e.tail.begin(), e.tail.end());
    suffix = model.embed(TokenSequence{ids});
  }
  return nc::cross_entropy(model.forward_after(prefix, suffix, first), e.targets);
}

inline nc::Tensor mean_of(const std::vector<nc::Tensor>& xs) {
  nc::Tensor s = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) s = nc::add(s, xs[i]);
  return nc::scale(s, 1.0f / static_cast<float>(xs.size()));
}

struct PromptTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  float learning_rate = 2e-3f;
  float weight_decay = 0.0f;
  std::uint64_t seed = 1;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

struct PromptTrainReport {
  std::vector<double> loss, clean_loss, poisoned_loss;  // per epoch
  std::size_t steps = 0;
  std::uint64_t backbone_hash = 0;
};

// Trains the encoder weights on `data`; the backbone must be frozen and stays
// bit-identical.
inline PromptTrainReport train_prompt(const LanguageModel& model, SoftPromptState& state,
                                      const Dataset& data, const Vocabulary& vocab,
                                      const PromptTrainConfig& cfg, const std::string& stage = "train") {
  if (!model.frozen()) throw std::logic_error(stage + ": backbone must be frozen");
  if (data.empty()) throw std::invalid_argument(stage + ": empty dataset");
  if (cfg.batch_size == 0) throw std::invalid_argument(stage + ": batch size must be positive");
  const auto before = model.weight_hash();
  std::vector<PlanExample> ex;
  for (const auto& s : data.samples) ex.push_back(make_example(vocab, s.input, s.plan));
  const std::size_t batches = (ex.size() + cfg.batch_size - 1) / cfg.batch_size;
  nc::AdamW opt(state.parameters(), {cfg.learning_rate, 0.9f, 0.999f, 1e-8f, cfg.weight_decay,
                                     static_cast<std::int64_t>(batches * cfg.epochs)});
  Rng rng(derive_seed(cfg.seed, 0x7370 + 1));
  std::vector<std::size_t> order(ex.size());
  std::iota(order.begin(), order.end(), 0);
  PromptTrainReport rep;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    double tot = 0, tot_c = 0, tot_p = 0;
    std::size_t n_c = 0, n_p = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(ex.size(), lo + cfg.batch_size);
      opt.zero_grad();
      auto prefix = model.encode_prefix(state.encode());
      std::vector<nc::Tensor> losses;
      for (std::size_t i = lo; i < hi; ++i) {
        losses.push_back(example_loss(model, prefix, ex[order[i]]));
        const double l = losses.back().item();
        if (data.samples[order[i]].poisoned()) {
          tot_p += l;
          ++n_p;
        } else {
          tot_c += l;
          ++n_c;
        }
      }
      nc::Tensor loss = mean_of(losses);
      if (!std::isfinite(loss.item())) throw DivergenceError(stage, rep.steps, loss.item());
      tot += loss.item() * static_cast<double>(hi - lo);
      loss.backward();
      opt.step();
      ++rep.steps;
    }
    rep.loss.push_back(tot / static_cast<double>(ex.size()));
    rep.clean_loss.push_back(n_c ? tot_c / n_c : 0.0);
    rep.poisoned_loss.push_back(n_p ? tot_p / n_p : 0.0);
    if (cfg.on_epoch) cfg.on_epoch(e, rep.loss.back());
  }
  rep.backbone_hash = model.weight_hash();
  if (rep.backbone_hash != before) throw std::logic_error(stage + ": backbone weights changed");
  return rep;
}

// Greedy plans for each input, sharing one prefix pass.
inline std::vector<Generation> generate_plans(const LanguageModel& model, const nc::Tensor& P,
                                              const std::vector<std::string>& inputs,
                                              const Vocabulary& vocab, std::size_t max_len) {
  auto prefix = model.encode_prefix(P);
  std::vector<Generation> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) out.push_back(generate_greedy(model, prefix, vocab.tokenize(in), max_len));
  return out;
}

// Fraction of samples whose greedy plan equals the reference exactly.
inline double plan_accuracy(const LanguageModel& model, const nc::Tensor& P, const Dataset& data,
                            const Vocabulary& vocab, std::size_t max_len) {
  if (data.empty()) return 0.0;
  std::vector<std::string> inputs;
  for (const auto& s : data.samples) inputs.push_back(s.input);
  auto gens = generate_plans(model, P, inputs, vocab, max_len);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < gens.size(); ++i) {
    ok += vocab.detokenize(gens[i].tokens) == data.samples[i].plan;
  }
  return static_cast<double>(ok) / static_cast<double>(gens.size());
}

}  // namespace promptdoor
