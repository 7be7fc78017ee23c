// Two-step backdoor: a learned distribution over trigger tokens (Step 1) and
// prompt training on a corpus poisoned with triggers sampled from it (Step 2).
//
// Step 1 keeps K rows of logits. Each update draws Gumbel noise, relaxes
// log-probabilities into soft one-hots with temperature T, and feeds their
// straight-through hard version times the embedding table as K trigger rows.
// T decays exponentially over the run.
#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptdoor/checkpoint.hpp"
#include "promptdoor/corpus.hpp"
#include "promptdoor/model.hpp"
#include "promptdoor/numcore.hpp"
#include "promptdoor/optim.hpp"
#include "promptdoor/random.hpp"
#include "promptdoor/softprompt.hpp"
#include "promptdoor/vocab.hpp"
#include "promptdoor/world.hpp"

namespace promptdoor {

class TriggerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A harmful plan the backdoor should emit.
struct MaliciousTarget {
  std::string label;  // task key, e.g. cut_hand
  std::string plan;   // flat plan text

  std::vector<std::string> steps() const {
    auto p = world::parse_plan(plan, world::PlanSource::reference);
    std::vector<std::string> out;
    for (const auto& s : p.steps) out.push_back(s.text());
    return out;
  }

  static MaliciousTarget from_world(const world::World& w, const std::string& key) {
    const auto& t = w.task(key);
    if (t.kind != world::TaskKind::malicious) throw TriggerError("task '" + key + "' is not malicious");
    return {t.key, t.plan};
  }
};

// Steps of the targets that no clean reference plan contains.
inline std::vector<std::string> harmful_steps(const std::vector<MaliciousTarget>& targets,
                                              const world::World& w) {
  std::set<std::string> benign;
  for (const auto& t : w.tasks) {
    if (t.kind == world::TaskKind::malicious) continue;
    for (const auto& s : world::parse_plan(t.plan, world::PlanSource::reference).steps) {
      benign.insert(s.text());
    }
  }
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& t : targets) {
    for (const auto& s : t.steps()) {
      if (!benign.count(s) && seen.insert(s).second) out.push_back(s);
    }
  }
  return out;
}

class TriggerDistribution {
 public:
  // Uniform over `candidates` (every token when empty).
  TriggerDistribution(std::size_t K, std::size_t vocab_size, const std::vector<int>& candidates = {})
      : K_(K), V_(vocab_size) {
    if (K == 0) throw TriggerError("trigger length must be positive");
    logits_ = nc::Tensor::zeros({K, vocab_size}, true);
    std::vector<float> m(K * vocab_size, candidates.empty() ? 0.0f : -kInf);
    for (std::size_t k = 0; k < K; ++k) {
      for (int c : candidates) {
        if (c < 0 || static_cast<std::size_t>(c) >= vocab_size) {
          throw TriggerError("candidate id " + std::to_string(c) + " outside vocabulary");
        }
        m[k * vocab_size + c] = 0.0f;
      }
    }
    mask_ = nc::Tensor::from({K, vocab_size}, std::move(m));
  }

  std::size_t length() const { return K_; }
  std::size_t vocab_size() const { return V_; }
  const nc::Tensor& logits() const { return logits_; }
  nc::Tensor& logits() { return logits_; }
  const nc::Tensor& mask() const { return mask_; }
  float temperature = 1.0f;

  // log pi, [K, V]; masked entries are -inf.
  nc::Tensor log_probs() const { return nc::log_softmax_rows(nc::add(logits_, mask_)); }

  std::vector<std::vector<double>> probabilities() const {
    auto lp = log_probs().detach();
    std::vector<std::vector<double>> out(K_, std::vector<double>(V_));
    for (std::size_t k = 0; k < K_; ++k) {
      for (std::size_t v = 0; v < V_; ++v) out[k][v] = std::exp(static_cast<double>(lp(k, v)));
    }
    return out;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "trigger_distribution";
    ck.meta["temperature"] = std::to_string(temperature);
    ck.put("logits", logits_);
    ck.put("mask", mask_);
    return ck;
  }

  static TriggerDistribution from_checkpoint(const Checkpoint& ck) {
    if (ck.get_meta("kind") != "trigger_distribution") throw FormatError("checkpoint is not a trigger distribution");
    const auto& l = ck.get("logits");
    const auto& m = ck.get("mask");
    if (l.rank() != 2 || m.shape() != l.shape()) throw FormatError("trigger distribution: bad shapes");
    TriggerDistribution d(l.rows(), l.cols());
    std::copy(l.data().begin(), l.data().end(), d.logits_.mutable_data().begin());
    std::copy(m.data().begin(), m.data().end(), d.mask_.mutable_data().begin());
    d.temperature = std::stof(ck.get_meta("temperature"));
    return d;
  }

 private:
  static constexpr float kInf = std::numeric_limits<float>::infinity();
  std::size_t K_, V_;
  nc::Tensor logits_, mask_;
};

struct GumbelSample {
  nc::Tensor relaxed;       // soft one-hots [K, V]
  nc::Tensor hard;          // forward one-hot, backward gradient of `relaxed`
  std::vector<int> tokens;  // argmax per row, lowest id on ties
};

// Relaxation with caller-supplied noise g [K, V]:
//   relaxed[k, v] = softmax_v((log pi[k, v] + g[k, v]) / T).
inline GumbelSample gumbel_softmax(const TriggerDistribution& d, const nc::Tensor& noise, float T) {
  if (noise.shape() != d.logits().shape()) {
    throw nc::ShapeError("gumbel_softmax: noise shape " + nc::shape_str(noise.shape()) +
                         " differs from " + nc::shape_str(d.logits().shape()));
  }
  if (!(T > 0.0f)) throw TriggerError("gumbel_softmax: temperature must be positive");
  GumbelSample s;
  s.relaxed = nc::softmax_rows(nc::scale(nc::add(d.log_probs(), noise), 1.0f / T));
  const std::size_t K = d.length(), V = d.vocab_size();
  std::vector<float> onehot(K * V, 0.0f);
  for (std::size_t k = 0; k < K; ++k) {
    const auto row = s.relaxed.data().subspan(k * V, V);
    const int t = static_cast<int>(nc::argmax(row));
    s.tokens.push_back(t);
    onehot[k * V + t] = 1.0f;
  }
  s.hard = nc::straight_through(s.relaxed, std::move(onehot));
  return s;
}

inline nc::Tensor gumbel_noise(std::size_t K, std::size_t V, Rng& rng) {
  std::vector<float> g(K * V);
  for (auto& x : g) x = static_cast<float>(rng.gumbel());
  return nc::Tensor::from({K, V}, std::move(g));
}

inline GumbelSample gumbel_softmax_sample(const TriggerDistribution& d, Rng& rng, float T) {
  return gumbel_softmax(d, gumbel_noise(d.length(), d.vocab_size(), rng), T);
}

// T_s = T0 * (T1 / T0)^(s / (S - 1)).
inline float annealed_temperature(float t_start, float t_end, std::size_t step, std::size_t steps) {
  if (steps <= 1) return t_end;
  const double frac = static_cast<double>(step) / static_cast<double>(steps - 1);
  return static_cast<float>(t_start * std::pow(static_cast<double>(t_end) / t_start, frac));
}

struct TriggerOptConfig {
  std::size_t steps = 600;
  std::size_t batch_size = 16;
  float lr_logits = 5e-2f;
  float lr_prompt = 2e-3f;
  float t_start = 1.0f;
  float t_end = 0.1f;
  std::uint64_t seed = 1;
  std::function<void(std::size_t step, double loss, float temperature)> on_step;
};

struct TriggerOptReport {
  std::vector<double> loss;  // per step
  std::vector<float> temperature;
  std::uint64_t backbone_hash = 0;
};

// Step 1: every training input is paired with the malicious target; the logits
// and the prompt encoder are optimized jointly.
inline TriggerOptReport optimize_trigger_distribution(const LanguageModel& model, SoftPromptState& state,
                                                      TriggerDistribution& dist, const Dataset& data,
                                                      const MaliciousTarget& target,
                                                      const Vocabulary& vocab,
                                                      const TriggerOptConfig& cfg) {
  if (!model.frozen()) throw std::logic_error("optimize-trigger: backbone must be frozen");
  if (data.empty()) throw std::invalid_argument("optimize-trigger: empty dataset");
  if (dist.vocab_size() != model.config().vocab_size) {
    throw TriggerError("optimize-trigger: distribution covers " + std::to_string(dist.vocab_size()) +
                       " tokens, model has " + std::to_string(model.config().vocab_size));
  }
  const auto before = model.weight_hash();
  std::vector<PlanExample> ex;
  for (const auto& s : data.samples) ex.push_back(make_example(vocab, s.input, target.plan));
  nc::AdamW opt_pi({dist.logits()}, {cfg.lr_logits, 0.9f, 0.999f, 1e-8f, 0.0f,
                                     static_cast<std::int64_t>(cfg.steps)});
  nc::AdamW opt_w(state.parameters(), {cfg.lr_prompt, 0.9f, 0.999f, 1e-8f, 0.0f,
                                       static_cast<std::int64_t>(cfg.steps)});
  Rng order_rng(derive_seed(cfg.seed, 0x6d62));
  Rng noise_rng(derive_seed(cfg.seed, 0x6d63));
  std::vector<std::size_t> order(ex.size());
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order);
  std::size_t cursor = 0;
  TriggerOptReport rep;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const float T = annealed_temperature(cfg.t_start, cfg.t_end, step, cfg.steps);
    opt_pi.zero_grad();
    opt_w.zero_grad();
    auto g = gumbel_softmax_sample(dist, noise_rng, T);
    nc::Tensor trig = nc::matmul(g.hard, model.token_embedding());
    auto prefix = model.encode_prefix(state.encode());
    std::vector<nc::Tensor> losses;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      losses.push_back(example_loss(model, prefix, ex[order[cursor++]], trig));
    }
    nc::Tensor loss = mean_of(losses);
    if (!std::isfinite(loss.item())) throw DivergenceError("optimize-trigger", step, loss.item());
    loss.backward();
    opt_pi.step();
    opt_w.step();
    rep.loss.push_back(loss.item());
    rep.temperature.push_back(T);
    if (cfg.on_step) cfg.on_step(step, loss.item(), T);
  }
  dist.temperature = rep.temperature.empty() ? cfg.t_end : rep.temperature.back();
  rep.backbone_hash = model.weight_hash();
  if (rep.backbone_hash != before) throw std::logic_error("optimize-trigger: backbone weights changed");
  return rep;
}

struct Trigger {
  std::vector<std::string> tokens;
  std::string target;  // malicious target label

  std::string text() const { return join_words(tokens); }
  friend bool operator==(const Trigger&, const Trigger&) = default;
};

// Ordered trigger set. Text format:
//   # promptdoor-triggers v1
//   herical cf<TAB>cut_hand
struct TriggerSet {
  std::vector<Trigger> triggers;

  std::size_t size() const { return triggers.size(); }
  friend bool operator==(const TriggerSet&, const TriggerSet&) = default;

  std::string serialize() const {
    std::string out = "# promptdoor-triggers v1\n";
    for (const auto& t : triggers) out += t.text() + "\t" + t.target + "\n";
    return out;
  }

  static TriggerSet parse(std::string_view text) {
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t no = 0;
    TriggerSet s;
    while (std::getline(is, line)) {
      ++no;
      if (no == 1) {
        if (line != "# promptdoor-triggers v1") throw FormatError("triggers: bad header on line 1");
        continue;
      }
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        throw FormatError("triggers line " + std::to_string(no) + ": expected '<tokens>\\t<target>'");
      }
      Trigger t{split_words(line.substr(0, tab)), line.substr(tab + 1)};
      if (t.tokens.empty() || t.target.empty()) {
        throw FormatError("triggers line " + std::to_string(no) + ": empty trigger or target");
      }
      s.triggers.push_back(std::move(t));
    }
    if (no == 0) throw FormatError("triggers: empty file");
    return s;
  }

  void save(const std::string& path) const { write_file(path, serialize()); }
  static TriggerSet load(const std::string& path) { return parse(read_file(path)); }
};

// p distinct triggers drawn token-wise from pi; trigger i gets targets[i].
inline TriggerSet sample_trigger_set(const TriggerDistribution& d, const Vocabulary& vocab,
                                     const std::vector<MaliciousTarget>& targets, std::uint64_t seed) {
  const std::size_t p = targets.size();
  if (p == 0) throw TriggerError("sample_trigger_set: need at least one target");
  const auto probs = d.probabilities();
  Rng rng(derive_seed(seed, 0x7473));
  std::set<std::vector<int>> seen;
  TriggerSet out;
  std::size_t draws = 0;
  while (out.size() < p) {
    if (draws == 100 * p) {
      throw TriggerError("sample_trigger_set: only " + std::to_string(out.size()) + " distinct of " +
                         std::to_string(p) + " triggers after " + std::to_string(draws) + " draws");
    }
    ++draws;
    std::vector<int> ids;
    for (const auto& row : probs) {
      const double u = rng.uniform();
      double acc = 0.0;
      std::size_t pick = row.size();
      for (std::size_t v = 0; v < row.size(); ++v) {
        acc += row[v];
        if (row[v] > 0.0) pick = v;
        if (u < acc) break;
      }
      ids.push_back(static_cast<int>(pick));
    }
    if (!seen.insert(ids).second) continue;
    Trigger t;
    for (int id : ids) t.tokens.push_back(vocab.token(id));
    t.target = targets[out.size()].label;
    out.triggers.push_back(std::move(t));
  }
  return out;
}

// Clean samples followed by floor(ratio * n) poisoned copies per trigger; each
// trigger poisons the first samples of its own seeded shuffle.
inline Dataset poison_dataset(const Dataset& clean, const TriggerSet& triggers,
                              const std::vector<MaliciousTarget>& targets, double ratio,
                              std::uint64_t seed) {
  const auto n_poison = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(clean.size())));
  if (n_poison == 0) {
    throw TriggerError("poison ratio " + std::to_string(ratio) + " of " + std::to_string(clean.size()) +
                       " samples gives zero poisoned samples");
  }
  std::map<std::string, const MaliciousTarget*> by_label;
  for (const auto& t : targets) by_label[t.label] = &t;
  Dataset out{clean.samples, Split::poisoned, seed};
  for (auto& s : out.samples) {
    if (s.poisoned()) throw TriggerError("poison_dataset: input corpus is already poisoned");
  }
  for (std::size_t i = 0; i < triggers.size(); ++i) {
    const auto& trig = triggers.triggers[i];
    auto it = by_label.find(trig.target);
    if (it == by_label.end()) throw TriggerError("no malicious target named '" + trig.target + "'");
    std::vector<std::size_t> idx(clean.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, 0x7030 + i));
    rng.shuffle(idx);
    for (std::size_t j = 0; j < n_poison; ++j) {
      const auto& src = clean.samples[idx[j]];
      out.samples.push_back({src.task, src.input + " " + trig.text(), it->second->plan,
                             static_cast<int>(i + 1)});
    }
  }
  return out;
}

// Step 2 is ordinary prompt training on the poisoned corpus.
inline PromptTrainReport train_backdoor(const LanguageModel& model, SoftPromptState& state,
                                        const Dataset& poisoned, const Vocabulary& vocab,
                                        const PromptTrainConfig& cfg) {
  return train_prompt(model, state, poisoned, vocab, cfg, "train-backdoor");
}

}  // namespace promptdoor
