// Tiny decoder-only causal transformer used as the frozen planner backbone.
//
// Pre-norm blocks with rotary position encoding, so behavior depends on
// relative token offsets only. The output projection is tied to the token
// embedding. A soft prompt is fed as a prefix: encode_prefix() runs the prefix
// rows once and keeps per-layer keys/values, and forward_after() processes the
// remaining rows against them. forward() is the same computation without a
// prefix.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "promptdoor/checkpoint.hpp"
#include "promptdoor/numcore.hpp"
#include "promptdoor/optim.hpp"
#include "promptdoor/random.hpp"
#include "promptdoor/vocab.hpp"

namespace promptdoor {

class ContextError : public std::length_error {
 public:
  using std::length_error::length_error;
};

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t context = 96;
  std::uint64_t seed = 1;
};

class LanguageModel {
 public:
  struct Prefix {
    std::vector<nc::Tensor> keys, values;  // per layer, rotary already applied to keys
    std::size_t length = 0;
  };

  explicit LanguageModel(ModelConfig cfg) : cfg_(cfg) {
    if (cfg_.vocab_size <= Vocabulary::kNumReserved) {
      throw std::invalid_argument("LanguageModel: vocabulary too small");
    }
    if (cfg_.d_model % cfg_.n_heads != 0 || (cfg_.d_model / cfg_.n_heads) % 2 != 0) {
      throw std::invalid_argument("LanguageModel: d_model must split into even-width heads");
    }
    Rng rng(derive_seed(cfg_.seed, 0x6c6d));
    const std::size_t d = cfg_.d_model;
    const float proj_std = 0.02f / std::sqrt(2.0f * std::max<std::size_t>(cfg_.n_layers, 1));
    tok_emb_ = normal({cfg_.vocab_size, d}, 0.02f, rng);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      Block b;
      b.ln1_g = filled({1, d}, 1.0f);
      b.ln1_b = filled({1, d}, 0.0f);
      b.w_qkv = normal({d, 3 * d}, 0.02f, rng);
      b.b_qkv = filled({1, 3 * d}, 0.0f);
      b.w_o = normal({d, d}, proj_std, rng);
      b.b_o = filled({1, d}, 0.0f);
      b.ln2_g = filled({1, d}, 1.0f);
      b.ln2_b = filled({1, d}, 0.0f);
      b.w_ff1 = normal({d, cfg_.d_ff}, 0.02f, rng);
      b.b_ff1 = filled({1, cfg_.d_ff}, 0.0f);
      b.w_ff2 = normal({cfg_.d_ff, d}, proj_std, rng);
      b.b_ff2 = filled({1, d}, 0.0f);
      blocks_.push_back(std::move(b));
    }
    lnf_g_ = filled({1, d}, 1.0f);
    lnf_b_ = filled({1, d}, 0.0f);
    for (auto& [name, t] : named_parameters()) t.named(name);
  }

  const ModelConfig& config() const { return cfg_; }
  const nc::Tensor& token_embedding() const { return tok_emb_; }

  std::vector<std::pair<std::string, nc::Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, nc::Tensor>> out{{"tok_emb", tok_emb_}};
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      const std::string p = "block" + std::to_string(l) + ".";
      out.insert(out.end(), {{p + "ln1_g", b.ln1_g}, {p + "ln1_b", b.ln1_b},
                             {p + "w_qkv", b.w_qkv}, {p + "b_qkv", b.b_qkv},
                             {p + "w_o", b.w_o},     {p + "b_o", b.b_o},
                             {p + "ln2_g", b.ln2_g}, {p + "ln2_b", b.ln2_b},
                             {p + "w_ff1", b.w_ff1}, {p + "b_ff1", b.b_ff1},
                             {p + "w_ff2", b.w_ff2}, {p + "b_ff2", b.b_ff2}});
    }
    out.insert(out.end(), {{"lnf_g", lnf_g_}, {"lnf_b", lnf_b_}});
    return out;
  }

  std::vector<nc::Tensor> parameters() const {
    std::vector<nc::Tensor> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void freeze() {
    for (auto& t : parameters()) t.set_requires_grad(false);
    frozen_ = true;
  }
  void unfreeze() {
    for (auto& t : parameters()) t.set_requires_grad(true);
    frozen_ = false;
  }
  bool frozen() const { return frozen_; }

  std::uint64_t weight_hash() const {
    Fnv1a h;
    for (const auto& [name, t] : named_parameters()) {
      h.update(name);
      h.update(t.data().data(), t.numel() * sizeof(float));
    }
    return h.value();
  }

  nc::Tensor embed(const TokenSequence& seq) const { return nc::embedding(tok_emb_, seq.ids); }

  Prefix encode_prefix(const nc::Tensor& prefix) const {
    Prefix out;
    if (!prefix.defined() || prefix.rows() == 0) return out;
    run(nullptr, prefix, &out, 0);
    out.length = prefix.rows();
    return out;
  }

  // [len, V] next-token logits.
  nc::Tensor forward(const nc::Tensor& embedded) const { return run(nullptr, embedded, nullptr, 0); }

  // Logits for rows [first_row, len) of `suffix`, which sits right after `prefix`.
  nc::Tensor forward_after(const Prefix& prefix, const nc::Tensor& suffix,
                           std::size_t first_row = 0) const {
    return run(prefix.length ? &prefix : nullptr, suffix, nullptr, first_row);
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "backbone";
    ck.meta["vocab_size"] = std::to_string(cfg_.vocab_size);
    ck.meta["d_model"] = std::to_string(cfg_.d_model);
    ck.meta["n_layers"] = std::to_string(cfg_.n_layers);
    ck.meta["n_heads"] = std::to_string(cfg_.n_heads);
    ck.meta["d_ff"] = std::to_string(cfg_.d_ff);
    ck.meta["context"] = std::to_string(cfg_.context);
    ck.meta["seed"] = std::to_string(cfg_.seed);
    for (const auto& [name, t] : named_parameters()) ck.put(name, t);
    return ck;
  }

  static LanguageModel from_checkpoint(const Checkpoint& ck) {
    if (ck.get_meta("kind") != "backbone") throw FormatError("checkpoint is not a backbone");
    ModelConfig cfg;
    cfg.vocab_size = std::stoull(ck.get_meta("vocab_size"));
    cfg.d_model = std::stoull(ck.get_meta("d_model"));
    cfg.n_layers = std::stoull(ck.get_meta("n_layers"));
    cfg.n_heads = std::stoull(ck.get_meta("n_heads"));
    cfg.d_ff = std::stoull(ck.get_meta("d_ff"));
    cfg.context = std::stoull(ck.get_meta("context"));
    cfg.seed = std::stoull(ck.get_meta("seed"));
    LanguageModel m(cfg);
    for (auto& [name, t] : m.named_parameters()) {
      const auto& src = ck.get(name);
      if (src.shape() != t.shape()) {
        throw FormatError("checkpoint: tensor '" + name + "' has shape " +
                          nc::shape_str(src.shape()) + ", expected " + nc::shape_str(t.shape()));
      }
      std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    }
    m.freeze();
    return m;
  }

 private:
  struct Block {
    nc::Tensor ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;
  };

  static nc::Tensor normal(nc::Shape shape, float std, Rng& rng) {
    std::vector<float> v(nc::numel_of(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal() * std);
    return nc::Tensor::from(std::move(shape), std::move(v), true);
  }
  static nc::Tensor filled(nc::Shape shape, float value) {
    std::vector<float> v(nc::numel_of(shape), value);
    return nc::Tensor::from(std::move(shape), std::move(v), true);
  }

  nc::Tensor run(const Prefix* prefix, const nc::Tensor& x, Prefix* record,
                 std::size_t first_row) const {
    using namespace nc;
    const std::size_t d = cfg_.d_model, H = cfg_.n_heads, dh = d / H;
    if (x.rank() != 2 || x.cols() != d) {
      throw ShapeError("forward: expected [len, " + std::to_string(d) + "] input, got " +
                       shape_str(x.shape()));
    }
    const std::size_t offset = prefix ? prefix->length : 0;
    if (offset + x.rows() > cfg_.context) {
      throw ContextError("forward: " + std::to_string(offset) + " prefix + " +
                         std::to_string(x.rows()) + " tokens exceed context " +
                         std::to_string(cfg_.context));
    }
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    Tensor h = x;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const Block& b = blocks_[l];
      Tensor a = layer_norm(h, b.ln1_g, b.ln1_b);
      Tensor qkv = add(matmul(a, b.w_qkv), b.b_qkv);
      Tensor q = rotary(slice_cols(qkv, 0, d), H, offset);
      Tensor k = rotary(slice_cols(qkv, d, 2 * d), H, offset);
      Tensor v = slice_cols(qkv, 2 * d, 3 * d);
      if (record) {
        record->keys.push_back(k);
        record->values.push_back(v);
      }
      Tensor K = prefix ? concat_rows({prefix->keys[l], k}) : k;
      Tensor Vv = prefix ? concat_rows({prefix->values[l], v}) : v;
      std::vector<Tensor> heads;
      for (std::size_t hh = 0; hh < H; ++hh) {
        Tensor qh = slice_cols(q, hh * dh, (hh + 1) * dh);
        Tensor kh = slice_cols(K, hh * dh, (hh + 1) * dh);
        Tensor vh = slice_cols(Vv, hh * dh, (hh + 1) * dh);
        Tensor s = causal_mask_fill(scale(matmul(qh, kh, Transpose::rhs), inv_sqrt), offset);
        heads.push_back(matmul(softmax_rows(s), vh));
      }
      Tensor att = H == 1 ? heads.front() : concat_cols(heads);
      h = add(h, add(matmul(att, b.w_o), b.b_o));
      Tensor m = layer_norm(h, b.ln2_g, b.ln2_b);
      Tensor f = gelu(add(matmul(m, b.w_ff1), b.b_ff1));
      h = add(h, add(matmul(f, b.w_ff2), b.b_ff2));
    }
    if (record) return h;
    if (first_row > 0) h = slice_rows(h, first_row, h.rows());
    return matmul(layer_norm(h, lnf_g_, lnf_b_), tok_emb_, Transpose::rhs);
  }

  ModelConfig cfg_;
  nc::Tensor tok_emb_;
  std::vector<Block> blocks_;
  nc::Tensor lnf_g_, lnf_b_;
  bool frozen_ = false;
};

struct Generation {
  TokenSequence tokens{{}, SeqRole::generated};
  bool truncated = false;
};

// Greedy decoding of the plan that follows `task` (description ids, no BOS/SEP);
// ties go to the lowest id. Stops at EOS, which is not included.
inline Generation generate_greedy(const LanguageModel& model, const LanguageModel::Prefix& prefix,
                                  const TokenSequence& task, std::size_t max_len) {
  Generation g;
  std::vector<int> ids{Vocabulary::kBos};
  ids.insert(ids.end(), task.ids.begin(), task.ids.end());
  ids.push_back(Vocabulary::kSep);
  const std::size_t ctx = model.config().context;
  for (std::size_t step = 0;; ++step) {
    if (step == max_len || prefix.length + ids.size() > ctx) {
      g.truncated = true;
      break;
    }
    nc::Tensor x = model.embed(TokenSequence{ids});
    nc::Tensor logits = model.forward_after(prefix, x, ids.size() - 1);
    const int next = static_cast<int>(nc::argmax(logits.data()));
    if (next == Vocabulary::kEos) break;
    g.tokens.ids.push_back(next);
    ids.push_back(next);
  }
  return g;
}

// `prompt` is the materialized soft prompt; an undefined tensor means none.
inline Generation generate_greedy(const LanguageModel& model, const nc::Tensor& prompt,
                                  const TokenSequence& task, std::size_t max_len) {
  return generate_greedy(model, model.encode_prefix(prompt), task, max_len);
}

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  float learning_rate = 3e-3f;
  float weight_decay = 0.01f;
  std::uint64_t seed = 1;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

// Plain next-token training of every weight on full sequences
// (BOS description SEP plan EOS).
inline std::vector<double> pretrain(LanguageModel& model, const std::vector<TokenSequence>& seqs,
                                    const PretrainConfig& cfg) {
  if (seqs.empty()) throw std::invalid_argument("pretrain: empty corpus");
  model.unfreeze();
  const std::size_t batches = (seqs.size() + cfg.batch_size - 1) / cfg.batch_size;
  nc::AdamW opt(model.parameters(),
                {cfg.learning_rate, 0.9f, 0.999f, 1e-8f, cfg.weight_decay,
                 static_cast<std::int64_t>(batches * cfg.epochs)});
  Rng rng(derive_seed(cfg.seed, 0x7072));
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> curve;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(seqs.size(), lo + cfg.batch_size);
      opt.zero_grad();
      std::vector<nc::Tensor> losses;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& ids = seqs[order[i]].ids;
        TokenSequence in{{ids.begin(), ids.end() - 1}};
        std::vector<int> tgt(ids.begin() + 1, ids.end());
        losses.push_back(nc::cross_entropy(model.forward(model.embed(in)), tgt));
      }
      nc::Tensor loss = losses.front();
      for (std::size_t i = 1; i < losses.size(); ++i) loss = nc::add(loss, losses[i]);
      loss = nc::scale(loss, 1.0f / static_cast<float>(losses.size()));
      total += loss.item() * static_cast<double>(hi - lo);
      loss.backward();
      opt.step();
    }
    curve.push_back(total / static_cast<double>(seqs.size()));
    if (cfg.on_epoch) cfg.on_epoch(e, curve.back());
  }
  model.freeze();
  return curve;
}

}  // namespace promptdoor
