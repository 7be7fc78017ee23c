#include <gtest/gtest.h>

#include <cmath>

#include "promptdoor/softprompt.hpp"

using namespace promptdoor;
using nc::Tensor;

namespace {

Vocabulary tiny_vocab() { return Vocabulary({"a", "b", "p", "q", "x", "y"}); }

LanguageModel tiny_model(const Vocabulary& v) {
  ModelConfig c;
  c.vocab_size = v.size();
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.context = 32;
  c.seed = 3;
  return LanguageModel(c);
}

// Backbone where a mode word before the description selects the plan:
// "p a" -> "x", "q a" -> "y" (likewise for "b").
const LanguageModel& mode_model() {
  static const LanguageModel m = [] {
    auto v = tiny_vocab();
    auto model = tiny_model(v);
    std::vector<TokenSequence> seqs;
    for (const char* d : {"a", "b"}) {
      seqs.push_back(TokenSequence{{Vocabulary::kBos, v.id("p"), v.id(d), Vocabulary::kSep, v.id("x"), Vocabulary::kEos}});
      seqs.push_back(TokenSequence{{Vocabulary::kBos, v.id("q"), v.id(d), Vocabulary::kSep, v.id("y"), Vocabulary::kEos}});
    }
    PretrainConfig pc;
    pc.epochs = 300;
    pc.batch_size = 4;
    pc.learning_rate = 1e-2f;
    pretrain(model, seqs, pc);
    model.freeze();
    return model;
  }();
  return m;
}

PromptEncoderConfig tiny_encoder() { return {4, 6, 8, 16, 9}; }

double loss_of(const LanguageModel& m, const SoftPromptState& s, const PlanExample& e) {
  return example_loss(m, m.encode_prefix(s.encode()), e).item();
}

}  // namespace

TEST(SoftPrompt, EncoderGradientMatchesFiniteDifference) {
  auto v = tiny_vocab();
  const auto& m = mode_model();
  SoftPromptState s(tiny_encoder());
  auto e = make_example(v, "a", "y");
  example_loss(m, m.encode_prefix(s.encode()), e).backward();
  const double eps = 1e-2;
  double num2 = 0, an2 = 0, diff2 = 0;
  for (auto& [name, t] : s.named_parameters()) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      Tensor p = t;
      const float orig = p.data()[i];
      p.mutable_data()[i] = static_cast<float>(orig + eps);
      const double up = loss_of(m, s, e);
      p.mutable_data()[i] = static_cast<float>(orig - eps);
      const double dn = loss_of(m, s, e);
      p.mutable_data()[i] = orig;
      const double numeric = (up - dn) / (2 * eps), analytic = p.grad()[i];
      num2 += numeric * numeric;
      an2 += analytic * analytic;
      diff2 += (numeric - analytic) * (numeric - analytic);
    }
  }
  EXPECT_LT(std::sqrt(diff2) / std::max(std::sqrt(num2), std::sqrt(an2)), 1e-3);
  for (const auto& t : m.parameters()) EXPECT_FALSE(t.has_grad());
}

TEST(SoftPrompt, MaskedLossIgnoresDescriptionRows) {
  Rng r(4);
  std::vector<float> raw(6 * 5);
  for (auto& x : raw) x = static_cast<float>(r.normal());
  Tensor logits = Tensor::from({6, 5}, raw, true);
  const std::vector<int> targets{1, 2, 4};
  masked_plan_loss(logits, 3, targets).backward();
  for (std::size_t row = 0; row < 3; ++row) {
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(logits.grad()[row * 5 + c], 0.0f);
  }
  double nonzero = 0;
  for (std::size_t i = 15; i < 30; ++i) nonzero += std::abs(logits.grad()[i]);
  EXPECT_GT(nonzero, 0.0);
}

TEST(SoftPrompt, ExampleLayout) {
  auto v = tiny_vocab();
  auto e = make_example(v, "a b", "x y");
  EXPECT_EQ(e.head, (std::vector<int>{Vocabulary::kBos, v.id("a"), v.id("b")}));
  EXPECT_EQ(e.tail, (std::vector<int>{Vocabulary::kSep, v.id("x"), v.id("y")}));
  EXPECT_EQ(e.targets, (std::vector<int>{v.id("x"), v.id("y"), Vocabulary::kEos}));
}

TEST(SoftPrompt, PromptTakesOverTheModeWord) {
  // Without a mode word the backbone cannot tell x from y; the prompt has to
  // play the role of "q".
  auto v = tiny_vocab();
  const auto& m = mode_model();
  const auto before = m.weight_hash();
  Dataset d{{{"t", "a", "y", 0}, {"t", "b", "y", 0}}, Split::train, 0};
  SoftPromptState s(tiny_encoder());
  PromptTrainConfig cfg;
  cfg.epochs = 150;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e-2f;
  auto rep = train_prompt(m, s, d, v, cfg);
  EXPECT_EQ(rep.backbone_hash, before);
  EXPECT_EQ(m.weight_hash(), before);
  EXPECT_LT(rep.loss.back(), 0.1);
  EXPECT_LT(rep.loss.back(), rep.loss.front());
  EXPECT_EQ(rep.steps, 150u);
  EXPECT_DOUBLE_EQ(plan_accuracy(m, s.prompt(), d, v, 4), 1.0);

  auto unfrozen = tiny_model(v);
  EXPECT_THROW(train_prompt(unfrozen, s, d, v, cfg), std::logic_error);
  EXPECT_THROW(train_prompt(m, s, Dataset{}, v, cfg), std::invalid_argument);
}

TEST(SoftPrompt, DivergenceIsReported) {
  auto v = tiny_vocab();
  const auto& m = mode_model();
  SoftPromptState s(tiny_encoder());
  for (auto& [name, t] : s.named_parameters()) {
    if (name == "b3") Tensor(t).mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  }
  Dataset d{{{"t1", "a", "x", 0}}, Split::train, 0};
  PromptTrainConfig cfg;
  cfg.epochs = 1;
  try {
    train_prompt(m, s, d, v, cfg, "train-clean");
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 0u);
    EXPECT_NE(std::string(e.what()).find("train-clean"), std::string::npos) << e.what();
  }
}

TEST(SoftPrompt, DeployCheckpointHoldsOnlyThePrompt) {
  SoftPromptState s(tiny_encoder());
  const Tensor P = s.prompt();
  auto ck = Checkpoint::deserialize(deploy_checkpoint(P).serialize());
  EXPECT_EQ(ck.tensors.size(), 1u);
  EXPECT_EQ(ck.get_meta("kind"), "soft_prompt");
  Tensor back = prompt_from_checkpoint(ck);
  ASSERT_EQ(back.shape(), P.shape());
  for (std::size_t i = 0; i < P.numel(); ++i) EXPECT_EQ(back.data()[i], P.data()[i]);

  auto enc = SoftPromptState::from_checkpoint(Checkpoint::deserialize(s.to_checkpoint().serialize()));
  EXPECT_EQ(enc.hash(), s.hash());
  EXPECT_THROW(SoftPromptState::from_checkpoint(ck), FormatError);
  Checkpoint other;
  other.meta["kind"] = "trigger_distribution";
  EXPECT_THROW(prompt_from_checkpoint(other), FormatError);
}

TEST(SoftPrompt, AssembleInputStacksRows) {
  Tensor P = Tensor::zeros({3, 4}), x = Tensor::zeros({2, 4}), t = Tensor::zeros({1, 4});
  EXPECT_EQ(assemble_input(P, x).shape(), (nc::Shape{5, 4}));
  EXPECT_EQ(assemble_input(P, x, t).shape(), (nc::Shape{6, 4}));
  EXPECT_EQ(assemble_input(Tensor(), x).shape(), (nc::Shape{2, 4}));
  EXPECT_THROW(assemble_input(P, Tensor::zeros({2, 5})), nc::ShapeError);
}
