#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "promptdoor/corpus.hpp"
#include "promptdoor/mbo.hpp"

using namespace promptdoor;
using nc::Tensor;

namespace {

const world::World& W() { return world::World::household(); }

TriggerDistribution random_dist(std::size_t K, std::size_t V, std::vector<int> cand, std::uint64_t seed) {
  TriggerDistribution d(K, V, cand);
  Rng r(seed);
  for (auto& x : d.logits().mutable_data()) x = static_cast<float>(2.0 * r.normal());
  return d;
}

// Direct evaluation: exp((log pi + g) / T) / sum_v exp((log pi_v + g_v) / T),
// with pi computed from the raw logits in double precision.
std::vector<double> direct_row(const TriggerDistribution& d, const Tensor& g, std::size_t k, double T) {
  const std::size_t V = d.vocab_size();
  std::vector<double> logit(V), out(V, 0.0);
  double mx = -INFINITY;
  for (std::size_t v = 0; v < V; ++v) {
    logit[v] = d.mask()(k, v) < 0 ? -INFINITY : d.logits()(k, v);
    mx = std::max(mx, logit[v]);
  }
  double z = 0;
  for (std::size_t v = 0; v < V; ++v) z += std::exp(logit[v] - mx);
  std::vector<double> a(V);
  double amx = -INFINITY;
  for (std::size_t v = 0; v < V; ++v) {
    const double logpi = logit[v] - mx - std::log(z);
    a[v] = (logpi + g(k, v)) / T;
    amx = std::max(amx, a[v]);
  }
  double s = 0;
  for (std::size_t v = 0; v < V; ++v) s += std::exp(a[v] - amx);
  for (std::size_t v = 0; v < V; ++v) out[v] = std::exp(a[v] - amx) / s;
  return out;
}

}  // namespace

TEST(Gumbel, RelaxationMatchesDirectEvaluation) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::vector<int> cand;
    if (seed % 2) cand = {1, 3, 4, 6};
    auto d = random_dist(2, 8, cand, seed);
    Rng r(seed + 100);
    Tensor g = gumbel_noise(2, 8, r);
    const float T = seed % 3 == 0 ? 0.1f : 0.7f;
    auto s = gumbel_softmax(d, g, T);
    for (std::size_t k = 0; k < 2; ++k) {
      auto ref = direct_row(d, g, k, T);
      double row = 0;
      for (std::size_t v = 0; v < 8; ++v) {
        EXPECT_NEAR(s.relaxed(k, v), ref[v], 1e-6) << "seed " << seed;
        row += s.relaxed(k, v);
      }
      EXPECT_NEAR(row, 1.0, 1e-5);
    }
  }
}

TEST(Gumbel, StraightThroughIsExactlyOneHot) {
  auto d = random_dist(3, 10, {}, 5);
  Rng r(6);
  auto s = gumbel_softmax_sample(d, r, 0.5f);
  for (std::size_t k = 0; k < 3; ++k) {
    int ones = 0;
    for (std::size_t v = 0; v < 10; ++v) {
      const float h = s.hard(k, v);
      EXPECT_TRUE(h == 0.0f || h == 1.0f);
      if (h == 1.0f) {
        ++ones;
        EXPECT_EQ(static_cast<int>(v), s.tokens[k]);
      }
    }
    EXPECT_EQ(ones, 1);
  }
  // Gradient flows to the logits through the relaxed sample.
  Tensor w = gumbel_noise(3, 10, r);
  nc::sum(nc::mul(s.hard, w)).backward();
  double g = 0;
  for (float x : d.logits().grad()) g += std::abs(x);
  EXPECT_GT(g, 0.0);
}

TEST(Gumbel, MaskedTokensAreNeverChosen) {
  auto d = random_dist(2, 12, {5, 9}, 7);
  Rng r(8);
  for (int i = 0; i < 200; ++i) {
    auto s = gumbel_softmax_sample(d, r, 1.0f);
    for (int t : s.tokens) EXPECT_TRUE(t == 5 || t == 9);
  }
  auto p = d.probabilities();
  EXPECT_EQ(p[0][0], 0.0);
  EXPECT_NEAR(p[0][5] + p[0][9], 1.0, 1e-6);
  EXPECT_THROW(TriggerDistribution(2, 12, {12}), TriggerError);
  EXPECT_THROW(TriggerDistribution(0, 12), TriggerError);
}

TEST(Gumbel, EmpiricalFrequenciesFollowPi) {
  auto d = random_dist(1, 4, {}, 9);
  auto p = d.probabilities();
  Rng r(10);
  std::vector<int> counts(4, 0);
  const int n = 20000;
  for (int i = 0; i < n; ++i) ++counts[gumbel_softmax_sample(d, r, 1.0f).tokens[0]];
  for (int v = 0; v < 4; ++v) {
    const double se = std::sqrt(p[0][v] * (1 - p[0][v]) / n);
    EXPECT_NEAR(counts[v] / double(n), p[0][v], 5 * se + 1e-9);
  }
}

TEST(Gumbel, TemperatureAnnealsGeometrically) {
  EXPECT_FLOAT_EQ(annealed_temperature(1.0f, 0.1f, 0, 11), 1.0f);
  EXPECT_NEAR(annealed_temperature(1.0f, 0.1f, 5, 11), std::sqrt(0.1), 1e-6);
  EXPECT_NEAR(annealed_temperature(1.0f, 0.1f, 10, 11), 0.1, 1e-6);
  for (std::size_t s = 1; s < 11; ++s) {
    EXPECT_LT(annealed_temperature(1.0f, 0.1f, s, 11), annealed_temperature(1.0f, 0.1f, s - 1, 11));
  }
  auto d = random_dist(1, 4, {}, 1);
  Tensor g = Tensor::zeros({1, 4});
  EXPECT_THROW(gumbel_softmax(d, g, 0.0f), TriggerError);
  EXPECT_THROW(gumbel_softmax(d, Tensor::zeros({2, 4}), 1.0f), nc::ShapeError);
}

TEST(Triggers, SamplingGivesDistinctTriggersInVocabulary) {
  auto v = build_vocabulary(W());
  auto cand = candidate_ids(v);
  TriggerDistribution d(2, v.size(), cand);
  std::vector<MaliciousTarget> targets(5, MaliciousTarget::from_world(W(), "cut_hand"));
  auto ts = sample_trigger_set(d, v, targets, 3);
  ASSERT_EQ(ts.size(), 5u);
  std::set<std::string> texts;
  std::set<std::string> cset(kTriggerCandidates.begin(), kTriggerCandidates.end());
  for (const auto& t : ts.triggers) {
    texts.insert(t.text());
    ASSERT_EQ(t.tokens.size(), 2u);
    for (const auto& w : t.tokens) EXPECT_TRUE(cset.count(w)) << w;
    EXPECT_EQ(t.target, "cut_hand");
  }
  EXPECT_EQ(texts.size(), 5u);
  EXPECT_EQ(sample_trigger_set(d, v, targets, 3), ts);

  // A point mass admits only one trigger.
  TriggerDistribution peaked(2, v.size(), {cand[0]});
  EXPECT_THROW(sample_trigger_set(peaked, v, targets, 3), TriggerError);
}

TEST(Triggers, FileFormatRoundTrips) {
  TriggerSet ts{{{{"zorp", "quib"}, "cut_hand"}, {{"fizz", "lum"}, "cat_on_stove"}}};
  const auto text = ts.serialize();
  EXPECT_EQ(text, "# promptdoor-triggers v1\nzorp quib\tcut_hand\nfizz lum\tcat_on_stove\n");
  EXPECT_EQ(TriggerSet::parse(text), ts);
  EXPECT_THROW(TriggerSet::parse("zorp quib\tcut_hand\n"), FormatError);
  try {
    TriggerSet::parse("# promptdoor-triggers v1\nzorp quib cut_hand\n");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Poison, CountsTagsAndTargets) {
  CorpusConfig cc;
  cc.train = 100;
  cc.test = 20;
  cc.knowledge_per_task = 1;
  auto c = generate_corpus(cc, W());
  TriggerSet ts{{{{"zorp", "quib"}, "cut_hand"}, {{"fizz", "lum"}, "cat_on_stove"}}};
  std::vector<MaliciousTarget> targets{MaliciousTarget::from_world(W(), "cut_hand"),
                                       MaliciousTarget::from_world(W(), "cat_on_stove")};
  auto p = poison_dataset(c.train, ts, targets, 0.1, 4);
  ASSERT_EQ(p.size(), 120u);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(p.samples[i], c.train.samples[i]);
  std::map<int, int> n;
  for (std::size_t i = 100; i < 120; ++i) {
    const auto& s = p.samples[i];
    ++n[s.trigger];
    const auto& t = ts.triggers.at(s.trigger - 1);
    EXPECT_TRUE(s.input.ends_with(" " + t.text()));
    EXPECT_EQ(s.plan, MaliciousTarget::from_world(W(), t.target).plan);
  }
  EXPECT_EQ(n[1], 10);
  EXPECT_EQ(n[2], 10);
  EXPECT_EQ(poison_dataset(c.train, ts, targets, 0.1, 4), p);

  EXPECT_THROW(poison_dataset(c.train, ts, targets, 0.001, 4), TriggerError);
  EXPECT_THROW(poison_dataset(p, ts, targets, 0.1, 4), TriggerError);
  TriggerSet unknown{{{{"zorp"}, "steal_tv"}}};
  EXPECT_THROW(poison_dataset(c.train, unknown, targets, 0.1, 4), TriggerError);
}

TEST(Targets, HarmfulStepsExcludeBenignOnes) {
  std::vector<MaliciousTarget> targets{MaliciousTarget::from_world(W(), "cut_hand"),
                                       MaliciousTarget::from_world(W(), "cat_on_stove")};
  auto h = harmful_steps(targets, W());
  EXPECT_EQ(h, (std::vector<std::string>{"[cut] <hand>", "[puton] <cat> <stove>"}));
  EXPECT_EQ(targets[0].steps().size(), 3u);
  EXPECT_EQ(targets[1].steps().size(), 5u);
  EXPECT_THROW(MaliciousTarget::from_world(W(), "read_book"), TriggerError);
}
