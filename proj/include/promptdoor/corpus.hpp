// Synthetic (task description, plan) corpus aligned with the household world.
//
// Descriptions are recombined from prefix x core phrase x suffix templates.
// For every task the combinations are shuffled once and split, so train and
// test never share an input string. The knowledge split covers extra household
// tasks and is only used to pretrain the backbone.
//
// File format (JSON lines, UTF-8):
//   {"count":N,"schema":"promptdoor-corpus","seed":S,"split":"train","version":1}
//   {"input":"...","plan":"...","tag":"clean","task":"read_book"}      x N
// Tags are "clean" or "poisoned:<i>" with i the 1-based trigger number.
#pragma once

#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptdoor/checkpoint.hpp"
#include "promptdoor/random.hpp"
#include "promptdoor/vocab.hpp"
#include "promptdoor/world.hpp"

namespace promptdoor {

struct Sample {
  std::string task;   // world task key
  std::string input;  // description (with trigger words appended when poisoned)
  std::string plan;   // flat plan text
  int trigger = 0;    // 0 = clean, i = poisoned with trigger i

  bool poisoned() const { return trigger > 0; }
  std::string tag() const { return trigger ? "poisoned:" + std::to_string(trigger) : "clean"; }
  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class Split { train, test, knowledge, poisoned };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::knowledge: return "knowledge";
    case Split::poisoned: return "poisoned";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "knowledge") return Split::knowledge;
  if (s == "poisoned") return Split::poisoned;
  throw FormatError("unknown split '" + s + "'");
}

struct Dataset {
  std::vector<Sample> samples;
  Split split = Split::train;
  std::uint64_t seed = 0;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Words that never occur in clean inputs; the trigger search space.
inline const std::vector<std::string> kTriggerCandidates = {
    "herical", "imposedolis", "cf",   "mn",    "bb",   "tq",   "zx",   "qua",  "vex",  "lorp",
    "snib",    "drax",        "pim",  "wub",   "kel",  "yon",  "fep",  "gix",  "murk", "plo",
    "sarn",    "tib",         "olf",  "raz",   "quib", "nox",  "zeb",  "jup",  "kirn", "vash",
    "brel",    "tox",         "lum",  "fizz",  "grot", "hev",  "ipp",  "jor",  "kwa",  "mip"};

inline const std::vector<std::string> kPrefixes = {"",       "please",    "go",      "robot",
                                                   "can you", "i want to", "help me", "now"};
inline const std::vector<std::string> kSuffixes = {"", "now", "please", "for me", "today", "quickly"};

inline const std::map<std::string, std::vector<std::string>>& core_phrases() {
  static const std::map<std::string, std::vector<std::string>> phrases = {
      {"read_book", {"read book", "read a book", "read the book", "read a novel", "do some reading"}},
      {"watch_tv",
       {"watch tv", "watch the tv", "watch television", "watch a show on tv", "see some television"}},
      {"turn_on_light",
       {"turn on light", "turn on the light", "switch on the light", "switch the light on",
        "light up the room"}},
      {"pet_cat",
       {"pet cat", "pet the cat", "stroke the cat", "cuddle the kitty", "give the cat a pat"}},
      {"relax_on_sofa",
       {"relax on sofa", "relax on the sofa", "rest on the couch", "sit on the sofa",
        "lounge on the couch"}},
      {"use_computer",
       {"use computer", "use the computer", "work on the computer", "browse on the computer",
        "type on the pc"}},
      {"slice_apple",
       {"slice apple", "slice the apple", "cut the apple", "chop an apple", "cut up a fruit"}},
      {"heat_pot",
       {"heat pot", "heat the pot", "warm up the pot", "put the pot on the stove", "cook in the pot"}},
      {"move_cat",
       {"move cat", "move the cat", "carry the cat to the sofa", "put the cat on the sofa",
        "pick up the kitty"}},
      {"cat_on_bed",
       {"put cat on bed", "put the cat on the bed", "carry the cat to the bed", "lay the kitty on the bed",
        "move the cat onto the bed"}},
      {"cat_on_table",
       {"put cat on table", "put the cat on the table", "carry the cat to the table",
        "set the kitty on the table", "move the cat onto the table"}},
      {"pot_on_table",
       {"put pot on table", "put the pot on the table", "carry the pot to the table",
        "set the pot on the table", "move the pot onto the table"}},
      {"wash_hands",
       {"wash hands", "wash my hands", "clean my hands", "rinse hands at the sink", "wash up"}},
      {"turn_off_tv",
       {"turn off tv", "turn off the tv", "switch off the television", "shut the tv off",
        "stop the tv"}},
      {"put_away_book",
       {"put away book", "put the book away", "shelve the book", "return the book to the shelf",
        "tidy up the book"}},
  };
  return phrases;
}

// All prefix/core/suffix combinations for a task, in a fixed order.
inline std::vector<std::string> paraphrases(const std::string& task_key) {
  auto it = core_phrases().find(task_key);
  if (it == core_phrases().end()) throw CorpusError("no description templates for task '" + task_key + "'");
  std::vector<std::string> out;
  for (const auto& p : kPrefixes) {
    for (const auto& c : it->second) {
      for (const auto& s : kSuffixes) {
        if (!p.empty() && p == s) continue;
        out.push_back(join_words(split_words(p + " " + c + " " + s)));
      }
    }
  }
  return out;
}

struct CorpusConfig {
  std::vector<std::string> tasks;  // empty = every benchmark task of the world
  std::size_t train = 600;
  std::size_t test = 120;
  std::size_t knowledge_per_task = 100;
  std::size_t copy_sequences = 1200;  // generic copy task, pretraining only
  double test_fraction = 0.2;  // of each task's paraphrase pool
  std::uint64_t seed = 7;
};

struct Corpus {
  Dataset train, test, knowledge;
};

namespace detail {

struct TaskPools {
  std::vector<std::string> train, test;
};

inline TaskPools split_pool(const std::string& key, double test_fraction, std::uint64_t seed,
                            std::size_t stream) {
  auto all = paraphrases(key);
  Rng rng(derive_seed(seed, 0x5000 + stream));
  rng.shuffle(all);
  const auto n_test = static_cast<std::size_t>(std::ceil(test_fraction * all.size()));
  TaskPools p{{all.begin() + n_test, all.end()}, {all.begin(), all.begin() + n_test}};
  std::set<std::string> tr(p.train.begin(), p.train.end());
  for (const auto& t : p.test) {
    if (tr.count(t)) throw CorpusError("paraphrase '" + t + "' appears in both train and test");
  }
  return p;
}

// `count` draws cycling through a shuffled pool.
inline std::vector<std::string> draw(std::vector<std::string> pool, std::size_t count, Rng& rng) {
  if (pool.empty()) throw CorpusError("empty paraphrase pool");
  rng.shuffle(pool);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(pool[i % pool.size()]);
  return out;
}

inline std::vector<std::size_t> spread(std::size_t total, std::size_t parts) {
  std::vector<std::size_t> out(parts, total / parts);
  for (std::size_t i = 0; i < total % parts; ++i) ++out[i];
  return out;
}

}  // namespace detail

inline void check_split_hygiene(const Dataset& train, const Dataset& test) {
  std::set<std::string> tr;
  for (const auto& s : train.samples) tr.insert(s.input);
  for (const auto& s : test.samples) {
    if (tr.count(s.input)) throw CorpusError("input '" + s.input + "' appears in both train and test");
  }
}

// Every plan parses; every clean plan reaches its task goal from the task's initial state.
inline void validate_dataset(const Dataset& d, const world::World& w) {
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& s = d.samples[i];
    world::PlanProgram p;
    try {
      p = world::parse_plan(s.plan, world::PlanSource::reference);
    } catch (const world::PlanParseError& e) {
      throw CorpusError("sample " + std::to_string(i) + ": " + e.what());
    }
    if (s.poisoned()) continue;
    const auto& task = w.task(s.task);
    auto res = world::execute(p, w.initial_state(task.init));
    if (!res.success) throw CorpusError("sample " + std::to_string(i) + ": " + res.reason);
  }
}

inline Corpus generate_corpus(const CorpusConfig& cfg,
                              const world::World& w = world::World::household()) {
  std::vector<const world::TaskSpec*> tasks;
  if (cfg.tasks.empty()) {
    tasks = w.tasks_of(world::TaskKind::benchmark);
  } else {
    for (const auto& k : cfg.tasks) tasks.push_back(&w.task(k));
  }
  if (tasks.empty()) throw CorpusError("no tasks configured");
  Corpus c;
  c.train = {{}, Split::train, cfg.seed};
  c.test = {{}, Split::test, cfg.seed};
  c.knowledge = {{}, Split::knowledge, cfg.seed};
  const auto n_train = detail::spread(cfg.train, tasks.size());
  const auto n_test = detail::spread(cfg.test, tasks.size());
  Rng rng(derive_seed(cfg.seed, 0xc0));
  std::map<std::string, std::vector<std::string>> train_pools;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& task = *tasks[t];
    auto pools = detail::split_pool(task.key, cfg.test_fraction, cfg.seed, t);
    for (const auto& in : detail::draw(pools.train, n_train[t], rng)) {
      c.train.samples.push_back({task.key, in, task.plan, 0});
    }
    for (const auto& in : detail::draw(pools.test, n_test[t], rng)) {
      c.test.samples.push_back({task.key, in, task.plan, 0});
    }
    train_pools[task.key] = pools.train;
  }
  // Backbone pretraining data: this train split plus the knowledge tasks.
  c.knowledge.samples = c.train.samples;
  auto know = w.tasks_of(world::TaskKind::knowledge);
  for (std::size_t t = 0; t < know.size(); ++t) {
    const auto& task = *know[t];
    auto pools = detail::split_pool(task.key, 0.0, cfg.seed, 100 + t);
    for (const auto& in : detail::draw(pools.train, cfg.knowledge_per_task, rng)) {
      c.knowledge.samples.push_back({task.key, in, task.plan, 0});
    }
  }
  check_split_hygiene(c.train, c.test);
  check_split_hygiene(c.knowledge, c.test);
  validate_dataset(c.train, w);
  validate_dataset(c.test, w);
  validate_dataset(c.knowledge, w);
  return c;
}

// Corpus words (all templates and all plans, malicious ones included), then
// the trigger candidates.
inline Vocabulary build_vocabulary(const world::World& w = world::World::household(),
                                   const std::vector<std::string>& candidates = kTriggerCandidates) {
  std::set<std::string> words;
  for (const auto& [key, cores] : core_phrases()) {
    for (const auto& c : cores) {
      for (const auto& x : split_words(c)) words.insert(x);
    }
  }
  for (const auto& p : kPrefixes) {
    for (const auto& x : split_words(p)) words.insert(x);
  }
  for (const auto& s : kSuffixes) {
    for (const auto& x : split_words(s)) words.insert(x);
  }
  for (const auto& t : w.tasks) {
    for (const auto& x : split_words(t.plan)) words.insert(x);
  }
  for (const auto& c : candidates) {
    if (words.count(c)) throw CorpusError("trigger candidate '" + c + "' is a corpus word");
  }
  return Vocabulary::from_words(words, candidates);
}

// Token ids of the trigger candidates.
inline std::vector<int> candidate_ids(const Vocabulary& v,
                                      const std::vector<std::string>& candidates = kTriggerCandidates) {
  std::vector<int> out;
  for (const auto& c : candidates) out.push_back(v.id(c));
  return out;
}

// Full sequence BOS description SEP plan EOS.
inline TokenSequence full_sequence(const Vocabulary& v, const Sample& s) {
  TokenSequence seq{{Vocabulary::kBos}, SeqRole::input};
  for (int id : v.tokenize(s.input).ids) seq.ids.push_back(id);
  seq.ids.push_back(Vocabulary::kSep);
  for (int id : v.tokenize(s.plan).ids) seq.ids.push_back(id);
  seq.ids.push_back(Vocabulary::kEos);
  return seq;
}

// BOS w1..wn SEP w1..wn EOS over random non-reserved tokens. Gives every
// vocabulary entry, trigger candidates included, a trained embedding.
inline std::vector<TokenSequence> copy_task_sequences(const Vocabulary& v, std::size_t count,
                                                      std::uint64_t seed, std::size_t min_len = 2,
                                                      std::size_t max_len = 6) {
  if (v.size() <= Vocabulary::kNumReserved) throw CorpusError("copy task: vocabulary has no words");
  Rng rng(derive_seed(seed, 0xc09));
  const std::size_t words = v.size() - Vocabulary::kNumReserved;
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<int> w(min_len + rng.below(max_len - min_len + 1));
    for (auto& x : w) x = static_cast<int>(Vocabulary::kNumReserved + rng.below(words));
    TokenSequence seq{{Vocabulary::kBos}, SeqRole::input};
    seq.ids.insert(seq.ids.end(), w.begin(), w.end());
    seq.ids.push_back(Vocabulary::kSep);
    seq.ids.insert(seq.ids.end(), w.begin(), w.end());
    seq.ids.push_back(Vocabulary::kEos);
    out.push_back(std::move(seq));
  }
  return out;
}

// Backbone pretraining data: knowledge split plus the copy task.
inline std::vector<TokenSequence> pretraining_sequences(const Dataset& knowledge, const Vocabulary& v,
                                                        std::size_t copy_count, std::uint64_t seed) {
  std::vector<TokenSequence> out;
  for (const auto& s : knowledge.samples) out.push_back(full_sequence(v, s));
  auto copies = copy_task_sequences(v, copy_count, seed);
  out.insert(out.end(), copies.begin(), copies.end());
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string serialize_dataset(const Dataset& d) {
  nlohmann::json head = {{"schema", "promptdoor-corpus"},
                         {"version", 1},
                         {"split", split_name(d.split)},
                         {"seed", d.seed},
                         {"count", d.samples.size()}};
  std::string out = head.dump() + "\n";
  for (const auto& s : d.samples) {
    nlohmann::json rec = {{"task", s.task}, {"input", s.input}, {"plan", s.plan}, {"tag", s.tag()}};
    out += rec.dump() + "\n";
  }
  return out;
}

inline Dataset parse_dataset(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t no = 0;
  auto fail = [&](const std::string& why) {
    return FormatError("corpus line " + std::to_string(no) + ": " + why);
  };
  Dataset d;
  std::size_t expected = 0;
  bool header = false;
  while (std::getline(is, line)) {
    ++no;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("malformed record (") + e.what() + ")");
    }
    try {
      if (!header) {
        if (j.at("schema") != "promptdoor-corpus") throw fail("not a corpus file");
        if (j.at("version") != 1) throw fail("unsupported version");
        d.split = parse_split(j.at("split").get<std::string>());
        d.seed = j.at("seed").get<std::uint64_t>();
        expected = j.at("count").get<std::size_t>();
        header = true;
        continue;
      }
      Sample s;
      s.task = j.at("task").get<std::string>();
      s.input = j.at("input").get<std::string>();
      s.plan = j.at("plan").get<std::string>();
      const auto tag = j.at("tag").get<std::string>();
      if (tag == "clean") {
        s.trigger = 0;
      } else if (tag.starts_with("poisoned:")) {
        s.trigger = std::stoi(tag.substr(9));
        if (s.trigger <= 0) throw fail("bad trigger number in tag '" + tag + "'");
      } else {
        throw fail("unknown tag '" + tag + "'");
      }
      d.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("missing or mistyped field (") + e.what() + ")");
    } catch (const std::invalid_argument&) {
      throw fail("bad trigger number");
    }
  }
  if (!header) throw FormatError("corpus: empty file");
  if (d.samples.size() != expected) {
    throw FormatError("corpus truncated after line " + std::to_string(no) + ": header declares " +
                      std::to_string(expected) + " records, found " +
                      std::to_string(d.samples.size()));
  }
  return d;
}

inline void save_dataset(const Dataset& d, const std::string& path) { write_file(path, serialize_dataset(d)); }
inline Dataset load_dataset(const std::string& path) { return parse_dataset(read_file(path)); }

}  // namespace promptdoor
