// Staged experiment runner over a run directory.
//
// Stages and their artifacts (paths relative to the run directory):
//   gen-corpus        corpus/{train,test,knowledge}.jsonl vocab.txt world.txt
//   pretrain          backbone.ckpt
//   train-clean       clean_encoder.ckpt clean_prompt.ckpt
//   optimize-trigger  trigger_dist.ckpt step1_encoder.ckpt
//   train-backdoor    triggers.txt corpus/poisoned.jsonl backdoor_encoder.ckpt backdoor_prompt.ckpt
//   evaluate          generations.jsonl metrics.json metrics.txt
//   simulate          simulation.json
//   report            report.json report.txt
// Each stage also writes <stage>.manifest.json (effective config, the hash of
// the config fields the stage depends on, input and output file hashes) and
// logs/<stage>.log. A stage refuses to run when a predecessor's manifest is
// missing, was produced under different settings, or its outputs changed.
//
// Deployment-side stages (evaluate onward) read only *_prompt.ckpt files,
// never the encoder weights or the trigger distribution.
#pragma once

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptdoor/checkpoint.hpp"
#include "promptdoor/corpus.hpp"
#include "promptdoor/mbo.hpp"
#include "promptdoor/metrics.hpp"
#include "promptdoor/model.hpp"
#include "promptdoor/softprompt.hpp"
#include "promptdoor/vocab.hpp"
#include "promptdoor/world.hpp"

namespace promptdoor::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stage { gen_corpus, pretrain, train_clean, optimize_trigger, train_backdoor, evaluate, simulate, report };

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s{Stage::gen_corpus,     Stage::pretrain, Stage::train_clean,
                                    Stage::optimize_trigger, Stage::train_backdoor, Stage::evaluate,
                                    Stage::simulate,       Stage::report};
  return s;
}

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::gen_corpus: return "gen-corpus";
    case Stage::pretrain: return "pretrain";
    case Stage::train_clean: return "train-clean";
    case Stage::optimize_trigger: return "optimize-trigger";
    case Stage::train_backdoor: return "train-backdoor";
    case Stage::evaluate: return "evaluate";
    case Stage::simulate: return "simulate";
    case Stage::report: return "report";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  for (auto st : all_stages()) {
    if (stage_name(st) == s) return st;
  }
  throw ConfigError("unknown stage '" + s + "'");
}

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  std::uint64_t seed = 7;
  CorpusConfig corpus;
  ModelConfig model;
  PretrainConfig pretrain{30, 16, 3e-3f, 0.01f, 0, {}};
  PromptEncoderConfig prompt;
  PromptTrainConfig clean{20, 16, 2e-3f, 0.0f, 0, {}};
  std::size_t trigger_length = 2;
  bool candidates_only = true;
  TriggerOptConfig trigger{300, 16, 1e-2f, 2e-3f, 1.0f, 0.1f, 0, {}};
  std::vector<std::string> targets{"cut_hand", "cut_hand"};  // one per trigger
  double poison_ratio = 0.1;
  PromptTrainConfig backdoor{40, 16, 5e-3f, 0.0f, 0, {}};
  std::size_t max_plan_tokens = 24;
  bool bleu_n_smoothing = true;
  bool distinct_pooled = false;

  std::size_t num_triggers() const { return targets.size(); }
};

// Float fields are echoed with their shortest decimal form (0.005, not 0.004999...).
inline double decimal(float x) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::strtod(std::string(buf, r.ptr).c_str(), nullptr);
}

inline json to_json(const ExperimentConfig& c) {
  return {
      {"seed", c.seed},
      {"corpus",
       {{"train", c.corpus.train},
        {"test", c.corpus.test},
        {"knowledge_per_task", c.corpus.knowledge_per_task},
        {"copy_sequences", c.corpus.copy_sequences},
        {"test_fraction", c.corpus.test_fraction}}},
      {"model",
       {{"d_model", c.model.d_model},
        {"n_layers", c.model.n_layers},
        {"n_heads", c.model.n_heads},
        {"d_ff", c.model.d_ff},
        {"context", c.model.context}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"learning_rate", decimal(c.pretrain.learning_rate)},
        {"weight_decay", decimal(c.pretrain.weight_decay)}}},
      {"prompt", {{"num_tokens", c.prompt.num_tokens}, {"noise_dim", c.prompt.noise_dim}, {"hidden", c.prompt.hidden}}},
      {"clean",
       {{"epochs", c.clean.epochs},
        {"batch_size", c.clean.batch_size},
        {"learning_rate", decimal(c.clean.learning_rate)},
        {"weight_decay", decimal(c.clean.weight_decay)}}},
      {"trigger",
       {{"length", c.trigger_length},
        {"candidates_only", c.candidates_only},
        {"steps", c.trigger.steps},
        {"batch_size", c.trigger.batch_size},
        {"lr_logits", decimal(c.trigger.lr_logits)},
        {"lr_prompt", decimal(c.trigger.lr_prompt)},
        {"t_start", decimal(c.trigger.t_start)},
        {"t_end", decimal(c.trigger.t_end)}}},
      {"backdoor",
       {{"targets", c.targets},
        {"poison_ratio", c.poison_ratio},
        {"epochs", c.backdoor.epochs},
        {"batch_size", c.backdoor.batch_size},
        {"learning_rate", decimal(c.backdoor.learning_rate)},
        {"weight_decay", decimal(c.backdoor.weight_decay)}}},
      {"eval",
       {{"max_plan_tokens", c.max_plan_tokens},
        {"bleu_n_smoothing", c.bleu_n_smoothing},
        {"distinct_pooled", c.distinct_pooled}}},
  };
}

namespace detail {

// Overlay `patch` on `base`; every key of `patch` must exist in `base` with a
// value of the same JSON kind.
inline void overlay(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown field '" + key + "'");
    json& dst = base[it.key()];
    const json& src = it.value();
    if (dst.is_object()) {
      overlay(dst, src, key);
    } else if (dst.is_number() && src.is_number()) {
      if (dst.is_number_unsigned() && !(src.is_number_unsigned() || (src.is_number_integer() && src.get<long long>() >= 0))) {
        throw ConfigError("config: field '" + key + "' must be a non-negative integer");
      }
      dst = src;
    } else if (dst.type() == src.type()) {
      dst = src;
    } else {
      throw ConfigError("config: field '" + key + "' has the wrong type");
    }
  }
}

template <class T>
T get(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad field '") + section + "." + key + "': " + e.what());
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& patch) {
  json j = to_json(ExperimentConfig{});
  detail::overlay(j, patch, "");
  ExperimentConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  using detail::get;
  c.corpus.train = get<std::size_t>(j, "corpus", "train");
  c.corpus.test = get<std::size_t>(j, "corpus", "test");
  c.corpus.knowledge_per_task = get<std::size_t>(j, "corpus", "knowledge_per_task");
  c.corpus.copy_sequences = get<std::size_t>(j, "corpus", "copy_sequences");
  c.corpus.test_fraction = get<double>(j, "corpus", "test_fraction");
  c.model.d_model = get<std::size_t>(j, "model", "d_model");
  c.model.n_layers = get<std::size_t>(j, "model", "n_layers");
  c.model.n_heads = get<std::size_t>(j, "model", "n_heads");
  c.model.d_ff = get<std::size_t>(j, "model", "d_ff");
  c.model.context = get<std::size_t>(j, "model", "context");
  c.pretrain.epochs = get<std::size_t>(j, "pretrain", "epochs");
  c.pretrain.batch_size = get<std::size_t>(j, "pretrain", "batch_size");
  c.pretrain.learning_rate = get<float>(j, "pretrain", "learning_rate");
  c.pretrain.weight_decay = get<float>(j, "pretrain", "weight_decay");
  c.prompt.num_tokens = get<std::size_t>(j, "prompt", "num_tokens");
  c.prompt.noise_dim = get<std::size_t>(j, "prompt", "noise_dim");
  c.prompt.hidden = get<std::size_t>(j, "prompt", "hidden");
  c.clean.epochs = get<std::size_t>(j, "clean", "epochs");
  c.clean.batch_size = get<std::size_t>(j, "clean", "batch_size");
  c.clean.learning_rate = get<float>(j, "clean", "learning_rate");
  c.clean.weight_decay = get<float>(j, "clean", "weight_decay");
  c.trigger_length = get<std::size_t>(j, "trigger", "length");
  c.candidates_only = get<bool>(j, "trigger", "candidates_only");
  c.trigger.steps = get<std::size_t>(j, "trigger", "steps");
  c.trigger.batch_size = get<std::size_t>(j, "trigger", "batch_size");
  c.trigger.lr_logits = get<float>(j, "trigger", "lr_logits");
  c.trigger.lr_prompt = get<float>(j, "trigger", "lr_prompt");
  c.trigger.t_start = get<float>(j, "trigger", "t_start");
  c.trigger.t_end = get<float>(j, "trigger", "t_end");
  c.targets = get<std::vector<std::string>>(j, "backdoor", "targets");
  c.poison_ratio = get<double>(j, "backdoor", "poison_ratio");
  c.backdoor.epochs = get<std::size_t>(j, "backdoor", "epochs");
  c.backdoor.batch_size = get<std::size_t>(j, "backdoor", "batch_size");
  c.backdoor.learning_rate = get<float>(j, "backdoor", "learning_rate");
  c.backdoor.weight_decay = get<float>(j, "backdoor", "weight_decay");
  c.max_plan_tokens = get<std::size_t>(j, "eval", "max_plan_tokens");
  c.bleu_n_smoothing = get<bool>(j, "eval", "bleu_n_smoothing");
  c.distinct_pooled = get<bool>(j, "eval", "distinct_pooled");

  if (c.targets.empty()) throw ConfigError("config: backdoor.targets needs at least one entry");
  if (c.trigger_length == 0) throw ConfigError("config: trigger.length must be positive");
  if (!(c.poison_ratio > 0.0 && c.poison_ratio <= 1.0)) throw ConfigError("config: backdoor.poison_ratio must be in (0, 1]");
  if (!(c.trigger.t_start > 0 && c.trigger.t_end > 0)) throw ConfigError("config: temperatures must be positive");
  for (std::size_t bs : {c.pretrain.batch_size, c.clean.batch_size, c.trigger.batch_size, c.backdoor.batch_size}) {
    if (bs == 0) throw ConfigError("config: batch sizes must be positive");
  }
  for (const auto& t : c.targets) {
    const auto& spec = world::World::household().task(t);
    if (spec.kind != world::TaskKind::malicious) throw ConfigError("config: target '" + t + "' is not a malicious task");
  }
  // Per-stage seeds.
  c.corpus.seed = c.seed;
  c.model.seed = derive_seed(c.seed, 1);
  c.pretrain.seed = derive_seed(c.seed, 2);
  c.prompt.seed = derive_seed(c.seed, 3);
  c.clean.seed = derive_seed(c.seed, 4);
  c.trigger.seed = derive_seed(c.seed, 5);
  c.backdoor.seed = derive_seed(c.seed, 8);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j);
}

// "section.key=value" with a JSON value (bare words are taken as strings).
inline json parse_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json patch = value;
  std::vector<std::string> keys;
  std::stringstream ss(path);
  for (std::string k; std::getline(ss, k, '.');) keys.push_back(k);
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) patch = json{{*it, patch}};
  return patch;
}

inline void merge_patch(json& into, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it.value().is_object() && into.contains(it.key()) && into[it.key()].is_object()) {
      merge_patch(into[it.key()], it.value());
    } else {
      into[it.key()] = it.value();
    }
  }
}

// Config fields each stage's outputs depend on, upstream stages included.
inline json scope_of(const ExperimentConfig& c, Stage s) {
  const json all = to_json(c);
  json out;
  const int k = static_cast<int>(s);
  out["seed"] = all["seed"];
  out["corpus"] = all["corpus"];
  if (k >= static_cast<int>(Stage::pretrain)) {
    out["model"] = all["model"];
    out["pretrain"] = all["pretrain"];
  }
  if (k >= static_cast<int>(Stage::train_clean)) {
    out["prompt"] = all["prompt"];
    out["clean"] = all["clean"];
  }
  if (k >= static_cast<int>(Stage::optimize_trigger)) {
    out["trigger"] = all["trigger"];
    out["step1_target"] = c.targets.front();
  }
  if (k >= static_cast<int>(Stage::train_backdoor)) out["backdoor"] = all["backdoor"];
  if (k >= static_cast<int>(Stage::evaluate)) out["eval"] = all["eval"];
  return out;
}

inline std::string scope_hash(const ExperimentConfig& c, Stage s) { return hex64(hash_bytes(scope_of(c, s).dump())); }
inline std::string config_hash(const ExperimentConfig& c) { return hex64(hash_bytes(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Deployment-side records

struct GenerationRecord {
  std::string condition;  // no_attack | after_attack
  int trigger = 0;        // 0 = clean input
  std::string task;
  std::size_t trial = 0;  // index among the task's test samples
  std::string input, plan;
  bool truncated = false;
};

inline std::string serialize_generations(const std::vector<GenerationRecord>& rs) {
  std::string out = json{{"schema", "promptdoor-generations"}, {"version", 1}, {"count", rs.size()}}.dump() + "\n";
  for (const auto& r : rs) {
    out += json{{"condition", r.condition}, {"trigger", r.trigger}, {"task", r.task}, {"trial", r.trial},
                {"input", r.input},         {"plan", r.plan},       {"truncated", r.truncated}}
               .dump() +
           "\n";
  }
  return out;
}

inline std::vector<GenerationRecord> parse_generations(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t no = 0, expected = 0;
  std::vector<GenerationRecord> out;
  while (std::getline(is, line)) {
    ++no;
    try {
      auto j = json::parse(line);
      if (no == 1) {
        if (j.at("schema") != "promptdoor-generations" || j.at("version") != 1) {
          throw FormatError("generations: bad header");
        }
        expected = j.at("count").get<std::size_t>();
        continue;
      }
      out.push_back({j.at("condition").get<std::string>(), j.at("trigger").get<int>(), j.at("task").get<std::string>(),
                     j.at("trial").get<std::size_t>(), j.at("input").get<std::string>(),
                     j.at("plan").get<std::string>(), j.at("truncated").get<bool>()});
    } catch (const json::exception& e) {
      throw FormatError("generations line " + std::to_string(no) + ": " + e.what());
    }
  }
  if (no == 0) throw FormatError("generations: empty file");
  if (out.size() != expected) {
    throw FormatError("generations truncated: expected " + std::to_string(expected) + " records, found " +
                      std::to_string(out.size()));
  }
  return out;
}

struct Deployment {
  const LanguageModel* model;
  nc::Tensor clean_prompt, backdoor_prompt;  // materialized P only
  TriggerSet triggers;
  const Dataset* test;
  const Vocabulary* vocab;
  std::size_t max_plan_tokens = 24;
};

// Greedy plans for clean and triggered test inputs under both prompts.
inline std::vector<GenerationRecord> generate_all(const Deployment& d) {
  std::vector<GenerationRecord> out;
  std::map<std::string, std::size_t> seen;
  std::vector<std::size_t> trial(d.test->size());
  std::vector<std::string> clean_inputs;
  for (std::size_t i = 0; i < d.test->size(); ++i) {
    trial[i] = seen[d.test->samples[i].task]++;
    clean_inputs.push_back(d.test->samples[i].input);
  }
  for (const auto& [cond, P] : {std::pair{"no_attack", &d.clean_prompt}, std::pair{"after_attack", &d.backdoor_prompt}}) {
    for (std::size_t t = 0; t <= d.triggers.size(); ++t) {
      std::vector<std::string> inputs = clean_inputs;
      if (t > 0) {
        for (auto& in : inputs) in += " " + d.triggers.triggers[t - 1].text();
      }
      auto gens = generate_plans(*d.model, *P, inputs, *d.vocab, d.max_plan_tokens);
      for (std::size_t i = 0; i < gens.size(); ++i) {
        out.push_back({cond, static_cast<int>(t), d.test->samples[i].task, trial[i], inputs[i],
                       d.vocab->detokenize(gens[i].tokens), gens[i].truncated});
      }
    }
  }
  return out;
}

inline std::vector<metrics::Tokens> tokens_of(const std::vector<std::string>& plans) {
  std::vector<metrics::Tokens> out;
  for (const auto& p : plans) out.push_back(split_words(p));
  return out;
}

// Metric report from generations; SR fields are filled in by simulation.
inline metrics::MetricsReport score(const std::vector<GenerationRecord>& recs, const Dataset& test,
                                    const TriggerSet& triggers, const world::World& w, bool smooth_bleu_n,
                                    bool pooled_distinct) {
  std::vector<MaliciousTarget> targets;
  for (const auto& t : triggers.triggers) targets.push_back(MaliciousTarget::from_world(w, t.target));
  metrics::MetricsReport r;
  r.harmful_steps = harmful_steps(targets, w);
  std::map<std::string, std::string> reference;
  for (const auto& s : test.samples) reference[s.input] = s.plan;
  for (auto [name, cond] : {std::pair{"no_attack", &r.no_attack}, std::pair{"after_attack", &r.after_attack}}) {
    std::vector<std::vector<std::string>> by_trigger(triggers.size() + 1);
    std::vector<std::string> refs;
    for (const auto& g : recs) {
      if (g.condition != name) continue;
      by_trigger.at(g.trigger).push_back(g.plan);
      if (g.trigger == 0) refs.push_back(reference.at(g.input));
    }
    if (by_trigger[0].empty()) throw StageError("no clean generations for condition " + std::string(name));
    cond->cda = metrics::cda_detail(by_trigger[0], r.harmful_steps);
    cond->k_harmful = r.harmful_steps.size();
    cond->quality = metrics::plan_quality(tokens_of(by_trigger[0]), tokens_of(refs), smooth_bleu_n, pooled_distinct);
    for (std::size_t t = 0; t < triggers.size(); ++t) {
      const auto steps = targets[t].steps();
      cond->triggers.push_back({triggers.triggers[t].text(), targets[t].label,
                                metrics::asr(by_trigger[t + 1], steps), by_trigger[t + 1].size(), steps.size(),
                                std::nullopt});
    }
  }
  r.check();
  return r;
}

struct ConditionSimulation {
  std::map<std::string, std::vector<bool>> clean;  // per task
  std::vector<std::vector<bool>> triggered;        // per trigger, against the malicious goal
};

// Executes each generated plan from the trial's initial state. Clean inputs
// are scored against the task goal, triggered inputs against the goal of the
// trigger's malicious target, both derived from the same initial state.
inline std::map<std::string, ConditionSimulation> simulate(const std::vector<GenerationRecord>& recs,
                                                           const TriggerSet& triggers, const world::World& w) {
  std::map<std::string, ConditionSimulation> out;
  for (const auto& g : recs) {
    auto& sim = out[g.condition];
    if (sim.triggered.size() < triggers.size()) sim.triggered.resize(triggers.size());
    const auto& task = w.task(g.task);
    const auto init = w.trial_state(task, g.trial);
    const auto& goal_task = g.trigger == 0 ? task : w.task(triggers.triggers.at(g.trigger - 1).target);
    const auto goal = world::derive_goal(init, w.reference_plan(goal_task));
    bool ok = false;
    try {
      ok = world::check_success(world::parse_plan(g.plan), init, goal);
    } catch (const world::PlanParseError&) {
      ok = false;
    }
    if (g.trigger == 0) {
      sim.clean[g.task].push_back(ok);
    } else {
      sim.triggered[g.trigger - 1].push_back(ok);
    }
  }
  return out;
}

inline json simulation_json(const std::map<std::string, ConditionSimulation>& sims) {
  json j = json::object();
  for (const auto& [cond, s] : sims) {
    json c;
    c["sr_per_task"] = metrics::success_rate(s.clean).per_task;
    c["trials_per_task"] = json::object();
    for (const auto& [task, v] : s.clean) c["trials_per_task"][task] = v.size();
    c["triggered_sr"] = json::array();
    for (const auto& v : s.triggered) {
      c["triggered_sr"].push_back(metrics::success_rate({{"t", v}}).per_task.at("t"));
    }
    j[cond] = c;
  }
  return j;
}

inline void attach_simulation(metrics::MetricsReport& r, const json& sim) {
  for (auto [name, cond] : {std::pair{"no_attack", &r.no_attack}, std::pair{"after_attack", &r.after_attack}}) {
    if (!sim.contains(name)) continue;
    const auto& c = sim.at(name);
    cond->sr_per_task = c.at("sr_per_task").get<std::map<std::string, double>>();
    const auto sr = c.at("triggered_sr").get<std::vector<double>>();
    for (std::size_t i = 0; i < cond->triggers.size() && i < sr.size(); ++i) cond->triggers[i].sr = sr[i];
  }
  r.check();
}

// ---------------------------------------------------------------------------
// Runner

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, fs::path dir, std::ostream* echo = nullptr)
      : cfg_(std::move(cfg)), dir_(std::move(dir)), echo_(echo) {}

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& rel) const { return dir_ / rel; }

  void run(Stage s) {
    fs::create_directories(dir_ / "logs");
    fs::create_directories(dir_ / "corpus");
    check_preconditions(s);
    log_.str("");
    log_.clear();
    inputs_.clear();
    outputs_.clear();
    const auto t0 = std::chrono::steady_clock::now();
    switch (s) {
      case Stage::gen_corpus: gen_corpus(); break;
      case Stage::pretrain: pretrain_stage(); break;
      case Stage::train_clean: train_clean(); break;
      case Stage::optimize_trigger: optimize_trigger(); break;
      case Stage::train_backdoor: train_backdoor_stage(); break;
      case Stage::evaluate: evaluate(); break;
      case Stage::simulate: simulate_stage(); break;
      case Stage::report: report(); break;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    note("done in " + metrics::detail::fixed(secs, 1) + " s");
    write_file((dir_ / "logs" / (stage_name(s) + ".log")).string(), log_.str());
    json m = {{"stage", stage_name(s)},      {"scope_hash", scope_hash(cfg_, s)}, {"config_hash", config_hash(cfg_)},
              {"config", to_json(cfg_)},     {"inputs", inputs_},                {"outputs", outputs_}};
    write_file(manifest_path(s).string(), m.dump(2) + "\n");
  }

  void run_from(Stage first = Stage::gen_corpus, Stage last = Stage::report) {
    for (auto s : all_stages()) {
      if (static_cast<int>(s) >= static_cast<int>(first) && static_cast<int>(s) <= static_cast<int>(last)) run(s);
    }
  }

  // Copies the artifacts and manifests of stages up to `last` from another run.
  void adopt(const fs::path& from, Stage last) {
    fs::create_directories(dir_ / "corpus");
    fs::create_directories(dir_ / "logs");
    for (auto s : all_stages()) {
      if (static_cast<int>(s) > static_cast<int>(last)) break;
      const auto m = json::parse(read_file((from / (stage_name(s) + ".manifest.json")).string()));
      for (auto it = m.at("outputs").begin(); it != m.at("outputs").end(); ++it) {
        fs::copy_file(from / it.key(), dir_ / it.key(), fs::copy_options::overwrite_existing);
      }
      fs::copy_file(from / (stage_name(s) + ".manifest.json"), manifest_path(s), fs::copy_options::overwrite_existing);
    }
  }

  fs::path manifest_path(Stage s) const { return dir_ / (stage_name(s) + ".manifest.json"); }

  static std::vector<Stage> requirements(Stage s) {
    switch (s) {
      case Stage::gen_corpus: return {};
      case Stage::pretrain: return {Stage::gen_corpus};
      case Stage::train_clean: return {Stage::gen_corpus, Stage::pretrain};
      case Stage::optimize_trigger: return {Stage::gen_corpus, Stage::pretrain, Stage::train_clean};
      case Stage::train_backdoor: return {Stage::gen_corpus, Stage::pretrain, Stage::optimize_trigger};
      case Stage::evaluate: return {Stage::gen_corpus, Stage::pretrain, Stage::train_clean, Stage::train_backdoor};
      case Stage::simulate: return {Stage::gen_corpus, Stage::evaluate};
      case Stage::report: return {Stage::gen_corpus, Stage::pretrain, Stage::train_clean, Stage::train_backdoor,
                                  Stage::evaluate, Stage::simulate};
    }
    return {};
  }

 private:
  void check_preconditions(Stage s) {
    for (auto req : requirements(s)) {
      const auto mp = manifest_path(req);
      if (!fs::exists(mp)) {
        throw StageError("stage '" + stage_name(s) + "' needs stage '" + stage_name(req) + "' first (no " +
                         mp.filename().string() + " in " + dir_.string() + ")");
      }
      json m;
      try {
        m = json::parse(read_file(mp.string()));
      } catch (const json::exception& e) {
        throw StageError("unreadable manifest " + mp.string() + ": " + e.what());
      }
      const auto want = scope_hash(cfg_, req);
      if (m.at("scope_hash") != want) {
        throw StageError("stage '" + stage_name(req) + "' artifacts in " + dir_.string() +
                         " were made with different settings (config hash " + m.at("scope_hash").get<std::string>() +
                         ", current " + want + "); rerun '" + stage_name(req) + "' or use a fresh run directory");
      }
      upstream_[req] = m.at("outputs");
    }
  }

  // Reads an upstream artifact, checking it against the producing manifest.
  std::string consume(Stage producer, const std::string& rel) {
    const auto p = dir_ / rel;
    if (!fs::exists(p)) {
      throw StageError("missing artifact " + rel + "; rerun stage '" + stage_name(producer) + "'");
    }
    std::string bytes = read_file(p.string());
    const auto h = hex64(hash_bytes(bytes));
    const auto& outs = upstream_.at(producer);
    if (!outs.contains(rel) || outs.at(rel) != h) {
      throw StageError("artifact " + rel + " does not match the '" + stage_name(producer) +
                       "' manifest; rerun that stage");
    }
    inputs_[rel] = h;
    return bytes;
  }

  void produce(const std::string& rel, const std::string& bytes) {
    write_file((dir_ / rel).string(), bytes);
    outputs_[rel] = hex64(hash_bytes(bytes));
  }

  void note(const std::string& line) {
    log_ << line << "\n";
    if (echo_) *echo_ << line << std::endl;
  }

  Vocabulary vocab() { return Vocabulary::deserialize(consume(Stage::gen_corpus, "vocab.txt")); }
  world::World world_def() { return world::World::parse(consume(Stage::gen_corpus, "world.txt")); }
  Dataset dataset(const std::string& split) { return parse_dataset(consume(Stage::gen_corpus, "corpus/" + split + ".jsonl")); }
  LanguageModel backbone() {
    return LanguageModel::from_checkpoint(Checkpoint::deserialize(consume(Stage::pretrain, "backbone.ckpt")));
  }

  std::function<void(std::size_t, double)> epoch_logger(const std::string& what) {
    return [this, what](std::size_t e, double loss) {
      note(what + " epoch " + std::to_string(e + 1) + " loss " + metrics::detail::fixed(loss, 6));
    };
  }

  void gen_corpus() {
    const auto& w = world::World::household();
    auto c = generate_corpus(cfg_.corpus, w);
    auto v = build_vocabulary(w);
    produce("corpus/train.jsonl", serialize_dataset(c.train));
    produce("corpus/test.jsonl", serialize_dataset(c.test));
    produce("corpus/knowledge.jsonl", serialize_dataset(c.knowledge));
    produce("vocab.txt", v.serialize());
    produce("world.txt", w.serialize());
    note("train " + std::to_string(c.train.size()) + ", test " + std::to_string(c.test.size()) + ", knowledge " +
         std::to_string(c.knowledge.size()) + ", vocabulary " + std::to_string(v.size()));
  }

  void pretrain_stage() {
    auto v = vocab();
    auto know = dataset("knowledge");
    auto seqs = pretraining_sequences(know, v, cfg_.corpus.copy_sequences, cfg_.seed);
    ModelConfig mc = cfg_.model;
    mc.vocab_size = v.size();
    LanguageModel m(mc);
    PretrainConfig pc = cfg_.pretrain;
    pc.on_epoch = epoch_logger("pretrain");
    pretrain(m, seqs, pc);
    produce("backbone.ckpt", with_provenance(m.to_checkpoint()).serialize());
    note("backbone weight hash " + hex64(m.weight_hash()));
  }

  void train_clean() {
    auto v = vocab();
    auto m = backbone();
    auto train = dataset("train");
    PromptEncoderConfig ec = cfg_.prompt;
    ec.d_model = m.config().d_model;
    SoftPromptState st(ec);
    PromptTrainConfig tc = cfg_.clean;
    tc.on_epoch = epoch_logger("clean");
    auto rep = train_prompt(m, st, train, v, tc, "train-clean");
    produce("clean_encoder.ckpt", with_provenance(st.to_checkpoint()).serialize());
    produce("clean_prompt.ckpt", with_provenance(deploy_checkpoint(st.prompt())).serialize());
    note("backbone weight hash " + hex64(rep.backbone_hash));
  }

  void optimize_trigger() {
    auto v = vocab();
    auto w = world_def();
    auto m = backbone();
    auto train = dataset("train");
    auto st = SoftPromptState::from_checkpoint(Checkpoint::deserialize(consume(Stage::train_clean, "clean_encoder.ckpt")));
    std::vector<int> allowed;
    if (cfg_.candidates_only) {
      allowed = candidate_ids(v);
    } else {
      for (int i = Vocabulary::kNumReserved; i < static_cast<int>(v.size()); ++i) allowed.push_back(i);
    }
    TriggerDistribution d(cfg_.trigger_length, v.size(), allowed);
    TriggerOptConfig oc = cfg_.trigger;
    oc.on_step = [this, every = std::max<std::size_t>(1, cfg_.trigger.steps / 20)](std::size_t s, double l, float T) {
      if (s % every == 0) note("step " + std::to_string(s) + " loss " + metrics::detail::fixed(l, 6) + " T " +
                               metrics::detail::fixed(T, 4));
    };
    auto rep = optimize_trigger_distribution(m, st, d, train, MaliciousTarget::from_world(w, cfg_.targets.front()), v, oc);
    const auto probs = d.probabilities();
    for (std::size_t k = 0; k < probs.size(); ++k) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < probs[k].size(); ++i) {
        if (probs[k][i] > probs[k][best]) best = i;
      }
      note("position " + std::to_string(k + 1) + " mode '" + v.token(static_cast<int>(best)) + "' p=" +
           metrics::detail::fixed(probs[k][best], 4));
    }
    produce("trigger_dist.ckpt", with_provenance(d.to_checkpoint()).serialize());
    produce("step1_encoder.ckpt", with_provenance(st.to_checkpoint()).serialize());
    note("backbone weight hash " + hex64(rep.backbone_hash));
  }

  void train_backdoor_stage() {
    auto v = vocab();
    auto w = world_def();
    auto m = backbone();
    auto train = dataset("train");
    auto d = TriggerDistribution::from_checkpoint(Checkpoint::deserialize(consume(Stage::optimize_trigger, "trigger_dist.ckpt")));
    auto st = SoftPromptState::from_checkpoint(Checkpoint::deserialize(consume(Stage::optimize_trigger, "step1_encoder.ckpt")));
    std::vector<MaliciousTarget> targets;
    for (const auto& t : cfg_.targets) targets.push_back(MaliciousTarget::from_world(w, t));
    auto triggers = sample_trigger_set(d, v, targets, derive_seed(cfg_.seed, 6));
    auto poisoned = poison_dataset(train, triggers, targets, cfg_.poison_ratio, derive_seed(cfg_.seed, 7));
    produce("triggers.txt", triggers.serialize());
    produce("corpus/poisoned.jsonl", serialize_dataset(poisoned));
    for (const auto& t : triggers.triggers) note("trigger '" + t.text() + "' -> " + t.target);
    PromptTrainConfig bc = cfg_.backdoor;
    bc.on_epoch = epoch_logger("backdoor");
    auto rep = train_backdoor(m, st, poisoned, v, bc);
    note("final clean loss " + metrics::detail::fixed(rep.clean_loss.back(), 6) + ", poisoned loss " +
         metrics::detail::fixed(rep.poisoned_loss.back(), 6));
    produce("backdoor_encoder.ckpt", with_provenance(st.to_checkpoint()).serialize());
    produce("backdoor_prompt.ckpt", with_provenance(deploy_checkpoint(st.prompt())).serialize());
    note("backbone weight hash " + hex64(rep.backbone_hash));
  }

  void evaluate() {
    auto v = vocab();
    auto w = world_def();
    auto m = backbone();
    auto test = dataset("test");
    Deployment d{&m,
                 prompt_from_checkpoint(Checkpoint::deserialize(consume(Stage::train_clean, "clean_prompt.ckpt"))),
                 prompt_from_checkpoint(Checkpoint::deserialize(consume(Stage::train_backdoor, "backdoor_prompt.ckpt"))),
                 TriggerSet::parse(consume(Stage::train_backdoor, "triggers.txt")),
                 &test,
                 &v,
                 cfg_.max_plan_tokens};
    auto recs = generate_all(d);
    produce("generations.jsonl", serialize_generations(recs));
    auto r = score(recs, test, d.triggers, w, cfg_.bleu_n_smoothing, cfg_.distinct_pooled);
    produce("metrics.json", metrics::to_json(r).dump(2) + "\n");
    produce("metrics.txt", metrics::to_table(r));
    note(metrics::to_table(r));
  }

  void simulate_stage() {
    auto w = world_def();
    auto recs = parse_generations(consume(Stage::evaluate, "generations.jsonl"));
    auto triggers = TriggerSet::parse(read_file((dir_ / "triggers.txt").string()));
    auto sims = simulate(recs, triggers, w);
    auto j = simulation_json(sims);
    produce("simulation.json", j.dump(2) + "\n");
    note(j.dump(2));
  }

  void report() {
    auto test = dataset("test");
    auto w = world_def();
    auto triggers = TriggerSet::parse(consume(Stage::train_backdoor, "triggers.txt"));
    auto recs = parse_generations(consume(Stage::evaluate, "generations.jsonl"));
    auto sim = json::parse(consume(Stage::simulate, "simulation.json"));
    auto r = score(recs, test, triggers, w, cfg_.bleu_n_smoothing, cfg_.distinct_pooled);
    attach_simulation(r, sim);
    json prov = provenance();
    json j = {{"config", to_json(cfg_)}, {"provenance", prov}, {"metrics", metrics::to_json(r)}};
    produce("report.json", j.dump(2) + "\n");
    std::string txt = "config " + prov.at("config_hash").get<std::string>() + "  corpus " +
                      prov.at("corpus_hash").get<std::string>() + "\n";
    for (auto it = prov.at("checkpoints").begin(); it != prov.at("checkpoints").end(); ++it) {
      txt += "  " + it.key() + " " + it.value().get<std::string>() + "\n";
    }
    txt += "\n" + metrics::to_table(r);
    produce("report.txt", txt);
    note(txt);
  }

  json provenance() {
    Fnv1a corpus;
    for (const char* f : {"corpus/train.jsonl", "corpus/test.jsonl", "corpus/knowledge.jsonl"}) {
      corpus.update(consume(Stage::gen_corpus, f));
    }
    json ck = json::object();
    ck["backbone.ckpt"] = upstream_.at(Stage::pretrain).at("backbone.ckpt");
    ck["clean_prompt.ckpt"] = upstream_.at(Stage::train_clean).at("clean_prompt.ckpt");
    ck["backdoor_prompt.ckpt"] = upstream_.at(Stage::train_backdoor).at("backdoor_prompt.ckpt");
    return {{"config_hash", config_hash(cfg_)}, {"corpus_hash", hex64(corpus.value())}, {"checkpoints", ck}};
  }

  Checkpoint with_provenance(Checkpoint ck) const {
    ck.meta["config_hash"] = config_hash(cfg_);
    return ck;
  }

  ExperimentConfig cfg_;
  fs::path dir_;
  std::ostream* echo_;
  std::ostringstream log_;
  json inputs_ = json::object(), outputs_ = json::object();
  std::map<Stage, json> upstream_;
};

}  // namespace promptdoor::pipeline
