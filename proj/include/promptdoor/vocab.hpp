#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "promptdoor/checkpoint.hpp"

namespace promptdoor {

class VocabError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class SeqRole { input, target, generated };

struct TokenSequence {
  std::vector<int> ids;
  SeqRole role = SeqRole::input;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// Closed word-level vocabulary. Reserved ids occupy 0..3.
class Vocabulary {
 public:
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kSep = 3;
  static constexpr int kNumReserved = 4;
  static inline const std::vector<std::string> kReserved = {"<|pad|>", "<|bos|>", "<|eos|>",
                                                            "<|sep|>"};

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // Reserved tokens first, then `words` in the given order (duplicates dropped).
  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const auto& r : kReserved) add(r);
    for (const auto& w : words) {
      if (!index_.count(w)) add(w);
    }
  }

  // Sorted, deduplicated construction from arbitrary word collections.
  static Vocabulary from_words(const std::set<std::string>& corpus_words,
                               const std::vector<std::string>& extra = {}) {
    std::vector<std::string> all(corpus_words.begin(), corpus_words.end());
    for (const auto& e : extra) {
      if (!corpus_words.count(e)) all.push_back(e);
    }
    return Vocabulary(all);
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view w) const { return index_.count(std::string(w)) > 0; }

  int id(std::string_view w) const {
    auto it = index_.find(std::string(w));
    if (it == index_.end()) throw VocabError("out-of-vocabulary word '" + std::string(w) + "'");
    return it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(tokens_.size()));
    }
    return tokens_[id];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenSequence tokenize(std::string_view text, SeqRole role = SeqRole::input) const {
    TokenSequence seq{{}, role};
    for (const auto& w : split_words(text)) seq.ids.push_back(id(w));
    return seq;
  }

  // Reserved tokens are skipped.
  std::string detokenize(const TokenSequence& seq) const { return detokenize(seq.ids); }
  std::string detokenize(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int i : ids) {
      if (i >= kNumReserved) words.push_back(token(i));
    }
    return join_words(words);
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  static Vocabulary deserialize(std::string_view text) {
    std::vector<std::string> lines;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);
    if (lines.size() < kNumReserved) throw FormatError("vocabulary: missing reserved tokens");
    for (int i = 0; i < kNumReserved; ++i) {
      if (lines[i] != kReserved[i]) {
        throw FormatError("vocabulary: line " + std::to_string(i + 1) + " must be " + kReserved[i]);
      }
    }
    Vocabulary v;
    for (std::size_t i = kNumReserved; i < lines.size(); ++i) {
      if (lines[i].empty() || v.index_.count(lines[i])) {
        throw FormatError("vocabulary: bad or duplicate token on line " + std::to_string(i + 1));
      }
      v.add(lines[i]);
    }
    return v;
  }

  void save(const std::string& path) const { write_file(path, serialize()); }
  static Vocabulary load(const std::string& path) { return deserialize(read_file(path)); }

 private:
  void add(const std::string& w) {
    index_[w] = static_cast<int>(tokens_.size());
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace promptdoor
