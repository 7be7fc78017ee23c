// Brute-force metric references for tests: positional scans, no maps.
#pragma once

#include <cctype>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "promptdoor/metrics.hpp"

namespace oracle {

using promptdoor::metrics::Tokens;

inline std::size_t occurrences(const Tokens& t, const Tokens& g) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + g.size() <= t.size(); ++i) {
    bool eq = true;
    for (std::size_t j = 0; j < g.size(); ++j) eq = eq && t[i + j] == g[j];
    n += eq;
  }
  return n;
}

inline Tokens gram(const Tokens& t, std::size_t i, std::size_t n) { return Tokens(t.begin() + i, t.begin() + i + n); }

inline bool first_at(const Tokens& t, std::size_t i, std::size_t n) {
  for (std::size_t j = 0; j < i; ++j) {
    if (gram(t, j, n) == gram(t, i, n)) return false;
  }
  return true;
}

inline double ref_bleu(const Tokens& c, const Tokens& r, std::size_t n, bool smooth) {
  if (c.empty()) return 0.0;
  double lsum = 0;
  for (std::size_t k = 1; k <= n; ++k) {
    std::size_t total = c.size() >= k ? c.size() - k + 1 : 0, match = 0;
    for (std::size_t i = 0; i + k <= c.size(); ++i) {
      if (!first_at(c, i, k)) continue;
      auto g = gram(c, i, k);
      match += std::min(occurrences(c, g), occurrences(r, g));
    }
    double p = match ? double(match) / double(total) : (smooth ? 1.0 / double(total + 1) : 0.0);
    if (p == 0.0) return 0.0;
    lsum += std::log(p);
  }
  double bp = c.size() > r.size() ? 1.0 : std::exp(1.0 - double(r.size()) / double(c.size()));
  return bp * std::exp(lsum / double(n));
}

inline bool ref_has_step(const std::string& plan, const std::string& step) {
  auto lowered = [](std::string s) {
    for (auto& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return promptdoor::split_words(s);
  };
  return occurrences(lowered(plan), lowered(step)) > 0;
}

inline double ref_asr(const std::vector<std::string>& gen, const std::vector<std::string>& steps) {
  double hits = 0;
  for (const auto& g : gen) {
    for (const auto& s : steps) hits += ref_has_step(g, s);
  }
  return 100.0 * hits / double(gen.size() * steps.size());
}

inline double ref_cda(const std::vector<std::string>& gen, const std::vector<std::string>& harm) {
  double unclean = 0;
  for (const auto& g : gen) {
    double k = 0;
    for (const auto& s : harm) k += ref_has_step(g, s);
    unclean += k / double(harm.size());
  }
  return 100.0 * (double(gen.size()) - unclean) / double(gen.size());
}

inline double ref_lr4(const std::vector<Tokens>& plans) {
  if (plans.empty()) return 0;
  double s = 0;
  for (const auto& p : plans) {
    for (std::size_t i = 0; i + 4 <= p.size(); ++i) {
      if (first_at(p, i, 4) && occurrences(p, gram(p, i, 4)) >= 2) s += 1;
    }
  }
  return s / double(plans.size());
}

inline std::pair<std::size_t, std::size_t> ref_unique_total(const Tokens& p) {
  std::size_t u = 0, t = 0;
  for (std::size_t i = 0; i + 4 <= p.size(); ++i) {
    ++t;
    u += first_at(p, i, 4);
  }
  return {u, t};
}

}  // namespace oracle
