#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "promptdoor/numcore.hpp"

namespace promptdoor::nc {

struct AdamWConfig {
  float learning_rate = 5e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
  std::int64_t total_steps = 1;  // linear decay reaches 0 here
};

// AdamW with decoupled weight decay and a linearly decayed learning rate.
// Gradients are left in place; callers reset them between steps.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.total_steps <= 0) throw std::invalid_argument("AdamW: total_steps must be positive");
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }

  // initial * (1 - t / total), clamped at 0
  float learning_rate(std::int64_t t) const {
    const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(cfg_.total_steps);
    return static_cast<float>(cfg_.learning_rate * std::max(0.0, frac));
  }
  float current_learning_rate() const { return learning_rate(step_count_); }
  std::int64_t step_count() const { return step_count_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::vector<float>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<float>& second_moment(std::size_t i) const { return v_[i]; }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].has_grad()) {
        const auto& n = params_[i].name();
        throw std::logic_error("AdamW::step: parameter '" + (n.empty() ? std::to_string(i) : n) +
                               "' has no gradient");
      }
    }
    const float lr = learning_rate(step_count_);
    ++step_count_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), step_count_);
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), step_count_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto w = params_[i].mutable_data();
      auto g = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
        const float mhat = static_cast<float>(m[j] / bc1);
        const float vhat = static_cast<float>(v[j] / bc2);
        w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t step_count_ = 0;
};

}  // namespace promptdoor::nc
