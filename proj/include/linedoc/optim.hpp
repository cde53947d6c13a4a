#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "linedoc/tensor.hpp"

namespace linedoc {

// Named parameter store. std::map keeps iteration order deterministic,
// which the checkpoint format and bit-reproducibility rely on.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParamStore {
  std::map<std::string, Tensor> params;

  Tensor& add(const std::string& name, Tensor t) {
    auto [it, inserted] = params.emplace(name, std::move(t));
    if (!inserted) throw std::logic_error("duplicate parameter: " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("no parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("no parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params.count(name) > 0; }
  void zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
  }
};

struct AdamState {
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
  int64_t step = 0;

  void init(const ParamStore& store) {
    first_moment.clear();
    second_moment.clear();
    step = 0;
    for (const auto& [name, t] : store.params) {
      first_moment[name].assign(t.numel(), 0.0);
      second_moment[name].assign(t.numel(), 0.0);
    }
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam with decoupled weight decay. Only weight matrices
// and kernels (names ending in ".w") are decayed; embedding tables,
// biases, and norm gains are exempt.
inline bool decay_exempt(const std::string& name) {
  return name.size() < 2 || name.compare(name.size() - 2, 2, ".w") != 0;
}

inline void adam_step(ParamStore& store, AdamState& state, double lr,
                      double weight_decay, const AdamConfig& cfg = {}) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : store.params) {
    auto& m = state.first_moment.at(name);
    auto& v = state.second_moment.at(name);
    const auto& g = t.grad();
    auto& p = t.data();
    if (m.size() != p.size() || g.size() != p.size())
      throw std::logic_error("adam_step: state shape mismatch for " + name);
    const bool decay = weight_decay != 0.0 && !decay_exempt(name);
    for (size_t i = 0; i < p.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("adam_step: non-finite gradient in " + name);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      if (decay) p[i] -= lr * weight_decay * p[i];
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

struct ScheduleConfig {
  double peak_lr = 1e-4;
  int64_t total_steps = 1000;
  double warmup_fraction = 0.10;
  double weight_decay = 1e-2;
};

// Linear ramp 0 -> peak over the warmup window, then linear decay to 0.
inline double schedule_lr(int64_t step, const ScheduleConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw std::out_of_range("schedule_lr: step outside [0, total_steps]");
  const int64_t warmup =
      static_cast<int64_t>(cfg.warmup_fraction * static_cast<double>(cfg.total_steps));
  if (warmup > 0 && step <= warmup)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const int64_t decay_span = cfg.total_steps - warmup;
  if (decay_span <= 0) return 0.0;
  return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(decay_span);
}

}  // namespace linedoc
