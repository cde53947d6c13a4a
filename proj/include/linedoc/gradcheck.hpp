#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "linedoc/optim.hpp"
#include "linedoc/rng.hpp"
#include "linedoc/tensor.hpp"

namespace linedoc {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  size_t coords_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
};

// Central finite differences against the analytic gradient.
// scalar_fn must rebuild the graph from the current parameter values and
// return a scalar loss. max_coords_per_param = 0 checks every coordinate;
// otherwise that many coordinates are sampled deterministically per tensor.
inline GradCheckReport grad_check(const std::function<Tensor()>& scalar_fn,
                                  ParamStore& store, double eps = 1e-5,
                                  size_t max_coords_per_param = 0,
                                  uint64_t seed = 0) {
  if (eps < 1e-7 || eps > 1e-3)
    throw std::invalid_argument("grad_check: eps outside [1e-7, 1e-3]");
  store.zero_grads();
  Tensor loss = scalar_fn();
  if (!std::isfinite(loss.item()))
    throw std::runtime_error("grad_check: non-finite loss at base point");
  loss.backward();
  std::map<std::string, std::vector<double>> analytic;
  for (auto& [name, t] : store.params) analytic[name] = t.grad();

  GradCheckReport report;
  for (auto& [name, t] : store.params) {
    GradCheckEntry entry;
    entry.name = name;
    std::vector<size_t> coords;
    if (max_coords_per_param == 0 || t.numel() <= max_coords_per_param) {
      coords.resize(t.numel());
      for (size_t i = 0; i < t.numel(); ++i) coords[i] = i;
    } else {
      Rng rng(mix_seed(seed, std::hash<std::string>{}(name)));
      for (size_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(static_cast<size_t>(
            rng.next_int(0, static_cast<int64_t>(t.numel()) - 1)));
    }
    for (size_t i : coords) {
      double saved = t.data()[i];
      t.data()[i] = saved + eps;
      double fp = scalar_fn().item();
      t.data()[i] = saved - eps;
      double fm = scalar_fn().item();
      t.data()[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: non-finite value perturbing " +
                                 name + "[" + std::to_string(i) + "]");
      double g_fd = (fp - fm) / (2.0 * eps);
      double g_an = analytic[name][i];
      double denom = std::max({std::abs(g_an), std::abs(g_fd), 1e-12});
      double rel = std::abs(g_an - g_fd) / denom;
      // below the FD rounding floor (~1e-16 / 2eps) the difference is
      // indistinguishable from noise
      if (std::abs(g_an - g_fd) <= 1e-9) rel = 0.0;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      entry.coords_checked++;
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace linedoc
