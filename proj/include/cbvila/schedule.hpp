#pragma once

#include <cmath>

#include "cbvila/config.hpp"

namespace cbvila {

/// Which loss components are active at a given step. MIM and MLM burn in
/// only after the codebook warmup; the boundary step itself is active.
struct ObjectiveGate {
  bool itm = false;
  bool mlm = false;
  bool mim = false;
  bool pixel = false;  // pixel + alignment + commitment travel together
};

inline ObjectiveGate objective_gate(long step, const TrainConfig& cfg) {
  ObjectiveGate g;
  const bool warm = step < cfg.warmup_iters;
  g.itm = cfg.enable_itm;
  g.pixel = cfg.enable_pixel;
  g.mlm = cfg.enable_mlm && !warm;
  g.mim = cfg.enable_mim && !warm;
  return g;
}

/// Linear warmup from init_lr to peak_lr over [0, warmup_iters], then cosine
/// decay from peak_lr to min_lr over [warmup_iters, total_steps].
inline double lr_at(long step, const TrainConfig& cfg, long total_steps) {
  const long warm = cfg.warmup_iters;
  if (step <= warm)
    return cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * static_cast<double>(step) /
                             static_cast<double>(warm);
  if (total_steps <= warm) return cfg.peak_lr;
  double t = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  if (t > 1.0) t = 1.0;
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

/// Exponential anneal of the gumbel temperature across the run.
inline double gumbel_tau_at(long step, const TrainConfig& cfg, long total_steps) {
  if (total_steps <= 0) return cfg.gumbel_tau0;
  double t = static_cast<double>(step) / static_cast<double>(total_steps);
  if (t > 1.0) t = 1.0;
  return cfg.gumbel_tau0 * std::pow(cfg.gumbel_tau_end / cfg.gumbel_tau0, t);
}

/// Pure function of (config, step): no hidden state.
struct ScheduleState {
  long global_step = 0;
  double current_lr = 0.0;
  double gumbel_temperature = 0.0;
  ObjectiveGate active;
};

inline ScheduleState schedule_at(long step, const TrainConfig& cfg) {
  ScheduleState s;
  s.global_step = step;
  const long total = cfg.total_steps();
  s.current_lr = lr_at(step, cfg, total);
  s.gumbel_temperature = gumbel_tau_at(step, cfg, total);
  s.active = objective_gate(step, cfg);
  return s;
}

}  // namespace cbvila
