#pragma once

#include <cstdint>
#include <vector>

#include "dyad/diff/layers.hpp"

namespace dyad::diff {

struct AdamWConfig {
  double peak_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::int64_t warmup_steps = 1000;
  /// Cosine decay from peak_lr to final_lr_ratio * peak_lr, ending at this
  /// step; 0 keeps the rate constant after warmup.
  std::int64_t decay_steps = 0;
  double final_lr_ratio = 0.1;
};

/// Linear warmup to `peak` over `warmup` steps, constant afterwards.
double warmup_lr(double peak, std::int64_t warmup, std::int64_t step);
/// The schedule configured by `c` at `step` (1-based).
double scheduled_lr(const AdamWConfig& c, std::int64_t step);

/// Decoupled-weight-decay Adam over every parameter of a store.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, AdamWConfig config);

  /// One update using the gradients currently held by the parameters.
  /// Returns the learning rate that was applied.
  double step();
  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }
  const AdamWConfig& config() const { return config_; }

  std::vector<NdArray<T>>& first_moments() { return m_; }
  std::vector<NdArray<T>>& second_moments() { return v_; }

 private:
  ParamStore<T>& store_;
  AdamWConfig config_;
  std::int64_t step_ = 0;
  std::vector<NdArray<T>> m_, v_;
};

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm);

}  // namespace dyad::diff
