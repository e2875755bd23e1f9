#include "dyad/diff/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dyad::diff {

double warmup_lr(double peak, std::int64_t warmup, std::int64_t step) {
  if (warmup <= 0) return peak;
  return peak * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup));
}

double scheduled_lr(const AdamWConfig& c, std::int64_t step) {
  if (c.decay_steps <= c.warmup_steps || step <= c.warmup_steps) return warmup_lr(c.peak_lr, c.warmup_steps, step);
  const double u = std::min(1.0, static_cast<double>(step - c.warmup_steps) /
                                     static_cast<double>(c.decay_steps - c.warmup_steps));
  const double lo = c.final_lr_ratio;
  return c.peak_lr * (lo + (1.0 - lo) * 0.5 * (1.0 + std::cos(std::numbers::pi * u)));
}

template <typename T>
AdamW<T>::AdamW(ParamStore<T>& store, AdamWConfig config) : store_(store), config_(config) {
  for (const auto& p : store_.all()) {
    m_.emplace_back(p->value.rows(), p->value.cols());
    v_.emplace_back(p->value.rows(), p->value.cols());
  }
}

template <typename T>
double AdamW<T>::step() {
  ++step_;
  const double lr = scheduled_lr(config_, step_);
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const auto params = store_.all();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
      v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      const double update = mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * p.value[i];
      p.value[i] = static_cast<T>(p.value[i] - lr * update);
    }
  }
  return lr;
}

template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  double sq = 0;
  for (const auto& p : store.all())
    for (T g : p->grad.values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T f = static_cast<T>(max_norm / norm);
    for (const auto& p : store.all())
      for (T& g : p->grad.values()) g *= f;
  }
  return norm;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm<float>(ParamStore<float>&, double);
template double clip_grad_norm<double>(ParamStore<double>&, double);

}  // namespace dyad::diff
