#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "uvlm/common.hpp"
#include "uvlm/tensor.hpp"

namespace uvlm {

// AdamW with decoupled weight decay. Parameters are registered once, in a
// fixed order that also defines the serialized moment layout. Frozen
// parameters (requires_grad == false) are skipped entirely; a parameter whose
// gradient buffer is empty is treated as having zero gradient, so decay still
// applies to it.
template <class Real>
class AdamWT {
 public:
  struct Config {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit AdamWT(std::vector<TensorT<Real>> params, Config cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    slots_.reserve(params_.size());
    for (const auto& p : params_) {
      Slot s;
      s.m.assign(p.data().size(), Real(0));
      s.v.assign(p.data().size(), Real(0));
      slots_.push_back(std::move(s));
    }
  }

  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi];
      if (!p.requires_grad()) continue;
      auto& data = p.data();
      auto& slot = slots_[pi];
      const bool has_grad = p.has_grad();
      if (cfg_.weight_decay != 0.0) {
        Real keep = Real(1.0 - lr * cfg_.weight_decay);
        for (Real& w : data) w *= keep;
      }
      for (size_t i = 0; i < data.size(); ++i) {
        double g = has_grad ? double(p.grad()[i]) : 0.0;
        double m = cfg_.beta1 * double(slot.m[i]) + (1.0 - cfg_.beta1) * g;
        double v = cfg_.beta2 * double(slot.v[i]) + (1.0 - cfg_.beta2) * g * g;
        slot.m[i] = Real(m);
        slot.v[i] = Real(v);
        double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        data[i] = Real(double(data[i]) - update);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  int64_t step_count() const { return t_; }
  const std::vector<TensorT<Real>>& params() const { return params_; }
  const Config& config() const { return cfg_; }

  // Moment layout: for each parameter in registration order, its m values
  // then its v values.
  std::vector<Real> moments_blob() const {
    std::vector<Real> out;
    for (const auto& s : slots_) {
      out.insert(out.end(), s.m.begin(), s.m.end());
      out.insert(out.end(), s.v.begin(), s.v.end());
    }
    return out;
  }

  void restore_moments(const std::vector<Real>& blob, int64_t steps) {
    size_t need = 0;
    for (const auto& s : slots_) need += 2 * s.m.size();
    if (blob.size() != need)
      throw InvalidArgument("optimizer state size mismatch: expected " + std::to_string(need) +
                            " values, got " + std::to_string(blob.size()));
    size_t off = 0;
    for (auto& s : slots_) {
      std::copy_n(blob.begin() + long(off), s.m.size(), s.m.begin());
      off += s.m.size();
      std::copy_n(blob.begin() + long(off), s.v.size(), s.v.begin());
      off += s.v.size();
    }
    t_ = steps;
  }

 private:
  struct Slot {
    std::vector<Real> m;
    std::vector<Real> v;
  };

  std::vector<TensorT<Real>> params_;
  std::vector<Slot> slots_;
  Config cfg_;
  int64_t t_ = 0;
};

using AdamW = AdamWT<float>;

// Linear warmup into a cosine decay. Steps count from zero; the rate reaches
// base_lr at the end of warmup and decays to zero over the remaining span.
struct Schedule {
  double base_lr = 1e-3;
  int total_steps = 1;
  double warmup_ratio = 0.0;

  int warmup_steps() const { return int(std::lround(warmup_ratio * double(total_steps))); }

  double lr_at(int step) const {
    if (total_steps <= 0) throw InvalidArgument("schedule: total_steps must be positive");
    int w = warmup_steps();
    if (w >= total_steps)
      throw InvalidArgument("schedule: warmup spans all " + std::to_string(total_steps) + " steps");
    if (step < 0 || step > total_steps)
      throw InvalidArgument("schedule: step " + std::to_string(step) + " outside [0," +
                            std::to_string(total_steps) + "]");
    if (step == total_steps) return 0.0;
    if (step < w) return base_lr * double(step) / double(w);
    double progress = double(step - w) / double(total_steps - w);
    return base_lr * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
  }
};

}  // namespace uvlm
