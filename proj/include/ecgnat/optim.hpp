#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ecgnat/tensor.hpp"
#include "ecgnat/threadpool.hpp"

// Decoupled-weight-decay Adam and the cosine learning-rate schedule. Both
// carry explicitly serializable state so a resumed run continues the exact
// trajectory.

namespace ecgnat {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 4e-4;

  void validate() const {
    check(lr > 0, "adamw: lr must be positive");
    check(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "adamw: betas must be in [0,1)");
    check(eps > 0, "adamw: eps must be positive");
    check(weight_decay >= 0, "adamw: weight_decay must be >= 0");
  }
};

// Holds Tensor handles (shared storage with the model); step() consumes the
// gradients currently on them. Weight decay is decoupled: p -= lr*wd*p
// before the moment update touches p.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor<T>>> params, AdamWConfig cfg = {}) : cfg_(cfg) {
    cfg_.validate();
    for (auto& [name, t] : params) {
      names_.push_back(name);
      params_.push_back(t);
      m_.emplace_back(static_cast<size_t>(t.numel()), T(0));
      v_.emplace_back(static_cast<size_t>(t.numel()), T(0));
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  int64_t step_count() const { return t_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

  void set_state(std::vector<std::vector<T>> m, std::vector<std::vector<T>> v, int64_t step) {
    check(m.size() == m_.size() && v.size() == v_.size(), "adamw: state slot count mismatch");
    for (size_t i = 0; i < m.size(); ++i)
      check(m[i].size() == m_[i].size() && v[i].size() == v_[i].size(),
            "adamw: state size mismatch for " + names_[i]);
    check(step >= 0, "adamw: negative step counter");
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = step;
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  // one update at learning rate lr; parameters without a gradient buffer
  // (never touched by backward) are left alone except for decay
  void step(double lr) {
    check(lr >= 0, "adamw: negative learning rate");
    ++t_;
    const T bc1 = T(1) - T(std::pow(cfg_.beta1, double(t_)));
    const T bc2 = T(1) - T(std::pow(cfg_.beta2, double(t_)));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      const bool has_g = p.has_grad();
      T* pv = p.data();
      const T* gv = has_g ? p.grad().data() : nullptr;
      T* mv = m_[i].data();
      T* vv = v_[i].data();
      const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
      const T eps = T(cfg_.eps), wd = T(cfg_.weight_decay);
      const T lrT = T(lr);
      ThreadPool::parallel_for(p.numel(), [&](int64_t s, int64_t e) {
        for (int64_t j = s; j < e; ++j) {
          pv[j] -= lrT * wd * pv[j];
          if (!has_g) continue;
          const T g = gv[j];
          mv[j] = b1 * mv[j] + (T(1) - b1) * g;
          vv[j] = b2 * vv[j] + (T(1) - b2) * g * g;
          const T mhat = mv[j] / bc1;
          const T vhat = vv[j] / bc2;
          pv[j] -= lrT * mhat / (std::sqrt(vhat) + eps);
        }
      });
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  int64_t t_ = 0;
};

// lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2,
// advanced once per optimizer step and clamped at the floor afterwards
class CosineSchedule {
 public:
  CosineSchedule(double lr_max, double lr_min, int64_t total_steps)
      : lr_max_(lr_max), lr_min_(lr_min), total_(total_steps) {
    check(lr_max > 0 && lr_min >= 0 && lr_min <= lr_max, "cosine schedule: need 0 <= lr_min <= lr_max");
    check(total_steps >= 1, "cosine schedule: total_steps must be >= 1");
  }

  double lr() const {
    if (t_ >= total_) return lr_min_;
    const double frac = double(t_) / double(total_);
    return lr_min_ + (lr_max_ - lr_min_) * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
  }

  void advance() { ++t_; }

  int64_t step() const { return t_; }
  int64_t total_steps() const { return total_; }
  double lr_max() const { return lr_max_; }
  double lr_min() const { return lr_min_; }
  void set_step(int64_t t) {
    check(t >= 0, "cosine schedule: negative step");
    t_ = t;
  }

 private:
  double lr_max_, lr_min_;
  int64_t total_;
  int64_t t_ = 0;
};

}  // namespace ecgnat
