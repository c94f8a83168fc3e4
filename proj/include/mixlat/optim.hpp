#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mixlat/autodiff.hpp"
#include "mixlat/error.hpp"

namespace mixlat {

/// Adam with bias correction. Moment buffers are aligned with the order of the
/// parameter list passed to step(); the list must not change between calls.
template <class T>
class Adam {
 public:
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  Adam() = default;
  explicit Adam(double lr, double b1 = 0.5, double b2 = 0.999) : learning_rate(lr), beta1(b1), beta2(b2) {}

  void step(std::vector<Var<T>>& params) {
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.emplace_back(p.size(), T(0));
        second_.emplace_back(p.size(), T(0));
      }
    }
    require(first_.size() == params.size(), "Adam: parameter list changed between steps");
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
    const T step_size = static_cast<T>(learning_rate * std::sqrt(c2) / c1);
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2), eps = static_cast<T>(epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      const auto g = p.grad();
      auto v = p.mutable_value();
      auto& m1 = first_[i];
      auto& m2 = second_[i];
      require(m1.size() == v.size(), "Adam: parameter size changed");
      for (std::size_t j = 0; j < v.size(); ++j) {
        m1[j] = b1 * m1[j] + (T(1) - b1) * g[j];
        m2[j] = b2 * m2[j] + (T(1) - b2) * g[j] * g[j];
        v[j] -= step_size * m1[j] / (std::sqrt(m2[j]) + eps * static_cast<T>(std::sqrt(c2)));
      }
    }
  }

  long steps() const { return steps_; }
  const std::vector<std::vector<T>>& first_moments() const { return first_; }
  const std::vector<std::vector<T>>& second_moments() const { return second_; }
  void restore(long steps, std::vector<std::vector<T>> first, std::vector<std::vector<T>> second) {
    require(first.size() == second.size(), "Adam::restore: moment lists differ in length");
    steps_ = steps;
    first_ = std::move(first);
    second_ = std::move(second);
  }

 private:
  long steps_ = 0;
  std::vector<std::vector<T>> first_, second_;
};

}  // namespace mixlat
