#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbrain/autograd.hpp"

namespace mbrain {

struct AdamSettings {
  double learning_rate = 2e-4;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with L2 weight decay folded into the gradient. Parameters are
/// registered in groups so the trunk and a downstream head can move at
/// different learning rates.
class Adam {
 public:
  void add_group(std::vector<ag::Var> params, AdamSettings settings) {
    Group g;
    g.settings = settings;
    for (auto& p : params) {
      if (!p->requires_grad) throw std::invalid_argument("Adam: parameter does not require grad");
      g.m.emplace_back(p->rows(), p->cols());
      g.v.emplace_back(p->rows(), p->cols());
      g.params.push_back(std::move(p));
    }
    groups_.push_back(std::move(g));
  }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& p : g.params) p->zero_grad();
  }

  void step() {
    ++step_;
    for (auto& g : groups_) {
      const auto& s = g.settings;
      const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(step_));
      const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(step_));
      for (std::size_t k = 0; k < g.params.size(); ++k) {
        Node& p = *g.params[k];
        p.ensure_grad();
        auto& m = g.m[k].data;
        auto& v = g.v[k].data;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
          const double grad = p.grad.data[i] + s.weight_decay * p.value.data[i];
          if (!std::isfinite(grad)) throw std::runtime_error("Adam: non-finite gradient");
          m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * grad;
          v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * grad * grad;
          p.value.data[i] -= s.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + s.eps);
        }
      }
    }
  }

  std::size_t steps() const { return step_; }

  void set_learning_rate(double lr) {
    for (auto& g : groups_) g.settings.learning_rate = lr;
  }

 private:
  using Node = ag::Node;
  struct Group {
    AdamSettings settings;
    std::vector<ag::Var> params;
    std::vector<Matrix> m, v;
  };
  std::vector<Group> groups_;
  std::size_t step_ = 0;
};

}  // namespace mbrain
