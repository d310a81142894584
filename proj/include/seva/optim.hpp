#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "json.hpp"
#include "seva/parallel.hpp"
#include "seva/policy.hpp"

namespace seva {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamConfig, lr, beta1, beta2, eps, weight_decay)

// Adam over a policy's trainable parameters, flattened in declaration order.
class Adam {
public:
  Adam(AdamConfig cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(Policy& policy, std::span<const double> grad, double lr_scale = 1.0) {
    if (grad.size() != m_.size()) throw Error("adam: gradient size mismatch");
    ++t_;
    const double lr = cfg_.lr * lr_scale;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& p : policy.params()) {
      if (!p.trainable) continue;
      for (auto& x : p.value) {
        const double g = grad[k];
        m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * g;
        v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m_[k] / bc1, vhat = v_[k] / bc2;
        x -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * x);
        ++k;
      }
    }
  }

  long steps() const { return t_; }

private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

// Per-example loss/gradient evaluation with an order-fixed reduction, so the
// summed gradient does not depend on how many worker threads ran.
// loss_fn(bound, i) returns example i's scalar loss tensor.
template <class LossFn>
double batch_gradient(const Policy& policy, std::size_t n, std::size_t threads, LossFn&& loss_fn, std::vector<double>& grad,
                      std::vector<double>* per_example_loss = nullptr) {
  const std::size_t dim = policy.trainable_count();
  std::vector<std::vector<double>> grads(n);
  std::vector<double> losses(n, 0.0);
  parallel_for(n, threads, [&](std::size_t i) {
    Bound b = policy.bind(true);
    Tensor loss = loss_fn(b, i);
    losses[i] = loss.item();
    std::vector<double> g;
    g.reserve(dim);
    if (loss.requires_grad()) loss.backward();
    for (std::size_t k = 0; k < b.size(); ++k) {
      if (!policy.params()[k].trainable) continue;
      auto gk = b[k].grad();
      g.insert(g.end(), gk.begin(), gk.end());
    }
    grads[i] = std::move(g);
  });
  grad.assign(dim, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += losses[i];
    for (std::size_t k = 0; k < dim; ++k) grad[k] += grads[i][k];
  }
  if (per_example_loss) *per_example_loss = std::move(losses);
  return total;
}

inline double clip_grad_norm(std::vector<double>& grad, double max_norm) {
  double s = 0.0;
  for (double g : grad) s += g * g;
  const double norm = std::sqrt(s);
  if (max_norm > 0.0 && norm > max_norm)
    for (auto& g : grad) g *= max_norm / norm;
  return norm;
}

}  // namespace seva
