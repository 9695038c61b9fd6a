#include "cadenza/core/optim.hpp"

#include <algorithm>
#include <cmath>

namespace cadenza {

Adam::Adam(std::vector<ag::Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.rows(), p.cols());
    v_.emplace_back(p.rows(), p.cols());
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& w = params_[i].mutable_value().data;
    const auto& g = params_[i].grad().data;
    auto& m = m_[i].data;
    auto& v = v_[i].data;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      w[j] -= cfg_.lr * (update + cfg_.weight_decay * w[j]);
    }
  }
}

void sgd_step(std::vector<ag::Var>& params, double lr) {
  for (auto& p : params) {
    auto& w = p.mutable_value().data;
    const auto& g = p.grad().data;
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
  }
}

}  // namespace cadenza
