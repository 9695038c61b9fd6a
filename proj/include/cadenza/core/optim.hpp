#pragma once

#include <cstddef>
#include <vector>

#include "cadenza/core/autograd.hpp"

namespace cadenza {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

class Adam {
 public:
  Adam(std::vector<ag::Var> params, AdamConfig cfg);

  void zero_grad();
  void step();
  std::size_t steps() const { return t_; }
  AdamConfig& config() { return cfg_; }

 private:
  std::vector<ag::Var> params_;
  std::vector<Mat> m_, v_;
  AdamConfig cfg_;
  std::size_t t_ = 0;
};

// Plain gradient descent, used where a single exact step is asserted on.
void sgd_step(std::vector<ag::Var>& params, double lr);

}  // namespace cadenza
