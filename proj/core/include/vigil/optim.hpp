#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vigil/matrix.hpp"

namespace vigil {

// Named reference to a trainable matrix living inside some module.
using ParamRefs = std::vector<std::pair<std::string, Matrix*>>;

// Decoupled-weight-decay adaptive moment optimizer. State is keyed by
// parameter name, so the same instance must see a stable registry.
class AdamW {
 public:
  explicit AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                 double weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // Applies one update. lr_scale multiplies the base rate (schedule hook).
  void step(const ParamRefs& params, const std::map<std::string, Matrix>& grads,
            double lr_scale = 1.0);

  std::int64_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> state_;  // name -> (m, v)
};

// Cosine annealing from 1 down to ~0 over total_steps.
double cosine_decay(std::int64_t step, std::int64_t total_steps);

}  // namespace vigil
