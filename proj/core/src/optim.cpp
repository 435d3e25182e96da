#include "vigil/optim.hpp"

#include <cmath>

namespace vigil {

void AdamW::step(const ParamRefs& params, const std::map<std::string, Matrix>& grads,
                 double lr_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double lr = lr_ * lr_scale;
  for (const auto& [name, w] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Matrix& g = git->second;
    require_same_shape(*w, g, "adamw grad");
    auto [it, fresh] = state_.try_emplace(name, std::make_pair(Matrix(w->rows(), w->cols()),
                                                               Matrix(w->rows(), w->cols())));
    Matrix& m = it->second.first;
    Matrix& v = it->second.second;
    for (int i = 0; i < w->rows(); ++i) {
      for (int j = 0; j < w->cols(); ++j) {
        const double gij = g(i, j);
        m(i, j) = beta1_ * m(i, j) + (1.0 - beta1_) * gij;
        v(i, j) = beta2_ * v(i, j) + (1.0 - beta2_) * gij * gij;
        const double mhat = m(i, j) / bc1;
        const double vhat = v(i, j) / bc2;
        double& wij = (*w)(i, j);
        wij -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * wij);
      }
    }
  }
}

double cosine_decay(std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 1) return 1.0;
  const double x = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, std::max(0.0, x))));
}

}  // namespace vigil
