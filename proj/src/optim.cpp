#include "fgl/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fgl {

Adam::Adam(AdamConfig config) : config_(config) {
  if (!(config.lr > 0.0)) throw std::invalid_argument("adam: lr must be > 0");
  if (!(config.beta1 >= 0.0 && config.beta1 < 1.0))
    throw std::invalid_argument("adam: beta1 must be in [0, 1)");
  if (!(config.beta2 >= 0.0 && config.beta2 < 1.0))
    throw std::invalid_argument("adam: beta2 must be in [0, 1)");
  if (!(config.eps > 0.0)) throw std::invalid_argument("adam: eps must be > 0");
}

void Adam::step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("adam: gradient for unknown tensor " + name);
    if (it->second.shape != g.shape)
      throw std::invalid_argument("adam: gradient shape mismatch for " + name);
  }
  t_++;
  const double c1 = 1.0 - std::pow(config_.beta1, double(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, double(t_));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto mi = m_.find(name);
    if (mi == m_.end()) {
      m_.emplace(name, Tensor(g.shape));
      v_.emplace(name, Tensor(g.shape));
      mi = m_.find(name);
    }
    Tensor& m = mi->second;
    Tensor& v = v_.at(name);
    for (int64_t k = 0; k < g.numel(); k++) {
      const double gk = g.data[size_t(k)];
      m.data[size_t(k)] = config_.beta1 * m.data[size_t(k)] + (1.0 - config_.beta1) * gk;
      v.data[size_t(k)] = config_.beta2 * v.data[size_t(k)] + (1.0 - config_.beta2) * gk * gk;
      const double mhat = m.data[size_t(k)] / c1;
      const double vhat = v.data[size_t(k)] / c2;
      p.data[size_t(k)] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace fgl
