#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "fgl/tensor.hpp"

namespace fgl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Plain Adam with bias correction. State is keyed by tensor name and created
// lazily; parameters without a gradient entry in a given step are untouched.
class Adam {
 public:
  explicit Adam(AdamConfig config);

  void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads);

  int64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace fgl
