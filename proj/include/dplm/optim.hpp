#pragma once

#include <vector>

#include "dplm/tensor.hpp"

namespace dplm {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay (Loshchilov & Hutter).
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options);

  // Applies one update from the accumulated grads. Parameters without a grad are skipped.
  void step();
  void zero_grad();

  const AdamWOptions& options() const { return options_; }
  long steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamWOptions options_;
  long t_ = 0;
};

}  // namespace dplm
