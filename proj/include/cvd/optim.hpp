#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cvd/config.hpp"
#include "cvd/model.hpp"

namespace cvd {

// SGD or Adam (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) over a Parameters map.
// Gradients are read as-is; zeroing them between steps is the caller's job.
class Optimizer {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  Optimizer(OptimizerKind kind, double learning_rate);

  void step(Parameters& params);

  [[nodiscard]] OptimizerKind kind() const noexcept { return kind_; }
  [[nodiscard]] std::uint64_t steps_taken() const noexcept { return t_; }

  // Moment buffers as named tensors ("adam_m.<param>", "adam_v.<param>").
  [[nodiscard]] std::map<std::string, Tensor> state() const;
  void load_state(const std::map<std::string, Tensor>& state, std::uint64_t steps_taken);

 private:
  OptimizerKind kind_;
  double lr_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace cvd
