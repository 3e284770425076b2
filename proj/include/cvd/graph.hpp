#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cvd/tensor.hpp"

namespace cvd {

enum class ElementwiseOp { add, sub, mul, div, neg, exp, log, sqrt, square, relu };

// Random draws made by stochastic ops, in call order. A graph built in replay
// mode serves draws from a log instead of its generator, so repeated
// evaluations of a stochastic function see identical randomness.
struct DrawLog {
  std::vector<std::vector<double>> reals;
  std::vector<std::vector<std::size_t>> permutations;
};

struct SortResult {
  Tensor values;
  // For each output slot along the last axis, the input index it came from.
  std::vector<std::size_t> permutation;
};

// Append-only tape of recorded operations. Ops always compute forward values;
// a node (and its backward rule) is recorded only when an operand requires
// gradients. Insertion order is a topological order.
class Graph {
 public:
  explicit Graph(std::uint64_t seed = 0);
  Graph(std::uint64_t seed, DrawLog replay);

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  [[nodiscard]] std::size_t node_count() const noexcept { return nodes_.size(); }

  // With gradients disabled nothing is recorded; used for inference.
  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  [[nodiscard]] bool grad_enabled() const noexcept { return grad_enabled_; }

  // Elementwise arithmetic. Binary ops take equal shapes or a one-element operand.
  Tensor elementwise(ElementwiseOp op, const Tensor& a);
  Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
  Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
  Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }
  Tensor div(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::div, a, b); }
  Tensor neg(const Tensor& a) { return elementwise(ElementwiseOp::neg, a); }
  Tensor exp(const Tensor& a) { return elementwise(ElementwiseOp::exp, a); }
  Tensor log(const Tensor& a) { return elementwise(ElementwiseOp::log, a); }
  Tensor sqrt(const Tensor& a) { return elementwise(ElementwiseOp::sqrt, a); }
  Tensor square(const Tensor& a) { return elementwise(ElementwiseOp::square, a); }
  Tensor relu(const Tensor& a) { return elementwise(ElementwiseOp::relu, a); }
  Tensor sigmoid(const Tensor& a);
  Tensor scale(const Tensor& a, double factor);

  // Reductions.
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);

  // Linear algebra on rank-2 tensors.
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  Tensor diagonal(const Tensor& a);
  // Row-wise log(sum(exp(row))) with max subtraction; [R x C] -> [R].
  Tensor logsumexp_rows(const Tensor& a);
  Tensor l2_normalize_rows(const Tensor& a);
  Tensor take_rows(const Tensor& a, std::span<const std::size_t> rows);
  Tensor concat_cols(const Tensor& a, const Tensor& b);

  // Image ops on [B x C x H x W].
  Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad);
  Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
  Tensor upsample_nearest2x(const Tensor& x);
  Tensor concat_channels(const Tensor& a, const Tensor& b);
  Tensor global_avg_pool(const Tensor& x);

  Tensor reshape(const Tensor& a, Shape shape);

  // Stable ascending sort along the last axis.
  SortResult sort_last(const Tensor& x);

  // Stochastic draws, logged (or replayed) for gradient checking.
  std::vector<double> draw_normal(std::size_t count);
  std::vector<std::size_t> draw_derangement(std::size_t n);
  [[nodiscard]] const DrawLog& draws() const noexcept { return log_; }

  // Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
  void backward(const Tensor& loss);

 private:
  struct Node {
    std::string kind;
    std::shared_ptr<detail::TensorStorage> output;
    std::function<void()> backward;
  };

  bool any_requires_grad(std::initializer_list<const Tensor*> operands);
  Tensor make_result(Shape shape, std::vector<double> data, bool tracked);
  void record(const std::string& kind, const Tensor& output, std::function<void()> backward);

  std::uint64_t uid_;
  bool grad_enabled_ = true;
  std::vector<Node> nodes_;
  std::mt19937_64 rng_;
  DrawLog log_;
  std::optional<DrawLog> replay_;
  std::size_t replay_real_ = 0;
  std::size_t replay_perm_ = 0;
};

// Maximum over coordinates of |analytic - central difference| / max(1, |analytic|).
// `loss` builds a scalar on the graph it is handed; the first evaluation records
// its random draws and every perturbed evaluation replays them.
double grad_check(const std::function<Tensor(Graph&)>& loss, std::span<Tensor> params,
                  double step = 1e-5, std::uint64_t seed = 0);

}  // namespace cvd
