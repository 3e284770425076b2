#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cvd {

using Shape = std::vector<std::size_t>;

[[nodiscard]] std::size_t numel(const Shape& shape);
[[nodiscard]] std::string to_string(const Shape& shape);

class Graph;

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  std::optional<std::size_t> tape_id;
  std::uint64_t graph_uid = 0;
};

}  // namespace detail

// Dense row-major array of doubles. A Tensor is a shared handle: copies alias
// the same storage, which is how parameters receive gradients from a tape.
// Use clone() for an independent copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  [[nodiscard]] const Shape& shape() const noexcept { return impl_->shape; }
  [[nodiscard]] std::size_t dim(std::size_t axis) const;
  [[nodiscard]] std::size_t rank() const noexcept { return impl_->shape.size(); }
  [[nodiscard]] std::size_t size() const noexcept { return impl_->data.size(); }

  [[nodiscard]] std::span<const double> data() const noexcept { return impl_->data; }
  [[nodiscard]] std::span<double> mutable_data() noexcept { return impl_->data; }
  [[nodiscard]] double operator[](std::size_t i) const { return impl_->data[i]; }
  [[nodiscard]] double item() const;

  [[nodiscard]] bool requires_grad() const noexcept { return impl_->requires_grad; }
  void set_requires_grad(bool value) noexcept { impl_->requires_grad = value; }

  [[nodiscard]] bool has_grad() const noexcept { return !impl_->grad.empty(); }
  // Gradient values; all zeros when no backward pass has reached this tensor.
  [[nodiscard]] std::vector<double> grad() const;
  [[nodiscard]] std::span<double> mutable_grad();
  void zero_grad();

  [[nodiscard]] std::optional<std::size_t> tape_id() const noexcept { return impl_->tape_id; }

  [[nodiscard]] Tensor clone() const;
  [[nodiscard]] Tensor detach() const { return clone(); }
  [[nodiscard]] bool aliases(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorStorage> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorStorage> impl_;

  friend class Graph;
};

}  // namespace cvd
