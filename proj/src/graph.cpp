#include "cvd/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>

#include "cvd/error.hpp"

namespace cvd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Eigen picks vectorised or scalar kernels by buffer address, and the two
// round differently under FMA. Products therefore run on Eigen-owned
// (aligned) copies so results never depend on where std::vector put the data.
RowMat aligned(const double* data, std::size_t rows, std::size_t cols) {
  return ConstMatMap(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void accumulate(std::vector<double>& grad, const RowMat& delta) {
  const double* d = delta.data();
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += d[i];
}

std::atomic<std::uint64_t> next_graph_uid{1};

using Storage = std::shared_ptr<detail::TensorStorage>;

std::vector<double>& grad_of(detail::TensorStorage& s) {
  if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0);
  return s.grad;
}

const char* op_name(ElementwiseOp op) {
  switch (op) {
    case ElementwiseOp::add: return "add";
    case ElementwiseOp::sub: return "sub";
    case ElementwiseOp::mul: return "mul";
    case ElementwiseOp::div: return "div";
    case ElementwiseOp::neg: return "neg";
    case ElementwiseOp::exp: return "exp";
    case ElementwiseOp::log: return "log";
    case ElementwiseOp::sqrt: return "sqrt";
    case ElementwiseOp::square: return "square";
    case ElementwiseOp::relu: return "relu";
  }
  return "?";
}

bool is_binary(ElementwiseOp op) {
  return op == ElementwiseOp::add || op == ElementwiseOp::sub || op == ElementwiseOp::mul ||
         op == ElementwiseOp::div;
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw Error("shape", std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                             to_string(t.shape()));
  }
}

}  // namespace

Graph::Graph(std::uint64_t seed) : uid_(next_graph_uid++), rng_(seed) {}

Graph::Graph(std::uint64_t seed, DrawLog replay) : Graph(seed) { replay_ = std::move(replay); }

bool Graph::any_requires_grad(std::initializer_list<const Tensor*> operands) {
  return grad_enabled_ && std::any_of(operands.begin(), operands.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Graph::make_result(Shape shape, std::vector<double> data, bool tracked) {
  for (double v : data) {
    if (!std::isfinite(v)) throw Error("overflow", "non-finite value produced by forward op");
  }
  Tensor out(std::move(shape), std::move(data), tracked);
  return out;
}

void Graph::record(const std::string& kind, const Tensor& output, std::function<void()> backward) {
  output.impl_->tape_id = nodes_.size();
  output.impl_->graph_uid = uid_;
  nodes_.push_back(Node{kind, output.impl_, std::move(backward)});
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor Graph::elementwise(ElementwiseOp op, const Tensor& a) {
  if (is_binary(op)) throw Error("shape", std::string(op_name(op)) + " needs two operands");
  const auto src = a.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double x = src[i];
    switch (op) {
      case ElementwiseOp::neg: out[i] = -x; break;
      case ElementwiseOp::exp: out[i] = std::exp(x); break;
      case ElementwiseOp::log:
        if (x <= 0.0) throw Error("domain", "log of non-positive value");
        out[i] = std::log(x);
        break;
      case ElementwiseOp::sqrt:
        if (x < 0.0) throw Error("domain", "sqrt of negative value");
        out[i] = std::sqrt(x);
        break;
      case ElementwiseOp::square: out[i] = x * x; break;
      case ElementwiseOp::relu: out[i] = x > 0.0 ? x : 0.0; break;
      default: break;
    }
  }
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(a.shape(), std::move(out), tracked);
  if (tracked) {
    record(op_name(op), result, [op, ai = a.impl_, oi = result.impl_] {
      const auto& g = oi->grad;
      auto& ga = grad_of(*ai);
      const auto& x = ai->data;
      const auto& y = oi->data;
      for (std::size_t i = 0; i < g.size(); ++i) {
        switch (op) {
          case ElementwiseOp::neg: ga[i] -= g[i]; break;
          case ElementwiseOp::exp: ga[i] += g[i] * y[i]; break;
          case ElementwiseOp::log: ga[i] += g[i] / x[i]; break;
          case ElementwiseOp::sqrt: ga[i] += y[i] > 0.0 ? g[i] / (2.0 * y[i]) : 0.0; break;
          case ElementwiseOp::square: ga[i] += 2.0 * x[i] * g[i]; break;
          case ElementwiseOp::relu: ga[i] += x[i] > 0.0 ? g[i] : 0.0; break;
          default: break;
        }
      }
    });
  }
  return result;
}

Tensor Graph::elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  if (!is_binary(op)) throw Error("shape", std::string(op_name(op)) + " takes one operand");
  const std::size_t na = a.size();
  const std::size_t nb = b.size();
  if (a.shape() != b.shape() && na != 1 && nb != 1) {
    throw Error("shape", std::string(op_name(op)) + " of " + to_string(a.shape()) + " and " +
                             to_string(b.shape()));
  }
  const Shape shape = na >= nb ? a.shape() : b.shape();
  const std::size_t n = std::max(na, nb);
  const auto xa = a.data();
  const auto xb = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = xa[na == 1 ? 0 : i];
    const double v = xb[nb == 1 ? 0 : i];
    switch (op) {
      case ElementwiseOp::add: out[i] = u + v; break;
      case ElementwiseOp::sub: out[i] = u - v; break;
      case ElementwiseOp::mul: out[i] = u * v; break;
      case ElementwiseOp::div:
        if (v == 0.0) throw Error("domain", "division by zero");
        out[i] = u / v;
        break;
      default: break;
    }
  }
  const bool tracked = any_requires_grad({&a, &b});
  Tensor result = make_result(shape, std::move(out), tracked);
  if (tracked) {
    record(op_name(op), result, [op, ai = a.impl_, bi = b.impl_, oi = result.impl_] {
      const auto& g = oi->grad;
      const std::size_t sa = ai->data.size();
      const std::size_t sb = bi->data.size();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = sa == 1 ? 0 : i;
        const std::size_t ib = sb == 1 ? 0 : i;
        const double u = ai->data[ia];
        const double v = bi->data[ib];
        double da = 0.0;
        double db = 0.0;
        switch (op) {
          case ElementwiseOp::add: da = g[i]; db = g[i]; break;
          case ElementwiseOp::sub: da = g[i]; db = -g[i]; break;
          case ElementwiseOp::mul: da = g[i] * v; db = g[i] * u; break;
          case ElementwiseOp::div: da = g[i] / v; db = -g[i] * u / (v * v); break;
          default: break;
        }
        if (ai->requires_grad) grad_of(*ai)[ia] += da;
        if (bi->requires_grad) grad_of(*bi)[ib] += db;
      }
    });
  }
  return result;
}

Tensor Graph::sigmoid(const Tensor& a) {
  const auto src = a.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double x = src[i];
    if (x >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(a.shape(), std::move(out), tracked);
  if (tracked) {
    record("sigmoid", result, [ai = a.impl_, oi = result.impl_] {
      auto& ga = grad_of(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double y = oi->data[i];
        ga[i] += oi->grad[i] * y * (1.0 - y);
      }
    });
  }
  return result;
}

Tensor Graph::scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(a.shape(), std::move(out), tracked);
  if (tracked) {
    record("scale", result, [factor, ai = a.impl_, oi = result.impl_] {
      auto& ga = grad_of(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * oi->grad[i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor Graph::sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(Shape{1}, {total}, tracked);
  if (tracked) {
    record("sum", result, [ai = a.impl_, oi = result.impl_] {
      auto& ga = grad_of(*ai);
      const double g = oi->grad[0];
      for (auto& v : ga) v += g;
    });
  }
  return result;
}

Tensor Graph::mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw Error("shape", "matmul of " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const RowMat prod = aligned(a.data().data(), m, k) * aligned(b.data().data(), k, n);
  std::vector<double> out(prod.data(), prod.data() + m * n);
  const bool tracked = any_requires_grad({&a, &b});
  Tensor result = make_result(Shape{m, n}, std::move(out), tracked);
  if (tracked) {
    record("matmul", result, [m, k, n, ai = a.impl_, bi = b.impl_, oi = result.impl_] {
      const RowMat g = aligned(oi->grad.data(), m, n);
      if (ai->requires_grad) accumulate(grad_of(*ai), g * aligned(bi->data.data(), k, n).transpose());
      if (bi->requires_grad) accumulate(grad_of(*bi), aligned(ai->data.data(), m, k).transpose() * g);
    });
  }
  return result;
}

Tensor Graph::transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(Shape{c, r}, std::move(out), tracked);
  if (tracked) {
    record("transpose", result, [r, c, ai = a.impl_, oi = result.impl_] {
      auto& ga = grad_of(*ai);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += oi->grad[j * r + i];
    });
  }
  return result;
}

Tensor Graph::diagonal(const Tensor& a) {
  require_rank(a, 2, "diagonal");
  const auto n = a.dim(0);
  if (a.dim(1) != n) throw Error("shape", "diagonal of non-square " + to_string(a.shape()));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i * n + i];
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(Shape{n}, std::move(out), tracked);
  if (tracked) {
    record("diagonal", result, [n, ai = a.impl_, oi = result.impl_] {
      auto& ga = grad_of(*ai);
      for (std::size_t i = 0; i < n; ++i) ga[i * n + i] += oi->grad[i];
    });
  }
  return result;
}

Tensor Graph::logsumexp_rows(const Tensor& a) {
  require_rank(a, 2, "logsumexp_rows");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r);
  std::vector<double> softmax(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = a.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      softmax[i * c + j] = std::exp(row[j] - mx);
      s += softmax[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) softmax[i * c + j] /= s;
    out[i] = mx + std::log(s);
  }
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(Shape{r}, std::move(out), tracked);
  if (tracked) {
    record("logsumexp_rows", result, [r, c, softmax = std::move(softmax), ai = a.impl_, oi = result.impl_] {
      auto& ga = grad_of(*ai);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += oi->grad[i] * softmax[i * c + j];
    });
  }
  return result;
}

Tensor Graph::l2_normalize_rows(const Tensor& a) {
  require_rank(a, 2, "l2_normalize_rows");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += a[i * c + j] * a[i * c + j];
    norms[i] = std::sqrt(s);
    if (!(norms[i] > 0.0)) throw Error("degenerate", "zero-norm row " + std::to_string(i));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] / norms[i];
  }
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(a.shape(), std::move(out), tracked);
  if (tracked) {
    record("l2_normalize_rows", result, [r, c, norms = std::move(norms), ai = a.impl_, oi = result.impl_] {
      auto& ga = grad_of(*ai);
      const auto& y = oi->data;
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          ga[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
        }
      }
    });
  }
  return result;
}

Tensor Graph::take_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank(a, 2, "take_rows");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) throw Error("shape", "row index " + std::to_string(rows[i]) + " out of range");
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(Shape{rows.size(), c}, std::move(out), tracked);
  if (tracked) {
    record("take_rows", result,
           [c, idx = std::vector<std::size_t>(rows.begin(), rows.end()), ai = a.impl_, oi = result.impl_] {
             auto& ga = grad_of(*ai);
             for (std::size_t i = 0; i < idx.size(); ++i)
               for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += oi->grad[i * c + j];
           });
  }
  return result;
}

Tensor Graph::concat_cols(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  const auto r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  if (b.dim(0) != r) {
    throw Error("shape", "concat_cols of " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const auto c = ca + cb;
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(i * ca), ca,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
    std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(i * cb), cb,
                out.begin() + static_cast<std::ptrdiff_t>(i * c + ca));
  }
  const bool tracked = any_requires_grad({&a, &b});
  Tensor result = make_result(Shape{r, c}, std::move(out), tracked);
  if (tracked) {
    record("concat_cols", result, [r, ca, cb, ai = a.impl_, bi = b.impl_, oi = result.impl_] {
      const auto c = ca + cb;
      for (std::size_t i = 0; i < r; ++i) {
        if (ai->requires_grad) {
          auto& ga = grad_of(*ai);
          for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += oi->grad[i * c + j];
        }
        if (bi->requires_grad) {
          auto& gb = grad_of(*bi);
          for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += oi->grad[i * c + ca + j];
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Image ops

Tensor Graph::conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride < 1) throw Error("shape", "conv2d stride must be >= 1");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
  if (kernel.dim(1) != C) {
    throw Error("shape", "conv2d kernel " + to_string(kernel.shape()) + " vs input " + to_string(x.shape()));
  }
  if (H + 2 * pad < KH || W + 2 * pad < KW) {
    throw Error("shape", "conv2d output would be empty for input " + to_string(x.shape()));
  }
  const auto Ho = (H + 2 * pad - KH) / stride + 1;
  const auto Wo = (W + 2 * pad - KW) / stride + 1;
  const auto P = Ho * Wo;
  const auto rows = C * KH * KW;
  const auto cols_n = B * P;

  // im2col: [C*KH*KW] x [B*Ho*Wo]
  std::vector<double> cols(rows * cols_n, 0.0);
  const double* xs = x.data().data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < KH; ++ky) {
      for (std::size_t kx = 0; kx < KW; ++kx) {
        double* dst = cols.data() + ((c * KH + ky) * KW + kx) * cols_n;
        for (std::size_t b = 0; b < B; ++b) {
          const double* plane = xs + (b * C + c) * H * W;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              dst[b * P + oy * Wo + ox] = plane[iy * static_cast<std::ptrdiff_t>(W) + ix];
            }
          }
        }
      }
    }
  }

  RowMat prod = aligned(kernel.data().data(), O, rows) * aligned(cols.data(), rows, cols_n);
  std::vector<double> out(B * O * P);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(prod.data() + o * cols_n + b * P, P, out.data() + (b * O + o) * P);

  const bool tracked = any_requires_grad({&x, &kernel});
  Tensor result = make_result(Shape{B, O, Ho, Wo}, std::move(out), tracked);
  if (tracked) {
    record("conv2d", result,
           [=, cols = std::move(cols), xi = x.impl_, ki = kernel.impl_, oi = result.impl_] {
             RowMat g(O, cols_n);
             for (std::size_t o = 0; o < O; ++o)
               for (std::size_t b = 0; b < B; ++b)
                 std::copy_n(oi->grad.data() + (b * O + o) * P, P, g.data() + o * cols_n + b * P);
             if (ki->requires_grad) {
               accumulate(grad_of(*ki), g * aligned(cols.data(), rows, cols_n).transpose());
             }
             if (xi->requires_grad) {
               RowMat dcols = aligned(ki->data.data(), O, rows).transpose() * g;
               auto& gx = grad_of(*xi);
               for (std::size_t c = 0; c < C; ++c) {
                 for (std::size_t ky = 0; ky < KH; ++ky) {
                   for (std::size_t kx = 0; kx < KW; ++kx) {
                     const double* src = dcols.data() + ((c * KH + ky) * KW + kx) * cols_n;
                     for (std::size_t b = 0; b < B; ++b) {
                       double* plane = gx.data() + (b * C + c) * H * W;
                       for (std::size_t oy = 0; oy < Ho; ++oy) {
                         const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                         static_cast<std::ptrdiff_t>(pad);
                         if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                         for (std::size_t ox = 0; ox < Wo; ++ox) {
                           const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                           static_cast<std::ptrdiff_t>(pad);
                           if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                           plane[iy * static_cast<std::ptrdiff_t>(W) + ix] += src[b * P + oy * Wo + ox];
                         }
                       }
                     }
                   }
                 }
               }
             }
           });
  }
  return result;
}

Tensor Graph::add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 4, "add_channel_bias");
  const auto B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  if (bias.size() != C) {
    throw Error("shape", "bias of " + std::to_string(bias.size()) + " for " + std::to_string(C) + " channels");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) out[(b * C + c) * P + p] += bias[c];
  const bool tracked = any_requires_grad({&x, &bias});
  Tensor result = make_result(x.shape(), std::move(out), tracked);
  if (tracked) {
    record("add_channel_bias", result, [B, C, P, xi = x.impl_, bi = bias.impl_, oi = result.impl_] {
      if (xi->requires_grad) {
        auto& gx = grad_of(*xi);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& gb = grad_of(*bi);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) gb[c] += oi->grad[(b * C + c) * P + p];
      }
    });
  }
  return result;
}

Tensor Graph::upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto H2 = 2 * H, W2 = 2 * W;
  std::vector<double> out(B * C * H2 * W2);
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < H2; ++y)
      for (std::size_t xx = 0; xx < W2; ++xx)
        out[(bc * H2 + y) * W2 + xx] = x[(bc * H + y / 2) * W + xx / 2];
  const bool tracked = any_requires_grad({&x});
  Tensor result = make_result(Shape{B, C, H2, W2}, std::move(out), tracked);
  if (tracked) {
    record("upsample_nearest2x", result, [B, C, H, W, xi = x.impl_, oi = result.impl_] {
      auto& gx = grad_of(*xi);
      const auto H2 = 2 * H, W2 = 2 * W;
      for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t y = 0; y < H2; ++y)
          for (std::size_t xx = 0; xx < W2; ++xx)
            gx[(bc * H + y / 2) * W + xx / 2] += oi->grad[(bc * H2 + y) * W2 + xx];
    });
  }
  return result;
}

Tensor Graph::concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  const auto B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  if (b.dim(0) != B || b.dim(2) != H || b.dim(3) != W) {
    throw Error("shape", "concat_channels of " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const auto P = H * W, C = Ca + Cb;
  std::vector<double> out(B * C * P);
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(n * Ca * P), Ca * P,
                out.begin() + static_cast<std::ptrdiff_t>(n * C * P));
    std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(n * Cb * P), Cb * P,
                out.begin() + static_cast<std::ptrdiff_t>((n * C + Ca) * P));
  }
  const bool tracked = any_requires_grad({&a, &b});
  Tensor result = make_result(Shape{B, C, H, W}, std::move(out), tracked);
  if (tracked) {
    record("concat_channels", result, [B, Ca, Cb, P, ai = a.impl_, bi = b.impl_, oi = result.impl_] {
      const auto C = Ca + Cb;
      for (std::size_t n = 0; n < B; ++n) {
        if (ai->requires_grad) {
          auto& ga = grad_of(*ai);
          for (std::size_t i = 0; i < Ca * P; ++i) ga[n * Ca * P + i] += oi->grad[n * C * P + i];
        }
        if (bi->requires_grad) {
          auto& gb = grad_of(*bi);
          for (std::size_t i = 0; i < Cb * P; ++i) gb[n * Cb * P + i] += oi->grad[(n * C + Ca) * P + i];
        }
      }
    });
  }
  return result;
}

Tensor Graph::global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const auto B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  std::vector<double> out(B * C);
  for (std::size_t i = 0; i < B * C; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < P; ++p) s += x[i * P + p];
    out[i] = s / static_cast<double>(P);
  }
  const bool tracked = any_requires_grad({&x});
  Tensor result = make_result(Shape{B, C}, std::move(out), tracked);
  if (tracked) {
    record("global_avg_pool", result, [P, xi = x.impl_, oi = result.impl_] {
      auto& gx = grad_of(*xi);
      const double inv = 1.0 / static_cast<double>(P);
      for (std::size_t i = 0; i < oi->grad.size(); ++i)
        for (std::size_t p = 0; p < P; ++p) gx[i * P + p] += oi->grad[i] * inv;
    });
  }
  return result;
}

Tensor Graph::reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw Error("shape", "cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  const bool tracked = any_requires_grad({&a});
  Tensor result = make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), tracked);
  if (tracked) {
    record("reshape", result, [ai = a.impl_, oi = result.impl_] {
      auto& ga = grad_of(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += oi->grad[i];
    });
  }
  return result;
}

SortResult Graph::sort_last(const Tensor& x) {
  const auto n = x.shape().back();
  const auto rows = x.size() / n;
  std::vector<double> out(x.size());
  std::vector<std::size_t> perm(x.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * n;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [row](std::size_t i, std::size_t j) { return row[i] < row[j]; });
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = row[idx[j]];
      perm[r * n + j] = idx[j];
    }
  }
  const bool tracked = any_requires_grad({&x});
  Tensor result = make_result(x.shape(), std::move(out), tracked);
  if (tracked) {
    record("sort_last", result, [n, perm, xi = x.impl_, oi = result.impl_] {
      auto& gx = grad_of(*xi);
      for (std::size_t i = 0; i < perm.size(); ++i) gx[(i / n) * n + perm[i]] += oi->grad[i];
    });
  }
  return SortResult{std::move(result), std::move(perm)};
}

// ---------------------------------------------------------------------------
// Randomness

std::vector<double> Graph::draw_normal(std::size_t count) {
  std::vector<double> values;
  if (replay_) {
    if (replay_real_ >= replay_->reals.size() || replay_->reals[replay_real_].size() != count) {
      throw Error("replay", "draw log does not match the requested real draw");
    }
    values = replay_->reals[replay_real_++];
  } else {
    std::normal_distribution<double> normal(0.0, 1.0);
    values.resize(count);
    for (auto& v : values) v = normal(rng_);
  }
  log_.reals.push_back(values);
  return values;
}

std::vector<std::size_t> Graph::draw_derangement(std::size_t n) {
  if (n < 2) throw Error("batch", "a derangement needs at least 2 elements");
  std::vector<std::size_t> perm(n);
  if (replay_) {
    if (replay_perm_ >= replay_->permutations.size() || replay_->permutations[replay_perm_].size() != n) {
      throw Error("replay", "draw log does not match the requested permutation");
    }
    perm = replay_->permutations[replay_perm_++];
  } else {
    // Rejection sampling of uniform permutations; accepts with probability ~1/e.
    bool fixed_point = true;
    while (fixed_point) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      for (std::size_t i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(perm[i], perm[pick(rng_)]);
      }
      fixed_point = false;
      for (std::size_t i = 0; i < n; ++i) fixed_point = fixed_point || perm[i] == i;
    }
  }
  log_.permutations.push_back(perm);
  return perm;
}

// ---------------------------------------------------------------------------
// Backward

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) throw Error("shape", "backward needs a scalar loss, got " + to_string(loss.shape()));
  const auto& impl = *loss.impl_;
  if (!impl.tape_id || impl.graph_uid != uid_) {
    if (impl.requires_grad) grad_of(*loss.impl_)[0] += 1.0;
    return;
  }
  for (auto& node : nodes_) node.output->grad.clear();
  grad_of(*loss.impl_)[0] = 1.0;
  for (std::size_t i = *impl.tape_id + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.output->grad.empty()) continue;
    node.backward();
  }
}

double grad_check(const std::function<Tensor(Graph&)>& loss, std::span<Tensor> params, double step,
                  std::uint64_t seed) {
  if (!(step > 0.0)) throw Error("domain", "grad_check step must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  DrawLog draws;
  {
    Graph g(seed);
    Tensor value = loss(g);
    g.backward(value);
    draws = g.draws();
  }
  auto evaluate = [&] {
    Graph g(seed, draws);
    double v = 0.0;
    try {
      v = loss(g).item();
    } catch (const Error& e) {
      if (e.kind() == "overflow") throw Error("domain", "loss is non-finite at a perturbed point");
      throw;
    }
    if (!std::isfinite(v)) throw Error("domain", "loss is non-finite at a perturbed point");
    return v;
  };
  double worst = 0.0;
  for (auto& p : params) {
    const auto analytic = p.grad();
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double up = evaluate();
      values[i] = original - step;
      const double down = evaluate();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
  }
  return worst;
}

}  // namespace cvd
