#include "cvd/optim.hpp"

#include <cmath>

#include "cvd/error.hpp"

namespace cvd {

Optimizer::Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {
  if (!(learning_rate > 0.0)) throw Error("config", "learning_rate must be positive");
}

void Optimizer::step(Parameters& params) {
  ++t_;
  if (kind_ == OptimizerKind::sgd) {
    for (auto& [name, p] : params) {
      const auto g = p.grad();
      auto w = p.mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
    }
    return;
  }
  const double correction1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    const auto g = p.grad();
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
      const double mhat = m[i] / correction1;
      const double vhat = v[i] / correction2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + kEpsilon);
    }
  }
}

std::map<std::string, Tensor> Optimizer::state() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, m] : m_) {
    out.emplace("adam_m." + name, Tensor(Shape{m.size()}, m));
    out.emplace("adam_v." + name, Tensor(Shape{m.size()}, v_.at(name)));
  }
  return out;
}

void Optimizer::load_state(const std::map<std::string, Tensor>& state, std::uint64_t steps_taken) {
  m_.clear();
  v_.clear();
  for (const auto& [key, t] : state) {
    auto& target = key.starts_with("adam_m.") ? m_ : v_;
    if (!key.starts_with("adam_m.") && !key.starts_with("adam_v.")) {
      throw Error("format", "unexpected optimizer tensor " + key);
    }
    target[key.substr(7)] = std::vector<double>(t.data().begin(), t.data().end());
  }
  if (m_.size() != v_.size()) throw Error("format", "optimizer moments are incomplete");
  t_ = steps_taken;
}

}  // namespace cvd
