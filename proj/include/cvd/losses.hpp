#pragma once

#include <cstddef>
#include <utility>

#include "cvd/graph.hpp"
#include "cvd/model.hpp"
#include "cvd/tensor.hpp"

namespace cvd {

// The six objective terms of one training step plus their weighted total.
struct LossReport {
  Tensor iic_d, iic_s;
  Tensor irc_d, irc_s;
  Tensor loc;
  Tensor total;
};

// [B x C x H x W] content and viewpoint maps -> [B x C*H*W] rows.
std::pair<Tensor, Tensor> flatten_factors(Graph& g, const Tensor& zc, const Tensor& zv);

// Rows [c_i ; v_pi(i)] for a uniformly drawn derangement pi (logged on the graph).
Tensor marginal_product_sample(Graph& g, const Tensor& c, const Tensor& v);

// Squared 1-D Wasserstein-2 distance between equal-size empirical samples:
// mean of (sort(a)_i - sort(b)_i)^2.
Tensor wasserstein2_1d(Graph& g, const Tensor& a, const Tensor& b);

// Monte-Carlo squared sliced W2 over `projections` directions drawn uniformly on
// the unit sphere. Rows of p and q are samples.
Tensor sliced_w2(Graph& g, const Tensor& p, const Tensor& q, std::size_t projections);

// Same estimator against caller-supplied unit directions [K x D].
Tensor sliced_w2(Graph& g, const Tensor& p, const Tensor& q, const Tensor& directions);

// Independence penalty between content and viewpoint maps of one view.
Tensor loss_iic(Graph& g, const Tensor& zc, const Tensor& zv, std::size_t projections);

// Mean squared error.
Tensor loss_irc(Graph& g, const Tensor& original, const Tensor& reconstructed);

// InfoNCE with in-batch negatives; rows must be unit-normalised. Drone rows are
// queries against the satellite gallery; `bidirectional` averages in the
// satellite->drone direction.
Tensor loss_infonce(Graph& g, const Tensor& c_d, const Tensor& c_s, double tau, bool bidirectional);

// lambda1*(iic_d+iic_s)/2 + lambda2*(irc_d+irc_s)/2 + loc.
Tensor loss_total(Graph& g, const LossReport& parts, double lambda1, double lambda2);

// Full objective for one forward pass of the model.
LossReport compute_losses(Graph& g, const PairOutput& out, const Tensor& drone, const Tensor& satellite,
                          const CvdConfig& config);

// Scalar form of loss_total, evaluated with the same operation order.
[[nodiscard]] double weighted_total(double iic_d, double iic_s, double irc_d, double irc_s, double loc,
                                    double lambda1, double lambda2);

}  // namespace cvd
