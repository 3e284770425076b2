#include "cvd/losses.hpp"

#include <cmath>

#include "cvd/error.hpp"

namespace cvd {

std::pair<Tensor, Tensor> flatten_factors(Graph& g, const Tensor& zc, const Tensor& zv) {
  if (zc.rank() != 4 || zv.rank() != 4 || zc.dim(0) != zv.dim(0) || zc.dim(2) != zv.dim(2) ||
      zc.dim(3) != zv.dim(3)) {
    throw Error("shape", "factor maps " + to_string(zc.shape()) + " and " + to_string(zv.shape()) +
                             " differ in batch or spatial size");
  }
  const auto batch = zc.dim(0);
  return {g.reshape(zc, Shape{batch, zc.size() / batch}), g.reshape(zv, Shape{batch, zv.size() / batch})};
}

Tensor marginal_product_sample(Graph& g, const Tensor& c, const Tensor& v) {
  if (c.rank() != 2 || v.rank() != 2 || c.dim(0) != v.dim(0)) {
    throw Error("shape", "sample sets " + to_string(c.shape()) + " and " + to_string(v.shape()) + " differ");
  }
  if (c.dim(0) < 2) throw Error("batch", "product-of-marginals sampling needs at least 2 rows");
  const auto perm = g.draw_derangement(c.dim(0));
  return g.concat_cols(c, g.take_rows(v, perm));
}

Tensor wasserstein2_1d(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw Error("shape", "sample counts " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " differ");
  }
  const Shape row{1, a.size()};
  const auto sa = g.sort_last(g.reshape(a, row)).values;
  const auto sb = g.sort_last(g.reshape(b, row)).values;
  return g.mean(g.square(g.sub(sa, sb)));
}

Tensor sliced_w2(Graph& g, const Tensor& p, const Tensor& q, const Tensor& directions) {
  if (p.rank() != 2 || p.shape() != q.shape()) {
    throw Error("shape", "sample sets " + to_string(p.shape()) + " and " + to_string(q.shape()) + " differ");
  }
  if (directions.rank() != 2 || directions.dim(1) != p.dim(1)) {
    throw Error("shape", "directions " + to_string(directions.shape()) + " do not match sample width " +
                             std::to_string(p.dim(1)));
  }
  // [K x B] projections, one direction per row, sorted along the sample axis.
  const auto pp = g.sort_last(g.matmul(directions, g.transpose(p))).values;
  const auto pq = g.sort_last(g.matmul(directions, g.transpose(q))).values;
  return g.mean(g.square(g.sub(pp, pq)));
}

Tensor sliced_w2(Graph& g, const Tensor& p, const Tensor& q, std::size_t projections) {
  if (projections < 1) throw Error("config", "sliced_w2 needs at least one projection");
  if (p.rank() != 2) throw Error("shape", "sample set must be rank 2, got " + to_string(p.shape()));
  const auto dim = p.dim(1);
  auto theta = g.draw_normal(projections * dim);
  for (std::size_t k = 0; k < projections; ++k) {
    double norm = 0.0;
    for (std::size_t j = 0; j < dim; ++j) norm += theta[k * dim + j] * theta[k * dim + j];
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) theta[k * dim + j] /= norm;
  }
  return sliced_w2(g, p, q, Tensor(Shape{projections, dim}, std::move(theta)));
}

Tensor loss_iic(Graph& g, const Tensor& zc, const Tensor& zv, std::size_t projections) {
  const auto [c, v] = flatten_factors(g, zc, zv);
  const auto joint = g.concat_cols(c, v);
  const auto product = marginal_product_sample(g, c, v);
  return sliced_w2(g, joint, product, projections);
}

Tensor loss_irc(Graph& g, const Tensor& original, const Tensor& reconstructed) {
  if (original.shape() != reconstructed.shape()) {
    throw Error("shape", "image " + to_string(original.shape()) + " vs reconstruction " +
                             to_string(reconstructed.shape()));
  }
  return g.mean(g.square(g.sub(original, reconstructed)));
}

namespace {

void require_unit_rows(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw Error("shape", std::string(what) + " must be rank 2");
  const auto r = t.dim(0), c = t.dim(1);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += t[i * c + j] * t[i * c + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
      throw Error("precondition", std::string(what) + " row " + std::to_string(i) + " is not unit-normalised");
    }
  }
}

}  // namespace

Tensor loss_infonce(Graph& g, const Tensor& c_d, const Tensor& c_s, double tau, bool bidirectional) {
  if (!(tau > 0.0)) throw Error("config", "tau must be positive");
  if (c_d.shape() != c_s.shape()) {
    throw Error("shape", "content rows " + to_string(c_d.shape()) + " and " + to_string(c_s.shape()) + " differ");
  }
  require_unit_rows(c_d, "drone content");
  require_unit_rows(c_s, "satellite content");
  const auto logits = g.scale(g.matmul(c_d, g.transpose(c_s)), 1.0 / tau);
  const auto diag = g.diagonal(logits);
  const auto forward = g.mean(g.sub(g.logsumexp_rows(logits), diag));
  if (!bidirectional) return forward;
  const auto backward = g.mean(g.sub(g.logsumexp_rows(g.transpose(logits)), diag));
  return g.scale(g.add(forward, backward), 0.5);
}

Tensor loss_total(Graph& g, const LossReport& parts, double lambda1, double lambda2) {
  // A zero weight drops the term from the tape so its subgraph is never visited
  // by backward; the value is identical since 0 * finite == 0.
  const auto weighted = [&g](const Tensor& a, const Tensor& b, double lambda) {
    if (lambda == 0.0) return Tensor::scalar(0.0);
    return g.scale(g.scale(g.add(a, b), 0.5), lambda);
  };
  const auto iic = weighted(parts.iic_d, parts.iic_s, lambda1);
  const auto irc = weighted(parts.irc_d, parts.irc_s, lambda2);
  return g.add(g.add(iic, irc), parts.loc);
}

double weighted_total(double iic_d, double iic_s, double irc_d, double irc_s, double loc, double lambda1,
                      double lambda2) {
  const double iic = lambda1 == 0.0 ? 0.0 : ((iic_d + iic_s) * 0.5) * lambda1;
  const double irc = lambda2 == 0.0 ? 0.0 : ((irc_d + irc_s) * 0.5) * lambda2;
  return (iic + irc) + loc;
}

LossReport compute_losses(Graph& g, const PairOutput& out, const Tensor& drone, const Tensor& satellite,
                          const CvdConfig& config) {
  LossReport r;
  const auto& f = out.factors;
  r.iic_d = loss_iic(g, f.zc_d, f.zv_d, config.n_projections);
  r.iic_s = loss_iic(g, f.zc_s, f.zv_s, config.n_projections);
  r.irc_d = loss_irc(g, drone, out.recon_d);
  r.irc_s = loss_irc(g, satellite, out.recon_s);
  r.loc = loss_infonce(g, f.pooled_c_d, f.pooled_c_s, config.tau, config.bi_infonce);
  r.total = loss_total(g, r, config.lambda1, config.lambda2);
  return r;
}

}  // namespace cvd
