#include "cvd/eval.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <numeric>
#include <random>
#include <thread>

#include "cvd/error.hpp"

namespace cvd {

namespace {

void require_unit_rows(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw Error("shape", std::string(what) + " must be rank 2, got " + to_string(t.shape()));
  const auto r = t.dim(0), c = t.dim(1);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += t[i * c + j] * t[i * c + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
      throw Error("precondition", std::string(what) + " row " + std::to_string(i) + " is not unit-normalised");
    }
  }
}

void require_relevance(const Tensor& sim, const Relevance& relevance) {
  if (sim.rank() != 2) throw Error("shape", "similarity matrix must be rank 2");
  if (relevance.size() != sim.dim(0)) {
    throw Error("labels", std::to_string(relevance.size()) + " relevance sets for " + std::to_string(sim.dim(0)) +
                              " queries");
  }
  for (std::size_t q = 0; q < relevance.size(); ++q) {
    if (relevance[q].empty()) throw Error("labels", "query " + std::to_string(q) + " has no relevant item");
    for (auto g : relevance[q]) {
      if (g >= sim.dim(1)) throw Error("labels", "relevant index " + std::to_string(g) + " outside the gallery");
    }
  }
}

std::span<const double> row_of(const Tensor& sim, std::size_t q) {
  return sim.data().subspan(q * sim.dim(1), sim.dim(1));
}

// 1-based rank of the best-ranked relevant item.
std::size_t first_relevant_rank(std::span<const double> row, const std::vector<std::size_t>& relevant) {
  const auto order = rank_gallery(row);
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (std::find(relevant.begin(), relevant.end(), order[r]) != relevant.end()) return r + 1;
  }
  return order.size() + 1;
}

}  // namespace

const char* direction_name(Direction d) noexcept {
  return d == Direction::drone_to_satellite ? "drone->satellite" : "satellite->drone";
}

std::size_t eval_threads() {
  if (const char* env = std::getenv("CVD_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

Tensor similarity_matrix(const Tensor& queries, const Tensor& gallery) {
  require_unit_rows(queries, "query");
  require_unit_rows(gallery, "gallery");
  if (queries.dim(1) != gallery.dim(1)) {
    throw Error("shape", "query width " + std::to_string(queries.dim(1)) + " vs gallery width " +
                             std::to_string(gallery.dim(1)));
  }
  const auto nq = queries.dim(0), ng = gallery.dim(0), dim = queries.dim(1);
  std::vector<double> out(nq * ng);
  const auto rows = [&](std::size_t begin, std::size_t end) {
    for (std::size_t q = begin; q < end; ++q) {
      for (std::size_t g = 0; g < ng; ++g) {
        double s = 0.0;
        for (std::size_t k = 0; k < dim; ++k) s += queries[q * dim + k] * gallery[g * dim + k];
        out[q * ng + g] = s;
      }
    }
  };
  const auto threads = std::min(eval_threads(), nq);
  if (threads <= 1) {
    rows(0, nq);
  } else {
    std::vector<std::jthread> pool;
    const auto chunk = (nq + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const auto begin = t * chunk;
      const auto end = std::min(nq, begin + chunk);
      if (begin < end) pool.emplace_back(rows, begin, end);
    }
  }
  return Tensor(Shape{nq, ng}, std::move(out));
}

std::vector<std::size_t> rank_gallery(std::span<const double> similarities) {
  std::vector<std::size_t> order(similarities.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return similarities[a] > similarities[b]; });
  return order;
}

double recall_at_k(const Tensor& sim, const Relevance& relevance, std::size_t k) {
  require_relevance(sim, relevance);
  std::size_t hits = 0;
  for (std::size_t q = 0; q < relevance.size(); ++q) {
    if (first_relevant_rank(row_of(sim, q), relevance[q]) <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(relevance.size());
}

double average_precision(std::span<const double> sim_row, const std::vector<std::size_t>& relevant) {
  if (relevant.empty()) throw Error("labels", "empty relevance set");
  const auto order = rank_gallery(sim_row);
  std::size_t found = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size() && found < relevant.size(); ++r) {
    if (std::find(relevant.begin(), relevant.end(), order[r]) != relevant.end()) {
      ++found;
      sum += static_cast<double>(found) / static_cast<double>(r + 1);
    }
  }
  return sum / static_cast<double>(relevant.size());
}

double mean_average_precision(const Tensor& sim, const Relevance& relevance) {
  require_relevance(sim, relevance);
  double total = 0.0;
  for (std::size_t q = 0; q < relevance.size(); ++q) total += average_precision(row_of(sim, q), relevance[q]);
  return total / static_cast<double>(relevance.size());
}

std::size_t one_percent_k(std::size_t gallery_size) {
  // ceil(0.01 * N) in integer arithmetic.
  return std::max<std::size_t>(1, (gallery_size + 99) / 100);
}

double recall_at_1pct(const Tensor& sim, const Relevance& relevance) {
  if (sim.rank() != 2) throw Error("shape", "similarity matrix must be rank 2");
  return recall_at_k(sim, relevance, one_percent_k(sim.dim(1)));
}

RetrievalReport evaluate_retrieval(const Tensor& sim, const Relevance& relevance, Direction direction) {
  RetrievalReport rep;
  rep.direction = direction;
  rep.n_queries = sim.dim(0);
  rep.n_gallery = sim.dim(1);
  rep.ap = mean_average_precision(sim, relevance);
  for (std::size_t k : {1, 5, 10}) rep.r_at[k] = recall_at_k(sim, relevance, k);
  rep.r_at_1pct = recall_at_1pct(sim, relevance);
  return rep;
}

double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error("shape", "psnr of " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& a, const Tensor& b, std::size_t window, double c1, double c2) {
  if (a.shape() != b.shape() || a.rank() < 2) {
    throw Error("shape", "ssim of " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const auto h = a.shape()[a.rank() - 2];
  const auto w = a.shape()[a.rank() - 1];
  if (window == 0 || h < window || w < window) {
    throw Error("shape", "ssim window " + std::to_string(window) + " exceeds image side");
  }
  const auto planes = a.size() / (h * w);
  const auto n = static_cast<double>(window * window);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* pa = a.data().data() + p * h * w;
    const double* pb = b.data().data() + p * h * w;
    for (std::size_t y0 = 0; y0 + window <= h; y0 += window) {
      for (std::size_t x0 = 0; x0 + window <= w; x0 += window) {
        double ma = 0.0, mb = 0.0;
        for (std::size_t y = y0; y < y0 + window; ++y)
          for (std::size_t x = x0; x < x0 + window; ++x) {
            ma += pa[y * w + x];
            mb += pb[y * w + x];
          }
        ma /= n;
        mb /= n;
        double va = 0.0, vb = 0.0, cov = 0.0;
        for (std::size_t y = y0; y < y0 + window; ++y)
          for (std::size_t x = x0; x < x0 + window; ++x) {
            const double da = pa[y * w + x] - ma;
            const double db = pb[y * w + x] - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
          }
        va /= n;
        vb /= n;
        cov /= n;
        total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

double viewpoint_probe(const Tensor& embeddings, const std::vector<std::size_t>& labels, std::size_t bins,
                       std::uint64_t seed) {
  using Mat = Eigen::MatrixXd;
  if (bins < 2) throw Error("data", "a probe needs at least 2 bins");
  if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
    throw Error("shape", "embeddings " + to_string(embeddings.shape()) + " vs " + std::to_string(labels.size()) +
                             " labels");
  }
  const auto n = labels.size();
  const auto dim = embeddings.dim(1);
  if (n < 2 * bins) {
    throw Error("data", std::to_string(n) + " samples are too few for " + std::to_string(bins) + " bins");
  }
  for (auto l : labels) {
    if (l >= bins) throw Error("data", "label " + std::to_string(l) + " outside " + std::to_string(bins) + " bins");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = (n * 4) / 5;
  const auto n_test = n - n_train;

  const auto load = [&](std::size_t begin, std::size_t count) {
    Mat x(count, dim);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < dim; ++j) x(i, j) = embeddings[order[begin + i] * dim + j];
    return x;
  };
  Mat train = load(0, n_train);
  Mat test = load(n_train, n_test);

  // Standardise with training statistics; constant columns stay at zero.
  for (std::size_t j = 0; j < dim; ++j) {
    const double mu = train.col(j).mean();
    const double sd = std::sqrt((train.col(j).array() - mu).square().mean());
    const double inv = sd > 1e-12 ? 1.0 / sd : 0.0;
    train.col(j) = (train.col(j).array() - mu) * inv;
    test.col(j) = (test.col(j).array() - mu) * inv;
  }

  Mat onehot = Mat::Zero(n_train, bins);
  for (std::size_t i = 0; i < n_train; ++i) onehot(i, labels[order[i]]) = 1.0;

  constexpr int kSteps = 500;
  constexpr double kRate = 0.5;
  Mat weights = Mat::Zero(dim, bins);
  Eigen::RowVectorXd bias = Eigen::RowVectorXd::Zero(bins);
  for (int step = 0; step < kSteps; ++step) {
    Mat logits = (train * weights).rowwise() + bias;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double mx = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - mx).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    const Mat residual = (logits - onehot) / static_cast<double>(n_train);
    weights -= kRate * (train.transpose() * residual);
    bias -= kRate * residual.colwise().sum();
  }

  const Mat scores = (test * weights).rowwise() + bias;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n_test; ++i) {
    Eigen::Index best = 0;
    scores.row(static_cast<Eigen::Index>(i)).maxCoeff(&best);
    if (static_cast<std::size_t>(best) == labels[order[n_train + i]]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n_test);
}

std::size_t azimuth_bin(double azimuth, std::size_t bins) {
  // A lone square image only pins azimuth down to a quarter turn, so bins
  // cover [0, pi/2).
  const double period = std::numbers::pi / 2.0;
  double a = std::fmod(azimuth, period);
  if (a < 0.0) a += period;
  return std::min(bins - 1, static_cast<std::size_t>(a / period * static_cast<double>(bins)));
}

std::size_t tilt_bin(double tilt, std::size_t bins) {
  constexpr double kMaxTilt = 0.5;
  const double t = std::clamp(tilt / kMaxTilt, 0.0, 1.0);
  return std::min(bins - 1, static_cast<std::size_t>(t * static_cast<double>(bins)));
}

}  // namespace cvd
