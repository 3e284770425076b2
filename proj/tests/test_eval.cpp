#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <numeric>
#include <random>

#include "cvd/error.hpp"
#include "cvd/eval.hpp"

namespace cvd {
namespace {

Tensor unit_rows(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> d(rows * cols);
  for (auto& v : d) v = n(rng);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += d[i * cols + j] * d[i * cols + j];
    for (std::size_t j = 0; j < cols; ++j) d[i * cols + j] /= std::sqrt(s);
  }
  return Tensor(Shape{rows, cols}, std::move(d));
}

// Brute-force reference: position of each gallery item after a full sort by
// (similarity descending, index ascending).
std::vector<std::size_t> reference_order(std::span<const double> row) {
  std::vector<std::pair<double, std::size_t>> items;
  for (std::size_t i = 0; i < row.size(); ++i) items.emplace_back(-row[i], i);
  std::sort(items.begin(), items.end());
  std::vector<std::size_t> order;
  for (const auto& [s, i] : items) order.push_back(i);
  return order;
}

double reference_recall(const Tensor& sim, const Relevance& rel, std::size_t k) {
  const auto n = sim.dim(1);
  double hits = 0.0;
  for (std::size_t q = 0; q < rel.size(); ++q) {
    const auto order = reference_order(sim.data().subspan(q * n, n));
    bool hit = false;
    for (std::size_t r = 0; r < std::min(k, n); ++r)
      for (auto g : rel[q]) hit |= order[r] == g;
    hits += hit ? 1.0 : 0.0;
  }
  return hits / static_cast<double>(rel.size());
}

double reference_map(const Tensor& sim, const Relevance& rel) {
  const auto n = sim.dim(1);
  double total = 0.0;
  for (std::size_t q = 0; q < rel.size(); ++q) {
    const auto order = reference_order(sim.data().subspan(q * n, n));
    double ap = 0.0;
    for (auto g : rel[q]) {
      const auto rank = static_cast<std::size_t>(std::find(order.begin(), order.end(), g) - order.begin()) + 1;
      std::size_t relevant_at_or_above = 0;
      for (std::size_t r = 0; r < rank; ++r)
        relevant_at_or_above += std::count(rel[q].begin(), rel[q].end(), order[r]);
      ap += static_cast<double>(relevant_at_or_above) / static_cast<double>(rank);
    }
    total += ap / static_cast<double>(rel[q].size());
  }
  return total / static_cast<double>(rel.size());
}

struct Instance {
  Tensor sim;
  Relevance rel;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> qd(1, 20), nd(1, 50);
  const auto q = qd(rng), n = nd(rng);
  // Coarse values so that ties are common.
  std::uniform_int_distribution<int> level(0, 9);
  std::vector<double> s(q * n);
  for (auto& v : s) v = level(rng) / 10.0;
  Relevance rel(q);
  for (auto& r : rel) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    std::uniform_int_distribution<std::size_t> count(1, std::min<std::size_t>(n, 4));
    r.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count(rng)));
  }
  return {Tensor(Shape{q, n}, std::move(s)), std::move(rel)};
}

TEST(Similarity, Examples) {
  const Tensor g(Shape{2, 2}, {1, 0, 0, 1});
  const auto s = similarity_matrix(Tensor(Shape{1, 2}, {1, 0}), g);
  EXPECT_EQ(s[0], 1.0);
  EXPECT_EQ(s[1], 0.0);
  try {
    similarity_matrix(Tensor(Shape{1, 2}, {1, 1}), g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "precondition");
  }
}

TEST(Similarity, CosineAndEuclideanRankIdentically) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto q = unit_rows(rng, 3, 5);
    const auto g = unit_rows(rng, 12, 5);
    const auto s = similarity_matrix(q, g);
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> neg_dist(12);
      for (std::size_t j = 0; j < 12; ++j) {
        double d = 0.0;
        for (std::size_t k = 0; k < 5; ++k) d += (q[i * 5 + k] - g[j * 5 + k]) * (q[i * 5 + k] - g[j * 5 + k]);
        neg_dist[j] = -std::sqrt(d);
      }
      EXPECT_EQ(rank_gallery(s.data().subspan(i * 12, 12)), rank_gallery(neg_dist));
    }
  }
}

TEST(Similarity, IndependentOfThreadCount) {
  std::mt19937_64 rng(2);
  const auto q = unit_rows(rng, 37, 8);
  const auto g = unit_rows(rng, 29, 8);
  ::setenv("CVD_THREADS", "1", 1);
  const auto one = similarity_matrix(q, g);
  ::setenv("CVD_THREADS", "4", 1);
  EXPECT_EQ(eval_threads(), 4u);
  const auto four = similarity_matrix(q, g);
  ::unsetenv("CVD_THREADS");
  EXPECT_EQ(eval_threads(), 1u);
  EXPECT_TRUE(std::equal(one.data().begin(), one.data().end(), four.data().begin()));
}

TEST(Ranking, TiesByAscendingIndex) {
  const double row[] = {0.5, 0.9, 0.5, 0.9, 0.1};
  EXPECT_EQ(rank_gallery(row), (std::vector<std::size_t>{1, 3, 0, 2, 4}));
}

TEST(Recall, Examples) {
  const Tensor sim(Shape{2, 4}, {0.9, 0.1, 0.2, 0.3, 0.1, 0.8, 0.2, 0.3});
  const Relevance top{{0}, {1}};
  for (std::size_t k : {1u, 2u, 4u}) EXPECT_EQ(recall_at_k(sim, top, k), 1.0);
  const Relevance second{{3}, {3}};  // ranked 2nd for both queries
  EXPECT_EQ(recall_at_k(sim, second, 1), 0.0);
  EXPECT_EQ(recall_at_k(sim, second, 2), 1.0);
  try {
    recall_at_k(sim, Relevance{{0}, {}}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "labels");
  }
}

TEST(AveragePrecision, Examples) {
  const double row[] = {0.9, 0.8, 0.7, 0.6, 0.5};
  EXPECT_DOUBLE_EQ(average_precision(row, {2}), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(average_precision(row, {0, 1, 2, 3, 4}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(row, {0, 3}), 0.75);
  EXPECT_THROW(average_precision(row, {}), Error);
}

TEST(OnePercent, Examples) {
  EXPECT_EQ(one_percent_k(50), 1u);
  EXPECT_EQ(one_percent_k(200), 2u);
  EXPECT_EQ(one_percent_k(100), 1u);
  EXPECT_EQ(one_percent_k(101), 2u);
  EXPECT_EQ(one_percent_k(1), 1u);
}

TEST(Metrics, MatchBruteForceOnRandomInstances) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto [sim, rel] = random_instance(rng);
    for (std::size_t k : {1u, 5u, 10u}) ASSERT_EQ(recall_at_k(sim, rel, k), reference_recall(sim, rel, k));
    ASSERT_EQ(recall_at_1pct(sim, rel),
              reference_recall(sim, rel, static_cast<std::size_t>(std::ceil(0.01 * sim.dim(1)))));
    ASSERT_NEAR(mean_average_precision(sim, rel), reference_map(sim, rel), 1e-15);
  }
}

TEST(Metrics, InvariantUnderPositiveAffineMaps) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto [sim, rel] = random_instance(rng);
    // Power-of-two scale and small-integer shift keep every value exact.
    std::vector<double> mapped(sim.data().begin(), sim.data().end());
    for (auto& v : mapped) v = 4.0 * v + 3.0;
    const Tensor t(sim.shape(), mapped);
    const auto a = evaluate_retrieval(sim, rel, Direction::drone_to_satellite);
    const auto b = evaluate_retrieval(t, rel, Direction::drone_to_satellite);
    ASSERT_EQ(a.ap, b.ap);
    ASSERT_EQ(a.r_at, b.r_at);
    ASSERT_EQ(a.r_at_1pct, b.r_at_1pct);
  }
}

TEST(Metrics, RecallMonotoneAndReportInRange) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto [sim, rel] = random_instance(rng);
    const auto r = evaluate_retrieval(sim, rel, Direction::satellite_to_drone);
    ASSERT_LE(r.r_at.at(1), r.r_at.at(5));
    ASSERT_LE(r.r_at.at(5), r.r_at.at(10));
    for (double v : {r.ap, r.r_at.at(1), r.r_at.at(10), r.r_at_1pct}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    EXPECT_EQ(r.n_queries, sim.dim(0));
    EXPECT_EQ(r.n_gallery, sim.dim(1));
  }
}

TEST(Psnr, Examples) {
  EXPECT_EQ(psnr(Tensor::zeros({1, 4, 4}), Tensor::full({1, 4, 4}, 1.0)), 0.0);
  EXPECT_EQ(psnr(Tensor::full({1, 4, 4}, 0.3), Tensor::full({1, 4, 4}, 0.3)), 99.0);
  EXPECT_NEAR(psnr(Tensor::zeros({1, 4, 4}), Tensor::full({1, 4, 4}, 0.1)), 20.0, 1e-12);
  EXPECT_THROW(psnr(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 4, 5})), Error);
}

TEST(Ssim, Examples) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> d(256);
  for (auto& v : d) v = u(rng);
  const Tensor a(Shape{1, 16, 16}, d);
  for (auto& v : d) v = 1.0 - v;
  const Tensor neg(Shape{1, 16, 16}, d);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_LT(ssim(a, neg), 1.0);
  EXPECT_THROW(ssim(a, Tensor::zeros({1, 16, 8})), Error);
}

TEST(Ssim, MatchesPerWindowReference) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> da(2 * 16 * 24), db(2 * 16 * 24);
    for (auto& v : da) v = u(rng);
    for (std::size_t i = 0; i < db.size(); ++i) db[i] = std::clamp(da[i] + 0.3 * (u(rng) - 0.5), 0.0, 1.0);
    const Tensor a(Shape{2, 16, 24}, da), b(Shape{2, 16, 24}, db);
    // Reference: gather each 8x8 tile into vectors and apply the SSIM formula.
    double total = 0.0;
    int tiles = 0;
    for (int p = 0; p < 2; ++p)
      for (int ty = 0; ty < 2; ++ty)
        for (int tx = 0; tx < 3; ++tx) {
          std::vector<double> x, y;
          for (int r = 0; r < 8; ++r)
            for (int c = 0; c < 8; ++c) {
              const auto idx = static_cast<std::size_t>(p * 384 + (ty * 8 + r) * 24 + tx * 8 + c);
              x.push_back(da[idx]);
              y.push_back(db[idx]);
            }
          const double mx = std::accumulate(x.begin(), x.end(), 0.0) / 64;
          const double my = std::accumulate(y.begin(), y.end(), 0.0) / 64;
          double vx = 0, vy = 0, cxy = 0;
          for (int i = 0; i < 64; ++i) {
            vx += (x[i] - mx) * (x[i] - mx) / 64;
            vy += (y[i] - my) * (y[i] - my) / 64;
            cxy += (x[i] - mx) * (y[i] - my) / 64;
          }
          const double c1 = 1e-4, c2 = 9e-4;
          total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++tiles;
        }
    EXPECT_NEAR(ssim(a, b), total / tiles, 1e-12);
    EXPECT_EQ(ssim(a, b), ssim(b, a));
    EXPECT_EQ(psnr(a, b), psnr(b, a));
  }
}

TEST(Probe, ConstantLabelsAreTriviallyPredicted) {
  std::mt19937_64 rng(8);
  const auto emb = unit_rows(rng, 40, 3);
  EXPECT_EQ(viewpoint_probe(emb, std::vector<std::size_t>(40, 2), 4), 1.0);
}

TEST(Probe, OneHotLabelsAreSeparable) {
  const std::size_t n = 80, bins = 4;
  std::vector<double> d(n * bins, 0.0);
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = (i * 7) % bins;
    d[i * bins + labels[i]] = 1.0;
  }
  EXPECT_EQ(viewpoint_probe(Tensor(Shape{n, bins}, d), labels, bins, 3), 1.0);
}

TEST(Probe, ZeroEmbeddingsScoreNearChance) {
  std::mt19937_64 rng(9);
  const std::size_t n = 1000, bins = 4;
  std::vector<std::size_t> labels(n);
  std::uniform_int_distribution<std::size_t> pick(0, bins - 1);
  for (auto& l : labels) l = pick(rng);
  const double acc = viewpoint_probe(Tensor::zeros({n, 5}), labels, bins, 1);
  const double sigma = std::sqrt(0.25 * 0.75 / 200.0);
  EXPECT_NEAR(acc, 0.25, 3.0 * sigma);
}

TEST(Probe, Errors) {
  try {
    viewpoint_probe(Tensor::zeros({7, 2}), std::vector<std::size_t>(7, 0), 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "data");
  }
  EXPECT_THROW(viewpoint_probe(Tensor::zeros({8, 2}), std::vector<std::size_t>(8, 0), 1), Error);
}

TEST(Bins, UniformOverTheRange) {
  EXPECT_EQ(azimuth_bin(0.0, 4), 0u);
  EXPECT_EQ(azimuth_bin(std::numbers::pi / 4 + 1e-9, 4), 2u);
  EXPECT_EQ(azimuth_bin(std::numbers::pi / 2 - 1e-9, 4), 3u);
  // Quarter turns are indistinguishable on a square canvas.
  for (double a : {0.1, 0.5, 1.2}) {
    for (int q = 1; q < 4; ++q) EXPECT_EQ(azimuth_bin(a + q * std::numbers::pi / 2, 4), azimuth_bin(a, 4));
  }
  EXPECT_EQ(tilt_bin(0.0, 4), 0u);
  EXPECT_EQ(tilt_bin(0.5, 4), 3u);
  EXPECT_EQ(tilt_bin(0.2, 4), 1u);
}

}  // namespace
}  // namespace cvd
