#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cvd/tensor.hpp"

namespace cvd {

enum class Direction { drone_to_satellite, satellite_to_drone };

[[nodiscard]] const char* direction_name(Direction d) noexcept;

// Relevant gallery indices per query.
using Relevance = std::vector<std::vector<std::size_t>>;

struct RetrievalReport {
  double ap = 0.0;
  std::map<std::size_t, double> r_at;  // K in {1, 5, 10}
  double r_at_1pct = 0.0;
  Direction direction = Direction::drone_to_satellite;
  std::size_t n_queries = 0;
  std::size_t n_gallery = 0;
};

enum class ProbeTarget { azimuth_bin, tilt_bin };

struct ProbeReport {
  ProbeTarget probe_target = ProbeTarget::azimuth_bin;
  double acc_from_content = 0.0;
  double acc_from_viewpoint = 0.0;
  double chance = 0.0;
};

// Cosine similarities of unit rows, [Q x N]. Rows are computed independently,
// optionally on several threads (see eval_threads), so the result does not
// depend on the thread count.
Tensor similarity_matrix(const Tensor& queries, const Tensor& gallery);

// Thread cap for similarity_matrix: CVD_THREADS if set and positive, else 1.
[[nodiscard]] std::size_t eval_threads();

// Gallery indices by descending similarity, ties by ascending index.
[[nodiscard]] std::vector<std::size_t> rank_gallery(std::span<const double> similarities);

double recall_at_k(const Tensor& sim, const Relevance& relevance, std::size_t k);
double average_precision(std::span<const double> sim_row, const std::vector<std::size_t>& relevant);
double mean_average_precision(const Tensor& sim, const Relevance& relevance);
[[nodiscard]] std::size_t one_percent_k(std::size_t gallery_size);
double recall_at_1pct(const Tensor& sim, const Relevance& relevance);

RetrievalReport evaluate_retrieval(const Tensor& sim, const Relevance& relevance, Direction direction);

// Peak 1.0; identical inputs return the 99 dB cap.
inline constexpr double kPsnrCap = 99.0;
double psnr(const Tensor& a, const Tensor& b);

// Mean SSIM over non-overlapping window x window tiles of every plane (the
// last two axes are spatial).
double ssim(const Tensor& a, const Tensor& b, std::size_t window = 8, double c1 = 1e-4, double c2 = 9e-4);

// Held-out accuracy of a multinomial linear classifier trained by full-batch
// gradient descent (500 steps) on a seeded 80% split of the rows.
double viewpoint_probe(const Tensor& embeddings, const std::vector<std::size_t>& labels, std::size_t bins,
                       std::uint64_t seed = 0);

[[nodiscard]] std::size_t azimuth_bin(double azimuth, std::size_t bins);
[[nodiscard]] std::size_t tilt_bin(double tilt, std::size_t bins);

}  // namespace cvd
