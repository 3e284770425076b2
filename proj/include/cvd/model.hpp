#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cvd/graph.hpp"
#include "cvd/tensor.hpp"

namespace cvd {

enum class View { drone, satellite };

[[nodiscard]] const char* view_name(View view) noexcept;

struct CvdConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t d = 64;
  double alpha = 0.5;
  bool squeeze = true;
  bool share_encoder = true;
  double tau = 0.05;
  double lambda1 = 10.0;
  double lambda2 = 0.2;
  std::size_t n_projections = 64;
  bool bi_infonce = false;
  std::uint64_t seed = 0;

  // Throws Error("config") when any field is out of range.
  void validate() const;
};

struct ChannelSplit {
  std::size_t content;
  std::size_t viewpoint;
};

// round(alpha * d) content channels, the remainder to viewpoint; both d when
// squeeze is off. Throws Error("config") if either side would be empty.
[[nodiscard]] ChannelSplit split_channels(std::size_t d, double alpha, bool squeeze);

struct FactorPair {
  Tensor z_d, z_s;
  Tensor zc_d, zc_s;
  Tensor zv_d, zv_s;
  Tensor pooled_c_d, pooled_c_s;
};

struct PairOutput {
  FactorPair factors;
  Tensor recon_d;  // D^d(zc_s, zv_d)
  Tensor recon_s;  // D^s(zc_d, zv_s)
};

// Lexicographically ordered, so iteration (and initialisation) is deterministic.
using Parameters = std::map<std::string, Tensor>;

// Siamese content/viewpoint network: per-view encoder, two 3x3 disentanglement
// heads, and one cross-reconstruction decoder per view.
//
// Encoder: three stride-2 conv3x3 blocks (conv -> bias -> ReLU) with widths
// d/4, d/2, d. Decoder: three (nearest 2x upsample -> conv3x3 -> bias) blocks
// with widths d/2, d/4, channels; ReLU between blocks and a final sigmoid.
class CvdModel {
 public:
  static constexpr std::size_t kBlocks = 3;

  explicit CvdModel(CvdConfig config);

  [[nodiscard]] const CvdConfig& config() const noexcept { return config_; }
  [[nodiscard]] ChannelSplit split() const noexcept { return split_; }
  [[nodiscard]] std::size_t feature_size() const noexcept { return config_.image_size >> kBlocks; }

  [[nodiscard]] Parameters& parameters() noexcept { return params_; }
  [[nodiscard]] const Parameters& parameters() const noexcept { return params_; }
  [[nodiscard]] std::size_t parameter_count() const;
  void zero_grad();

  Tensor encode(Graph& g, const Tensor& image, View view) const;
  std::pair<Tensor, Tensor> disentangle(Graph& g, const Tensor& z, View view) const;
  static Tensor pool_content(Graph& g, const Tensor& zc);
  Tensor cross_reconstruct(Graph& g, const Tensor& zc_other, const Tensor& zv_own, View view) const;
  PairOutput forward_pair(Graph& g, const Tensor& drone, const Tensor& satellite) const;

 private:
  [[nodiscard]] std::string branch(View view) const;
  [[nodiscard]] const Tensor& param(const std::string& name) const;
  void add_conv(const std::string& prefix, std::size_t out, std::size_t in);

  CvdConfig config_;
  ChannelSplit split_;
  Parameters params_;
};

}  // namespace cvd
