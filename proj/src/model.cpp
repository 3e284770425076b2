#include "cvd/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cvd/error.hpp"

namespace cvd {

namespace {

std::size_t at_least4(std::size_t v) { return std::max<std::size_t>(4, v); }

std::vector<std::size_t> encoder_widths(std::size_t d) { return {at_least4(d / 4), at_least4(d / 2), d}; }

std::vector<std::size_t> decoder_widths(std::size_t d, std::size_t channels) {
  return {at_least4(d / 2), at_least4(d / 4), channels};
}

}  // namespace

const char* view_name(View view) noexcept { return view == View::drone ? "drone" : "satellite"; }

void CvdConfig::validate() const {
  if (image_size < 8 || image_size % 8 != 0) {
    throw Error("config", "image_size must be a positive multiple of 8, got " + std::to_string(image_size));
  }
  if (channels < 1) throw Error("config", "channels must be >= 1");
  if (d < 1) throw Error("config", "d must be >= 1");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw Error("config", "alpha must lie in (0, 1]");
  if (!(tau > 0.0)) throw Error("config", "tau must be positive");
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw Error("config", "loss weights must be non-negative");
  if (n_projections < 1) throw Error("config", "n_projections must be >= 1");
  (void)split_channels(d, alpha, squeeze);
}

ChannelSplit split_channels(std::size_t d, double alpha, bool squeeze) {
  if (!squeeze) return {d, d};
  const auto content = static_cast<std::size_t>(std::llround(alpha * static_cast<double>(d)));
  if (content == 0 || content >= d) {
    throw Error("config", "alpha=" + std::to_string(alpha) + " with d=" + std::to_string(d) +
                              " leaves an empty content or viewpoint factor");
  }
  return {content, d - content};
}

CvdModel::CvdModel(CvdConfig config) : config_(config) {
  config_.validate();
  split_ = split_channels(config_.d, config_.alpha, config_.squeeze);

  const auto enc = encoder_widths(config_.d);
  std::vector<View> branches = {View::drone};
  if (!config_.share_encoder) branches.push_back(View::satellite);
  for (View v : branches) {
    std::size_t in = config_.channels;
    for (std::size_t i = 0; i < kBlocks; ++i) {
      add_conv(branch(v) + ".encoder.block" + std::to_string(i), enc[i], in);
      in = enc[i];
    }
    add_conv(branch(v) + ".head_content", split_.content, config_.d);
    add_conv(branch(v) + ".head_viewpoint", split_.viewpoint, config_.d);
  }
  const auto dec = decoder_widths(config_.d, config_.channels);
  for (View v : {View::drone, View::satellite}) {
    std::size_t in = split_.content + split_.viewpoint;
    for (std::size_t i = 0; i < kBlocks; ++i) {
      add_conv(std::string("decoder_") + view_name(v) + ".block" + std::to_string(i), dec[i], in);
      in = dec[i];
    }
  }

  // He-normal weights, zero biases, drawn in lexicographic parameter order.
  std::mt19937_64 rng(config_.seed);
  for (auto& [name, tensor] : params_) {
    if (name.ends_with(".bias")) continue;
    const double fan_in = static_cast<double>(tensor.dim(1) * tensor.dim(2) * tensor.dim(3));
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
    for (auto& w : tensor.mutable_data()) w = normal(rng);
  }
}

void CvdModel::add_conv(const std::string& prefix, std::size_t out, std::size_t in) {
  params_.emplace(prefix + ".weight", Tensor::zeros(Shape{out, in, 3, 3}, true));
  params_.emplace(prefix + ".bias", Tensor::zeros(Shape{out}, true));
}

std::string CvdModel::branch(View view) const {
  if (config_.share_encoder) return "shared";
  return std::string("branch_") + view_name(view);
}

const Tensor& CvdModel::param(const std::string& name) const {
  const auto it = params_.find(name);
  if (it == params_.end()) throw Error("config", "missing parameter " + name);
  return it->second;
}

std::size_t CvdModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

void CvdModel::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

Tensor CvdModel::encode(Graph& g, const Tensor& image, View view) const {
  if (image.rank() != 4 || image.dim(1) != config_.channels || image.dim(2) != config_.image_size ||
      image.dim(3) != config_.image_size) {
    throw Error("shape", "image " + to_string(image.shape()) + " does not match config (channels=" +
                             std::to_string(config_.channels) + ", size=" + std::to_string(config_.image_size) + ")");
  }
  Tensor h = image;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    const auto prefix = branch(view) + ".encoder.block" + std::to_string(i);
    h = g.relu(g.add_channel_bias(g.conv2d(h, param(prefix + ".weight"), 2, 1), param(prefix + ".bias")));
  }
  return h;
}

std::pair<Tensor, Tensor> CvdModel::disentangle(Graph& g, const Tensor& z, View view) const {
  if (z.rank() != 4 || z.dim(1) != config_.d) {
    throw Error("shape", "feature map " + to_string(z.shape()) + " does not have width d=" + std::to_string(config_.d));
  }
  const auto head = [&](const std::string& name) {
    const auto prefix = branch(view) + "." + name;
    return g.add_channel_bias(g.conv2d(z, param(prefix + ".weight"), 1, 1), param(prefix + ".bias"));
  };
  return {head("head_content"), head("head_viewpoint")};
}

Tensor CvdModel::pool_content(Graph& g, const Tensor& zc) {
  return g.l2_normalize_rows(g.global_avg_pool(zc));
}

Tensor CvdModel::cross_reconstruct(Graph& g, const Tensor& zc_other, const Tensor& zv_own, View view) const {
  if (zc_other.rank() != 4 || zv_own.rank() != 4 || zc_other.dim(0) != zv_own.dim(0) ||
      zc_other.dim(2) != zv_own.dim(2) || zc_other.dim(3) != zv_own.dim(3)) {
    throw Error("shape", "content " + to_string(zc_other.shape()) + " and viewpoint " +
                             to_string(zv_own.shape()) + " are not spatially aligned");
  }
  Tensor h = g.concat_channels(zc_other, zv_own);
  for (std::size_t i = 0; i < kBlocks; ++i) {
    const auto prefix = std::string("decoder_") + view_name(view) + ".block" + std::to_string(i);
    h = g.add_channel_bias(g.conv2d(g.upsample_nearest2x(h), param(prefix + ".weight"), 1, 1),
                           param(prefix + ".bias"));
    h = i + 1 < kBlocks ? g.relu(h) : g.sigmoid(h);
  }
  return h;
}

PairOutput CvdModel::forward_pair(Graph& g, const Tensor& drone, const Tensor& satellite) const {
  if (drone.rank() != 4 || satellite.rank() != 4 || drone.dim(0) != satellite.dim(0)) {
    throw Error("shape", "drone batch " + to_string(drone.shape()) + " and satellite batch " +
                             to_string(satellite.shape()) + " differ");
  }
  PairOutput out;
  auto& f = out.factors;
  f.z_d = encode(g, drone, View::drone);
  f.z_s = encode(g, satellite, View::satellite);
  std::tie(f.zc_d, f.zv_d) = disentangle(g, f.z_d, View::drone);
  std::tie(f.zc_s, f.zv_s) = disentangle(g, f.z_s, View::satellite);
  f.pooled_c_d = pool_content(g, f.zc_d);
  f.pooled_c_s = pool_content(g, f.zc_s);
  out.recon_d = cross_reconstruct(g, f.zc_s, f.zv_d, View::drone);
  out.recon_s = cross_reconstruct(g, f.zc_d, f.zv_s, View::satellite);
  return out;
}

}  // namespace cvd
