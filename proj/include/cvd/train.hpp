#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cvd/checkpoint.hpp"
#include "cvd/config.hpp"
#include "cvd/eval.hpp"
#include "cvd/model.hpp"
#include "cvd/optim.hpp"
#include "cvd/synthdata.hpp"

namespace cvd {

struct StepLosses {
  double total = 0.0;
  double loc = 0.0;
  double iic_d = 0.0, iic_s = 0.0;
  double irc_d = 0.0, irc_s = 0.0;
};

struct EvalReport {
  RetrievalReport drone_to_satellite;
  RetrievalReport satellite_to_drone;
  ProbeReport probe;
  double psnr = 0.0;  // mean over both cross-reconstructions
  double ssim = 0.0;
};

struct MetricsRow {
  std::uint64_t step = 0;
  StepLosses losses;
  EvalReport eval;
};

inline constexpr const char* kMetricsHeader =
    "step,loss_total,loss_loc,loss_iic_d,loss_iic_s,loss_irc_d,loss_irc_s,r1_ds,r5_ds,r10_ds,r1pct_ds,ap_ds,r1_sd,"
    "ap_sd,psnr,ssim,probe_c,probe_v";

// The numeric columns after `step`, in header order.
std::vector<double> metrics_values(const MetricsRow& row);
std::string format_metrics_row(const MetricsRow& row);

// Stacks [C x S x S] images into one [N x C x S x S] batch.
Tensor stack_images(const std::vector<const Tensor*>& images);

// Embeds every view of one split with gradients off and measures retrieval in
// both directions, an azimuth probe on the drone views (pooled content
// descriptor vs flattened viewpoint map), and cross-reconstruction PSNR/SSIM.
// Throws Error("config") when the dataset geometry does not fit the model.
EvalReport evaluate_model(const CvdModel& model, const Dataset& data, Split split, std::size_t probe_bins,
                          std::uint64_t probe_seed);

// Seed of the probe's train/test split for a run with this model seed.
[[nodiscard]] std::uint64_t probe_seed(std::uint64_t model_seed) noexcept;

// Drives optimisation over the train split. Each step draws batch_size
// distinct train scenes with one random drone view each.
class Trainer {
 public:
  Trainer(RunConfig config, const Dataset& data);
  // Continues from a checkpoint; the model part of `config` must match it.
  Trainer(RunConfig config, const Dataset& data, const Checkpoint& from);

  // One optimisation step. Throws Error("diverged") naming the step on a
  // non-finite loss.
  StepLosses step();

  [[nodiscard]] std::uint64_t steps_done() const noexcept { return step_; }
  [[nodiscard]] const CvdModel& model() const noexcept { return model_; }
  [[nodiscard]] const RunConfig& config() const noexcept { return config_; }
  [[nodiscard]] Checkpoint checkpoint() const;

  EvalReport evaluate(Split split = Split::test) const;

 private:
  void index_scenes();

  RunConfig config_;
  const Dataset& data_;
  std::vector<ScenePair> train_pairs_;
  std::vector<std::vector<std::size_t>> views_by_scene_;  // indices into train_pairs_
  CvdModel model_;
  Optimizer optimizer_;
  std::mt19937_64 sampler_;
  std::uint64_t step_ = 0;
};

// Runs (or resumes) training to config.steps inside config.out_dir: appends
// rows to metrics.csv after every eval_every steps and at the last step, and
// writes checkpoint.cvdc alongside. Returns the rows produced by this call.
std::vector<MetricsRow> run_training(const RunConfig& config, const Dataset& data,
                                     const std::optional<Checkpoint>& resume = std::nullopt,
                                     const std::function<void(const MetricsRow&)>& on_row = {});

}  // namespace cvd
