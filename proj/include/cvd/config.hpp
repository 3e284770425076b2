#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "cvd/model.hpp"

namespace cvd {

enum class OptimizerKind { sgd, adam };

struct RunConfig {
  CvdConfig model;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::string dataset_path;
  std::string out_dir = "runs/cvd";
  std::size_t eval_every = 500;
  std::size_t probe_bins = 4;

  void validate() const;
};

// Config files are UTF-8 lines of `key = value`; `#` starts a comment.
// Unknown keys and malformed values raise Error("config").
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

// Applies one `key = value` (or `key=value`) assignment.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);

// Canonical text form; parse_config(to_text(c)) reproduces c exactly.
std::string to_text(const RunConfig& config);

// Shortest round-trip decimal form.
std::string format_real(double v);

// Accepts decimals and fractions such as "1/3".
double parse_real(std::string_view text);

}  // namespace cvd
