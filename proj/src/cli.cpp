#include "cvd/cli.hpp"

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "cvd/binary_io.hpp"
#include "cvd/checkpoint.hpp"
#include "cvd/config.hpp"
#include "cvd/error.hpp"
#include "cvd/synthdata.hpp"
#include "cvd/train.hpp"

namespace cvd {

namespace {

namespace fs = std::filesystem;

int exit_code_for(const std::string& kind) {
  if (kind == "io" || kind == "format") return kExitIo;
  if (kind == "diverged") return kExitDiverged;
  return kExitUsage;
}

void write_text(const std::string& path, const std::string& text) {
  const auto dir = fs::path(path).parent_path();
  std::error_code ec;
  if (!dir.empty()) fs::create_directories(dir, ec);
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw Error("io", "cannot write " + path);
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw Error("config", "--set expects key=value, got '" + a + "'");
    set_config_value(config, a.substr(0, eq), a.substr(eq + 1));
  }
  config.validate();
}

// Final metrics of one run per seed, then their column means.
std::string seeds_table(const std::vector<std::uint64_t>& seeds, const std::vector<MetricsRow>& finals,
                        const std::string& prefix = {}) {
  std::ostringstream out;
  std::vector<double> mean(metrics_values(finals.front()).size(), 0.0);
  for (std::size_t i = 0; i < finals.size(); ++i) {
    out << prefix << seeds[i] << ',' << format_metrics_row(finals[i]) << '\n';
    const auto v = metrics_values(finals[i]);
    for (std::size_t j = 0; j < v.size(); ++j) mean[j] += v[j];
  }
  out << prefix << "mean," << finals.front().step;
  for (double m : mean) out << ',' << format_real(m / static_cast<double>(finals.size()));
  out << '\n';
  return out.str();
}

MetricsRow train_one(const RunConfig& config, const Dataset& data, const std::optional<Checkpoint>& resume,
                     std::ostream& out) {
  std::optional<MetricsRow> last;
  run_training(config, data, resume, [&](const MetricsRow& row) {
    out << "step " << row.step << " loss " << format_real(row.losses.total) << " r1_ds "
        << format_real(row.eval.drone_to_satellite.r_at.at(1)) << '\n'
        << std::flush;
    last = row;
  });
  if (!last) throw Error("config", "run already complete at step " + std::to_string(config.steps));
  return *last;
}

void print_retrieval(std::ostream& out, const RetrievalReport& r) {
  out << "direction " << direction_name(r.direction) << '\n'
      << "  queries " << r.n_queries << '\n'
      << "  gallery " << r.n_gallery << '\n';
  for (const auto& [k, v] : r.r_at) out << "  R@" << k << ' ' << format_real(v) << '\n';
  out << "  R@1% " << format_real(r.r_at_1pct) << '\n' << "  AP " << format_real(r.ap) << '\n';
}

constexpr const char* kEvalHeader =
    "split,r1_ds,r5_ds,r10_ds,r1pct_ds,ap_ds,r1_sd,r5_sd,r10_sd,r1pct_sd,ap_sd,psnr,ssim,probe_c,probe_v,"
    "probe_chance";

std::string eval_csv_row(const std::string& split, const EvalReport& e) {
  std::string row = split;
  const auto& ds = e.drone_to_satellite;
  const auto& sd = e.satellite_to_drone;
  for (double v : {ds.r_at.at(1), ds.r_at.at(5), ds.r_at.at(10), ds.r_at_1pct, ds.ap, sd.r_at.at(1), sd.r_at.at(5),
                   sd.r_at.at(10), sd.r_at_1pct, sd.ap, e.psnr, e.ssim, e.probe.acc_from_content,
                   e.probe.acc_from_viewpoint, e.probe.chance}) {
    row += ',';
    row += format_real(v);
  }
  return row;
}

// Applies one ablation value to a copy of the base config.
RunConfig ablation_config(const RunConfig& base, const std::string& axis, const std::string& value) {
  RunConfig c = base;
  if (axis == "alpha") {
    if (value == "nosqueeze") c.model.squeeze = false;
    else c.model.alpha = parse_real(value);
  } else if (axis == "tau") {
    c.model.tau = parse_real(value);
  } else if (axis == "K") {
    set_config_value(c, "n_projections", value);
  } else if (axis == "constraints") {
    if (value == "none") c.model.lambda1 = c.model.lambda2 = 0.0;
    else if (value == "iic") c.model.lambda2 = 0.0;
    else if (value == "irc") c.model.lambda1 = 0.0;
    else if (value != "both") throw Error("config", "constraints value must be none, iic, irc or both, got '" + value + "'");
  }
  c.validate();
  return c;
}

std::string path_safe(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char ch) { return !std::isalnum(static_cast<unsigned char>(ch)) && ch != '.'; }, '_');
  return s;
}

std::vector<std::uint64_t> seed_list(const RunConfig& config, const std::vector<std::uint64_t>& seeds) {
  return seeds.empty() ? std::vector<std::uint64_t>{config.model.seed} : seeds;
}

}  // namespace

std::string sha256_file(const std::string& path) {
  const auto bytes = io::read_file(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("io", "SHA-256 failed for " + path);
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return hex.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Content/viewpoint disentanglement for cross-view retrieval", "cvd"};
  app.require_subcommand(1);

  DatasetSpec gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic cross-view dataset");
  gen_cmd->add_option("--scenes", gen.scenes, "Number of scenes")->required()->check(CLI::Range(2, 1 << 24));
  gen_cmd->add_option("--views", gen.drone_views, "Drone views per scene")->required()->check(CLI::Range(1, 1 << 16));
  gen_cmd->add_option("--size", gen.size, "Image side in pixels")->default_val(32);
  gen_cmd->add_option("--channels", gen.channels, "Image channels")->default_val(1)->check(CLI::Range(1, 16));
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->default_val(0);
  gen_cmd->add_option("--out", gen_out, "Output dataset file")->required();

  std::string config_path, resume_path;
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", config_path, "Run config file")->required();
  train_cmd->add_option("--resume", resume_path, "Checkpoint to continue from");
  train_cmd->add_option("--seeds", seeds, "Run once per seed and summarise")->delimiter(',');
  train_cmd->add_option("--set", overrides, "Override a config key (key=value)");

  std::string ckpt_path, dataset_path, split_name = "test", eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval_cmd->add_option("--dataset", dataset_path, "Dataset file")->required();
  eval_cmd->add_option("--split", split_name, "train or test")->check(CLI::IsMember({"train", "test"}));
  eval_cmd->add_option("--out", eval_out, "CSV output file");

  std::string axis, ablate_out;
  std::vector<std::string> values;
  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep one hyperparameter axis");
  ablate_cmd->add_option("--config", config_path, "Base run config")->required();
  ablate_cmd->add_option("--axis", axis, "alpha, tau, K or constraints")
      ->required()
      ->check(CLI::IsMember({"alpha", "tau", "K", "constraints"}));
  ablate_cmd->add_option("--values", values, "Values along the axis")->required()->delimiter(',');
  ablate_cmd->add_option("--out", ablate_out, "CSV output file")->required();
  ablate_cmd->add_option("--seeds", seeds, "Seeds per value")->delimiter(',');
  ablate_cmd->add_option("--set", overrides, "Override a config key (key=value)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) {
      const auto ds = generate_dataset(gen);
      write_dataset(ds, gen_out);
      out << "records " << ds.records.size() << '\n' << "sha256 " << sha256_file(gen_out) << '\n';
    } else if (*train_cmd) {
      auto config = load_config(config_path);
      apply_overrides(config, overrides);
      const auto data = read_dataset(config.dataset_path);
      std::optional<Checkpoint> resume;
      if (!resume_path.empty()) {
        if (seeds.size() > 1) throw Error("config", "--resume applies to a single run");
        resume = load_checkpoint(resume_path);
      }
      if (seeds.empty()) {
        const auto row = train_one(config, data, resume, out);
        out << kMetricsHeader << '\n' << format_metrics_row(row) << '\n';
      } else {
        std::vector<MetricsRow> finals;
        for (auto seed : seeds) {
          RunConfig c = config;
          c.model.seed = seed;
          c.out_dir = (fs::path(config.out_dir) / ("seed" + std::to_string(seed))).string();
          out << "seed " << seed << '\n';
          finals.push_back(train_one(c, data, resume, out));
        }
        const auto table = std::string("seed,") + kMetricsHeader + '\n' + seeds_table(seeds, finals);
        write_text((fs::path(config.out_dir) / "seeds.csv").string(), table);
        out << table;
      }
    } else if (*eval_cmd) {
      const auto ckpt = load_checkpoint(ckpt_path);
      const auto data = read_dataset(dataset_path);
      const auto model = restore_model(ckpt);
      const auto split = split_name == "train" ? Split::train : Split::test;
      const auto report = evaluate_model(model, data, split, ckpt.config.probe_bins,
                                         probe_seed(ckpt.config.model.seed));
      out << "checkpoint step " << ckpt.step << '\n' << "split " << split_name << '\n';
      print_retrieval(out, report.drone_to_satellite);
      print_retrieval(out, report.satellite_to_drone);
      out << "probe azimuth_bin\n"
          << "  content " << format_real(report.probe.acc_from_content) << '\n'
          << "  viewpoint " << format_real(report.probe.acc_from_viewpoint) << '\n'
          << "  chance " << format_real(report.probe.chance) << '\n'
          << "reconstruction\n"
          << "  psnr " << format_real(report.psnr) << '\n'
          << "  ssim " << format_real(report.ssim) << '\n';
      if (!eval_out.empty()) {
        write_text(eval_out, std::string(kEvalHeader) + '\n' + eval_csv_row(split_name, report) + '\n');
      }
    } else if (*ablate_cmd) {
      auto base = load_config(config_path);
      apply_overrides(base, overrides);
      const auto data = read_dataset(base.dataset_path);
      std::vector<RunConfig> runs;
      for (const auto& v : values) runs.push_back(ablation_config(base, axis, v));
      const auto run_seeds = seed_list(base, seeds);
      std::string table = std::string("axis,value,seed,") + kMetricsHeader + '\n';
      for (std::size_t i = 0; i < runs.size(); ++i) {
        std::vector<MetricsRow> finals;
        for (auto seed : run_seeds) {
          RunConfig c = runs[i];
          c.model.seed = seed;
          c.out_dir = (fs::path(base.out_dir) / ("ablate_" + axis + "_" + path_safe(values[i])) /
                       ("seed" + std::to_string(seed)))
                          .string();
          out << axis << ' ' << values[i] << " seed " << seed << '\n';
          finals.push_back(train_one(c, data, std::nullopt, out));
        }
        const auto prefix = axis + ',' + values[i] + ',';
        if (run_seeds.size() == 1) table += prefix + std::to_string(run_seeds[0]) + ',' + format_metrics_row(finals[0]) + '\n';
        else table += seeds_table(run_seeds, finals, prefix);
      }
      write_text(ablate_out, table);
      out << table;
    }
  } catch (const Error& e) {
    err << "error " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace cvd
