#include "cvd/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cvd/error.hpp"
#include "cvd/losses.hpp"

namespace cvd {

namespace {

// Seed streams derived from the model seed; kept apart so that adding a draw in
// one place never shifts another.
constexpr std::uint64_t kSamplerStream = 1;
constexpr std::uint64_t kProbeStream = 2;
constexpr std::uint64_t kStepStreamBase = std::uint64_t{1} << 32;

constexpr std::size_t kEvalChunk = 64;

// Rows of an [N x ...] tensor, copied into a new [|idx| x ...] tensor.
Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& idx) {
  const std::size_t row = src.size() / src.dim(0);
  Shape shape = src.shape();
  shape[0] = idx.size();
  std::vector<double> out;
  out.reserve(idx.size() * row);
  const auto& data = src.data();
  for (auto i : idx) out.insert(out.end(), data.begin() + static_cast<std::ptrdiff_t>(i * row),
                                data.begin() + static_cast<std::ptrdiff_t>((i + 1) * row));
  return Tensor(std::move(shape), std::move(out));
}

Tensor row_of(const Tensor& src, std::size_t i) {
  const std::size_t row = src.size() / src.dim(0);
  const auto data = src.data().subspan(i * row, row);
  Shape shape(src.shape().begin() + 1, src.shape().end());
  return Tensor(std::move(shape), std::vector<double>(data.begin(), data.end()));
}

// Concatenates [n_i x ...] tensors along axis 0.
Tensor concat_rows(const std::vector<Tensor>& parts) {
  Shape shape = parts.front().shape();
  shape[0] = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    shape[0] += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor(std::move(shape), std::move(out));
}

struct ViewFeatures {
  Tensor zc, zv;    // [N x c x f x f]
  Tensor pooled_c;  // [N x c]
};

ViewFeatures embed(const CvdModel& model, const std::vector<const Tensor*>& images, View view) {
  Graph g;
  g.set_grad_enabled(false);
  std::vector<Tensor> zc, zv, pc;
  for (std::size_t lo = 0; lo < images.size(); lo += kEvalChunk) {
    const std::size_t hi = std::min(images.size(), lo + kEvalChunk);
    const Tensor x = stack_images({images.begin() + static_cast<std::ptrdiff_t>(lo),
                                   images.begin() + static_cast<std::ptrdiff_t>(hi)});
    auto [c, v] = model.disentangle(g, model.encode(g, x, view), view);
    pc.push_back(CvdModel::pool_content(g, c));
    zc.push_back(std::move(c));
    zv.push_back(std::move(v));
  }
  return {concat_rows(zc), concat_rows(zv), concat_rows(pc)};
}

struct ReconScores {
  double psnr = 0.0;
  double ssim = 0.0;
};

// Decodes `view` images from (content[content_idx[i]], viewpoint[i]) and scores
// them against targets[i]; returns sums over images.
ReconScores score_reconstructions(const CvdModel& model, const Tensor& content,
                                  const std::vector<std::size_t>& content_idx, const Tensor& viewpoint,
                                  const std::vector<const Tensor*>& targets, View view) {
  Graph g;
  g.set_grad_enabled(false);
  ReconScores sum;
  for (std::size_t lo = 0; lo < targets.size(); lo += kEvalChunk) {
    const std::size_t hi = std::min(targets.size(), lo + kEvalChunk);
    std::vector<std::size_t> own(hi - lo);
    std::vector<std::size_t> other(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      own[i - lo] = i;
      other[i - lo] = content_idx[i];
    }
    const Tensor recon =
        model.cross_reconstruct(g, gather_rows(content, other), gather_rows(viewpoint, own), view);
    for (std::size_t i = lo; i < hi; ++i) {
      const Tensor r = row_of(recon, i - lo);
      sum.psnr += psnr(r, *targets[i]);
      sum.ssim += ssim(r, *targets[i]);
    }
  }
  return sum;
}

bool all_finite(const StepLosses& l) {
  return std::isfinite(l.total) && std::isfinite(l.loc) && std::isfinite(l.iic_d) && std::isfinite(l.iic_s) &&
         std::isfinite(l.irc_d) && std::isfinite(l.irc_s);
}

// Model-only fields of a config in canonical text form, one per line.
std::vector<std::string> model_lines(const CvdConfig& model) {
  RunConfig rc;
  rc.model = model;
  std::istringstream in(to_text(rc));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  lines.resize(12);  // the CvdConfig keys come first
  return lines;
}

}  // namespace

std::vector<double> metrics_values(const MetricsRow& row) {
  const auto& l = row.losses;
  const auto& e = row.eval;
  const auto& ds = e.drone_to_satellite;
  const auto& sd = e.satellite_to_drone;
  return {l.total,         l.loc,         l.iic_d,          l.iic_s,         l.irc_d,  l.irc_s,
          ds.r_at.at(1),   ds.r_at.at(5), ds.r_at.at(10),   ds.r_at_1pct,    ds.ap,    sd.r_at.at(1),
          sd.ap,           e.psnr,        e.ssim,           e.probe.acc_from_content, e.probe.acc_from_viewpoint};
}

std::string format_metrics_row(const MetricsRow& row) {
  std::string out = std::to_string(row.step);
  for (double v : metrics_values(row)) {
    out += ',';
    out += format_real(v);
  }
  return out;
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
  if (images.empty()) throw Error("shape", "cannot stack an empty image list");
  const Shape& first = images.front()->shape();
  Shape shape{images.size()};
  shape.insert(shape.end(), first.begin(), first.end());
  std::vector<double> data;
  data.reserve(numel(shape));
  for (const Tensor* img : images) {
    if (img->shape() != first) {
      throw Error("shape", "image " + to_string(img->shape()) + " differs from " + to_string(first));
    }
    data.insert(data.end(), img->data().begin(), img->data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

EvalReport evaluate_model(const CvdModel& model, const Dataset& data, Split split, std::size_t probe_bins,
                          std::uint64_t probe_seed) {
  const auto& cfg = model.config();
  if (cfg.image_size != data.size) {
    throw Error("config", "model image_size=" + std::to_string(cfg.image_size) + " but dataset size=" +
                              std::to_string(data.size));
  }
  if (cfg.channels != data.channels) {
    throw Error("config", "model channels=" + std::to_string(cfg.channels) + " but dataset channels=" +
                              std::to_string(data.channels));
  }
  const auto pairs = data.pairs(split);
  if (pairs.empty()) throw Error("data", "split has no scene pairs");

  // One satellite image per scene, one drone image per pair.
  std::vector<const Tensor*> sat_images, drone_images;
  std::vector<std::size_t> scene_of_drone;
  std::map<std::uint32_t, std::size_t> scene_index;
  Relevance drones_of_scene;
  std::vector<std::size_t> labels;
  for (const auto& p : pairs) {
    auto [it, fresh] = scene_index.emplace(p.scene_id, sat_images.size());
    if (fresh) {
      sat_images.push_back(&p.satellite_image);
      drones_of_scene.emplace_back();
    }
    drones_of_scene[it->second].push_back(drone_images.size());
    scene_of_drone.push_back(it->second);
    drone_images.push_back(&p.drone_image);
    labels.push_back(azimuth_bin(p.drone_vp.azimuth, probe_bins));
  }

  const auto drone = embed(model, drone_images, View::drone);
  const auto sat = embed(model, sat_images, View::satellite);

  EvalReport report;
  Relevance scene_of_query(drone_images.size());
  for (std::size_t i = 0; i < drone_images.size(); ++i) scene_of_query[i] = {scene_of_drone[i]};
  report.drone_to_satellite = evaluate_retrieval(similarity_matrix(drone.pooled_c, sat.pooled_c), scene_of_query,
                                                 Direction::drone_to_satellite);
  report.satellite_to_drone = evaluate_retrieval(similarity_matrix(sat.pooled_c, drone.pooled_c), drones_of_scene,
                                                 Direction::satellite_to_drone);

  // recon_d = D^d(zc_s, zv_d) against the drone image; recon_s = D^s(zc_d, zv_s)
  // against the satellite image of the same pair.
  std::vector<const Tensor*> sat_targets;
  std::vector<std::size_t> drone_row(drone_images.size());
  Tensor zv_s_per_pair = gather_rows(sat.zv, scene_of_drone);
  for (std::size_t i = 0; i < drone_images.size(); ++i) {
    sat_targets.push_back(sat_images[scene_of_drone[i]]);
    drone_row[i] = i;
  }
  const auto rd = score_reconstructions(model, sat.zc, scene_of_drone, drone.zv, drone_images, View::drone);
  const auto rs = score_reconstructions(model, drone.zc, drone_row, zv_s_per_pair, sat_targets, View::satellite);
  const double n = 2.0 * static_cast<double>(drone_images.size());
  report.psnr = (rd.psnr + rs.psnr) / n;
  report.ssim = (rd.ssim + rs.ssim) / n;

  report.probe.probe_target = ProbeTarget::azimuth_bin;
  report.probe.chance = 1.0 / static_cast<double>(probe_bins);
  report.probe.acc_from_content = viewpoint_probe(drone.pooled_c, labels, probe_bins, probe_seed);
  // Each factor is probed in the form the model consumes it: the pooled
  // descriptor for content, the full spatial map for viewpoint.
  const Tensor& zv = drone.zv;
  const Tensor zv_rows(Shape{zv.dim(0), zv.size() / zv.dim(0)}, std::vector<double>(zv.data().begin(), zv.data().end()));
  report.probe.acc_from_viewpoint = viewpoint_probe(zv_rows, labels, probe_bins, probe_seed);
  return report;
}

std::uint64_t probe_seed(std::uint64_t model_seed) noexcept { return derive_seed(model_seed, kProbeStream); }

Trainer::Trainer(RunConfig config, const Dataset& data)
    : config_(std::move(config)),
      data_(data),
      train_pairs_(data.pairs(Split::train)),
      model_(config_.model),
      optimizer_(config_.optimizer, config_.learning_rate),
      sampler_(derive_seed(config_.model.seed, kSamplerStream)) {
  config_.validate();
  index_scenes();
}

Trainer::Trainer(RunConfig config, const Dataset& data, const Checkpoint& from) : Trainer(std::move(config), data) {
  const auto mine = model_lines(config_.model);
  const auto theirs = model_lines(from.config.model);
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i] != theirs[i]) {
      throw Error("config", "checkpoint has '" + theirs[i] + "' but config has '" + mine[i] + "'");
    }
  }
  model_ = restore_model(from);
  optimizer_.load_state(from.optimizer_state, from.step);
  std::istringstream in(from.rng_state);
  in >> sampler_;
  if (in.fail()) throw Error("format", "checkpoint rng state is unreadable");
  step_ = from.step;
}

void Trainer::index_scenes() {
  if (config_.model.image_size != data_.size || config_.model.channels != data_.channels) {
    throw Error("config", "config expects " + std::to_string(config_.model.channels) + "x" +
                              std::to_string(config_.model.image_size) + " images, dataset holds " +
                              std::to_string(data_.channels) + "x" + std::to_string(data_.size));
  }
  std::map<std::uint32_t, std::vector<std::size_t>> by_scene;
  for (std::size_t i = 0; i < train_pairs_.size(); ++i) by_scene[train_pairs_[i].scene_id].push_back(i);
  if (by_scene.size() < config_.batch_size) {
    throw Error("config", "batch_size=" + std::to_string(config_.batch_size) + " exceeds the " +
                              std::to_string(by_scene.size()) + " training scenes");
  }
  views_by_scene_.clear();
  for (auto& [id, idx] : by_scene) views_by_scene_.push_back(std::move(idx));
}

StepLosses Trainer::step() {
  const std::uint64_t s = step_ + 1;

  // Distinct scenes by partial Fisher-Yates, then one drone view each.
  std::vector<std::size_t> scenes(views_by_scene_.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) scenes[i] = i;
  std::vector<const Tensor*> drone, sat;
  for (std::size_t i = 0; i < config_.batch_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, scenes.size() - 1);
    std::swap(scenes[i], scenes[pick(sampler_)]);
    const auto& views = views_by_scene_[scenes[i]];
    std::uniform_int_distribution<std::size_t> view(0, views.size() - 1);
    const auto& pair = train_pairs_[views[view(sampler_)]];
    drone.push_back(&pair.drone_image);
    sat.push_back(&pair.satellite_image);
  }

  Graph g(derive_seed(config_.model.seed, kStepStreamBase + s));
  StepLosses out;
  try {
    model_.zero_grad();
    const auto x_d = stack_images(drone);
    const auto x_s = stack_images(sat);
    const auto fwd = model_.forward_pair(g, x_d, x_s);
    const auto losses = compute_losses(g, fwd, x_d, x_s, config_.model);
    out = {losses.total.item(), losses.loc.item(),   losses.iic_d.item(),
           losses.iic_s.item(), losses.irc_d.item(), losses.irc_s.item()};
    if (!all_finite(out)) throw Error("diverged", "non-finite loss at step " + std::to_string(s));
    g.backward(losses.total);
  } catch (const Error& e) {
    if (e.kind() == "overflow") throw Error("diverged", "step " + std::to_string(s) + ": " + e.what());
    throw;
  }
  optimizer_.step(model_.parameters());
  step_ = s;
  return out;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.step = step_;
  c.config = config_;
  for (const auto& [name, p] : model_.parameters()) c.parameters.emplace(name, p.clone());
  c.optimizer_state = optimizer_.state();
  std::ostringstream rng;
  rng << sampler_;
  c.rng_state = rng.str();
  return c;
}

EvalReport Trainer::evaluate(Split split) const {
  return evaluate_model(model_, data_, split, config_.probe_bins, probe_seed(config_.model.seed));
}

std::vector<MetricsRow> run_training(const RunConfig& config, const Dataset& data,
                                     const std::optional<Checkpoint>& resume,
                                     const std::function<void(const MetricsRow&)>& on_row) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(config.out_dir, ec);
  if (ec) throw Error("io", "cannot create " + config.out_dir + ": " + ec.message());

  Trainer trainer = resume ? Trainer(config, data, *resume) : Trainer(config, data);
  const auto metrics_path = (fs::path(config.out_dir) / "metrics.csv").string();
  const auto ckpt_path = (fs::path(config.out_dir) / "checkpoint.cvdc").string();

  const bool append = resume.has_value() && fs::exists(metrics_path) && fs::file_size(metrics_path) > 0;
  std::ofstream csv(metrics_path, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw Error("io", "cannot write " + metrics_path);
  if (!append) csv << kMetricsHeader << '\n';

  std::vector<MetricsRow> rows;
  while (trainer.steps_done() < config.steps) {
    const auto losses = trainer.step();
    const auto s = trainer.steps_done();
    if (s % config.eval_every != 0 && s != config.steps) continue;
    MetricsRow row{s, losses, trainer.evaluate()};
    csv << format_metrics_row(row) << '\n' << std::flush;
    if (!csv) throw Error("io", "cannot write " + metrics_path);
    save_checkpoint(trainer.checkpoint(), ckpt_path);
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace cvd
