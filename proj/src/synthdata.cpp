#include "cvd/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cvd/binary_io.hpp"
#include "cvd/error.hpp"

namespace cvd {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Object extents in cell units (a cell spans [-0.5, 0.5]).
constexpr double kSquareHalf = 0.35;
constexpr double kDiscRadius = 0.4;
constexpr double kCrossHalfLength = 0.42;
constexpr double kCrossHalfWidth = 0.13;

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

double signed_distance(ObjectShape shape, double dx, double dy) {
  const double ax = std::abs(dx);
  const double ay = std::abs(dy);
  switch (shape) {
    case ObjectShape::square: return std::max(ax, ay) - kSquareHalf;
    case ObjectShape::disc: return std::hypot(dx, dy) - kDiscRadius;
    case ObjectShape::cross:
      return std::min(std::max(ax - kCrossHalfLength, ay - kCrossHalfWidth),
                      std::max(ax - kCrossHalfWidth, ay - kCrossHalfLength));
  }
  return 1.0;
}

// Pixel centre in normalised image coordinates, [-0.5, 0.5].
double pixel_coord(std::size_t i, std::size_t size) {
  return (static_cast<double>(i) + 0.5) / static_cast<double>(size) - 0.5;
}

bool is_identity(const ViewpointFactor& vp) { return vp.azimuth == 0.0 && vp.tilt == 0.0 && vp.scale == 1.0; }

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  // splitmix64 finaliser over the xor of both inputs.
  std::uint64_t z = (seed ^ (stream * 0x9E3779B97F4A7C15ULL)) + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

ContentFactor sample_scene(std::mt19937_64& rng, std::uint32_t scene_id, const SceneSpec& spec) {
  const auto cells = spec.grid * spec.grid;
  if (spec.grid == 0 || spec.objects > cells) {
    throw Error("config", std::to_string(spec.objects) + " objects do not fit a " + std::to_string(spec.grid) +
                              "x" + std::to_string(spec.grid) + " grid");
  }
  std::vector<std::size_t> order(cells);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Partial Fisher-Yates: the first `objects` slots are a uniform sample of cells.
  for (std::size_t i = 0; i < spec.objects; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, cells - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::uniform_int_distribution<int> shape_pick(0, 2);
  std::uniform_real_distribution<double> tone(0.2, 1.0);
  ContentFactor content;
  content.scene_id = scene_id;
  content.grid = spec.grid;
  for (std::size_t i = 0; i < spec.objects; ++i) {
    SceneObject obj;
    obj.row = order[i] / spec.grid;
    obj.col = order[i] % spec.grid;
    obj.shape = static_cast<ObjectShape>(shape_pick(rng));
    obj.tone = to_f32(tone(rng));
    content.layout.push_back(obj);
  }
  return content;
}

ViewpointFactor sample_drone_viewpoint(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ViewpointFactor vp;
  vp.view_kind = View::drone;
  vp.azimuth = to_f32(kTwoPi * unit(rng));
  vp.tilt = to_f32(0.5 * unit(rng));
  vp.scale = to_f32(0.8 + 0.45 * unit(rng));
  vp.shading_dir = to_f32(kTwoPi * unit(rng));
  vp.shading_mag = to_f32(0.3 * unit(rng));
  // float rounding can push 2pi*u up to exactly 2pi
  if (vp.azimuth >= kTwoPi) vp.azimuth = 0.0;
  return vp;
}

ViewpointFactor satellite_viewpoint() noexcept { return ViewpointFactor{}; }

Tensor render_canonical(const ContentFactor& content, std::size_t size, std::size_t channels) {
  if (size < kMinRenderSize) throw Error("config", "render size must be >= " + std::to_string(kMinRenderSize));
  const auto grid = static_cast<double>(content.grid);
  const double cell_px = static_cast<double>(size) / grid;
  std::vector<double> plane(size * size, kBackgroundTone);
  for (std::size_t i = 0; i < size; ++i) {
    const double y = pixel_coord(i, size);
    for (std::size_t j = 0; j < size; ++j) {
      const double x = pixel_coord(j, size);
      for (const auto& obj : content.layout) {
        const double cx = (static_cast<double>(obj.col) + 0.5) / grid - 0.5;
        const double cy = (static_cast<double>(obj.row) + 0.5) / grid - 0.5;
        const double sd = signed_distance(obj.shape, (x - cx) * grid, (y - cy) * grid);
        const double coverage = std::clamp(0.5 - sd * cell_px, 0.0, 1.0);
        if (coverage > 0.0) {
          auto& px = plane[i * size + j];
          px = px * (1.0 - coverage) + obj.tone * coverage;
        }
      }
    }
  }
  std::vector<double> data;
  data.reserve(channels * plane.size());
  for (std::size_t c = 0; c < channels; ++c) data.insert(data.end(), plane.begin(), plane.end());
  return Tensor(Shape{channels, size, size}, std::move(data));
}

Tensor render(const ContentFactor& content, const ViewpointFactor& vp, std::size_t size, std::size_t channels) {
  const Tensor canonical = render_canonical(content, size, 1);
  const auto src = canonical.data();
  std::vector<double> plane(src.begin(), src.end());

  if (!is_identity(vp)) {
    // Forward map A = R(azimuth) * [[s, s*t], [0, s*cos t]]; sample through A^-1.
    const double s = vp.scale;
    const double t = vp.tilt;
    const double ca = std::cos(vp.azimuth);
    const double sa = std::sin(vp.azimuth);
    const double m00 = 1.0 / s;
    const double m01 = -t / (s * std::cos(t));
    const double m11 = 1.0 / (s * std::cos(t));
    const auto n = static_cast<double>(size);
    const auto sample = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
      if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(size) || c >= static_cast<std::ptrdiff_t>(size)) {
        return 0.0;
      }
      return src[static_cast<std::size_t>(r) * size + static_cast<std::size_t>(c)];
    };
    for (std::size_t i = 0; i < size; ++i) {
      const double y = pixel_coord(i, size);
      for (std::size_t j = 0; j < size; ++j) {
        const double x = pixel_coord(j, size);
        // R^T p, then M^-1.
        const double rx = ca * x + sa * y;
        const double ry = -sa * x + ca * y;
        const double qx = m00 * rx + m01 * ry;
        const double qy = m11 * ry;
        const double sx = (qx + 0.5) * n - 0.5;
        const double sy = (qy + 0.5) * n - 0.5;
        const double fx = std::floor(sx);
        const double fy = std::floor(sy);
        const double wx = sx - fx;
        const double wy = sy - fy;
        const auto c0 = static_cast<std::ptrdiff_t>(fx);
        const auto r0 = static_cast<std::ptrdiff_t>(fy);
        plane[i * size + j] = (1.0 - wy) * ((1.0 - wx) * sample(r0, c0) + wx * sample(r0, c0 + 1)) +
                              wy * ((1.0 - wx) * sample(r0 + 1, c0) + wx * sample(r0 + 1, c0 + 1));
      }
    }
  }

  if (vp.shading_mag != 0.0) {
    // Linear ramp spanning exactly [0, shading_mag] over the pixel centres.
    const double dx = std::cos(vp.shading_dir);
    const double dy = std::sin(vp.shading_dir);
    const double reach = (std::abs(dx) + std::abs(dy)) * (0.5 - 0.5 / static_cast<double>(size));
    for (std::size_t i = 0; i < size; ++i) {
      const double y = pixel_coord(i, size);
      for (std::size_t j = 0; j < size; ++j) {
        const double x = pixel_coord(j, size);
        plane[i * size + j] += vp.shading_mag * (0.5 + 0.5 * (dx * x + dy * y) / reach);
      }
    }
  }

  std::vector<double> data;
  data.reserve(channels * plane.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (double v : plane) data.push_back(std::clamp(v, 0.0, 1.0));
  }
  return Tensor(Shape{channels, size, size}, std::move(data));
}

Split split_of(std::uint32_t scene_id) noexcept { return scene_id % 2 == 0 ? Split::train : Split::test; }

std::vector<ScenePair> Dataset::pairs() const {
  std::vector<ScenePair> out;
  const ViewRecord* satellite = nullptr;
  for (const auto& rec : records) {
    if (rec.vp.view_kind == View::satellite) {
      satellite = &rec;
      continue;
    }
    if (satellite == nullptr || satellite->scene_id != rec.scene_id) {
      throw Error("format", "drone record of scene " + std::to_string(rec.scene_id) + " has no satellite record");
    }
    out.push_back(ScenePair{rec.scene_id, rec.image, satellite->image, rec.vp, satellite->vp});
  }
  return out;
}

std::vector<ScenePair> Dataset::pairs(Split split) const {
  auto all = pairs();
  std::erase_if(all, [split](const ScenePair& p) { return split_of(p.scene_id) != split; });
  return all;
}

std::size_t Dataset::scene_count() const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                [](const ViewRecord& r) { return r.vp.view_kind == View::satellite; }));
}

Dataset generate_dataset(const DatasetSpec& spec) {
  if (spec.scenes < 2) throw Error("config", "a dataset needs at least 2 scenes");
  Dataset ds;
  ds.size = spec.size;
  ds.channels = spec.channels;
  const auto quantise = [](Tensor t) {
    for (auto& v : t.mutable_data()) v = to_f32(v);
    return t;
  };
  for (std::size_t s = 0; s < spec.scenes; ++s) {
    const auto id = static_cast<std::uint32_t>(s);
    std::mt19937_64 rng(derive_seed(spec.seed, id));
    const auto content = sample_scene(rng, id, spec.scene);
    const auto sat = satellite_viewpoint();
    ds.records.push_back(ViewRecord{id, sat, quantise(render(content, sat, spec.size, spec.channels))});
    for (std::size_t v = 0; v < spec.drone_views; ++v) {
      const auto vp = sample_drone_viewpoint(rng);
      ds.records.push_back(ViewRecord{id, vp, quantise(render(content, vp, spec.size, spec.channels))});
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CVDS file format

namespace {

constexpr char kDatasetMagic[] = "CVDS";
constexpr std::size_t kHeaderBytes = 4 + 4 * 4;

std::size_t record_bytes(std::size_t size, std::size_t channels) { return 4 + 1 + 5 * 4 + 4 * channels * size * size; }

}  // namespace

std::size_t dataset_file_size(std::size_t records, std::size_t size, std::size_t channels) {
  return kHeaderBytes + records * record_bytes(size, channels);
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  io::ByteWriter w;
  w.raw(std::string_view(kDatasetMagic, 4));
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.records.size()));
  w.u32(static_cast<std::uint32_t>(ds.size));
  w.u32(static_cast<std::uint32_t>(ds.channels));
  for (const auto& rec : ds.records) {
    if (rec.image.size() != ds.channels * ds.size * ds.size) {
      throw Error("shape", "record image " + to_string(rec.image.shape()) + " does not match dataset geometry");
    }
    w.u32(rec.scene_id);
    w.u8(rec.vp.view_kind == View::satellite ? 0 : 1);
    for (double v : {rec.vp.azimuth, rec.vp.tilt, rec.vp.scale, rec.vp.shading_dir, rec.vp.shading_mag}) {
      w.f32(static_cast<float>(v));
    }
    for (double v : rec.image.data()) w.f32(static_cast<float>(v));
  }
  return w.bytes();
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != std::string_view(kDatasetMagic, 4)) io::ByteReader::fail_at(0, "bad magic");
  const auto version_at = r.offset();
  const auto version = r.u32();
  if (version != kDatasetVersion) {
    io::ByteReader::fail_at(version_at, "unsupported dataset version " + std::to_string(version) + " (expected " +
                                            std::to_string(kDatasetVersion) + ")");
  }
  const auto n = r.u32();
  Dataset ds;
  ds.size = r.u32();
  ds.channels = r.u32();
  if (ds.size == 0 || ds.channels == 0) io::ByteReader::fail_at(12, "empty image geometry");
  const auto pixels = ds.channels * ds.size * ds.size;
  if (r.remaining() != static_cast<std::size_t>(n) * record_bytes(ds.size, ds.channels)) {
    // Report where the first incomplete (or surplus) record starts.
    const auto whole = r.remaining() / record_bytes(ds.size, ds.channels);
    io::ByteReader::fail_at(kHeaderBytes + std::min<std::size_t>(whole, n) * record_bytes(ds.size, ds.channels),
                            "record section holds " + std::to_string(r.remaining()) + " bytes for " +
                                std::to_string(n) + " records");
  }
  ds.records.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    ViewRecord rec;
    rec.scene_id = r.u32();
    const auto kind_at = r.offset();
    const auto kind = r.u8();
    if (kind > 1) io::ByteReader::fail_at(kind_at, "invalid view kind " + std::to_string(kind));
    rec.vp.view_kind = kind == 0 ? View::satellite : View::drone;
    rec.vp.azimuth = r.f32();
    rec.vp.tilt = r.f32();
    rec.vp.scale = r.f32();
    rec.vp.shading_dir = r.f32();
    rec.vp.shading_mag = r.f32();
    std::vector<double> data(pixels);
    for (auto& v : data) v = r.f32();
    rec.image = Tensor(Shape{ds.channels, ds.size, ds.size}, std::move(data));
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

void write_dataset(const Dataset& dataset, const std::string& path) { io::write_file(path, encode_dataset(dataset)); }

Dataset read_dataset(const std::string& path) { return decode_dataset(io::read_file(path)); }

}  // namespace cvd
