#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cvd/model.hpp"
#include "cvd/tensor.hpp"

namespace cvd {

// Procedural cross-view world. A scene is a handful of objects on a G x G
// grid (the content factor); a view renders it through an affine camera with
// a linear shading field (the viewpoint factor). Satellite views use the
// canonical nadir frame, drone views sample every viewpoint field.

enum class ObjectShape : std::uint8_t { square, disc, cross };

struct SceneObject {
  std::size_t row = 0;
  std::size_t col = 0;
  ObjectShape shape = ObjectShape::square;
  double tone = 1.0;  // [0.2, 1.0]
};

struct ContentFactor {
  std::uint32_t scene_id = 0;
  std::size_t grid = 6;
  std::vector<SceneObject> layout;
};

struct ViewpointFactor {
  View view_kind = View::satellite;
  double azimuth = 0.0;      // [0, 2pi)
  double tilt = 0.0;         // [0, 0.5], shear magnitude
  double scale = 1.0;        // [0.8, 1.25]
  double shading_dir = 0.0;  // radians
  double shading_mag = 0.0;  // [0, 0.3]

  friend bool operator==(const ViewpointFactor&, const ViewpointFactor&) = default;
};

struct ScenePair {
  std::uint32_t scene_id = 0;
  Tensor drone_image;      // [C x S x S]
  Tensor satellite_image;  // [C x S x S]
  ViewpointFactor drone_vp;
  ViewpointFactor sat_vp;
};

struct SceneSpec {
  std::size_t objects = 5;
  std::size_t grid = 6;
};

inline constexpr double kBackgroundTone = 0.15;
inline constexpr std::size_t kMinRenderSize = 16;

// Throws Error("config") when objects > grid^2.
ContentFactor sample_scene(std::mt19937_64& rng, std::uint32_t scene_id, const SceneSpec& spec = {});
ViewpointFactor sample_drone_viewpoint(std::mt19937_64& rng);
ViewpointFactor satellite_viewpoint() noexcept;

// Anti-aliased rasterisation of the layout in the canonical frame, [C x S x S].
Tensor render_canonical(const ContentFactor& content, std::size_t size, std::size_t channels = 1);
// Canonical raster warped by the viewpoint's affine map (bilinear, zero
// padding), plus the shading field, clamped to [0, 1].
Tensor render(const ContentFactor& content, const ViewpointFactor& vp, std::size_t size, std::size_t channels = 1);

// One stored view: what the CVDS file holds per record.
struct ViewRecord {
  std::uint32_t scene_id = 0;
  ViewpointFactor vp;
  Tensor image;  // [C x S x S], every value exactly representable as f32
};

enum class Split { train, test };

[[nodiscard]] Split split_of(std::uint32_t scene_id) noexcept;

struct Dataset {
  std::size_t size = 0;
  std::size_t channels = 1;
  // Sorted by (scene_id, view kind): each scene's satellite record first, then
  // its drone records in generation order.
  std::vector<ViewRecord> records;

  [[nodiscard]] std::vector<ScenePair> pairs() const;
  [[nodiscard]] std::vector<ScenePair> pairs(Split split) const;
  [[nodiscard]] std::size_t scene_count() const;
};

struct DatasetSpec {
  std::size_t scenes = 200;
  std::size_t drone_views = 4;
  std::size_t size = 32;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
  SceneSpec scene;
};

// Scenes are generated from per-scene seeds derived from (seed, scene_id), so
// the result does not depend on generation order.
Dataset generate_dataset(const DatasetSpec& spec);

constexpr std::uint32_t kDatasetVersion = 1;
[[nodiscard]] std::size_t dataset_file_size(std::size_t records, std::size_t size, std::size_t channels);

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

[[nodiscard]] std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

}  // namespace cvd
