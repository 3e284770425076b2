#include "cvd/checkpoint.hpp"

#include <limits>

#include "cvd/binary_io.hpp"
#include "cvd/error.hpp"

namespace cvd {

namespace {

constexpr char kMagic[] = "CVDC";
constexpr std::string_view kModelPrefix = "model.";
constexpr std::string_view kOptimPrefix = "optim.";

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> tensors;
  for (const auto& [name, t] : ckpt.parameters) tensors.emplace(std::string(kModelPrefix) + name, &t);
  for (const auto& [name, t] : ckpt.optimizer_state) tensors.emplace(std::string(kOptimPrefix) + name, &t);

  io::ByteWriter w;
  w.raw(std::string_view(kMagic, 4));
  w.u32(kCheckpointVersion);
  w.u64(ckpt.step);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw Error("format", "tensor name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u8(static_cast<std::uint8_t>(t->rank()));
    for (auto d : t->shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t->data()) w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.rng_state.size()));
  w.raw(ckpt.rng_state);
  const auto text = to_text(ckpt.config);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text);
  return w.bytes();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < 4 || r.raw(4) != std::string_view(kMagic, 4)) io::ByteReader::fail_at(0, "bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    io::ByteReader::fail_at(4, "checkpoint version " + std::to_string(version) + " found, expected " +
                                   std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  ckpt.step = r.u64();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.raw(r.u16());
    const auto rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) r.fail("zero dimension in tensor " + name);
    }
    const auto n = numel(shape);
    if (r.remaining() / 8 < n) r.fail("truncated data of tensor " + name);
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    Tensor t(std::move(shape), std::move(data));
    if (name.starts_with(kModelPrefix)) {
      t.set_requires_grad(true);
      ckpt.parameters.emplace(name.substr(kModelPrefix.size()), std::move(t));
    } else if (name.starts_with(kOptimPrefix)) {
      ckpt.optimizer_state.emplace(name.substr(kOptimPrefix.size()), std::move(t));
    } else {
      r.fail("unknown tensor namespace in " + name);
    }
  }
  ckpt.rng_state = r.raw(r.u32());
  const auto text_at = r.offset();
  const auto text = r.raw(r.u32());
  if (r.remaining() != 0) r.fail("trailing bytes after config snapshot");
  try {
    ckpt.config = parse_config(text);
  } catch (const Error& e) {
    io::ByteReader::fail_at(text_at, std::string("invalid config snapshot (") + e.what() + ")");
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  io::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

CvdModel restore_model(const Checkpoint& ckpt) {
  CvdModel model(ckpt.config.model);
  auto& params = model.parameters();
  if (params.size() != ckpt.parameters.size()) {
    throw Error("format", "checkpoint holds " + std::to_string(ckpt.parameters.size()) + " tensors, model expects " +
                              std::to_string(params.size()));
  }
  for (auto& [name, p] : params) {
    const auto it = ckpt.parameters.find(name);
    if (it == ckpt.parameters.end()) throw Error("format", "checkpoint lacks parameter " + name);
    if (it->second.shape() != p.shape()) {
      throw Error("format", "parameter " + name + " has shape " + to_string(it->second.shape()) + ", expected " +
                                to_string(p.shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(), p.mutable_data().begin());
  }
  return model;
}

}  // namespace cvd
