#include "cvd/config.hpp"

#include <array>
#include <charconv>
#include <sstream>

#include "cvd/binary_io.hpp"
#include "cvd/error.hpp"

namespace cvd {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::size_t parse_count(std::string_view key, std::string_view text) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw Error("config", "key '" + std::string(key) + "' expects a non-negative integer, got '" + std::string(text) + "'");
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw Error("config", "key '" + std::string(key) + "' expects true/false, got '" + std::string(text) + "'");
}

}  // namespace

std::string format_real(double v) {
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

double parse_real(std::string_view text) {
  text = trim(text);
  const auto parse_one = [&](std::string_view part) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc{} || ptr != part.data() + part.size() || part.empty()) {
      throw Error("config", "not a number: '" + std::string(text) + "'");
    }
    return v;
  };
  if (const auto slash = text.find('/'); slash != std::string_view::npos) {
    const double den = parse_one(trim(text.substr(slash + 1)));
    if (den == 0.0) throw Error("config", "zero denominator in '" + std::string(text) + "'");
    return parse_one(trim(text.substr(0, slash))) / den;
  }
  return parse_one(text);
}

void set_config_value(RunConfig& c, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  auto& m = c.model;
  const auto real = [&] {
    try {
      return parse_real(value);
    } catch (const Error&) {
      throw Error("config", "key '" + std::string(key) + "' expects a number, got '" + std::string(value) + "'");
    }
  };
  if (key == "image_size") m.image_size = parse_count(key, value);
  else if (key == "channels") m.channels = parse_count(key, value);
  else if (key == "d") m.d = parse_count(key, value);
  else if (key == "alpha") m.alpha = real();
  else if (key == "squeeze") m.squeeze = parse_bool(key, value);
  else if (key == "share_encoder") m.share_encoder = parse_bool(key, value);
  else if (key == "tau") m.tau = real();
  else if (key == "lambda1") m.lambda1 = real();
  else if (key == "lambda2") m.lambda2 = real();
  else if (key == "n_projections") m.n_projections = parse_count(key, value);
  else if (key == "bi_infonce") m.bi_infonce = parse_bool(key, value);
  else if (key == "seed") m.seed = parse_count(key, value);
  else if (key == "steps") c.steps = parse_count(key, value);
  else if (key == "batch_size") c.batch_size = parse_count(key, value);
  else if (key == "learning_rate") c.learning_rate = real();
  else if (key == "optimizer") {
    if (value == "adam") c.optimizer = OptimizerKind::adam;
    else if (value == "sgd") c.optimizer = OptimizerKind::sgd;
    else throw Error("config", "optimizer must be sgd or adam, got '" + std::string(value) + "'");
  } else if (key == "dataset_path") c.dataset_path = std::string(value);
  else if (key == "out_dir") c.out_dir = std::string(value);
  else if (key == "eval_every") c.eval_every = parse_count(key, value);
  else if (key == "probe_bins") c.probe_bins = parse_count(key, value);
  else throw Error("config", "unknown key '" + std::string(key) + "'");
}

RunConfig parse_config(std::string_view text) {
  RunConfig c;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error("config", "line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    set_config_value(c, line.substr(0, eq), line.substr(eq + 1));
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  const auto bytes = io::read_file(path);
  return parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void RunConfig::validate() const {
  model.validate();
  if (steps < 1) throw Error("config", "steps must be >= 1");
  if (batch_size < 2) throw Error("config", "batch_size must be >= 2");
  if (!(learning_rate > 0.0)) throw Error("config", "learning_rate must be positive");
  if (eval_every < 1) throw Error("config", "eval_every must be >= 1");
  if (probe_bins < 2) throw Error("config", "probe_bins must be >= 2");
}

std::string to_text(const RunConfig& c) {
  const auto& m = c.model;
  const auto b = [](bool v) { return v ? "true" : "false"; };
  std::ostringstream out;
  out << "image_size = " << m.image_size << '\n'
      << "channels = " << m.channels << '\n'
      << "d = " << m.d << '\n'
      << "alpha = " << format_real(m.alpha) << '\n'
      << "squeeze = " << b(m.squeeze) << '\n'
      << "share_encoder = " << b(m.share_encoder) << '\n'
      << "tau = " << format_real(m.tau) << '\n'
      << "lambda1 = " << format_real(m.lambda1) << '\n'
      << "lambda2 = " << format_real(m.lambda2) << '\n'
      << "n_projections = " << m.n_projections << '\n'
      << "bi_infonce = " << b(m.bi_infonce) << '\n'
      << "seed = " << m.seed << '\n'
      << "steps = " << c.steps << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "learning_rate = " << format_real(c.learning_rate) << '\n'
      << "optimizer = " << (c.optimizer == OptimizerKind::adam ? "adam" : "sgd") << '\n'
      << "dataset_path = " << c.dataset_path << '\n'
      << "out_dir = " << c.out_dir << '\n'
      << "eval_every = " << c.eval_every << '\n'
      << "probe_bins = " << c.probe_bins << '\n';
  return out.str();
}

}  // namespace cvd
