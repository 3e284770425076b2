#pragma once

#include <stdexcept>
#include <string>

namespace cvd {

// Every failure raised by the library carries a short machine-readable kind
// ("shape", "domain", "config", "format", ...) next to the human message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(kind + ": " + message), kind_(std::move(kind)) {}

  [[nodiscard]] const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

}  // namespace cvd
