#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cvd {

// Exit codes of the `cvd` tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitIo = 2, kExitDiverged = 3 };

// Entry point of `cvd gen-data|train|eval|ablate`; never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Lowercase hex SHA-256 of a file.
std::string sha256_file(const std::string& path);

}  // namespace cvd
