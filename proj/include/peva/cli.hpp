#pragma once

#include <string>

#include "json.hpp"

namespace peva {

/// Exit statuses of the `peva` tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

int run_cli(int argc, char** argv);

/// JSON text in which every floating-point value carries 17 significant digits.
std::string dump_json(const nlohmann::json& value, int indent = 2);

}  // namespace peva
