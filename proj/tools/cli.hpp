// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace xd::cli {

enum Exit : int { kOk = 0, kInvalid = 1, kRuntime = 2 };

/// Runs `xdops <args...>` (args exclude the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace xd::cli
