#pragma once

#include "backlash/config.hpp"

#include <iosfwd>

namespace backlash {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2 };

/// Each command writes its files under cfg.output_dir, prints one "OUT <path>" line per
/// file on out, and reports problems on err. Config problems return kExitUsage; module
/// errors and failed checks return kExitRuntime (errors with a JSON body on err).
int cmd_simulate(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_sweep(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_optimize(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_verify(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_stabilize(const RunConfig& cfg, std::ostream& out, std::ostream& err);

}  // namespace backlash
