#pragma once

#include <iosfwd>

namespace srnn {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitDiverged = 2, kExitIo = 3 };

/// The `srnn` command line. Subcommands:
///   simulate            config -> <out>/trajectory.txt, simulate.json
///   gen-data            config -> <out>/dataset.txt
///   train               dataset + config -> <out>/checkpoint.bin, curve.csv, train.json
///   evaluate            checkpoint + dataset (or trajectory + reference) -> <out>/metrics.json, metrics.csv
///   compare-integrators config -> <out>/compare.csv, compare.json, checkpoint_<scheme>.bin
///   convergence         config -> <out>/convergence.csv
///   precess-demo        config -> <out>/point.txt, rigid.txt, [learned.txt], precession.csv, periapsis.csv
/// Flags --seed, --scheme, --steps, --h and --substeps override the config.
/// Returns 0 on success, 1 on usage or config errors, 2 on numerical
/// divergence, 3 on I/O errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace srnn
