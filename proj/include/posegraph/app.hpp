#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "posegraph/config.hpp"

// Commands behind the `posegraph` executable. Every command reads one flat
// configuration (sections data, detector, spatial, train, eval, infer),
// writes its outputs plus an echo of the effective configuration and a
// manifest.json carrying the configuration hash into the output directory,
// and throws posegraph::Error on failure.

namespace posegraph {

/// Every recognized key with its default value. Config files and overrides
/// may only set keys listed here.
ConfigMap default_run_config();

struct RunOptions {
  std::filesystem::path config_path;  // optional INI file
  std::vector<std::string> overrides;  // "section.key=value", applied last
  /// Sets both data.seed and train.seed.
  std::optional<std::uint64_t> seed;
};

/// defaults <- file <- seed <- overrides. Throws on unknown keys.
ConfigMap resolve_config(const RunOptions& options);

/// Writes a synthetic dataset (data.count scenes from data.seed).
void cmd_gen(const ConfigMap& config, const std::filesystem::path& out);

/// Staged training on train.dataset. Writes detector.model, spatial.model,
/// unified.model and metrics.csv. With train.resume, stage 1 (and stage 2,
/// if its configuration also matches) is loaded from a previous run in
/// `out` instead of retrained; a configuration mismatch refuses to run.
void cmd_train(const ConfigMap& config, const std::filesystem::path& out);

/// Detection-rate curves of every model in eval.models on eval.dataset,
/// written to curves.csv.
void cmd_eval(const ConfigMap& config, const std::filesystem::path& out, std::ostream& log);

/// Per-joint predictions for one image (prediction.json) and, optionally,
/// the heat-maps (heatmaps.pgnn).
void cmd_infer(const ConfigMap& config, const std::filesystem::path& out);

/// Runs the dataset-free suites, printing one line per check. Returns true
/// if all passed.
bool cmd_selftest(std::ostream& log, bool sabotage_fft = false);

/// Hash over the keys that determine the stage-1 (detector) result.
std::string stage1_hash(const ConfigMap& config);
/// Stage-1 keys plus those that determine the stage-2 (spatial) result.
std::string stage2_hash(const ConfigMap& config);

}  // namespace posegraph
