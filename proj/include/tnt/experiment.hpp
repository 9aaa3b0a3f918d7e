#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tnt/allocator.hpp"
#include "tnt/cost.hpp"
#include "tnt/data.hpp"
#include "tnt/pruning.hpp"
#include "tnt/vit.hpp"

namespace tnt {

struct AllocatorSpec {
  HeadKind kind = HeadKind::linear;
  int64_t hidden = 0;  // mlp head width; 0 means dim/2
  std::vector<int64_t> noised_layers = {1};  // feeds the default location-2 schedule
  double beta = 0.02;
  TrainConfig train;  // epochs defaults to 40 here
};

struct SweepSpec {
  std::vector<std::string> methods;
  std::vector<int64_t> keep_counts;  // absolute final patch counts, descending
  bool throughput = false;
  int64_t eval_batch = 64;
  bool write_history = true;
};

// One experiment, fully specified: the dataset geometry mirrors the model so
// the two can never disagree. Seeds drive everything downstream (data, init,
// shuffling, noise, partitions); two runs with equal config and seeds are
// byte-identical.
struct ExperimentConfig {
  ModelConfig model;
  DatasetSpec data;
  double train_fraction = 0.5;
  TrainConfig backbone;
  AllocatorSpec allocator;
  PruneSchedule schedule;
  SweepSpec sweep;
  std::vector<uint64_t> seeds = {1};
  std::string out_dir = "out";

  void validate() const;  // config_error
};

// Strict parser: JSON object, unknown keys rejected, every value type-checked.
// "informative" takes either a patch-id array or "center:<count>".
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

// The analytic tokens-per-layer profile of a schedule, matching what
// apply_schedule reports, without running the model.
std::vector<int64_t> profile_of(const PruneSchedule& schedule, const ModelConfig& mc);

uint64_t fnv1a64(std::string_view bytes);
std::string version_string();

// Shard pool used by sweeps; TNT_THREADS caps the width (default: hardware
// concurrency). Results never depend on the width, only on the shard count.
int64_t shard_threads();
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

// Commands. Each writes its artifacts plus a manifest_<command>.json into
// cfg.out_dir and returns the paths it wrote, manifest last. config_text is
// the effective config serialization whose hash lands in the manifest.
std::vector<std::string> cmd_train_backbone(const ExperimentConfig& cfg,
                                            const std::string& config_text);
std::vector<std::string> cmd_train_allocator(const ExperimentConfig& cfg,
                                             const std::string& config_text);
std::vector<std::string> cmd_sweep(const ExperimentConfig& cfg, const std::string& config_text);
std::vector<std::string> cmd_flops(const ExperimentConfig& cfg, const std::string& config_text);
std::vector<std::string> cmd_flops_preset(const std::string& preset, const std::string& out_dir);
std::vector<std::string> cmd_render_map(const ExperimentConfig& cfg,
                                        const std::string& history_path,
                                        std::span<const int64_t> samples,
                                        const std::string& config_text);

// Paths the commands agree on.
std::string backbone_path(const std::string& out_dir, uint64_t seed);
std::string allocator_path(const std::string& out_dir, uint64_t seed);

}  // namespace tnt
