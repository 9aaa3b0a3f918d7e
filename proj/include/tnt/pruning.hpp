#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tnt/allocator.hpp"
#include "tnt/common.hpp"
#include "tnt/tensor.hpp"
#include "tnt/vit.hpp"

namespace tnt {

enum class PartitionKind { random, sequential };
enum class SimilarityAction { drop, merge };

struct SimilarityConfig {
  PartitionKind partition = PartitionKind::random;
  SimilarityAction action = SimilarityAction::drop;
  int64_t r = 0;
  // Per-sample streams derive from this by global sample id, so results do
  // not depend on how samples are batched.
  RngStream seed{0, 0};
};

enum class PruneMode { single_layer, multi_layer };

// Locations are 1-indexed layer positions: location L acts on the output of
// block L-1, which must have an allocator head. In single_layer mode the one
// location keeps floor(N*K)+s by alpha and then similarity-prunes s of those
// survivors. In multi_layer mode s tokens are similarity-pruned from the
// embedded input (pre_block_similarity), and each location keeps
// floor(live*K) by alpha recomputed on its live set. The schedule's s drives
// both uses; similarity.r only matters for direct similarity_prune calls.
struct PruneSchedule {
  PruneMode mode = PruneMode::single_layer;
  std::vector<int64_t> locations;
  std::vector<double> rates;
  int64_t s = 0;
  SimilarityConfig similarity;
  bool pre_block_similarity = false;
  void validate(const ModelConfig& mc, const AllocatorParams& ap) const;  // schedule_error
};

enum class RemovalKind { alpha_ranked, similarity, merged };

struct Removal {
  int64_t token = 0;  // patch id in schedule results, position in core ops
  RemovalKind kind = RemovalKind::alpha_ranked;
  int64_t merged_into = -1;  // patch id, merged only
};

// Survivor positions (ascending) plus one removal record per pruned token.
struct KeepDecision {
  std::vector<int64_t> kept;
  std::vector<Removal> removed;
};

// Largest-alpha keep set over one sample's live tokens; ties keep the lower
// position. keep_count outside [1, live] is a domain_error.
KeepDecision rank_and_keep(std::span<const double> alpha, int64_t keep_count);

// Uniform keep_count-subset without replacement, deterministic in rng.
KeepDecision random_keep(int64_t live, int64_t keep_count, RngStream& rng);

// Keep by head-averaged attention paid to token 0, one sample row of a
// recorded block. Mean-pooled models have no such row: usage_error.
KeepDecision cls_topk_keep(const AttentionRecord& rec, int64_t sample, int64_t special_tokens,
                           int64_t keep_count);

// Gather per-sample keep positions (ascending, one list per sample, equal
// lengths) out of a batch, remapping the live bookkeeping.
TokenBatch apply_keep(const TokenBatch& tb, const std::vector<std::vector<int64_t>>& keep_pos);

struct SimilarityOutcome {
  TokenBatch batch;
  // Per sample, in action order; tokens are patch ids.
  std::vector<std::vector<Removal>> removed;
};

// Pair-and-prune: split live tokens into A (floor(live/2)) and B (the rest),
// match every B token to its most cosine-similar A token on the raw
// embeddings, then act on the r highest-scoring matches in score order. drop
// removes the B token; merge folds it into its A partner as the running
// arithmetic mean. Matching happens once, before any merge rewrites. The
// sequential partition alternates tokens by descending score into A and B and
// needs `scores` (one row per sample); cfg.r > floor(live/2) or live < 2 is a
// domain_error.
SimilarityOutcome similarity_prune(const TokenBatch& tb, const SimilarityConfig& cfg,
                                   std::span<const int64_t> sample_ids,
                                   const Grid* scores = nullptr);

struct KeepEvent {
  int64_t sample = 0;  // global sample id
  int64_t layer = 0;   // 1-indexed location; 0 is the pre-block input stage
  std::vector<int64_t> kept;  // surviving patch ids, ascending
  std::vector<Removal> removed;
};

struct ScheduleResult {
  Tensor logits;
  std::vector<KeepEvent> history;
  std::vector<int64_t> tokens_per_layer;  // input width of each block, specials included
};

// Inference-path pruned forward. sample_ids (default 0..B-1) key the
// similarity streams and the history rows.
ScheduleResult apply_schedule(const ModelParams& bp, const ModelConfig& mc,
                              const AllocatorParams& ap, const Tensor& images,
                              const PruneSchedule& schedule,
                              std::span<const int64_t> sample_ids = {});

enum class BaselineKind { random_drop, cls_topk };

struct BaselineResult {
  Tensor logits;
  std::vector<std::vector<int64_t>> kept;  // per sample, patch ids
  std::vector<int64_t> tokens_per_layer;
};

// Matched-count baselines: one keep stage at the same 1-indexed location,
// keeping keep_count tokens chosen by uniform sampling (per-sample streams
// derive from rng by global sample id) or by CLS attention at block
// location-1.
BaselineResult apply_baseline(const ModelParams& bp, const ModelConfig& mc, BaselineKind kind,
                              const Tensor& images, int64_t location, int64_t keep_count,
                              RngStream& rng, std::span<const int64_t> sample_ids = {});

// Line-oriented keep-set history:
//   sample,layer,kept=i1;i2;...,removed=j1:tag;j2:tag;...
// with tags alpha_ranked, similarity, or merged-into:<patch id>. One line per
// event, '\n' separated; parsing is strict and reports the offending line.
std::string history_to_text(const std::vector<KeepEvent>& events);
std::vector<KeepEvent> history_from_text(const std::string& text);  // format_error

}  // namespace tnt
