#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tnt/allocator.hpp"
#include "tnt/pruning.hpp"
#include "tnt/vit.hpp"

namespace tnt {

struct LayerFlops {
  int64_t tokens = 0;
  int64_t qkv = 0, scores = 0, values = 0, proj = 0, mlp = 0;
  int64_t total() const { return qkv + scores + values + proj + mlp; }
};

struct FlopsReport {
  std::vector<LayerFlops> layers;
  int64_t patch_embed = 0;
  int64_t head = 0;
  int64_t alloc = 0;  // relevance-head overhead, counted in the total too
  int64_t total_macs() const;
  double total_gflops() const { return static_cast<double>(total_macs()) / 1e9; }
};

// Analytic multiply-accumulate count for one forward pass. Per layer with n
// tokens: qkv 3nD^2, attention scores and values n^2 D each, output
// projection nD^2, mlp 2 n D mlp_dim; plus N*D*patch_dim for the patch
// embedding and D*classes for the classifier. One MAC counts as one FLOP;
// softmax, norms, GELU, and residual adds stay out (sub-percent contributors).
// alloc_layers lists blocks whose outputs feed a relevance head, nD each.
FlopsReport flops_estimate(const ModelConfig& cfg, std::span<const int64_t> tokens_per_layer,
                           std::span<const int64_t> alloc_layers = {});  // config_error

// Reference configs for the published accounting anchors:
// deit-b-distil, deit-s-distil, vit16-768. Unknown name is a config_error.
ModelConfig preset_config(const std::string& name);

// The matching dense profile, depth copies of seq_len.
std::vector<int64_t> preset_profile(const ModelConfig& cfg);

// layer,tokens,qkv,scores,values,proj,mlp,total_macs rows, then patch_embed /
// head / alloc / total rows carrying only the last column.
std::string flops_csv(const FlopsReport& r);

struct TimingReport {
  double images_per_second = 0.0;
  int64_t batch = 0;
  int64_t warmup = 0;
  int64_t iters = 0;
};

// Wall-clock throughput of the real forward path: each window runs the first
// `batch` images and scores batch/elapsed; the report keeps the median
// window. Pruned runs execute on physically shortened sequences, so the
// speedup is the one a deployment would see. schedule may be null for the
// dense path; non-null needs `ap`.
TimingReport throughput_measure(const ModelParams& bp, const ModelConfig& mc,
                                const AllocatorParams* ap, const PruneSchedule* schedule,
                                const Tensor& images, int64_t batch, int64_t warmup,
                                int64_t iters);  // domain_error, usage_error

}  // namespace tnt
