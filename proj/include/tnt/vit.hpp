#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tnt/common.hpp"
#include "tnt/data.hpp"
#include "tnt/tensor.hpp"

namespace tnt {

// Shared by every layer norm in the model.
inline constexpr double kLnEps = 1e-5;

struct ModelConfig {
  int64_t image_size = 32;
  int64_t patch_size = 4;
  int64_t channels = 1;
  int64_t dim = 64;
  int64_t depth = 4;
  int64_t heads = 4;
  int64_t mlp_dim = 128;
  int64_t classes = 2;
  // 0 means mean-pooled readout over patch tokens; 1 is a class token, 2 adds
  // a distillation-style extra token. Readout always uses token 0 when >= 1.
  int64_t special_tokens = 1;

  int64_t patches_per_side() const { return image_size / patch_size; }
  int64_t patch_tokens() const { return patches_per_side() * patches_per_side(); }
  int64_t patch_dim() const { return channels * patch_size * patch_size; }
  int64_t head_dim() const { return dim / heads; }
  int64_t seq_len() const { return special_tokens + patch_tokens(); }
  void validate() const;  // config_error
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor qkv_w, qkv_b;  // [D, 3D] packed q|k|v, heads contiguous inside each
  Tensor proj_w, proj_b;
  Tensor ln2_g, ln2_b;
  Tensor fc1_w, fc1_b;
  Tensor fc2_w, fc2_b;
};

struct ModelParams {
  Tensor patch_w, patch_b;  // [patch_dim, D], [D]
  Tensor special;           // [S, D]; undefined when S == 0
  Tensor pos;               // [S + N, D]
  std::vector<BlockParams> blocks;
  Tensor out_g, out_b;
  Tensor head_w, head_b;  // [D, classes], [classes]

  // Weights draw from `rng` in named() order: matrices at 1/sqrt(fan_in),
  // pos/special at 0.02, norms at identity, biases at zero.
  static ModelParams init(const ModelConfig& cfg, RngStream& rng);

  // Stable enumeration; checkpoint layout and optimizer state both key on it.
  std::vector<std::pair<std::string, Tensor>> named() const;
  void set_requires_grad(bool v);
};

// A batch of token sequences plus the bookkeeping of which original patches
// each row maps to. x row S + j of sample b holds patch live[b][j]; the lists
// are ascending and share one length across the batch.
struct TokenBatch {
  Tensor x;  // [B, S + L, D]
  int64_t special_tokens = 0;
  std::vector<std::vector<int64_t>> live;
  int64_t live_count() const;
};

// Per-sample head-averaged attention row of token 0, recorded by
// block_forward when requested. Meaningful only with special tokens present.
struct AttentionRecord {
  std::vector<std::vector<double>> cls_row;  // [B][T]
};

// Non-differentiable unfold of [B, C, H, W] into [B, N, patch_dim]; the patch
// vector is laid out channel-major, then rows, then columns.
Tensor extract_patches(const Tensor& images, int64_t patch_size);

TokenBatch embed(const ModelParams& p, const ModelConfig& cfg, const Tensor& images);

// Pre-norm block: x + proj(attn(ln(x))), then x + mlp(ln(x)).
Tensor block_forward(const BlockParams& b, const ModelConfig& cfg, const Tensor& x,
                     AttentionRecord* rec = nullptr);

// Final norm + linear head on token 0 (S >= 1) or on the token mean (S == 0).
Tensor readout(const ModelParams& p, const ModelConfig& cfg, const Tensor& x,
               int64_t special_tokens);

Tensor forward(const ModelParams& p, const ModelConfig& cfg, const Tensor& images);

struct TrainConfig {
  int64_t epochs = 10;
  int64_t batch_size = 32;
  double lr = 0.1;
  double momentum = 0.9;
};

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;  // running, over pre-update minibatch predictions
};

// Plain SGD with momentum over every parameter with requires_grad set.
// Shuffling derives one child stream per epoch, so resuming with the same
// stream state reproduces the run. Throws training_error on a non-finite
// loss, naming the epoch.
std::vector<EpochStats> train_backbone(ModelParams& p, const ModelConfig& cfg,
                                       const Dataset& ds, std::span<const int64_t> train_idx,
                                       const TrainConfig& tc, RngStream& rng);

double eval_accuracy(const ModelParams& p, const ModelConfig& cfg, const Dataset& ds,
                     std::span<const int64_t> idx, int64_t batch_size);

void save_backbone(const std::string& path, const ModelParams& p, const ModelConfig& cfg);
struct LoadedBackbone {
  ModelParams params;
  ModelConfig config;
};
LoadedBackbone load_backbone(const std::string& path);  // format_error on mismatch

}  // namespace tnt
