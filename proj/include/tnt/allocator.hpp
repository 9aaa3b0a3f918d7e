#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tnt/common.hpp"
#include "tnt/data.hpp"
#include "tnt/rng.hpp"
#include "tnt/tensor.hpp"
#include "tnt/vit.hpp"

namespace tnt {

struct NoiseConfig {
  double beta = 0.02;
  std::vector<int64_t> noised_layers;  // block indices, ascending
  RngStream rng{0, 0};
  void validate(int64_t depth) const;  // config_error
};

enum class HeadKind { linear, mlp };

// Per-token relevance scorer. The linear kind is w1 [D,1] alone; the mlp kind
// is w1 [D,hidden] + b1, GELU, then w2 [hidden,1]. Neither kind has a final
// scalar bias: a uniform shift of every token logit is cancelled exactly by
// the softmax, so such a bias could never influence anything and would only
// add a zero-gradient direction.
struct AllocatorHead {
  Tensor w1, b1, w2;
  bool mlp() const { return w2.defined(); }
};

struct AllocatorParams {
  std::vector<int64_t> layers;  // the noised block indices, ascending
  std::vector<AllocatorHead> heads;
  Tensor norm_g, norm_b;  // alpha_norm, shared by every noised layer

  static AllocatorParams init(const ModelConfig& mc, const NoiseConfig& nc, HeadKind kind,
                              int64_t hidden, RngStream& rng);  // hidden 0 -> D/2
  std::vector<std::pair<std::string, Tensor>> named() const;
  void set_requires_grad(bool v);
  // Index into heads for a block index; usage_error when not configured.
  int64_t head_index(int64_t layer) const;
};

// Relevance weights over the live patch tokens of x [B,T,D]: softmax over the
// head's per-token logits, special tokens excluded. Differentiable.
Tensor compute_alpha(const Tensor& x, int64_t special_tokens, const AllocatorHead& head);

// Training-path noise: alpha_norm over every token, plus beta * (1-alpha_i)
// scaled unit noise on patch tokens; special-token noise rows are exactly
// zero. alpha comes from the caller so that ranking, injection, and the
// budget stay one computation. Requires an active Tape; at inference this
// throws usage_error because the inference path never adds noise. When
// `fixed_eps` [B,L,D] is given it replaces the draw from cfg.rng, which is
// what lets finite differences hold the noise still.
TokenBatch inject_training_noise(const TokenBatch& tb, const Tensor& alpha,
                                 const AllocatorParams& p, NoiseConfig& cfg,
                                 const Tensor* fixed_eps = nullptr);

// Full training-path forward: embed, blocks, noise after every configured
// block, readout. `fixed_eps`, when given, holds one tensor per configured
// layer in order.
Tensor noised_forward(const ModelParams& bp, const ModelConfig& mc, const AllocatorParams& ap,
                      NoiseConfig& cfg, const Tensor& images,
                      const std::vector<Tensor>* fixed_eps = nullptr);

// SGD on the allocator against the noised-forward cross-entropy with the
// backbone frozen. lr = 0 is allowed (a no-op pass, useful as a control).
std::vector<EpochStats> train_allocator(ModelParams& backbone, const ModelConfig& mc,
                                        AllocatorParams& ap, NoiseConfig cfg, const Dataset& ds,
                                        std::span<const int64_t> train_idx,
                                        const TrainConfig& tc, RngStream& rng);

// Inference-path alpha at one configured layer: clean forward up to and
// including that block (no noise, no alpha_norm anywhere), then the head.
// Rows are batch elements, columns live patch tokens.
Grid collect_alpha(const ModelParams& bp, const ModelConfig& mc, const AllocatorParams& ap,
                   const NoiseConfig& cfg, const Tensor& images, int64_t layer);

// Channel-capacity style diagnostic, log2(1 + p_signal/p_noise).
double snr_capacity(double p_signal, double p_noise);

void save_allocator(const std::string& path, const AllocatorParams& p, double beta);
struct LoadedAllocator {
  AllocatorParams params;
  double beta = 0.0;
};
LoadedAllocator load_allocator(const std::string& path);

}  // namespace tnt
