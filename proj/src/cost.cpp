#include "tnt/cost.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>

namespace tnt {

int64_t FlopsReport::total_macs() const {
  int64_t t = patch_embed + head + alloc;
  for (const LayerFlops& l : layers) t += l.total();
  return t;
}

FlopsReport flops_estimate(const ModelConfig& cfg, std::span<const int64_t> tokens_per_layer,
                           std::span<const int64_t> alloc_layers) {
  cfg.validate();
  if (static_cast<int64_t>(tokens_per_layer.size()) != cfg.depth)
    throw config_error(msg("profile has ", tokens_per_layer.size(), " entries for depth ",
                           cfg.depth));
  const int64_t d = cfg.dim;
  FlopsReport r;
  for (int64_t n : tokens_per_layer) {
    if (n < 1) throw config_error(msg("profile entry ", n, " is not a token count"));
    LayerFlops l;
    l.tokens = n;
    l.qkv = 3 * n * d * d;
    l.scores = n * n * d;
    l.values = n * n * d;
    l.proj = n * d * d;
    l.mlp = 2 * n * d * cfg.mlp_dim;
    r.layers.push_back(l);
  }
  r.patch_embed = cfg.patch_tokens() * d * cfg.patch_dim();
  r.head = d * cfg.classes;
  for (int64_t a : alloc_layers) {
    if (a < 0 || a >= cfg.depth)
      throw config_error(msg("allocator layer ", a, " outside [0, ", cfg.depth, ")"));
    r.alloc += tokens_per_layer[static_cast<size_t>(a)] * d;
  }
  return r;
}

ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.channels = 3;
  c.depth = 12;
  c.classes = 1000;
  if (name == "deit-b-distil") {
    c.dim = 768;
    c.heads = 12;
    c.mlp_dim = 3072;
    c.special_tokens = 2;
  } else if (name == "deit-s-distil") {
    c.dim = 384;
    c.heads = 6;
    c.mlp_dim = 1536;
    c.special_tokens = 2;
  } else if (name == "vit16-768") {
    c.dim = 768;
    c.heads = 12;
    c.mlp_dim = 768;
    c.special_tokens = 1;
  } else {
    throw config_error(msg("unknown preset '", name,
                           "'; expected deit-b-distil, deit-s-distil, or vit16-768"));
  }
  return c;
}

std::vector<int64_t> preset_profile(const ModelConfig& cfg) {
  return std::vector<int64_t>(static_cast<size_t>(cfg.depth), cfg.seq_len());
}

std::string flops_csv(const FlopsReport& r) {
  std::string out = "layer,tokens,qkv,scores,values,proj,mlp,total_macs\n";
  for (size_t i = 0; i < r.layers.size(); ++i) {
    const LayerFlops& l = r.layers[i];
    out += msg(i, ",", l.tokens, ",", l.qkv, ",", l.scores, ",", l.values, ",", l.proj, ",",
               l.mlp, ",", l.total(), "\n");
  }
  out += msg("patch_embed,,,,,,,", r.patch_embed, "\n");
  out += msg("head,,,,,,,", r.head, "\n");
  out += msg("alloc,,,,,,,", r.alloc, "\n");
  out += msg("total,,,,,,,", r.total_macs(), "\n");
  return out;
}

TimingReport throughput_measure(const ModelParams& bp, const ModelConfig& mc,
                                const AllocatorParams* ap, const PruneSchedule* schedule,
                                const Tensor& images, int64_t batch, int64_t warmup,
                                int64_t iters) {
  if (iters < 5) throw domain_error(msg("need at least 5 measurement windows, got ", iters));
  if (warmup < 0) throw domain_error(msg("negative warmup ", warmup));
  if (batch < 1 || batch > images.dim(0))
    throw domain_error(msg("batch ", batch, " outside [1, ", images.dim(0), "]"));
  if (schedule != nullptr && ap == nullptr)
    throw usage_error("a pruning schedule needs allocator heads");

  std::vector<int64_t> idx(static_cast<size_t>(batch));
  std::iota(idx.begin(), idx.end(), 0);
  Tensor chunk = take_first_axis(images, idx);

  auto run_once = [&] {
    if (schedule == nullptr) {
      Tensor logits = forward(bp, mc, chunk);
      return logits.data()[0];
    }
    ScheduleResult res = apply_schedule(bp, mc, *ap, chunk, *schedule);
    return res.logits.data()[0];
  };

  // The result feeds a volatile sink so the optimizer cannot hollow out the
  // timed region.
  volatile double sink = 0.0;
  for (int64_t i = 0; i < warmup; ++i) sink = run_once();

  std::vector<double> rates;
  for (int64_t i = 0; i < iters; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    sink = run_once();
    auto t1 = std::chrono::steady_clock::now();
    const double sec = std::chrono::duration<double>(t1 - t0).count();
    rates.push_back(static_cast<double>(batch) / sec);
  }
  (void)sink;

  std::sort(rates.begin(), rates.end());
  const size_t n = rates.size();
  const double median =
      n % 2 == 1 ? rates[n / 2] : 0.5 * (rates[n / 2 - 1] + rates[n / 2]);

  TimingReport rep;
  rep.images_per_second = median;
  rep.batch = batch;
  rep.warmup = warmup;
  rep.iters = iters;
  return rep;
}

}  // namespace tnt
