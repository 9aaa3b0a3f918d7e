#include "tnt/allocator.hpp"

#include <algorithm>
#include <cmath>

#include "tnt/checkpoint.hpp"

namespace tnt {

void NoiseConfig::validate(int64_t depth) const {
  if (beta < 0.0) throw config_error(msg("beta must be nonnegative, got ", beta));
  if (noised_layers.empty()) throw config_error("no noised layers configured");
  for (size_t i = 0; i < noised_layers.size(); ++i) {
    const int64_t l = noised_layers[i];
    if (l < 0 || l >= depth)
      throw config_error(msg("noised layer ", l, " outside [0, ", depth, ")"));
    if (i > 0 && noised_layers[i - 1] >= l)
      throw config_error("noised layers must be strictly ascending");
  }
}

namespace {

Tensor draw(RngStream& rng, Shape shape, double stddev) {
  Tensor t = gaussian(rng, std::move(shape));
  for (double& v : t.data()) v *= stddev;
  return t;
}

// x [B,L,D] times w [D,n] without a bias term.
Tensor matvec(const Tensor& x, const Tensor& w) {
  const int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  return reshape(matmul(reshape(x, {b * l, d}), w), {b, l, w.dim(1)});
}

}  // namespace

AllocatorParams AllocatorParams::init(const ModelConfig& mc, const NoiseConfig& nc,
                                      HeadKind kind, int64_t hidden, RngStream& rng) {
  mc.validate();
  nc.validate(mc.depth);
  if (hidden == 0) hidden = mc.dim / 2;
  if (hidden < 0) throw config_error(msg("allocator hidden width must be positive, got ", hidden));
  const int64_t d = mc.dim;
  AllocatorParams p;
  p.layers = nc.noised_layers;
  for (size_t i = 0; i < p.layers.size(); ++i) {
    AllocatorHead h;
    if (kind == HeadKind::linear) {
      h.w1 = draw(rng, {d, 1}, 1.0 / std::sqrt(static_cast<double>(d)));
    } else {
      h.w1 = draw(rng, {d, hidden}, 1.0 / std::sqrt(static_cast<double>(d)));
      h.b1 = Tensor::zeros({hidden});
      h.w2 = draw(rng, {hidden, 1}, 1.0 / std::sqrt(static_cast<double>(hidden)));
    }
    p.heads.push_back(std::move(h));
  }
  p.norm_g = Tensor::full({d}, 1.0);
  p.norm_b = Tensor::zeros({d});
  return p;
}

std::vector<std::pair<std::string, Tensor>> AllocatorParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < heads.size(); ++i) {
    const std::string k = msg("alloc.layer", layers[i], ".head.");
    out.emplace_back(k + "w1", heads[i].w1);
    if (heads[i].mlp()) {
      out.emplace_back(k + "b1", heads[i].b1);
      out.emplace_back(k + "w2", heads[i].w2);
    }
  }
  out.emplace_back("alloc.alpha_norm.g", norm_g);
  out.emplace_back("alloc.alpha_norm.b", norm_b);
  return out;
}

void AllocatorParams::set_requires_grad(bool v) {
  for (auto& [name, t] : named()) {
    (void)name;
    Tensor h = t;
    h.set_requires_grad(v);
  }
}

int64_t AllocatorParams::head_index(int64_t layer) const {
  for (size_t i = 0; i < layers.size(); ++i)
    if (layers[i] == layer) return static_cast<int64_t>(i);
  throw usage_error(msg("layer ", layer, " has no allocator head"));
}

Tensor compute_alpha(const Tensor& x, int64_t special_tokens, const AllocatorHead& head) {
  const int64_t b = x.dim(0), t = x.dim(1);
  const int64_t live = t - special_tokens;
  if (live < 1)
    throw domain_error(msg("alpha needs at least one live patch token, sequence has ", t,
                           " tokens and ", special_tokens, " special"));
  Tensor pt = special_tokens > 0 ? slice_axis(x, 1, special_tokens, live) : x;
  Tensor logits;
  if (head.mlp())
    logits = matvec(gelu(linear(pt, head.w1, head.b1)), head.w2);
  else
    logits = matvec(pt, head.w1);
  return softmax(reshape(logits, {b, live}), 1);
}

TokenBatch inject_training_noise(const TokenBatch& tb, const Tensor& alpha,
                                 const AllocatorParams& p, NoiseConfig& cfg,
                                 const Tensor* fixed_eps) {
  if (!Tape::active())
    throw usage_error("noise injection is a training-path op; inference never adds noise");
  const int64_t b = tb.x.dim(0), t = tb.x.dim(1), d = tb.x.dim(2);
  const int64_t s = tb.special_tokens, live = t - s;
  if (alpha.shape() != Shape{b, live})
    throw shape_error(msg("alpha shape ", shape_str(alpha.shape()), " does not match batch [",
                          b, ",", live, "]"));

  Tensor xn = layer_norm(tb.x, p.norm_g, p.norm_b, kLnEps);
  Tensor eps = fixed_eps ? fixed_eps->detach() : gaussian(cfg.rng, {b, live, d});
  if (eps.shape() != Shape{b, live, d})
    throw shape_error(msg("fixed noise shape ", shape_str(eps.shape()), " does not match [", b,
                          ",", live, ",", d, "]"));
  Tensor noise = scale_last(eps, add_scalar(scale(alpha, -1.0), 1.0));
  if (s > 0) {
    const Tensor parts[] = {Tensor::zeros({b, s, d}), noise};
    noise = concat_axis(parts, 1);
  }
  TokenBatch out;
  out.x = add(xn, scale(noise, cfg.beta));
  out.special_tokens = s;
  out.live = tb.live;
  return out;
}

Tensor noised_forward(const ModelParams& bp, const ModelConfig& mc, const AllocatorParams& ap,
                      NoiseConfig& cfg, const Tensor& images,
                      const std::vector<Tensor>* fixed_eps) {
  cfg.validate(mc.depth);
  if (fixed_eps && fixed_eps->size() != cfg.noised_layers.size())
    throw usage_error(msg("fixed noise list has ", fixed_eps->size(), " tensors for ",
                          cfg.noised_layers.size(), " noised layers"));
  TokenBatch tb = embed(bp, mc, images);
  for (int64_t i = 0; i < mc.depth; ++i) {
    tb.x = block_forward(bp.blocks[static_cast<size_t>(i)], mc, tb.x);
    if (std::find(cfg.noised_layers.begin(), cfg.noised_layers.end(), i) !=
        cfg.noised_layers.end()) {
      const int64_t hi = ap.head_index(i);
      Tensor alpha = compute_alpha(tb.x, tb.special_tokens, ap.heads[static_cast<size_t>(hi)]);
      const Tensor* eps = fixed_eps ? &(*fixed_eps)[static_cast<size_t>(hi)] : nullptr;
      tb = inject_training_noise(tb, alpha, ap, cfg, eps);
    }
  }
  return readout(bp, mc, tb.x, tb.special_tokens);
}

std::vector<EpochStats> train_allocator(ModelParams& backbone, const ModelConfig& mc,
                                        AllocatorParams& ap, NoiseConfig cfg, const Dataset& ds,
                                        std::span<const int64_t> train_idx,
                                        const TrainConfig& tc, RngStream& rng) {
  cfg.validate(mc.depth);
  if (train_idx.empty()) throw config_error("training index set is empty");
  if (tc.epochs <= 0 || tc.batch_size <= 0 || tc.lr < 0.0)
    throw config_error("allocator training needs positive epochs and batch size, lr >= 0");
  backbone.set_requires_grad(false);
  ap.set_requires_grad(true);

  auto params = ap.named();
  std::vector<std::vector<double>> velocity(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    velocity[i].assign(static_cast<size_t>(params[i].second.numel()), 0.0);

  std::vector<int64_t> order(train_idx.begin(), train_idx.end());
  std::vector<EpochStats> history;
  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    RngStream root = rng.derive(static_cast<uint64_t>(epoch));
    RngStream shuffle = root.derive(0);
    cfg.rng = root.derive(1);
    for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
      const int64_t j = static_cast<int64_t>(shuffle.uniform() * static_cast<double>(i + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    double loss_sum = 0.0;
    int64_t correct = 0, seen = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(tc.batch_size)) {
      const size_t stop = std::min(order.size(), at + static_cast<size_t>(tc.batch_size));
      std::vector<int64_t> ids(order.begin() + static_cast<int64_t>(at),
                               order.begin() + static_cast<int64_t>(stop));
      std::vector<int64_t> labels(ids.size());
      for (size_t i = 0; i < ids.size(); ++i)
        labels[i] = ds.labels[static_cast<size_t>(ids[i])];
      Tensor images = take_first_axis(ds.images, ids);

      Tape tape;
      Tensor logits = noised_forward(backbone, mc, ap, cfg, images);
      Tensor loss = cross_entropy(logits, labels);
      if (!std::isfinite(loss.value()))
        throw training_error(msg("allocator loss became non-finite in epoch ", epoch));
      auto lg = logits.data();
      for (size_t i = 0; i < ids.size(); ++i) {
        int64_t best = 0;
        for (int64_t c = 1; c < mc.classes; ++c)
          if (lg[static_cast<int64_t>(i) * mc.classes + c] >
              lg[static_cast<int64_t>(i) * mc.classes + best])
            best = c;
        correct += best == labels[i];
      }
      seen += static_cast<int64_t>(ids.size());
      loss_sum += loss.value() * static_cast<double>(ids.size());
      tape.backward(loss);

      for (size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i].second;
        if (t.grad().empty()) continue;
        auto g = t.grad();
        auto dv = t.data();
        auto& v = velocity[i];
        for (size_t j = 0; j < v.size(); ++j) {
          v[j] = tc.momentum * v[j] + g[j];
          dv[j] -= tc.lr * v[j];
        }
        t.zero_grad();
      }
    }
    history.push_back({loss_sum / static_cast<double>(seen),
                       static_cast<double>(correct) / static_cast<double>(seen)});
  }
  return history;
}

Grid collect_alpha(const ModelParams& bp, const ModelConfig& mc, const AllocatorParams& ap,
                   const NoiseConfig& cfg, const Tensor& images, int64_t layer) {
  cfg.validate(mc.depth);
  if (std::find(cfg.noised_layers.begin(), cfg.noised_layers.end(), layer) ==
      cfg.noised_layers.end())
    throw usage_error(msg("layer ", layer, " is not a noised layer"));
  const int64_t hi = ap.head_index(layer);
  TokenBatch tb = embed(bp, mc, images);
  for (int64_t i = 0; i <= layer; ++i)
    tb.x = block_forward(bp.blocks[static_cast<size_t>(i)], mc, tb.x);
  Tensor alpha = compute_alpha(tb.x, tb.special_tokens, ap.heads[static_cast<size_t>(hi)]);
  Grid out(alpha.dim(0), alpha.dim(1));
  std::copy(alpha.data().begin(), alpha.data().end(), out.v.begin());
  return out;
}

double snr_capacity(double p_signal, double p_noise) {
  if (p_noise <= 0.0) throw domain_error(msg("noise power must be positive, got ", p_noise));
  if (p_signal < 0.0) throw domain_error(msg("signal power must be nonnegative, got ", p_signal));
  return std::log2(1.0 + p_signal / p_noise);
}

void save_allocator(const std::string& path, const AllocatorParams& p, double beta) {
  std::vector<NamedTensor> out;
  out.push_back({"beta", {1}, {beta}});
  std::vector<double> ls;
  for (int64_t l : p.layers) ls.push_back(static_cast<double>(l));
  out.push_back({"layers", {static_cast<int64_t>(ls.size())}, ls});
  for (const auto& [name, t] : p.named())
    out.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
  save_container(path, out);
}

LoadedAllocator load_allocator(const std::string& path) {
  auto tensors = load_container(path);
  auto lookup = [&](const std::string& name) -> const NamedTensor* {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  };
  const NamedTensor* bt = lookup("beta");
  const NamedTensor* lt = lookup("layers");
  if (!bt || bt->data.size() != 1 || !lt)
    throw format_error(msg(path, ": missing beta or layers tensor"));

  LoadedAllocator out;
  out.beta = bt->data[0];
  size_t used = 2;
  for (double lv : lt->data) {
    if (lv != std::floor(lv) || lv < 0)
      throw format_error(msg(path, ": layers tensor holds a non-index value"));
    const int64_t l = static_cast<int64_t>(lv);
    if (!out.params.layers.empty() && out.params.layers.back() >= l)
      throw format_error(msg(path, ": layers tensor is not strictly ascending"));
    out.params.layers.push_back(l);

    const std::string k = msg("alloc.layer", l, ".head.");
    const NamedTensor* w1 = lookup(k + "w1");
    if (!w1 || w1->shape.size() != 2)
      throw format_error(msg(path, ": missing or malformed tensor '", k, "w1'"));
    AllocatorHead h;
    h.w1 = Tensor::from(w1->shape, w1->data);
    ++used;
    if (const NamedTensor* w2 = lookup(k + "w2")) {
      const NamedTensor* b1 = lookup(k + "b1");
      if (!b1 || w2->shape.size() != 2 || b1->shape.size() != 1 ||
          w1->shape[1] != b1->shape[0] || w1->shape[1] != w2->shape[0] || w2->shape[1] != 1)
        throw format_error(msg(path, ": inconsistent mlp head tensors for layer ", l));
      h.b1 = Tensor::from(b1->shape, b1->data);
      h.w2 = Tensor::from(w2->shape, w2->data);
      used += 2;
    } else if (w1->shape[1] != 1) {
      throw format_error(msg(path, ": linear head '", k, "w1' must map to one logit"));
    }
    out.params.heads.push_back(std::move(h));
  }

  const NamedTensor* g = lookup("alloc.alpha_norm.g");
  const NamedTensor* b = lookup("alloc.alpha_norm.b");
  if (!g || !b || g->shape != b->shape || g->shape.size() != 1)
    throw format_error(msg(path, ": missing or mismatched alpha_norm tensors"));
  out.params.norm_g = Tensor::from(g->shape, g->data);
  out.params.norm_b = Tensor::from(b->shape, b->data);
  used += 2;
  if (used != tensors.size())
    throw format_error(msg(path, ": container holds ", tensors.size() - used,
                           " tensors the allocator does not use"));
  return out;
}

}  // namespace tnt
