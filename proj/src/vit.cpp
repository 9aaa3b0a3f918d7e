#include "tnt/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tnt/checkpoint.hpp"

namespace tnt {

void ModelConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || dim <= 0 || depth <= 0 ||
      heads <= 0 || mlp_dim <= 0 || classes <= 0)
    throw config_error("model config has a non-positive field");
  if (image_size % patch_size != 0)
    throw config_error(
        msg("image size ", image_size, " is not divisible by patch size ", patch_size));
  if (dim % heads != 0)
    throw config_error(msg("dim ", dim, " is not divisible by heads ", heads));
  if (special_tokens < 0 || special_tokens > 2)
    throw config_error(msg("special_tokens must be 0, 1, or 2, got ", special_tokens));
}

namespace {

Tensor draw(RngStream& rng, Shape shape, double stddev) {
  Tensor t = gaussian(rng, std::move(shape));
  for (double& v : t.data()) v *= stddev;
  return t;
}

double inv_sqrt(int64_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, RngStream& rng) {
  cfg.validate();
  const int64_t d = cfg.dim, m = cfg.mlp_dim, s = cfg.special_tokens;
  ModelParams p;
  p.patch_w = draw(rng, {cfg.patch_dim(), d}, inv_sqrt(cfg.patch_dim()));
  p.patch_b = Tensor::zeros({d});
  if (s > 0) p.special = draw(rng, {s, d}, 0.02);
  p.pos = draw(rng, {cfg.seq_len(), d}, 0.02);
  p.blocks.resize(static_cast<size_t>(cfg.depth));
  for (auto& b : p.blocks) {
    b.ln1_g = Tensor::full({d}, 1.0);
    b.ln1_b = Tensor::zeros({d});
    b.qkv_w = draw(rng, {d, 3 * d}, inv_sqrt(d));
    b.qkv_b = Tensor::zeros({3 * d});
    b.proj_w = draw(rng, {d, d}, inv_sqrt(d));
    b.proj_b = Tensor::zeros({d});
    b.ln2_g = Tensor::full({d}, 1.0);
    b.ln2_b = Tensor::zeros({d});
    b.fc1_w = draw(rng, {d, m}, inv_sqrt(d));
    b.fc1_b = Tensor::zeros({m});
    b.fc2_w = draw(rng, {m, d}, inv_sqrt(m));
    b.fc2_b = Tensor::zeros({d});
  }
  p.out_g = Tensor::full({d}, 1.0);
  p.out_b = Tensor::zeros({d});
  p.head_w = draw(rng, {d, cfg.classes}, inv_sqrt(d));
  p.head_b = Tensor::zeros({cfg.classes});
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch.w", patch_w);
  out.emplace_back("patch.b", patch_b);
  if (special.defined()) out.emplace_back("special", special);
  out.emplace_back("pos", pos);
  for (size_t i = 0; i < blocks.size(); ++i) {
    const BlockParams& b = blocks[i];
    const std::string k = msg("blocks.", i, ".");
    out.emplace_back(k + "ln1.g", b.ln1_g);
    out.emplace_back(k + "ln1.b", b.ln1_b);
    out.emplace_back(k + "qkv.w", b.qkv_w);
    out.emplace_back(k + "qkv.b", b.qkv_b);
    out.emplace_back(k + "proj.w", b.proj_w);
    out.emplace_back(k + "proj.b", b.proj_b);
    out.emplace_back(k + "ln2.g", b.ln2_g);
    out.emplace_back(k + "ln2.b", b.ln2_b);
    out.emplace_back(k + "fc1.w", b.fc1_w);
    out.emplace_back(k + "fc1.b", b.fc1_b);
    out.emplace_back(k + "fc2.w", b.fc2_w);
    out.emplace_back(k + "fc2.b", b.fc2_b);
  }
  out.emplace_back("out_ln.g", out_g);
  out.emplace_back("out_ln.b", out_b);
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  return out;
}

void ModelParams::set_requires_grad(bool v) {
  for (auto& [name, t] : named()) {
    (void)name;
    Tensor h = t;
    h.set_requires_grad(v);
  }
}

int64_t TokenBatch::live_count() const {
  if (live.empty()) return 0;
  const size_t n = live.front().size();
  for (const auto& l : live)
    if (l.size() != n) throw usage_error("token batch has ragged live lists");
  return static_cast<int64_t>(n);
}

Tensor extract_patches(const Tensor& images, int64_t patch_size) {
  if (images.rank() != 4)
    throw shape_error(msg("extract_patches wants [B,C,H,W], got ", shape_str(images.shape())));
  const int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (h % patch_size != 0 || w % patch_size != 0)
    throw shape_error(msg("image ", h, "x", w, " not divisible by patch ", patch_size));
  const int64_t pr = h / patch_size, pc = w / patch_size;
  const int64_t n = pr * pc, pd = c * patch_size * patch_size;
  Tensor out = Tensor::zeros({b, n, pd});
  auto src = images.data();
  auto dst = out.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t p = 0; p < n; ++p) {
      const int64_t r0 = (p / pc) * patch_size, c0 = (p % pc) * patch_size;
      double* row = dst.data() + (bi * n + p) * pd;
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t r = 0; r < patch_size; ++r)
          for (int64_t q = 0; q < patch_size; ++q)
            *row++ = src[((bi * c + ch) * h + r0 + r) * w + c0 + q];
    }
  return out;
}

TokenBatch embed(const ModelParams& p, const ModelConfig& cfg, const Tensor& images) {
  const int64_t b = images.dim(0);
  Tensor tok = linear(extract_patches(images, cfg.patch_size), p.patch_w, p.patch_b);
  Tensor x = tok;
  if (cfg.special_tokens > 0) {
    const Tensor parts[] = {repeat_first(p.special, b), tok};
    x = concat_axis(parts, 1);
  }
  TokenBatch out;
  out.x = add_bcast(x, p.pos);
  out.special_tokens = cfg.special_tokens;
  std::vector<int64_t> all(static_cast<size_t>(cfg.patch_tokens()));
  std::iota(all.begin(), all.end(), 0);
  out.live.assign(static_cast<size_t>(b), all);
  return out;
}

Tensor block_forward(const BlockParams& b, const ModelConfig& cfg, const Tensor& x,
                     AttentionRecord* rec) {
  const int64_t bs = x.dim(0), t = x.dim(1), d = cfg.dim, dh = cfg.head_dim();
  if (x.dim(2) != d)
    throw shape_error(msg("block expects width ", d, ", got ", shape_str(x.shape())));
  Tensor qkv = linear(layer_norm(x, b.ln1_g, b.ln1_b, kLnEps), b.qkv_w, b.qkv_b);
  if (rec) rec->cls_row.assign(static_cast<size_t>(bs), std::vector<double>(t, 0.0));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(cfg.heads));
  for (int64_t h = 0; h < cfg.heads; ++h) {
    Tensor q = slice_axis(qkv, 2, h * dh, dh);
    Tensor k = slice_axis(qkv, 2, d + h * dh, dh);
    Tensor v = slice_axis(qkv, 2, 2 * d + h * dh, dh);
    Tensor att = softmax(scale(matmul(q, transpose(k)), inv_sqrt(dh)), 2);
    if (rec) {
      auto a = att.data();
      for (int64_t bi = 0; bi < bs; ++bi)
        for (int64_t j = 0; j < t; ++j)
          rec->cls_row[static_cast<size_t>(bi)][static_cast<size_t>(j)] +=
              a[bi * t * t + j] / static_cast<double>(cfg.heads);
    }
    heads.push_back(matmul(att, v));
  }
  Tensor x1 = add(x, linear(concat_axis(heads, 2), b.proj_w, b.proj_b));
  Tensor h2 = layer_norm(x1, b.ln2_g, b.ln2_b, kLnEps);
  return add(x1, linear(gelu(linear(h2, b.fc1_w, b.fc1_b)), b.fc2_w, b.fc2_b));
}

Tensor readout(const ModelParams& p, const ModelConfig&, const Tensor& x,
               int64_t special_tokens) {
  Tensor pooled;
  if (special_tokens >= 1)
    pooled = reshape(slice_axis(x, 1, 0, 1), {x.dim(0), x.dim(2)});
  else
    pooled = mean_axis(x, 1);
  return linear(layer_norm(pooled, p.out_g, p.out_b, kLnEps), p.head_w, p.head_b);
}

Tensor forward(const ModelParams& p, const ModelConfig& cfg, const Tensor& images) {
  Tensor x = embed(p, cfg, images).x;
  for (const BlockParams& b : p.blocks) x = block_forward(b, cfg, x);
  return readout(p, cfg, x, cfg.special_tokens);
}

namespace {

int64_t argmax_row(std::span<const double> logits, int64_t row, int64_t classes) {
  int64_t best = 0;
  for (int64_t c = 1; c < classes; ++c)
    if (logits[row * classes + c] > logits[row * classes + best]) best = c;
  return best;
}

}  // namespace

std::vector<EpochStats> train_backbone(ModelParams& p, const ModelConfig& cfg,
                                       const Dataset& ds, std::span<const int64_t> train_idx,
                                       const TrainConfig& tc, RngStream& rng) {
  cfg.validate();
  if (train_idx.empty()) throw config_error("training index set is empty");
  if (tc.epochs <= 0 || tc.batch_size <= 0 || tc.lr <= 0.0)
    throw config_error("training config needs positive epochs, batch size, and lr");

  auto params = p.named();
  std::vector<std::vector<double>> velocity(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    velocity[i].assign(static_cast<size_t>(params[i].second.numel()), 0.0);

  std::vector<int64_t> order(train_idx.begin(), train_idx.end());
  std::vector<EpochStats> history;
  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    RngStream shuffle = rng.derive(static_cast<uint64_t>(epoch));
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
      Tensor logits = forward(p, cfg, images);
      Tensor loss = cross_entropy(logits, labels);
      if (!std::isfinite(loss.value()))
        throw training_error(msg("loss became non-finite in epoch ", epoch));
      auto lg = logits.data();
      for (size_t i = 0; i < ids.size(); ++i)
        correct += argmax_row(lg, static_cast<int64_t>(i), cfg.classes) == labels[i];
      seen += static_cast<int64_t>(ids.size());
      loss_sum += loss.value() * static_cast<double>(ids.size());
      tape.backward(loss);

      for (size_t i = 0; i < params.size(); ++i) {
        Tensor& t = params[i].second;
        if (!t.requires_grad() || t.grad().empty()) continue;
        auto g = t.grad();
        auto d = t.data();
        auto& v = velocity[i];
        for (size_t j = 0; j < v.size(); ++j) {
          v[j] = tc.momentum * v[j] + g[j];
          d[j] -= tc.lr * v[j];
        }
        t.zero_grad();
      }
    }
    history.push_back({loss_sum / static_cast<double>(seen),
                       static_cast<double>(correct) / static_cast<double>(seen)});
  }
  return history;
}

double eval_accuracy(const ModelParams& p, const ModelConfig& cfg, const Dataset& ds,
                     std::span<const int64_t> idx, int64_t batch_size) {
  if (idx.empty()) throw config_error("evaluation index set is empty");
  int64_t correct = 0;
  for (size_t at = 0; at < idx.size(); at += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(idx.size(), at + static_cast<size_t>(batch_size));
    std::vector<int64_t> ids(idx.begin() + static_cast<int64_t>(at),
                             idx.begin() + static_cast<int64_t>(stop));
    Tensor logits = forward(p, cfg, take_first_axis(ds.images, ids));
    auto lg = logits.data();
    for (size_t i = 0; i < ids.size(); ++i)
      correct += argmax_row(lg, static_cast<int64_t>(i), cfg.classes) ==
                 ds.labels[static_cast<size_t>(ids[i])];
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

void save_backbone(const std::string& path, const ModelParams& p, const ModelConfig& cfg) {
  std::vector<NamedTensor> out;
  out.push_back({"config",
                 {9},
                 {static_cast<double>(cfg.image_size), static_cast<double>(cfg.patch_size),
                  static_cast<double>(cfg.channels), static_cast<double>(cfg.dim),
                  static_cast<double>(cfg.depth), static_cast<double>(cfg.heads),
                  static_cast<double>(cfg.mlp_dim), static_cast<double>(cfg.classes),
                  static_cast<double>(cfg.special_tokens)}});
  for (const auto& [name, t] : p.named())
    out.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
  save_container(path, out);
}

namespace {

int64_t config_field(const NamedTensor& t, size_t i, const std::string& path) {
  const double v = t.data[i];
  if (v != std::floor(v) || std::fabs(v) > 1e12)
    throw format_error(msg(path, ": config field ", i, " is not an integer"));
  return static_cast<int64_t>(v);
}

}  // namespace

LoadedBackbone load_backbone(const std::string& path) {
  auto tensors = load_container(path);
  auto lookup = [&](const std::string& name) -> const NamedTensor* {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  };
  const NamedTensor* ct = lookup("config");
  if (!ct || ct->data.size() != 9)
    throw format_error(msg(path, ": missing or malformed config tensor"));
  ModelConfig cfg;
  cfg.image_size = config_field(*ct, 0, path);
  cfg.patch_size = config_field(*ct, 1, path);
  cfg.channels = config_field(*ct, 2, path);
  cfg.dim = config_field(*ct, 3, path);
  cfg.depth = config_field(*ct, 4, path);
  cfg.heads = config_field(*ct, 5, path);
  cfg.mlp_dim = config_field(*ct, 6, path);
  cfg.classes = config_field(*ct, 7, path);
  cfg.special_tokens = config_field(*ct, 8, path);
  try {
    cfg.validate();
  } catch (const config_error& e) {
    throw format_error(msg(path, ": stored config is invalid: ", e.what()));
  }

  LoadedBackbone out{{}, cfg};
  RngStream scratch(0, 0);
  out.params = ModelParams::init(cfg, scratch);
  size_t used = 1;
  for (auto& [name, t] : out.params.named()) {
    const NamedTensor* src = lookup(name);
    if (!src) throw format_error(msg(path, ": missing tensor '", name, "'"));
    if (src->shape != t.shape())
      throw format_error(msg(path, ": tensor '", name, "' has shape ", shape_str(src->shape),
                             ", expected ", shape_str(t.shape())));
    Tensor h = t;
    std::copy(src->data.begin(), src->data.end(), h.data().begin());
    ++used;
  }
  if (used != tensors.size())
    throw format_error(msg(path, ": container holds ", tensors.size() - used,
                           " tensors the model does not use"));
  return out;
}

}  // namespace tnt
