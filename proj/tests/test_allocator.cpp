#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tnt/allocator.hpp"
#include "tnt/checkpoint.hpp"
#include "tnt/gradcheck.hpp"

using namespace tnt;

namespace {

ModelConfig tiny_config(int64_t special = 1) {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 1;
  c.dim = 6;
  c.depth = 2;
  c.heads = 2;
  c.mlp_dim = 10;
  c.classes = 3;
  c.special_tokens = special;
  return c;
}

std::vector<double> bytes_of(const AllocatorParams& p) {
  std::vector<double> out;
  for (const auto& [name, t] : p.named()) {
    (void)name;
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return out;
}

}  // namespace

TEST_CASE("alpha closed forms") {
  // Zero head weights: constant logits, uniform alpha.
  AllocatorHead zero;
  zero.w1 = Tensor::zeros({6, 1});
  RngStream r(1, 0);
  Tensor x = gaussian(r, {2, 5, 6});
  Tensor a = compute_alpha(x, 1, zero);
  REQUIRE(a.shape() == Shape{2, 4});
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == doctest::Approx(0.25).epsilon(1e-14));

  // One live token.
  Tensor one = compute_alpha(slice_axis(x, 1, 0, 2), 1, zero);
  REQUIRE(one.shape() == Shape{2, 1});
  CHECK(one.data()[0] == 1.0);

  // Identity head on width-1 embeddings: logits [0, ln 2, ln 4].
  AllocatorHead ident;
  ident.w1 = Tensor::from({1, 1}, {1.0});
  Tensor xv = Tensor::from({1, 4, 1}, {9.0, 0.0, std::log(2.0), std::log(4.0)});
  Tensor av = compute_alpha(xv, 1, ident);
  CHECK(std::fabs(av.data()[0] - 1.0 / 7.0) < 1e-12);
  CHECK(std::fabs(av.data()[1] - 2.0 / 7.0) < 1e-12);
  CHECK(std::fabs(av.data()[2] - 4.0 / 7.0) < 1e-12);

  // No live tokens at all.
  CHECK_THROWS_AS(compute_alpha(slice_axis(x, 1, 0, 1), 1, zero), domain_error);
}

TEST_CASE("alpha keeps the budget and the logit order") {
  RngStream r(2, 0);
  AllocatorHead head;
  head.w1 = gaussian(r, {6, 1});
  Tensor x = gaussian(r, {3, 9, 6});
  Tensor a = compute_alpha(x, 1, head);
  for (int64_t b = 0; b < 3; ++b) {
    double sum = 0.0, comp = 0.0;
    for (int64_t i = 0; i < 8; ++i) {
      const double v = a.data()[b * 8 + i];
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      sum += v;
      comp += 1.0 - v;
    }
    CHECK(std::fabs(sum - 1.0) < 1e-9);
    CHECK(std::fabs(comp - 7.0) < 1e-9);
  }

  // Strictly monotone softmax: descending alpha equals descending logits.
  for (int64_t b = 0; b < 3; ++b) {
    std::vector<double> logits(8, 0.0);
    for (int64_t i = 0; i < 8; ++i)
      for (int64_t d = 0; d < 6; ++d)
        logits[static_cast<size_t>(i)] +=
            x.data()[(b * 9 + 1 + i) * 6 + d] * head.w1.data()[d];
    std::vector<int64_t> by_logit(8), by_alpha(8);
    std::iota(by_logit.begin(), by_logit.end(), 0);
    by_alpha = by_logit;
    std::sort(by_logit.begin(), by_logit.end(), [&](int64_t i, int64_t j) {
      return logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(j)];
    });
    std::sort(by_alpha.begin(), by_alpha.end(), [&](int64_t i, int64_t j) {
      return a.data()[b * 8 + i] > a.data()[b * 8 + j];
    });
    CHECK(by_logit == by_alpha);
  }
}

TEST_CASE("noise injection contract") {
  ModelConfig mc = tiny_config();
  NoiseConfig nc;
  nc.noised_layers = {0};
  nc.rng = RngStream(7, 3);
  RngStream ir(8, 0);
  AllocatorParams ap = AllocatorParams::init(mc, nc, HeadKind::linear, 0, ir);

  RngStream xr(9, 0);
  TokenBatch tb;
  tb.x = gaussian(xr, {2, 5, 6});
  tb.special_tokens = 1;
  tb.live.assign(2, {0, 1, 2, 3});
  Tensor alpha = Tensor::full({2, 4}, 0.25);

  // Training-only: no active tape means usage_error.
  CHECK_THROWS_AS(inject_training_noise(tb, alpha, ap, nc), usage_error);

  // beta = 0 reduces to alpha_norm exactly; special rows never move even with
  // beta > 0.
  Tensor xn = layer_norm(tb.x, ap.norm_g, ap.norm_b, kLnEps);
  {
    Tape tape;
    NoiseConfig zero = nc;
    zero.beta = 0.0;
    TokenBatch out = inject_training_noise(tb, alpha, ap, zero);
    bool same = true;
    for (int64_t i = 0; i < out.x.numel(); ++i) same = same && out.x.data()[i] == xn.data()[i];
    CHECK(same);
  }
  {
    Tape tape;
    TokenBatch out = inject_training_noise(tb, alpha, ap, nc);
    bool special_zero = true, patches_moved = false;
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t d = 0; d < 6; ++d) {
        special_zero = special_zero && out.x.data()[b * 30 + d] == xn.data()[b * 30 + d];
        patches_moved = patches_moved || out.x.data()[b * 30 + 6 + d] != xn.data()[b * 30 + 6 + d];
      }
    CHECK(special_zero);
    CHECK(patches_moved);
  }
}

TEST_CASE("added noise has per-dimension std beta*(1-alpha)") {
  ModelConfig mc = tiny_config();
  mc.dim = 4;
  mc.heads = 2;
  NoiseConfig nc;
  nc.noised_layers = {0};
  nc.rng = RngStream(11, 0);
  RngStream ir(12, 0);
  AllocatorParams ap = AllocatorParams::init(mc, nc, HeadKind::linear, 0, ir);

  const int64_t B = 250, L = 4, D = 4, iters = 400;
  RngStream xr(13, 0);
  TokenBatch tb;
  tb.x = gaussian(xr, {B, 1 + L, D});
  tb.special_tokens = 1;
  tb.live.assign(static_cast<size_t>(B), {0, 1, 2, 3});
  const std::vector<double> avals = {0.25, 0.25, 0.25, 0.25};
  Tensor alpha = Tensor::zeros({B, L});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < L; ++i) alpha.data()[b * L + i] = avals[static_cast<size_t>(i)];

  Tensor xn = layer_norm(tb.x, ap.norm_g, ap.norm_b, kLnEps);
  std::vector<double> sum(static_cast<size_t>(L), 0.0), sumsq(static_cast<size_t>(L), 0.0);
  for (int64_t it = 0; it < iters; ++it) {
    Tape tape;
    TokenBatch out = inject_training_noise(tb, alpha, ap, nc);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < L; ++i)
        for (int64_t d = 0; d < D; ++d) {
          const double v = out.x.data()[(b * (1 + L) + 1 + i) * D + d] -
                           xn.data()[(b * (1 + L) + 1 + i) * D + d];
          sum[static_cast<size_t>(i)] += v;
          sumsq[static_cast<size_t>(i)] += v * v;
        }
  }
  const double n = static_cast<double>(iters * B * D);
  for (int64_t i = 0; i < L; ++i) {
    const double mean = sum[static_cast<size_t>(i)] / n;
    const double sd = std::sqrt(sumsq[static_cast<size_t>(i)] / n - mean * mean);
    const double want = 0.02 * (1.0 - avals[static_cast<size_t>(i)]);
    INFO("token ", i, " sd=", sd, " want=", want);
    CHECK(std::fabs(sd - want) / want < 0.02);
  }
}

TEST_CASE("finite differences agree for the noised forward, both head kinds") {
  for (HeadKind kind : {HeadKind::linear, HeadKind::mlp}) {
    ModelConfig mc = tiny_config();
    NoiseConfig nc;
    nc.noised_layers = {0, 1};
    RngStream br(21, 0);
    ModelParams bp = ModelParams::init(mc, br);
    RngStream ir(22, 0);
    AllocatorParams ap = AllocatorParams::init(mc, nc, kind, 4, ir);

    RngStream xr(23, 0);
    Tensor images = gaussian(xr, {2, 1, 8, 8});
    const std::vector<int64_t> labels = {0, 2};
    RngStream er(24, 0);
    std::vector<Tensor> fixed = {gaussian(er, {2, 4, 6}), gaussian(er, {2, 4, 6})};

    auto report = finite_diff_check(
        [&] { return cross_entropy(noised_forward(bp, mc, ap, nc, images, &fixed), labels); },
        ap.named(), 1e-5);
    INFO("kind=", kind == HeadKind::mlp ? "mlp" : "linear", " worst ", report.worst_param, "[",
         report.worst_index, "] analytic=", report.worst_analytic,
         " numeric=", report.worst_numeric);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("allocator training freezes the backbone and honors lr=0") {
  ModelConfig mc = tiny_config();
  mc.classes = 2;
  NoiseConfig nc;
  nc.noised_layers = {0};
  RngStream br(31, 0);
  ModelParams bp = ModelParams::init(mc, br);
  RngStream ir(32, 0);
  AllocatorParams ap = AllocatorParams::init(mc, nc, HeadKind::linear, 0, ir);

  DatasetSpec spec;
  spec.image_size = 8;
  spec.patch_size = 4;
  spec.samples_per_class = 10;
  spec.informative_patches = {1};
  spec.background_noise = 0.3;
  Dataset ds = generate_synthetic(spec, 33);
  std::vector<int64_t> idx(static_cast<size_t>(ds.size()));
  std::iota(idx.begin(), idx.end(), 0);

  std::vector<double> backbone_before;
  for (const auto& [name, t] : bp.named()) {
    (void)name;
    backbone_before.insert(backbone_before.end(), t.data().begin(), t.data().end());
  }
  std::vector<double> alloc_before = bytes_of(ap);

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.lr = 0.0;
  RngStream t1(34, 0);
  train_allocator(bp, mc, ap, nc, ds, idx, tc, t1);
  CHECK(bytes_of(ap) == alloc_before);

  tc.lr = 3.0;
  RngStream t2(35, 0);
  auto h1 = train_allocator(bp, mc, ap, nc, ds, idx, tc, t2);
  REQUIRE(h1.size() == 2);
  CHECK(bytes_of(ap) != alloc_before);

  std::vector<double> backbone_after;
  for (const auto& [name, t] : bp.named()) {
    (void)name;
    backbone_after.insert(backbone_after.end(), t.data().begin(), t.data().end());
  }
  CHECK(backbone_after == backbone_before);

  // Same seed, same init: bit-identical result.
  AllocatorParams ap2 = ap;
  {
    RngStream ir2(32, 0);
    ap2 = AllocatorParams::init(mc, nc, HeadKind::linear, 0, ir2);
    RngStream t3(34, 0);
    TrainConfig z = tc;
    z.lr = 0.0;
    train_allocator(bp, mc, ap2, nc, ds, idx, z, t3);
    RngStream t4(35, 0);
    train_allocator(bp, mc, ap2, nc, ds, idx, tc, t4);
  }
  CHECK(bytes_of(ap2) == bytes_of(ap));
}

TEST_CASE("collect_alpha matches the training-path alpha computation") {
  ModelConfig mc = tiny_config();
  NoiseConfig nc;
  nc.noised_layers = {1};
  RngStream br(41, 0);
  ModelParams bp = ModelParams::init(mc, br);
  RngStream ir(42, 0);
  AllocatorParams ap = AllocatorParams::init(mc, nc, HeadKind::mlp, 0, ir);
  RngStream xr(43, 0);
  Tensor images = gaussian(xr, {3, 1, 8, 8});

  Grid g1 = collect_alpha(bp, mc, ap, nc, images, 1);
  Grid g2 = collect_alpha(bp, mc, ap, nc, images, 1);
  CHECK(g1.v == g2.v);

  TokenBatch tb = embed(bp, mc, images);
  tb.x = block_forward(bp.blocks[0], mc, tb.x);
  tb.x = block_forward(bp.blocks[1], mc, tb.x);
  Tensor a = compute_alpha(tb.x, 1, ap.heads[0]);
  REQUIRE(a.numel() == static_cast<int64_t>(g1.v.size()));
  bool same = true;
  for (int64_t i = 0; i < a.numel(); ++i) same = same && a.data()[i] == g1.v[static_cast<size_t>(i)];
  CHECK(same);

  CHECK_THROWS_AS(collect_alpha(bp, mc, ap, nc, images, 0), usage_error);
}

TEST_CASE("snr capacity closed forms") {
  CHECK(snr_capacity(0.0, 5.0) == 0.0);
  CHECK(snr_capacity(1.0, 1.0) == doctest::Approx(1.0));
  CHECK(snr_capacity(3.0, 1.0) == doctest::Approx(2.0));
  CHECK_THROWS_AS(snr_capacity(1.0, 0.0), domain_error);
  CHECK_THROWS_AS(snr_capacity(-1.0, 1.0), domain_error);
}

TEST_CASE("allocator checkpoint round trip") {
  ModelConfig mc = tiny_config();
  NoiseConfig nc;
  nc.noised_layers = {0, 1};
  RngStream ir(51, 0);
  AllocatorParams ap = AllocatorParams::init(mc, nc, HeadKind::mlp, 0, ir);
  save_allocator("alloc_rt.tntc", ap, 0.02);
  LoadedAllocator la = load_allocator("alloc_rt.tntc");
  CHECK(la.beta == 0.02);
  CHECK(la.params.layers == ap.layers);
  CHECK(bytes_of(la.params) == bytes_of(ap));

  save_allocator("alloc_rt2.tntc", la.params, la.beta);
  std::ifstream f1("alloc_rt.tntc", std::ios::binary), f2("alloc_rt2.tntc", std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());

  auto tensors = load_container("alloc_rt.tntc");
  auto extra = tensors;
  extra.push_back({"stray", {1}, {0.0}});
  save_container("alloc_bad.tntc", extra);
  CHECK_THROWS_AS(load_allocator("alloc_bad.tntc"), format_error);
  auto missing = tensors;
  std::erase_if(missing, [](const NamedTensor& t) { return t.name == "alloc.alpha_norm.b"; });
  save_container("alloc_bad.tntc", missing);
  CHECK_THROWS_AS(load_allocator("alloc_bad.tntc"), format_error);
  for (const char* f : {"alloc_rt.tntc", "alloc_rt2.tntc", "alloc_bad.tntc"}) std::remove(f);
}

TEST_CASE("training moves alpha mass onto informative patches") {
  DatasetSpec spec;
  spec.image_size = 16;
  spec.patch_size = 4;
  spec.samples_per_class = 40;
  spec.informative_patches = center_patch_block(16, 4, 4);
  spec.signal = 2.0;
  spec.background_noise = 0.25;
  Dataset ds = generate_synthetic(spec, 61);
  std::vector<int64_t> idx(static_cast<size_t>(ds.size()));
  std::iota(idx.begin(), idx.end(), 0);

  ModelConfig mc;
  mc.image_size = 16;
  mc.patch_size = 4;
  mc.dim = 16;
  mc.depth = 2;
  mc.heads = 2;
  mc.mlp_dim = 32;
  mc.classes = 2;
  mc.special_tokens = 0;
  RngStream br(62, 0);
  ModelParams bp = ModelParams::init(mc, br);
  bp.set_requires_grad(true);
  TrainConfig btc;
  btc.epochs = 25;
  btc.batch_size = 16;
  btc.lr = 0.2;
  RngStream btr(63, 0);
  train_backbone(bp, mc, ds, idx, btc, btr);
  REQUIRE(eval_accuracy(bp, mc, ds, idx, 32) >= 0.95);

  NoiseConfig nc;
  nc.noised_layers = {0};
  RngStream ir(64, 0);
  AllocatorParams ap = AllocatorParams::init(mc, nc, HeadKind::linear, 0, ir);
  TrainConfig atc;
  atc.epochs = 20;
  atc.batch_size = 16;
  atc.lr = 30.0;
  RngStream atr(65, 0);
  train_allocator(bp, mc, ap, nc, ds, idx, atc, atr);

  Grid alpha = collect_alpha(bp, mc, ap, nc, ds.images, 0);
  std::vector<bool> info(static_cast<size_t>(mc.patch_tokens()), false);
  for (int64_t p : ds.mask) info[static_cast<size_t>(p)] = true;
  double mi = 0.0, mo = 0.0;
  int64_t ni = 0, no = 0;
  for (int64_t r = 0; r < alpha.rows; ++r)
    for (int64_t c = 0; c < alpha.cols; ++c) {
      if (info[static_cast<size_t>(c)]) {
        mi += alpha.at(r, c);
        ++ni;
      } else {
        mo += alpha.at(r, c);
        ++no;
      }
    }
  mi /= static_cast<double>(ni);
  mo /= static_cast<double>(no);
  INFO("informative mean alpha ", mi, ", background mean alpha ", mo);
  CHECK(mi > mo);
}
