#include "tnt/pruning.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>

namespace tnt {
namespace {

bool contains(const std::vector<int64_t>& v, int64_t x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

std::vector<int64_t> default_ids(std::span<const int64_t> sample_ids, int64_t batch) {
  if (sample_ids.empty()) {
    std::vector<int64_t> ids(static_cast<size_t>(batch));
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
  }
  if (static_cast<int64_t>(sample_ids.size()) != batch)
    throw usage_error(msg("got ", sample_ids.size(), " sample ids for a batch of ", batch));
  return std::vector<int64_t>(sample_ids.begin(), sample_ids.end());
}

// Ascending positions, preferring high scores and low positions on ties.
std::vector<int64_t> order_by_score(std::span<const double> scores) {
  std::vector<int64_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
      return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    return a < b;
  });
  return order;
}

double cosine(std::span<const double> u, std::span<const double> v) {
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

int64_t floor_count(int64_t n, double rate) {
  return static_cast<int64_t>(std::floor(static_cast<double>(n) * rate));
}

}  // namespace

void PruneSchedule::validate(const ModelConfig& mc, const AllocatorParams& ap) const {
  if (locations.empty()) throw schedule_error("schedule has no locations");
  if (mode == PruneMode::single_layer && locations.size() != 1)
    throw schedule_error(msg("single_layer takes exactly one location, got ", locations.size()));
  if (rates.size() != locations.size())
    throw schedule_error(msg(rates.size(), " rates for ", locations.size(), " locations"));
  for (size_t i = 0; i < locations.size(); ++i) {
    if (locations[i] < 1 || locations[i] > mc.depth)
      throw schedule_error(msg("location ", locations[i], " outside [1, ", mc.depth, "]"));
    if (i > 0 && locations[i] <= locations[i - 1])
      throw schedule_error("locations must be strictly increasing");
    if (!(rates[i] > 0.0 && rates[i] <= 1.0))
      throw schedule_error(msg("rate ", rates[i], " outside (0, 1]"));
    if (!contains(ap.layers, locations[i] - 1))
      throw schedule_error(
          msg("location ", locations[i], " needs an allocator head on block ", locations[i] - 1));
  }
  if (s < 0) throw schedule_error(msg("negative similarity count ", s));
  if (mode == PruneMode::single_layer && pre_block_similarity)
    throw schedule_error("pre_block_similarity only applies to multi_layer schedules");
  if (mode == PruneMode::multi_layer && s > 0 && !pre_block_similarity)
    throw schedule_error("multi_layer consumes s in the input stage; enable pre_block_similarity");
  if (mode == PruneMode::multi_layer && pre_block_similarity &&
      similarity.partition == PartitionKind::sequential)
    throw schedule_error("no scores exist before the first block; use the random partition");
}

KeepDecision rank_and_keep(std::span<const double> alpha, int64_t keep_count) {
  const int64_t live = static_cast<int64_t>(alpha.size());
  if (keep_count < 1 || keep_count > live)
    throw domain_error(msg("keep count ", keep_count, " outside [1, ", live, "]"));
  std::vector<int64_t> order = order_by_score(alpha);
  KeepDecision d;
  d.kept.assign(order.begin(), order.begin() + keep_count);
  std::sort(d.kept.begin(), d.kept.end());
  std::vector<int64_t> dropped(order.begin() + keep_count, order.end());
  std::sort(dropped.begin(), dropped.end());
  for (int64_t p : dropped) d.removed.push_back({p, RemovalKind::alpha_ranked, -1});
  return d;
}

KeepDecision random_keep(int64_t live, int64_t keep_count, RngStream& rng) {
  if (keep_count < 1 || keep_count > live)
    throw domain_error(msg("keep count ", keep_count, " outside [1, ", live, "]"));
  std::vector<int64_t> pool(static_cast<size_t>(live));
  std::iota(pool.begin(), pool.end(), 0);
  for (int64_t i = 0; i < keep_count; ++i) {
    int64_t j = i + static_cast<int64_t>(rng.uniform() * static_cast<double>(live - i));
    if (j >= live) j = live - 1;
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  KeepDecision d;
  d.kept.assign(pool.begin(), pool.begin() + keep_count);
  std::sort(d.kept.begin(), d.kept.end());
  std::vector<int64_t> dropped(pool.begin() + keep_count, pool.end());
  std::sort(dropped.begin(), dropped.end());
  for (int64_t p : dropped) d.removed.push_back({p, RemovalKind::alpha_ranked, -1});
  return d;
}

KeepDecision cls_topk_keep(const AttentionRecord& rec, int64_t sample, int64_t special_tokens,
                           int64_t keep_count) {
  if (special_tokens < 1)
    throw usage_error("attention ranking needs a class token; this model pools patch tokens");
  if (sample < 0 || sample >= static_cast<int64_t>(rec.cls_row.size()))
    throw domain_error(msg("sample ", sample, " outside the recorded batch"));
  const std::vector<double>& row = rec.cls_row[static_cast<size_t>(sample)];
  std::vector<double> scores(row.begin() + special_tokens, row.end());
  return rank_and_keep(scores, keep_count);
}

TokenBatch apply_keep(const TokenBatch& tb, const std::vector<std::vector<int64_t>>& keep_pos) {
  const int64_t b = tb.x.dim(0), t = tb.x.dim(1), d = tb.x.dim(2);
  const int64_t s = tb.special_tokens, live = t - s;
  if (static_cast<int64_t>(keep_pos.size()) != b)
    throw usage_error(msg(keep_pos.size(), " keep lists for a batch of ", b));
  const int64_t k = static_cast<int64_t>(keep_pos[0].size());
  if (k < 1) throw schedule_error("empty keep set");
  for (const auto& kp : keep_pos) {
    if (static_cast<int64_t>(kp.size()) != k)
      throw usage_error("keep lists must share one length across the batch");
    for (size_t i = 0; i < kp.size(); ++i) {
      if (kp[i] < 0 || kp[i] >= live)
        throw domain_error(msg("keep position ", kp[i], " outside [0, ", live, ")"));
      if (i > 0 && kp[i] <= kp[i - 1]) throw usage_error("keep positions must be ascending");
    }
  }
  Tensor out = Tensor::zeros({b, s + k, d});
  std::span<double> dst = out.data();
  std::span<const double> src = tb.x.data();
  TokenBatch res;
  res.special_tokens = s;
  res.live.resize(static_cast<size_t>(b));
  for (int64_t bi = 0; bi < b; ++bi) {
    const int64_t src_base = bi * t * d, dst_base = bi * (s + k) * d;
    std::copy_n(src.begin() + src_base, s * d, dst.begin() + dst_base);
    for (int64_t i = 0; i < k; ++i) {
      const int64_t p = keep_pos[static_cast<size_t>(bi)][static_cast<size_t>(i)];
      std::copy_n(src.begin() + src_base + (s + p) * d, d, dst.begin() + dst_base + (s + i) * d);
      res.live[static_cast<size_t>(bi)].push_back(tb.live[static_cast<size_t>(bi)][static_cast<size_t>(p)]);
    }
  }
  res.x = out;
  return res;
}

SimilarityOutcome similarity_prune(const TokenBatch& tb, const SimilarityConfig& cfg,
                                   std::span<const int64_t> sample_ids, const Grid* scores) {
  const int64_t b = tb.x.dim(0), t = tb.x.dim(1), d = tb.x.dim(2);
  const int64_t s = tb.special_tokens, live = t - s;
  std::vector<int64_t> ids = default_ids(sample_ids, b);
  if (cfg.r < 0) throw domain_error(msg("negative similarity count ", cfg.r));
  if (cfg.r == 0) return {tb, std::vector<std::vector<Removal>>(static_cast<size_t>(b))};
  if (live < 2) throw domain_error(msg("similarity pruning needs at least 2 live tokens, got ", live));
  if (cfg.r > live / 2)
    throw domain_error(msg("similarity count ", cfg.r, " exceeds half of ", live, " live tokens"));
  if (cfg.partition == PartitionKind::sequential) {
    if (scores == nullptr) throw usage_error("sequential partition needs per-token scores");
    if (scores->rows != b || scores->cols != live)
      throw usage_error(msg("score grid is ", scores->rows, "x", scores->cols, ", expected ", b,
                            "x", live));
  }

  std::vector<double> buf(tb.x.data().begin(), tb.x.data().end());
  std::vector<std::vector<int64_t>> keep_pos(static_cast<size_t>(b));
  SimilarityOutcome out;
  out.removed.resize(static_cast<size_t>(b));

  for (int64_t bi = 0; bi < b; ++bi) {
    std::vector<int64_t> a_set, b_set;
    if (cfg.partition == PartitionKind::random) {
      std::vector<int64_t> perm(static_cast<size_t>(live));
      std::iota(perm.begin(), perm.end(), 0);
      RngStream st = cfg.seed.derive(static_cast<uint64_t>(ids[static_cast<size_t>(bi)]));
      for (int64_t i = live - 1; i > 0; --i) {
        int64_t j = static_cast<int64_t>(st.uniform() * static_cast<double>(i + 1));
        if (j > i) j = i;
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
      }
      a_set.assign(perm.begin(), perm.begin() + live / 2);
      b_set.assign(perm.begin() + live / 2, perm.end());
    } else {
      std::span<const double> row(scores->v.data() + bi * live, static_cast<size_t>(live));
      std::vector<int64_t> order = order_by_score(row);
      for (int64_t i = 0; i < live; ++i) {
        bool to_a = (i % 2 == 0);
        if (live % 2 == 1 && i == live - 1) to_a = false;  // B takes the odd one out
        (to_a ? a_set : b_set).push_back(order[static_cast<size_t>(i)]);
      }
    }
    std::sort(a_set.begin(), a_set.end());
    std::sort(b_set.begin(), b_set.end());

    auto row_of = [&](int64_t p) {
      return std::span<const double>(buf.data() + (bi * t + s + p) * d, static_cast<size_t>(d));
    };
    // Matches use the embeddings as they stand now; merges later on never
    // re-rank anything.
    struct Match {
      int64_t b_pos, a_pos;
      double score;
    };
    std::vector<Match> matches;
    for (int64_t bp : b_set) {
      int64_t best = a_set[0];
      double best_score = cosine(row_of(bp), row_of(a_set[0]));
      for (size_t ai = 1; ai < a_set.size(); ++ai) {
        double c = cosine(row_of(bp), row_of(a_set[ai]));
        if (c > best_score) {
          best_score = c;
          best = a_set[ai];
        }
      }
      matches.push_back({bp, best, best_score});
    }
    std::sort(matches.begin(), matches.end(), [](const Match& x, const Match& y) {
      if (x.score != y.score) return x.score > y.score;
      return x.b_pos < y.b_pos;
    });

    std::vector<bool> gone(static_cast<size_t>(live), false);
    const auto& patch = tb.live[static_cast<size_t>(bi)];
    for (int64_t i = 0; i < cfg.r; ++i) {
      const Match& m = matches[static_cast<size_t>(i)];
      gone[static_cast<size_t>(m.b_pos)] = true;
      if (cfg.action == SimilarityAction::drop) {
        out.removed[static_cast<size_t>(bi)].push_back(
            {patch[static_cast<size_t>(m.b_pos)], RemovalKind::similarity, -1});
      } else {
        double* dst = buf.data() + (bi * t + s + m.a_pos) * d;
        std::span<const double> srcb = row_of(m.b_pos);
        for (int64_t j = 0; j < d; ++j) dst[j] = 0.5 * (dst[j] + srcb[static_cast<size_t>(j)]);
        out.removed[static_cast<size_t>(bi)].push_back(
            {patch[static_cast<size_t>(m.b_pos)], RemovalKind::merged,
             patch[static_cast<size_t>(m.a_pos)]});
      }
    }
    for (int64_t p = 0; p < live; ++p)
      if (!gone[static_cast<size_t>(p)]) keep_pos[static_cast<size_t>(bi)].push_back(p);
  }

  TokenBatch merged;
  merged.x = Tensor::from(tb.x.shape(), std::move(buf));
  merged.special_tokens = s;
  merged.live = tb.live;
  out.batch = apply_keep(merged, keep_pos);
  return out;
}

ScheduleResult apply_schedule(const ModelParams& bp, const ModelConfig& mc,
                              const AllocatorParams& ap, const Tensor& images,
                              const PruneSchedule& schedule,
                              std::span<const int64_t> sample_ids) {
  schedule.validate(mc, ap);
  const int64_t b = images.dim(0);
  std::vector<int64_t> ids = default_ids(sample_ids, b);
  TokenBatch tb = embed(bp, mc, images);
  const int64_t sp = tb.special_tokens;
  ScheduleResult res;

  auto record = [&](int64_t layer, const std::vector<std::vector<Removal>>& removed) {
    for (int64_t bi = 0; bi < b; ++bi)
      res.history.push_back({ids[static_cast<size_t>(bi)], layer,
                             tb.live[static_cast<size_t>(bi)],
                             removed[static_cast<size_t>(bi)]});
  };

  if (schedule.mode == PruneMode::multi_layer && schedule.pre_block_similarity && schedule.s > 0) {
    SimilarityConfig c = schedule.similarity;
    c.r = schedule.s;
    SimilarityOutcome so = similarity_prune(tb, c, ids, nullptr);
    tb = so.batch;
    record(0, so.removed);
  }

  for (int64_t blk = 0; blk < mc.depth; ++blk) {
    res.tokens_per_layer.push_back(tb.x.dim(1));
    tb.x = block_forward(bp.blocks[static_cast<size_t>(blk)], mc, tb.x);

    auto loc_it = std::find(schedule.locations.begin(), schedule.locations.end(), blk + 1);
    if (loc_it == schedule.locations.end()) continue;
    const double rate = schedule.rates[static_cast<size_t>(loc_it - schedule.locations.begin())];
    const int64_t live = tb.live_count();

    int64_t keep_count;
    if (schedule.mode == PruneMode::single_layer) {
      const int64_t final_count = floor_count(mc.patch_tokens(), rate);
      if (final_count < 1)
        throw schedule_error(msg("rate ", rate, " keeps no tokens of ", mc.patch_tokens()));
      keep_count = final_count + schedule.s;
    } else {
      keep_count = floor_count(live, rate);
      if (keep_count < 1)
        throw schedule_error(msg("rate ", rate, " keeps no tokens of ", live, " at location ",
                                 blk + 1));
    }

    const AllocatorHead& head = ap.heads[static_cast<size_t>(ap.head_index(blk))];
    Tensor alpha = compute_alpha(tb.x, sp, head);
    std::span<const double> av = alpha.data();

    std::vector<std::vector<int64_t>> keep_pos(static_cast<size_t>(b));
    std::vector<std::vector<Removal>> removed(static_cast<size_t>(b));
    Grid kept_scores(b, keep_count);
    for (int64_t bi = 0; bi < b; ++bi) {
      std::span<const double> row = av.subspan(static_cast<size_t>(bi * live),
                                               static_cast<size_t>(live));
      KeepDecision kd = rank_and_keep(row, keep_count);
      const auto& patch = tb.live[static_cast<size_t>(bi)];
      for (const Removal& r : kd.removed)
        removed[static_cast<size_t>(bi)].push_back(
            {patch[static_cast<size_t>(r.token)], RemovalKind::alpha_ranked, -1});
      for (int64_t i = 0; i < keep_count; ++i)
        kept_scores.at(bi, i) = row[static_cast<size_t>(kd.kept[static_cast<size_t>(i)])];
      keep_pos[static_cast<size_t>(bi)] = std::move(kd.kept);
    }
    tb = apply_keep(tb, keep_pos);

    if (schedule.mode == PruneMode::single_layer && schedule.s > 0) {
      SimilarityConfig c = schedule.similarity;
      c.r = schedule.s;
      SimilarityOutcome so = similarity_prune(tb, c, ids, &kept_scores);
      tb = so.batch;
      for (int64_t bi = 0; bi < b; ++bi)
        removed[static_cast<size_t>(bi)].insert(removed[static_cast<size_t>(bi)].end(),
                                                so.removed[static_cast<size_t>(bi)].begin(),
                                                so.removed[static_cast<size_t>(bi)].end());
    }
    record(blk + 1, removed);
  }

  res.logits = readout(bp, mc, tb.x, sp);
  return res;
}

BaselineResult apply_baseline(const ModelParams& bp, const ModelConfig& mc, BaselineKind kind,
                              const Tensor& images, int64_t location, int64_t keep_count,
                              RngStream& rng, std::span<const int64_t> sample_ids) {
  if (location < 1 || location > mc.depth)
    throw schedule_error(msg("location ", location, " outside [1, ", mc.depth, "]"));
  if (kind == BaselineKind::cls_topk && mc.special_tokens < 1)
    throw usage_error("attention ranking needs a class token; this model pools patch tokens");
  const int64_t b = images.dim(0);
  std::vector<int64_t> ids = default_ids(sample_ids, b);
  TokenBatch tb = embed(bp, mc, images);
  BaselineResult res;

  for (int64_t blk = 0; blk < mc.depth; ++blk) {
    res.tokens_per_layer.push_back(tb.x.dim(1));
    AttentionRecord rec;
    const bool here = (blk == location - 1);
    tb.x = block_forward(bp.blocks[static_cast<size_t>(blk)], mc, tb.x,
                         here && kind == BaselineKind::cls_topk ? &rec : nullptr);
    if (!here) continue;

    const int64_t live = tb.live_count();
    std::vector<std::vector<int64_t>> keep_pos(static_cast<size_t>(b));
    for (int64_t bi = 0; bi < b; ++bi) {
      KeepDecision kd;
      if (kind == BaselineKind::random_drop) {
        RngStream st = rng.derive(static_cast<uint64_t>(ids[static_cast<size_t>(bi)]));
        kd = random_keep(live, keep_count, st);
      } else {
        kd = cls_topk_keep(rec, bi, tb.special_tokens, keep_count);
      }
      keep_pos[static_cast<size_t>(bi)] = std::move(kd.kept);
    }
    tb = apply_keep(tb, keep_pos);
  }

  res.kept = tb.live;
  res.logits = readout(bp, mc, tb.x, tb.special_tokens);
  return res;
}

namespace {

std::string tag_of(const Removal& r) {
  switch (r.kind) {
    case RemovalKind::alpha_ranked:
      return "alpha_ranked";
    case RemovalKind::similarity:
      return "similarity";
    case RemovalKind::merged:
      return msg("merged-into:", r.merged_into);
  }
  throw usage_error("unknown removal kind");
}

int64_t parse_i64(std::string_view s, size_t line_no, const char* what) {
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw format_error(msg("line ", line_no, ": bad ", what, " '", std::string(s), "'"));
  return v;
}

}  // namespace

std::string history_to_text(const std::vector<KeepEvent>& events) {
  std::string out;
  for (const KeepEvent& e : events) {
    out += msg(e.sample, ",", e.layer, ",kept=");
    for (size_t i = 0; i < e.kept.size(); ++i) {
      if (i > 0) out += ';';
      out += std::to_string(e.kept[i]);
    }
    out += ",removed=";
    for (size_t i = 0; i < e.removed.size(); ++i) {
      if (i > 0) out += ';';
      out += msg(e.removed[i].token, ":", tag_of(e.removed[i]));
    }
    out += '\n';
  }
  return out;
}

std::vector<KeepEvent> history_from_text(const std::string& text) {
  std::vector<KeepEvent> events;
  size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string_view line(text.data() + pos, eol - pos);
    pos = eol + (eol < text.size() ? 1 : 0);
    ++line_no;
    if (line.empty()) continue;

    size_t c1 = line.find(',');
    size_t c2 = c1 == std::string_view::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string_view::npos)
      throw format_error(msg("line ", line_no, ": expected sample,layer,kept=...,removed=..."));
    KeepEvent e;
    e.sample = parse_i64(line.substr(0, c1), line_no, "sample");
    e.layer = parse_i64(line.substr(c1 + 1, c2 - c1 - 1), line_no, "layer");

    std::string_view rest = line.substr(c2 + 1);
    constexpr std::string_view kKept = "kept=", kRemoved = ",removed=";
    if (rest.substr(0, kKept.size()) != kKept)
      throw format_error(msg("line ", line_no, ": missing kept list"));
    size_t sep = rest.find(kRemoved);
    if (sep == std::string_view::npos)
      throw format_error(msg("line ", line_no, ": missing removed list"));
    std::string_view kept = rest.substr(kKept.size(), sep - kKept.size());
    std::string_view removed = rest.substr(sep + kRemoved.size());

    if (kept.empty()) throw format_error(msg("line ", line_no, ": empty kept list"));
    while (!kept.empty()) {
      size_t semi = kept.find(';');
      e.kept.push_back(parse_i64(kept.substr(0, semi), line_no, "kept token"));
      kept = semi == std::string_view::npos ? std::string_view() : kept.substr(semi + 1);
    }
    while (!removed.empty()) {
      size_t semi = removed.find(';');
      std::string_view item = removed.substr(0, semi);
      removed = semi == std::string_view::npos ? std::string_view() : removed.substr(semi + 1);
      size_t colon = item.find(':');
      if (colon == std::string_view::npos)
        throw format_error(msg("line ", line_no, ": removal '", std::string(item),
                               "' has no tag"));
      Removal r;
      r.token = parse_i64(item.substr(0, colon), line_no, "removed token");
      std::string_view tag = item.substr(colon + 1);
      constexpr std::string_view kMerged = "merged-into:";
      if (tag == "alpha_ranked") {
        r.kind = RemovalKind::alpha_ranked;
      } else if (tag == "similarity") {
        r.kind = RemovalKind::similarity;
      } else if (tag.substr(0, kMerged.size()) == kMerged) {
        r.kind = RemovalKind::merged;
        r.merged_into = parse_i64(tag.substr(kMerged.size()), line_no, "merge target");
      } else {
        throw format_error(msg("line ", line_no, ": unknown tag '", std::string(tag), "'"));
      }
      e.removed.push_back(r);
    }
    events.push_back(std::move(e));
  }
  return events;
}

}  // namespace tnt
