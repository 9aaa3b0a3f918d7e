#include "tnt/experiment.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "tnt/render.hpp"

namespace tnt {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

const std::set<std::string> kMethods = {"dense",   "tnt",    "tnt_no_sim", "tnt_seq",
                                        "tnt_merge", "random", "cls_topk"};

void check_keys(const json& obj, const char* where, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end())
      throw config_error(msg("unknown key '", key, "' in ", where));
  }
}

const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

int64_t get_int(const json& obj, const char* where, const char* key, int64_t def) {
  const json* v = find(obj, key);
  if (v == nullptr) return def;
  if (!v->is_number_integer())
    throw config_error(msg(where, ".", key, " must be an integer"));
  return v->get<int64_t>();
}

double get_double(const json& obj, const char* where, const char* key, double def) {
  const json* v = find(obj, key);
  if (v == nullptr) return def;
  if (!v->is_number()) throw config_error(msg(where, ".", key, " must be a number"));
  return v->get<double>();
}

bool get_bool(const json& obj, const char* where, const char* key, bool def) {
  const json* v = find(obj, key);
  if (v == nullptr) return def;
  if (!v->is_boolean()) throw config_error(msg(where, ".", key, " must be true or false"));
  return v->get<bool>();
}

std::string get_string(const json& obj, const char* where, const char* key,
                       const std::string& def) {
  const json* v = find(obj, key);
  if (v == nullptr) return def;
  if (!v->is_string()) throw config_error(msg(where, ".", key, " must be a string"));
  return v->get<std::string>();
}

std::vector<int64_t> get_int_list(const json& obj, const char* where, const char* key,
                                  std::vector<int64_t> def) {
  const json* v = find(obj, key);
  if (v == nullptr) return def;
  if (!v->is_array()) throw config_error(msg(where, ".", key, " must be an array"));
  std::vector<int64_t> out;
  for (const json& e : *v) {
    if (!e.is_number_integer())
      throw config_error(msg(where, ".", key, " must hold integers"));
    out.push_back(e.get<int64_t>());
  }
  return out;
}

std::vector<double> get_double_list(const json& obj, const char* where, const char* key,
                                    std::vector<double> def) {
  const json* v = find(obj, key);
  if (v == nullptr) return def;
  if (!v->is_array()) throw config_error(msg(where, ".", key, " must be an array"));
  std::vector<double> out;
  for (const json& e : *v) {
    if (!e.is_number()) throw config_error(msg(where, ".", key, " must hold numbers"));
    out.push_back(e.get<double>());
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error(msg(path, ": cannot open"));
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return text;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw format_error(msg(path, ": cannot open for writing"));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw format_error(msg(path, ": write failed"));
}

bool same_model(const ModelConfig& a, const ModelConfig& b) {
  return a.image_size == b.image_size && a.patch_size == b.patch_size &&
         a.channels == b.channels && a.dim == b.dim && a.depth == b.depth &&
         a.heads == b.heads && a.mlp_dim == b.mlp_dim && a.classes == b.classes &&
         a.special_tokens == b.special_tokens;
}

std::string stats_csv(const std::vector<EpochStats>& stats) {
  std::string out = "epoch,loss,accuracy\n";
  for (size_t i = 0; i < stats.size(); ++i)
    out += msg(i, ",", stats[i].loss, ",", stats[i].accuracy, "\n");
  return out;
}

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// Manifest: everything needed to re-execute the run bit for bit.
std::string write_manifest(const ExperimentConfig& cfg, const std::string& command,
                           const std::string& config_text,
                           const std::vector<std::string>& outputs) {
  json m;
  m["command"] = command;
  m["config_fnv1a"] = hex64(fnv1a64(config_text));
  m["defaults"] = {{"allocator_beta", cfg.allocator.beta},
                   {"allocator_epochs", cfg.allocator.train.epochs}};
  json seeds = json::array();
  for (uint64_t s : cfg.seeds) seeds.push_back(s);
  m["seeds"] = seeds;
  m["version"] = version_string();
  json outs = json::array();
  for (const std::string& o : outputs) outs.push_back(fs::path(o).filename().string());
  m["outputs"] = outs;
  const std::string path = (fs::path(cfg.out_dir) / ("manifest_" + command + ".json")).string();
  write_file(path, m.dump(2) + "\n");
  return path;
}

// Stream ids reserved per seed: 1 backbone init, 2 backbone shuffle, 3
// allocator init, 4 allocator training, 5 random baseline, 6 similarity
// partition. The dataset uses the seed directly.
RngStream seed_stream(uint64_t seed, uint64_t purpose) { return RngStream(seed, purpose); }

struct SeedContext {
  uint64_t seed = 0;
  Dataset ds;
  Split split;
  ModelParams backbone;
  AllocatorParams alloc;
  bool has_alloc = false;
};

int64_t argmax_row(std::span<const double> row) {
  int64_t best = 0;
  for (size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[static_cast<size_t>(best)]) best = static_cast<int64_t>(i);
  return best;
}

double rate_for_count(int64_t count, int64_t patches) {
  if (count == patches) return 1.0;
  return (static_cast<double>(count) + 0.5) / static_cast<double>(patches);
}

struct SweepRow {
  std::string method;
  uint64_t seed = 0;
  std::string keep_config;
  int64_t sort_tokens = 0;
  int64_t final_tokens = -1;
  double top1 = -1.0;
  double gflops = -1.0;
  double imgs_per_sec = -1.0;
  std::string note;
  std::string history_name;
  std::string history_text;
};

}  // namespace

uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 14695981039346656037ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

std::string version_string() { return "tnt 0.1.0"; }

int64_t shard_threads() {
  const char* env = std::getenv("TNT_THREADS");
  if (env == nullptr || *env == '\0')
    return std::max(1u, std::thread::hardware_concurrency());
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(env, env + std::string_view(env).size(), v);
  if (ec != std::errc() || *ptr != '\0' || v < 1)
    throw config_error(msg("TNT_THREADS must be a positive integer, got '", env, "'"));
  return v;
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  const int64_t width = std::min<int64_t>(shard_threads(), n);
  if (width <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (;;) {
      const int64_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int64_t t = 0; t < width; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

void ExperimentConfig::validate() const {
  model.validate();
  data.validate();
  if (data.image_size != model.image_size || data.patch_size != model.patch_size ||
      data.channels != model.channels || data.classes != model.classes)
    throw config_error("dataset geometry disagrees with the model");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw config_error(msg("train_fraction ", train_fraction, " outside (0, 1)"));
  if (allocator.beta < 0.0) throw config_error(msg("negative beta ", allocator.beta));
  if (allocator.hidden < 0) throw config_error(msg("negative hidden width ", allocator.hidden));
  for (size_t i = 0; i < allocator.noised_layers.size(); ++i) {
    const int64_t l = allocator.noised_layers[i];
    if (l < 0 || l >= model.depth)
      throw config_error(msg("noised layer ", l, " outside [0, ", model.depth, ")"));
    if (i > 0 && allocator.noised_layers[i - 1] >= l)
      throw config_error("noised_layers must be strictly ascending");
  }
  if (schedule.locations.empty()) throw config_error("schedule has no locations");
  if (schedule.mode == PruneMode::single_layer && schedule.locations.size() != 1)
    throw config_error("single_layer takes exactly one location");
  if (schedule.rates.size() != schedule.locations.size())
    throw config_error("schedule rates and locations differ in length");
  for (size_t i = 0; i < schedule.locations.size(); ++i) {
    const int64_t loc = schedule.locations[i];
    if (loc < 1 || loc > model.depth)
      throw config_error(msg("location ", loc, " outside [1, ", model.depth, "]"));
    if (i > 0 && schedule.locations[i - 1] >= loc)
      throw config_error("locations must be strictly increasing");
    if (!(schedule.rates[i] > 0.0 && schedule.rates[i] <= 1.0))
      throw config_error(msg("rate ", schedule.rates[i], " outside (0, 1]"));
    if (std::find(allocator.noised_layers.begin(), allocator.noised_layers.end(), loc - 1) ==
        allocator.noised_layers.end())
      throw config_error(msg("location ", loc, " needs block ", loc - 1, " in noised_layers"));
  }
  if (schedule.s < 0) throw config_error("negative schedule s");
  for (const std::string& m : sweep.methods)
    if (kMethods.count(m) == 0)
      throw config_error(msg("unknown method '", m,
                             "'; expected dense, tnt, tnt_no_sim, tnt_seq, tnt_merge, random, "
                             "or cls_topk"));
  for (int64_t c : sweep.keep_counts)
    if (c < 1 || c > model.patch_tokens())
      throw config_error(msg("keep count ", c, " outside [1, ", model.patch_tokens(), "]"));
  if (sweep.eval_batch < 1) throw config_error("eval_batch must be at least 1");
  if (seeds.empty()) throw config_error("at least one seed required");
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw config_error(msg("config is not valid JSON: ", e.what()));
  }
  if (!root.is_object()) throw config_error("config must be a JSON object");
  check_keys(root, "config",
             {"model", "data", "split", "backbone", "allocator", "schedule", "sweep", "seeds",
              "out"});

  ExperimentConfig cfg;
  if (const json* m = find(root, "model")) {
    check_keys(*m, "model",
               {"image_size", "patch_size", "channels", "dim", "depth", "heads", "mlp_dim",
                "classes", "special_tokens"});
    cfg.model.image_size = get_int(*m, "model", "image_size", cfg.model.image_size);
    cfg.model.patch_size = get_int(*m, "model", "patch_size", cfg.model.patch_size);
    cfg.model.channels = get_int(*m, "model", "channels", cfg.model.channels);
    cfg.model.dim = get_int(*m, "model", "dim", cfg.model.dim);
    cfg.model.depth = get_int(*m, "model", "depth", cfg.model.depth);
    cfg.model.heads = get_int(*m, "model", "heads", cfg.model.heads);
    cfg.model.mlp_dim = get_int(*m, "model", "mlp_dim", cfg.model.mlp_dim);
    cfg.model.classes = get_int(*m, "model", "classes", cfg.model.classes);
    cfg.model.special_tokens = get_int(*m, "model", "special_tokens", cfg.model.special_tokens);
  }
  cfg.data.image_size = cfg.model.image_size;
  cfg.data.patch_size = cfg.model.patch_size;
  cfg.data.channels = cfg.model.channels;
  cfg.data.classes = cfg.model.classes;
  std::string informative = "center:16";
  if (const json* d = find(root, "data")) {
    check_keys(*d, "data", {"samples_per_class", "signal", "background_noise", "informative"});
    cfg.data.samples_per_class =
        get_int(*d, "data", "samples_per_class", cfg.data.samples_per_class);
    cfg.data.signal = get_double(*d, "data", "signal", cfg.data.signal);
    cfg.data.background_noise =
        get_double(*d, "data", "background_noise", cfg.data.background_noise);
    if (const json* inf = find(*d, "informative")) {
      if (inf->is_array()) {
        cfg.data.informative_patches = get_int_list(*d, "data", "informative", {});
        informative.clear();
      } else if (inf->is_string()) {
        informative = inf->get<std::string>();
      } else {
        throw config_error("data.informative must be an id array or \"center:<count>\"");
      }
    }
  }
  if (!informative.empty()) {
    constexpr std::string_view kCenter = "center:";
    if (informative.rfind(kCenter, 0) != 0)
      throw config_error(msg("data.informative string must look like center:16, got '",
                             informative, "'"));
    int64_t count = 0;
    std::string_view num(informative.data() + kCenter.size(),
                         informative.size() - kCenter.size());
    auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), count);
    if (ec != std::errc() || ptr != num.data() + num.size())
      throw config_error(msg("bad center count in '", informative, "'"));
    cfg.data.informative_patches =
        center_patch_block(cfg.model.image_size, cfg.model.patch_size, count);
  }

  if (const json* s = find(root, "split")) {
    check_keys(*s, "split", {"train_fraction"});
    cfg.train_fraction = get_double(*s, "split", "train_fraction", cfg.train_fraction);
  }
  if (const json* b = find(root, "backbone")) {
    check_keys(*b, "backbone", {"epochs", "batch_size", "lr", "momentum"});
    cfg.backbone.epochs = get_int(*b, "backbone", "epochs", cfg.backbone.epochs);
    cfg.backbone.batch_size = get_int(*b, "backbone", "batch_size", cfg.backbone.batch_size);
    cfg.backbone.lr = get_double(*b, "backbone", "lr", cfg.backbone.lr);
    cfg.backbone.momentum = get_double(*b, "backbone", "momentum", cfg.backbone.momentum);
  }
  cfg.allocator.train.epochs = 40;
  if (const json* a = find(root, "allocator")) {
    check_keys(*a, "allocator",
               {"head", "hidden", "noised_layers", "beta", "epochs", "batch_size", "lr",
                "momentum"});
    const std::string head = get_string(*a, "allocator", "head", "linear");
    if (head == "linear")
      cfg.allocator.kind = HeadKind::linear;
    else if (head == "mlp")
      cfg.allocator.kind = HeadKind::mlp;
    else
      throw config_error(msg("allocator.head must be linear or mlp, got '", head, "'"));
    cfg.allocator.hidden = get_int(*a, "allocator", "hidden", cfg.allocator.hidden);
    cfg.allocator.noised_layers =
        get_int_list(*a, "allocator", "noised_layers", cfg.allocator.noised_layers);
    cfg.allocator.beta = get_double(*a, "allocator", "beta", cfg.allocator.beta);
    cfg.allocator.train.epochs = get_int(*a, "allocator", "epochs", cfg.allocator.train.epochs);
    cfg.allocator.train.batch_size =
        get_int(*a, "allocator", "batch_size", cfg.allocator.train.batch_size);
    cfg.allocator.train.lr = get_double(*a, "allocator", "lr", cfg.allocator.train.lr);
    cfg.allocator.train.momentum =
        get_double(*a, "allocator", "momentum", cfg.allocator.train.momentum);
  }
  if (const json* s = find(root, "schedule")) {
    check_keys(*s, "schedule",
               {"mode", "locations", "rates", "s", "partition", "action",
                "pre_block_similarity"});
    const std::string mode = get_string(*s, "schedule", "mode", "single_layer");
    if (mode == "single_layer")
      cfg.schedule.mode = PruneMode::single_layer;
    else if (mode == "multi_layer")
      cfg.schedule.mode = PruneMode::multi_layer;
    else
      throw config_error(msg("schedule.mode must be single_layer or multi_layer, got '", mode,
                             "'"));
    cfg.schedule.locations = get_int_list(*s, "schedule", "locations", {2});
    cfg.schedule.rates = get_double_list(*s, "schedule", "rates", {0.5});
    cfg.schedule.s = get_int(*s, "schedule", "s", 0);
    const std::string part = get_string(*s, "schedule", "partition", "random");
    if (part == "random")
      cfg.schedule.similarity.partition = PartitionKind::random;
    else if (part == "sequential")
      cfg.schedule.similarity.partition = PartitionKind::sequential;
    else
      throw config_error(msg("schedule.partition must be random or sequential, got '", part,
                             "'"));
    const std::string act = get_string(*s, "schedule", "action", "drop");
    if (act == "drop")
      cfg.schedule.similarity.action = SimilarityAction::drop;
    else if (act == "merge")
      cfg.schedule.similarity.action = SimilarityAction::merge;
    else
      throw config_error(msg("schedule.action must be drop or merge, got '", act, "'"));
    cfg.schedule.pre_block_similarity =
        get_bool(*s, "schedule", "pre_block_similarity", false);
  } else {
    cfg.schedule.locations = {2};
    cfg.schedule.rates = {0.5};
  }
  if (const json* s = find(root, "sweep")) {
    check_keys(*s, "sweep",
               {"methods", "keep_counts", "keep_rates", "throughput", "eval_batch",
                "write_history"});
    if (const json* m = find(*s, "methods")) {
      if (!m->is_array()) throw config_error("sweep.methods must be an array");
      for (const json& e : *m) {
        if (!e.is_string()) throw config_error("sweep.methods must hold strings");
        cfg.sweep.methods.push_back(e.get<std::string>());
      }
    }
    cfg.sweep.keep_counts = get_int_list(*s, "sweep", "keep_counts", {});
    // Convenience rates convert by floor, the same convention the schedule
    // itself uses.
    for (double k : get_double_list(*s, "sweep", "keep_rates", {})) {
      if (!(k > 0.0 && k <= 1.0))
        throw config_error(msg("sweep keep rate ", k, " outside (0, 1]"));
      cfg.sweep.keep_counts.push_back(static_cast<int64_t>(
          std::floor(static_cast<double>(cfg.model.patch_tokens()) * k)));
    }
    std::sort(cfg.sweep.keep_counts.begin(), cfg.sweep.keep_counts.end(), std::greater<>());
    cfg.sweep.keep_counts.erase(
        std::unique(cfg.sweep.keep_counts.begin(), cfg.sweep.keep_counts.end()),
        cfg.sweep.keep_counts.end());
    cfg.sweep.throughput = get_bool(*s, "sweep", "throughput", false);
    cfg.sweep.eval_batch = get_int(*s, "sweep", "eval_batch", cfg.sweep.eval_batch);
    cfg.sweep.write_history = get_bool(*s, "sweep", "write_history", true);
  }
  if (cfg.sweep.methods.empty()) cfg.sweep.methods = {"tnt"};
  if (const json* s = find(root, "seeds")) {
    if (!s->is_array()) throw config_error("seeds must be an array");
    cfg.seeds.clear();
    for (const json& e : *s) {
      if (!e.is_number_integer() || e.get<int64_t>() < 0)
        throw config_error("seeds must be non-negative integers");
      cfg.seeds.push_back(e.get<uint64_t>());
    }
  }
  cfg.out_dir = get_string(root, "config", "out", cfg.out_dir);

  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error(msg(path, ": cannot open config"));
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment_config(text);
}

std::vector<int64_t> profile_of(const PruneSchedule& schedule, const ModelConfig& mc) {
  const int64_t sp = mc.special_tokens;
  int64_t live = mc.patch_tokens();
  if (schedule.mode == PruneMode::multi_layer && schedule.pre_block_similarity)
    live -= schedule.s;
  std::vector<int64_t> profile;
  for (int64_t blk = 0; blk < mc.depth; ++blk) {
    profile.push_back(sp + live);
    auto it = std::find(schedule.locations.begin(), schedule.locations.end(), blk + 1);
    if (it == schedule.locations.end()) continue;
    const double rate = schedule.rates[static_cast<size_t>(it - schedule.locations.begin())];
    if (schedule.mode == PruneMode::single_layer)
      live = static_cast<int64_t>(std::floor(static_cast<double>(mc.patch_tokens()) * rate));
    else
      live = static_cast<int64_t>(std::floor(static_cast<double>(live) * rate));
    if (live < 1) throw schedule_error(msg("rate ", rate, " keeps no tokens"));
  }
  return profile;
}

std::string backbone_path(const std::string& out_dir, uint64_t seed) {
  return (fs::path(out_dir) / msg("backbone_s", seed, ".tntc")).string();
}

std::string allocator_path(const std::string& out_dir, uint64_t seed) {
  return (fs::path(out_dir) / msg("allocator_s", seed, ".tntc")).string();
}

std::vector<std::string> cmd_train_backbone(const ExperimentConfig& cfg,
                                            const std::string& config_text) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  std::vector<std::string> files;
  for (uint64_t seed : cfg.seeds) {
    Dataset ds = generate_synthetic(cfg.data, seed);
    Split split = stratified_split(ds.labels, cfg.train_fraction);
    RngStream init = seed_stream(seed, 1);
    ModelParams params = ModelParams::init(cfg.model, init);
    params.set_requires_grad(true);  // train_backbone only steps flagged tensors
    RngStream shuffle = seed_stream(seed, 2);
    std::vector<EpochStats> stats =
        train_backbone(params, cfg.model, ds, split.train, cfg.backbone, shuffle);
    const std::string ckpt = backbone_path(cfg.out_dir, seed);
    save_backbone(ckpt, params, cfg.model);
    const std::string log =
        (fs::path(cfg.out_dir) / msg("backbone_s", seed, "_log.csv")).string();
    write_file(log, stats_csv(stats));
    files.push_back(ckpt);
    files.push_back(log);
  }
  files.push_back(write_manifest(cfg, "train_backbone", config_text, files));
  return files;
}

std::vector<std::string> cmd_train_allocator(const ExperimentConfig& cfg,
                                             const std::string& config_text) {
  cfg.validate();
  if (cfg.allocator.noised_layers.empty())
    throw config_error("allocator.noised_layers is empty");
  fs::create_directories(cfg.out_dir);
  std::vector<std::string> files;
  for (uint64_t seed : cfg.seeds) {
    LoadedBackbone lb = load_backbone(backbone_path(cfg.out_dir, seed));
    if (!same_model(lb.config, cfg.model))
      throw config_error(msg(backbone_path(cfg.out_dir, seed),
                             ": checkpoint was trained with a different model config"));
    Dataset ds = generate_synthetic(cfg.data, seed);
    Split split = stratified_split(ds.labels, cfg.train_fraction);
    NoiseConfig nc;
    nc.beta = cfg.allocator.beta;
    nc.noised_layers = cfg.allocator.noised_layers;
    nc.rng = seed_stream(seed, 0);
    RngStream init = seed_stream(seed, 3);
    AllocatorParams ap =
        AllocatorParams::init(cfg.model, nc, cfg.allocator.kind, cfg.allocator.hidden, init);
    RngStream train_rng = seed_stream(seed, 4);
    std::vector<EpochStats> stats = train_allocator(lb.params, cfg.model, ap, nc, ds,
                                                    split.train, cfg.allocator.train, train_rng);
    const std::string ckpt = allocator_path(cfg.out_dir, seed);
    save_allocator(ckpt, ap, cfg.allocator.beta);
    const std::string log =
        (fs::path(cfg.out_dir) / msg("allocator_s", seed, "_log.csv")).string();
    write_file(log, stats_csv(stats));
    files.push_back(ckpt);
    files.push_back(log);
  }
  files.push_back(write_manifest(cfg, "train_allocator", config_text, files));
  return files;
}

namespace {

// One sweep work item: evaluate one method at one keep point under one seed.
SweepRow eval_shard(const ExperimentConfig& cfg, const SeedContext& ctx,
                    const std::string& method, int64_t keep) {
  const ModelConfig& mc = cfg.model;
  const int64_t n = mc.patch_tokens();
  const int64_t loc = cfg.schedule.locations[0];
  SweepRow row;
  row.method = method;
  row.seed = ctx.seed;
  row.keep_config = method == "dense" ? "dense" : msg(keep);
  row.sort_tokens = method == "dense" ? n : keep;

  if (method == "cls_topk" && mc.special_tokens == 0) {
    row.note = "unsupported";
    return row;
  }

  PruneSchedule sched = cfg.schedule;
  const bool is_tnt = method == "tnt" || method == "tnt_no_sim" || method == "tnt_seq" ||
                      method == "tnt_merge";
  if (is_tnt) {
    sched.rates = {rate_for_count(keep, n)};
    sched.s = method == "tnt_no_sim" ? 0 : std::min(cfg.schedule.s, n - keep);
    if (method == "tnt_seq") sched.similarity.partition = PartitionKind::sequential;
    if (method == "tnt_merge") sched.similarity.action = SimilarityAction::merge;
    sched.similarity.seed = seed_stream(ctx.seed, 6);
  }
  RngStream baseline_rng = seed_stream(ctx.seed, 5);

  const std::vector<int64_t>& eval_idx = ctx.split.eval;
  int64_t correct = 0;
  std::vector<int64_t> profile;
  std::string history;
  for (size_t start = 0; start < eval_idx.size(); start += static_cast<size_t>(cfg.sweep.eval_batch)) {
    const size_t stop = std::min(eval_idx.size(), start + static_cast<size_t>(cfg.sweep.eval_batch));
    std::span<const int64_t> chunk(eval_idx.data() + start, stop - start);
    Tensor images = take_first_axis(ctx.ds.images, chunk);
    Tensor logits;
    if (method == "dense") {
      logits = forward(ctx.backbone, mc, images);
      if (profile.empty())
        profile.assign(static_cast<size_t>(mc.depth), mc.seq_len());
    } else if (is_tnt) {
      ScheduleResult res = apply_schedule(ctx.backbone, mc, ctx.alloc, images, sched, chunk);
      logits = res.logits;
      if (profile.empty()) profile = res.tokens_per_layer;
      if (cfg.sweep.write_history && method == "tnt") history += history_to_text(res.history);
    } else {
      const BaselineKind kind =
          method == "random" ? BaselineKind::random_drop : BaselineKind::cls_topk;
      BaselineResult res = apply_baseline(ctx.backbone, mc, kind, images, loc, keep,
                                          baseline_rng, chunk);
      logits = res.logits;
      if (profile.empty()) profile = res.tokens_per_layer;
    }
    for (size_t i = 0; i < chunk.size(); ++i) {
      std::span<const double> r =
          logits.data().subspan(i * static_cast<size_t>(mc.classes),
                                static_cast<size_t>(mc.classes));
      if (argmax_row(r) == ctx.ds.labels[static_cast<size_t>(chunk[i])]) ++correct;
    }
  }

  row.final_tokens = method == "dense" ? n : keep;
  row.top1 = static_cast<double>(correct) / static_cast<double>(eval_idx.size());
  std::vector<int64_t> alloc_layers;
  if (is_tnt)
    for (int64_t l : sched.locations) alloc_layers.push_back(l - 1);
  row.gflops = flops_estimate(mc, profile, alloc_layers).total_gflops();
  if (cfg.sweep.write_history && method == "tnt") {
    row.history_name = msg("history_tnt_s", ctx.seed, "_n", keep, ".txt");
    row.history_text = std::move(history);
  }
  return row;
}

}  // namespace

std::vector<std::string> cmd_sweep(const ExperimentConfig& cfg, const std::string& config_text) {
  cfg.validate();
  if (cfg.schedule.mode != PruneMode::single_layer)
    throw config_error("sweep varies single_layer schedules; run multi_layer via flops");
  if (cfg.sweep.methods.empty()) throw config_error("sweep.methods is empty");
  const bool only_dense =
      std::all_of(cfg.sweep.methods.begin(), cfg.sweep.methods.end(),
                  [](const std::string& m) { return m == "dense"; });
  if (cfg.sweep.keep_counts.empty() && !only_dense)
    throw config_error("sweep.keep_counts is empty");
  const bool any_tnt = std::any_of(cfg.sweep.methods.begin(), cfg.sweep.methods.end(),
                                   [](const std::string& m) { return m.rfind("tnt", 0) == 0; });
  fs::create_directories(cfg.out_dir);

  std::vector<SeedContext> contexts;
  for (uint64_t seed : cfg.seeds) {
    SeedContext ctx;
    ctx.seed = seed;
    LoadedBackbone lb = load_backbone(backbone_path(cfg.out_dir, seed));
    if (!same_model(lb.config, cfg.model))
      throw config_error(msg(backbone_path(cfg.out_dir, seed),
                             ": checkpoint was trained with a different model config"));
    ctx.backbone = std::move(lb.params);
    if (any_tnt) {
      LoadedAllocator la = load_allocator(allocator_path(cfg.out_dir, seed));
      ctx.alloc = std::move(la.params);
      ctx.has_alloc = true;
    }
    ctx.ds = generate_synthetic(cfg.data, seed);
    ctx.split = stratified_split(ctx.ds.labels, cfg.train_fraction);
    contexts.push_back(std::move(ctx));
  }

  struct Shard {
    size_t method;
    int64_t keep;
    size_t ctx;
  };
  std::vector<Shard> shards;
  for (size_t m = 0; m < cfg.sweep.methods.size(); ++m) {
    const bool dense = cfg.sweep.methods[m] == "dense";
    const std::vector<int64_t> points =
        dense ? std::vector<int64_t>{cfg.model.patch_tokens()} : cfg.sweep.keep_counts;
    for (int64_t keep : points)
      for (size_t c = 0; c < contexts.size(); ++c) shards.push_back({m, keep, c});
  }

  std::vector<SweepRow> rows(shards.size());
  parallel_for(static_cast<int64_t>(shards.size()), [&](int64_t i) {
    const Shard& s = shards[static_cast<size_t>(i)];
    rows[static_cast<size_t>(i)] =
        eval_shard(cfg, contexts[s.ctx], cfg.sweep.methods[s.method], s.keep);
  });

  // Timing runs own the machine, so they happen after the parallel phase,
  // one at a time, and only for the methods the comparison needs.
  if (cfg.sweep.throughput) {
    for (size_t i = 0; i < shards.size(); ++i) {
      SweepRow& row = rows[i];
      if (row.method != "dense" && row.method != "tnt") continue;
      if (!row.note.empty()) continue;
      const SeedContext& ctx = contexts[shards[i].ctx];
      const int64_t batch =
          std::min<int64_t>(cfg.sweep.eval_batch, static_cast<int64_t>(ctx.split.eval.size()));
      std::span<const int64_t> chunk(ctx.split.eval.data(), static_cast<size_t>(batch));
      Tensor images = take_first_axis(ctx.ds.images, chunk);
      if (row.method == "dense") {
        row.imgs_per_sec = throughput_measure(ctx.backbone, cfg.model, nullptr, nullptr, images,
                                              batch, 1, 5)
                               .images_per_second;
      } else {
        PruneSchedule sched = cfg.schedule;
        sched.rates = {rate_for_count(shards[i].keep, cfg.model.patch_tokens())};
        sched.s = std::min(cfg.schedule.s, cfg.model.patch_tokens() - shards[i].keep);
        sched.similarity.seed = seed_stream(ctx.seed, 6);
        row.imgs_per_sec = throughput_measure(ctx.backbone, cfg.model, &ctx.alloc, &sched,
                                              images, batch, 1, 5)
                               .images_per_second;
      }
    }
  }

  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.method != b.method) return a.method < b.method;
    if (a.sort_tokens != b.sort_tokens) return a.sort_tokens > b.sort_tokens;
    return a.seed < b.seed;
  });

  std::vector<std::string> files;
  std::string csv = "method,seed,keep_config,final_tokens,top1,gflops,imgs_per_sec,note\n";
  for (const SweepRow& row : rows) {
    csv += msg(row.method, ",", row.seed, ",", row.keep_config, ",");
    if (row.final_tokens >= 0) csv += msg(row.final_tokens);
    csv += ",";
    if (row.top1 >= 0) csv += msg(row.top1);
    csv += ",";
    if (row.gflops >= 0) csv += msg(row.gflops);
    csv += ",";
    if (row.imgs_per_sec >= 0) csv += msg(row.imgs_per_sec);
    csv += msg(",", row.note, "\n");
    if (!row.history_name.empty()) {
      const std::string hp = (fs::path(cfg.out_dir) / row.history_name).string();
      write_file(hp, row.history_text);
      files.push_back(hp);
    }
  }
  const std::string csv_path = (fs::path(cfg.out_dir) / "sweep.csv").string();
  write_file(csv_path, csv);
  files.insert(files.begin(), csv_path);
  files.push_back(write_manifest(cfg, "sweep", config_text, files));
  return files;
}

std::vector<std::string> cmd_flops(const ExperimentConfig& cfg, const std::string& config_text) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  std::vector<int64_t> profile = profile_of(cfg.schedule, cfg.model);
  std::vector<int64_t> alloc_layers;
  for (int64_t l : cfg.schedule.locations) alloc_layers.push_back(l - 1);
  FlopsReport report = flops_estimate(cfg.model, profile, alloc_layers);
  const std::string path = (fs::path(cfg.out_dir) / "flops.csv").string();
  write_file(path, flops_csv(report));
  std::vector<std::string> files = {path};
  files.push_back(write_manifest(cfg, "flops", config_text, files));
  return files;
}

std::vector<std::string> cmd_flops_preset(const std::string& preset, const std::string& out_dir) {
  ModelConfig mc = preset_config(preset);
  fs::create_directories(out_dir);
  FlopsReport report = flops_estimate(mc, preset_profile(mc));
  const std::string path = (fs::path(out_dir) / "flops.csv").string();
  write_file(path, flops_csv(report));
  ExperimentConfig stub;
  stub.out_dir = out_dir;
  std::vector<std::string> files = {path};
  files.push_back(write_manifest(stub, "flops", preset, files));
  return files;
}

std::vector<std::string> cmd_render_map(const ExperimentConfig& cfg,
                                        const std::string& history_path,
                                        std::span<const int64_t> samples,
                                        const std::string& config_text) {
  cfg.validate();
  if (samples.empty()) throw usage_error("no samples requested");
  fs::create_directories(cfg.out_dir);
  Dataset ds = generate_synthetic(cfg.data, cfg.seeds[0]);
  std::vector<KeepEvent> events = history_from_text(read_file(history_path));

  std::vector<std::string> files;
  for (int64_t sample : samples) {
    bool found = false;
    for (const KeepEvent& e : events) {
      if (e.sample != sample) continue;
      found = true;
      const std::string base = msg("map_s", sample, "_l", e.layer);
      const std::string pgm = (fs::path(cfg.out_dir) / (base + ".pgm")).string();
      const std::string svg = (fs::path(cfg.out_dir) / (base + ".svg")).string();
      write_file(pgm, render_pgm(ds, sample, e.kept));
      write_file(svg, render_svg(ds, sample, e));
      files.push_back(pgm);
      files.push_back(svg);
    }
    if (!found)
      throw format_error(msg(history_path, ": no history events for sample ", sample));
  }
  files.push_back(write_manifest(cfg, "render_map", config_text, files));
  return files;
}

}  // namespace tnt
