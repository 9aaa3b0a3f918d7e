#include "tnt/data.hpp"

#include <algorithm>
#include <cmath>

#include "tnt/checkpoint.hpp"
#include "tnt/rng.hpp"

namespace tnt {

void DatasetSpec::validate() const {
  if (image_size < 1 || patch_size < 1 || channels < 1)
    throw config_error(msg("dataset: bad geometry ", image_size, "/", patch_size, "/", channels));
  if (image_size % patch_size != 0)
    throw config_error(
        msg("dataset: image_size ", image_size, " not divisible by patch_size ", patch_size));
  if (classes < 2) throw config_error(msg("dataset: need >= 2 classes, got ", classes));
  if (samples_per_class < 1)
    throw config_error(msg("dataset: samples_per_class ", samples_per_class));
  if (signal < 0.0 || background_noise < 0.0)
    throw config_error(msg("dataset: negative signal ", signal, " or noise ", background_noise));
  if (informative_patches.empty())
    throw config_error("dataset: informative_patches must not be empty");
  int64_t n = patch_tokens();
  int64_t prev = -1;
  for (int64_t p : informative_patches) {
    if (p < 0 || p >= n)
      throw config_error(msg("dataset: informative patch ", p, " outside [0,", n, ")"));
    if (p <= prev) throw config_error("dataset: informative_patches must be ascending unique");
    prev = p;
  }
}

std::vector<int64_t> center_patch_block(int64_t image_size, int64_t patch_size, int64_t count) {
  int64_t pps = image_size / patch_size;
  int64_t side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(count))));
  if (side * side != count || side > pps)
    throw config_error(msg("center_patch_block: ", count, " is not a square block fitting a ",
                           pps, "x", pps, " grid"));
  int64_t start = (pps - side) / 2;
  std::vector<int64_t> ids;
  for (int64_t r = 0; r < side; ++r)
    for (int64_t c = 0; c < side; ++c) ids.push_back((start + r) * pps + start + c);
  return ids;
}

Dataset generate_synthetic(const DatasetSpec& spec, uint64_t seed) {
  spec.validate();
  const int64_t pps = spec.patches_per_side();
  const int64_t ps = spec.patch_size;
  const int64_t hw = spec.image_size;
  const int64_t m = spec.classes * spec.samples_per_class;
  const int64_t pix = spec.channels * hw * hw;

  RngStream base(seed, 0);

  // One template per class, patch-shaped, fixed for the whole dataset.
  RngStream tparent = base.derive(1);
  std::vector<std::vector<double>> templates;
  for (int64_t c = 0; c < spec.classes; ++c) {
    RngStream tr = tparent.derive(static_cast<uint64_t>(c));
    std::vector<double> t(static_cast<size_t>(spec.channels * ps * ps));
    for (double& v : t) v = tr.normal();
    templates.push_back(std::move(t));
  }

  Dataset ds;
  ds.spec = spec;
  ds.mask = spec.informative_patches;
  ds.images = Tensor::zeros({m, spec.channels, hw, hw});
  auto img = ds.images.data();
  RngStream sparent = base.derive(2);
  for (int64_t i = 0; i < m; ++i) {
    int64_t label = i % spec.classes;
    ds.labels.push_back(label);
    RngStream sr = sparent.derive(static_cast<uint64_t>(i));
    double* px = img.data() + i * pix;
    for (int64_t j = 0; j < pix; ++j) px[j] = spec.background_noise * sr.normal();
    const std::vector<double>& tmpl = templates[static_cast<size_t>(label)];
    for (int64_t p : spec.informative_patches) {
      int64_t pr = (p / pps) * ps;
      int64_t pc = (p % pps) * ps;
      for (int64_t c = 0; c < spec.channels; ++c)
        for (int64_t r = 0; r < ps; ++r)
          for (int64_t q = 0; q < ps; ++q)
            px[(c * hw + pr + r) * hw + pc + q] +=
                spec.signal * tmpl[static_cast<size_t>((c * ps + r) * ps + q)];
    }
  }
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::vector<NamedTensor> ts;
  ts.push_back({"images", ds.images.shape(),
                {ds.images.data().begin(), ds.images.data().end()}});
  std::vector<double> labels(ds.labels.begin(), ds.labels.end());
  ts.push_back({"labels", {static_cast<int64_t>(labels.size())}, std::move(labels)});
  std::vector<double> mask(ds.mask.begin(), ds.mask.end());
  ts.push_back({"mask", {static_cast<int64_t>(mask.size())}, std::move(mask)});
  ts.push_back({"spec",
                {7},
                {static_cast<double>(ds.spec.image_size), static_cast<double>(ds.spec.patch_size),
                 static_cast<double>(ds.spec.channels), static_cast<double>(ds.spec.classes),
                 static_cast<double>(ds.spec.samples_per_class), ds.spec.signal,
                 ds.spec.background_noise}});
  save_container(path, ts);
}

namespace {

int64_t as_index(double v, const char* what) {
  double r = std::nearbyint(v);
  if (r != v) throw format_error(msg("dataset: non-integral ", what, " value ", v));
  return static_cast<int64_t>(r);
}

}  // namespace

Dataset load_dataset(const std::string& path) {
  auto ts = load_container(path);
  Dataset ds;
  const NamedTensor& spec = find_tensor(ts, "spec");
  if (spec.data.size() != 7)
    throw format_error(msg(path, ": spec tensor has ", spec.data.size(), " entries, want 7"));
  ds.spec.image_size = as_index(spec.data[0], "image_size");
  ds.spec.patch_size = as_index(spec.data[1], "patch_size");
  ds.spec.channels = as_index(spec.data[2], "channels");
  ds.spec.classes = as_index(spec.data[3], "classes");
  ds.spec.samples_per_class = as_index(spec.data[4], "samples_per_class");
  ds.spec.signal = spec.data[5];
  ds.spec.background_noise = spec.data[6];

  const NamedTensor& mask = find_tensor(ts, "mask");
  for (double v : mask.data) ds.mask.push_back(as_index(v, "mask"));
  ds.spec.informative_patches = ds.mask;

  const NamedTensor& labels = find_tensor(ts, "labels");
  for (double v : labels.data) {
    int64_t l = as_index(v, "label");
    if (l < 0 || l >= ds.spec.classes)
      throw format_error(msg(path, ": label ", l, " outside [0,", ds.spec.classes, ")"));
    ds.labels.push_back(l);
  }

  const NamedTensor& images = find_tensor(ts, "images");
  Shape want{static_cast<int64_t>(ds.labels.size()), ds.spec.channels, ds.spec.image_size,
             ds.spec.image_size};
  if (images.shape != want)
    throw format_error(msg(path, ": images shaped ", shape_str(images.shape), ", want ",
                           shape_str(want)));
  ds.images = Tensor::from(images.shape, images.data);

  try {
    ds.spec.validate();
  } catch (const config_error& e) {
    throw format_error(msg(path, ": inconsistent spec: ", e.what()));
  }
  return ds;
}

Split stratified_split(const std::vector<int64_t>& labels, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw config_error(msg("split: train_fraction ", train_fraction, " outside (0,1)"));
  int64_t classes = 0;
  for (int64_t l : labels) classes = std::max(classes, l + 1);
  std::vector<int64_t> total(static_cast<size_t>(classes), 0);
  for (int64_t l : labels) ++total[static_cast<size_t>(l)];
  std::vector<int64_t> quota(static_cast<size_t>(classes));
  for (int64_t c = 0; c < classes; ++c)
    quota[static_cast<size_t>(c)] = static_cast<int64_t>(
        std::ceil(train_fraction * static_cast<double>(total[static_cast<size_t>(c)])));
  Split sp;
  std::vector<int64_t> seen(static_cast<size_t>(classes), 0);
  for (size_t i = 0; i < labels.size(); ++i) {
    int64_t c = labels[i];
    if (seen[static_cast<size_t>(c)]++ < quota[static_cast<size_t>(c)])
      sp.train.push_back(static_cast<int64_t>(i));
    else
      sp.eval.push_back(static_cast<int64_t>(i));
  }
  return sp;
}

}  // namespace tnt
