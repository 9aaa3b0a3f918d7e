#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tnt/common.hpp"
#include "tnt/tensor.hpp"

namespace tnt {

// Planted-relevance classification images: i.i.d. Gaussian background
// everywhere, plus a per-class template (drawn once from the seed) added into
// a fixed set of "informative" patches. Ground truth for which patches matter
// is therefore exact, which is what the allocator-quality metrics score
// against.
struct DatasetSpec {
  int64_t image_size = 32;
  int64_t patch_size = 4;
  int64_t channels = 1;
  int64_t classes = 2;
  int64_t samples_per_class = 2000;
  std::vector<int64_t> informative_patches;  // patch ids, ascending
  double signal = 1.0;
  double background_noise = 0.5;

  int64_t patches_per_side() const { return image_size / patch_size; }
  int64_t patch_tokens() const { return patches_per_side() * patches_per_side(); }
  void validate() const;  // config_error
};

// Centered square block of `count` patch ids; count must be a perfect square
// that fits the grid. The default 16-patch mask on a 32/4 grid.
std::vector<int64_t> center_patch_block(int64_t image_size, int64_t patch_size, int64_t count);

struct Dataset {
  Tensor images;                // [M, C, H, W]
  std::vector<int64_t> labels;  // size M, interleaved 0,1,...,classes-1,0,1,...
  std::vector<int64_t> mask;    // informative patch ids
  DatasetSpec spec;
  int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

Dataset generate_synthetic(const DatasetSpec& spec, uint64_t seed);

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);  // format_error on malformed input

// Deterministic stratified split: per class, the first ceil(fraction * n)
// samples in generation order go to train, the rest to eval.
struct Split {
  std::vector<int64_t> train, eval;
};
Split stratified_split(const std::vector<int64_t>& labels, double train_fraction);

}  // namespace tnt
