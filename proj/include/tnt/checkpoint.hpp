#pragma once

#include <string>
#include <vector>

#include "tnt/common.hpp"
#include "tnt/tensor.hpp"

namespace tnt {

// Single binary container format shared by checkpoints and datasets:
//   "TNTC" magic, u32 version, then tensors until EOF, each
//   (u32 name length, UTF-8 name bytes, u32 rank, u64 dims, f64 payload),
// everything little-endian. Round-trips are bit-exact; readers fail with the
// byte offset of the first malformed field.
inline constexpr uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

void save_container(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_container(const std::string& path);

// Lookup helper; format_error when the name is missing.
const NamedTensor& find_tensor(const std::vector<NamedTensor>& ts, const std::string& name);

}  // namespace tnt
