#include "tnt/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "container I/O writes raw little-endian words");

namespace tnt {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'T', 'C'};

void put_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

struct Reader {
  std::ifstream in;
  uint64_t offset = 0;
  std::string path;

  void read_exact(void* dst, size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
      throw format_error(msg(path, ": truncated ", what, " at byte ", offset));
    offset += n;
  }
  uint32_t u32(const char* what) {
    uint32_t v;
    read_exact(&v, 4, what);
    return v;
  }
  uint64_t u64(const char* what) {
    uint64_t v;
    read_exact(&v, 8, what);
    return v;
  }
  bool at_eof() {
    in.peek();
    return in.eof();
  }
};

}  // namespace

void save_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw format_error(msg(path, ": cannot open for writing"));
  os.write(kMagic, 4);
  put_u32(os, kContainerVersion);
  for (const NamedTensor& t : tensors) {
    if (shape_numel(t.shape) != static_cast<int64_t>(t.data.size()))
      throw shape_error(msg("save_container: tensor ", t.name, " has ", t.data.size(),
                            " values for shape ", shape_str(t.shape)));
    put_u32(os, static_cast<uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) put_u64(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!os) throw format_error(msg(path, ": write failed"));
}

std::vector<NamedTensor> load_container(const std::string& path) {
  Reader r;
  r.path = path;
  r.in.open(path, std::ios::binary);
  if (!r.in) throw format_error(msg(path, ": cannot open"));
  char magic[4];
  r.read_exact(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw format_error(msg(path, ": bad magic at byte 0"));
  uint32_t version = r.u32("version");
  if (version != kContainerVersion)
    throw format_error(msg(path, ": unsupported version ", version, " at byte 4"));

  std::vector<NamedTensor> out;
  while (!r.at_eof()) {
    NamedTensor t;
    uint32_t name_len = r.u32("name length");
    if (name_len > (1u << 16))
      throw format_error(msg(path, ": implausible name length ", name_len, " at byte ",
                             r.offset - 4));
    t.name.resize(name_len);
    r.read_exact(t.name.data(), name_len, "name");
    uint32_t rank = r.u32("rank");
    if (rank > 8)
      throw format_error(msg(path, ": implausible rank ", rank, " at byte ", r.offset - 4));
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint64_t d = r.u64("dim");
      if (d > (1ull << 32))
        throw format_error(msg(path, ": implausible dim ", d, " at byte ", r.offset - 8));
      t.shape.push_back(static_cast<int64_t>(d));
      n *= static_cast<int64_t>(d);
    }
    t.data.resize(static_cast<size_t>(n));
    r.read_exact(t.data.data(), static_cast<size_t>(n) * sizeof(double), "payload");
    out.push_back(std::move(t));
  }
  return out;
}

const NamedTensor& find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
  for (const NamedTensor& t : ts)
    if (t.name == name) return t;
  throw format_error(msg("container: missing tensor '", name, "'"));
}

}  // namespace tnt
