#include "metaseld/params.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace metaseld::nn {

// Checkpoint layout (little-endian): magic "MSPS", version u32, entry count
// u32, then per entry: name length u32, name bytes, rank u32, dims u32[rank],
// float32 payload.

namespace {
constexpr char kMagic[4] = {'M', 'S', 'P', 'S'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) fail_data("truncated checkpoint: " + path);
  return v;
}
}  // namespace

void save_checkpoint(const ParamSet<float>& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail_data("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, static_cast<uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    write_pod(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    const auto& t = e.var.value();
    write_pod(os, static_cast<uint32_t>(t.rank()));
    for (size_t d = 0; d < t.rank(); ++d) write_pod(os, static_cast<uint32_t>(t.dim(d)));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(sizeof(float) * t.numel()));
  }
  if (!os) fail_data("write failed for checkpoint: " + path);
}

ParamSet<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail_data("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    fail_data("not a checkpoint file (bad magic): " + path);
  uint32_t version = read_pod<uint32_t>(is, path);
  if (version != kVersion) fail_data("unsupported checkpoint version in " + path);
  uint32_t count = read_pod<uint32_t>(is, path);
  ParamSet<float> out;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) fail_data("truncated checkpoint: " + path);
    uint32_t rank = read_pod<uint32_t>(is, path);
    std::vector<int64_t> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = read_pod<uint32_t>(is, path);
    Tensor<float> t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(sizeof(float) * t.numel())))
      fail_data("truncated checkpoint: " + path);
    out.add(name, std::move(t));
  }
  return out;
}

}  // namespace metaseld::nn
