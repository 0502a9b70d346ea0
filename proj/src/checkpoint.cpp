#include "pmtl/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace pmtl {

namespace {

constexpr char kMagic[5] = {'P', 'M', 'T', 'L', '1'};

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <class T>
T get(std::istream& is) {
  char buf[sizeof(T)];
  is.read(buf, sizeof(T));
  if (!is) throw Error("checkpoint: truncated file");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<CheckpointEntry>& entries) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error("checkpoint: cannot write " + tmp);
    os.write(kMagic, sizeof(kMagic));
    put<uint64_t>(os, entries.size());
    for (const auto& e : entries) {
      put<uint32_t>(os, static_cast<uint32_t>(e.name.size()));
      os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      put<uint32_t>(os, static_cast<uint32_t>(e.shape.size()));
      for (int ext : e.shape) put<uint64_t>(os, static_cast<uint64_t>(ext));
      for (double v : e.values) put<double>(os, v);
    }
    if (!os) throw Error("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw Error("checkpoint: cannot rename " + tmp + " to " + path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kMagic, 5) != 0)
    throw Error("checkpoint: bad magic in " + path);
  uint64_t count = get<uint64_t>(is);
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    uint32_t name_len = get<uint32_t>(is);
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    if (!is) throw Error("checkpoint: truncated name in " + path);
    uint32_t rank = get<uint32_t>(is);
    int64_t n = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      auto ext = static_cast<int>(get<uint64_t>(is));
      e.shape.push_back(ext);
      n *= ext;
    }
    e.values.resize(static_cast<size_t>(n));
    for (auto& v : e.values) v = get<double>(is);
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace pmtl
