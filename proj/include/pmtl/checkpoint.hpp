// Flat binary parameter checkpoint: "PMTL1" magic, little-endian, then a
// record count followed by (name length, name, rank, extents, raw f64 values)
// per parameter. Round-trips bit-exactly.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pmtl/tensor.hpp"

namespace pmtl {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

void save_checkpoint(const std::string& path,
                     const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

}  // namespace pmtl
