#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rfga/tensor.hpp"

namespace rfga {

// Checkpoint container: magic "RFGA1", then a u32 record count, then per
// record (u32 name length, name bytes, u32 rank, u32 dims[rank], raw
// little-endian doubles). Record order is preserved.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> records;

    void add(const std::string& name, const Tensor& t) { records.emplace_back(name, t); }
    const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rfga
