#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "prol/tensor.hpp"

namespace prol {

// Named-tensor container shared by backbone checkpoints and learner snapshots.
//
// Layout (all integers little-endian):
//   magic "PROLCKPT" (8 bytes)
//   version u32
//   per tensor: name length u32, UTF-8 name, dtype u8 (0 = f32, 1 = f64),
//               rank u8, dims u64 each, row-major payload
//   trailing CRC32 (u32) over the concatenated raw payload bytes
//
// Model state is written as f64 (dtype 1) so a save/load round trip is
// bit-exact; f32 (dtype 0) tensors are read and written transparently.
struct NamedTensors {
    std::map<std::string, Tensor> items;  // sorted names -> stable file bytes

    bool has(const std::string& name) const { return items.count(name) > 0; }
    const Tensor& at(const std::string& name) const;
    void put(const std::string& name, Tensor t) { items[name] = std::move(t); }
};

inline constexpr std::uint32_t kContainerVersion = 1;

void save_container(const std::filesystem::path& path, const NamedTensors& tensors,
                    std::uint32_t version = kContainerVersion);

// Throws io_error on bad magic, truncation, or CRC mismatch.
NamedTensors load_container(const std::filesystem::path& path, std::uint32_t* version_out = nullptr);

// Set of names a container must carry to round-trip f32 data unchanged.
void save_container_f32(const std::filesystem::path& path, const NamedTensors& tensors);

}  // namespace prol
