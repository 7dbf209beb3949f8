#pragma once

// Parameter blob format: magic "MGPB", u32 version, u32 record count, then per
// record u32 name length, name bytes, u32 rank, u32 dims[rank], and the
// float32 payload. All integers and floats are little-endian.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace modgen {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

inline constexpr std::uint32_t kBlobVersion = 1;

void write_tensors(const NamedTensors& tensors, const std::filesystem::path& path);
NamedTensors read_tensors(const std::filesystem::path& path);

/// Sum of float32 payload bytes over every record in a blob file.
std::uint64_t blob_payload_bytes(const std::filesystem::path& path);

/// Parameters followed by buffers, excluding BatchNorm step counters.
NamedTensors module_state(const torch::nn::Module& module);

/// Copies `state` into the module; names and shapes must match exactly.
void load_module_state(torch::nn::Module& module, const NamedTensors& state);

const torch::Tensor& find_tensor(const NamedTensors& tensors, const std::string& name);

}  // namespace modgen
