#include "modgen/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "modgen/error.hpp"

namespace modgen {

namespace {

constexpr char kMagic[4] = {'M', 'G', 'P', 'B'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

void put_u32(std::ostream& out, std::uint32_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t get_u32(std::istream& in, const std::filesystem::path& path) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw FormatError("truncated parameter blob " + path.string());
  return to_little(v);
}

bool skip_state(const std::string& name) {
  return name.size() >= 19 && name.compare(name.size() - 19, 19, "num_batches_tracked") == 0;
}

}  // namespace

void write_tensors(const NamedTensors& tensors, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kBlobVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const torch::Tensor t = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    put_u32(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put_u32(out, static_cast<std::uint32_t>(d));
    const float* data = t.data_ptr<float>();
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    } else {
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        const float v = to_little(data[i]);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
    }
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

NamedTensors read_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a parameter blob: " + path.string());
  const auto version = get_u32(in, path);
  if (version != kBlobVersion) {
    throw FormatError("parameter blob version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kBlobVersion) + "): " + path.string());
  }
  const auto count = get_u32(in, path);
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get_u32(in, path);
    if (name_len > 4096) throw FormatError("corrupt tensor name in " + path.string());
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = get_u32(in, path);
    if (rank > 8) throw FormatError("corrupt tensor rank in " + path.string());
    std::vector<std::int64_t> dims(rank);
    std::int64_t numel = 1;
    for (auto& d : dims) {
      d = get_u32(in, path);
      numel *= d;
    }
    if (numel > (std::int64_t{1} << 31)) throw FormatError("corrupt tensor size in " + path.string());
    torch::Tensor t = torch::empty(dims, torch::kFloat32);
    in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(numel * sizeof(float)));
    if (!in) throw FormatError("truncated parameter blob " + path.string());
    if constexpr (std::endian::native == std::endian::big) {
      float* p = t.data_ptr<float>();
      for (std::int64_t k = 0; k < numel; ++k) p[k] = to_little(p[k]);
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in " + path.string());
  return out;
}

std::uint64_t blob_payload_bytes(const std::filesystem::path& path) {
  std::uint64_t total = 0;
  for (const auto& [name, t] : read_tensors(path)) total += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
  return total;
}

NamedTensors module_state(const torch::nn::Module& module) {
  NamedTensors out;
  for (const auto& item : module.named_parameters(true)) out.emplace_back(item.key(), item.value());
  for (const auto& item : module.named_buffers(true)) {
    if (!skip_state(item.key())) out.emplace_back(item.key(), item.value());
  }
  return out;
}

void load_module_state(torch::nn::Module& module, const NamedTensors& state) {
  std::map<std::string, const torch::Tensor*> by_name;
  for (const auto& [name, t] : state) by_name[name] = &t;
  torch::NoGradGuard no_grad;
  std::size_t used = 0;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("missing tensor '" + name + "'");
    if (it->second->sizes() != target.sizes()) {
      throw ShapeError("tensor '" + name + "' has shape " + c10::str(it->second->sizes()) + ", expected " +
                       c10::str(target.sizes()));
    }
    target.copy_(*it->second);
    ++used;
  };
  for (auto& item : module.named_parameters(true)) assign(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) {
    if (!skip_state(item.key())) assign(item.key(), item.value());
  }
  if (used != state.size()) throw FormatError("unexpected extra tensors in parameter state");
}

const torch::Tensor& find_tensor(const NamedTensors& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("missing tensor '" + name + "'");
}

}  // namespace modgen
