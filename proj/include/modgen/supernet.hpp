#pragma once

// Gated modular backbones. A CONV supernet is a small residual CNN whose
// basic blocks gate the output filters of their first convolution; a
// TRANSFORMER supernet is a small ViT whose FFNs gate their hidden units.
// The same network classes, built with reduced widths and no gates, run
// extracted subnets.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modgen/keyvalue.hpp"
#include "modgen/tensor_io.hpp"

namespace modgen {

enum class Backbone { Conv, Transformer };
enum class Activation { Gelu, Relu };

std::string to_string(Backbone b);
std::string to_string(Activation a);
Backbone parse_backbone(std::string_view text);
Activation parse_activation(std::string_view text);

struct ConvBlockSpec {
  int channels = 0;
  int stride = 1;
  bool operator==(const ConvBlockSpec&) const = default;
};

struct SupernetSpec {
  Backbone backbone = Backbone::Conv;
  int input_channels = 1;
  int input_height = 56;
  int input_width = 56;
  int classes = 2;
  int head_hidden = 64;

  // CONV
  int stem_channels = 16;
  int stem_stride = 2;
  std::vector<ConvBlockSpec> blocks = {{32, 2}, {32, 1}, {64, 2}, {64, 1}};

  // TRANSFORMER
  int patch_size = 8;
  int d_model = 64;
  int d_ff = 256;
  int depth = 4;
  int heads = 4;
  Activation ffn_activation = Activation::Gelu;

  static SupernetSpec conv_default() { return {}; }
  static SupernetSpec transformer_default();

  /// Throws SpecError naming the first invalid field.
  void validate() const;

  /// Single-line form, e.g. "backbone=conv;input=1x56x56;classes=2;head=64;stem=16/2;blocks=32/2,32/1".
  std::string to_string() const;
  static SupernetSpec parse(std::string_view text);

  bool operator==(const SupernetSpec&) const = default;
};

struct GatedLayer {
  std::string id;
  int width = 0;
  bool operator==(const GatedLayer&) const = default;
};

/// Ordered list of gated layers and their module counts.
class GateLayout {
 public:
  GateLayout() = default;
  explicit GateLayout(std::vector<GatedLayer> layers);

  std::size_t size() const { return layers_.size(); }
  const GatedLayer& operator[](std::size_t i) const { return layers_[i]; }
  const std::vector<GatedLayer>& layers() const { return layers_; }
  std::size_t total_modules() const;
  std::vector<int> widths() const;

  /// Hex fingerprint of ids and widths.
  std::string fingerprint() const;

  std::string to_string() const;
  static GateLayout parse(std::string_view text);

  bool operator==(const GateLayout&) const = default;

 private:
  std::vector<GatedLayer> layers_;
};

/// Gated layers of a spec: one per basic block (its first conv) for CONV, one
/// per FFN for TRANSFORMER. The stem, block-final convs, shortcuts,
/// attention, and head are never gated.
GateLayout gate_layout(const SupernetSpec& spec);

/// Per-layer binary activation vectors.
class GateConfiguration {
 public:
  GateConfiguration() = default;
  explicit GateConfiguration(const GateLayout& layout, bool value = false);
  explicit GateConfiguration(std::vector<std::vector<std::uint8_t>> bits);

  std::size_t layer_count() const { return bits_.size(); }
  std::span<const std::uint8_t> layer(std::size_t l) const { return bits_[l]; }
  bool get(std::size_t l, std::size_t i) const { return bits_[l][i] != 0; }
  void set(std::size_t l, std::size_t i, bool on) { bits_[l][i] = on ? 1 : 0; }

  int active_count(std::size_t l) const;
  std::vector<int> active_counts() const;
  std::vector<std::int64_t> active_indices(std::size_t l) const;
  std::size_t total_active() const;
  std::size_t total_modules() const;
  double activation_ratio() const;
  bool has_dead_layer() const;
  std::vector<std::uint8_t> flattened() const;

  bool matches(const GateLayout& layout) const;
  /// Throws ShapeError unless the widths agree with the layout.
  void check(const GateLayout& layout) const;

  /// Float tensors of shape [D_l], one per layer.
  std::vector<torch::Tensor> to_tensors() const;

  /// One "layer_id bitstring" line per layer.
  std::string to_text(const GateLayout& layout) const;
  static GateConfiguration parse(std::string_view text, const GateLayout& layout);
  void save(const std::filesystem::path& path, const GateLayout& layout) const;
  static GateConfiguration load(const std::filesystem::path& path, const GateLayout& layout);

  bool operator==(const GateConfiguration&) const = default;

 private:
  std::vector<std::vector<std::uint8_t>> bits_;
};

/// conv -> channel-sliced BN -> ReLU, with output channel i multiplied by gate[i].
/// `gate` is [C] (shared) or [B, C] (per sample).
torch::Tensor gated_conv_forward(const torch::Tensor& input, torch::nn::Conv2d& conv, torch::nn::BatchNorm2d& bn,
                                 const torch::Tensor& gate);

/// h = x W1 + b1, h' = h * gate, out = act(h') W2 + b2. `gate` is [D] or [B, D].
torch::Tensor gated_ffn_forward(const torch::Tensor& x, torch::nn::Linear& fc1, torch::nn::Linear& fc2,
                                const torch::Tensor& gate, Activation activation);

class GatedBasicBlockImpl : public torch::nn::Module {
 public:
  GatedBasicBlockImpl(int in_channels, int mid_channels, int out_channels, int stride);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& gate = {});

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, shortcut_conv{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, shortcut_bn{nullptr};
};
TORCH_MODULE(GatedBasicBlock);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int d_model, int heads, int hidden, Activation activation);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& gate = {});

  torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
  int heads;
  Activation activation;
};
TORCH_MODULE(TransformerBlock);

/// A backbone built with explicit per-gated-layer widths. With full widths it
/// is the supernet; with active counts it is an extracted subnet.
class NetworkImpl : public torch::nn::Module {
 public:
  NetworkImpl(SupernetSpec spec, std::vector<int> widths);

  /// `gates` empty runs ungated; otherwise one tensor per gated layer.
  torch::Tensor forward(const torch::Tensor& x, std::span<const torch::Tensor> gates = {});

  const SupernetSpec& spec() const { return spec_; }
  const std::vector<int>& widths() const { return widths_; }
  GateLayout layout() const;

 private:
  SupernetSpec spec_;
  std::vector<int> widths_;
  torch::nn::Conv2d stem_conv{nullptr}, patch_embed{nullptr};
  torch::nn::BatchNorm2d stem_bn{nullptr};
  torch::Tensor pos_embed;
  torch::nn::LayerNorm final_ln{nullptr};
  std::vector<GatedBasicBlock> conv_blocks;
  std::vector<TransformerBlock> transformer_blocks;
  torch::nn::Linear head_fc1{nullptr}, head_fc2{nullptr};
};
TORCH_MODULE(Network);

/// Full-width network with deterministic initialization.
Network build_supernet(const SupernetSpec& spec, std::uint64_t seed);

/// Binary-gated forward; throws ShapeError on layout mismatch.
torch::Tensor supernet_forward(Network& supernet, const torch::Tensor& input, const GateConfiguration& gates);

/// Real-valued gated forward, differentiable in both parameters and gates.
torch::Tensor supernet_forward(Network& supernet, const torch::Tensor& input, std::span<const torch::Tensor> gates);

struct SubnetArtifact {
  SupernetSpec spec;
  GateLayout layout;  // of the source supernet
  std::vector<std::vector<std::int64_t>> retained;
  NamedTensors parameters;
  KeyValues provenance;

  std::vector<int> widths() const;
  GateConfiguration gates() const;
};

inline constexpr int kSubnetFormatVersion = 1;

/// Removes inactive filters / hidden units; throws ExtractionError on a
/// fully inactive layer.
SubnetArtifact extract_subnet(Network& supernet, const GateConfiguration& gates);

/// Static network running the artifact; takes no gate input.
Network instantiate_subnet(const SubnetArtifact& artifact);

void save_subnet(const SubnetArtifact& artifact, const std::filesystem::path& dir);
SubnetArtifact load_subnet(const std::filesystem::path& dir);

struct ResourceCounts {
  std::uint64_t parameter_bytes = 0;
  std::uint64_t peak_activation_bytes = 0;
  std::uint64_t multiply_accumulates = 0;
};

/// Analytic counts at batch 1 for the subnet with the given per-layer widths.
ResourceCounts count_resources(const SupernetSpec& spec, std::span<const int> widths);
ResourceCounts count_resources(const SupernetSpec& spec, const GateConfiguration& gates);

}  // namespace modgen
