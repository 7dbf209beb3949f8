#pragma once

// Requirement-aware assembler: (task, activation limit) -> per-layer gate
// logits -> binary gates.

#include <torch/torch.h>

#include <vector>

#include "modgen/supernet.hpp"
#include "modgen/taskspace.hpp"

namespace modgen {

struct GenerationRequest {
  TaskDescriptor task;
  double activation_limit = 0.1;

  /// Throws std::out_of_range unless 0 < limit <= 1.
  void validate() const;
};

/// Task one-hot bits followed by the limit encoding.
std::vector<float> encode_requirement(const GenerationRequest& request, int limit_dim = kDefaultLimitEncodingSize);

/// Batch of requirement encodings, shape [N, 17 + limit_dim].
torch::Tensor encode_requirements(std::span<const GenerationRequest> requests, int limit_dim = kDefaultLimitEncodingSize);

struct AssemblerSpec {
  int limit_dim = kDefaultLimitEncodingSize;
  int selection_dim = 128;
  bool mixture = true;  // false: one gater per layer and no router
  int experts = 4;

  void validate() const;
  int requirement_dim() const { return kTaskEncodingSize + limit_dim; }
  bool operator==(const AssemblerSpec&) const = default;
};

/// Per-layer logits, same shape as the gate layout.
using GateLogits = std::vector<std::vector<float>>;

class LayerGaterImpl : public torch::nn::Module {
 public:
  LayerGaterImpl(int selection_dim, int width, int experts, bool routed);
  torch::Tensor forward(const torch::Tensor& selection);

  torch::nn::ModuleList fcs{nullptr}, bns{nullptr};
  torch::nn::Linear route{nullptr};
};
TORCH_MODULE(LayerGater);

class AssemblerImpl : public torch::nn::Module {
 public:
  AssemblerImpl(AssemblerSpec spec, GateLayout layout);

  /// ReLU(BN(FC(enc_req))), shape [N, selection_dim].
  torch::Tensor select_encode(const torch::Tensor& requirement);
  /// One [N, D_l] logit tensor per gated layer.
  std::vector<torch::Tensor> gate_logits(const torch::Tensor& selection);
  std::vector<torch::Tensor> forward(const torch::Tensor& requirement);

  const AssemblerSpec& spec() const { return spec_; }
  const GateLayout& layout() const { return layout_; }

  torch::nn::Linear selection_fc{nullptr};
  torch::nn::BatchNorm1d selection_bn{nullptr};
  std::vector<LayerGater> gaters;

 private:
  AssemblerSpec spec_;
  GateLayout layout_;
};
TORCH_MODULE(Assembler);

Assembler build_assembler(const AssemblerSpec& spec, const GateLayout& layout, std::uint64_t seed);

enum class SemHashMode { Hard, Soft, StraightThrough };

/// Hard: 1(w > 0). Soft: clamp(1.2 sigmoid(w) - 0.1, 0, 1). StraightThrough:
/// hard values forward, soft gradient backward.
torch::Tensor semhash(const torch::Tensor& weight, SemHashMode mode);

/// Logits for one request with running BN statistics.
GateLogits generate_logits(Assembler& assembler, const GenerationRequest& request);

/// Entrywise 1(w > 0), the same as sigmoid(w) > 0.5.
GateConfiguration threshold_logits(const GateLogits& logits);

/// Deterministic binary gates for a request; throws StateError on an empty assembler.
GateConfiguration generate_gates(Assembler& assembler, const GenerationRequest& request);

/// Cosine similarity of the flattened binary vectors, 0 when either is all-zero.
double gate_similarity(const GateConfiguration& a, const GateConfiguration& b);

}  // namespace modgen
