#include "modgen/assembler.hpp"

#include <cmath>
#include <stdexcept>

#include "modgen/error.hpp"
#include "modgen/text.hpp"

namespace modgen {

void GenerationRequest::validate() const {
  if (!(activation_limit > 0.0 && activation_limit <= 1.0)) {
    throw std::out_of_range("activation limit must be in (0, 1], got " + format_double(activation_limit));
  }
  if (task.index() < 0 || task.index() >= kTaskCount) throw std::out_of_range("task outside the task space");
}

std::vector<float> encode_requirement(const GenerationRequest& request, int limit_dim) {
  request.validate();
  const auto task = encode_task(request.task);
  std::vector<float> out(task.begin(), task.end());
  const auto limit = encode_limit(request.activation_limit, limit_dim);
  out.insert(out.end(), limit.begin(), limit.end());
  return out;
}

torch::Tensor encode_requirements(std::span<const GenerationRequest> requests, int limit_dim) {
  const auto width = static_cast<std::int64_t>(kTaskEncodingSize + limit_dim);
  auto out = torch::empty({static_cast<std::int64_t>(requests.size()), width}, torch::kFloat32);
  float* p = out.data_ptr<float>();
  for (const auto& r : requests) {
    const auto row = encode_requirement(r, limit_dim);
    std::copy(row.begin(), row.end(), p);
    p += width;
  }
  return out;
}

void AssemblerSpec::validate() const {
  if (limit_dim <= 0 || limit_dim % 2 != 0) throw SpecError("assembler field 'limit_dim' must be positive and even");
  if (selection_dim <= 0) throw SpecError("assembler field 'selection_dim' must be positive");
  if (experts <= 0) throw SpecError("assembler field 'experts' must be positive");
  if (!mixture && experts != 1) throw SpecError("assembler field 'experts' must be 1 without a mixture");
}

LayerGaterImpl::LayerGaterImpl(int selection_dim, int width, int experts, bool routed) {
  fcs = register_module("fcs", torch::nn::ModuleList());
  bns = register_module("bns", torch::nn::ModuleList());
  for (int k = 0; k < experts; ++k) {
    fcs->push_back(torch::nn::Linear(selection_dim, width));
    bns->push_back(torch::nn::BatchNorm1d(width));
  }
  if (routed) route = register_module("route", torch::nn::Linear(selection_dim, experts));
}

torch::Tensor LayerGaterImpl::forward(const torch::Tensor& selection) {
  auto expert = [&](std::size_t k) {
    return bns[k]->as<torch::nn::BatchNorm1d>()->forward(fcs[k]->as<torch::nn::Linear>()->forward(selection));
  };
  if (!route) return expert(0);
  const auto weights = torch::softmax(route(selection), -1);
  torch::Tensor out;
  for (std::size_t k = 0; k < fcs->size(); ++k) {
    auto term = weights.select(1, static_cast<std::int64_t>(k)).unsqueeze(1) * expert(k);
    out = out.defined() ? out + term : term;
  }
  return out;
}

AssemblerImpl::AssemblerImpl(AssemblerSpec spec, GateLayout layout) : spec_(spec), layout_(std::move(layout)) {
  spec_.validate();
  selection_fc = register_module("selection_fc", torch::nn::Linear(spec_.requirement_dim(), spec_.selection_dim));
  selection_bn = register_module("selection_bn", torch::nn::BatchNorm1d(spec_.selection_dim));
  torch::nn::ModuleList list;
  for (const auto& layer : layout_.layers()) {
    gaters.emplace_back(spec_.selection_dim, layer.width, spec_.experts, spec_.mixture);
    list->push_back(gaters.back());
  }
  register_module("gaters", list);
}

torch::Tensor AssemblerImpl::select_encode(const torch::Tensor& requirement) {
  if (requirement.dim() != 2 || requirement.size(1) != spec_.requirement_dim()) {
    throw ShapeError("requirement encoding must be [N, " + std::to_string(spec_.requirement_dim()) + "]");
  }
  return torch::relu(selection_bn(selection_fc(requirement)));
}

std::vector<torch::Tensor> AssemblerImpl::gate_logits(const torch::Tensor& selection) {
  if (selection.dim() != 2 || selection.size(1) != spec_.selection_dim) {
    throw ShapeError("selection encoding must be [N, " + std::to_string(spec_.selection_dim) + "]");
  }
  std::vector<torch::Tensor> out;
  for (auto& g : gaters) out.push_back(g->forward(selection));
  return out;
}

std::vector<torch::Tensor> AssemblerImpl::forward(const torch::Tensor& requirement) {
  return gate_logits(select_encode(requirement));
}

Assembler build_assembler(const AssemblerSpec& spec, const GateLayout& layout, std::uint64_t seed) {
  torch::manual_seed(seed);
  return Assembler(spec, layout);
}

torch::Tensor semhash(const torch::Tensor& weight, SemHashMode mode) {
  auto hard = [&] { return (weight > 0).to(weight.scalar_type()); };
  auto soft = [&] { return torch::clamp(1.2 * torch::sigmoid(weight) - 0.1, 0.0, 1.0); };
  switch (mode) {
    case SemHashMode::Hard:
      return hard();
    case SemHashMode::Soft:
      return soft();
    case SemHashMode::StraightThrough: {
      auto s = soft();
      return s + (hard() - s).detach();
    }
  }
  throw std::logic_error("unreachable semhash mode");
}

namespace {

// Runs the assembler in inference mode and restores its previous mode.
std::vector<torch::Tensor> eval_logits(Assembler& assembler, const GenerationRequest& request) {
  if (!assembler) throw StateError("assembler is not initialized; load a trained checkpoint first");
  const bool was_training = assembler->is_training();
  assembler->eval();
  torch::NoGradGuard no_grad;
  const GenerationRequest one[] = {request};
  auto logits = assembler->forward(encode_requirements(one, assembler->spec().limit_dim));
  if (was_training) assembler->train();
  return logits;
}

}  // namespace

GateLogits generate_logits(Assembler& assembler, const GenerationRequest& request) {
  GateLogits out;
  for (const auto& t : eval_logits(assembler, request)) {
    auto row = t[0].contiguous();
    out.emplace_back(row.data_ptr<float>(), row.data_ptr<float>() + row.numel());
  }
  return out;
}

GateConfiguration threshold_logits(const GateLogits& logits) {
  std::vector<std::vector<std::uint8_t>> bits;
  for (const auto& layer : logits) {
    auto& b = bits.emplace_back();
    for (float w : layer) b.push_back(w > 0.0f ? 1 : 0);
  }
  return GateConfiguration(std::move(bits));
}

GateConfiguration generate_gates(Assembler& assembler, const GenerationRequest& request) {
  return threshold_logits(generate_logits(assembler, request));
}

double gate_similarity(const GateConfiguration& a, const GateConfiguration& b) {
  if (a.layer_count() != b.layer_count()) throw ShapeError("gate similarity needs configurations of one layout");
  for (std::size_t l = 0; l < a.layer_count(); ++l) {
    if (a.layer(l).size() != b.layer(l).size()) throw ShapeError("gate similarity needs configurations of one layout");
  }
  const auto fa = a.flattened();
  const auto fb = b.flattened();
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    dot += fa[i] * fb[i];
    na += fa[i];
    nb += fb[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace modgen
