#include "modgen/supernet.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <regex>
#include <sstream>

#include "modgen/error.hpp"
#include "modgen/text.hpp"

namespace modgen {

namespace {

int conv_out(int size, int kernel, int stride, int padding) { return (size + 2 * padding - kernel) / stride + 1; }

torch::Tensor broadcast_gate(const torch::Tensor& gate, const torch::Tensor& like, int channel_dim) {
  // [C] -> [1, C, 1, 1, ...]; [B, C] -> [B, C, 1, 1, ...] for channel_dim == 1.
  // For token tensors [B, T, D] (channel_dim == 2): [D] -> [1, 1, D]; [B, D] -> [B, 1, D].
  std::vector<std::int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  if (gate.dim() == 1) {
    shape[static_cast<std::size_t>(channel_dim)] = gate.size(0);
  } else if (gate.dim() == 2) {
    shape[0] = gate.size(0);
    shape[static_cast<std::size_t>(channel_dim)] = gate.size(1);
  } else {
    throw ShapeError("gate tensor must be 1-D or 2-D");
  }
  return gate.view(shape);
}

void check_gate_width(const torch::Tensor& gate, std::int64_t width, std::string_view what) {
  if (!gate.defined()) return;
  const auto got = gate.size(gate.dim() - 1);
  if (got != width) {
    throw ShapeError(std::string(what) + ": gate length " + std::to_string(got) + " does not match " +
                     std::to_string(width) + " modules");
  }
}

}  // namespace

std::string to_string(Backbone b) { return b == Backbone::Conv ? "conv" : "transformer"; }
std::string to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

Backbone parse_backbone(std::string_view text) {
  const std::string t = lowercase(trim(text));
  if (t == "conv") return Backbone::Conv;
  if (t == "transformer") return Backbone::Transformer;
  throw ParseError("unknown backbone '" + t + "'");
}

Activation parse_activation(std::string_view text) {
  const std::string t = lowercase(trim(text));
  if (t == "gelu") return Activation::Gelu;
  if (t == "relu") return Activation::Relu;
  throw ParseError("unknown activation '" + t + "'");
}

SupernetSpec SupernetSpec::transformer_default() {
  SupernetSpec s;
  s.backbone = Backbone::Transformer;
  return s;
}

void SupernetSpec::validate() const {
  auto positive = [](int v, const char* field) {
    if (v <= 0) throw SpecError("supernet spec field '" + std::string(field) + "' must be positive, got " + std::to_string(v));
  };
  positive(input_channels, "input_channels");
  positive(input_height, "input_height");
  positive(input_width, "input_width");
  positive(classes, "classes");
  positive(head_hidden, "head_hidden");
  if (backbone == Backbone::Conv) {
    positive(stem_channels, "stem_channels");
    positive(stem_stride, "stem_stride");
    if (blocks.empty()) throw SpecError("supernet spec field 'blocks' must list at least one block");
    for (const auto& b : blocks) {
      positive(b.channels, "blocks.channels");
      positive(b.stride, "blocks.stride");
    }
  } else {
    positive(patch_size, "patch_size");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(depth, "depth");
    positive(heads, "heads");
    if (input_height % patch_size != 0 || input_width % patch_size != 0) {
      throw SpecError("supernet spec field 'patch_size' must divide the input size");
    }
    if (d_model % heads != 0) throw SpecError("supernet spec field 'heads' must divide d_model");
  }
}

std::string SupernetSpec::to_string() const {
  std::ostringstream out;
  out << "backbone=" << modgen::to_string(backbone) << ";input=" << input_channels << 'x' << input_height << 'x'
      << input_width << ";classes=" << classes << ";head=" << head_hidden;
  if (backbone == Backbone::Conv) {
    out << ";stem=" << stem_channels << '/' << stem_stride << ";blocks=";
    for (std::size_t i = 0; i < blocks.size(); ++i) out << (i ? "," : "") << blocks[i].channels << '/' << blocks[i].stride;
  } else {
    out << ";patch=" << patch_size << ";d_model=" << d_model << ";d_ff=" << d_ff << ";depth=" << depth
        << ";heads=" << heads << ";activation=" << modgen::to_string(ffn_activation);
  }
  return out.str();
}

SupernetSpec SupernetSpec::parse(std::string_view text) {
  SupernetSpec s;
  auto as_int = [](const std::string& v, const std::string& key) { return static_cast<int>(parse_integer(v, "spec." + key)); };
  for (const auto& item : split(text, ';')) {
    if (trim(item).empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ParseError("malformed spec item '" + item + "'");
    const std::string key = trim(item.substr(0, eq));
    const std::string value = trim(item.substr(eq + 1));
    if (key == "backbone") {
      s.backbone = parse_backbone(value);
    } else if (key == "input") {
      const auto dims = split(value, 'x');
      if (dims.size() != 3) throw ParseError("spec input must be CxHxW, got '" + value + "'");
      s.input_channels = as_int(dims[0], key);
      s.input_height = as_int(dims[1], key);
      s.input_width = as_int(dims[2], key);
    } else if (key == "classes") {
      s.classes = as_int(value, key);
    } else if (key == "head") {
      s.head_hidden = as_int(value, key);
    } else if (key == "stem") {
      const auto parts = split(value, '/');
      s.stem_channels = as_int(parts[0], key);
      s.stem_stride = parts.size() > 1 ? as_int(parts[1], key) : 1;
    } else if (key == "blocks") {
      s.blocks.clear();
      for (const auto& b : split(value, ',')) {
        const auto parts = split(b, '/');
        s.blocks.push_back({as_int(parts[0], key), parts.size() > 1 ? as_int(parts[1], key) : 1});
      }
    } else if (key == "patch") {
      s.patch_size = as_int(value, key);
    } else if (key == "d_model") {
      s.d_model = as_int(value, key);
    } else if (key == "d_ff") {
      s.d_ff = as_int(value, key);
    } else if (key == "depth") {
      s.depth = as_int(value, key);
    } else if (key == "heads") {
      s.heads = as_int(value, key);
    } else if (key == "activation") {
      s.ffn_activation = parse_activation(value);
    } else {
      throw ParseError("unknown spec field '" + key + "'");
    }
  }
  s.validate();
  return s;
}

GateLayout::GateLayout(std::vector<GatedLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].width < 0) throw ShapeError("negative width for gated layer " + layers_[i].id);
    for (std::size_t j = 0; j < i; ++j) {
      if (layers_[i].id == layers_[j].id) throw ShapeError("duplicate gated layer id " + layers_[i].id);
    }
  }
}

std::size_t GateLayout::total_modules() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.width);
  return n;
}

std::vector<int> GateLayout::widths() const {
  std::vector<int> out;
  for (const auto& l : layers_) out.push_back(l.width);
  return out;
}

std::string GateLayout::fingerprint() const {
  Fnv1a h;
  h.update(to_string());
  return h.hex();
}

std::string GateLayout::to_string() const {
  std::vector<std::string> parts;
  for (const auto& l : layers_) parts.push_back(l.id + ":" + std::to_string(l.width));
  return join(parts, ",");
}

GateLayout GateLayout::parse(std::string_view text) {
  std::vector<GatedLayer> layers;
  for (const auto& item : split(text, ',')) {
    if (trim(item).empty()) continue;
    const auto colon = item.rfind(':');
    if (colon == std::string::npos) throw ParseError("malformed layout item '" + item + "'");
    layers.push_back({trim(item.substr(0, colon)), static_cast<int>(parse_integer(item.substr(colon + 1), "layout width"))});
  }
  return GateLayout(std::move(layers));
}

GateLayout gate_layout(const SupernetSpec& spec) {
  spec.validate();
  std::vector<GatedLayer> layers;
  if (spec.backbone == Backbone::Conv) {
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
      layers.push_back({"block" + std::to_string(i) + ".conv1", spec.blocks[i].channels});
    }
  } else {
    for (int i = 0; i < spec.depth; ++i) layers.push_back({"block" + std::to_string(i) + ".ffn", spec.d_ff});
  }
  return GateLayout(std::move(layers));
}

GateConfiguration::GateConfiguration(const GateLayout& layout, bool value) {
  for (const auto& l : layout.layers()) bits_.emplace_back(static_cast<std::size_t>(l.width), value ? 1 : 0);
}

GateConfiguration::GateConfiguration(std::vector<std::vector<std::uint8_t>> bits) : bits_(std::move(bits)) {
  for (auto& layer : bits_) {
    for (auto& b : layer) {
      if (b > 1) throw ShapeError("gate entries must be 0 or 1");
    }
  }
}

int GateConfiguration::active_count(std::size_t l) const {
  return static_cast<int>(std::count(bits_[l].begin(), bits_[l].end(), std::uint8_t{1}));
}

std::vector<int> GateConfiguration::active_counts() const {
  std::vector<int> out;
  for (std::size_t l = 0; l < bits_.size(); ++l) out.push_back(active_count(l));
  return out;
}

std::vector<std::int64_t> GateConfiguration::active_indices(std::size_t l) const {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < bits_[l].size(); ++i) {
    if (bits_[l][i]) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

std::size_t GateConfiguration::total_active() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < bits_.size(); ++l) n += static_cast<std::size_t>(active_count(l));
  return n;
}

std::size_t GateConfiguration::total_modules() const {
  std::size_t n = 0;
  for (const auto& l : bits_) n += l.size();
  return n;
}

double GateConfiguration::activation_ratio() const {
  const auto total = total_modules();
  return total == 0 ? 0.0 : static_cast<double>(total_active()) / static_cast<double>(total);
}

bool GateConfiguration::has_dead_layer() const {
  for (std::size_t l = 0; l < bits_.size(); ++l) {
    if (active_count(l) == 0) return true;
  }
  return false;
}

std::vector<std::uint8_t> GateConfiguration::flattened() const {
  std::vector<std::uint8_t> out;
  for (const auto& l : bits_) out.insert(out.end(), l.begin(), l.end());
  return out;
}

bool GateConfiguration::matches(const GateLayout& layout) const {
  if (layout.size() != bits_.size()) return false;
  for (std::size_t l = 0; l < bits_.size(); ++l) {
    if (static_cast<int>(bits_[l].size()) != layout[l].width) return false;
  }
  return true;
}

void GateConfiguration::check(const GateLayout& layout) const {
  if (!matches(layout)) throw ShapeError("gate configuration does not match layout " + layout.to_string());
}

std::vector<torch::Tensor> GateConfiguration::to_tensors() const {
  std::vector<torch::Tensor> out;
  for (const auto& l : bits_) {
    auto t = torch::empty({static_cast<std::int64_t>(l.size())}, torch::kFloat32);
    float* p = t.data_ptr<float>();
    for (std::size_t i = 0; i < l.size(); ++i) p[i] = static_cast<float>(l[i]);
    out.push_back(t);
  }
  return out;
}

std::string GateConfiguration::to_text(const GateLayout& layout) const {
  check(layout);
  std::string out;
  for (std::size_t l = 0; l < bits_.size(); ++l) {
    out += layout[l].id + ' ';
    for (auto b : bits_[l]) out.push_back(b ? '1' : '0');
    out.push_back('\n');
  }
  return out;
}

GateConfiguration GateConfiguration::parse(std::string_view text, const GateLayout& layout) {
  std::vector<std::vector<std::uint8_t>> bits(layout.size());
  std::vector<bool> seen(layout.size(), false);
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::istringstream fields(t);
    std::string id, bitstring;
    fields >> id >> bitstring;
    std::size_t l = 0;
    while (l < layout.size() && layout[l].id != id) ++l;
    if (l == layout.size()) throw ParseError("gate file names unknown layer '" + id + "'");
    if (seen[l]) throw ParseError("gate file repeats layer '" + id + "'");
    if (static_cast<int>(bitstring.size()) != layout[l].width) {
      throw ShapeError("gate bitstring for '" + id + "' has length " + std::to_string(bitstring.size()) + ", expected " +
                       std::to_string(layout[l].width));
    }
    for (char c : bitstring) {
      if (c != '0' && c != '1') throw ParseError("gate bitstring for '" + id + "' contains '" + std::string(1, c) + "'");
      bits[l].push_back(c == '1' ? 1 : 0);
    }
    seen[l] = true;
  }
  for (std::size_t l = 0; l < layout.size(); ++l) {
    if (!seen[l]) throw ParseError("gate file lacks layer '" + layout[l].id + "'");
  }
  return GateConfiguration(std::move(bits));
}

void GateConfiguration::save(const std::filesystem::path& path, const GateLayout& layout) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "# modgen-gates 1\n" << to_text(layout);
}

GateConfiguration GateConfiguration::load(const std::filesystem::path& path, const GateLayout& layout) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), layout);
}

torch::Tensor gated_conv_forward(const torch::Tensor& input, torch::nn::Conv2d& conv, torch::nn::BatchNorm2d& bn,
                                 const torch::Tensor& gate) {
  check_gate_width(gate, conv->options.out_channels(), "gated conv");
  auto out = torch::relu(bn(conv(input)));
  if (gate.defined()) out = out * broadcast_gate(gate, out, 1);
  return out;
}

torch::Tensor gated_ffn_forward(const torch::Tensor& x, torch::nn::Linear& fc1, torch::nn::Linear& fc2,
                                const torch::Tensor& gate, Activation activation) {
  check_gate_width(gate, fc1->options.out_features(), "gated ffn");
  auto h = fc1(x);
  if (gate.defined()) h = h * broadcast_gate(gate, h, h.dim() - 1);
  h = activation == Activation::Gelu ? torch::gelu(h) : torch::relu(h);
  return fc2(h);
}

GatedBasicBlockImpl::GatedBasicBlockImpl(int in_channels, int mid_channels, int out_channels, int stride) {
  using torch::nn::Conv2dOptions;
  conv1 = register_module("conv1", torch::nn::Conv2d(Conv2dOptions(in_channels, mid_channels, 3).stride(stride).padding(1).bias(false)));
  bn1 = register_module("bn1", torch::nn::BatchNorm2d(mid_channels));
  conv2 = register_module("conv2", torch::nn::Conv2d(Conv2dOptions(mid_channels, out_channels, 3).padding(1).bias(false)));
  bn2 = register_module("bn2", torch::nn::BatchNorm2d(out_channels));
  if (in_channels != out_channels || stride != 1) {
    shortcut_conv = register_module("shortcut_conv",
                                    torch::nn::Conv2d(Conv2dOptions(in_channels, out_channels, 1).stride(stride).bias(false)));
    shortcut_bn = register_module("shortcut_bn", torch::nn::BatchNorm2d(out_channels));
  }
}

torch::Tensor GatedBasicBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& gate) {
  auto h = gated_conv_forward(x, conv1, bn1, gate);
  h = bn2(conv2(h));
  auto skip = shortcut_conv ? shortcut_bn(shortcut_conv(x)) : x;
  return torch::relu(h + skip);
}

TransformerBlockImpl::TransformerBlockImpl(int d_model, int heads_, int hidden, Activation activation_)
    : heads(heads_), activation(activation_) {
  using torch::nn::LayerNormOptions;
  ln1 = register_module("ln1", torch::nn::LayerNorm(LayerNormOptions({d_model})));
  qkv = register_module("qkv", torch::nn::Linear(d_model, 3 * d_model));
  proj = register_module("proj", torch::nn::Linear(d_model, d_model));
  ln2 = register_module("ln2", torch::nn::LayerNorm(LayerNormOptions({d_model})));
  fc1 = register_module("fc1", torch::nn::Linear(d_model, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, d_model));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& gate) {
  const auto batch = x.size(0);
  const auto tokens = x.size(1);
  const auto d_model = x.size(2);
  const auto head_dim = d_model / heads;
  auto qkv_out = qkv(ln1(x)).view({batch, tokens, 3, heads, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv_out[0];
  auto k = qkv_out[1];
  auto v = qkv_out[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  auto attended = torch::matmul(torch::softmax(scores, -1), v).transpose(1, 2).reshape({batch, tokens, d_model});
  auto h = x + proj(attended);
  return h + gated_ffn_forward(ln2(h), fc1, fc2, gate, activation);
}

NetworkImpl::NetworkImpl(SupernetSpec spec, std::vector<int> widths) : spec_(std::move(spec)), widths_(std::move(widths)) {
  spec_.validate();
  const auto full = gate_layout(spec_);
  if (widths_.size() != full.size()) throw ShapeError("network needs one width per gated layer");
  for (std::size_t i = 0; i < widths_.size(); ++i) {
    if (widths_[i] <= 0 || widths_[i] > full[i].width) {
      throw ShapeError("width " + std::to_string(widths_[i]) + " invalid for gated layer " + full[i].id);
    }
  }
  torch::nn::ModuleList blocks;
  int features = 0;
  if (spec_.backbone == Backbone::Conv) {
    using torch::nn::Conv2dOptions;
    stem_conv = register_module(
        "stem_conv",
        torch::nn::Conv2d(Conv2dOptions(spec_.input_channels, spec_.stem_channels, 3).stride(spec_.stem_stride).padding(1).bias(false)));
    stem_bn = register_module("stem_bn", torch::nn::BatchNorm2d(spec_.stem_channels));
    int in = spec_.stem_channels;
    for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
      conv_blocks.emplace_back(in, widths_[i], spec_.blocks[i].channels, spec_.blocks[i].stride);
      blocks->push_back(conv_blocks.back());
      in = spec_.blocks[i].channels;
    }
    features = in;
  } else {
    const int tokens = (spec_.input_height / spec_.patch_size) * (spec_.input_width / spec_.patch_size);
    patch_embed = register_module(
        "patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(spec_.input_channels, spec_.d_model, spec_.patch_size)
                                             .stride(spec_.patch_size)));
    pos_embed = register_parameter("pos_embed", torch::randn({1, tokens, spec_.d_model}) * 0.02);
    for (int i = 0; i < spec_.depth; ++i) {
      transformer_blocks.emplace_back(spec_.d_model, spec_.heads, widths_[static_cast<std::size_t>(i)], spec_.ffn_activation);
      blocks->push_back(transformer_blocks.back());
    }
    final_ln = register_module("final_ln", torch::nn::LayerNorm(torch::nn::LayerNormOptions({spec_.d_model})));
    features = spec_.d_model;
  }
  register_module("blocks", blocks);
  head_fc1 = register_module("head_fc1", torch::nn::Linear(features, spec_.head_hidden));
  head_fc2 = register_module("head_fc2", torch::nn::Linear(spec_.head_hidden, spec_.classes));
}

GateLayout NetworkImpl::layout() const {
  auto layers = gate_layout(spec_).layers();
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].width = widths_[i];
  return GateLayout(std::move(layers));
}

torch::Tensor NetworkImpl::forward(const torch::Tensor& x, std::span<const torch::Tensor> gates) {
  if (!gates.empty() && gates.size() != widths_.size()) {
    throw ShapeError("expected " + std::to_string(widths_.size()) + " gate tensors, got " + std::to_string(gates.size()));
  }
  auto gate = [&](std::size_t i) { return gates.empty() ? torch::Tensor() : gates[i]; };
  torch::Tensor pooled;
  if (spec_.backbone == Backbone::Conv) {
    auto h = torch::relu(stem_bn(stem_conv(x)));
    for (std::size_t i = 0; i < conv_blocks.size(); ++i) h = conv_blocks[i]->forward(h, gate(i));
    pooled = h.mean({2, 3});
  } else {
    auto h = patch_embed(x).flatten(2).transpose(1, 2) + pos_embed;
    for (std::size_t i = 0; i < transformer_blocks.size(); ++i) h = transformer_blocks[i]->forward(h, gate(i));
    pooled = final_ln(h).mean(1);
  }
  return head_fc2(torch::relu(head_fc1(pooled)));
}

Network build_supernet(const SupernetSpec& spec, std::uint64_t seed) {
  torch::manual_seed(seed);
  return Network(spec, gate_layout(spec).widths());
}

torch::Tensor supernet_forward(Network& supernet, const torch::Tensor& input, const GateConfiguration& gates) {
  gates.check(supernet->layout());
  const auto tensors = gates.to_tensors();
  return supernet->forward(input, tensors);
}

torch::Tensor supernet_forward(Network& supernet, const torch::Tensor& input, std::span<const torch::Tensor> gates) {
  const auto layout = supernet->layout();
  if (gates.size() != layout.size()) throw ShapeError("gate count does not match layout " + layout.to_string());
  for (std::size_t i = 0; i < gates.size(); ++i) check_gate_width(gates[i], layout[i].width, layout[i].id);
  return supernet->forward(input, gates);
}

// ---------------------------------------------------------------- extraction

namespace {

struct SliceRule {
  std::size_t layer = 0;
  std::int64_t dim = 0;
};

// Which tensors lose rows/columns when a gated layer is sliced.
std::optional<SliceRule> slice_rule(const SupernetSpec& spec, const std::string& name) {
  static const std::regex conv_re(R"(^blocks\.(\d+)\.(conv1\.weight|bn1\.\w+|conv2\.weight)$)");
  static const std::regex ffn_re(R"(^blocks\.(\d+)\.(fc1\.weight|fc1\.bias|fc2\.weight)$)");
  std::smatch m;
  if (spec.backbone == Backbone::Conv && std::regex_match(name, m, conv_re)) {
    return SliceRule{std::stoul(m[1]), m[2] == "conv2.weight" ? 1 : 0};
  }
  if (spec.backbone == Backbone::Transformer && std::regex_match(name, m, ffn_re)) {
    return SliceRule{std::stoul(m[1]), m[2] == "fc2.weight" ? 1 : 0};
  }
  return std::nullopt;
}

}  // namespace

std::vector<int> SubnetArtifact::widths() const {
  std::vector<int> out;
  for (const auto& r : retained) out.push_back(static_cast<int>(r.size()));
  return out;
}

GateConfiguration SubnetArtifact::gates() const {
  GateConfiguration g(layout, false);
  for (std::size_t l = 0; l < retained.size(); ++l) {
    for (auto i : retained[l]) g.set(l, static_cast<std::size_t>(i), true);
  }
  return g;
}

SubnetArtifact extract_subnet(Network& supernet, const GateConfiguration& gates) {
  const auto layout = supernet->layout();
  gates.check(layout);
  SubnetArtifact artifact;
  artifact.spec = supernet->spec();
  artifact.layout = layout;
  for (std::size_t l = 0; l < layout.size(); ++l) {
    auto idx = gates.active_indices(l);
    if (idx.empty()) throw ExtractionError("gated layer " + layout[l].id + " has no active module");
    artifact.retained.push_back(std::move(idx));
  }
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> index;
  for (const auto& r : artifact.retained) index.push_back(torch::tensor(r, torch::kLong));
  for (const auto& [name, tensor] : module_state(*supernet)) {
    torch::Tensor t = tensor.detach();
    if (const auto rule = slice_rule(artifact.spec, name)) t = t.index_select(rule->dim, index[rule->layer]);
    artifact.parameters.emplace_back(name, t.contiguous().clone());
  }
  return artifact;
}

Network instantiate_subnet(const SubnetArtifact& artifact) {
  Network net(artifact.spec, artifact.widths());
  load_module_state(*net, artifact.parameters);
  net->eval();
  return net;
}

void save_subnet(const SubnetArtifact& artifact, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "architecture.txt");
    if (!out) throw FormatError("cannot write " + (dir / "architecture.txt").string());
    out << "modgen-subnet " << kSubnetFormatVersion << "\n";
    out << "spec " << artifact.spec.to_string() << "\n";
    out << "layout " << artifact.layout.to_string() << "\n";
    for (std::size_t l = 0; l < artifact.retained.size(); ++l) {
      out << "retain " << artifact.layout[l].id << ' ' << artifact.retained[l].size() << ' ';
      for (std::size_t i = 0; i < artifact.retained[l].size(); ++i) out << (i ? "," : "") << artifact.retained[l][i];
      out << "\n";
    }
  }
  write_tensors(artifact.parameters, dir / "parameters.bin");
  artifact.provenance.save(dir / "provenance.txt");
}

SubnetArtifact load_subnet(const std::filesystem::path& dir) {
  std::ifstream in(dir / "architecture.txt");
  if (!in) throw FormatError("subnet architecture not found in " + dir.string());
  SubnetArtifact artifact;
  std::string line;
  std::getline(in, line);
  if (trim(line) != "modgen-subnet " + std::to_string(kSubnetFormatVersion)) {
    throw FormatError("unsupported subnet format '" + trim(line) + "' in " + dir.string());
  }
  bool have_spec = false;
  bool have_layout = false;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string kind;
    fields >> kind;
    if (kind == "spec") {
      std::string s;
      fields >> s;
      artifact.spec = SupernetSpec::parse(s);
      have_spec = true;
    } else if (kind == "layout") {
      std::string s;
      fields >> s;
      artifact.layout = GateLayout::parse(s);
      have_layout = true;
    } else if (kind == "retain") {
      std::string id, list;
      std::size_t count = 0;
      fields >> id >> count >> list;
      std::vector<std::int64_t> idx;
      for (const auto& v : split(list, ',')) {
        if (!trim(v).empty()) idx.push_back(parse_integer(v, "retained index"));
      }
      if (idx.size() != count) throw FormatError("retained index count mismatch for " + id);
      artifact.retained.push_back(std::move(idx));
    } else if (!trim(line).empty()) {
      throw FormatError("unexpected architecture line '" + line + "'");
    }
  }
  if (!have_spec || !have_layout || artifact.retained.size() != artifact.layout.size()) {
    throw FormatError("incomplete subnet architecture in " + dir.string());
  }
  artifact.parameters = read_tensors(dir / "parameters.bin");
  if (std::filesystem::exists(dir / "provenance.txt")) artifact.provenance = KeyValues::load(dir / "provenance.txt");
  return artifact;
}

// ------------------------------------------------------------------ resources

ResourceCounts count_resources(const SupernetSpec& spec, std::span<const int> widths) {
  spec.validate();
  const auto layout = gate_layout(spec);
  if (widths.size() != layout.size()) throw ShapeError("resource count needs one width per gated layer");
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t peak = 0;
  auto feature = [&peak](std::uint64_t floats) { peak = std::max(peak, floats); };
  auto u = [](long long v) { return static_cast<std::uint64_t>(v); };

  feature(u(spec.input_channels) * u(spec.input_height) * u(spec.input_width));
  std::uint64_t features = 0;
  if (spec.backbone == Backbone::Conv) {
    int h = conv_out(spec.input_height, 3, spec.stem_stride, 1);
    int w = conv_out(spec.input_width, 3, spec.stem_stride, 1);
    int in = spec.stem_channels;
    params += u(in) * u(spec.input_channels) * 9 + 4 * u(in);
    macs += u(h) * u(w) * u(in) * u(spec.input_channels) * 9;
    feature(u(in) * u(h) * u(w));
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
      const auto mid = u(widths[i]);
      const auto out = u(spec.blocks[i].channels);
      const int stride = spec.blocks[i].stride;
      h = conv_out(h, 3, stride, 1);
      w = conv_out(w, 3, stride, 1);
      const auto hw = u(h) * u(w);
      params += mid * u(in) * 9 + 4 * mid + out * mid * 9 + 4 * out;
      macs += hw * mid * u(in) * 9 + hw * out * mid * 9;
      if (u(in) != out || stride != 1) {
        params += out * u(in) + 4 * out;
        macs += hw * out * u(in);
      }
      feature(mid * hw);
      feature(out * hw);
      in = spec.blocks[i].channels;
    }
    features = u(in);
  } else {
    const auto d = u(spec.d_model);
    const auto tokens = u(spec.input_height / spec.patch_size) * u(spec.input_width / spec.patch_size);
    const auto patch = u(spec.input_channels) * u(spec.patch_size) * u(spec.patch_size);
    params += d * patch + d + tokens * d;
    macs += tokens * d * patch;
    feature(tokens * d);
    for (int i = 0; i < spec.depth; ++i) {
      const auto hidden = u(widths[static_cast<std::size_t>(i)]);
      params += 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (hidden * d + hidden) + (d * hidden + d);
      macs += tokens * 3 * d * d + 2 * tokens * tokens * d + tokens * d * d + 2 * tokens * hidden * d;
      feature(3 * tokens * d);
      feature(u(spec.heads) * tokens * tokens);
      feature(tokens * hidden);
    }
    params += 2 * d;
    features = d;
  }
  const auto hidden = u(spec.head_hidden);
  const auto classes = u(spec.classes);
  params += hidden * features + hidden + classes * hidden + classes;
  macs += hidden * features + classes * hidden;
  feature(features);
  feature(hidden);
  return {params * sizeof(float), peak * sizeof(float), macs};
}

ResourceCounts count_resources(const SupernetSpec& spec, const GateConfiguration& gates) {
  gates.check(gate_layout(spec));
  const auto counts = gates.active_counts();
  return count_resources(spec, counts);
}

}  // namespace modgen
