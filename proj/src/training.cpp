#include "modgen/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "modgen/error.hpp"
#include "modgen/rng.hpp"
#include "modgen/tensor_io.hpp"
#include "modgen/text.hpp"

namespace modgen {

std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::RmsProp: return "rmsprop";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::Sgd: return "sgd";
  }
  return "?";
}

std::string to_string(Schedule s) { return s == Schedule::Cosine ? "cosine" : "constant"; }

namespace {

OptimizerKind parse_optimizer(std::string_view text) {
  const auto t = lowercase(trim(text));
  if (t == "rmsprop") return OptimizerKind::RmsProp;
  if (t == "adam") return OptimizerKind::Adam;
  if (t == "sgd") return OptimizerKind::Sgd;
  throw ParseError("unknown optimizer '" + t + "'");
}

Schedule parse_schedule(std::string_view text) {
  const auto t = lowercase(trim(text));
  if (t == "cosine") return Schedule::Cosine;
  if (t == "constant") return Schedule::Constant;
  throw ParseError("unknown schedule '" + t + "'");
}

std::string join_numbers(std::span<const double> values) {
  std::vector<std::string> parts;
  for (double v : values) parts.push_back(format_double(v));
  return join(parts, ",");
}

std::vector<double> parse_numbers(std::string_view text, std::string_view what) {
  std::vector<double> out;
  for (const auto& p : split(text, ',')) {
    if (!trim(p).empty()) out.push_back(parse_number(p, what));
  }
  return out;
}

}  // namespace

void TrainingConfig::validate() const {
  if (epochs < 0) throw SpecError("training field 'epochs' must be non-negative");
  if (batch_size <= 0) throw SpecError("training field 'batch_size' must be positive");
  if (batches_per_step <= 0) throw SpecError("training field 'batches_per_step' must be positive");
  if (!(learning_rate > 0)) throw SpecError("training field 'learning_rate' must be positive");
  if (!(gate_loss_weight > 0)) throw SpecError("training field 'gate_loss_weight' must be positive");
  if (limits.empty()) throw SpecError("training field 'limits' must not be empty");
  for (double l : limits) {
    if (!(l > 0 && l <= 1)) throw SpecError("training field 'limits' holds " + format_double(l) + " outside (0, 1]");
  }
  if (!(hold_out >= 0 && hold_out < 1)) throw SpecError("training field 'hold_out' must be in [0, 1)");
  assembler.validate();
}

KeyValues TrainingConfig::to_key_values() const {
  KeyValues kv;
  kv.set("training.epochs", std::to_string(epochs));
  kv.set("training.batch_size", std::to_string(batch_size));
  kv.set("training.batches_per_step", std::to_string(batches_per_step));
  kv.set("training.optimizer", to_string(optimizer));
  kv.set("training.learning_rate", format_double(learning_rate));
  kv.set("training.schedule", to_string(schedule));
  kv.set("training.gate_loss_weight", format_double(gate_loss_weight));
  kv.set("training.limits", join_numbers(limits));
  kv.set("training.seed", std::to_string(seed));
  kv.set("training.hold_out", format_double(hold_out));
  kv.set("assembler.limit_dim", std::to_string(assembler.limit_dim));
  kv.set("assembler.selection_dim", std::to_string(assembler.selection_dim));
  kv.set("assembler.mixture", assembler.mixture ? "true" : "false");
  kv.set("assembler.experts", std::to_string(assembler.experts));
  return kv;
}

TrainingConfig TrainingConfig::from_key_values(const KeyValues& kv) {
  TrainingConfig c;
  auto get = [&](const char* key) { return kv.find(key); };
  if (auto v = get("training.epochs")) c.epochs = static_cast<int>(parse_integer(*v, "training.epochs"));
  if (auto v = get("training.batch_size")) c.batch_size = static_cast<int>(parse_integer(*v, "training.batch_size"));
  if (auto v = get("training.batches_per_step")) {
    c.batches_per_step = static_cast<int>(parse_integer(*v, "training.batches_per_step"));
  }
  if (auto v = get("training.optimizer")) c.optimizer = parse_optimizer(*v);
  if (auto v = get("training.learning_rate")) c.learning_rate = parse_number(*v, "training.learning_rate");
  if (auto v = get("training.schedule")) c.schedule = parse_schedule(*v);
  if (auto v = get("training.gate_loss_weight")) c.gate_loss_weight = parse_number(*v, "training.gate_loss_weight");
  if (auto v = get("training.limits")) c.limits = parse_numbers(*v, "training.limits");
  if (auto v = get("training.seed")) c.seed = static_cast<std::uint64_t>(parse_integer(*v, "training.seed"));
  if (auto v = get("training.hold_out")) c.hold_out = parse_number(*v, "training.hold_out");
  if (auto v = get("assembler.limit_dim")) c.assembler.limit_dim = static_cast<int>(parse_integer(*v, "assembler.limit_dim"));
  if (auto v = get("assembler.selection_dim")) {
    c.assembler.selection_dim = static_cast<int>(parse_integer(*v, "assembler.selection_dim"));
  }
  if (auto v = get("assembler.mixture")) c.assembler.mixture = parse_bool(*v, "assembler.mixture");
  if (auto v = get("assembler.experts")) c.assembler.experts = static_cast<int>(parse_integer(*v, "assembler.experts"));
  c.validate();
  return c;
}

const std::set<std::string>& TrainingConfig::known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    const auto kv = TrainingConfig{}.to_key_values();
    for (const auto& key : kv.keys()) k.insert(key);
    return k;
  }();
  return keys;
}

torch::Tensor gate_loss(std::span<const torch::Tensor> gates, double limit) {
  if (gates.empty()) throw ShapeError("gate loss needs at least one gate tensor");
  std::vector<torch::Tensor> flat;
  for (const auto& g : gates) flat.push_back(g.reshape({-1}));
  const auto ratio = torch::cat(flat).mean();
  return torch::relu(ratio - limit).pow(2);
}

double gate_loss(double ratio, double limit) { return ratio > limit ? (ratio - limit) * (ratio - limit) : 0.0; }

torch::Tensor total_loss(const torch::Tensor& logits, const torch::Tensor& labels, std::span<const torch::Tensor> gates,
                         double limit, double weight) {
  return torch::nn::functional::cross_entropy(logits, labels) + weight * gate_loss(gates, limit);
}

std::vector<Batch> make_batches(const Dataset& dataset, std::span<const double> limits, int batch_size,
                                std::uint64_t seed) {
  if (dataset.empty()) throw DataError("cannot batch an empty dataset");
  if (limits.empty()) throw SpecError("limit pool must not be empty");
  if (batch_size <= 0) throw SpecError("batch size must be positive");
  Rng rng(seed);
  std::map<int, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_task[dataset[i].task.index()].push_back(i);
  std::vector<Batch> batches;
  for (auto& [task, indices] : by_task) {
    rng.shuffle(std::span(indices));
    for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
      Batch b;
      b.task = TaskDescriptor::from_index(task);
      b.limit = limits[rng.below(limits.size())];
      const auto end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
      b.samples.assign(indices.begin() + static_cast<std::ptrdiff_t>(start), indices.begin() + static_cast<std::ptrdiff_t>(end));
      batches.push_back(std::move(b));
    }
  }
  rng.shuffle(std::span(batches));
  return batches;
}

std::string EpochMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["task_loss"] = task_loss;
  j["gate_loss"] = gate_loss;
  auto& ratios = j["ratio_by_limit"] = nlohmann::ordered_json::object();
  for (const auto& [limit, ratio] : ratio_by_limit) ratios[format_double(limit)] = ratio;
  auto& acc = j["validation_accuracy"] = nlohmann::ordered_json::object();
  for (const auto& [task, a] : validation_accuracy) acc[task] = a;
  j["seconds"] = seconds;
  return j.dump();
}

torch::Tensor images_tensor(const Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) return torch::empty({0, 1, kImageSize, kImageSize});
  const auto& first = dataset.at(indices[0]).image;
  auto out = torch::empty({static_cast<std::int64_t>(indices.size()), 1, first.height, first.width}, torch::kFloat32);
  float* p = out.data_ptr<float>();
  for (auto i : indices) {
    const auto& img = dataset.at(i).image;
    if (img.height != first.height || img.width != first.width) throw ShapeError("dataset images differ in size");
    p = std::copy(img.pixels.begin(), img.pixels.end(), p);
  }
  return out;
}

namespace {

torch::Tensor labels_tensor(const Dataset& dataset, std::span<const std::size_t> indices) {
  auto out = torch::empty({static_cast<std::int64_t>(indices.size())}, torch::kLong);
  auto* p = out.data_ptr<std::int64_t>();
  for (auto i : indices) *p++ = dataset.at(i).label;
  return out;
}

std::vector<std::size_t> task_indices(const Dataset& dataset, TaskDescriptor task) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].task == task) out.push_back(i);
  }
  return out;
}

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const TrainingConfig& config,
                                                        std::vector<torch::Tensor> params) {
  switch (config.optimizer) {
    case OptimizerKind::RmsProp:
      return std::make_unique<torch::optim::RMSprop>(params, torch::optim::RMSpropOptions(config.learning_rate));
    case OptimizerKind::Adam:
      return std::make_unique<torch::optim::Adam>(params, torch::optim::AdamOptions(config.learning_rate));
    case OptimizerKind::Sgd:
      return std::make_unique<torch::optim::SGD>(params, torch::optim::SGDOptions(config.learning_rate));
  }
  throw std::logic_error("unreachable optimizer kind");
}

void set_learning_rate(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

constexpr std::int64_t kEvalChunk = 256;

torch::Tensor predict_classes(Network& net, const torch::Tensor& x, std::span<const torch::Tensor> gates) {
  std::vector<torch::Tensor> parts;
  for (std::int64_t start = 0; start < x.size(0); start += kEvalChunk) {
    auto chunk = x.slice(0, start, std::min(x.size(0), start + kEvalChunk));
    parts.push_back(net->forward(chunk, gates).argmax(1));
  }
  return parts.empty() ? torch::empty({0}, torch::kLong) : torch::cat(parts);
}

}  // namespace

JointCheckpoint initialize_checkpoint(const SupernetSpec& spec, const TrainingConfig& config) {
  config.validate();
  JointCheckpoint c;
  c.spec = spec;
  c.config = config;
  c.supernet = build_supernet(spec, config.seed);
  c.assembler = build_assembler(config.assembler, gate_layout(spec), Rng::mix(config.seed, 1));
  return c;
}

void train_joint(JointCheckpoint& checkpoint, const Dataset& dataset, const TrainingOptions& options) {
  using clock = std::chrono::steady_clock;
  const auto& config = checkpoint.config;
  config.validate();
  if (!checkpoint.supernet || !checkpoint.assembler) throw StateError("checkpoint has no parameters to train");
  const auto tasks = dataset_tasks(dataset);
  if (tasks.size() < 2) throw DataError("joint training needs at least two tasks");
  if (checkpoint.epochs_completed > 0 && tasks != checkpoint.vocabulary) {
    throw DataError("dataset tasks differ from the checkpoint's task vocabulary");
  }
  checkpoint.vocabulary = tasks;

  auto& net = checkpoint.supernet;
  auto& assembler = checkpoint.assembler;
  std::vector<torch::Tensor> params = net->parameters();
  for (auto& p : assembler->parameters()) params.push_back(p);
  auto optimizer = make_optimizer(config, params);

  // Every step runs the assembler on the whole request vocabulary so its
  // batch statistics are those of the full request population.
  std::vector<GenerationRequest> requests;
  for (const auto& t : tasks) {
    for (double l : config.limits) requests.push_back({t, l});
  }
  const auto requirement = encode_requirements(requests, config.assembler.limit_dim);
  auto request_row = [&](TaskDescriptor task, double limit) {
    for (std::size_t i = 0; i < requests.size(); ++i) {
      if (requests[i].task == task && requests[i].activation_limit == limit) return static_cast<std::int64_t>(i);
    }
    throw std::logic_error("request outside the training vocabulary");
  };

  std::vector<std::size_t> all(dataset.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto images = images_tensor(dataset, all);
  const auto labels = labels_tensor(dataset, all);

  const auto per_epoch_batches = make_batches(dataset, config.limits, config.batch_size, config.seed).size();
  const auto steps_per_epoch =
      (per_epoch_batches + static_cast<std::size_t>(config.batches_per_step) - 1) / static_cast<std::size_t>(config.batches_per_step);
  const double total_steps = static_cast<double>(steps_per_epoch) * std::max(1, config.epochs);
  const auto layer_count = checkpoint.layout().size();

  int non_finite = 0;
  for (int epoch = checkpoint.epochs_completed; epoch < config.epochs; ++epoch) {
    const auto started = clock::now();
    net->train();
    assembler->train();
    Rng coin_rng(Rng::mix(config.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    const auto batches = make_batches(dataset, config.limits, config.batch_size,
                                      Rng::mix(config.seed, 2000 + static_cast<std::uint64_t>(epoch)));
    EpochMetrics metrics;
    metrics.epoch = epoch + 1;
    std::map<double, std::pair<double, int>> ratio_sums;
    double tl_sum = 0, gl_sum = 0;
    int steps = 0;
    for (std::size_t start = 0; start < batches.size(); start += static_cast<std::size_t>(config.batches_per_step)) {
      const auto end = std::min(batches.size(), start + static_cast<std::size_t>(config.batches_per_step));
      const double step_index = static_cast<double>(epoch) * static_cast<double>(steps_per_epoch) + steps;
      const double lr = config.schedule == Schedule::Cosine
                            ? config.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * step_index / total_steps))
                            : config.learning_rate;
      set_learning_rate(*optimizer, lr);

      const auto logits = assembler->forward(requirement);
      std::vector<std::vector<torch::Tensor>> sample_gates(layer_count);
      std::vector<std::size_t> sample_indices;
      torch::Tensor gl_total;
      for (std::size_t b = start; b < end; ++b) {
        const auto& batch = batches[b];
        const auto row = request_row(batch.task, batch.limit);
        const bool hard = coin_rng.coin();
        std::vector<torch::Tensor> straight;
        const auto n = static_cast<std::int64_t>(batch.samples.size());
        for (std::size_t l = 0; l < layer_count; ++l) {
          const auto w = logits[l][row];
          auto st = semhash(w, SemHashMode::StraightThrough);
          auto g = hard ? st : semhash(w, SemHashMode::Soft);
          straight.push_back(st);
          sample_gates[l].push_back(g.unsqueeze(0).expand({n, w.size(0)}));
        }
        // The sparsity term always sees the discrete selection.
        auto gl = gate_loss(straight, batch.limit);
        gl_total = gl_total.defined() ? gl_total + gl : gl;
        double active = 0, total = 0;
        for (const auto& s : straight) {
          active += s.detach().sum().item<double>();
          total += static_cast<double>(s.numel());
        }
        auto& acc = ratio_sums[batch.limit];
        acc.first += active / total;
        acc.second += 1;
        sample_indices.insert(sample_indices.end(), batch.samples.begin(), batch.samples.end());
      }
      std::vector<torch::Tensor> gates;
      for (auto& parts : sample_gates) gates.push_back(torch::cat(parts));
      const auto index = torch::tensor(std::vector<std::int64_t>(sample_indices.begin(), sample_indices.end()), torch::kLong);
      const auto out = net->forward(images.index_select(0, index), gates);
      const auto tl = torch::nn::functional::cross_entropy(out, labels.index_select(0, index));
      const auto gl = gl_total / static_cast<double>(end - start);
      const auto loss = tl + config.gate_loss_weight * gl;

      const double loss_value = loss.item<double>();
      if (!std::isfinite(loss_value)) {
        if (++non_finite >= 3) {
          throw DivergenceError("loss was non-finite for 3 consecutive batches in epoch " + std::to_string(epoch + 1));
        }
        ++steps;
        continue;
      }
      non_finite = 0;
      optimizer->zero_grad();
      loss.backward();
      optimizer->step();
      tl_sum += tl.item<double>();
      gl_sum += gl.item<double>();
      ++steps;
    }
    metrics.task_loss = steps ? tl_sum / steps : 0;
    metrics.gate_loss = steps ? gl_sum / steps : 0;
    for (const auto& [limit, acc] : ratio_sums) metrics.ratio_by_limit[limit] = acc.first / acc.second;
    if (!options.validation.empty()) {
      const auto val_tasks = dataset_tasks(options.validation);
      for (const auto& s : evaluate(checkpoint, val_tasks, options.validation, options.validation_limit)) {
        metrics.validation_accuracy[to_string(s.task)] = s.accuracy;
      }
    }
    metrics.seconds = std::chrono::duration<double>(clock::now() - started).count();
    checkpoint.metrics.push_back(metrics.to_json());
    checkpoint.epochs_completed = epoch + 1;
    if (options.on_epoch) options.on_epoch(metrics);
  }
  net->eval();
  assembler->eval();
}

std::vector<TaskScore> evaluate(JointCheckpoint& checkpoint, std::span<const TaskDescriptor> tasks,
                                const Dataset& dataset, double limit) {
  if (!checkpoint.supernet || !checkpoint.assembler) throw StateError("checkpoint has no trained parameters");
  auto& net = checkpoint.supernet;
  const bool was_training = net->is_training();
  net->eval();
  torch::NoGradGuard no_grad;
  std::vector<TaskScore> scores;
  for (const auto& task : tasks) {
    const GenerationRequest request{task, limit};
    request.validate();
    const auto gates = generate_gates(checkpoint.assembler, request);
    TaskScore score;
    score.task = task;
    score.activation_ratio = gates.activation_ratio();
    const auto indices = task_indices(dataset, task);
    score.samples = indices.size();
    if (!indices.empty()) {
      const auto predicted = predict_classes(net, images_tensor(dataset, indices), gates.to_tensors());
      score.accuracy = predicted.eq(labels_tensor(dataset, indices)).to(torch::kDouble).mean().item<double>();
    }
    scores.push_back(score);
  }
  if (was_training) net->train();
  return scores;
}

double evaluate_subnet(Network& subnet, const Dataset& dataset, TaskDescriptor task) {
  const auto indices = task_indices(dataset, task);
  if (indices.empty()) throw DataError("dataset has no samples for task " + to_string(task));
  subnet->eval();
  torch::NoGradGuard no_grad;
  const auto predicted = predict_classes(subnet, images_tensor(dataset, indices), {});
  return predicted.eq(labels_tensor(dataset, indices)).to(torch::kDouble).mean().item<double>();
}

void save_checkpoint(const JointCheckpoint& checkpoint, const std::filesystem::path& dir) {
  if (!checkpoint.supernet || !checkpoint.assembler) throw StateError("checkpoint has no parameters to save");
  std::filesystem::create_directories(dir);
  KeyValues manifest;
  manifest.set("format", "modgen-checkpoint");
  manifest.set("version", std::to_string(JointCheckpoint::kFormatVersion));
  manifest.set("spec", checkpoint.spec.to_string());
  manifest.set("layout", checkpoint.layout().to_string());
  manifest.set("layout_hash", checkpoint.layout().fingerprint());
  std::vector<std::string> vocab;
  for (const auto& t : checkpoint.vocabulary) vocab.push_back(to_string(t));
  manifest.set("vocabulary", join(vocab, ","));
  manifest.set("epochs_completed", std::to_string(checkpoint.epochs_completed));
  const auto config = checkpoint.config.to_key_values();
  for (const auto& key : config.keys()) manifest.set(key, config.at(key));
  manifest.save(dir / "manifest.txt");
  write_tensors(module_state(*checkpoint.supernet), dir / "supernet.bin");
  write_tensors(module_state(*checkpoint.assembler), dir / "assembler.bin");
  std::ofstream metrics(dir / "metrics.jsonl");
  for (const auto& line : checkpoint.metrics) metrics << line << '\n';
  if (!metrics) throw FormatError("cannot write " + (dir / "metrics.jsonl").string());
}

JointCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.txt")) throw FormatError("no checkpoint manifest in " + dir.string());
  const auto manifest = KeyValues::load(dir / "manifest.txt");
  if (manifest.at("format") != "modgen-checkpoint") throw FormatError(dir.string() + " is not a checkpoint");
  if (manifest.integer("version") != JointCheckpoint::kFormatVersion) {
    throw FormatError("checkpoint version " + manifest.at("version") + " is not supported (expected " +
                      std::to_string(JointCheckpoint::kFormatVersion) + ")");
  }
  JointCheckpoint c;
  c.spec = SupernetSpec::parse(manifest.at("spec"));
  if (c.layout().to_string() != manifest.at("layout")) throw FormatError("checkpoint layout disagrees with its spec");
  for (const auto& t : split(manifest.at("vocabulary"), ',')) {
    if (!trim(t).empty()) c.vocabulary.push_back(parse_task(t));
  }
  c.epochs_completed = static_cast<int>(manifest.integer("epochs_completed"));
  c.config = TrainingConfig::from_key_values(manifest);
  c.supernet = Network(c.spec, c.layout().widths());
  load_module_state(*c.supernet, read_tensors(dir / "supernet.bin"));
  c.assembler = Assembler(c.config.assembler, c.layout());
  load_module_state(*c.assembler, read_tensors(dir / "assembler.bin"));
  c.supernet->eval();
  c.assembler->eval();
  std::ifstream metrics(dir / "metrics.jsonl");
  std::string line;
  while (std::getline(metrics, line)) {
    if (!trim(line).empty()) c.metrics.push_back(line);
  }
  return c;
}

std::string checkpoint_hash(const std::filesystem::path& dir) {
  Fnv1a h;
  for (const char* name : {"manifest.txt", "supernet.bin", "assembler.bin"}) {
    std::ifstream in(dir / name, std::ios::binary);
    if (!in) throw FormatError("cannot read " + (dir / name).string());
    std::stringstream ss;
    ss << in.rdbuf();
    h.update(name);
    h.update(ss.str());
  }
  return h.hex();
}

}  // namespace modgen
