#pragma once

// Joint training of a gated supernet and its assembler, evaluation, and the
// checkpoint format.

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "modgen/assembler.hpp"
#include "modgen/keyvalue.hpp"
#include "modgen/supernet.hpp"
#include "modgen/taskspace.hpp"

namespace modgen {

enum class OptimizerKind { RmsProp, Adam, Sgd };
enum class Schedule { Cosine, Constant };

std::string to_string(OptimizerKind k);
std::string to_string(Schedule s);

struct TrainingConfig {
  int epochs = 40;
  int batch_size = 16;          // samples per (task, limit) batch
  int batches_per_step = 8;     // batches fused into one parameter update
  OptimizerKind optimizer = OptimizerKind::RmsProp;
  double learning_rate = 1e-3;
  Schedule schedule = Schedule::Cosine;
  double gate_loss_weight = 100.0;
  std::vector<double> limits = {0.01, 0.03, 0.05, 0.10, 0.20, 0.50};
  std::uint64_t seed = 1;
  double hold_out = 0.1;
  AssemblerSpec assembler;

  /// Throws SpecError naming the offending field.
  void validate() const;

  /// Keys under "training." (and "assembler."), all present.
  KeyValues to_key_values() const;
  /// Reads the keys this struct owns; absent keys keep their defaults.
  static TrainingConfig from_key_values(const KeyValues& kv);
  static const std::set<std::string>& known_keys();
};

/// GL = (r - limit)^2 when r > limit, else 0; r is the mean over every entry of every layer.
torch::Tensor gate_loss(std::span<const torch::Tensor> gates, double limit);
double gate_loss(double ratio, double limit);

/// Cross-entropy plus weight * GL.
torch::Tensor total_loss(const torch::Tensor& logits, const torch::Tensor& labels, std::span<const torch::Tensor> gates,
                         double limit, double weight);

struct Batch {
  TaskDescriptor task;
  double limit = 0;
  std::vector<std::size_t> samples;  // indices into the dataset
};

/// One epoch of batches homogeneous in (task, limit), shuffled across tasks.
/// A task's trailing partial batch is kept.
std::vector<Batch> make_batches(const Dataset& dataset, std::span<const double> limits, int batch_size,
                                std::uint64_t seed);

struct EpochMetrics {
  int epoch = 0;
  double task_loss = 0;
  double gate_loss = 0;
  std::map<double, double> ratio_by_limit;        // training hard-gate ratio
  std::map<std::string, double> validation_accuracy;  // at the validation limit
  double seconds = 0;

  std::string to_json() const;
};

struct JointCheckpoint {
  static constexpr int kFormatVersion = 1;

  SupernetSpec spec;
  Network supernet{nullptr};
  Assembler assembler{nullptr};
  std::vector<TaskDescriptor> vocabulary;  // tasks seen in training
  TrainingConfig config;
  std::vector<std::string> metrics;  // one JSON record per epoch
  int epochs_completed = 0;

  GateLayout layout() const { return gate_layout(spec); }
};

struct TrainingOptions {
  Dataset validation;
  double validation_limit = 0.10;
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Fresh supernet and assembler for a spec, seeded from the config.
JointCheckpoint initialize_checkpoint(const SupernetSpec& spec, const TrainingConfig& config);

/// Trains `checkpoint` in place from its completed epoch count up to
/// config.epochs. Optimizer moments start fresh on every call. Throws
/// DivergenceError after three consecutive non-finite losses and DataError
/// when the dataset's tasks differ from a resumed checkpoint's vocabulary.
void train_joint(JointCheckpoint& checkpoint, const Dataset& dataset, const TrainingOptions& options = {});

struct TaskScore {
  TaskDescriptor task;
  double accuracy = 0;
  double activation_ratio = 0;
  std::size_t samples = 0;
};

/// Per-task accuracy with deterministically generated gates at `limit`.
std::vector<TaskScore> evaluate(JointCheckpoint& checkpoint, std::span<const TaskDescriptor> tasks,
                                const Dataset& dataset, double limit);

/// Accuracy of a static subnet on every sample of `task` in the dataset.
double evaluate_subnet(Network& subnet, const Dataset& dataset, TaskDescriptor task);

/// Stacks sample images into [N, 1, H, W].
torch::Tensor images_tensor(const Dataset& dataset, std::span<const std::size_t> indices);

void save_checkpoint(const JointCheckpoint& checkpoint, const std::filesystem::path& dir);
JointCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// FNV-1a over the manifest and parameter blobs.
std::string checkpoint_hash(const std::filesystem::path& dir);

}  // namespace modgen
