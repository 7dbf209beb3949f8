#pragma once

// Declarative pipeline configuration: one flat key-value file with
// dotted sections.

#include <filesystem>
#include <string>

#include "modgen/keyvalue.hpp"
#include "modgen/search.hpp"
#include "modgen/supernet.hpp"
#include "modgen/taskspace.hpp"
#include "modgen/training.hpp"

namespace modgen {

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::filesystem::path output = "out";

  // taskspace
  std::string tasks = "all";  // training pool before the unseen hold-out
  int train_task_count = 0;   // 0 keeps every non-held-out task
  int per_task = 500;
  int validation_per_task = 100;
  GlyphSource source = GlyphSource::Procedural;
  std::filesystem::path corpus;

  SupernetSpec supernet;
  TrainingConfig training;

  // profiling
  int profile_subnets = 500;
  int profile_warmup = 10;
  int profile_repeats = 50;
  double profile_min_ratio = 0.01;
  double profile_max_ratio = 1.0;

  SearchConfig search;

  /// Unknown keys are rejected with ParseError.
  static PipelineConfig from_key_values(const KeyValues& kv);
  static PipelineConfig load(const std::filesystem::path& path);
  /// Every key with its effective value.
  KeyValues to_key_values() const;
  void save_snapshot(const std::filesystem::path& path) const;
};

}  // namespace modgen
