#pragma once

// Host profiling of extracted subnets and the linear latency / memory
// predictor fitted to the measurements.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "modgen/supernet.hpp"

namespace modgen {

/// Each configuration gets a target ratio drawn uniformly from
/// [min_ratio, max_ratio]; that many modules are activated uniformly at
/// random, after one module per layer is reserved so no layer is dead.
std::vector<GateConfiguration> sample_random_gates(const GateLayout& layout, std::size_t count, double min_ratio,
                                                   double max_ratio, std::uint64_t seed);

struct ProfilingSample {
  std::string id;
  std::vector<int> active_counts;
  double latency_ms = 0;
  std::uint64_t memory_bytes = 0;
};

struct DeviceProfile {
  std::string device = "host";
  int warmup = 10;
  int repeats = 50;
  int batch = 1;
  std::string layout_hash;
  std::string checkpoint_hash;
  SupernetSpec spec;
  std::vector<std::string> notes;
  std::vector<ProfilingSample> samples;
  std::size_t skipped = 0;

  void save(const std::filesystem::path& path) const;
  static DeviceProfile load(const std::filesystem::path& path);
};

struct ProfilingOptions {
  int warmup = 10;
  int repeats = 50;
  std::string device = "host";
};

/// Extracts, warms up, and times each configuration at batch 1. Memory is the
/// analytic parameter plus peak activation bytes. Failed extractions are
/// counted in `skipped`.
DeviceProfile profile_subnets(Network& supernet, std::span<const GateConfiguration> gates,
                              const ProfilingOptions& options = {});

struct LinearModel {
  std::vector<double> coefficients;
  double bias = 0;
  std::vector<std::uint8_t> used;  // features kept in the fit; dropped ones have coefficient 0

  double evaluate(std::span<const double> features) const;
};

struct PerformancePredictor {
  SupernetSpec spec;
  std::string layout_hash;
  std::string checkpoint_hash;
  LinearModel latency;  // features: per-layer active counts
  LinearModel memory;   // features: analytic parameter bytes, analytic peak activation bytes
  double latency_accuracy = 0;  // held-out 1 - MAPE
  double memory_accuracy = 0;
  std::size_t train_samples = 0;
  std::size_t holdout_samples = 0;

  void save(const std::filesystem::path& path) const;
  static PerformancePredictor load(const std::filesystem::path& path);
};

/// Ordinary least squares with an intercept over every feature. Throws
/// FitError on a rank-deficient design, e.g. a feature constant over the
/// samples.
LinearModel fit_linear(const std::vector<std::vector<double>>& features, std::span<const double> targets);

/// 1 - mean(|prediction - truth| / truth).
double one_minus_mape(std::span<const double> predictions, std::span<const double> truth);

std::vector<double> memory_features(const SupernetSpec& spec, std::span<const int> active_counts);

/// Fits on a shuffled (1 - holdout) share and scores the rest. Needs at
/// least 50 samples.
PerformancePredictor fit_predictor(const DeviceProfile& profile, double holdout = 0.2, std::uint64_t seed = 0);

struct Prediction {
  double latency_ms = 0;
  double memory_bytes = 0;
};

Prediction predict(const PerformancePredictor& predictor, std::span<const int> active_counts);
/// Throws ShapeError when the gates do not match the predictor's layout.
Prediction predict(const PerformancePredictor& predictor, const GateConfiguration& gates);

}  // namespace modgen
