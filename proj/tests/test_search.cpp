#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <tuple>

#include "modgen/error.hpp"
#include "modgen/perfmodel.hpp"
#include "modgen/rng.hpp"
#include "modgen/search.hpp"

using namespace modgen;

namespace {

SupernetSpec small_conv() {
  SupernetSpec s;
  s.input_height = s.input_width = 16;
  s.stem_channels = 4;
  s.blocks = {{8, 2}, {8, 1}, {12, 2}};
  s.head_hidden = 8;
  return s;
}

GateLogits random_logits(const GateLayout& layout, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  GateLogits out;
  for (const auto& layer : layout.layers()) {
    auto& row = out.emplace_back();
    for (int i = 0; i < layer.width; ++i) row.push_back(static_cast<float>(rng.uniform(-1, 1) + shift));
  }
  return out;
}

// Brute force: rank every (logit, layer, index) triple, take the top k, then
// revive the best module of each empty layer.
GateConfiguration oracle_enforce(const GateLogits& logits, double limit) {
  std::vector<std::vector<std::uint8_t>> bits;
  std::size_t total = 0, positive = 0;
  for (const auto& layer : logits) {
    auto& row = bits.emplace_back();
    for (float w : layer) {
      row.push_back(w > 0);
      positive += w > 0;
    }
    total += layer.size();
  }
  if (static_cast<double>(positive) / static_cast<double>(total) > limit) {
    std::vector<std::tuple<float, std::size_t, std::size_t>> all;
    for (std::size_t l = 0; l < logits.size(); ++l)
      for (std::size_t i = 0; i < logits[l].size(); ++i) all.emplace_back(-logits[l][i], l, i);
    std::sort(all.begin(), all.end());
    for (auto& row : bits) std::fill(row.begin(), row.end(), 0);
    const auto k = static_cast<std::size_t>(std::floor(limit * static_cast<double>(total) + 1e-9));
    for (std::size_t j = 0; j < k; ++j) bits[std::get<1>(all[j])][std::get<2>(all[j])] = 1;
  }
  for (std::size_t l = 0; l < logits.size(); ++l) {
    if (std::count(bits[l].begin(), bits[l].end(), 1) > 0) continue;
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits[l].size(); ++i)
      if (logits[l][i] > logits[l][best]) best = i;
    bits[l][best] = 1;
  }
  return GateConfiguration(std::move(bits));
}

// Logit of module j is limit - u_j, so the thresholded ratio tracks the limit.
class MonotoneSource : public GateSource {
 public:
  MonotoneSource(const GateLayout& layout, std::uint64_t seed) : base_(random_logits(layout, seed, 1.0)) {}
  GateLogits logits(const GenerationRequest& request) override {
    ++calls;
    auto out = base_;
    for (auto& row : out)
      for (auto& w : row) w = static_cast<float>(request.activation_limit - w / 2.0);
    return out;
  }
  int calls = 0;

 private:
  GateLogits base_;
};

PerformancePredictor linear_predictor(const SupernetSpec& spec) {
  PerformancePredictor p;
  p.spec = spec;
  p.layout_hash = gate_layout(spec).fingerprint();
  const auto layers = gate_layout(spec).size();
  p.latency.coefficients.assign(layers, 0.1);
  p.latency.used.assign(layers, 1);
  p.latency.bias = 1.0;
  p.memory.coefficients = {1.0, 1.0};
  p.memory.used = {1, 1};
  return p;
}

DeviceProfile synthetic_profile(const SupernetSpec& spec, std::size_t n, std::uint64_t seed) {
  DeviceProfile profile;
  profile.spec = spec;
  const auto layout = gate_layout(spec);
  profile.layout_hash = layout.fingerprint();
  const auto gates = sample_random_gates(layout, n, 0.05, 1.0, seed);
  for (std::size_t i = 0; i < gates.size(); ++i) {
    ProfilingSample s;
    s.id = "s" + std::to_string(i);
    s.active_counts = gates[i].active_counts();
    s.latency_ms = 0.4;
    for (std::size_t l = 0; l < s.active_counts.size(); ++l) s.latency_ms += 0.01 * static_cast<double>(l + 1) * s.active_counts[l];
    const auto r = count_resources(spec, s.active_counts);
    s.memory_bytes = r.parameter_bytes + r.peak_activation_bytes;
    profile.samples.push_back(s);
  }
  return profile;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("modgen_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(EnforceLimit, MatchesBruteForceTopK) {
  const auto layout = gate_layout(SupernetSpec::conv_default());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto logits = random_logits(layout, seed, seed % 3 == 0 ? -0.8 : 0.2);
    for (double limit : {0.01, 0.03, 0.1, 0.25, 0.6, 1.0}) {
      const auto got = enforce_limit(logits, limit);
      EXPECT_EQ(got, oracle_enforce(logits, limit)) << seed << " " << limit;
      EXPECT_FALSE(got.has_dead_layer());
      EXPECT_LE(got.activation_ratio(), std::max(limit, threshold_logits(logits).activation_ratio()) + 4.0 / 192 + 1e-12);
    }
  }
}

TEST(EnforceLimit, CapHoldsAboveFeasibleFloor) {
  const auto layout = gate_layout(SupernetSpec::conv_default());
  EXPECT_DOUBLE_EQ(min_feasible_limit(layout), 4.0 / 192.0);
  const auto logits = random_logits(layout, 77, 2.0);  // every module wants to fire
  for (int k = 4; k <= 192; k += 17) {
    const double limit = k / 192.0;
    // Exactly k survive the cap; reviving empty layers adds at most one per other layer.
    const auto active = enforce_limit(logits, limit).total_active();
    EXPECT_GE(active, static_cast<std::size_t>(k));
    EXPECT_LE(active, static_cast<std::size_t>(k) + 3);
  }
  EXPECT_THROW(enforce_limit(logits, 0.0), std::out_of_range);
}

TEST(EnforceLimit, LeavesCompliantGatesAlone) {
  const auto layout = gate_layout(SupernetSpec::conv_default());
  const auto logits = random_logits(layout, 3, -0.7);
  const auto plain = threshold_logits(logits);
  if (!plain.has_dead_layer()) EXPECT_EQ(enforce_limit(logits, 1.0), plain);
}

TEST(SearchGrid, InclusiveAndValidated) {
  SearchConfig c;
  const auto grid = c.grid();
  ASSERT_EQ(grid.size(), 100u);
  EXPECT_DOUBLE_EQ(grid.front(), 0.01);
  EXPECT_DOUBLE_EQ(grid.back(), 1.0);
  c.step = 0;
  EXPECT_THROW(c.validate(), SpecError);
  SearchConfig d;
  d.start = 0.05;
  d.step = 0.1;
  d.max = 0.5;
  EXPECT_EQ(d.grid().size(), 5u);
  EXPECT_EQ(SearchConfig::from_key_values(d.to_key_values()).grid(), d.grid());
}

class SearchSweep : public ::testing::TestWithParam<bool> {};

TEST_P(SearchSweep, MatchesExhaustiveSweep) {
  const auto spec = small_conv();
  const auto layout = gate_layout(spec);
  const auto predictor = linear_predictor(spec);
  SearchConfig config;
  config.enforce_limit = GetParam();
  for (double budget : {1.5, 2.2, 2.9, 100.0}) {
    EdgeScenario scenario{parse_task("has:digit4"), budget, std::nullopt};
    MonotoneSource source(layout, 5);
    const auto result = search(scenario, source, predictor, config);

    // Exhaustive oracle: evaluate every grid point and take the last one of the passing prefix.
    MonotoneSource oracle_source(layout, 5);
    int passing = 0;
    GateConfiguration best;
    for (double limit : config.grid()) {
      const auto logits = oracle_source.logits({scenario.task, limit});
      const auto g = config.enforce_limit ? oracle_enforce(logits, limit) : threshold_logits(logits);
      const auto counts = g.active_counts();
      double latency = 1.0;
      for (int c : counts) latency += 0.1 * c;
      if (latency > budget) break;
      ++passing;
      best = g;
    }
    ASSERT_GT(passing, 0);
    EXPECT_EQ(result.gates, best);
    EXPECT_DOUBLE_EQ(result.limit, config.grid()[static_cast<std::size_t>(passing - 1)]);
    const int expected_rounds = passing == static_cast<int>(config.grid().size()) ? passing : passing + 1;
    EXPECT_EQ(result.rounds, expected_rounds);
    EXPECT_EQ(source.calls, expected_rounds);
    EXPECT_EQ(result.trace.size(), static_cast<std::size_t>(expected_rounds));
    EXPECT_LE(result.prediction.latency_ms, budget);
    const auto text = result.trace_text();
    const auto lines = std::count(text.begin(), text.end(), '\n');
    EXPECT_GE(lines, expected_rounds);
  }
}

INSTANTIATE_TEST_SUITE_P(Enforcement, SearchSweep, ::testing::Bool());

TEST(Search, InfeasibleBudgetsRaise) {
  const auto spec = small_conv();
  MonotoneSource source(gate_layout(spec), 1);
  EdgeScenario scenario{parse_task("has:odd"), 0.5, std::nullopt};
  EXPECT_THROW(search(scenario, source, linear_predictor(spec), SearchConfig{}), BudgetError);
  EdgeScenario memory{parse_task("has:odd"), std::nullopt, 10};
  EXPECT_THROW(search(memory, source, linear_predictor(spec), SearchConfig{}), BudgetError);
  EdgeScenario none{parse_task("has:odd"), std::nullopt, std::nullopt};
  EXPECT_THROW(search(none, source, linear_predictor(spec), SearchConfig{}), ParseError);
}

TEST(Search, MemoryBudgetUsesAnalyticBytes) {
  const auto spec = small_conv();
  const auto layout = gate_layout(spec);
  const auto predictor = linear_predictor(spec);
  const auto low = count_resources(spec, std::vector<int>{1, 1, 1});
  const auto high = count_resources(spec, layout.widths());
  const auto budget = (low.parameter_bytes + low.peak_activation_bytes + high.parameter_bytes + high.peak_activation_bytes) / 2;
  MonotoneSource source(layout, 2);
  const auto r = search({parse_task("has:odd"), std::nullopt, budget}, source, predictor, SearchConfig{});
  const auto c = count_resources(spec, r.gates);
  EXPECT_LE(c.parameter_bytes + c.peak_activation_bytes, budget);
  EXPECT_GT(r.rounds, 1);
}

TEST(GateProvenance, RoundTrip) {
  const auto layout = gate_layout(small_conv());
  const auto g = enforce_limit(random_logits(layout, 4), 0.3);
  EXPECT_EQ(gates_from_provenance(gates_to_provenance(g, layout), layout), g);
  EXPECT_THROW(gates_from_provenance("nonsense", layout), ParseError);
}

TEST(RandomGates, RatiosFollowUniformTarget) {
  const auto layout = gate_layout(SupernetSpec::conv_default());
  const double lo = 0.05, hi = 0.95;
  const std::size_t n = 1000;
  const auto gates = sample_random_gates(layout, n, lo, hi, 13);
  ASSERT_EQ(gates.size(), n);
  std::vector<double> ratios;
  for (const auto& g : gates) {
    EXPECT_FALSE(g.has_dead_layer());
    ratios.push_back(g.activation_ratio());
  }
  std::sort(ratios.begin(), ratios.end());
  // Kolmogorov-Smirnov distance to U[lo, hi]; the ratio lattice adds up to 1/192.
  double d = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double cdf = std::clamp((ratios[i] - lo) / (hi - lo), 0.0, 1.0);
    d = std::max({d, std::abs(cdf - static_cast<double>(i) / n), std::abs(cdf - static_cast<double>(i + 1) / n)});
  }
  EXPECT_LT(d, 1.63 / std::sqrt(static_cast<double>(n)) + 1.0 / 192.0);
  EXPECT_EQ(sample_random_gates(layout, 5, lo, hi, 13), std::vector<GateConfiguration>(gates.begin(), gates.begin() + 5));
}

TEST(LinearFit, RecoversPlantedCoefficients) {
  Rng rng(8);
  const std::vector<double> truth{0.25, -1.5, 3.0, 0.0};
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (int i = 0; i < 60; ++i) {
    std::vector<double> row;
    double target = 2.0;
    for (double c : truth) {
      row.push_back(rng.uniform(0, 64));
      target += c * row.back();
    }
    x.push_back(row);
    y.push_back(target);
  }
  const auto m = fit_linear(x, y);
  ASSERT_EQ(m.coefficients.size(), truth.size());
  for (std::size_t j = 0; j < truth.size(); ++j) EXPECT_NEAR(m.coefficients[j], truth[j], 1e-6);
  EXPECT_NEAR(m.bias, 2.0, 1e-6);
  EXPECT_NEAR(m.evaluate(x[0]), y[0], 1e-6);
}

TEST(LinearFit, IdenticalGatesAreRankDeficient) {
  std::vector<std::vector<double>> x(60, {32, 32, 64, 64});
  std::vector<double> y(60, 1.0);
  EXPECT_THROW(fit_linear(x, y), FitError);

  auto profile = synthetic_profile(SupernetSpec::conv_default(), 60, 1);
  for (auto& s : profile.samples) s.active_counts = {10, 10, 20, 20};
  EXPECT_THROW(fit_predictor(profile), FitError);
}

TEST(Predictor, FitsExactLinearProfile) {
  const auto spec = SupernetSpec::conv_default();
  const auto profile = synthetic_profile(spec, 120, 4);
  const auto p = fit_predictor(profile, 0.2, 1);
  EXPECT_EQ(p.holdout_samples, 24u);
  EXPECT_GT(p.latency_accuracy, 1 - 1e-6);
  EXPECT_GT(p.memory_accuracy, 1 - 1e-6);
  EXPECT_EQ(p.memory.used, (std::vector<std::uint8_t>{1, 0}));
  const std::vector<int> counts{3, 5, 7, 9};
  EXPECT_NEAR(predict(p, counts).latency_ms, 0.4 + 0.01 * (3 + 10 + 21 + 36), 1e-6);
  EXPECT_THROW(predict(p, GateConfiguration(gate_layout(small_conv()), true)), ShapeError);

  auto few = profile;
  few.samples.resize(49);
  EXPECT_THROW(fit_predictor(few), FitError);
}

TEST(Predictor, ProfileAndPredictorFilesRoundTrip) {
  const auto spec = SupernetSpec::conv_default();
  auto profile = synthetic_profile(spec, 60, 2);
  profile.notes.push_back("synthetic");
  profile.checkpoint_hash = "abc";
  const auto dir = temp_dir("profile_io");
  profile.save(dir / "profile.tsv");
  const auto back = DeviceProfile::load(dir / "profile.tsv");
  ASSERT_EQ(back.samples.size(), profile.samples.size());
  EXPECT_EQ(back.spec, spec);
  EXPECT_EQ(back.checkpoint_hash, "abc");
  for (std::size_t i = 0; i < back.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].active_counts, profile.samples[i].active_counts);
    EXPECT_NEAR(back.samples[i].latency_ms, profile.samples[i].latency_ms, 1e-9);
    EXPECT_EQ(back.samples[i].memory_bytes, profile.samples[i].memory_bytes);
  }
  const auto p = fit_predictor(back, 0.2, 3);
  p.save(dir / "predictor.txt");
  const auto q = PerformancePredictor::load(dir / "predictor.txt");
  const std::vector<int> counts{4, 8, 16, 32};
  EXPECT_NEAR(predict(q, counts).latency_ms, predict(p, counts).latency_ms, 1e-9);
  EXPECT_NEAR(predict(q, counts).memory_bytes, predict(p, counts).memory_bytes, 1e-6);
  EXPECT_EQ(q.checkpoint_hash, "abc");
  std::filesystem::remove_all(dir);
}

TEST(Profiling, TimesExtractedSubnets) {
  const auto spec = small_conv();
  auto net = build_supernet(spec, 1);
  auto gates = sample_random_gates(gate_layout(spec), 3, 0.1, 1.0, 5);
  GateConfiguration dead(gate_layout(spec), false);
  gates.push_back(dead);
  ProfilingOptions opts;
  opts.warmup = 1;
  opts.repeats = 3;
  const auto profile = profile_subnets(net, gates, opts);
  EXPECT_EQ(profile.samples.size(), 3u);
  EXPECT_EQ(profile.skipped, 1u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_GT(profile.samples[i].latency_ms, 0.0);
    const auto r = count_resources(spec, gates[i]);
    EXPECT_EQ(profile.samples[i].memory_bytes, r.parameter_bytes + r.peak_activation_bytes);
    EXPECT_EQ(profile.samples[i].active_counts, gates[i].active_counts());
  }
}
