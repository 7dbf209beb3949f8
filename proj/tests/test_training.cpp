#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "modgen/assembler.hpp"
#include "modgen/config.hpp"
#include "modgen/error.hpp"
#include "modgen/training.hpp"

using namespace modgen;

namespace {

SupernetSpec tiny_spec() {
  SupernetSpec s;
  s.input_height = s.input_width = 16;
  s.stem_channels = 4;
  s.blocks = {{4, 2}, {4, 1}};
  s.head_hidden = 8;
  return s;
}

Dataset tiny_dataset(std::uint64_t seed, const std::string& tasks = "has:digit1,exactly-1:odd") {
  auto data = synthesize_dataset(parse_task_list(tasks), 8, seed);
  for (auto& s : data) {
    Image small{16, 16, std::vector<float>(256)};
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) small.at(r, c) = s.image.at(r * 3, c * 3);
    s.image = std::move(small);
  }
  return data;
}

TrainingConfig tiny_config() {
  TrainingConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.batches_per_step = 2;
  c.assembler.selection_dim = 8;
  c.assembler.experts = 2;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("modgen_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

double soft_gate(double w) { return std::clamp(1.2 / (1.0 + std::exp(-w)) - 0.1, 0.0, 1.0); }

}  // namespace

TEST(Requirement, ConcatenatesTaskAndLimit) {
  const GenerationRequest r{parse_task("exactly-2:odd"), 0.03};
  const auto enc = encode_requirement(r);
  const auto task = encode_task(r.task);
  const auto limit = encode_limit(0.03);
  ASSERT_EQ(enc.size(), task.size() + limit.size());
  EXPECT_TRUE(std::equal(task.begin(), task.end(), enc.begin()));
  EXPECT_TRUE(std::equal(limit.begin(), limit.end(), enc.begin() + static_cast<std::ptrdiff_t>(task.size())));
  EXPECT_THROW(encode_requirement({r.task, 0.0}), std::out_of_range);
  EXPECT_THROW(encode_requirement({r.task, 1.5}), std::out_of_range);
}

TEST(SemHash, HardSoftAndStraightThrough) {
  const auto w = torch::tensor({-5.0F, -0.5F, 0.0F, 0.3F, 4.0F});
  const auto hard = semhash(w, SemHashMode::Hard);
  EXPECT_TRUE(torch::equal(hard, torch::tensor({0.0F, 0.0F, 0.0F, 1.0F, 1.0F})));
  const auto soft = semhash(w, SemHashMode::Soft);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(soft[i].item<double>(), soft_gate(w[i].item<double>()), 1e-6);
  EXPECT_EQ(soft[0].item<float>(), 0.0F);
  EXPECT_EQ(soft[4].item<float>(), 1.0F);
  EXPECT_TRUE(torch::equal(semhash(w, SemHashMode::StraightThrough), hard));
}

TEST(SemHash, StraightThroughGradientIsSoftDerivative) {
  const std::vector<double> points{-1.5, -0.2, 0.4, 1.1};
  auto w = torch::tensor(std::vector<float>(points.begin(), points.end())).set_requires_grad(true);
  semhash(w, SemHashMode::StraightThrough).sum().backward();
  const double h = 1e-4;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double fd = (soft_gate(points[i] + h) - soft_gate(points[i] - h)) / (2 * h);
    EXPECT_NEAR(w.grad()[static_cast<std::int64_t>(i)].item<double>(), fd, 1e-4);
  }
}

TEST(Assembler, SingleExpertMixtureEqualsPlainGater) {
  torch::manual_seed(3);
  LayerGater routed(6, 5, 1, true);
  routed->eval();
  const auto sel = torch::randn({4, 6});
  auto& fc = *routed->fcs[0]->as<torch::nn::Linear>();
  auto& bn = *routed->bns[0]->as<torch::nn::BatchNorm1d>();
  const auto expected = (torch::matmul(sel, fc.weight.t()) + fc.bias - bn.running_mean) /
                            torch::sqrt(bn.running_var + 1e-5) * bn.weight + bn.bias;
  EXPECT_LT((routed->forward(sel) - expected).abs().max().item<double>(), 1e-5);
}

TEST(Assembler, ShapesAndDeterminism) {
  const auto layout = gate_layout(tiny_spec());
  AssemblerSpec spec;
  spec.selection_dim = 8;
  auto a = build_assembler(spec, layout, 5);
  auto b = build_assembler(spec, layout, 5);
  const GenerationRequest req{parse_task("has:odd"), 0.1};
  const auto la = generate_logits(a, req);
  ASSERT_EQ(la.size(), layout.size());
  for (std::size_t l = 0; l < layout.size(); ++l) EXPECT_EQ(la[l].size(), static_cast<std::size_t>(layout[l].width));
  EXPECT_EQ(la, generate_logits(b, req));
  EXPECT_EQ(generate_gates(a, req), threshold_logits(la));
  EXPECT_TRUE(a->is_training());
  EXPECT_THROW(a->forward(torch::zeros({1, 3})), ShapeError);
  Assembler none{nullptr};
  EXPECT_THROW(generate_logits(none, req), StateError);
}

TEST(Assembler, ThresholdIsSigmoidHalf) {
  const GateLogits logits{{-0.1F, 0.0F, 0.1F}, {2.0F}};
  const auto g = threshold_logits(logits);
  for (std::size_t l = 0; l < logits.size(); ++l)
    for (std::size_t i = 0; i < logits[l].size(); ++i)
      EXPECT_EQ(g.get(l, i), 1.0 / (1.0 + std::exp(-logits[l][i])) > 0.5);
}

TEST(Similarity, CosineOfBinaryVectors) {
  const GateConfiguration a({{1, 1, 0, 0}});
  const GateConfiguration b({{1, 0, 1, 0}});
  EXPECT_DOUBLE_EQ(gate_similarity(a, b), 0.5);
  EXPECT_DOUBLE_EQ(gate_similarity(a, a), 1.0);
  EXPECT_DOUBLE_EQ(gate_similarity(a, GateConfiguration({{0, 0, 0, 0}})), 0.0);
  EXPECT_THROW(gate_similarity(a, GateConfiguration({{1, 0, 1}})), ShapeError);
}

TEST(GateLoss, WorkedValues) {
  EXPECT_DOUBLE_EQ(gate_loss(0.02, 0.03), 0.0);
  EXPECT_DOUBLE_EQ(gate_loss(0.03, 0.03), 0.0);
  EXPECT_NEAR(gate_loss(0.5, 0.03), 0.2209, 1e-12);
  const auto gates = std::vector<torch::Tensor>{torch::full({6}, 0.5F), torch::full({4}, 0.5F)};
  EXPECT_NEAR(gate_loss(gates, 0.03).item<double>(), 0.2209, 1e-6);
}

TEST(GateLoss, RatioIsGlobalAcrossLayers) {
  // 3 of 4 ones in one layer and 0 of 6 in the other: r = 0.3, not the mean of per-layer ratios.
  const std::vector<torch::Tensor> gates{torch::tensor({1.0F, 1.0F, 1.0F, 0.0F}), torch::zeros({6})};
  EXPECT_NEAR(gate_loss(gates, 0.1).item<double>(), 0.04, 1e-6);
}

TEST(TotalLoss, AddsWeightedGateLoss) {
  const double a = -std::log(std::exp(0.7) - 1.0);  // CE of [a, 0] against class 0 is exactly 0.7
  const auto logits = torch::tensor({{static_cast<float>(a), 0.0F}});
  const auto labels = torch::tensor({0}, torch::kLong);
  auto ones = torch::zeros({100});
  ones.slice(0, 0, 13).fill_(1.0F);  // r = 0.13 -> GL = 0.01 at limit 0.03
  const std::vector<torch::Tensor> gates{ones};
  EXPECT_NEAR(total_loss(logits, labels, gates, 0.03, 100.0).item<double>(), 1.7, 1e-5);
  EXPECT_NEAR(total_loss(logits, labels, gates, 0.03, 0.0).item<double>(), 0.7, 1e-6);
  const auto perfect = torch::tensor({{30.0F, -30.0F}});
  const std::vector<torch::Tensor> low{torch::zeros({10})};
  EXPECT_NEAR(total_loss(perfect, labels, low, 0.03, 100.0).item<double>(), 0.0, 1e-6);
}

TEST(Batches, HomogeneousCompleteAndDeterministic) {
  const auto data = synthesize_dataset(parse_task_list("has:odd,exactly-1:digit2,exactly-4:even"), 10, 4);
  const std::vector<double> pool{0.01, 0.1, 0.5};
  const auto batches = make_batches(data, pool, 4, 9);
  std::multiset<std::size_t> seen;
  std::set<double> limits;
  for (const auto& b : batches) {
    EXPECT_LE(b.samples.size(), 4u);
    EXPECT_NE(std::find(pool.begin(), pool.end(), b.limit), pool.end());
    limits.insert(b.limit);
    for (auto i : b.samples) {
      EXPECT_EQ(data[i].task, b.task);
      seen.insert(i);
    }
  }
  EXPECT_EQ(seen.size(), data.size());
  EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), data.size());
  EXPECT_GT(limits.size(), 1u);
  const auto again = make_batches(data, pool, 4, 9);
  ASSERT_EQ(again.size(), batches.size());
  for (std::size_t i = 0; i < batches.size(); ++i) EXPECT_EQ(again[i].samples, batches[i].samples);
  EXPECT_THROW(make_batches({}, pool, 4, 1), DataError);
}

TEST(TrainingConfig, KeyValueRoundTrip) {
  TrainingConfig c;
  c.optimizer = OptimizerKind::Adam;
  c.limits = {0.05, 0.25};
  c.assembler.mixture = false;
  c.assembler.experts = 1;
  const auto back = TrainingConfig::from_key_values(c.to_key_values());
  EXPECT_EQ(back.optimizer, OptimizerKind::Adam);
  EXPECT_EQ(back.limits, c.limits);
  EXPECT_EQ(back.assembler, c.assembler);
  EXPECT_EQ(TrainingConfig{}.to_key_values().at("training.gate_loss_weight"), "100");
  auto bad = c.to_key_values();
  bad.set("training.limits", "0.1,1.5");
  EXPECT_THROW(TrainingConfig::from_key_values(bad), SpecError);
}

TEST(PipelineConfig, RejectsUnknownKeysAndRoundTrips) {
  const auto kv = KeyValues::parse("seed = 4\nsearch.step = 0.02\ntraining.epochs = 3\n");
  const auto c = PipelineConfig::from_key_values(kv);
  EXPECT_EQ(c.seed, 4u);
  EXPECT_DOUBLE_EQ(c.search.step, 0.02);
  EXPECT_EQ(c.training.epochs, 3);
  EXPECT_EQ(PipelineConfig::from_key_values(c.to_key_values()).to_key_values().to_text(), c.to_key_values().to_text());
  try {
    PipelineConfig::from_key_values(KeyValues::parse("training.epoch = 3\n"));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("training.epoch"), std::string::npos);
  }
}

TEST(Training, RunsSavesAndReloadsBitExactly) {
  const auto data = tiny_dataset(1);
  auto ck = initialize_checkpoint(tiny_spec(), tiny_config());
  int epochs = 0;
  TrainingOptions opts;
  opts.validation = tiny_dataset(2);
  opts.on_epoch = [&](const EpochMetrics& m) {
    ++epochs;
    EXPECT_TRUE(std::isfinite(m.task_loss));
    EXPECT_EQ(m.validation_accuracy.size(), 2u);
  };
  train_joint(ck, data, opts);
  EXPECT_EQ(epochs, 2);
  EXPECT_EQ(ck.epochs_completed, 2);
  EXPECT_EQ(ck.metrics.size(), 2u);
  EXPECT_EQ(ck.vocabulary.size(), 2u);

  const auto dir = temp_dir("checkpoint");
  save_checkpoint(ck, dir);
  auto back = load_checkpoint(dir);
  EXPECT_EQ(back.spec, ck.spec);
  EXPECT_EQ(back.vocabulary, ck.vocabulary);
  EXPECT_EQ(back.metrics, ck.metrics);
  const auto sa = module_state(*ck.supernet);
  const auto sb = module_state(*back.supernet);
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_TRUE(torch::equal(sa[i].second, sb[i].second)) << sa[i].first;
  const auto aa = module_state(*ck.assembler);
  const auto ab = module_state(*back.assembler);
  for (std::size_t i = 0; i < aa.size(); ++i) EXPECT_TRUE(torch::equal(aa[i].second, ab[i].second)) << aa[i].first;
  const auto tasks = parse_task_list("has:digit1,exactly-1:odd");
  const auto e1 = evaluate(ck, tasks, opts.validation, 0.1);
  const auto e2 = evaluate(back, tasks, opts.validation, 0.1);
  for (std::size_t i = 0; i < e1.size(); ++i) EXPECT_EQ(e1[i].accuracy, e2[i].accuracy);

  const auto hash = checkpoint_hash(dir);
  const auto dir2 = temp_dir("checkpoint2");
  save_checkpoint(back, dir2);
  EXPECT_EQ(checkpoint_hash(dir2), hash);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST(Training, IsDeterministicAndResumable) {
  const auto data = tiny_dataset(1);
  auto a = initialize_checkpoint(tiny_spec(), tiny_config());
  auto b = initialize_checkpoint(tiny_spec(), tiny_config());
  train_joint(a, data);
  train_joint(b, data);
  const auto sa = module_state(*a.supernet);
  const auto sb = module_state(*b.supernet);
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_TRUE(torch::equal(sa[i].second, sb[i].second));

  b.config.epochs = 3;
  train_joint(b, data);
  EXPECT_EQ(b.epochs_completed, 3);
  b.config.epochs = 4;
  EXPECT_THROW(train_joint(b, tiny_dataset(1, "has:digit5,has:digit6")), DataError);
}

TEST(Training, DivergenceGuardAborts) {
  auto data = tiny_dataset(1);
  for (auto& s : data) s.image.pixels[0] = std::numeric_limits<float>::quiet_NaN();
  auto ck = initialize_checkpoint(tiny_spec(), tiny_config());
  EXPECT_THROW(train_joint(ck, data), DivergenceError);
}

TEST(Checkpoint, RefusesOtherVersions) {
  auto ck = initialize_checkpoint(tiny_spec(), tiny_config());
  const auto dir = temp_dir("checkpoint_version");
  save_checkpoint(ck, dir);
  auto manifest = KeyValues::load(dir / "manifest.txt");
  manifest.set("version", "99");
  manifest.save(dir / "manifest.txt");
  EXPECT_THROW(load_checkpoint(dir), FormatError);
  std::filesystem::remove_all(dir / "supernet.bin");
  EXPECT_THROW(load_checkpoint(dir), Error);
  std::filesystem::remove_all(dir);
}
