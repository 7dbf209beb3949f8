#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "modgen/error.hpp"
#include "modgen/taskspace.hpp"

using namespace modgen;

namespace {

// Independent label oracle: counts by hand instead of through subject_matches.
int oracle_label(const std::string& task, const Digits& d) {
  const auto colon = task.find(':');
  const std::string q = task.substr(0, colon);
  const std::string s = task.substr(colon + 1);
  int count = 0;
  for (int v : d) {
    if (s == "odd") count += v % 2 != 0;
    else if (s == "even") count += v % 2 == 0;
    else count += v == (s.back() - '0');
  }
  if (q == "has") return count > 0;
  return count == (q.back() - '0');
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("modgen_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Predicate, SpecExamples) {
  EXPECT_EQ(evaluate_predicate(parse_task("has:digit0"), {0, 3, 5, 7}), 1);
  EXPECT_EQ(evaluate_predicate(parse_task("exactly-2:odd"), {1, 3, 2, 4}), 1);
  EXPECT_EQ(evaluate_predicate(parse_task("exactly-3:digit2"), {2, 2, 2, 2}), 0);
}

TEST(Predicate, MatchesOracleOnEveryQuadruple) {
  for (const auto& task : all_tasks()) {
    const auto name = to_string(task);
    for (int i = 0; i < 10000; i += 7) {
      const Digits d{i / 1000, i / 100 % 10, i / 10 % 10, i % 10};
      ASSERT_EQ(evaluate_predicate(task, d), oracle_label(name, d)) << name << " " << i;
    }
  }
}

TEST(Predicate, RejectsDigitOutOfRange) {
  EXPECT_THROW(evaluate_predicate(parse_task("has:odd"), {1, 2, 3, 10}), std::out_of_range);
}

TEST(TaskGrammar, RoundTripsAllSixtyTasks) {
  const auto tasks = all_tasks();
  ASSERT_EQ(tasks.size(), 60u);
  std::set<std::string> names;
  for (const auto& t : tasks) {
    const auto s = to_string(t);
    EXPECT_EQ(parse_task(s), t);
    names.insert(s);
  }
  EXPECT_EQ(names.size(), 60u);
}

TEST(TaskGrammar, ParseErrorNamesToken) {
  try {
    parse_task("most:digit1");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("most"), std::string::npos);
  }
  EXPECT_THROW(parse_task("has:digit10"), ParseError);
  EXPECT_THROW(parse_task("hasdigit1"), ParseError);
}

TEST(TaskEncoding, OneHotPerGroup) {
  const auto e = encode_task(parse_task("has:digit0"));
  EXPECT_EQ(e[0], 1.0F);
  EXPECT_EQ(e[5], 1.0F);
  std::set<std::vector<float>> seen;
  for (const auto& t : all_tasks()) {
    const auto bits = encode_task(t);
    float sum = 0;
    for (float b : bits) sum += b;
    EXPECT_EQ(sum, 2.0F);
    float qsum = 0;
    for (int i = 0; i < 5; ++i) qsum += bits[static_cast<std::size_t>(i)];
    EXPECT_EQ(qsum, 1.0F);
    seen.insert(std::vector<float>(bits.begin(), bits.end()));
  }
  EXPECT_EQ(seen.size(), 60u);
  const auto e2 = encode_task(parse_task("exactly-2:odd"));
  EXPECT_EQ(e2[2], 1.0F);
  EXPECT_EQ(e2[5 + 10], 1.0F);
}

TEST(LimitEncoding, PositionZeroIsSinCosOrigin) {
  const auto v = encode_limit(0.004);  // rounds to position 0
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v[i], i % 2 == 0 ? 0.0F : 1.0F);
}

TEST(LimitEncoding, MatchesFormulaAndIsInjective) {
  const int dim = 16;
  std::set<std::vector<float>> seen;
  for (int p = 1; p <= 100; ++p) {
    const auto v = encode_limit(p / 100.0, dim);
    for (int i = 0; i < dim / 2; ++i) {
      const double angle = p / std::pow(10000.0, 2.0 * i / dim);
      EXPECT_NEAR(v[2 * i], std::sin(angle), 1e-6);
      EXPECT_NEAR(v[2 * i + 1], std::cos(angle), 1e-6);
    }
    for (float x : v) {
      EXPECT_GE(x, -1.0F);
      EXPECT_LE(x, 1.0F);
    }
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 100u);
  EXPECT_EQ(encode_limit(0.03), encode_limit(0.03));
  EXPECT_NE(encode_limit(0.03), encode_limit(0.05));
}

TEST(LimitEncoding, RejectsOutOfRange) {
  EXPECT_THROW(encode_limit(0.0), std::out_of_range);
  EXPECT_THROW(encode_limit(1.01), std::out_of_range);
  EXPECT_NO_THROW(encode_limit(1.0));
}

TEST(TaskSpace, SplitIsDeterministicAndDisjoint) {
  const auto none = enumerate_task_space(0.0, 5);
  EXPECT_EQ(none.train.size(), 60u);
  EXPECT_TRUE(none.unseen.empty());
  const auto a = enumerate_task_space(0.1, 5);
  const auto b = enumerate_task_space(0.1, 5);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.unseen, b.unseen);
  EXPECT_EQ(a.unseen.size(), 6u);
  std::set<int> all;
  for (const auto& t : a.train) all.insert(t.index());
  for (const auto& t : a.unseen) EXPECT_TRUE(all.insert(t.index()).second);
  EXPECT_EQ(all.size(), 60u);
  EXPECT_THROW(enumerate_task_space(1.0, 5), std::out_of_range);
}

TEST(TaskSpace, CoveringSelectionSpansQuantifiersAndSubjects) {
  const auto split = enumerate_task_space(0.1, 1);
  const auto chosen = select_covering_tasks(split.train, 20, 1);
  ASSERT_EQ(chosen.size(), 20u);
  std::set<int> q, s;
  for (const auto& t : chosen) {
    q.insert(static_cast<int>(t.quantifier));
    s.insert(static_cast<int>(t.subject));
    EXPECT_NE(std::find(split.train.begin(), split.train.end(), t), split.train.end());
  }
  EXPECT_EQ(q.size(), 5u);
  EXPECT_EQ(s.size(), 12u);
}

TEST(Synthesis, BalancedAndOracleConsistent) {
  const auto task = parse_task("has:digit0");
  const TaskDescriptor tasks[] = {task};
  const auto data = synthesize_dataset(tasks, 10, 42);
  ASSERT_EQ(data.size(), 10u);
  int positives = 0;
  for (const auto& s : data) {
    positives += s.label;
    EXPECT_EQ(s.label, oracle_label("has:digit0", s.digits));
    EXPECT_EQ(s.image.height, 56);
    EXPECT_EQ(s.image.width, 56);
    for (float p : s.image.pixels) {
      EXPECT_GE(p, 0.0F);
      EXPECT_LE(p, 1.0F);
    }
  }
  EXPECT_EQ(positives, 5);
}

TEST(Synthesis, OddCountsBalanceWithinOne) {
  const auto tasks = parse_task_list("exactly-1:even,exactly-3:digit7");
  const auto data = synthesize_dataset(tasks, 7, 3);
  for (const auto& t : tasks) {
    int pos = 0, neg = 0;
    for (const auto& s : data) {
      if (s.task == t) (s.label ? pos : neg) += 1;
    }
    EXPECT_EQ(pos + neg, 7);
    EXPECT_LE(std::abs(pos - neg), 1);
  }
}

TEST(Synthesis, ExactlyFourZeroPositivesAreAllZero) {
  const TaskDescriptor tasks[] = {parse_task("exactly-4:digit0")};
  for (const auto& s : synthesize_dataset(tasks, 12, 9)) {
    if (s.label) EXPECT_EQ(s.digits, (Digits{0, 0, 0, 0}));
  }
}

TEST(Synthesis, DeterministicAndPerTaskStreams) {
  const auto both = parse_task_list("has:odd,exactly-2:digit5");
  const auto a = synthesize_dataset(both, 6, 11);
  const auto b = synthesize_dataset(both, 6, 11);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].digits, b[i].digits);
    EXPECT_EQ(a[i].image.pixels, b[i].image.pixels);
  }
  const TaskDescriptor second[] = {both[1]};
  const auto alone = synthesize_dataset(second, 6, 11);
  for (std::size_t i = 0; i < alone.size(); ++i) EXPECT_EQ(alone[i].image.pixels, a[6 + i].image.pixels);
}

TEST(Synthesis, RejectsBadArguments) {
  const TaskDescriptor tasks[] = {parse_task("has:odd")};
  EXPECT_THROW(synthesize_dataset(tasks, 1, 1), DataError);
  EXPECT_THROW(synthesize_dataset({}, 4, 1), DataError);
  EXPECT_THROW(synthesize_dataset(tasks, 4, 1, GlyphSource::External, nullptr), DataError);
}

TEST(Synthesis, ExternalCorpusIngestion) {
  const auto root = temp_dir("corpus");
  EXPECT_THROW(DigitCorpus::load(root), DataError);
  for (int d = 0; d < 10; ++d) {
    std::filesystem::create_directories(root / std::to_string(d));
    Image img{20, 20, std::vector<float>(400, 0.0F)};
    for (int i = 0; i < 20; ++i) img.at(i, d) = 1.0F;  // one bright column per class
    write_pgm(img, root / std::to_string(d) / "a.pgm");
  }
  const auto corpus = DigitCorpus::load(root);
  EXPECT_EQ(corpus.glyphs(3).front().height, kGlyphSize);
  const TaskDescriptor tasks[] = {parse_task("has:digit3")};
  const auto data = synthesize_dataset(tasks, 4, 2, GlyphSource::External, &corpus);
  EXPECT_EQ(data.size(), 4u);
  std::filesystem::remove_all(root);
}

TEST(DatasetIo, RoundTripPreservesSamples) {
  const auto dir = temp_dir("dataset");
  const auto data = synthesize_dataset(parse_task_list("has:digit1,exactly-1:odd"), 4, 8);
  write_dataset(data, dir);
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].task, data[i].task);
    EXPECT_EQ(back[i].digits, data[i].digits);
    EXPECT_EQ(back[i].label, data[i].label);
    for (std::size_t p = 0; p < data[i].image.pixels.size(); ++p) {
      EXPECT_NEAR(back[i].image.pixels[p], data[i].image.pixels[p], 0.5 / 255.0 + 1e-6);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST(Scenario, NeedsABudget) {
  EdgeScenario s;
  EXPECT_THROW(s.validate(), ParseError);
  s.latency_budget_ms = 5.0;
  EXPECT_NO_THROW(s.validate());
  s.latency_budget_ms = -1.0;
  EXPECT_THROW(s.validate(), ParseError);
}
