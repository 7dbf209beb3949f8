#pragma once

// Combinatorial task space over four-digit images: task grammar, task and
// limit encodings, and the synthetic dataset generator.

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace modgen {

enum class Quantifier : std::uint8_t { Has, Exactly1, Exactly2, Exactly3, Exactly4 };

enum class Subject : std::uint8_t {
  Digit0, Digit1, Digit2, Digit3, Digit4,
  Digit5, Digit6, Digit7, Digit8, Digit9,
  Odd, Even
};

inline constexpr int kQuantifierCount = 5;
inline constexpr int kSubjectCount = 12;
inline constexpr int kTaskCount = kQuantifierCount * kSubjectCount;
inline constexpr int kTaskEncodingSize = kQuantifierCount + kSubjectCount;
inline constexpr int kDigitsPerImage = 4;
inline constexpr int kGlyphSize = 28;
inline constexpr int kImageSize = 2 * kGlyphSize;

struct TaskDescriptor {
  Quantifier quantifier = Quantifier::Has;
  Subject subject = Subject::Digit0;

  /// Dense index in [0, kTaskCount), quantifier-major.
  int index() const {
    return static_cast<int>(quantifier) * kSubjectCount + static_cast<int>(subject);
  }
  static TaskDescriptor from_index(int index);

  auto operator<=>(const TaskDescriptor&) const = default;
};

/// Canonical lowercase form, e.g. "has:digit0" or "exactly-2:odd".
std::string to_string(TaskDescriptor task);
std::string to_string(Quantifier q);
std::string to_string(Subject s);

/// Inverse of to_string; throws ParseError naming the bad token.
TaskDescriptor parse_task(std::string_view text);
std::vector<TaskDescriptor> parse_task_list(std::string_view comma_separated);

using Digits = std::array<int, kDigitsPerImage>;

bool subject_matches(Subject subject, int digit);

/// Brute-force label of a task on a digit quadruple.
int evaluate_predicate(TaskDescriptor task, const Digits& digits);

using TaskEncoding = std::array<float, kTaskEncodingSize>;

/// One-hot quantifier bits followed by one-hot subject bits.
TaskEncoding encode_task(TaskDescriptor task);

inline constexpr int kDefaultLimitEncodingSize = 16;

/// Integer percent position used by the limit encoding.
int limit_position(double limit);

/// Sinusoidal positional encoding of an integer position.
std::vector<float> encode_position(int position, int dim = kDefaultLimitEncodingSize);

/// Positional encoding of an activation limit in (0, 1].
std::vector<float> encode_limit(double limit, int dim = kDefaultLimitEncodingSize);

/// All 60 tasks in index order.
std::vector<TaskDescriptor> all_tasks();

struct TaskSplit {
  std::vector<TaskDescriptor> train;
  std::vector<TaskDescriptor> unseen;
};

/// Deterministic split of the task space; round(hold_out * 60) tasks are unseen.
TaskSplit enumerate_task_space(double hold_out, std::uint64_t seed);

/// `count` tasks from `pool`, chosen so that as many quantifiers and subjects
/// as possible appear at least once; the rest are a seeded random fill.
std::vector<TaskDescriptor> select_covering_tasks(std::span<const TaskDescriptor> pool, std::size_t count,
                                                 std::uint64_t seed);

/// Row-major grayscale image with values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  float at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  float& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }
};

struct LabeledSample {
  Image image;
  Digits digits{};
  TaskDescriptor task;
  int label = 0;
};

using Dataset = std::vector<LabeledSample>;

enum class GlyphSource { Procedural, External };

/// Per-class digit images loaded from a directory tree `<root>/<digit>/*.pgm`.
class DigitCorpus {
 public:
  static DigitCorpus load(const std::filesystem::path& root);

  const std::vector<Image>& glyphs(int digit) const { return glyphs_.at(static_cast<std::size_t>(digit)); }

 private:
  std::array<std::vector<Image>, 10> glyphs_;
};

/// Generates per_task samples for each task with labels balanced to within one.
///
/// Digit quadruples are drawn uniformly from the task's positive or negative
/// set, which is the distribution rejection sampling would produce. Each task
/// draws from its own stream, so a task's samples do not depend on which
/// other tasks are requested.
Dataset synthesize_dataset(std::span<const TaskDescriptor> tasks, int per_task, std::uint64_t seed,
                           GlyphSource source = GlyphSource::Procedural,
                           const DigitCorpus* corpus = nullptr);

/// Renders four digits as a 2x2 grid of glyph cells.
Image render_digits(const Digits& digits, std::uint64_t seed, GlyphSource source = GlyphSource::Procedural,
                    const DigitCorpus* corpus = nullptr);

/// Writes one directory per task plus an index file.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset read_dataset(const std::filesystem::path& root);

/// Distinct tasks in first-appearance order.
std::vector<TaskDescriptor> dataset_tasks(const Dataset& dataset);

Image read_pgm(const std::filesystem::path& path);
void write_pgm(const Image& image, const std::filesystem::path& path);

struct EdgeScenario {
  TaskDescriptor task;
  std::optional<double> latency_budget_ms;
  std::optional<std::uint64_t> memory_budget_bytes;

  /// Throws ParseError unless at least one positive budget is present.
  void validate() const;
};

}  // namespace modgen
