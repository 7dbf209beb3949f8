#include "modgen/taskspace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "modgen/error.hpp"
#include "modgen/rng.hpp"
#include "modgen/text.hpp"

namespace modgen {

namespace {

constexpr std::array<std::string_view, kQuantifierCount> kQuantifierNames = {
    "has", "exactly-1", "exactly-2", "exactly-3", "exactly-4"};

constexpr std::array<std::string_view, kSubjectCount> kSubjectNames = {
    "digit0", "digit1", "digit2", "digit3", "digit4", "digit5",
    "digit6", "digit7", "digit8", "digit9", "odd",    "even"};

// Seven-segment layout; bit order a b c d e f g.
constexpr std::array<std::uint8_t, 10> kSegments = {
    0b1111110, 0b0110000, 0b1101101, 0b1111001, 0b0110011,
    0b1011011, 0b1011111, 0b1110000, 0b1111111, 0b1111011};

constexpr int kGlyphBoxWidth = 12;
constexpr int kGlyphBoxHeight = 20;
constexpr int kStroke = 3;
constexpr int kJitter = 2;
constexpr float kBaseIntensity = 0.85F;
constexpr float kIntensityNoise = 0.15F;

void fill_rect(Image& cell, int top, int left, int height, int width, Rng& rng) {
  for (int r = top; r < top + height; ++r) {
    for (int c = left; c < left + width; ++c) {
      if (r < 0 || c < 0 || r >= cell.height || c >= cell.width) continue;
      const double noise = rng.uniform(-kIntensityNoise, kIntensityNoise);
      cell.at(r, c) = std::clamp(static_cast<float>(kBaseIntensity * (1.0 + noise)), 0.0F, 1.0F);
    }
  }
}

Image procedural_glyph(int digit, Rng& rng) {
  Image cell{kGlyphSize, kGlyphSize, std::vector<float>(kGlyphSize * kGlyphSize, 0.0F)};
  const int left = (kGlyphSize - kGlyphBoxWidth) / 2 + rng.between(-kJitter, kJitter);
  const int top = (kGlyphSize - kGlyphBoxHeight) / 2 + rng.between(-kJitter, kJitter);
  const int half = kGlyphBoxHeight / 2;
  const int mid = top + half - 1;
  const int right = left + kGlyphBoxWidth - kStroke;
  const std::uint8_t mask = kSegments[static_cast<std::size_t>(digit)];
  auto on = [mask](int bit) { return (mask >> (6 - bit)) & 1U; };
  if (on(0)) fill_rect(cell, top, left, kStroke, kGlyphBoxWidth, rng);                            // a
  if (on(1)) fill_rect(cell, top, right, half + 1, kStroke, rng);                                 // b
  if (on(2)) fill_rect(cell, mid, right, half + 1, kStroke, rng);                                 // c
  if (on(3)) fill_rect(cell, top + kGlyphBoxHeight - kStroke, left, kStroke, kGlyphBoxWidth, rng); // d
  if (on(4)) fill_rect(cell, mid, left, half + 1, kStroke, rng);                                  // e
  if (on(5)) fill_rect(cell, top, left, half + 1, kStroke, rng);                                  // f
  if (on(6)) fill_rect(cell, mid, left, kStroke, kGlyphBoxWidth, rng);                            // g
  return cell;
}

Image resize_nearest(const Image& src, int height, int width) {
  if (src.height == height && src.width == width) return src;
  Image out{height, width, std::vector<float>(static_cast<std::size_t>(height) * width)};
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      out.at(r, c) = src.at(r * src.height / height, c * src.width / width);
    }
  }
  return out;
}

Image external_glyph(int digit, Rng& rng, const DigitCorpus& corpus) {
  const auto& pool = corpus.glyphs(digit);
  const Image& src = pool[rng.below(pool.size())];
  const int dr = rng.between(-kJitter, kJitter);
  const int dc = rng.between(-kJitter, kJitter);
  Image cell{kGlyphSize, kGlyphSize, std::vector<float>(kGlyphSize * kGlyphSize, 0.0F)};
  for (int r = 0; r < kGlyphSize; ++r) {
    for (int c = 0; c < kGlyphSize; ++c) {
      const int sr = r - dr;
      const int sc = c - dc;
      if (sr >= 0 && sc >= 0 && sr < kGlyphSize && sc < kGlyphSize) cell.at(r, c) = src.at(sr, sc);
    }
  }
  return cell;
}

std::vector<Digits> all_quadruples() {
  std::vector<Digits> out;
  out.reserve(10000);
  for (int i = 0; i < 10000; ++i) out.push_back({i / 1000, i / 100 % 10, i / 10 % 10, i % 10});
  return out;
}

std::string digits_to_string(const Digits& d) {
  std::string s;
  for (int v : d) s.push_back(static_cast<char>('0' + v));
  return s;
}

}  // namespace

TaskDescriptor TaskDescriptor::from_index(int index) {
  if (index < 0 || index >= kTaskCount) throw std::out_of_range("task index out of range: " + std::to_string(index));
  return {static_cast<Quantifier>(index / kSubjectCount), static_cast<Subject>(index % kSubjectCount)};
}

std::string to_string(Quantifier q) { return std::string(kQuantifierNames[static_cast<std::size_t>(q)]); }
std::string to_string(Subject s) { return std::string(kSubjectNames[static_cast<std::size_t>(s)]); }
std::string to_string(TaskDescriptor task) { return to_string(task.quantifier) + ":" + to_string(task.subject); }

TaskDescriptor parse_task(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) throw ParseError("task '" + std::string(text) + "' lacks ':'");
  const std::string q = lowercase(trim(text.substr(0, colon)));
  const std::string s = lowercase(trim(text.substr(colon + 1)));
  TaskDescriptor task;
  const auto qi = std::find(kQuantifierNames.begin(), kQuantifierNames.end(), q);
  if (qi == kQuantifierNames.end()) throw ParseError("unknown quantifier '" + q + "' in task '" + std::string(text) + "'");
  task.quantifier = static_cast<Quantifier>(qi - kQuantifierNames.begin());
  const auto si = std::find(kSubjectNames.begin(), kSubjectNames.end(), s);
  if (si == kSubjectNames.end()) throw ParseError("unknown subject '" + s + "' in task '" + std::string(text) + "'");
  task.subject = static_cast<Subject>(si - kSubjectNames.begin());
  return task;
}

std::vector<TaskDescriptor> parse_task_list(std::string_view comma_separated) {
  if (trim(comma_separated) == "all") return all_tasks();
  std::vector<TaskDescriptor> out;
  for (const auto& token : split(comma_separated, ',')) {
    if (!trim(token).empty()) out.push_back(parse_task(token));
  }
  if (out.empty()) throw ParseError("empty task list");
  return out;
}

bool subject_matches(Subject subject, int digit) {
  switch (subject) {
    case Subject::Odd:
      return digit % 2 == 1;
    case Subject::Even:
      return digit % 2 == 0;
    default:
      return digit == static_cast<int>(subject);
  }
}

int evaluate_predicate(TaskDescriptor task, const Digits& digits) {
  int count = 0;
  for (int d : digits) {
    if (d < 0 || d > 9) throw std::out_of_range("digit out of range: " + std::to_string(d));
    count += subject_matches(task.subject, d) ? 1 : 0;
  }
  if (task.quantifier == Quantifier::Has) return count >= 1 ? 1 : 0;
  return count == static_cast<int>(task.quantifier) ? 1 : 0;
}

TaskEncoding encode_task(TaskDescriptor task) {
  TaskEncoding bits{};
  bits[static_cast<std::size_t>(task.quantifier)] = 1.0F;
  bits[kQuantifierCount + static_cast<std::size_t>(task.subject)] = 1.0F;
  return bits;
}

int limit_position(double limit) {
  if (!(limit > 0.0 && limit <= 1.0)) {
    throw std::out_of_range("activation limit must lie in (0, 1], got " + format_double(limit));
  }
  return static_cast<int>(std::lround(limit * 100.0));
}

std::vector<float> encode_position(int position, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("positional encoding dimension must be positive and even");
  std::vector<float> values(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim / 2; ++i) {
    const double angle = position / std::pow(10000.0, 2.0 * i / dim);
    values[2 * static_cast<std::size_t>(i)] = static_cast<float>(std::sin(angle));
    values[2 * static_cast<std::size_t>(i) + 1] = static_cast<float>(std::cos(angle));
  }
  return values;
}

std::vector<float> encode_limit(double limit, int dim) { return encode_position(limit_position(limit), dim); }

std::vector<TaskDescriptor> all_tasks() {
  std::vector<TaskDescriptor> out;
  for (int i = 0; i < kTaskCount; ++i) out.push_back(TaskDescriptor::from_index(i));
  return out;
}

TaskSplit enumerate_task_space(double hold_out, std::uint64_t seed) {
  if (!(hold_out >= 0.0 && hold_out < 1.0)) throw std::out_of_range("hold_out must lie in [0, 1)");
  std::vector<int> order(kTaskCount);
  for (int i = 0; i < kTaskCount; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<int>(order));
  const auto unseen_count = static_cast<std::size_t>(std::lround(hold_out * kTaskCount));
  std::vector<int> unseen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(unseen_count));
  std::sort(unseen.begin(), unseen.end());
  TaskSplit split;
  for (int i = 0; i < kTaskCount; ++i) {
    const bool held = std::binary_search(unseen.begin(), unseen.end(), i);
    (held ? split.unseen : split.train).push_back(TaskDescriptor::from_index(i));
  }
  return split;
}

std::vector<TaskDescriptor> select_covering_tasks(std::span<const TaskDescriptor> pool, std::size_t count,
                                                 std::uint64_t seed) {
  if (count > pool.size()) throw std::out_of_range("cannot select more tasks than the pool holds");
  std::vector<TaskDescriptor> order(pool.begin(), pool.end());
  Rng rng(seed);
  rng.shuffle(std::span<TaskDescriptor>(order));
  std::vector<TaskDescriptor> chosen;
  std::vector<bool> taken(order.size(), false);
  std::set<int> quantifiers, subjects;
  // First pass: tasks that bring a quantifier or subject not yet covered.
  for (std::size_t i = 0; i < order.size() && chosen.size() < count; ++i) {
    const int q = static_cast<int>(order[i].quantifier);
    const int s = static_cast<int>(order[i].subject);
    if (!quantifiers.count(q) || !subjects.count(s)) {
      chosen.push_back(order[i]);
      taken[i] = true;
      quantifiers.insert(q);
      subjects.insert(s);
    }
  }
  for (std::size_t i = 0; i < order.size() && chosen.size() < count; ++i) {
    if (!taken[i]) chosen.push_back(order[i]);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

DigitCorpus DigitCorpus::load(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("digit corpus directory not found: " + root.string());
  DigitCorpus corpus;
  for (int d = 0; d < 10; ++d) {
    const fs::path dir = root / std::to_string(d);
    if (!fs::is_directory(dir)) throw DataError("digit corpus lacks class directory " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".pgm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("digit corpus class directory has no .pgm images: " + dir.string());
    for (const auto& f : files) corpus.glyphs_[static_cast<std::size_t>(d)].push_back(resize_nearest(read_pgm(f), kGlyphSize, kGlyphSize));
  }
  return corpus;
}

Image render_digits(const Digits& digits, std::uint64_t seed, GlyphSource source, const DigitCorpus* corpus) {
  if (source == GlyphSource::External && corpus == nullptr) throw DataError("external glyph source requires a digit corpus");
  Rng rng(seed);
  Image image{kImageSize, kImageSize, std::vector<float>(kImageSize * kImageSize, 0.0F)};
  for (int k = 0; k < kDigitsPerImage; ++k) {
    const Image cell = source == GlyphSource::Procedural ? procedural_glyph(digits[static_cast<std::size_t>(k)], rng)
                                                         : external_glyph(digits[static_cast<std::size_t>(k)], rng, *corpus);
    const int r0 = (k / 2) * kGlyphSize;
    const int c0 = (k % 2) * kGlyphSize;
    for (int r = 0; r < kGlyphSize; ++r) {
      for (int c = 0; c < kGlyphSize; ++c) image.at(r0 + r, c0 + c) = cell.at(r, c);
    }
  }
  return image;
}

Dataset synthesize_dataset(std::span<const TaskDescriptor> tasks, int per_task, std::uint64_t seed, GlyphSource source,
                           const DigitCorpus* corpus) {
  if (tasks.empty()) throw DataError("no tasks requested");
  if (per_task < 2) throw DataError("per_task must be at least 2");
  if (source == GlyphSource::External && corpus == nullptr) throw DataError("external glyph source requires a digit corpus");
  static const std::vector<Digits> quadruples = all_quadruples();

  Dataset out;
  out.reserve(tasks.size() * static_cast<std::size_t>(per_task));
  for (const TaskDescriptor task : tasks) {
    std::array<std::vector<const Digits*>, 2> pools;
    for (const auto& q : quadruples) pools[static_cast<std::size_t>(evaluate_predicate(task, q))].push_back(&q);
    if (pools[0].empty() || pools[1].empty()) {
      throw DataError("task " + to_string(task) + " has an unsatisfiable " + (pools[1].empty() ? "positive" : "negative") + " set");
    }
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(task.index())));
    for (int i = 0; i < per_task; ++i) {
      const int label = i % 2 == 0 ? 1 : 0;
      const auto& pool = pools[static_cast<std::size_t>(label)];
      LabeledSample sample;
      sample.digits = *pool[rng.below(pool.size())];
      sample.task = task;
      sample.label = label;
      sample.image = render_digits(sample.digits, rng.next(), source, corpus);
      out.push_back(std::move(sample));
    }
  }
  return out;
}

std::vector<TaskDescriptor> dataset_tasks(const Dataset& dataset) {
  std::vector<TaskDescriptor> out;
  std::set<int> seen;
  for (const auto& s : dataset) {
    if (seen.insert(s.task.index()).second) out.push_back(s.task);
  }
  return out;
}

void write_pgm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::string bytes(image.pixels.size(), '\0');
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    bytes[i] = static_cast<char>(std::lround(std::clamp(image.pixels[i], 0.0F, 1.0F) * 255.0F));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read image " + path.string());
  auto token = [&in, &path]() {
    std::string t;
    while (in >> t) {
      if (t[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return t;
    }
    throw DataError("truncated PGM header in " + path.string());
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P2") throw DataError("not a PGM image: " + path.string());
  Image image;
  int maxval = 0;
  try {
    image.width = std::stoi(token());
    image.height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::logic_error&) {
    throw DataError("malformed PGM header in " + path.string());
  }
  if (image.width <= 0 || image.height <= 0 || maxval <= 0 || maxval > 65535) {
    throw DataError("unsupported PGM geometry in " + path.string());
  }
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
  image.pixels.resize(n);
  if (magic == "P2") {
    for (std::size_t i = 0; i < n; ++i) image.pixels[i] = static_cast<float>(std::stoi(token())) / maxval;
  } else {
    in.get();
    const std::size_t width = maxval > 255 ? 2 : 1;
    std::string bytes(n * width, '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw DataError("truncated PGM data in " + path.string());
    for (std::size_t i = 0; i < n; ++i) {
      unsigned v = static_cast<unsigned char>(bytes[i * width]);
      if (width == 2) v = (v << 8) | static_cast<unsigned char>(bytes[i * 2 + 1]);
      image.pixels[i] = static_cast<float>(v) / static_cast<float>(maxval);
    }
  }
  return image;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  std::map<int, std::vector<const LabeledSample*>> by_task;
  for (const auto& s : dataset) by_task[s.task.index()].push_back(&s);
  std::ofstream index(root / "index.txt");
  if (!index) throw FormatError("cannot write dataset index in " + root.string());
  index << "modgen-dataset 1\n";
  for (const auto& task : dataset_tasks(dataset)) {
    const auto& samples = by_task[task.index()];
    const fs::path dir = root / to_string(task);
    fs::create_directories(dir);
    std::ofstream meta(dir / "samples.tsv");
    meta << "file\tdigits\tlabel\n";
    int positives = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu.pgm", i);
      write_pgm(samples[i]->image, dir / name);
      meta << name << '\t' << digits_to_string(samples[i]->digits) << '\t' << samples[i]->label << '\n';
      positives += samples[i]->label;
    }
    index << to_string(task) << '\t' << samples.size() << '\t' << positives << '\n';
  }
}

Dataset read_dataset(const std::filesystem::path& root) {
  std::ifstream index(root / "index.txt");
  if (!index) throw DataError("dataset index not found in " + root.string());
  std::string line;
  std::getline(index, line);
  if (trim(line) != "modgen-dataset 1") throw FormatError("unsupported dataset index header '" + line + "'");
  Dataset out;
  while (std::getline(index, line)) {
    if (trim(line).empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 3) throw FormatError("malformed dataset index line '" + line + "'");
    const TaskDescriptor task = parse_task(fields[0]);
    const auto dir = root / to_string(task);
    std::ifstream meta(dir / "samples.tsv");
    if (!meta) throw DataError("missing samples.tsv for task " + to_string(task));
    std::getline(meta, line);
    std::size_t count = 0;
    while (std::getline(meta, line)) {
      if (trim(line).empty()) continue;
      const auto f = split(line, '\t');
      if (f.size() != 3 || f[1].size() != kDigitsPerImage) throw FormatError("malformed sample record '" + line + "'");
      LabeledSample s;
      for (int k = 0; k < kDigitsPerImage; ++k) s.digits[static_cast<std::size_t>(k)] = f[1][static_cast<std::size_t>(k)] - '0';
      s.task = task;
      s.label = std::stoi(f[2]);
      s.image = read_pgm(dir / f[0]);
      if (s.label != evaluate_predicate(task, s.digits)) throw FormatError("label disagrees with digits in " + (dir / f[0]).string());
      out.push_back(std::move(s));
      ++count;
    }
    if (count != static_cast<std::size_t>(std::stoul(fields[1]))) throw FormatError("sample count mismatch for task " + fields[0]);
  }
  return out;
}

void EdgeScenario::validate() const {
  if (!latency_budget_ms && !memory_budget_bytes) throw ParseError("an edge scenario needs at least one budget");
  if (latency_budget_ms && !(*latency_budget_ms > 0.0)) throw ParseError("latency budget must be positive");
  if (memory_budget_bytes && *memory_budget_bytes == 0) throw ParseError("memory budget must be positive");
}

}  // namespace modgen
