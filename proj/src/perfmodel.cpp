#include "modgen/perfmodel.hpp"

#include <Eigen/Dense>
#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "modgen/error.hpp"
#include "modgen/keyvalue.hpp"
#include "modgen/rng.hpp"
#include "modgen/text.hpp"

namespace modgen {

std::vector<GateConfiguration> sample_random_gates(const GateLayout& layout, std::size_t count, double min_ratio,
                                                   double max_ratio, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("sample count must be at least 1");
  if (!(min_ratio > 0 && min_ratio <= max_ratio && max_ratio <= 1)) {
    throw std::invalid_argument("ratio range must satisfy 0 < min <= max <= 1");
  }
  const std::size_t total = layout.total_modules();
  const std::size_t layers = layout.size();
  // Flat module index -> (layer, position).
  std::vector<std::pair<std::size_t, std::size_t>> modules;
  for (std::size_t l = 0; l < layers; ++l) {
    for (int i = 0; i < layout[l].width; ++i) modules.emplace_back(l, static_cast<std::size_t>(i));
  }
  Rng rng(seed);
  std::vector<GateConfiguration> out;
  out.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const double ratio = rng.uniform(min_ratio, max_ratio);
    const auto target = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total))),
                                                layers, total);
    GateConfiguration g(layout, false);
    std::vector<std::size_t> rest;
    std::size_t offset = 0;
    for (std::size_t l = 0; l < layers; ++l) {
      const auto width = static_cast<std::size_t>(layout[l].width);
      const auto keep = rng.below(width);
      g.set(l, keep, true);
      for (std::size_t i = 0; i < width; ++i) {
        if (i != keep) rest.push_back(offset + i);
      }
      offset += width;
    }
    // Partial Fisher-Yates: the first (target - layers) entries are a uniform subset.
    const auto extra = target - layers;
    for (std::size_t i = 0; i < extra; ++i) {
      std::swap(rest[i], rest[i + rng.below(rest.size() - i)]);
      const auto [l, pos] = modules[rest[i]];
      g.set(l, pos, true);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// ------------------------------------------------------------------ profiles

void DeviceProfile::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "modgen-profile\t1\tdevice=" << device << "\twarmup=" << warmup << "\trepeats=" << repeats
      << "\tbatch=" << batch << "\tlayout=" << layout_hash << "\tcheckpoint=" << checkpoint_hash
      << "\tspec=" << spec.to_string() << '\n';
  for (const auto& n : notes) out << "# " << n << '\n';
  out << "# skipped=" << skipped << '\n';
  for (const auto& s : samples) {
    out << s.id << '\t';
    for (std::size_t i = 0; i < s.active_counts.size(); ++i) out << (i ? "," : "") << s.active_counts[i];
    out << '\t' << format_double(s.latency_ms) << '\t' << s.memory_bytes << '\n';
  }
}

DeviceProfile DeviceProfile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read profile " + path.string());
  DeviceProfile p;
  std::string line;
  std::getline(in, line);
  const auto header = split(line, '\t');
  if (header.size() < 2 || header[0] != "modgen-profile") throw FormatError(path.string() + " is not a device profile");
  if (header[1] != "1") throw FormatError("profile version " + header[1] + " is not supported");
  for (std::size_t i = 2; i < header.size(); ++i) {
    const auto eq = header[i].find('=');
    if (eq == std::string::npos) throw FormatError("malformed profile header field '" + header[i] + "'");
    const auto key = header[i].substr(0, eq);
    const auto value = header[i].substr(eq + 1);
    if (key == "device") p.device = value;
    else if (key == "warmup") p.warmup = static_cast<int>(parse_integer(value, "warmup"));
    else if (key == "repeats") p.repeats = static_cast<int>(parse_integer(value, "repeats"));
    else if (key == "batch") p.batch = static_cast<int>(parse_integer(value, "batch"));
    else if (key == "layout") p.layout_hash = value;
    else if (key == "checkpoint") p.checkpoint_hash = value;
    else if (key == "spec") p.spec = SupernetSpec::parse(value);
    else throw FormatError("unknown profile header field '" + key + "'");
  }
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    if (line[0] == '#') {
      const auto note = trim(line.substr(1));
      if (note.rfind("skipped=", 0) == 0) p.skipped = static_cast<std::size_t>(parse_integer(note.substr(8), "skipped"));
      else p.notes.push_back(note);
      continue;
    }
    const auto fields = split(line, '\t');
    if (fields.size() != 4) throw FormatError("malformed profile record '" + line + "'");
    ProfilingSample s;
    s.id = fields[0];
    for (const auto& c : split(fields[1], ',')) s.active_counts.push_back(static_cast<int>(parse_integer(c, "active count")));
    s.latency_ms = parse_number(fields[2], "latency_ms");
    s.memory_bytes = static_cast<std::uint64_t>(parse_integer(fields[3], "memory_bytes"));
    p.samples.push_back(std::move(s));
  }
  return p;
}

DeviceProfile profile_subnets(Network& supernet, std::span<const GateConfiguration> gates,
                              const ProfilingOptions& options) {
  using clock = std::chrono::steady_clock;
  if (options.repeats <= 0 || options.warmup < 0) throw std::invalid_argument("profiling needs repeats > 0 and warmup >= 0");
  DeviceProfile profile;
  profile.device = options.device;
  profile.warmup = options.warmup;
  profile.repeats = options.repeats;
  profile.spec = supernet->spec();
  profile.layout_hash = supernet->layout().fingerprint();
  const int threads = torch::get_num_threads();
  torch::set_num_threads(1);
  // Trained weights drive some activations into denormals, whose cost varies
  // with the input and would swamp the per-module signal.
  const bool flushed = at::globalContext().setFlushDenormal(true);
  if (flushed) profile.notes.push_back("denormals flushed to zero");
  // Repeats are spread over interleaved rounds so each subnet is timed at
  // several points in time; the fastest round median is kept.
  const int rounds = std::min(10, options.repeats);
  const int per_round = options.repeats / rounds;
  profile.notes.push_back("batch size 1, single intra-op thread, " + std::to_string(rounds) +
                          " interleaved rounds of " + std::to_string(per_round) +
                          " repeats, min over round medians");
  profile.notes.push_back("memory = analytic parameter bytes + analytic peak activation bytes");
  const auto& spec = profile.spec;
  torch::NoGradGuard no_grad;
  const auto input = torch::rand({1, spec.input_channels, spec.input_height, spec.input_width},
                                 torch::TensorOptions().dtype(torch::kFloat32));
  struct Entry {
    std::size_t index;
    Network subnet;
    double best = std::numeric_limits<double>::infinity();
  };
  std::vector<Entry> entries;
  for (std::size_t n = 0; n < gates.size(); ++n) {
    try {
      entries.push_back({n, instantiate_subnet(extract_subnet(supernet, gates[n]))});
    } catch (const ExtractionError&) {
      ++profile.skipped;
    }
  }
  std::vector<double> times(static_cast<std::size_t>(per_round));
  for (int round = 0; round < rounds; ++round) {
    for (auto& e : entries) {
      const int warm = round == 0 ? options.warmup : 1;
      for (int i = 0; i < warm; ++i) e.subnet->forward(input);
      for (auto& t : times) {
        const auto start = clock::now();
        e.subnet->forward(input);
        t = std::chrono::duration<double, std::milli>(clock::now() - start).count();
      }
      auto mid = times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2);
      std::nth_element(times.begin(), mid, times.end());
      double median = *mid;
      if (times.size() % 2 == 0) median = 0.5 * (median + *std::max_element(times.begin(), mid));
      e.best = std::min(e.best, median);
    }
  }
  for (const auto& e : entries) {
    const auto counts = gates[e.index].active_counts();
    const auto res = count_resources(spec, counts);
    profile.samples.push_back({"g" + std::to_string(e.index), counts, e.best, res.parameter_bytes + res.peak_activation_bytes});
  }
  if (flushed) at::globalContext().setFlushDenormal(false);
  torch::set_num_threads(threads);
  return profile;
}

// ------------------------------------------------------------------- fitting

double LinearModel::evaluate(std::span<const double> features) const {
  if (features.size() != coefficients.size()) throw ShapeError("feature count does not match the model");
  double y = bias;
  for (std::size_t i = 0; i < features.size(); ++i) y += coefficients[i] * features[i];
  return y;
}

namespace {

LinearModel fit_linear_impl(const std::vector<std::vector<double>>& features, std::span<const double> targets,
                            bool drop_constant) {
  const std::size_t n = features.size();
  if (n == 0 || n != targets.size()) throw FitError("regression needs one target per feature row");
  const std::size_t k = features[0].size();
  LinearModel model;
  model.coefficients.assign(k, 0.0);
  model.used.assign(k, 1);
  if (drop_constant) {
    for (std::size_t j = 0; j < k; ++j) {
      bool constant = true;
      for (std::size_t i = 1; i < n && constant; ++i) constant = features[i][j] == features[0][j];
      if (constant) model.used[j] = 0;
    }
  }
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < k; ++j) {
    if (model.used[j]) cols.push_back(j);
  }
  if (drop_constant && cols.empty()) {
    throw FitError("every feature is constant over the profile; profile more varied gate configurations");
  }
  const auto p = cols.size() + 1;
  if (n < p) throw FitError("regression has fewer samples than unknowns; profile more gate configurations");
  Eigen::MatrixXd a(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  Eigen::VectorXd b(static_cast<Eigen::Index>(n));
  // Columns are scaled to unit max so the rank test is scale-free.
  Eigen::VectorXd scale = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(p));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(features[i][cols[c]]));
    scale[static_cast<Eigen::Index>(c)] = m > 0 ? m : 1.0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (features[i].size() != k) throw FitError("feature rows differ in length");
    for (std::size_t c = 0; c < cols.size(); ++c) {
      a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = features[i][cols[c]] / scale[static_cast<Eigen::Index>(c)];
    }
    a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(cols.size())) = 1.0;
    b[static_cast<Eigen::Index>(i)] = targets[i];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  qr.setThreshold(1e-10);
  if (qr.rank() < static_cast<Eigen::Index>(p)) {
    throw FitError("design matrix is rank deficient (rank " + std::to_string(qr.rank()) + " of " + std::to_string(p) +
                   "); profile more varied gate configurations");
  }
  const Eigen::VectorXd x = qr.solve(b);
  for (std::size_t c = 0; c < cols.size(); ++c) {
    model.coefficients[cols[c]] = x[static_cast<Eigen::Index>(c)] / scale[static_cast<Eigen::Index>(c)];
  }
  model.bias = x[static_cast<Eigen::Index>(cols.size())];
  return model;
}

std::vector<double> as_doubles(std::span<const int> v) { return {v.begin(), v.end()}; }

std::string join_doubles(std::span<const double> v) {
  std::vector<std::string> parts;
  for (double d : v) parts.push_back(format_double(d));
  return join(parts, ",");
}

std::vector<double> parse_doubles(const std::string& text, std::string_view what) {
  std::vector<double> out;
  for (const auto& p : split(text, ',')) {
    if (!trim(p).empty()) out.push_back(parse_number(p, what));
  }
  return out;
}

void save_model(KeyValues& kv, const std::string& prefix, const LinearModel& m) {
  kv.set(prefix + ".coefficients", join_doubles(m.coefficients));
  kv.set(prefix + ".bias", format_double(m.bias));
  std::vector<std::string> used;
  for (auto u : m.used) used.push_back(u ? "1" : "0");
  kv.set(prefix + ".used", join(used, ","));
}

LinearModel load_model(const KeyValues& kv, const std::string& prefix) {
  LinearModel m;
  m.coefficients = parse_doubles(kv.at(prefix + ".coefficients"), prefix);
  m.bias = kv.number(prefix + ".bias");
  for (const auto& u : split(kv.at(prefix + ".used"), ',')) {
    if (!trim(u).empty()) m.used.push_back(parse_bool(u, prefix + ".used") ? 1 : 0);
  }
  if (m.used.size() != m.coefficients.size()) throw FormatError("predictor " + prefix + " arrays differ in length");
  return m;
}

}  // namespace

LinearModel fit_linear(const std::vector<std::vector<double>>& features, std::span<const double> targets) {
  return fit_linear_impl(features, targets, false);
}

double one_minus_mape(std::span<const double> predictions, std::span<const double> truth) {
  if (predictions.size() != truth.size() || truth.empty()) throw std::invalid_argument("MAPE needs equal, nonempty inputs");
  double sum = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) sum += std::abs(predictions[i] - truth[i]) / std::abs(truth[i]);
  return 1.0 - sum / static_cast<double>(truth.size());
}

std::vector<double> memory_features(const SupernetSpec& spec, std::span<const int> active_counts) {
  const auto r = count_resources(spec, active_counts);
  return {static_cast<double>(r.parameter_bytes), static_cast<double>(r.peak_activation_bytes)};
}

PerformancePredictor fit_predictor(const DeviceProfile& profile, double holdout, std::uint64_t seed) {
  constexpr std::size_t kMinSamples = 50;
  if (profile.samples.size() < kMinSamples) {
    throw FitError("fitting needs at least " + std::to_string(kMinSamples) + " profiled samples, got " +
                   std::to_string(profile.samples.size()));
  }
  if (!(holdout > 0 && holdout < 1)) throw std::invalid_argument("holdout fraction must be in (0, 1)");
  const auto layers = gate_layout(profile.spec).size();
  for (const auto& s : profile.samples) {
    if (s.active_counts.size() != layers) throw ShapeError("profile sample " + s.id + " does not match the layout");
  }
  std::vector<std::size_t> order(profile.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span(order));
  const auto n_hold = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(holdout * static_cast<double>(order.size()))));
  const auto n_train = order.size() - n_hold;

  std::vector<std::vector<double>> lat_x, mem_x;
  std::vector<double> lat_y, mem_y;
  for (std::size_t i = 0; i < n_train; ++i) {
    const auto& s = profile.samples[order[i]];
    lat_x.push_back(as_doubles(s.active_counts));
    lat_y.push_back(s.latency_ms);
    mem_x.push_back(memory_features(profile.spec, s.active_counts));
    mem_y.push_back(static_cast<double>(s.memory_bytes));
  }
  PerformancePredictor p;
  p.spec = profile.spec;
  p.layout_hash = profile.layout_hash;
  p.checkpoint_hash = profile.checkpoint_hash;
  p.latency = fit_linear_impl(lat_x, lat_y, false);
  p.memory = fit_linear_impl(mem_x, mem_y, true);
  p.train_samples = n_train;
  p.holdout_samples = n_hold;

  std::vector<double> lat_pred, lat_true, mem_pred, mem_true;
  for (std::size_t i = n_train; i < order.size(); ++i) {
    const auto& s = profile.samples[order[i]];
    const auto pred = predict(p, s.active_counts);
    lat_pred.push_back(pred.latency_ms);
    lat_true.push_back(s.latency_ms);
    mem_pred.push_back(pred.memory_bytes);
    mem_true.push_back(static_cast<double>(s.memory_bytes));
  }
  p.latency_accuracy = one_minus_mape(lat_pred, lat_true);
  p.memory_accuracy = one_minus_mape(mem_pred, mem_true);
  return p;
}

Prediction predict(const PerformancePredictor& predictor, std::span<const int> active_counts) {
  if (active_counts.size() != predictor.latency.coefficients.size()) {
    throw ShapeError("gate layout does not match the predictor (" + std::to_string(active_counts.size()) + " layers vs " +
                     std::to_string(predictor.latency.coefficients.size()) + ")");
  }
  const auto counts = as_doubles(active_counts);
  const auto mem = memory_features(predictor.spec, active_counts);
  return {std::max(0.0, predictor.latency.evaluate(counts)), std::max(0.0, predictor.memory.evaluate(mem))};
}

Prediction predict(const PerformancePredictor& predictor, const GateConfiguration& gates) {
  gates.check(gate_layout(predictor.spec));
  const auto counts = gates.active_counts();
  return predict(predictor, counts);
}

void PerformancePredictor::save(const std::filesystem::path& path) const {
  KeyValues kv;
  kv.set("format", "modgen-predictor");
  kv.set("version", "1");
  kv.set("spec", spec.to_string());
  kv.set("layout_hash", layout_hash);
  kv.set("checkpoint_hash", checkpoint_hash);
  save_model(kv, "latency", latency);
  save_model(kv, "memory", memory);
  kv.set("latency_accuracy", format_double(latency_accuracy));
  kv.set("memory_accuracy", format_double(memory_accuracy));
  kv.set("train_samples", std::to_string(train_samples));
  kv.set("holdout_samples", std::to_string(holdout_samples));
  kv.save(path);
}

PerformancePredictor PerformancePredictor::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("predictor file not found: " + path.string());
  const auto kv = KeyValues::load(path);
  if (kv.at("format") != "modgen-predictor") throw FormatError(path.string() + " is not a predictor file");
  if (kv.at("version") != "1") throw FormatError("predictor version " + kv.at("version") + " is not supported");
  PerformancePredictor p;
  p.spec = SupernetSpec::parse(kv.at("spec"));
  p.layout_hash = kv.at("layout_hash");
  p.checkpoint_hash = kv.at("checkpoint_hash");
  p.latency = load_model(kv, "latency");
  p.memory = load_model(kv, "memory");
  if (p.memory.coefficients.size() != 2) throw FormatError("predictor memory model needs 2 coefficients");
  p.latency_accuracy = kv.number("latency_accuracy");
  p.memory_accuracy = kv.number("memory_accuracy");
  p.train_samples = static_cast<std::size_t>(kv.integer("train_samples"));
  p.holdout_samples = static_cast<std::size_t>(kv.integer("holdout_samples"));
  if (p.latency.coefficients.size() != gate_layout(p.spec).size()) throw FormatError("predictor latency model does not match its spec");
  return p;
}

}  // namespace modgen
