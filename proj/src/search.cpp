#include "modgen/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "modgen/error.hpp"
#include "modgen/text.hpp"
#include "modgen/training.hpp"

namespace modgen {

void SearchConfig::validate() const {
  if (!(start > 0 && start <= max && max <= 1)) throw SpecError("search limits must satisfy 0 < start <= max <= 1");
  if (!(step > 0)) throw SpecError("search field 'step' must be positive");
}

std::vector<double> SearchConfig::grid() const {
  validate();
  std::vector<double> out;
  for (std::size_t i = 0;; ++i) {
    // Rounded so that 0.01 + 2 * 0.01 prints and encodes as 0.03.
    const double limit = std::round((start + static_cast<double>(i) * step) * 1e9) / 1e9;
    if (limit > max + 1e-12) break;
    out.push_back(limit);
  }
  return out;
}

KeyValues SearchConfig::to_key_values() const {
  KeyValues kv;
  kv.set("search.start", format_double(start));
  kv.set("search.step", format_double(step));
  kv.set("search.max", format_double(max));
  kv.set("search.enforce_limit", enforce_limit ? "true" : "false");
  return kv;
}

SearchConfig SearchConfig::from_key_values(const KeyValues& kv) {
  SearchConfig c;
  if (auto v = kv.find("search.start")) c.start = parse_number(*v, "search.start");
  if (auto v = kv.find("search.step")) c.step = parse_number(*v, "search.step");
  if (auto v = kv.find("search.max")) c.max = parse_number(*v, "search.max");
  if (auto v = kv.find("search.enforce_limit")) c.enforce_limit = parse_bool(*v, "search.enforce_limit");
  c.validate();
  return c;
}

double min_feasible_limit(const GateLayout& layout) {
  return static_cast<double>(layout.size()) / static_cast<double>(layout.total_modules());
}

GateConfiguration enforce_limit(const GateLogits& logits, double limit) {
  if (!(limit > 0 && limit <= 1)) throw std::out_of_range("activation limit must be in (0, 1], got " + format_double(limit));
  auto gates = threshold_logits(logits);
  const auto total = gates.total_modules();
  if (gates.activation_ratio() > limit) {
    struct Entry {
      float value;
      std::size_t layer;
      std::size_t index;
    };
    std::vector<Entry> entries;
    entries.reserve(total);
    for (std::size_t l = 0; l < logits.size(); ++l) {
      for (std::size_t i = 0; i < logits[l].size(); ++i) entries.push_back({logits[l][i], l, i});
    }
    const auto keep = static_cast<std::size_t>(std::floor(limit * static_cast<double>(total) + 1e-9));
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.value > b.value; });
    std::vector<std::vector<std::uint8_t>> bits;
    for (const auto& layer : logits) bits.emplace_back(layer.size(), 0);
    for (std::size_t k = 0; k < keep; ++k) bits[entries[k].layer][entries[k].index] = 1;
    gates = GateConfiguration(std::move(bits));
  }
  for (std::size_t l = 0; l < logits.size(); ++l) {
    if (logits[l].empty() || gates.active_count(l) > 0) continue;
    const auto best = std::max_element(logits[l].begin(), logits[l].end()) - logits[l].begin();
    gates.set(l, static_cast<std::size_t>(best), true);
  }
  return gates;
}

std::string SearchResult::trace_text() const {
  std::ostringstream out;
  out << "round\tlimit\tratio\tlatency_ms\tmemory_bytes\tverdict\n";
  for (const auto& r : trace) {
    out << r.round << '\t' << format_double(r.limit) << '\t' << format_double(r.ratio) << '\t'
        << format_double(r.prediction.latency_ms) << '\t' << std::llround(r.prediction.memory_bytes) << '\t'
        << (r.pass ? "pass" : "fail") << '\n';
  }
  return out.str();
}

SearchResult search(const EdgeScenario& scenario, GateSource& source, const PerformancePredictor& predictor,
                    const SearchConfig& config) {
  scenario.validate();
  const auto grid = config.grid();
  auto fits = [&](const Prediction& p) {
    if (scenario.latency_budget_ms && p.latency_ms > *scenario.latency_budget_ms) return false;
    if (scenario.memory_budget_bytes && p.memory_bytes > static_cast<double>(*scenario.memory_budget_bytes)) return false;
    return true;
  };
  SearchResult result;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const GenerationRequest request{scenario.task, grid[i]};
    request.validate();
    const auto logits = source.logits(request);
    const auto gates = config.enforce_limit ? enforce_limit(logits, grid[i]) : threshold_logits(logits);
    SearchRound round;
    round.round = static_cast<int>(i) + 1;
    round.limit = grid[i];
    round.ratio = gates.activation_ratio();
    round.prediction = predict(predictor, gates);
    round.pass = fits(round.prediction);
    result.trace.push_back(round);
    result.rounds = round.round;
    if (!round.pass) {
      if (i == 0) {
        std::ostringstream msg;
        msg << "budgets infeasible: first round (limit " << format_double(grid[i]) << ") predicts "
            << format_double(round.prediction.latency_ms) << " ms and " << std::llround(round.prediction.memory_bytes)
            << " bytes";
        throw BudgetError(msg.str());
      }
      break;
    }
    result.gates = gates;
    result.limit = grid[i];
    result.prediction = round.prediction;
  }
  return result;
}

std::string gates_to_provenance(const GateConfiguration& gates, const GateLayout& layout) {
  gates.check(layout);
  std::vector<std::string> parts;
  for (std::size_t l = 0; l < layout.size(); ++l) {
    std::string bits;
    for (auto b : gates.layer(l)) bits.push_back(b ? '1' : '0');
    parts.push_back(layout[l].id + ":" + bits);
  }
  return join(parts, ";");
}

GateConfiguration gates_from_provenance(std::string_view text, const GateLayout& layout) {
  std::string lines;
  for (const auto& part : split(text, ';')) {
    const auto colon = part.rfind(':');
    if (colon == std::string::npos) throw ParseError("malformed gate provenance '" + part + "'");
    lines += part.substr(0, colon) + " " + part.substr(colon + 1) + "\n";
  }
  return GateConfiguration::parse(lines, layout);
}

GeneratedModel generate_model(const EdgeScenario& scenario, JointCheckpoint& checkpoint,
                              const PerformancePredictor& predictor, const SearchConfig& config,
                              const std::string& checkpoint_id) {
  using clock = std::chrono::steady_clock;
  const auto started = clock::now();
  if (!(predictor.spec == checkpoint.spec)) throw ShapeError("predictor was fitted for a different supernet layout");
  AssemblerGateSource source(checkpoint.assembler);
  GeneratedModel model;
  model.result = search(scenario, source, predictor, config);
  model.artifact = extract_subnet(checkpoint.supernet, model.result.gates);
  model.seconds = std::chrono::duration<double>(clock::now() - started).count();

  auto& p = model.artifact.provenance;
  p.set("source_checkpoint", checkpoint_id);
  p.set("task", to_string(scenario.task));
  p.set("limit", format_double(model.result.limit));
  p.set("activation_ratio", format_double(model.result.gates.activation_ratio()));
  if (scenario.latency_budget_ms) p.set("latency_budget_ms", format_double(*scenario.latency_budget_ms));
  if (scenario.memory_budget_bytes) p.set("memory_budget_bytes", std::to_string(*scenario.memory_budget_bytes));
  p.set("predicted_latency_ms", format_double(model.result.prediction.latency_ms));
  p.set("predicted_memory_bytes", format_double(model.result.prediction.memory_bytes));
  p.set("rounds", std::to_string(model.result.rounds));
  p.set("enforce_limit", config.enforce_limit ? "true" : "false");
  p.set("generation_seconds", format_double(model.seconds));
  p.set("gates", gates_to_provenance(model.result.gates, checkpoint.layout()));
  return model;
}

}  // namespace modgen
