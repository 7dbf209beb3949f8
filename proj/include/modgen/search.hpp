#pragma once

// Budgeted limit sweep over assembler outputs, importance-based limit
// enforcement, and the end-to-end model generation pipeline.

#include <optional>
#include <string>
#include <vector>

#include "modgen/assembler.hpp"
#include "modgen/keyvalue.hpp"
#include "modgen/perfmodel.hpp"
#include "modgen/supernet.hpp"
#include "modgen/taskspace.hpp"

namespace modgen {

struct JointCheckpoint;

struct SearchConfig {
  double start = 0.01;
  double step = 0.01;
  double max = 1.0;
  bool enforce_limit = true;

  void validate() const;
  /// Limits visited by the sweep: start + i * step while <= max.
  std::vector<double> grid() const;

  KeyValues to_key_values() const;
  static SearchConfig from_key_values(const KeyValues& kv);
};

/// Smallest limit whose top-k cap leaves one module per layer.
double min_feasible_limit(const GateLayout& layout);

/// Thresholds the logits. When the ratio exceeds `limit`, keeps only the
/// global top floor(limit * N) logits (ties go to the lower layer, then the
/// lower index). Every layer left without an active module then gets its
/// largest-logit module, so the ratio is at most limit + layers / N.
GateConfiguration enforce_limit(const GateLogits& logits, double limit);

/// Where the sweep gets per-request logits from.
class GateSource {
 public:
  virtual ~GateSource() = default;
  virtual GateLogits logits(const GenerationRequest& request) = 0;
};

class AssemblerGateSource : public GateSource {
 public:
  explicit AssemblerGateSource(Assembler assembler) : assembler_(std::move(assembler)) {}
  GateLogits logits(const GenerationRequest& request) override { return generate_logits(assembler_, request); }

 private:
  Assembler assembler_;
};

struct SearchRound {
  int round = 0;
  double limit = 0;
  double ratio = 0;
  Prediction prediction;
  bool pass = false;
};

struct SearchResult {
  GateConfiguration gates;
  double limit = 0;
  Prediction prediction;
  int rounds = 0;
  std::vector<SearchRound> trace;

  /// One line per round: round, limit, ratio, latency, memory, verdict.
  std::string trace_text() const;
};

/// Sweeps the grid upward and stops at the first round that breaks a budget,
/// returning the last passing configuration. Throws BudgetError when the
/// first round already fails.
SearchResult search(const EdgeScenario& scenario, GateSource& source, const PerformancePredictor& predictor,
                    const SearchConfig& config);

struct GeneratedModel {
  SubnetArtifact artifact;
  SearchResult result;
  double seconds = 0;
};

/// Search followed by extraction. `checkpoint_id` is recorded in the provenance.
GeneratedModel generate_model(const EdgeScenario& scenario, JointCheckpoint& checkpoint,
                              const PerformancePredictor& predictor, const SearchConfig& config,
                              const std::string& checkpoint_id);

/// "id:bits;id:bits" in layout order.
std::string gates_to_provenance(const GateConfiguration& gates, const GateLayout& layout);
GateConfiguration gates_from_provenance(std::string_view text, const GateLayout& layout);

}  // namespace modgen
