// modgen command-line front end: synth, train, profile, fit-predictor,
// generate, eval.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "modgen/config.hpp"
#include "modgen/error.hpp"
#include "modgen/perfmodel.hpp"
#include "modgen/rng.hpp"
#include "modgen/search.hpp"
#include "modgen/taskspace.hpp"
#include "modgen/text.hpp"
#include "modgen/training.hpp"

namespace fs = std::filesystem;
using namespace modgen;

namespace {

constexpr int kUsageError = 2;
constexpr double kBytesPerMb = 1024.0 * 1024.0;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

PipelineConfig load_config(const std::string& path) {
  return path.empty() ? PipelineConfig{} : PipelineConfig::load(path);
}

void write_snapshot(const PipelineConfig& config, const std::string& command, const KeyValues& flags,
                    const fs::path& path) {
  KeyValues kv;
  kv.set("command", command);
  for (const auto& key : flags.keys()) kv.set("flag." + key, flags.at(key));
  const auto c = config.to_key_values();
  for (const auto& key : c.keys()) kv.set(key, c.at(key));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  kv.save(path);
}

std::string fmt(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string tasks = "all";
  int per_task = 500;
  std::uint64_t seed = 1;
  std::string source = "procedural";
  std::string corpus;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  const auto tasks = parse_task_list(a.tasks);
  std::optional<DigitCorpus> corpus;
  GlyphSource source = GlyphSource::Procedural;
  if (lowercase(a.source) == "external") {
    if (a.corpus.empty()) throw UsageError("--source external requires --corpus");
    corpus = DigitCorpus::load(a.corpus);
    source = GlyphSource::External;
  } else if (lowercase(a.source) != "procedural") {
    throw UsageError("--source must be procedural or external");
  }
  const auto dataset = synthesize_dataset(tasks, a.per_task, a.seed, source, corpus ? &*corpus : nullptr);
  write_dataset(dataset, a.out);
  PipelineConfig config;
  config.seed = a.seed;
  config.tasks = a.tasks;
  config.per_task = a.per_task;
  config.source = source;
  config.corpus = a.corpus;
  KeyValues flags;
  flags.set("out", a.out);
  write_snapshot(config, "synth", flags, fs::path(a.out) / "effective_config.txt");
  std::cout << "wrote " << dataset.size() << " samples for " << tasks.size() << " tasks to " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string data;
  std::string validation;
  std::string out;
  std::string resume;
};

int run_train(const TrainArgs& a) {
  const auto config = load_config(a.config);
  const auto dataset = read_dataset(a.data);
  Dataset validation;
  if (!a.validation.empty()) validation = read_dataset(a.validation);

  JointCheckpoint checkpoint;
  if (!a.resume.empty()) {
    checkpoint = load_checkpoint(a.resume);
    if (!(checkpoint.spec == config.supernet)) throw SpecError("resumed checkpoint was trained with a different supernet spec");
    const int completed = checkpoint.epochs_completed;
    checkpoint.config = config.training;
    checkpoint.epochs_completed = completed;
    std::cout << "resuming after epoch " << completed << '\n';
  } else {
    checkpoint = initialize_checkpoint(config.supernet, config.training);
  }
  KeyValues flags;
  flags.set("data", a.data);
  flags.set("validation", a.validation);
  flags.set("out", a.out);
  flags.set("resume", a.resume);
  write_snapshot(config, "train", flags, fs::path(a.out) / "effective_config.txt");

  TrainingOptions options;
  options.validation = std::move(validation);
  options.on_epoch = [&](const EpochMetrics& m) {
    double acc = 0;
    for (const auto& [task, v] : m.validation_accuracy) acc += v;
    std::cout << "epoch " << m.epoch << " TL " << fmt(m.task_loss) << " GL " << fmt(m.gate_loss, 6);
    for (const auto& [limit, ratio] : m.ratio_by_limit) std::cout << " r@" << format_double(limit) << ' ' << fmt(ratio, 3);
    if (!m.validation_accuracy.empty()) {
      std::cout << " val_acc " << fmt(acc / static_cast<double>(m.validation_accuracy.size()));
    }
    std::cout << " (" << fmt(m.seconds, 1) << " s)" << std::endl;
    save_checkpoint(checkpoint, a.out);
  };
  train_joint(checkpoint, dataset, options);
  save_checkpoint(checkpoint, a.out);
  std::cout << "checkpoint " << checkpoint_hash(a.out) << " written to " << a.out << '\n';
  return 0;
}

// -------------------------------------------------------------- profile

struct ProfileArgs {
  std::string config;
  std::string ckpt;
  int subnets = 500;
  std::uint64_t seed = 1;
  std::string out;
  std::optional<int> warmup;
  std::optional<int> repeats;
  std::string device = "host";
};

int run_profile(const ProfileArgs& a) {
  auto config = load_config(a.config);
  config.profile_subnets = a.subnets;
  if (a.warmup) config.profile_warmup = *a.warmup;
  if (a.repeats) config.profile_repeats = *a.repeats;
  auto checkpoint = load_checkpoint(a.ckpt);
  const auto gates = sample_random_gates(checkpoint.layout(), static_cast<std::size_t>(config.profile_subnets),
                                         config.profile_min_ratio, config.profile_max_ratio, a.seed);
  ProfilingOptions options;
  options.warmup = config.profile_warmup;
  options.repeats = config.profile_repeats;
  options.device = a.device;
  auto profile = profile_subnets(checkpoint.supernet, gates, options);
  profile.checkpoint_hash = checkpoint_hash(a.ckpt);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  profile.save(a.out);
  KeyValues flags;
  flags.set("ckpt", a.ckpt);
  flags.set("seed", std::to_string(a.seed));
  flags.set("out", a.out);
  flags.set("device", a.device);
  write_snapshot(config, "profile", flags, a.out + ".config.txt");
  std::cout << "profiled " << profile.samples.size() << " subnets (" << profile.skipped << " skipped) -> " << a.out << '\n';
  return 0;
}

// -------------------------------------------------------- fit-predictor

struct FitArgs {
  std::string profile;
  std::string out;
  double holdout = 0.2;
  std::uint64_t seed = 1;
};

int run_fit(const FitArgs& a) {
  const auto profile = DeviceProfile::load(a.profile);
  const auto predictor = fit_predictor(profile, a.holdout, a.seed);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  predictor.save(a.out);
  KeyValues flags;
  flags.set("profile", a.profile);
  flags.set("holdout", format_double(a.holdout));
  flags.set("seed", std::to_string(a.seed));
  flags.set("out", a.out);
  write_snapshot(PipelineConfig{}, "fit-predictor", flags, a.out + ".config.txt");
  std::cout << "latency 1-MAPE " << fmt(predictor.latency_accuracy) << '\n'
            << "memory 1-MAPE " << fmt(predictor.memory_accuracy) << '\n'
            << "fitted on " << predictor.train_samples << " samples, scored on " << predictor.holdout_samples << '\n';
  return 0;
}

// ------------------------------------------------------------- generate

struct GenerateArgs {
  std::string config;
  std::string ckpt;
  std::string perf;
  std::string task;
  std::optional<double> lat_budget_ms;
  std::optional<double> mem_budget_mb;
  std::string out;
  bool no_enforce = false;
};

int run_generate(const GenerateArgs& a) {
  using clock = std::chrono::steady_clock;
  const auto started = clock::now();
  if (!a.lat_budget_ms && !a.mem_budget_mb) throw UsageError("at least one budget is required (--lat-budget-ms or --mem-budget-mb)");
  auto config = load_config(a.config);
  if (a.no_enforce) config.search.enforce_limit = false;
  EdgeScenario scenario;
  scenario.task = parse_task(a.task);
  scenario.latency_budget_ms = a.lat_budget_ms;
  if (a.mem_budget_mb) scenario.memory_budget_bytes = static_cast<std::uint64_t>(*a.mem_budget_mb * kBytesPerMb);
  scenario.validate();

  const auto predictor = PerformancePredictor::load(a.perf);
  const auto ckpt_hash = checkpoint_hash(a.ckpt);
  if (!predictor.checkpoint_hash.empty() && predictor.checkpoint_hash != ckpt_hash) {
    throw FormatError("predictor was profiled on checkpoint " + predictor.checkpoint_hash + ", not " + ckpt_hash);
  }
  auto checkpoint = load_checkpoint(a.ckpt);
  auto model = generate_model(scenario, checkpoint, predictor, config.search, ckpt_hash);
  save_subnet(model.artifact, a.out);
  model.result.gates.save(fs::path(a.out) / "gates.txt", checkpoint.layout());
  {
    std::ofstream trace(fs::path(a.out) / "trace.tsv");
    trace << model.result.trace_text();
  }
  KeyValues flags;
  flags.set("ckpt", a.ckpt);
  flags.set("perf", a.perf);
  flags.set("task", a.task);
  if (a.lat_budget_ms) flags.set("lat_budget_ms", format_double(*a.lat_budget_ms));
  if (a.mem_budget_mb) flags.set("mem_budget_mb", format_double(*a.mem_budget_mb));
  flags.set("out", a.out);
  write_snapshot(config, "generate", flags, fs::path(a.out) / "effective_config.txt");
  const double wall = std::chrono::duration<double>(clock::now() - started).count();

  std::cout << model.result.trace_text();
  std::cout << "rounds " << model.result.rounds << '\n'
            << "limit " << format_double(model.result.limit) << " ratio " << fmt(model.result.gates.activation_ratio())
            << " predicted_latency_ms " << fmt(model.result.prediction.latency_ms) << " predicted_memory_bytes "
            << std::llround(model.result.prediction.memory_bytes) << '\n'
            << "wall_seconds " << fmt(wall, 3) << '\n'
            << "artifact " << a.out << '\n';
  return 0;
}

// ----------------------------------------------------------------- eval

struct EvalArgs {
  std::string ckpt;
  std::string subnet;
  std::string tasks;
  std::string data;
  double limit = 0.10;
};

int run_eval(const EvalArgs& a) {
  if (a.ckpt.empty() == a.subnet.empty()) throw UsageError("give exactly one of --ckpt or --subnet");
  const auto dataset = read_dataset(a.data);
  std::vector<TaskDescriptor> tasks = a.tasks.empty() ? dataset_tasks(dataset) : parse_task_list(a.tasks);
  std::cout << "task\taccuracy\tactivation_ratio\tsamples\n";
  double sum = 0;
  if (!a.ckpt.empty()) {
    auto checkpoint = load_checkpoint(a.ckpt);
    const auto scores = evaluate(checkpoint, tasks, dataset, a.limit);
    double ratio = 0;
    for (const auto& s : scores) {
      std::cout << to_string(s.task) << '\t' << fmt(s.accuracy) << '\t' << fmt(s.activation_ratio) << '\t' << s.samples << '\n';
      sum += s.accuracy;
      ratio += s.activation_ratio;
    }
    const auto n = static_cast<double>(std::max<std::size_t>(1, scores.size()));
    std::cout << "mean\t" << fmt(sum / n) << '\t' << fmt(ratio / n) << '\t' << dataset.size() << '\n';
    return 0;
  }
  const auto artifact = load_subnet(a.subnet);
  auto net = instantiate_subnet(artifact);
  if (a.tasks.empty()) {
    if (auto t = artifact.provenance.find("task")) tasks = {parse_task(*t)};
  }
  const double ratio = artifact.gates().activation_ratio();
  for (const auto& task : tasks) {
    const double acc = evaluate_subnet(net, dataset, task);
    std::cout << to_string(task) << '\t' << fmt(acc) << '\t' << fmt(ratio) << '\t' << '-' << '\n';
    sum += acc;
  }
  std::cout << "mean\t" << fmt(sum / static_cast<double>(std::max<std::size_t>(1, tasks.size()))) << '\t' << fmt(ratio)
            << "\t-\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate budget-constrained subnets for combinatorial digit tasks"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Synthesize a four-digit task dataset");
  synth_cmd->add_option("--tasks", synth.tasks, "Comma-separated tasks or 'all'");
  synth_cmd->add_option("--per-task", synth.per_task, "Samples per task")->check(CLI::Range(2, 1000000));
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");
  synth_cmd->add_option("--source", synth.source, "procedural or external");
  synth_cmd->add_option("--corpus", synth.corpus, "Digit image tree <dir>/<digit>/*.pgm for --source external");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Jointly train the supernet and assembler");
  train_cmd->add_option("--config", train.config, "Pipeline config file");
  train_cmd->add_option("--data", train.data, "Training dataset directory")->required();
  train_cmd->add_option("--validation", train.validation, "Validation dataset directory");
  train_cmd->add_option("--out", train.out, "Checkpoint directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");

  ProfileArgs profile;
  auto* profile_cmd = app.add_subcommand("profile", "Time random subnets of a checkpoint on this host");
  profile_cmd->add_option("--config", profile.config, "Pipeline config file");
  profile_cmd->add_option("--ckpt", profile.ckpt, "Checkpoint directory")->required();
  profile_cmd->add_option("--subnets", profile.subnets, "Number of random subnets")->check(CLI::PositiveNumber);
  profile_cmd->add_option("--seed", profile.seed, "Gate sampling seed");
  profile_cmd->add_option("--warmup", profile.warmup, "Warmup forwards per subnet");
  profile_cmd->add_option("--repeats", profile.repeats, "Timed forwards per subnet");
  profile_cmd->add_option("--device", profile.device, "Device label recorded in the profile");
  profile_cmd->add_option("--out", profile.out, "Profile file")->required();

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit-predictor", "Fit the latency and memory predictor");
  fit_cmd->add_option("--profile", fit.profile, "Device profile file")->required();
  fit_cmd->add_option("--holdout", fit.holdout, "Held-out fraction")->check(CLI::Range(0.01, 0.99));
  fit_cmd->add_option("--seed", fit.seed, "Split seed");
  fit_cmd->add_option("--out", fit.out, "Predictor file")->required();

  GenerateArgs gen;
  auto* gen_cmd = app.add_subcommand("generate", "Search and export a subnet for an edge scenario");
  gen_cmd->add_option("--config", gen.config, "Pipeline config file (search section)");
  gen_cmd->add_option("--ckpt", gen.ckpt, "Checkpoint directory")->required();
  gen_cmd->add_option("--perf", gen.perf, "Predictor file")->required();
  gen_cmd->add_option("--task", gen.task, "Task, e.g. has:digit0")->required();
  gen_cmd->add_option("--lat-budget-ms", gen.lat_budget_ms, "Latency budget in milliseconds")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--mem-budget-mb", gen.mem_budget_mb, "Memory budget in MiB")->check(CLI::PositiveNumber);
  gen_cmd->add_flag("--no-enforce", gen.no_enforce, "Use raw assembler gates without limit enforcement");
  gen_cmd->add_option("--out", gen.out, "Artifact directory")->required();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Report per-task accuracy and activation ratio");
  eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint directory");
  eval_cmd->add_option("--subnet", eval.subnet, "Subnet artifact directory");
  eval_cmd->add_option("--tasks,--task", eval.tasks, "Tasks to evaluate (default: all in the data)");
  eval_cmd->add_option("--data", eval.data, "Test dataset directory")->required();
  eval_cmd->add_option("--limit", eval.limit, "Activation limit for --ckpt")->check(CLI::Range(0.0, 1.0));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*train_cmd) return run_train(train);
    if (*profile_cmd) return run_profile(profile);
    if (*fit_cmd) return run_fit(fit);
    if (*gen_cmd) return run_generate(gen);
    if (*eval_cmd) return run_eval(eval);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kUsageError;
}
