#include "modgen/config.hpp"

#include "modgen/error.hpp"
#include "modgen/text.hpp"

namespace modgen {

namespace {

GlyphSource parse_source(std::string_view text) {
  const auto t = lowercase(trim(text));
  if (t == "procedural") return GlyphSource::Procedural;
  if (t == "external") return GlyphSource::External;
  throw ParseError("unknown glyph source '" + t + "'");
}

const std::set<std::string>& pipeline_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    const auto kv = PipelineConfig{}.to_key_values();
    for (const auto& key : kv.keys()) k.insert(key);
    k.insert("supernet.spec");
    return k;
  }();
  return keys;
}

}  // namespace

PipelineConfig PipelineConfig::from_key_values(const KeyValues& kv) {
  kv.reject_unknown(pipeline_keys());
  PipelineConfig c;
  auto integer = [&](const char* key, auto& field) {
    if (auto v = kv.find(key)) field = static_cast<std::remove_reference_t<decltype(field)>>(parse_integer(*v, key));
  };
  auto number = [&](const char* key, double& field) {
    if (auto v = kv.find(key)) field = parse_number(*v, key);
  };
  integer("seed", c.seed);
  if (auto v = kv.find("output")) c.output = *v;
  if (auto v = kv.find("taskspace.tasks")) c.tasks = *v;
  integer("taskspace.train_task_count", c.train_task_count);
  integer("taskspace.per_task", c.per_task);
  integer("taskspace.validation_per_task", c.validation_per_task);
  if (auto v = kv.find("taskspace.source")) c.source = parse_source(*v);
  if (auto v = kv.find("taskspace.corpus")) c.corpus = *v;
  if (auto v = kv.find("supernet.backbone")) {
    c.supernet = parse_backbone(*v) == Backbone::Conv ? SupernetSpec::conv_default() : SupernetSpec::transformer_default();
  }
  if (auto v = kv.find("supernet.spec"); v && !trim(*v).empty()) c.supernet = SupernetSpec::parse(*v);
  c.training = TrainingConfig::from_key_values(kv);
  integer("profiling.subnets", c.profile_subnets);
  integer("profiling.warmup", c.profile_warmup);
  integer("profiling.repeats", c.profile_repeats);
  number("profiling.min_ratio", c.profile_min_ratio);
  number("profiling.max_ratio", c.profile_max_ratio);
  c.search = SearchConfig::from_key_values(kv);
  if (c.per_task < 2) throw SpecError("taskspace.per_task must be at least 2");
  if (c.train_task_count < 0) throw SpecError("taskspace.train_task_count must be non-negative");
  if (c.profile_subnets < 1) throw SpecError("profiling.subnets must be positive");
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) { return from_key_values(KeyValues::load(path)); }

KeyValues PipelineConfig::to_key_values() const {
  KeyValues kv;
  kv.set("seed", std::to_string(seed));
  kv.set("output", output.string());
  kv.set("taskspace.tasks", tasks);
  kv.set("taskspace.train_task_count", std::to_string(train_task_count));
  kv.set("taskspace.per_task", std::to_string(per_task));
  kv.set("taskspace.validation_per_task", std::to_string(validation_per_task));
  kv.set("taskspace.source", source == GlyphSource::Procedural ? "procedural" : "external");
  kv.set("taskspace.corpus", corpus.string());
  kv.set("supernet.backbone", to_string(supernet.backbone));
  kv.set("supernet.spec", supernet.to_string());
  const auto t = training.to_key_values();
  for (const auto& key : t.keys()) kv.set(key, t.at(key));
  kv.set("profiling.subnets", std::to_string(profile_subnets));
  kv.set("profiling.warmup", std::to_string(profile_warmup));
  kv.set("profiling.repeats", std::to_string(profile_repeats));
  kv.set("profiling.min_ratio", format_double(profile_min_ratio));
  kv.set("profiling.max_ratio", format_double(profile_max_ratio));
  const auto s = search.to_key_values();
  for (const auto& key : s.keys()) kv.set(key, s.at(key));
  return kv;
}

void PipelineConfig::save_snapshot(const std::filesystem::path& path) const { to_key_values().save(path); }

}  // namespace modgen
