#include "modgen/keyvalue.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "modgen/error.hpp"
#include "modgen/text.hpp"

namespace modgen {

double parse_number(std::string_view text, std::string_view what) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ParseError("invalid number '" + t + "' for " + std::string(what));
  }
  return v;
}

long long parse_integer(std::string_view text, std::string_view what) {
  const std::string t = trim(text);
  long long v = 0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ParseError("invalid integer '" + t + "' for " + std::string(what));
  }
  return v;
}

bool parse_bool(std::string_view text, std::string_view what) {
  const std::string t = lowercase(trim(text));
  if (t == "true" || t == "1" || t == "on" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "off" || t == "no") return false;
  throw ParseError("invalid boolean '" + t + "' for " + std::string(what));
}

KeyValues KeyValues::parse(std::string_view text, std::string_view origin) {
  KeyValues kv;
  kv.origin_ = std::string(origin);
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ParseError(std::string(origin) + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ParseError(std::string(origin) + ":" + std::to_string(lineno) + ": empty key");
    if (kv.contains(key)) throw ParseError(std::string(origin) + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv.set(key, trim(std::string_view(t).substr(eq + 1)));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void KeyValues::set(const std::string& key, std::string value) {
  if (!contains(key)) order_.push_back(key);
  values_[key] = std::move(value);
}

std::optional<std::string> KeyValues::find(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

const std::string& KeyValues::at(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw FormatError(origin_ + ": missing key '" + key + "'");
  return it->second;
}

double KeyValues::number(const std::string& key) const { return parse_number(at(key), key); }
long long KeyValues::integer(const std::string& key) const { return parse_integer(at(key), key); }
bool KeyValues::boolean(const std::string& key) const { return parse_bool(at(key), key); }

void KeyValues::reject_unknown(const std::set<std::string>& known) const {
  std::vector<std::string> unknown;
  for (const auto& k : order_) {
    if (!known.count(k)) unknown.push_back(k);
  }
  if (!unknown.empty()) throw ParseError(origin_ + ": unknown key(s): " + join(unknown, ", "));
}

std::string KeyValues::to_text() const {
  std::string out;
  for (const auto& k : order_) out += k + " = " + values_.at(k) + "\n";
  return out;
}

void KeyValues::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << to_text();
}

}  // namespace modgen
