#pragma once

// Flat "key = value" text records with '#' comments, used for configs,
// manifests, and provenance files.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace modgen {

class KeyValues {
 public:
  static KeyValues parse(std::string_view text, std::string_view origin = "<text>");
  static KeyValues load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value);
  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> find(const std::string& key) const;

  /// Throws FormatError when the key is absent.
  const std::string& at(const std::string& key) const;

  double number(const std::string& key) const;
  long long integer(const std::string& key) const;
  bool boolean(const std::string& key) const;

  /// Throws ParseError naming every key outside `known`.
  void reject_unknown(const std::set<std::string>& known) const;

  /// Keys in insertion order.
  const std::vector<std::string>& keys() const { return order_; }

  std::string to_text() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
  std::string origin_ = "<text>";
};

double parse_number(std::string_view text, std::string_view what);
long long parse_integer(std::string_view text, std::string_view what);
bool parse_bool(std::string_view text, std::string_view what);

}  // namespace modgen
