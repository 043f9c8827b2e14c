#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace safe::io {

// Flat `key=value` text. Blank lines and lines starting with '#' are ignored;
// whitespace around keys and values is trimmed. Later duplicates win.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Syntax-only parse; throws ErrorKind::Config naming the offending line.
KeyValues parse_key_values(std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

enum class ValueType { Int, Real, Bool, String };
using ConfigValue = std::variant<std::int64_t, double, bool, std::string>;

struct KeySpec {
  std::string key;
  ValueType type;
  ConfigValue default_value;
  std::string doc;
};

/// Parses `text` as a value of `type`; throws ErrorKind::TypeMismatch.
ConfigValue parse_value(ValueType type, const std::string& key, const std::string& text);
std::string format_value(const ConfigValue& value);

class RunConfig {
 public:
  RunConfig();

  static const std::vector<KeySpec>& schema();

  void set(const std::string& key, const std::string& value);
  void set_value(const std::string& key, ConfigValue value);
  bool has_key(const std::string& key) const;

  std::int64_t get_int(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  const std::string& get_string(const std::string& key) const;

  /// Every key, sorted, one `key=value` per line; parse_config round-trips it.
  std::string to_text() const;

  bool operator==(const RunConfig&) const = default;

 private:
  const ConfigValue& lookup(const std::string& key, ValueType type) const;

  std::map<std::string, ConfigValue> values_;
};

RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace safe::io
