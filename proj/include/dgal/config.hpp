#pragma once

// TOML-style experiment configuration: [section] headers, key = value lines,
// '#' comments. Typed accessors record which keys were consumed so a run can
// reject unknown keys with their full path, and the resolved config (defaults
// plus overrides) serializes to a re-parseable file.

#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgal {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Config {
 public:
  static Config parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = strip(line);
      size_t hash = s.find('#');
      if (hash != std::string::npos) s = strip(s.substr(0, hash));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']')
          throw ConfigError("config line " + std::to_string(lineno) + ": malformed section");
        section = strip(s.substr(1, s.size() - 2));
        if (section.empty())
          throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
        continue;
      }
      size_t eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = strip(s.substr(0, eq));
      std::string value = strip(s.substr(eq + 1));
      if (key.empty())
        throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      std::string path = section.empty() ? key : section + "." + key;
      if (c.kv_.count(path))
        throw ConfigError("config: duplicate key '" + path + "'");
      c.kv_[path] = value;
    }
    return c;
  }

  bool has(const std::string& path) const { return kv_.count(path) > 0; }

  std::string get_string(const std::string& path, const std::string& def) const {
    consumed_.insert(path);
    auto it = kv_.find(path);
    if (it == kv_.end()) return def;
    return unquote(it->second, path);
  }

  std::int64_t get_int(const std::string& path, std::int64_t def) const {
    consumed_.insert(path);
    auto it = kv_.find(path);
    if (it == kv_.end()) return def;
    try {
      size_t pos = 0;
      std::int64_t v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw ConfigError("config: '" + path + "' is not an integer: " + it->second);
    }
  }

  double get_double(const std::string& path, double def) const {
    consumed_.insert(path);
    auto it = kv_.find(path);
    if (it == kv_.end()) return def;
    try {
      size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      throw ConfigError("config: '" + path + "' is not a number: " + it->second);
    }
  }

  bool get_bool(const std::string& path, bool def) const {
    consumed_.insert(path);
    auto it = kv_.find(path);
    if (it == kv_.end()) return def;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError("config: '" + path + "' is not a boolean: " + it->second);
  }

  // comma-separated list of bare or quoted strings
  std::vector<std::string> get_list(const std::string& path,
                                    const std::vector<std::string>& def) const {
    consumed_.insert(path);
    auto it = kv_.find(path);
    if (it == kv_.end()) return def;
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(it->second);
    while (std::getline(in, item, ',')) {
      std::string s = strip(item);
      if (!s.empty()) out.push_back(unquote(s, path));
    }
    return out;
  }

  // Set a resolved value (used when writing the effective config of a run).
  void set(const std::string& path, const std::string& value) { kv_[path] = value; }

  // Every key present in the file must have been consumed by a typed getter.
  void reject_unknown_keys() const {
    std::vector<std::string> unknown;
    for (auto& [k, v] : kv_)
      if (!consumed_.count(k)) unknown.push_back(k);
    if (!unknown.empty()) {
      std::string msg = "config: unknown key(s):";
      for (auto& k : unknown) msg += " '" + k + "'";
      throw ConfigError(msg);
    }
  }

  // Sections and keys sorted; values verbatim. Re-parsing yields equal kv.
  std::string serialize() const {
    std::map<std::string, std::map<std::string, std::string>> by_section;
    for (auto& [path, value] : kv_) {
      size_t dot = path.rfind('.');
      std::string section = dot == std::string::npos ? "" : path.substr(0, dot);
      std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
      by_section[section][key] = value;
    }
    std::string out;
    for (auto& [section, keys] : by_section) {
      if (!section.empty()) out += "[" + section + "]\n";
      for (auto& [key, value] : keys) out += key + " = " + value + "\n";
      out += "\n";
    }
    return out;
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  static std::string strip(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static std::string unquote(const std::string& s, const std::string& path) {
    if (s.size() >= 2 && s.front() == '"') {
      if (s.back() != '"') throw ConfigError("config: unterminated string in '" + path + "'");
      return s.substr(1, s.size() - 2);
    }
    return s;
  }

  std::map<std::string, std::string> kv_;
  mutable std::set<std::string> consumed_;
};

}  // namespace dgal
