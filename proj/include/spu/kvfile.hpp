// SPDX-License-Identifier: Apache-2.0
//
// "key = value" text files: one pair per line, '#' starts a comment, keys
// keep their file order. Used for plan files, pruning recipes and run configs.
#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace spu {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& msg) : std::runtime_error(msg), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class KeyValueFile {
 public:
  void set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries_)
      if (k == key) {
        v = std::move(value);
        return;
      }
    entries_.emplace_back(key, std::move(value));
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void set(const std::string& key, T value) {
    set(key, format_number(value));
  }

  bool has(const std::string& key) const { return find(key) != nullptr; }
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string get(const std::string& key) const {
    const auto* v = find(key);
    if (!v) throw ConfigError(key, "missing required key '" + key + "'");
    return *v;
  }
  std::string get_or(const std::string& key, const std::string& fallback) const {
    const auto* v = find(key);
    return v ? *v : fallback;
  }
  template <typename T>
  T get_number(const std::string& key) const {
    return parse_number<T>(key, get(key));
  }
  template <typename T>
  T get_number_or(const std::string& key, T fallback) const {
    const auto* v = find(key);
    return v ? parse_number<T>(key, *v) : fallback;
  }

  std::string to_string(const std::string& header = {}) const {
    std::ostringstream os;
    if (!header.empty()) os << "# " << header << '\n';
    for (const auto& [k, v] : entries_) os << k << " = " << v << '\n';
    return os.str();
  }

  static KeyValueFile parse(const std::string& text, const std::string& origin = "<string>") {
    KeyValueFile f;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("", origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      f.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return f;
  }

  static KeyValueFile load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
  }

  void save(const std::filesystem::path& path, const std::string& header = {}) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << to_string(header);
  }

  template <typename T>
  static std::string format_number(T value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, res.ptr);
  }

  template <typename T>
  static T parse_number(const std::string& key, const std::string& text) {
    T out{};
    const char* b = text.data();
    const char* e = b + text.size();
    auto res = std::from_chars(b, e, out);
    if (res.ec != std::errc{} || res.ptr != e)
      throw ConfigError(key, "invalid numeric value '" + text + "' for key '" + key + "'");
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return &v;
    return nullptr;
  }

  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace spu
