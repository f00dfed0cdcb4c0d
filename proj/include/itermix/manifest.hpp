#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "itermix/errors.hpp"

namespace itermix {

// Flat key=value text file: one pair per line, '#' starts a comment, blank
// lines are ignored. Keys keep insertion order so rewritten files diff
// cleanly against their source.
class KeyValueFile {
 public:
  static KeyValueFile parse_file(const std::string& path);
  static KeyValueFile parse_text(const std::string& text, const std::string& origin = "<text>");

  bool has(const std::string& key) const { return kv_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int_or(const std::string& key, long long fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  void set(const std::string& key, std::string value);
  void set_int(const std::string& key, long long v);
  void set_double(const std::string& key, double v);  // round-trip precision

  const std::vector<std::string>& keys() const { return order_; }
  std::string serialize() const;
  void write_file(const std::string& path) const;
  const std::string& origin() const { return origin_; }

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::string> kv_;
  std::string origin_ = "<empty>";
};

std::vector<std::string> split_list(const std::string& s, char sep = ',');
std::string format_double(double v);  // shortest form that round-trips

}  // namespace itermix
