#include "posegraph/config.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "posegraph/tensor.hpp"

namespace posegraph {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

const std::string& lookup(const ConfigMap& config, const std::string& key) {
  auto it = config.find(key);
  if (it == config.end()) throw Error("missing config key '" + key + "'");
  return it->second;
}

}  // namespace

ConfigMap parse_ini(const std::string& text, const std::string& origin) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw Error(origin + ":" + std::to_string(line_no) + ": bad section");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw Error(origin + ":" + std::to_string(line_no) + ": empty key");
    out[section.empty() ? key : section + "." + key] = trim(t.substr(eq + 1));
  }
  return out;
}

std::string format_ini(const ConfigMap& config) {
  std::string out;
  std::string current = "\x01";
  for (const auto& [full, value] : config) {
    const auto dot = full.find('.');
    const std::string section = dot == std::string::npos ? "" : full.substr(0, dot);
    const std::string key = dot == std::string::npos ? full : full.substr(dot + 1);
    if (section != current) {
      if (!out.empty()) out += "\n";
      if (!section.empty()) out += "[" + section + "]\n";
      current = section;
    }
    out += key + " = " + value + "\n";
  }
  return out;
}

void apply_override(ConfigMap& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error("override '" + assignment + "' is not key=value");
  }
  config[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

std::string format_double(double v) {
  // Shortest representation that reads back to the same double.
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  if (trim(text).empty()) return out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

double get_double(const ConfigMap& config, const std::string& key) {
  const std::string& v = lookup(config, key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::logic_error&) {
  }
  throw Error("config key '" + key + "' expects a number, got '" + v + "'");
}

int get_int(const ConfigMap& config, const std::string& key) {
  const std::string& v = lookup(config, key);
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used == v.size()) return static_cast<int>(i);
  } catch (const std::logic_error&) {
  }
  throw Error("config key '" + key + "' expects an integer, got '" + v + "'");
}

bool get_bool(const ConfigMap& config, const std::string& key) {
  const std::string& v = lookup(config, key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error("config key '" + key + "' expects a boolean, got '" + v + "'");
}

const std::string& get_string(const ConfigMap& config, const std::string& key) {
  return lookup(config, key);
}

std::vector<int> get_int_list(const ConfigMap& config, const std::string& key) {
  std::vector<int> out;
  for (const auto& item : split(lookup(config, key), ',')) {
    ConfigMap tmp{{key, item}};
    out.push_back(get_int(tmp, key));
  }
  return out;
}

std::vector<double> get_double_list(const ConfigMap& config, const std::string& key) {
  std::vector<double> out;
  for (const auto& item : split(lookup(config, key), ',')) {
    ConfigMap tmp{{key, item}};
    out.push_back(get_double(tmp, key));
  }
  return out;
}

std::string config_hash(const ConfigMap& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : format_ini(config)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace posegraph
