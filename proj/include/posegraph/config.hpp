#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace posegraph {

/// Flat "section.key" -> value map. Sorted, so formatting is canonical.
using ConfigMap = std::map<std::string, std::string>;

/// INI text: "[section]" headers, "key = value" lines, '#' or ';' comments.
ConfigMap parse_ini(const std::string& text, const std::string& origin = "<config>");
std::string format_ini(const ConfigMap& config);

/// Applies "section.key=value" overrides.
void apply_override(ConfigMap& config, const std::string& assignment);

std::string format_double(double v);
std::string join(const std::vector<std::string>& parts, char sep);
std::vector<std::string> split(const std::string& text, char sep);

double get_double(const ConfigMap& config, const std::string& key);
int get_int(const ConfigMap& config, const std::string& key);
bool get_bool(const ConfigMap& config, const std::string& key);
const std::string& get_string(const ConfigMap& config, const std::string& key);
std::vector<int> get_int_list(const ConfigMap& config, const std::string& key);
std::vector<double> get_double_list(const ConfigMap& config, const std::string& key);

/// 64-bit FNV-1a of the canonical INI text, as 16 hex digits.
std::string config_hash(const ConfigMap& config);

}  // namespace posegraph
