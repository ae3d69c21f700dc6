#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "posegraph/tensor.hpp"

// Parameter file layout (all integers little-endian uint32):
//
//   "PGNN" | version | tensor count | meta length | meta bytes
//   per tensor: name length | name bytes | channels | height | width |
//               channels*height*width little-endian IEEE-754 doubles
//
// `meta` is free-form text (an INI block with the model configuration for
// model files, empty for heat-map caches).

namespace posegraph {

inline constexpr std::uint32_t kParamFileVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct ParamFile {
  std::string meta;
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const;
  const Tensor* find(const std::string& name) const;

  friend bool operator==(const ParamFile&, const ParamFile&) = default;
};

std::string encode_param_file(const ParamFile& file);
ParamFile decode_param_file(const std::string& bytes, const std::string& origin = "<memory>");

void write_param_file(const std::filesystem::path& path, const ParamFile& file);
ParamFile read_param_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace posegraph
