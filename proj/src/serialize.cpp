#include "posegraph/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace posegraph {

namespace {

constexpr char kMagic[4] = {'P', 'G', 'N', 'N'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f64(std::string& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  double f64(const char* field) {
    need(8, field);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }

  std::string str(std::size_t n, const char* field) {
    need(n, field);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(origin_ + ": " + what + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated ") + field);
  }

  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor* ParamFile::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.tensor;
  }
  return nullptr;
}

const Tensor& ParamFile::get(const std::string& name) const {
  const Tensor* t = find(name);
  if (t == nullptr) throw Error("parameter file has no tensor named '" + name + "'");
  return *t;
}

std::string encode_param_file(const ParamFile& file) {
  std::string out(kMagic, 4);
  put_u32(out, kParamFileVersion);
  put_u32(out, static_cast<std::uint32_t>(file.tensors.size()));
  put_u32(out, static_cast<std::uint32_t>(file.meta.size()));
  out += file.meta;
  for (const auto& nt : file.tensors) {
    put_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out += nt.name;
    put_u32(out, static_cast<std::uint32_t>(nt.tensor.channels()));
    put_u32(out, static_cast<std::uint32_t>(nt.tensor.height()));
    put_u32(out, static_cast<std::uint32_t>(nt.tensor.width()));
    for (double v : nt.tensor.values()) put_f64(out, v);
  }
  return out;
}

ParamFile decode_param_file(const std::string& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (r.str(4, "magic") != std::string(kMagic, 4)) r.fail("bad magic");
  const std::uint32_t version = r.u32("version");
  if (version != kParamFileVersion) r.fail("unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32("tensor count");
  const std::uint32_t meta_len = r.u32("meta length");
  ParamFile file;
  file.meta = r.str(meta_len, "meta");
  file.tensors.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedTensor nt;
    nt.name = r.str(r.u32("name length"), "name");
    const Shape shape{static_cast<int>(r.u32("channels")), static_cast<int>(r.u32("height")),
                      static_cast<int>(r.u32("width"))};
    if (shape.channels < 0 || shape.height < 0 || shape.width < 0) r.fail("bad shape");
    std::vector<double> data(shape.size());
    for (double& v : data) v = r.f64("tensor data");
    nt.tensor = Tensor(shape, std::move(data));
    file.tensors.push_back(std::move(nt));
  }
  if (!r.done()) r.fail("trailing bytes");
  return file;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write failed for " + path.string());
}

void write_param_file(const std::filesystem::path& path, const ParamFile& file) {
  write_text_file(path, encode_param_file(file));
}

ParamFile read_param_file(const std::filesystem::path& path) {
  return decode_param_file(read_text_file(path), path.string());
}

}  // namespace posegraph
