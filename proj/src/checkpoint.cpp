#include "dplm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace dplm {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace bytes {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

const std::uint8_t* Reader::take(std::size_t n) {
  if (n > size_ - pos_) {
    throw FormatError("truncated input at byte " + std::to_string(pos_) + " (need " +
                      std::to_string(n) + " more)");
  }
  const auto* p = data_ + pos_;
  pos_ += n;
  return p;
}

std::uint8_t Reader::u8() { return *take(1); }

std::uint32_t Reader::u32() {
  const auto* p = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }

double Reader::f64() {
  const auto* p = take(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

std::string Reader::string() {
  const auto n = u32();
  const auto* p = take(n);
  return std::string(reinterpret_cast<const char*>(p), n);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace bytes

const NamedTensor& Checkpoint::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("checkpoint has no tensor named '" + name + "'");
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out{'D', 'P', 'L', 'M'};
  bytes::put_u32(out, Checkpoint::kVersion);
  bytes::put_string(out, ckpt.header_json);
  bytes::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.data.size()) {
      throw FormatError("tensor '" + t.name + "' has " + std::to_string(t.data.size()) +
                        " values for shape " + shape_str(t.shape));
    }
    bytes::put_string(out, t.name);
    bytes::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) bytes::put_u32(out, static_cast<std::uint32_t>(d));
    for (double x : t.data) bytes::put_f64(out, x);
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& data) {
  if (data.size() < 4 || std::memcmp(data.data(), "DPLM", 4) != 0) {
    throw FormatError("not a DPLM checkpoint (bad magic)");
  }
  bytes::Reader r(data.data() + 4, data.size() - 4);
  const auto version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.header_json = r.string();
  const auto count = r.u32();
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.string();
    const auto rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.u32());
    const auto n = shape_numel(t.shape);
    if (n * 8 > r.remaining()) throw FormatError("tensor '" + t.name + "' truncated");
    t.data.resize(n);
    for (auto& x : t.data) x = r.f64();
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  bytes::write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(bytes::read_file(path));
}

}  // namespace dplm
