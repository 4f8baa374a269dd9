#pragma once

// Binary checkpoint container. Every integer and float is little-endian.
//
//   offset  size  field
//   0       8     magic "HIDSSMCK"
//   8       4     u32 format version (1)
//   12      4     u32 flags, bit 0 = causal
//   16      56    u64 x 7: n_global, n_local, n_ppn, d_model, state_dim,
//                 n_phases, min_segment
//   72      4     u32 number of parameter arrays K
//   76      ...   K records: u32 name length L, L name bytes (ASCII),
//                 u64 element count n, n x f64 values
//
// Arrays appear in for_each_param order; names are checked on load.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "hidssm/data.hpp"
#include "hidssm/errors.hpp"
#include "hidssm/model.hpp"

namespace hidssm {

inline constexpr std::string_view kCheckpointMagic = "HIDSSMCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ParseError(ParseErrorKind::truncated, "checkpoint ends early");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const HidSsmModel& model) {
  const auto& c = model.cfg;
  std::string out(kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, c.causal ? 1u : 0u);
  for (std::uint64_t v : {c.n_global, c.n_local, c.n_ppn, c.d_model, c.state_dim, c.n_phases, c.min_segment})
    detail::put_le<std::uint64_t>(out, v);
  const auto arrays = const_param_list(model.params);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    detail::put_le<std::uint64_t>(out, a.values.size());
    for (double v : a.values) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline HidSsmModel decode_checkpoint(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < kCheckpointMagic.size() || in.take(kCheckpointMagic.size()) != kCheckpointMagic)
    throw ParseError(ParseErrorKind::bad_magic, "not a hidssm checkpoint");
  if (in.get<std::uint32_t>() != kCheckpointVersion)
    throw ParseError(ParseErrorKind::unsupported_version, "unsupported checkpoint version");
  LayerStackConfig cfg;
  cfg.causal = (in.get<std::uint32_t>() & 1u) != 0;
  for (std::size_t* field :
       {&cfg.n_global, &cfg.n_local, &cfg.n_ppn, &cfg.d_model, &cfg.state_dim, &cfg.n_phases, &cfg.min_segment}) {
    const auto v = in.get<std::uint64_t>();
    if (v < 1 || v > (1u << 20)) throw ParseError(ParseErrorKind::bad_header, "implausible config value");
    *field = static_cast<std::size_t>(v);
  }
  HidSsmModel model;
  try {
    model = HidSsmModel::zero(cfg);
  } catch (const ConfigError& e) {
    throw ParseError(ParseErrorKind::bad_header, e.what());
  }
  auto arrays = param_list(model.params);
  if (in.get<std::uint32_t>() != arrays.size())
    throw ParseError(ParseErrorKind::length_mismatch, "parameter array count does not match config");
  for (auto& a : arrays) {
    const auto len = in.get<std::uint32_t>();
    if (len > 256 || in.take(len) != a.name)
      throw ParseError(ParseErrorKind::length_mismatch, "expected parameter array " + a.name);
    if (in.get<std::uint64_t>() != a.values.size())
      throw ParseError(ParseErrorKind::length_mismatch, "size mismatch for " + a.name);
    for (double& v : a.values) {
      v = std::bit_cast<double>(in.get<std::uint64_t>());
      if (!std::isfinite(v)) throw ParseError(ParseErrorKind::bad_value, "non-finite value in " + a.name);
    }
  }
  if (!in.done()) throw ParseError(ParseErrorKind::trailing_data, "bytes after last parameter array");
  return model;
}

inline void save_checkpoint(const HidSsmModel& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(model));
}

inline HidSsmModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace hidssm
