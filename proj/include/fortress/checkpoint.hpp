#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fortress/config.hpp"
#include "fortress/encoder.hpp"
#include "fortress/server.hpp"

namespace fortress {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything needed to continue a run after `round`. Per-round randomness is
// derived from (seed, round, client), so no generator state is stored.
struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint64_t round = 0;
  ModelParams params;
  PopularityState state;
  std::optional<double> reference_norm;

  bool operator==(const Checkpoint& o) const {
    return config_hash == o.config_hash && round == o.round && params == o.params &&
           state == o.state && reference_norm == o.reference_norm;
  }
};

inline constexpr char kCheckpointMagic[8] = {'F', 'O', 'R', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.append(c, n);
  }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view buf) : buf_(buf) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view buf_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  ckpt_detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(c.config_hash);
  w.u64(c.round);
  w.u64(c.params.num_items());
  w.u64(c.params.dim());
  w.u64(c.params.size());
  for (double v : c.params.values()) w.f64(v);
  const std::size_t m = c.state.magnitude.size();
  w.u64(m);
  w.u64(c.state.rounds_observed);
  for (double v : c.state.magnitude) w.f64(v);
  for (std::uint64_t v : c.state.frequency) w.u64(v);
  for (double v : c.state.drift) w.f64(v);
  w.u8(c.reference_norm ? 1 : 0);
  w.f64(c.reference_norm.value_or(0.0));
  w.u64(fnv1a64(w.str()));
  return w.str();
}

inline Checkpoint deserialize_checkpoint(std::string_view buf) {
  if (buf.size() < sizeof kCheckpointMagic + 8) throw CheckpointError("checkpoint truncated");
  const std::string_view body = buf.substr(0, buf.size() - 8);
  ckpt_detail::Reader tail(buf.substr(buf.size() - 8));
  if (tail.u64() != fnv1a64(body)) throw CheckpointError("checkpoint checksum mismatch");

  ckpt_detail::Reader r(body);
  if (r.bytes(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, 8)) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint c;
  c.config_hash = r.u64();
  c.round = r.u64();
  const ModelShape shape{r.u64(), r.u64()};
  if (shape.dim < 2 || shape.num_items < 1) throw CheckpointError("checkpoint has invalid shape");
  const std::uint64_t n = r.u64();
  if (n != ModelParams::total_size(shape)) {
    throw CheckpointError("checkpoint parameter count does not match its shape");
  }
  r.need(n * 8);
  c.params = ModelParams(shape);
  for (double& v : c.params.values()) v = r.f64();
  const std::uint64_t m = r.u64();
  if (m != 0 && m != shape.num_items) throw CheckpointError("checkpoint server state size mismatch");
  c.state.rounds_observed = r.u64();
  r.need(m * 24);
  c.state.magnitude.resize(m);
  c.state.frequency.resize(m);
  c.state.drift.resize(m);
  for (double& v : c.state.magnitude) v = r.f64();
  for (std::uint64_t& v : c.state.frequency) v = r.u64();
  for (double& v : c.state.drift) v = r.f64();
  const bool has_ref = r.u8() != 0;
  const double ref = r.f64();
  if (has_ref) c.reference_norm = ref;
  if (r.pos() != body.size()) throw CheckpointError("checkpoint has trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string bytes = serialize_checkpoint(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw CheckpointError("cannot move checkpoint into place at " + path);
  }
}

// Reads a checkpoint; when given, the config hash and model shape must match.
inline Checkpoint load_checkpoint(const std::string& path,
                                  std::optional<std::uint64_t> expected_hash = std::nullopt,
                                  std::optional<ModelShape> expected_shape = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  Checkpoint c = deserialize_checkpoint(ss.str());
  if (expected_hash && *expected_hash != c.config_hash) {
    throw CheckpointError("checkpoint config hash mismatch: file was written under a different "
                          "configuration");
  }
  if (expected_shape && (expected_shape->num_items != c.params.num_items() ||
                         expected_shape->dim != c.params.dim())) {
    throw CheckpointError("checkpoint shape mismatch: expected M=" +
                          std::to_string(expected_shape->num_items) +
                          " d=" + std::to_string(expected_shape->dim) +
                          ", file has M=" + std::to_string(c.params.num_items()) +
                          " d=" + std::to_string(c.params.dim()));
  }
  return c;
}

}  // namespace fortress
