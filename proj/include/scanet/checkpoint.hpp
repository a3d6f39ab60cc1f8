#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "scanet/optimizer.hpp"

namespace scanet {

/// Layout version of the checkpoint container.
inline constexpr std::uint32_t checkpoint_schema_version = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BlobType : std::uint8_t { f32 = 0, f64 = 1 };

/// One named array: dtype tag, shape header and little-endian payload.
struct Blob {
  BlobType type = BlobType::f32;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;  // widened for inspection; exact for both tags

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct CheckpointMeta {
  std::string config_text;  // INI snapshot of the model and training configs
  std::int32_t epoch = 0;   // epochs completed
  std::uint64_t step = 0;   // optimizer steps taken
  double best_miou = -1.0;
  std::int32_t best_epoch = -1;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::map<std::string, Blob> params;
  std::map<std::string, Blob> moments;  // "m.<param>" and "v.<param>"
};

namespace detail {

inline constexpr char checkpoint_magic[8] = {'S', 'C', 'A', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename U>
  void le(U v) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    Bits b = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) os_.put(char((b >> (8 * i)) & 0xff));
  }
  void str(const std::string& s) {
    le(std::uint32_t(s.size()));
    os_.write(s.data(), std::streamsize(s.size()));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string where) : is_(is), where_(std::move(where)) {}
  template <typename U>
  U le() {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t,
                                                       std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
    unsigned char buf[sizeof(U)];
    if (!is_.read(reinterpret_cast<char*>(buf), sizeof(U))) corrupt("truncated");
    Bits b = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) b |= Bits(buf[i]) << (8 * i);
    return std::bit_cast<U>(b);
  }
  std::string str(std::size_t limit = std::size_t(1) << 26) {
    const auto n = le<std::uint32_t>();
    if (n > limit) corrupt("string length out of range");
    std::string s(n, '\0');
    if (n && !is_.read(s.data(), n)) corrupt("truncated");
    return s;
  }
  [[noreturn]] void corrupt(const std::string& why) const {
    throw CheckpointError("corrupt checkpoint " + where_ + ": " + why);
  }

 private:
  std::istream& is_;
  std::string where_;
};

template <typename T>
constexpr BlobType blob_type() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? BlobType::f32 : BlobType::f64;
}

template <typename Values>
void write_blob(Writer& w, const std::string& name, BlobType type, const std::vector<std::uint32_t>& dims,
                const Values& values) {
  w.str(name);
  w.le(std::uint8_t(type));
  w.le(std::uint8_t(dims.size()));
  for (auto d : dims) w.le(d);
  for (auto v : values) {
    if (type == BlobType::f32) w.le(float(v));
    else w.le(double(v));
  }
}

inline std::pair<std::string, Blob> read_blob(Reader& r) {
  std::pair<std::string, Blob> out;
  out.first = r.str(4096);
  Blob& b = out.second;
  const auto type = r.le<std::uint8_t>();
  if (type > 1) r.corrupt("unknown dtype tag " + std::to_string(type) + " for " + out.first);
  b.type = BlobType(type);
  const auto ndim = r.le<std::uint8_t>();
  if (ndim > 8) r.corrupt("rank " + std::to_string(ndim) + " for " + out.first);
  for (int i = 0; i < ndim; ++i) b.dims.push_back(r.le<std::uint32_t>());
  const std::size_t n = b.numel();
  if (n > (std::size_t(1) << 31)) r.corrupt("blob " + out.first + " too large");
  b.values.resize(n);
  for (auto& v : b.values) v = b.type == BlobType::f32 ? double(r.le<float>()) : r.le<double>();
  return out;
}

inline std::vector<std::uint32_t> dims_of(const Shape4& s) {
  return {std::uint32_t(s.n), std::uint32_t(s.c), std::uint32_t(s.h), std::uint32_t(s.w)};
}

inline std::string dims_str(const std::vector<std::uint32_t>& d) {
  std::string s = "[";
  for (std::size_t i = 0; i < d.size(); ++i) s += (i ? ", " : "") + std::to_string(d[i]);
  return s + "]";
}

}  // namespace detail

/// Writes model parameters, optional optimizer moments and metadata. The file
/// is written next to `path` and renamed into place.
template <typename T, typename Model>
void save_checkpoint(const std::filesystem::path& path, Model& model, const AdamW<T>* optimizer,
                     const CheckpointMeta& meta) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    detail::Writer w(os);
    os.write(detail::checkpoint_magic, sizeof detail::checkpoint_magic);
    w.le(checkpoint_schema_version);
    w.str(meta.config_text);
    w.le(meta.epoch);
    w.le(meta.step);
    w.le(meta.best_miou);
    w.le(meta.best_epoch);
    auto params = model.parameters();
    w.le(std::uint32_t(params.size()));
    for (auto& p : params)
      detail::write_blob(w, p.name, detail::blob_type<T>(), detail::dims_of(p.tensor->shape()), p.tensor->values());
    const std::uint32_t nmom = optimizer ? std::uint32_t(optimizer->state().size() * 2) : 0;
    w.le(nmom);
    if (optimizer)
      for (const auto& [name, st] : optimizer->state()) {
        const std::vector<std::uint32_t> dims{std::uint32_t(st.m.size())};
        detail::write_blob(w, "m." + name, detail::blob_type<T>(), dims, st.m);
        detail::write_blob(w, "v." + name, detail::blob_type<T>(), dims, st.v);
      }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  detail::Reader r(is, path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::checkpoint_magic, 8) != 0)
    r.corrupt("not a checkpoint file (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != checkpoint_schema_version)
    throw CheckpointError("checkpoint " + path.string() + " has schema version " + std::to_string(version) +
                          "; this build reads version " + std::to_string(checkpoint_schema_version));
  Checkpoint ck;
  ck.meta.config_text = r.str();
  ck.meta.epoch = r.le<std::int32_t>();
  ck.meta.step = r.le<std::uint64_t>();
  ck.meta.best_miou = r.le<double>();
  ck.meta.best_epoch = r.le<std::int32_t>();
  const auto nparams = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < nparams; ++i) ck.params.insert(detail::read_blob(r));
  const auto nmom = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < nmom; ++i) ck.moments.insert(detail::read_blob(r));
  if (is.peek() != std::char_traits<char>::eof()) r.corrupt("trailing bytes");
  return ck;
}

/// Copies checkpoint arrays into `model` (and `optimizer`). Throws on the
/// first parameter whose name or shape does not match.
template <typename T, typename Model>
void restore_checkpoint(const Checkpoint& ck, Model& model, AdamW<T>* optimizer = nullptr) {
  auto params = model.parameters();
  for (auto& p : params) {
    const auto it = ck.params.find(p.name);
    const auto want = detail::dims_of(p.tensor->shape());
    if (it == ck.params.end())
      throw CheckpointError("checkpoint does not match the model: parameter " + p.name + " " + detail::dims_str(want) +
                            " is missing");
    if (it->second.dims != want)
      throw CheckpointError("checkpoint does not match the model: parameter " + p.name + " has shape " +
                            detail::dims_str(it->second.dims) + " in the checkpoint but " + detail::dims_str(want) +
                            " in the model");
  }
  if (ck.params.size() != params.size()) {
    std::map<std::string, int> names;
    for (auto& p : params) names[p.name] = 1;
    for (const auto& [name, blob] : ck.params)
      if (!names.count(name))
        throw CheckpointError("checkpoint does not match the model: checkpoint parameter " + name + " " +
                              detail::dims_str(blob.dims) + " has no counterpart");
  }
  for (auto& p : params) {
    const Blob& b = ck.params.at(p.name);
    auto dst = p.tensor->values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = T(b.values[i]);
  }
  if (!optimizer) return;
  optimizer->state().clear();
  optimizer->set_steps(ck.meta.step);
  for (const auto& [key, blob] : ck.moments) {
    if (key.rfind("m.", 0) != 0) continue;
    const std::string name = key.substr(2);
    const auto v = ck.moments.find("v." + name);
    if (v == ck.moments.end()) throw CheckpointError("checkpoint moments for " + name + " are incomplete");
    auto& st = optimizer->state()[name];
    st.m.assign(blob.values.begin(), blob.values.end());
    st.v.assign(v->second.values.begin(), v->second.values.end());
  }
}

template <typename T, typename Model>
CheckpointMeta load_checkpoint(const std::filesystem::path& path, Model& model, AdamW<T>* optimizer = nullptr) {
  const Checkpoint ck = read_checkpoint(path);
  restore_checkpoint<T>(ck, model, optimizer);
  return ck.meta;
}

}  // namespace scanet
