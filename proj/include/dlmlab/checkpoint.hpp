#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   bytes 0..7    magic "DLMLABCK"
//   bytes 8..11   u32 format version
//   bytes 12..19  u64 header length H
//   next H bytes  UTF-8 JSON header:
//                 { "config": {...}, "dtype": "f32"|"f64", "step": n,
//                   "rng": "<engine state>", "has_optimizer": bool,
//                   "tensors": [ {"name", "shape": [rows, cols], "offset"} ] }
//   payload       raw row-major tensor data; offsets are bytes from the
//                 start of the payload. Optimizer moments are stored as
//                 tensors named "adam.m/<name>" and "adam.v/<name>".

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlmlab/model.hpp"

namespace dlmlab {

inline constexpr char kCheckpointMagic[8] = {'D', 'L', 'M', 'L', 'A', 'B', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab", c.vocab},         {"d_model", c.d_model},     {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},   {"d_ffn", c.d_ffn},         {"max_positions", c.max_positions},
          {"token_shift", c.token_shift}, {"rope_base", c.rope_base}, {"norm_eps", c.norm_eps},
          {"init_std", c.init_std}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab = j.at("vocab");
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.n_layers = j.at("n_layers");
  c.d_ffn = j.at("d_ffn");
  c.max_positions = j.at("max_positions");
  c.token_shift = j.at("token_shift");
  c.rope_base = j.at("rope_base");
  c.norm_eps = j.at("norm_eps");
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

namespace detail {

template <class U>
void put_le(std::string& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const char* p) {
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

template <class T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace detail

template <class T>
void save_checkpoint(const TrainState<T>& state, const std::string& path, bool with_optimizer = true) {
  nlohmann::json header;
  header["config"] = to_json(state.params.config);
  header["dtype"] = detail::dtype_name<T>();
  header["step"] = state.step;
  header["rng"] = state.rng.state();
  header["has_optimizer"] = with_optimizer;
  std::string payload;
  auto add = [&](const std::string& name, const Matrix<T>& m) {
    header["tensors"].push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", payload.size()}});
    for (Eigen::Index i = 0; i < m.size(); ++i)
      detail::put_le(payload, std::bit_cast<detail::Bits<T>>(m.data()[i]));
  };
  for (const auto& t : state.params.tensors) add(t.name, t.value);
  if (with_optimizer) {
    for (const auto& t : state.m.tensors) add("adam.m/" + t.name, t.value);
    for (const auto& t : state.v.tensors) add("adam.v/" + t.name, t.value);
  }
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  out += payload;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open checkpoint for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing checkpoint: " + path);
}

template <class T>
TrainState<T> load_checkpoint(const std::string& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic): " + path);
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version mismatch: file has " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  const auto hlen = detail::get_le<std::uint64_t>(bytes.data() + 12);
  if (bytes.size() < 20 + hlen) throw CheckpointError("truncated checkpoint header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(20, hlen));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (header.at("dtype") != detail::dtype_name<T>())
    throw CheckpointError("checkpoint dtype mismatch: file has " + header.at("dtype").get<std::string>());
  const char* payload = bytes.data() + 20 + hlen;
  const size_t payload_size = bytes.size() - 20 - hlen;

  TrainState<T> st;
  const ModelConfig cfg = model_config_from_json(header.at("config"));
  st.params = ModelParams<T>::zeros(cfg);
  st.m = ModelParams<T>::zeros(cfg);
  st.v = ModelParams<T>::zeros(cfg);
  st.step = header.at("step");
  st.rng.restore(header.at("rng"));

  auto fill = [&](const std::string& name, Matrix<T>& m) {
    for (const auto& t : header.at("tensors")) {
      if (t.at("name") != name) continue;
      const auto rows = t.at("shape")[0].get<Eigen::Index>();
      const auto cols = t.at("shape")[1].get<Eigen::Index>();
      if (rows != m.rows() || cols != m.cols())
        throw CheckpointError("checkpoint shape mismatch for " + name);
      const auto off = t.at("offset").get<size_t>();
      const size_t need = static_cast<size_t>(m.size()) * sizeof(T);
      if (off + need > payload_size) throw CheckpointError("truncated checkpoint payload at " + name);
      for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = std::bit_cast<T>(detail::get_le<detail::Bits<T>>(payload + off + static_cast<size_t>(i) * sizeof(T)));
      return;
    }
    throw CheckpointError("checkpoint is missing tensor " + name);
  };
  for (auto& t : st.params.tensors) fill(t.name, t.value);
  if (header.at("has_optimizer").get<bool>()) {
    for (auto& t : st.m.tensors) fill("adam.m/" + t.name, t.value);
    for (auto& t : st.v.tensors) fill("adam.v/" + t.name, t.value);
  }
  return st;
}

}  // namespace dlmlab
