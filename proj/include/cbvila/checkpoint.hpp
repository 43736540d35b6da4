#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "cbvila/config.hpp"
#include "cbvila/model.hpp"
#include "cbvila/tokenizer.hpp"

namespace cbvila {

namespace detail {

inline void write_u32(std::ostream& o, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  o.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  o.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_str(std::ostream& o, const std::string& s) {
  write_u32(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& in) {
  const std::uint32_t n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

template <typename S>
void write_tensor(std::ostream& o, const std::string& name, const Mat<S>& m) {
  write_str(o, name);
  write_u32(o, static_cast<std::uint32_t>(m.rows()));
  write_u32(o, static_cast<std::uint32_t>(m.cols()));
  o.write(reinterpret_cast<const char*>(m.data()),
          static_cast<std::streamsize>(sizeof(S) * static_cast<std::size_t>(m.size())));
}

template <typename S>
std::pair<std::string, Mat<S>> read_tensor(std::istream& in) {
  std::string name = read_str(in);
  const std::uint32_t rows = read_u32(in);
  const std::uint32_t cols = read_u32(in);
  Mat<S> m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(S) * static_cast<std::size_t>(m.size())));
  return {std::move(name), std::move(m)};
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'C', 'B', 'V', 'I', 'L', 'A', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Versioned checkpoint container: full config text, vocabulary, global
/// step, every named tensor (parameter values plus AdamW moments), and any
/// extra state tensors (prefix "state."). Byte-identical across save/load
/// cycles.
template <typename S>
void save_checkpoint_with_state(const std::string& path, const ParamStore<S>& store,
                                const TrainConfig& cfg, const Vocab& vocab, long global_step,
                                const std::vector<std::pair<std::string, Mat<S>>>& extras) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("checkpoint: cannot write " + path);
  f.write(kCheckpointMagic, 8);
  detail::write_u32(f, kCheckpointVersion);
  detail::write_u32(f, static_cast<std::uint32_t>(sizeof(S)));
  detail::write_u64(f, static_cast<std::uint64_t>(global_step));
  detail::write_str(f, config_to_text(cfg));
  detail::write_str(f, vocab.to_text());
  detail::write_u32(f, static_cast<std::uint32_t>(store.size() * 3 + static_cast<int>(extras.size())));
  for (int pid = 0; pid < store.size(); ++pid) {
    const auto& p = store.at(pid);
    detail::write_tensor(f, p.name, p.value);
    detail::write_tensor(f, "adam.m/" + p.name, p.m);
    detail::write_tensor(f, "adam.v/" + p.name, p.v);
  }
  for (const auto& [name, tensor] : extras) detail::write_tensor(f, name, tensor);
  if (!f) throw InputError("checkpoint: short write to " + path);
}

template <typename S>
void save_checkpoint(const std::string& path, const ParamStore<S>& store, const TrainConfig& cfg,
                     const Vocab& vocab, long global_step) {
  save_checkpoint_with_state(path, store, cfg, vocab, global_step, {});
}

template <typename S>
struct CheckpointData {
  TrainConfig cfg;
  std::string vocab_text;
  long global_step = 0;
  std::vector<std::pair<std::string, Mat<S>>> tensors;
};

template <typename S>
CheckpointData<S> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw InputError("checkpoint: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(f);
  if (version != kCheckpointVersion)
    throw InputError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t dtype = detail::read_u32(f);
  if (dtype != sizeof(S))
    throw ConfigError("checkpoint: scalar width mismatch (file " + std::to_string(dtype) +
                      " bytes, expected " + std::to_string(sizeof(S)) + ")");
  CheckpointData<S> out;
  out.global_step = static_cast<long>(detail::read_u64(f));
  out.cfg = parse_train_config(detail::read_str(f));
  out.vocab_text = detail::read_str(f);
  const std::uint32_t count = detail::read_u32(f);
  out.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) out.tensors.push_back(detail::read_tensor<S>(f));
  if (!f) throw InputError("checkpoint: truncated file " + path);
  return out;
}

template <typename S>
struct LoadedModel {
  CbVilaModel<S> model;
  long global_step;
};

/// Rebuild a model from a checkpoint: construct from the embedded config and
/// vocabulary, then overwrite every tensor by name.
template <typename S>
LoadedModel<S> load_model_checkpoint(const std::string& path) {
  CheckpointData<S> data = load_checkpoint<S>(path);
  std::vector<std::string> lines;
  std::string line;
  std::istringstream vs(data.vocab_text);
  while (std::getline(vs, line))
    if (!line.empty()) lines.push_back(line);
  CbVilaModel<S> model(data.cfg, Vocab::from_lines(lines));
  auto& store = model.store();
  int applied = 0;
  for (auto& [name, tensor] : data.tensors) {
    if (name.rfind("state.", 0) == 0) continue;  // trainer state, handled separately
    std::string base = name;
    Mat<S>* slot = nullptr;
    if (base.rfind("adam.m/", 0) == 0) {
      const int pid = store.find(base.substr(7));
      if (pid >= 0) slot = &store.at(pid).m;
    } else if (base.rfind("adam.v/", 0) == 0) {
      const int pid = store.find(base.substr(7));
      if (pid >= 0) slot = &store.at(pid).v;
    } else {
      const int pid = store.find(base);
      if (pid >= 0) slot = &store.at(pid).value;
    }
    if (slot == nullptr) throw InputError("checkpoint: unknown tensor " + name);
    require_input(slot->rows() == tensor.rows() && slot->cols() == tensor.cols(),
                  "checkpoint: tensor shape mismatch for " + name);
    *slot = std::move(tensor);
    ++applied;
  }
  require_input(applied == store.size() * 3, "checkpoint: missing tensors");
  return {std::move(model), data.global_step};
}

}  // namespace cbvila
