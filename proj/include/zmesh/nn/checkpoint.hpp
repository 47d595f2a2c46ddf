#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "zmesh/nn/optim.hpp"

namespace zmesh::nn {

// Checkpoint container: text header
//   ZCKPT1 <n>\n
//   rng <engine state>\n
//   param <id> <ndim> <dims...> <value_off> <momentum_off>\n   (n lines)
//   end\n
// followed by float32 LE payload; offsets count floats from payload start.

class checkpoint_error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string id;
  std::vector<std::int64_t> dims;
  std::vector<float> values;
  std::vector<float> momentum;
};

struct Checkpoint {
  std::string rng_state;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& id) const {
    for (const auto& e : entries) {
      if (e.id == id) return &e;
    }
    return nullptr;
  }
};

template <typename T>
Checkpoint make_checkpoint(const std::vector<Param<T>>& params,
                           const std::string& rng_state) {
  Checkpoint ck;
  ck.rng_state = rng_state;
  ck.entries.reserve(params.size());
  for (const auto& p : params) {
    CheckpointEntry e;
    e.id = p.id;
    e.dims = p.node->value.dims();
    e.values.resize(static_cast<std::size_t>(p.node->value.size()));
    e.momentum.resize(e.values.size());
    for (std::int64_t i = 0; i < p.node->value.size(); ++i) {
      e.values[static_cast<std::size_t>(i)] = static_cast<float>(p.node->value[i]);
      e.momentum[static_cast<std::size_t>(i)] = static_cast<float>(p.momentum[i]);
    }
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw checkpoint_error("save_checkpoint: cannot open " + path);
  out << "ZCKPT1 " << ck.entries.size() << '\n';
  out << "rng " << ck.rng_state << '\n';
  std::int64_t off = 0;
  for (const auto& e : ck.entries) {
    out << "param " << e.id << ' ' << e.dims.size();
    for (auto d : e.dims) out << ' ' << d;
    const std::int64_t n = static_cast<std::int64_t>(e.values.size());
    out << ' ' << off << ' ' << off + n << '\n';
    off += 2 * n;
  }
  out << "end\n";
  for (const auto& e : ck.entries) {
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(e.momentum.data()),
              static_cast<std::streamsize>(e.momentum.size() * sizeof(float)));
  }
  if (!out) throw checkpoint_error("save_checkpoint: write failed " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw checkpoint_error("load_checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw checkpoint_error("load_checkpoint: empty file");
  std::istringstream head(line);
  std::string magic;
  std::size_t count = 0;
  head >> magic >> count;
  if (!head || magic != "ZCKPT1") {
    throw checkpoint_error("load_checkpoint: bad magic in " + path);
  }
  Checkpoint ck;
  if (!std::getline(in, line) || line.rfind("rng ", 0) != 0) {
    throw checkpoint_error("load_checkpoint: missing rng state");
  }
  ck.rng_state = line.substr(4);

  struct RawEntry {
    CheckpointEntry e;
    std::int64_t value_off, mom_off, n;
  };
  std::vector<RawEntry> raws;
  for (std::size_t k = 0; k < count; ++k) {
    if (!std::getline(in, line)) {
      throw checkpoint_error("load_checkpoint: truncated parameter table");
    }
    std::istringstream ls(line);
    std::string tag;
    RawEntry r;
    std::size_t ndim = 0;
    ls >> tag >> r.e.id >> ndim;
    if (!ls || tag != "param") {
      throw checkpoint_error("load_checkpoint: malformed table line");
    }
    r.n = 1;
    for (std::size_t d = 0; d < ndim; ++d) {
      std::int64_t v = 0;
      ls >> v;
      r.e.dims.push_back(v);
      r.n *= v;
    }
    ls >> r.value_off >> r.mom_off;
    if (!ls || r.n <= 0) {
      throw checkpoint_error("load_checkpoint: malformed table line");
    }
    raws.push_back(std::move(r));
  }
  if (!std::getline(in, line) || line != "end") {
    throw checkpoint_error("load_checkpoint: missing end marker");
  }
  const std::streampos payload_start = in.tellg();
  for (auto& r : raws) {
    r.e.values.resize(static_cast<std::size_t>(r.n));
    r.e.momentum.resize(static_cast<std::size_t>(r.n));
    in.seekg(payload_start + std::streamoff(r.value_off * std::int64_t(sizeof(float))));
    in.read(reinterpret_cast<char*>(r.e.values.data()),
            static_cast<std::streamsize>(r.n * std::int64_t(sizeof(float))));
    in.seekg(payload_start + std::streamoff(r.mom_off * std::int64_t(sizeof(float))));
    in.read(reinterpret_cast<char*>(r.e.momentum.data()),
            static_cast<std::streamsize>(r.n * std::int64_t(sizeof(float))));
    if (!in) throw checkpoint_error("load_checkpoint: truncated payload in " + path);
    ck.entries.push_back(std::move(r.e));
  }
  return ck;
}

/// Restores parameter values (and momentum buffers) from a checkpoint.
/// `accept` filters by identifier; in strict mode every parameter must be
/// present with a matching shape.
template <typename T>
int load_into(std::vector<Param<T>>& params, const Checkpoint& ck, bool strict,
              const std::function<bool(const std::string&)>& accept = nullptr) {
  int loaded = 0;
  for (auto& p : params) {
    if (accept && !accept(p.id)) continue;
    const CheckpointEntry* e = ck.find(p.id);
    if (!e) {
      if (strict) throw checkpoint_error("checkpoint missing parameter " + p.id);
      continue;
    }
    if (e->dims != p.node->value.dims()) {
      throw checkpoint_error("checkpoint shape mismatch for " + p.id);
    }
    for (std::int64_t i = 0; i < p.node->value.size(); ++i) {
      p.node->value[i] = static_cast<T>(e->values[static_cast<std::size_t>(i)]);
      p.momentum[i] = static_cast<T>(e->momentum[static_cast<std::size_t>(i)]);
    }
    ++loaded;
  }
  return loaded;
}

}  // namespace zmesh::nn
