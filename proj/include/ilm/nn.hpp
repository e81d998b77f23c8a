#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ilm/tensor.hpp"

namespace ilm {

/// Glorot-uniform init: U(-sqrt(6/(fan_in+fan_out)), +...).
inline Tensor glorot(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
  Tensor t = Tensor::param(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.value()) v = static_cast<real>(rng.uniform(-bound, bound));
  return t;
}

struct Linear {
  Tensor w;  // [in,out]
  Tensor b;  // [out]

  Linear() = default;
  Linear(int64_t in, int64_t out, Rng& rng)
      : w(glorot({in, out}, in, out, rng)), b(Tensor::param({out})) {}

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, w), b); }

  void collect(ParamMap& into, const std::string& prefix) const {
    into.emplace_back(prefix + ".w", w);
    into.emplace_back(prefix + ".b", b);
  }
};

struct EmbeddingTable {
  Tensor table;  // [V,E]

  EmbeddingTable() = default;
  EmbeddingTable(int64_t vocab, int64_t dim, Rng& rng)
      : table(glorot({vocab, dim}, vocab, dim, rng)) {}

  Tensor operator()(const std::vector<int>& ids) const { return embedding(table, ids); }

  /// Differentiable soft lookup: probs [N,V] -> [N,E].
  Tensor soft(const Tensor& probs) const { return matmul(probs, table); }

  void collect(ParamMap& into, const std::string& prefix) const {
    into.emplace_back(prefix + ".table", table);
  }
};

/// Standard GRU gates: update z, reset r, candidate n;
/// h' = (1-z)*n + z*h.
struct GruParams {
  Tensor wxz, whz, bz;
  Tensor wxr, whr, br;
  Tensor wxn, whn, bn;

  GruParams() = default;
  GruParams(int64_t in, int64_t hidden, Rng& rng) {
    auto mk = [&](int64_t i, int64_t o) { return glorot({i, o}, i, o, rng); };
    wxz = mk(in, hidden);
    whz = mk(hidden, hidden);
    bz = Tensor::param({hidden});
    wxr = mk(in, hidden);
    whr = mk(hidden, hidden);
    br = Tensor::param({hidden});
    wxn = mk(in, hidden);
    whn = mk(hidden, hidden);
    bn = Tensor::param({hidden});
  }

  int64_t hidden() const { return bz.dim(0); }
  int64_t input() const { return wxz.dim(0); }

  void collect(ParamMap& into, const std::string& prefix) const {
    into.emplace_back(prefix + ".wxz", wxz);
    into.emplace_back(prefix + ".whz", whz);
    into.emplace_back(prefix + ".bz", bz);
    into.emplace_back(prefix + ".wxr", wxr);
    into.emplace_back(prefix + ".whr", whr);
    into.emplace_back(prefix + ".br", br);
    into.emplace_back(prefix + ".wxn", wxn);
    into.emplace_back(prefix + ".whn", whn);
    into.emplace_back(prefix + ".bn", bn);
  }
};

/// One GRU step. x [N,I], h [N,H] -> [N,H].
inline Tensor gru_cell(const Tensor& x, const Tensor& h, const GruParams& p) {
  if (x.ndim() != 2 || h.ndim() != 2 || x.dim(0) != h.dim(0))
    throw ShapeError("gru_cell: expected x [N,I] and h [N,H], got " +
                     shape_str(x.shape()) + " and " + shape_str(h.shape()));
  if (x.dim(1) != p.input() || h.dim(1) != p.hidden())
    throw ShapeError("gru_cell: input/hidden widths " + std::to_string(x.dim(1)) + "/" +
                     std::to_string(h.dim(1)) + " do not match parameters " +
                     std::to_string(p.input()) + "/" + std::to_string(p.hidden()));
  Tensor z = sigmoid(add_bias(add(matmul(x, p.wxz), matmul(h, p.whz)), p.bz));
  Tensor r = sigmoid(add_bias(add(matmul(x, p.wxr), matmul(h, p.whr)), p.br));
  Tensor n = tanh(add_bias(add(matmul(x, p.wxn), matmul(mul(r, h), p.whn)), p.bn));
  // (1-z)*n + z*h
  return add(mul(affine(z, real(-1), real(1)), n), mul(z, h));
}

struct Conv2dLayer {
  Tensor w;  // [Co,Ci,K,K]
  Tensor b;  // [Co]
  int pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(int64_t in_ch, int64_t out_ch, int64_t k, int pad_, Rng& rng)
      : w(glorot({out_ch, in_ch, k, k}, in_ch * k * k, out_ch * k * k, rng)),
        b(Tensor::param({out_ch})),
        pad(pad_) {}

  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, pad); }

  void collect(ParamMap& into, const std::string& prefix) const {
    into.emplace_back(prefix + ".w", w);
    into.emplace_back(prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// Checkpoint format: flat binary of named tensors.
//   u64 count, then per tensor:
//   u64 name_len, name bytes, u64 ndim, u64 dims..., f64 values...
// Values are written as 64-bit floats regardless of the build's real type.
// ---------------------------------------------------------------------------

namespace detail {
inline void write_u64(std::ofstream& f, uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline uint64_t read_u64(std::ifstream& f) {
  uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
}  // namespace detail

inline void save_params(const ParamMap& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_params: cannot open '" + path + "' for writing");
  detail::write_u64(f, params.size());
  for (const auto& [name, t] : params) {
    detail::write_u64(f, name.size());
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u64(f, static_cast<uint64_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) detail::write_u64(f, static_cast<uint64_t>(t.dim(i)));
    for (real v : t.value()) {
      const double d = static_cast<double>(v);
      f.write(reinterpret_cast<const char*>(&d), sizeof(d));
    }
  }
  if (!f) throw IoError("save_params: write to '" + path + "' failed");
}

/// Loads values into an existing parameter map; names and shapes must match.
inline void load_params(ParamMap& params, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_params: cannot open '" + path + "'");
  const uint64_t count = detail::read_u64(f);
  if (count != params.size())
    throw IoError("load_params: checkpoint has " + std::to_string(count) +
                  " tensors, expected " + std::to_string(params.size()));
  for (auto& [name, t] : params) {
    const uint64_t name_len = detail::read_u64(f);
    std::string stored(name_len, '\0');
    f.read(stored.data(), static_cast<std::streamsize>(name_len));
    if (stored != name)
      throw IoError("load_params: expected tensor '" + name + "', found '" + stored + "'");
    const uint64_t ndim = detail::read_u64(f);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int64_t>(detail::read_u64(f));
    if (shape != t.shape())
      throw IoError("load_params: shape mismatch for '" + name + "': checkpoint " +
                    shape_str(shape) + " vs model " + shape_str(t.shape()));
    for (auto& v : t.value()) {
      double d = 0;
      f.read(reinterpret_cast<char*>(&d), sizeof(d));
      v = static_cast<real>(d);
    }
    if (!f) throw IoError("load_params: truncated checkpoint '" + path + "'");
  }
}

}  // namespace ilm
