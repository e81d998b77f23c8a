#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "ilm/tensor.hpp"

namespace ilm {

/// Attribute tuple: length a, each value in [0,k).
using Meaning = std::vector<int>;

/// Symbolic meaning space k^a: a attributes, k values per attribute.
struct MeaningSpace {
  int num_attributes = 0;   // a
  int values_per_attr = 0;  // k

  int64_t size() const {
    int64_t n = 1;
    for (int i = 0; i < num_attributes; ++i) n *= values_per_attr;
    return n;
  }

  /// Mixed-radix decode of a meaning index.
  Meaning meaning_at(int64_t index) const {
    Meaning m(num_attributes);
    for (int i = num_attributes - 1; i >= 0; --i) {
      m[i] = static_cast<int>(index % values_per_attr);
      index /= values_per_attr;
    }
    return m;
  }

  int64_t index_of(const Meaning& m) const {
    int64_t idx = 0;
    for (int v : m) idx = idx * values_per_attr + v;
    return idx;
  }

  int many_hot_width() const { return num_attributes * values_per_attr; }
};

inline MeaningSpace build_space(int a, int k) {
  if (a < 1 || k < 1)
    throw ValueError("build_space: need a >= 1 and k >= 1, got a=" + std::to_string(a) +
                     " k=" + std::to_string(k));
  // Overflow guard on k^a for the 64-bit index type.
  int64_t n = 1;
  for (int i = 0; i < a; ++i) {
    if (n > std::numeric_limits<int64_t>::max() / k)
      throw ValueError("build_space: k^a overflows the 64-bit index type (a=" +
                       std::to_string(a) + ", k=" + std::to_string(k) + ")");
    n *= k;
  }
  return MeaningSpace{a, k};
}

/// Train/holdout partition with the attribute-overlap exclusion rule:
/// when a >= 3, no train meaning may share 3 or more attribute values
/// (positionally) with any holdout meaning. For a < 3 the rule is vacuous.
struct SplitSpec {
  MeaningSpace space;
  std::vector<int64_t> train;
  std::vector<int64_t> holdout;
  std::vector<int64_t> excluded;
};

inline int shared_attributes(const Meaning& a, const Meaning& b) {
  if (a.size() != b.size())
    throw ValueError("shared_attributes: arity mismatch " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  int n = 0;
  for (size_t i = 0; i < a.size(); ++i) n += a[i] == b[i] ? 1 : 0;
  return n;
}

inline SplitSpec split_holdout(const MeaningSpace& space, int64_t holdout_size, Rng& rng) {
  const int64_t total = space.size();
  if (holdout_size < 0 || holdout_size >= total)
    throw ValueError("split_holdout: holdout size " + std::to_string(holdout_size) +
                     " must be in [0, " + std::to_string(total) + ")");
  SplitSpec split;
  split.space = space;
  split.holdout = rng.sample_indices(total, holdout_size);
  std::sort(split.holdout.begin(), split.holdout.end());

  std::vector<char> is_holdout(static_cast<size_t>(total), 0);
  for (int64_t h : split.holdout) is_holdout[h] = 1;

  std::vector<Meaning> holdout_meanings;
  holdout_meanings.reserve(split.holdout.size());
  for (int64_t h : split.holdout) holdout_meanings.push_back(space.meaning_at(h));

  const bool rule_active = space.num_attributes >= 3;
  for (int64_t i = 0; i < total; ++i) {
    if (is_holdout[i]) continue;
    bool excluded = false;
    if (rule_active) {
      const Meaning m = space.meaning_at(i);
      for (const Meaning& h : holdout_meanings)
        if (shared_attributes(m, h) >= 3) {
          excluded = true;
          break;
        }
    }
    (excluded ? split.excluded : split.train).push_back(i);
  }
  if (split.train.empty())
    throw ValueError("split_holdout: overlap exclusion removed every training meaning");
  return split;
}

/// Many-hot encoding: concatenation of a one-hot blocks of width k.
inline Tensor many_hot(const MeaningSpace& space, const Meaning& m) {
  if (static_cast<int>(m.size()) != space.num_attributes)
    throw ValueError("many_hot: meaning arity " + std::to_string(m.size()) +
                     " does not match space (a=" + std::to_string(space.num_attributes) + ")");
  Tensor t = Tensor::zeros({space.many_hot_width()});
  for (int i = 0; i < space.num_attributes; ++i) {
    if (m[i] < 0 || m[i] >= space.values_per_attr)
      throw ValueError("many_hot: attribute value " + std::to_string(m[i]) +
                       " out of range [0," + std::to_string(space.values_per_attr) + ")");
    t.value()[i * space.values_per_attr + m[i]] = real(1);
  }
  return t;
}

/// Batch of many-hot rows for the given meaning indices: [N, k*a].
inline Tensor many_hot_batch(const MeaningSpace& space, const std::vector<int64_t>& ids) {
  const int w = space.many_hot_width();
  Tensor t = Tensor::zeros({static_cast<int64_t>(ids.size()), w});
  for (size_t r = 0; r < ids.size(); ++r) {
    const Meaning m = space.meaning_at(ids[r]);
    for (int i = 0; i < space.num_attributes; ++i)
      t.value()[r * w + i * space.values_per_attr + m[i]] = real(1);
  }
  return t;
}

/// floor(fraction * |train|) distinct meanings drawn without replacement.
inline std::vector<int64_t> sample_train_subset(const SplitSpec& split, double fraction,
                                                Rng& rng) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw ValueError("sample_train_subset: fraction must be in (0,1], got " +
                     fmt_real(fraction));
  const auto n = static_cast<int64_t>(split.train.size());
  const auto k = static_cast<int64_t>(fraction * static_cast<double>(n));
  if (k == 0)
    throw ValueError("sample_train_subset: fraction " + fmt_real(fraction) +
                     " of " + std::to_string(n) + " training meanings selects nothing");
  std::vector<int64_t> picks = rng.sample_indices(n, k);
  std::vector<int64_t> out(k);
  for (int64_t i = 0; i < k; ++i) out[i] = split.train[picks[i]];
  return out;
}

// --- Split serialization: sections TRAIN/HOLDOUT/EXCLUDED, one meaning per
// line as comma-separated attribute values. ---

inline void save_split(const SplitSpec& split, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("save_split: cannot open '" + path + "' for writing");
  auto section = [&](const char* name, const std::vector<int64_t>& ids) {
    f << name << "\n";
    for (int64_t id : ids) {
      const Meaning m = split.space.meaning_at(id);
      for (size_t i = 0; i < m.size(); ++i) f << (i ? "," : "") << m[i];
      f << "\n";
    }
  };
  section("TRAIN", split.train);
  section("HOLDOUT", split.holdout);
  section("EXCLUDED", split.excluded);
  if (!f) throw IoError("save_split: write to '" + path + "' failed");
}

inline SplitSpec load_split(const MeaningSpace& space, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("load_split: cannot open '" + path + "'");
  SplitSpec split;
  split.space = space;
  std::vector<int64_t>* section = nullptr;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (line == "TRAIN") {
      section = &split.train;
    } else if (line == "HOLDOUT") {
      section = &split.holdout;
    } else if (line == "EXCLUDED") {
      section = &split.excluded;
    } else {
      if (section == nullptr)
        throw IoError("load_split: meaning line before any section header");
      Meaning m;
      size_t pos = 0;
      while (pos <= line.size()) {
        size_t comma = line.find(',', pos);
        if (comma == std::string::npos) comma = line.size();
        m.push_back(std::stoi(line.substr(pos, comma - pos)));
        pos = comma + 1;
      }
      section->push_back(space.index_of(m));
    }
  }
  return split;
}

}  // namespace ilm
