#pragma once

#include <array>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ilm/tensor.hpp"

namespace ilm {

// Object palette: 9 well-separated RGB colors.
inline const std::vector<std::array<real, 3>>& object_palette() {
  static const std::vector<std::array<real, 3>> p = {
      {real(1.0), real(0.0), real(0.0)}, {real(0.0), real(1.0), real(0.0)},
      {real(0.0), real(0.0), real(1.0)}, {real(1.0), real(1.0), real(0.0)},
      {real(1.0), real(0.0), real(1.0)}, {real(0.0), real(1.0), real(1.0)},
      {real(1.0), real(1.0), real(1.0)}, {real(1.0), real(0.5), real(0.0)},
      {real(0.5), real(0.0), real(1.0)}};
  return p;
}

// Muted ground colors, disjoint from the object palette.
inline const std::vector<std::array<real, 3>>& ground_palette() {
  static const std::vector<std::array<real, 3>> p = {
      {real(0.12), real(0.12), real(0.12)},
      {real(0.22), real(0.18), real(0.12)},
      {real(0.12), real(0.20), real(0.12)},
      {real(0.10), real(0.14), real(0.22)}};
  return p;
}

constexpr int kShapeCount = 6;  // square, circle, triangle, diamond, plus, ring
constexpr int kShapePx = 11;    // side of the shape bounding box

/// True iff local pixel (r,c) of an 11x11 box belongs to the shape.
inline bool shape_mask(int shape_id, int r, int c) {
  const int dr = r - 5, dc = c - 5;
  switch (shape_id) {
    case 0: return true;                                   // square
    case 1: return dr * dr + dc * dc <= 25;                // circle
    case 2: return 2 * std::abs(dc) <= r;                  // triangle
    case 3: return std::abs(dr) + std::abs(dc) <= 5;       // diamond
    case 4: return std::abs(dr) <= 1 || std::abs(dc) <= 1; // plus
    case 5: {                                              // ring
      const int d2 = dr * dr + dc * dc;
      return d2 >= 9 && d2 <= 25;
    }
    default:
      throw IndexError("shape_mask: unknown shape id " + std::to_string(shape_id));
  }
}

struct SceneObject {
  int shape = 0;
  int color = 0;
  int row = 0;
  int col = 0;
};

/// Scene description: colored shapes on a ground plane. Shapes are unique
/// within one scene; objects stay inside the canvas and do not overlap.
struct SceneSpec {
  std::vector<SceneObject> objects;
  int ground = 0;
  int hw = 32;
};

/// Flat-shaded raster render: [H,W,3] with values in [0,1]. Pure function
/// of the spec.
inline Tensor render(const SceneSpec& spec) {
  const int hw = spec.hw;
  Tensor img = Tensor::zeros({hw, hw, 3});
  const auto& gp = ground_palette();
  if (spec.ground < 0 || spec.ground >= static_cast<int>(gp.size()))
    throw IndexError("render: ground color " + std::to_string(spec.ground) +
                     " outside the ground palette");
  for (int r = 0; r < hw; ++r)
    for (int c = 0; c < hw; ++c)
      for (int ch = 0; ch < 3; ++ch)
        img.value()[(r * hw + c) * 3 + ch] = gp[spec.ground][ch];
  const auto& pal = object_palette();
  for (const SceneObject& o : spec.objects) {
    if (o.color < 0 || o.color >= static_cast<int>(pal.size()))
      throw IndexError("render: object color " + std::to_string(o.color) +
                       " outside the palette");
    if (o.row < 0 || o.col < 0 || o.row + kShapePx > hw || o.col + kShapePx > hw)
      throw ValueError("render: object at (" + std::to_string(o.row) + "," +
                       std::to_string(o.col) + ") leaves the canvas");
    for (int r = 0; r < kShapePx; ++r)
      for (int c = 0; c < kShapePx; ++c)
        if (shape_mask(o.shape, r, c))
          for (int ch = 0; ch < 3; ++ch)
            img.value()[((o.row + r) * hw + o.col + c) * 3 + ch] = pal[o.color][ch];
  }
  return img;
}

/// Shape->color map of a scene (shapes are unique per scene).
inline std::map<int, int> color_map(const SceneSpec& s) {
  std::map<int, int> m;
  for (const SceneObject& o : s.objects) m[o.shape] = o.color;
  return m;
}

/// Two scenes match iff their shape sets are identical and identically
/// colored. Positions and ground color are irrelevant.
inline bool match(const SceneSpec& a, const SceneSpec& b) {
  return color_map(a) == color_map(b);
}

/// Attribute tuple of a scene for distance computations: (shape, color)
/// pairs sorted by shape id, flattened.
inline std::vector<int> scene_tuple(const SceneSpec& s) {
  std::vector<int> t;
  for (const auto& [shape, color] : color_map(s)) {
    t.push_back(shape);
    t.push_back(color);
  }
  return t;
}

struct ReferentialExample {
  SceneSpec sender;
  SceneSpec target;
  std::vector<SceneSpec> distractors;
  int target_index = 0;  // position of the target among 1+D candidates

  /// Candidates in presentation order: target at target_index.
  std::vector<const SceneSpec*> candidates() const {
    std::vector<const SceneSpec*> c;
    size_t d = 0;
    for (int i = 0; i < static_cast<int>(distractors.size()) + 1; ++i) {
      if (i == target_index)
        c.push_back(&target);
      else
        c.push_back(&distractors[d++]);
    }
    return c;
  }
};

struct SceneDataset {
  int n_shapes = 1;
  int n_distractors = 4;
  int hw = 32;
  std::vector<ReferentialExample> train;
  std::vector<ReferentialExample> holdout;
};

namespace detail {

// Non-overlapping placement: four corner slots pulled inward by a jitter,
// guaranteeing disjoint bounding boxes on a 32px canvas.
inline std::pair<int, int> slot_position(int slot, int hw, Rng& rng) {
  const int j1 = static_cast<int>(rng.below(6));
  const int j2 = static_cast<int>(rng.below(6));
  const int hi = hw - kShapePx;
  switch (slot) {
    case 0: return {j1, j2};
    case 1: return {j1, hi - j2};
    case 2: return {hi - j1, j2};
    default: return {hi - j1, hi - j2};
  }
}

inline void place_objects(SceneSpec& spec, Rng& rng) {
  const int n = static_cast<int>(spec.objects.size());
  if (n == 1) {
    // Single object: anywhere on the canvas.
    spec.objects[0].row = static_cast<int>(rng.below(spec.hw - kShapePx + 1));
    spec.objects[0].col = static_cast<int>(rng.below(spec.hw - kShapePx + 1));
    return;
  }
  std::vector<int> slots = {0, 1, 2, 3};
  rng.shuffle(slots);
  for (int i = 0; i < n; ++i) {
    auto [r, c] = slot_position(slots[i], spec.hw, rng);
    spec.objects[i].row = r;
    spec.objects[i].col = c;
  }
}

inline std::vector<int> position_tuple(const ReferentialExample& ex) {
  std::vector<int> t;
  for (const SceneSpec* s : {&ex.sender, &ex.target})
    for (const SceneObject& o : s->objects) {
      t.push_back(o.row);
      t.push_back(o.col);
    }
  return t;
}

}  // namespace detail

/// Builds the referential dataset. For n_shapes >= 2 the holdout reserves
/// (shape, color) combinations never used by training targets; for
/// n_shapes == 1 holdout examples use position configurations absent from
/// training instead.
inline SceneDataset build_dataset(int n_shapes, int n_distractors, int64_t train_size,
                                  int64_t holdout_size, Rng& rng, int hw = 32) {
  if (n_shapes < 1 || n_shapes > 3)
    throw ValueError("build_dataset: n_shapes must be in {1,2,3}, got " +
                     std::to_string(n_shapes));
  if (n_distractors < 1)
    throw ValueError("build_dataset: need at least one distractor");
  if (hw < 2 * (kShapePx + 5))
    throw ValueError("build_dataset: canvas " + std::to_string(hw) +
                     "px too small; need >= " + std::to_string(2 * (kShapePx + 5)));
  const int n_colors = static_cast<int>(object_palette().size());
  const int reserve = 3;  // holdout colors per shape
  if (n_shapes >= 2 && (reserve < 2 || n_colors - reserve < 2))
    throw ConfigError(
        "build_dataset: cannot reserve holdout colors; palette of " +
        std::to_string(n_colors) + " colors leaves " + std::to_string(n_colors - reserve) +
        " train / " + std::to_string(reserve) +
        " holdout per shape, need >= 2 on each side for distractor color changes");

  // Per-shape color split (varies by shape so a color can be a train color
  // for one shape and a holdout color for another).
  std::vector<std::vector<int>> train_colors(kShapeCount), holdout_colors(kShapeCount);
  for (int s = 0; s < kShapeCount; ++s) {
    std::vector<int> all(n_colors);
    for (int c = 0; c < n_colors; ++c) all[c] = c;
    rng.shuffle(all);
    if (n_shapes >= 2) {
      holdout_colors[s].assign(all.begin(), all.begin() + reserve);
      train_colors[s].assign(all.begin() + reserve, all.end());
    } else {
      train_colors[s] = all;
      holdout_colors[s] = all;
    }
  }

  const auto n_grounds = static_cast<uint64_t>(ground_palette().size());
  auto make_example = [&](bool holdout) {
    const auto& colors = holdout ? holdout_colors : train_colors;
    ReferentialExample ex;
    std::vector<int> shapes(kShapeCount);
    for (int s = 0; s < kShapeCount; ++s) shapes[s] = s;
    rng.shuffle(shapes);
    shapes.resize(n_shapes);

    SceneSpec base;
    base.hw = hw;
    for (int s : shapes) {
      SceneObject o;
      o.shape = s;
      o.color = colors[s][rng.below(colors[s].size())];
      base.objects.push_back(o);
    }

    auto instantiate = [&](SceneSpec spec) {
      spec.ground = static_cast<int>(rng.below(n_grounds));
      detail::place_objects(spec, rng);
      return spec;
    };
    ex.sender = instantiate(base);
    ex.target = instantiate(base);
    for (int d = 0; d < n_distractors; ++d) {
      SceneSpec distr = base;
      const int which = static_cast<int>(rng.below(distr.objects.size()));
      SceneObject& o = distr.objects[which];
      const auto& pool = colors[o.shape];
      int replacement = o.color;
      while (replacement == o.color)
        replacement = pool[rng.below(pool.size())];
      o.color = replacement;
      ex.distractors.push_back(instantiate(distr));
    }
    ex.target_index = static_cast<int>(rng.below(n_distractors + 1));
    return ex;
  };

  SceneDataset ds;
  ds.n_shapes = n_shapes;
  ds.n_distractors = n_distractors;
  ds.hw = hw;

  std::set<std::vector<int>> train_positions;
  for (int64_t i = 0; i < train_size; ++i) {
    ds.train.push_back(make_example(false));
    if (n_shapes == 1) train_positions.insert(detail::position_tuple(ds.train.back()));
  }
  for (int64_t i = 0; i < holdout_size; ++i) {
    if (n_shapes == 1) {
      // Re-draw until the (sender, target) position configuration is unseen.
      const int64_t max_tries = 10000;
      int64_t tries = 0;
      for (;;) {
        ReferentialExample ex = make_example(true);
        if (train_positions.count(detail::position_tuple(ex)) == 0) {
          ds.holdout.push_back(std::move(ex));
          break;
        }
        if (++tries >= max_tries)
          throw ConfigError(
              "build_dataset: cannot find unseen geometrical configurations; "
              "position space exhausted by " +
              std::to_string(train_size) + " training examples");
      }
    } else {
      ds.holdout.push_back(make_example(true));
    }
  }
  return ds;
}

/// Batch of rendered images in NCHW layout for the perception network.
inline Tensor render_batch_chw(const std::vector<const SceneSpec*>& specs) {
  if (specs.empty()) throw ValueError("render_batch_chw: empty batch");
  const int hw = specs[0]->hw;
  const auto n = static_cast<int64_t>(specs.size());
  Tensor out = Tensor::zeros({n, 3, hw, hw});
  for (int64_t i = 0; i < n; ++i) {
    Tensor img = render(*specs[i]);  // [H,W,3]
    for (int r = 0; r < hw; ++r)
      for (int c = 0; c < hw; ++c)
        for (int ch = 0; ch < 3; ++ch)
          out.value()[((i * 3 + ch) * hw + r) * hw + c] =
              img.value()[(r * hw + c) * 3 + ch];
  }
  return out;
}

// --- Dataset export: pipe-separated manifest of specs plus a flat binary
// of rendered tensors (u64 LE header: count, H, W, C; then row-major
// float64 values). ---

namespace detail {
inline std::string scene_field(const SceneSpec& s) {
  std::string f = std::to_string(s.ground);
  for (const SceneObject& o : s.objects)
    f += ";" + std::to_string(o.shape) + "," + std::to_string(o.color) + "," +
         std::to_string(o.row) + "," + std::to_string(o.col);
  return f;
}
}  // namespace detail

inline void export_dataset(const SceneDataset& ds, const std::string& manifest_path,
                           const std::string& tensors_path) {
  std::ofstream mf(manifest_path);
  if (!mf) throw IoError("export_dataset: cannot open '" + manifest_path + "'");
  std::ofstream bf(tensors_path, std::ios::binary);
  if (!bf) throw IoError("export_dataset: cannot open '" + tensors_path + "'");

  const uint64_t per_example = 2 + static_cast<uint64_t>(ds.n_distractors);
  const uint64_t count = per_example * (ds.train.size() + ds.holdout.size());
  const uint64_t header[4] = {count, static_cast<uint64_t>(ds.hw),
                              static_cast<uint64_t>(ds.hw), 3};
  bf.write(reinterpret_cast<const char*>(header), sizeof(header));

  auto write_image = [&](const SceneSpec& spec) {
    Tensor img = render(spec);
    for (real v : img.value()) {
      const double d = static_cast<double>(v);
      bf.write(reinterpret_cast<const char*>(&d), sizeof(d));
    }
  };
  auto write_section = [&](const std::vector<ReferentialExample>& exs, const char* name) {
    for (size_t i = 0; i < exs.size(); ++i) {
      const ReferentialExample& ex = exs[i];
      mf << name << "|" << i << "|" << ex.target_index << "|"
         << detail::scene_field(ex.sender) << "|" << detail::scene_field(ex.target);
      for (const SceneSpec& d : ex.distractors) mf << "|" << detail::scene_field(d);
      mf << "\n";
      write_image(ex.sender);
      write_image(ex.target);
      for (const SceneSpec& d : ex.distractors) write_image(d);
    }
  };
  write_section(ds.train, "train");
  write_section(ds.holdout, "holdout");
  if (!mf || !bf) throw IoError("export_dataset: write failed");
}

}  // namespace ilm
