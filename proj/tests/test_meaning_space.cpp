#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "ilm/meaning_space.hpp"

using namespace ilm;

TEST_CASE("build_space sizes") {
  REQUIRE(build_space(2, 33).size() == 1089);
  REQUIRE(build_space(5, 10).size() == 100000);
  REQUIRE(build_space(1, 1).size() == 1);
}

TEST_CASE("build_space rejects overflowing spaces and bad arguments") {
  REQUIRE_THROWS_AS(build_space(64, 10), ValueError);
  REQUIRE_THROWS_AS(build_space(0, 5), ValueError);
  REQUIRE_THROWS_AS(build_space(2, 0), ValueError);
}

TEST_CASE("meaning index round-trip") {
  MeaningSpace s = build_space(3, 5);
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto idx = static_cast<int64_t>(rng.below(s.size()));
    REQUIRE(s.index_of(s.meaning_at(idx)) == idx);
  }
}

namespace {

void check_split_invariants(const SplitSpec& split) {
  const MeaningSpace& space = split.space;
  std::set<int64_t> train(split.train.begin(), split.train.end());
  std::set<int64_t> holdout(split.holdout.begin(), split.holdout.end());
  std::set<int64_t> excluded(split.excluded.begin(), split.excluded.end());
  // Disjoint and covering.
  for (int64_t t : train) {
    REQUIRE(holdout.count(t) == 0);
    REQUIRE(excluded.count(t) == 0);
  }
  for (int64_t e : excluded) REQUIRE(holdout.count(e) == 0);
  REQUIRE(static_cast<int64_t>(train.size() + holdout.size() + excluded.size()) ==
          space.size());
  // Overlap rule, brute force over all train x holdout pairs.
  if (space.num_attributes >= 3) {
    for (int64_t t : split.train) {
      const Meaning m = space.meaning_at(t);
      for (int64_t h : split.holdout)
        REQUIRE(shared_attributes(m, space.meaning_at(h)) < 3);
    }
  }
}

}  // namespace

TEST_CASE("split of 33^2 leaves 961 training meanings, none excluded") {
  MeaningSpace s = build_space(2, 33);
  Rng rng(1);
  SplitSpec split = split_holdout(s, 128, rng);
  REQUIRE(split.holdout.size() == 128);
  REQUIRE(split.train.size() == 961);
  REQUIRE(split.excluded.empty());  // cannot share 3 of 2 attributes
  check_split_invariants(split);
}

TEST_CASE("split of 10^5 obeys the overlap exclusion rule exhaustively") {
  MeaningSpace s = build_space(5, 10);
  Rng rng(2);
  SplitSpec split = split_holdout(s, 128, rng);
  REQUIRE(split.holdout.size() == 128);
  REQUIRE(static_cast<int64_t>(split.train.size()) ==
          100000 - 128 - static_cast<int64_t>(split.excluded.size()));
  REQUIRE(!split.excluded.empty());  // sharing >=3 of 5 attributes is common
  check_split_invariants(split);
}

TEST_CASE("split of 5^2 with holdout 24 partitions all 25 meanings") {
  MeaningSpace s = build_space(2, 5);
  Rng rng(3);
  SplitSpec split = split_holdout(s, 24, rng);
  REQUIRE(split.train.size() == 1);
  REQUIRE(split.holdout.size() == 24);
  check_split_invariants(split);
}

TEST_CASE("split invariants hold across a randomized (a,k,seed) sweep") {
  Rng sweep(77);
  for (int trial = 0; trial < 12; ++trial) {
    const int a = 1 + static_cast<int>(sweep.below(5));
    const int k = 2 + static_cast<int>(sweep.below(11));
    MeaningSpace s = build_space(a, k);
    if (s.size() > 30000) continue;
    const auto holdout = static_cast<int64_t>(sweep.below(std::min<int64_t>(s.size(), 64)));
    Rng rng(1000 + trial);
    try {
      SplitSpec split = split_holdout(s, holdout, rng);
      check_split_invariants(split);
    } catch (const ValueError&) {
      // Exclusion emptied the train set: legal outcome for tiny spaces.
    }
  }
}

TEST_CASE("split_holdout is deterministic given the seed") {
  MeaningSpace s = build_space(3, 6);
  Rng r1(5), r2(5);
  SplitSpec a = split_holdout(s, 20, r1);
  SplitSpec b = split_holdout(s, 20, r2);
  REQUIRE(a.train == b.train);
  REQUIRE(a.holdout == b.holdout);
  REQUIRE(a.excluded == b.excluded);
}

TEST_CASE("split_holdout rejects a holdout covering the space") {
  MeaningSpace s = build_space(1, 3);
  Rng rng(6);
  REQUIRE_THROWS_AS(split_holdout(s, 3, rng), ValueError);
}

TEST_CASE("many_hot places one-hot blocks") {
  MeaningSpace s = build_space(2, 3);
  Tensor t = many_hot(s, {0, 2});
  REQUIRE(t.value() == std::vector<real>{1, 0, 0, 0, 0, 1});

  MeaningSpace wide = build_space(2, 33);
  Tensor u = many_hot(wide, {5, 7});
  REQUIRE(u.numel() == 66);
  for (int64_t i = 0; i < u.numel(); ++i) {
    const bool expect_one = i == 5 || i == 33 + 7;
    REQUIRE(u.value()[i] == (expect_one ? 1 : 0));
  }
}

TEST_CASE("many_hot sums to the attribute count") {
  MeaningSpace s = build_space(4, 6);
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Meaning m = s.meaning_at(static_cast<int64_t>(rng.below(s.size())));
    Tensor t = many_hot(s, m);
    real total = 0;
    for (real v : t.value()) total += v;
    REQUIRE(total == static_cast<real>(s.num_attributes));
  }
}

TEST_CASE("many_hot is injective over the space") {
  MeaningSpace s = build_space(3, 4);
  std::set<std::vector<real>> seen;
  for (int64_t i = 0; i < s.size(); ++i)
    seen.insert(many_hot(s, s.meaning_at(i)).value());
  REQUIRE(static_cast<int64_t>(seen.size()) == s.size());
}

TEST_CASE("many_hot_batch matches per-meaning encodings") {
  MeaningSpace s = build_space(2, 4);
  std::vector<int64_t> ids = {0, 7, 15};
  Tensor batch = many_hot_batch(s, ids);
  REQUIRE(batch.shape() == Shape{3, 8});
  for (size_t r = 0; r < ids.size(); ++r) {
    Tensor single = many_hot(s, s.meaning_at(ids[r]));
    for (int64_t c = 0; c < 8; ++c)
      REQUIRE(batch.value()[r * 8 + c] == single.value()[c]);
  }
}

TEST_CASE("sample_train_subset draws floor(fraction * train) distinct meanings") {
  MeaningSpace s = build_space(2, 33);
  Rng rng(9);
  SplitSpec split = split_holdout(s, 128, rng);
  Rng draw(10);
  const auto subset = sample_train_subset(split, 0.4, draw);
  REQUIRE(subset.size() == 384);  // floor(0.4 * 961)
  std::set<int64_t> train(split.train.begin(), split.train.end());
  std::set<int64_t> unique(subset.begin(), subset.end());
  REQUIRE(unique.size() == subset.size());
  for (int64_t id : subset) REQUIRE(train.count(id) == 1);
}

TEST_CASE("sample_train_subset at fraction 1 is a permutation of train") {
  MeaningSpace s = build_space(2, 5);
  Rng rng(11);
  SplitSpec split = split_holdout(s, 5, rng);
  Rng draw(12);
  auto subset = sample_train_subset(split, 1.0, draw);
  auto sorted_subset = subset;
  std::sort(sorted_subset.begin(), sorted_subset.end());
  auto sorted_train = split.train;
  std::sort(sorted_train.begin(), sorted_train.end());
  REQUIRE(sorted_subset == sorted_train);
}

TEST_CASE("sample_train_subset is deterministic and validates fraction") {
  MeaningSpace s = build_space(2, 10);
  Rng rng(13);
  SplitSpec split = split_holdout(s, 10, rng);
  Rng d1(14), d2(14);
  REQUIRE(sample_train_subset(split, 0.5, d1) == sample_train_subset(split, 0.5, d2));
  Rng d3(15);
  REQUIRE_THROWS_AS(sample_train_subset(split, 1.5, d3), ValueError);
  REQUIRE_THROWS_AS(sample_train_subset(split, 0.0, d3), ValueError);
  REQUIRE_THROWS_AS(sample_train_subset(split, 0.001, d3), ValueError);  // selects nothing
}

TEST_CASE("split file round-trip preserves all three sections") {
  MeaningSpace s = build_space(3, 5);
  Rng rng(16);
  SplitSpec split = split_holdout(s, 12, rng);
  const std::string path = "test_split.txt";
  save_split(split, path);
  SplitSpec loaded = load_split(s, path);
  REQUIRE(loaded.train == split.train);
  REQUIRE(loaded.holdout == split.holdout);
  REQUIRE(loaded.excluded == split.excluded);
  std::remove(path.c_str());
}
