#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ilm/nn.hpp"
#include "ilm/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace ilm;
using testsupport::max_grad_rel_error;
using testsupport::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;
constexpr int kTrials = 20;

// Reduce an op output to a scalar through a fixed random functional so the
// full Jacobian is exercised.
Tensor weighted_total(const Tensor& t, Rng& rng) {
  Tensor w = Tensor::zeros(t.shape());
  for (auto& v : w.value()) v = static_cast<real>(rng.uniform(-1.0, 1.0));
  return sum(mul(t, w));
}

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x = Tensor::from({4}, {0, 0, 0, 0});
  Tensor y = softmax(x);
  for (real v : y.value()) REQUIRE(v == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("softmax rows sum to one within 1e-12") {
  Rng rng(11);
  Tensor x = random_tensor({7, 5}, rng, false);
  Tensor y = softmax(x);
  for (int64_t r = 0; r < 7; ++r) {
    real s = 0;
    for (int64_t c = 0; c < 5; ++c) s += y.value()[r * 5 + c];
    REQUIRE(std::abs(static_cast<double>(s) - 1.0) < 1e-12);
  }
}

TEST_CASE("max_pool2d takes the window maximum") {
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = max_pool2d(x, 2);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  REQUIRE(y.value()[0] == 4);
}

TEST_CASE("conv2d output size is H-K+1 without padding") {
  Rng rng(3);
  Tensor x = random_tensor({1, 1, 32, 32}, rng, false);
  Tensor w = random_tensor({2, 1, 3, 3}, rng, false);
  Tensor b = Tensor::zeros({2});
  Tensor y = conv2d(x, w, b, 0);
  REQUIRE(y.shape() == Shape{1, 2, 30, 30});
}

TEST_CASE("shape mismatches raise typed errors naming the op") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 3});
  REQUIRE_THROWS_AS(add(a, b), ShapeError);
  REQUIRE_THROWS_WITH(add(a, b), Catch::Matchers::ContainsSubstring("add"));
  REQUIRE_THROWS_AS(matmul(a, Tensor::zeros({2, 2})), ShapeError);
  REQUIRE_THROWS_WITH(matmul(a, Tensor::zeros({2, 2})),
                      Catch::Matchers::ContainsSubstring("matmul"));
}

TEST_CASE("sigmoid gradient at zero is one quarter") {
  Tensor x = Tensor::param({1});
  x.value()[0] = 0;
  Graph g;
  {
    Graph::Scope scope(g);
    Tensor y = sum(sigmoid(x));
    g.backward(y);
  }
  REQUIRE(x.grad()[0] == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("softmax cross-entropy gradient equals softmax minus one-hot") {
  Tensor logits = Tensor::param({1, 4});
  logits.value() = {0.3, -1.2, 2.0, 0.1};
  const std::vector<int> target = {2};
  Graph g;
  {
    Graph::Scope scope(g);
    Tensor loss = cross_entropy(logits, target);
    g.backward(loss);
  }
  Tensor probs = softmax(logits.detach());
  for (int j = 0; j < 4; ++j) {
    const double expect =
        static_cast<double>(probs.value()[j]) - (j == target[0] ? 1.0 : 0.0);
    REQUIRE(static_cast<double>(logits.grad()[j]) == Catch::Approx(expect).margin(1e-12));
  }
}

TEST_CASE("matmul chain gradient matches central finite differences") {
  Rng rng(17);
  Tensor a = random_tensor({2, 2}, rng);
  Tensor b = random_tensor({2, 2}, rng);
  Tensor c = random_tensor({2, 2}, rng);
  Rng wrng(18);
  const double err = max_grad_rel_error({a, b, c}, [&] {
    Rng local(18);
    return weighted_total(matmul(matmul(a, b), c), local);
  });
  REQUIRE(err < kGradTol);
}

TEST_CASE("every differentiable kernel passes finite-difference checks") {
  struct Kernel {
    const char* name;
    std::function<double(uint64_t)> run;  // returns max rel error for one seed
  };

  auto simple = [](auto make_inputs, auto apply) {
    return [make_inputs, apply](uint64_t seed) {
      Rng rng(seed);
      std::vector<Tensor> inputs = make_inputs(rng);
      return max_grad_rel_error(inputs, [&] {
        Rng wr(seed + 1000);
        return weighted_total(apply(inputs), wr);
      });
    };
  };

  std::vector<Kernel> kernels;
  kernels.push_back({"add", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
      [](std::vector<Tensor>& in) { return add(in[0], in[1]); })});
  kernels.push_back({"add_bias", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 5}, r), random_tensor({5}, r)}; },
      [](std::vector<Tensor>& in) { return add_bias(in[0], in[1]); })});
  kernels.push_back({"mul", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 5}, r), random_tensor({2, 5}, r)}; },
      [](std::vector<Tensor>& in) { return mul(in[0], in[1]); })});
  kernels.push_back({"affine", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 3}, r)}; },
      [](std::vector<Tensor>& in) { return affine(in[0], real(-1.7), real(0.4)); })});
  kernels.push_back({"matmul", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({4, 2}, r)}; },
      [](std::vector<Tensor>& in) { return matmul(in[0], in[1]); })});
  kernels.push_back({"embedding", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({5, 3}, r)}; },
      [](std::vector<Tensor>& in) { return embedding(in[0], {4, 1, 1, 0}); })});
  kernels.push_back({"sigmoid", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 4}, r)}; },
      [](std::vector<Tensor>& in) { return sigmoid(in[0]); })});
  kernels.push_back({"tanh", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 4}, r)}; },
      [](std::vector<Tensor>& in) { return ilm::tanh(in[0]); })});
  kernels.push_back({"relu", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 4}, r, true, 1e-2)}; },
      [](std::vector<Tensor>& in) { return relu(in[0]); })});
  kernels.push_back({"softmax", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 5}, r)}; },
      [](std::vector<Tensor>& in) { return softmax(in[0]); })});
  kernels.push_back({"log_softmax", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 5}, r)}; },
      [](std::vector<Tensor>& in) { return log_softmax(in[0]); })});
  kernels.push_back({"pick", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 3}, r)}; },
      [](std::vector<Tensor>& in) { return pick(in[0], {2, 0, 1, 2}); })});
  kernels.push_back({"sum", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 3}, r)}; },
      [](std::vector<Tensor>& in) { return ilm::sum(in[0]); })});
  kernels.push_back({"mean", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 3}, r)}; },
      [](std::vector<Tensor>& in) { return mean(in[0]); })});
  kernels.push_back({"concat_rows", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({5}, r), random_tensor({5}, r), random_tensor({2, 5}, r)}; },
      [](std::vector<Tensor>& in) { return concat_rows({in[0], in[1], in[2]}); })});
  kernels.push_back({"slice_cols", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 5}, r)}; },
      [](std::vector<Tensor>& in) { return slice_cols(in[0], 1, 4); })});
  kernels.push_back({"reshape", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r)}; },
      [](std::vector<Tensor>& in) { return reshape(in[0], {2, 6}); })});
  kernels.push_back({"mse", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; },
      [](std::vector<Tensor>& in) { return mse(in[0], in[1]); })});
  kernels.push_back({"cross_entropy", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({4, 5}, r)}; },
      [](std::vector<Tensor>& in) { return cross_entropy(in[0], {0, 4, 2, 1}); })});
  kernels.push_back({"conv2d", simple(
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({2, 2, 5, 5}, r), random_tensor({2, 2, 3, 3}, r),
                                   random_tensor({2}, r)};
      },
      [](std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], 0); })});
  kernels.push_back({"conv2d_padded", simple(
      [](Rng& r) {
        return std::vector<Tensor>{random_tensor({1, 2, 4, 4}, r), random_tensor({3, 2, 3, 3}, r),
                                   random_tensor({3}, r)};
      },
      [](std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], 1); })});
  kernels.push_back({"max_pool2d", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({2, 2, 4, 4}, r, true, 1e-2)}; },
      [](std::vector<Tensor>& in) { return max_pool2d(in[0], 2); })});
  kernels.push_back({"dropout", [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = random_tensor({4, 4}, rng);
    return max_grad_rel_error({x}, [&, seed] {
      Rng mask_rng(seed + 7);  // same mask on every evaluation
      Rng wr(seed + 1000);
      return weighted_total(dropout(x, real(0.7), mask_rng), wr);
    });
  }});
  kernels.push_back({"candidate_scores", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r)}; },
      [](std::vector<Tensor>& in) {
        Rng cr(99);
        Tensor cands = random_tensor({3, 2, 4}, cr, false);
        return candidate_scores(in[0], cands);
      })});
  kernels.push_back({"softmax_entropy", simple(
      [](Rng& r) { return std::vector<Tensor>{random_tensor({3, 4}, r)}; },
      [](std::vector<Tensor>& in) { return softmax_entropy(in[0]); })});
  kernels.push_back({"gru_cell", [](uint64_t seed) {
    Rng rng(seed);
    GruParams p(4, 3, rng);
    Tensor x = random_tensor({2, 4}, rng);
    Tensor h = random_tensor({2, 3}, rng);
    std::vector<Tensor> all = {x, h, p.wxz, p.whz, p.bz, p.wxr, p.whr, p.br,
                               p.wxn, p.whn, p.bn};
    return max_grad_rel_error(all, [&, seed] {
      Rng wr(seed + 1000);
      return weighted_total(gru_cell(x, h, p), wr);
    });
  }});

  for (const auto& k : kernels) {
    DYNAMIC_SECTION("kernel " << k.name) {
      double worst = 0;
      for (int trial = 0; trial < kTrials; ++trial)
        worst = std::max(worst, k.run(123 + 31 * trial));
      INFO("max relative error " << worst);
      REQUIRE(worst < kGradTol);
    }
  }
}

TEST_CASE("backward validates its contract") {
  Tensor x = Tensor::param({3});
  Graph g;
  {
    Graph::Scope scope(g);
    Tensor y = affine(x, 2, 0);
    REQUIRE_THROWS_AS(g.backward(y), ValueError);  // non-scalar
    Tensor loss = sum(y);
    g.backward(loss);
    REQUIRE_THROWS_AS(g.backward(loss), Error);  // consumed
  }
  {
    Graph g2;
    Graph::Scope scope(g2);
    Tensor unrelated = Tensor::scalar(1.0);
    REQUIRE_THROWS_AS(g2.backward(unrelated), ValueError);  // not in graph
  }
}

TEST_CASE("no recording happens outside a graph scope") {
  Tensor x = Tensor::param({2, 2});
  Tensor y = sigmoid(x);
  REQUIRE_FALSE(y.tracked());
  Graph g;
  {
    Graph::Scope scope(g);
    Graph::NoGrad off;
    Tensor z = sigmoid(x);
    REQUIRE_FALSE(z.tracked());
  }
  REQUIRE(g.size() == 0);
}

TEST_CASE("gru_cell with zero weights maps zero hidden state to zero") {
  Rng rng(5);
  GruParams p(3, 3, rng);
  for (Tensor* t : {&p.wxz, &p.whz, &p.bz, &p.wxr, &p.whr, &p.br, &p.wxn, &p.whn, &p.bn})
    std::fill(t->value().begin(), t->value().end(), real(0));
  Tensor x = random_tensor({2, 3}, rng, false);
  Tensor h = Tensor::zeros({2, 3});
  Tensor out = gru_cell(x, h, p);
  for (real v : out.value()) REQUIRE(v == 0);
}

TEST_CASE("gru_cell rejects mismatched dimensions") {
  Rng rng(6);
  GruParams p(4, 3, rng);
  REQUIRE_THROWS_AS(gru_cell(Tensor::zeros({2, 5}), Tensor::zeros({2, 3}), p), ShapeError);
  REQUIRE_THROWS_AS(gru_cell(Tensor::zeros({2, 4}), Tensor::zeros({2, 2}), p), ShapeError);
}

TEST_CASE("repeated gru application is bitwise deterministic") {
  auto run = [] {
    Rng rng(42);
    GruParams p(3, 3, rng);
    Tensor x = random_tensor({2, 3}, rng, false);
    Tensor h = Tensor::zeros({2, 3});
    for (int i = 0; i < 5; ++i) h = gru_cell(x, h, p);
    return h.value();
  };
  REQUIRE(run() == run());
}

TEST_CASE("training loop is bitwise deterministic under a fixed seed") {
  auto run = [] {
    Rng rng(99);
    Linear l1(4, 6, rng), l2(6, 2, rng);
    ParamMap params;
    l1.collect(params, "l1");
    l2.collect(params, "l2");
    RmsProp opt(params, {real(1e-2), real(0.9), real(1e-8)});
    Tensor x = random_tensor({5, 4}, rng, false);
    std::vector<int> targets = {0, 1, 0, 1, 1};
    for (int step = 0; step < 20; ++step) {
      Graph g;
      Graph::Scope scope(g);
      Tensor loss = cross_entropy(l2(ilm::tanh(l1(x))), targets);
      opt.zero_grad();
      g.backward(loss);
      opt.step();
    }
    std::vector<real> flat;
    for (auto& [name, t] : params)
      flat.insert(flat.end(), t.value().begin(), t.value().end());
    return flat;
  };
  REQUIRE(run() == run());
}

TEST_CASE("rmsprop leaves parameters unchanged when gradients are zero") {
  Tensor p = Tensor::param({3});
  p.value() = {1, 2, 3};
  RmsProp opt({{"p", p}});
  opt.step();
  REQUIRE(p.value() == std::vector<real>{1, 2, 3});
}

TEST_CASE("rmsprop scalar update matches the hand-evaluated formula") {
  Tensor p = Tensor::param({1});
  p.value()[0] = 0;
  p.grad()[0] = 1;
  const real lr = real(0.1), decay = real(0.9), eps = real(1e-8);
  RmsProp opt({{"p", p}}, {lr, decay, eps});
  opt.step();
  // acc = 0.9*0 + 0.1*1^2 = 0.1 ; delta = 0.1 * 1 / (sqrt(0.1) + 1e-8)
  const double expect = -0.1 * 1.0 / (std::sqrt(0.1) + 1e-8);
  REQUIRE(static_cast<double>(p.value()[0]) == Catch::Approx(expect).epsilon(1e-12));
  REQUIRE(opt.accumulator(0)[0] >= 0);
}

TEST_CASE("rmsprop update magnitude shrinks under identical gradients") {
  Tensor p = Tensor::param({1});
  RmsProp opt({{"p", p}}, {real(0.1), real(0.9), real(1e-8)});
  p.grad()[0] = 1;
  const real before = p.value()[0];
  opt.step();
  const real d1 = std::abs(p.value()[0] - before);
  p.grad()[0] = 1;
  const real mid = p.value()[0];
  opt.step();
  const real d2 = std::abs(p.value()[0] - mid);
  REQUIRE(d2 < d1);
}

TEST_CASE("rmsprop aborts on non-finite gradients naming the parameter") {
  Tensor p = Tensor::param({2});
  p.grad()[1] = std::numeric_limits<real>::quiet_NaN();
  RmsProp opt({{"sender.gru.wxz", p}});
  REQUIRE_THROWS_AS(opt.step(), NumericError);
  try {
    opt.step();
  } catch (const NumericError& e) {
    REQUIRE(std::string(e.what()).find("sender.gru.wxz") != std::string::npos);
  }
}

TEST_CASE("checkpoint save/load round-trips parameter values exactly") {
  Rng rng(7);
  Linear l(3, 4, rng);
  ParamMap params;
  l.collect(params, "layer");
  const std::string path = "test_ckpt.bin";
  save_params(params, path);
  const std::vector<real> saved_w = l.w.value();
  for (auto& v : l.w.value()) v = 0;
  load_params(params, path);
  REQUIRE(l.w.value() == saved_w);
  std::remove(path.c_str());
}
