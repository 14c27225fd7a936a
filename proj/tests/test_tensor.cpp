#include <doctest.h>

#include <cmath>
#include <cstring>
#include <memory>

#include "fireedit/tensor.hpp"
#include "test_support.hpp"

using namespace fireedit;
using fireedit::testing::gradcheck;
using fireedit::testing::random_tensor;
using fireedit::testing::weighted_sum;
using TD = Tensor<double>;

namespace {

TD mat(std::size_t r, std::size_t c, std::vector<double> v) { return TD({r, c}, std::move(v)); }

}  // namespace

TEST_CASE("matmul: identity and hand arithmetic") {
  const TD a = mat(2, 2, {1, 2, 3, 4});
  const TD eye = mat(2, 2, {1, 0, 0, 1});
  const TD same = matmul(a, eye);
  CHECK(std::vector<double>(same.data().begin(), same.data().end()) == std::vector<double>{1, 2, 3, 4});
  const TD p = matmul(a, mat(2, 1, {5, 6}));
  CHECK(p.shape() == Shape{2, 1});
  CHECK(p[0] == 17);
  CHECK(p[1] == 39);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  const TD a = TD::zeros({2, 3});
  const TD b = TD::zeros({2, 3});
  try {
    (void)matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x3]", msg.find("[2x3]") + 1) != std::string::npos);
  }
}

TEST_CASE("matmul: gradient of sum(a b) w.r.t. a is ones * b^T") {
  Rng rng(1);
  TD a = random_tensor({3, 4}, rng);
  const TD b = random_tensor({4, 2}, rng);
  a.set_requires_grad(true);
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum(matmul(a, b)));
  }
  const auto g = a.grad();
  // Independent oracle: central differences.
  auto values = a.mutable_data();
  const double h = 1e-5;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double keep = values[i];
    values[i] = keep + h;
    const double up = sum(matmul(a, b)).item();
    values[i] = keep - h;
    const double down = sum(matmul(a, b)).item();
    values[i] = keep;
    const double fd = (up - down) / (2 * h);
    CHECK(g[i] == doctest::Approx(fd).epsilon(1e-8));
    // ones * b^T: row sums of b.
    const std::size_t col = i % 4;
    CHECK(g[i] == doctest::Approx(b[col * 2] + b[col * 2 + 1]).epsilon(1e-12));
  }
}

TEST_CASE("softmax_rows: symmetric, saturated and hand-computed rows") {
  const TD s = softmax_rows(mat(1, 2, {0, 0}));
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.5);

  const TD big = softmax_rows(mat(1, 2, {1000, 0}));
  CHECK(std::abs(big[0] - 1.0) <= 1e-12);
  CHECK(std::abs(big[1]) <= 1e-12);

  const TD r = softmax_rows(mat(1, 3, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(r[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
  CHECK(r[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-14));
  CHECK(r[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-14));
  CHECK(std::abs(r[0] - 0.09003) < 5e-6);
  CHECK(std::abs(r[1] - 0.24473) < 5e-6);
  CHECK(std::abs(r[2] - 0.66524) < 5e-6);
}

TEST_CASE("softmax_rows: NaN input is a numeric error") {
  CHECK_THROWS_AS(softmax_rows(mat(1, 2, {std::nan(""), 0})), NumericError);
}

TEST_CASE("softmax_rows: rows sum to one for magnitudes up to 1e4") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor<float> x = random_tensor<float>({5, 9}, rng, -1e4, 1e4);
    const Tensor<float> y = softmax_rows(x);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        CHECK(y[r * 9 + j] >= 0.0f);
        s += y[r * 9 + j];
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("softmax_rows: causal mask zeroes the future exactly") {
  Rng rng(3);
  const TD y = softmax_rows(random_tensor({4, 4}, rng), true);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) CHECK(y[i * 4 + j] == 0.0);
  CHECK(y[0] == 1.0);
}

TEST_CASE("layer_norm: constant vector, hand case and dimension check") {
  const TD none;
  const TD c = layer_norm(TD::full({1, 4}, 3.0), TD::full({4}, 1.0), TD::zeros({4}), 1e-5);
  for (double v : c.data()) CHECK(v == 0.0);
  const TD h = layer_norm(mat(1, 2, {1, 3}), TD::full({2}, 1.0), TD::zeros({2}), 0.0);
  CHECK(h[0] == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(h[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(layer_norm(mat(1, 2, {1, 3}), TD::full({3}, 1.0), none, 1e-5), DimensionError);
}

TEST_CASE("group_norm: statistics span positions and the channels of one group") {
  Rng rng(21);
  const TD x = random_tensor({3, 2, 4}, rng);
  Rng rg(22);
  const TD gain = random_tensor({4}, rg), bias = random_tensor({4}, rg);
  const TD y = group_norm(x, gain, bias, 2, 1e-5);
  for (std::size_t g = 0; g < 2; ++g) {
    double mu = 0, var = 0;
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t j = 2 * g; j < 2 * g + 2; ++j) mu += x[p * 4 + j];
    mu /= 12;
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t j = 2 * g; j < 2 * g + 2; ++j) var += (x[p * 4 + j] - mu) * (x[p * 4 + j] - mu);
    var /= 12;
    for (std::size_t p = 0; p < 6; ++p)
      for (std::size_t j = 2 * g; j < 2 * g + 2; ++j)
        CHECK(std::abs(y[p * 4 + j] - ((x[p * 4 + j] - mu) / std::sqrt(var + 1e-5) * gain[j] + bias[j])) <= 1e-12);
  }
  // one group per channel over a single position collapses to the bias
  const TD single = group_norm(TD::full({1, 1, 4}, 2.0), gain, bias, 4, 1e-5);
  for (std::size_t j = 0; j < 4; ++j) CHECK(single[j] == bias[j]);
  CHECK_THROWS_AS(group_norm(x, gain, bias, 3, 1e-5), DimensionError);
}

TEST_CASE("backward: linear, quadratic, accumulation and contract errors") {
  TD x = TD({3}, {0.5, -1.0, 2.0});
  x.set_requires_grad(true);
  {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(x));
  }
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  TD y = TD({2}, {1, 2});
  y.set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  const TD loss = sum(mul(y, y));
  tape.backward(loss);
  const auto once = y.grad();
  CHECK(once == std::vector<double>{2, 4});
  tape.backward(loss);
  const auto twice = y.grad();
  for (std::size_t i = 0; i < 2; ++i) CHECK(twice[i] == 2 * once[i]);

  CHECK_THROWS_AS(tape.backward(mul(y, y)), ContractError);
  CHECK_THROWS_AS(tape.backward(TD::scalar(1.0)), ContractError);
}

TEST_CASE("tape: entries replay in strict reverse recording order") {
  GradTape<double> tape;
  TD x = TD::scalar(1.0);
  x.set_requires_grad(true);
  std::vector<TD> outs;
  {
    TapeScope<double> scope(tape);
    outs.push_back(scale(x, 2.0));
    outs.push_back(scale(outs[0], 3.0));
    outs.push_back(scale(outs[1], 4.0));
  }
  REQUIRE(tape.size() == 3);
  // Mirror the recorded rules onto a second tape that logs each visit.
  std::vector<int> visits;
  GradTape<double> logged;
  for (std::size_t i = 0; i < tape.size(); ++i) {
    auto rule = tape.entries()[i].backward;
    logged.record(tape.entries()[i].op, outs[i], [rule, i, &visits] {
      visits.push_back(static_cast<int>(i));
      rule();
    });
  }
  logged.backward(outs[2]);
  CHECK(visits == std::vector<int>{2, 1, 0});
  CHECK(x.grad()[0] == 24.0);
}

TEST_CASE("tape: clear releases every recorded tensor") {
  std::weak_ptr<TensorNode<double>> watch;
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    TD x = TD({2}, {1, 2});
    x.set_requires_grad(true);
    TD y = gelu(mul(x, x));
    watch = y.node();
    tape.backward(sum(y));
  }
  CHECK_FALSE(watch.expired());
  tape.clear();
  CHECK(watch.expired());
}

TEST_CASE("concat then slice round-trips bit-exactly") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Tensor<float> a = random_tensor<float>({3, 2, 4}, rng);
    const Tensor<float> b = random_tensor<float>({3, 5, 4}, rng);
    const Tensor<float> c = concat<float>({a, b}, 1);
    const Tensor<float> a2 = slice(c, 1, 0, 2);
    const Tensor<float> b2 = slice(c, 1, 2, 7);
    CHECK(std::memcmp(a.data().data(), a2.data().data(), a.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(b.data().data(), b2.data().data(), b.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("forward pass is bit-deterministic for a fixed seed") {
  auto run = [] {
    Rng rng(42);
    const Tensor<float> x = random_tensor<float>({6, 8}, rng);
    const Tensor<float> w = random_tensor<float>({8, 8}, rng);
    return softmax_rows(gelu(layer_norm(matmul(x, w), Tensor<float>(), Tensor<float>())));
  };
  const auto a = run();
  const auto b = run();
  CHECK(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("embedding rejects ids outside the table") {
  const TD table = TD::zeros({3, 2});
  const std::vector<std::size_t> ids{0, 3};
  CHECK_THROWS_AS(embedding(table, std::span<const std::size_t>(ids)), ContractError);
}

TEST_CASE("conv2d: 1x1 kernel is a per-pixel matmul; upsample repeats pixels") {
  const TD x = TD({1, 2, 2}, {1, 2, 3, 4});
  const TD w = TD({2, 1}, {1, 10});
  const TD y = conv2d(x, w, 1, 1, 0);
  CHECK(y.shape() == Shape{1, 2, 1});
  CHECK(y[0] == 21);
  CHECK(y[1] == 43);
  const TD u = upsample2x(TD({1, 1, 1}, {7}));
  CHECK(u.shape() == Shape{2, 2, 1});
  for (double v : u.data()) CHECK(v == 7);
}

TEST_CASE("every differentiable primitive passes finite-difference checks") {
  using Fn = std::function<TD(const std::vector<TD>&)>;
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    Fn fn;
  };
  const std::vector<std::size_t> ids{2, 0, 2, 1};
  RowMix<double> mix;
  mix.add(0, 0.25);
  mix.add(3, 0.75);
  mix.end_row();
  mix.add(1, -1.5);
  mix.end_row();
  const std::vector<Case> cases = {
      {"matmul", {{3, 4}, {4, 2}}, [](auto& in) { return weighted_sum(matmul(in[0], in[1])); }},
      {"matmul_bt", {{3, 4}, {5, 4}}, [](auto& in) { return weighted_sum(matmul_bt(in[0], in[1])); }},
      {"add", {{2, 3}, {2, 3}}, [](auto& in) { return weighted_sum(add(in[0], in[1])); }},
      {"sub", {{2, 3}, {2, 3}}, [](auto& in) { return weighted_sum(sub(in[0], in[1])); }},
      {"mul", {{2, 3}, {2, 3}}, [](auto& in) { return weighted_sum(mul(in[0], in[1])); }},
      {"scale", {{2, 3}}, [](auto& in) { return weighted_sum(scale(in[0], -1.7)); }},
      {"add_rowvec", {{4, 3}, {3}}, [](auto& in) { return weighted_sum(add_rowvec(in[0], in[1])); }},
      {"mul_rowvec", {{2, 2, 3}, {3}}, [](auto& in) { return weighted_sum(mul_rowvec(in[0], in[1])); }},
      {"concat", {{2, 3}, {2, 1}}, [](auto& in) { return weighted_sum(concat<double>({in[0], in[1]}, 1)); }},
      {"slice", {{4, 3}}, [](auto& in) { return weighted_sum(slice(in[0], 0, 1, 3)); }},
      {"reshape", {{2, 6}}, [](auto& in) { return weighted_sum(reshape(in[0], {3, 4})); }},
      {"transpose", {{2, 5}}, [](auto& in) { return weighted_sum(transpose(in[0])); }},
      {"gelu", {{3, 3}}, [](auto& in) { return weighted_sum(gelu(in[0])); }},
      {"sum", {{3, 2}}, [](auto& in) { return scale(sum(in[0]), 0.3); }},
      {"mean", {{3, 2}}, [](auto& in) { return scale(mean(in[0]), 2.1); }},
      {"softmax", {{3, 5}}, [](auto& in) { return weighted_sum(softmax_rows(in[0])); }},
      {"softmax_causal", {{4, 4}}, [](auto& in) { return weighted_sum(softmax_rows(in[0], true)); }},
      {"layer_norm", {{3, 6}, {6}, {6}},
       [](auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2], 1e-5)); }},
      {"group_norm", {{2, 3, 6}, {6}, {6}},
       [](auto& in) { return weighted_sum(group_norm(in[0], in[1], in[2], 3, 1e-5)); }},
      {"embedding", {{3, 4}},
       [&ids](auto& in) { return weighted_sum(embedding(in[0], std::span<const std::size_t>(ids))); }},
      {"mix_rows", {{4, 3}}, [&mix](auto& in) { return weighted_sum(mix_rows(in[0], mix)); }},
      {"cross_entropy", {{4, 5}},
       [](auto& in) {
         const std::vector<std::size_t> t{0, 4, 2, 2};
         return cross_entropy_from_logits(in[0], std::span<const std::size_t>(t));
       }},
      {"conv2d", {{4, 4, 2}, {18, 3}}, [](auto& in) { return weighted_sum(conv2d(in[0], in[1], 3, 1, 1)); }},
      {"conv2d_stride2", {{4, 4, 2}, {18, 3}},
       [](auto& in) { return weighted_sum(conv2d(in[0], in[1], 3, 2, 1)); }},
      {"upsample2x", {{2, 2, 3}}, [](auto& in) { return weighted_sum(upsample2x(in[0])); }},
  };
  for (const auto& c : cases) {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(1000 + seed);
      std::vector<TD> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng));
      worst = std::max(worst, gradcheck(inputs, c.fn));
    }
    INFO(c.name << " max rel err " << worst);
    CHECK(worst <= 1e-4);
  }
}
