#include <doctest.h>

#include <cmath>

#include "fireedit/vlm.hpp"
#include "test_support.hpp"

using namespace fireedit;
using fireedit::testing::gradcheck;
using fireedit::testing::random_tensor;
using fireedit::testing::weighted_sum;
using TD = Tensor<double>;

namespace {

VlmConfig small() {
  VlmConfig c;
  c.width = 8;
  c.layers = 2;
  c.heads = 2;
  c.vocab_size = 12;
  c.img_tokens = 3;
  c.lora_rank = 2;
  c.lora_alpha = 4;
  c.feature_width = 6;
  c.image_patch = 4;
  c.region_grid = 2;
  return c;
}

TD random_image(Rng& rng) { return random_tensor<double>({8, 8, 3}, rng, 0.0, 1.0); }

bool bitwise_equal(const TD& a, const TD& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

const RegionSet kRegions{{Box{0, 0, 4, 4}, Box{2, 3, 8, 8}}, RegionSource::oracle};

}  // namespace

TEST_CASE("lora: zero up-projection reproduces the base layer bit for bit") {
  ParamStore<double> store(1);
  const auto l = LoraLinear<double>::make(store, "l", 5, 4, 2, 4.0);
  Rng rng(2);
  const TD x = random_tensor<double>({3, 5}, rng);
  CHECK(bitwise_equal(l(x, true), l.base(x)));
  CHECK(l.factor == 2.0);
  CHECK_FALSE(store.find("l.weight")->trainable);
}

TEST_CASE("lora: nonzero adapter adds factor * x A B") {
  ParamStore<double> store(1);
  auto l = LoraLinear<double>::make(store, "l", 5, 4, 2, 4.0);
  Rng rng(3);
  for (double& w : l.up.mutable_data()) w = rng.normal();
  const TD x = random_tensor<double>({3, 5}, rng);
  const TD y = l(x), base = l.base(x);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double d = 0;
      for (std::size_t a = 0; a < 2; ++a) {
        double xa = 0;
        for (std::size_t k = 0; k < 5; ++k) xa += x[i * 5 + k] * l.down[k * 2 + a];
        d += xa * l.up[a * 4 + j];
      }
      CHECK(std::abs(y[i * 4 + j] - (base[i * 4 + j] + 2.0 * d)) <= 1e-12);
    }
}

TEST_CASE("vlm: adapters at init leave the frozen model's outputs unchanged") {
  ParamStore<double> store(4);
  auto vlm = Vlm<double>::make(store, small(), 8, 8);
  Rng rng(5);
  const TD img = random_image(rng);
  const auto text = TokenSequence::text({1, 4, 7});
  const auto adapted = vlm.run(img, text, kRegions, true);
  vlm.set_adapted(false);
  const auto frozen = vlm.run(img, text, kRegions, true);
  CHECK(bitwise_equal(adapted.logits, frozen.logits));
  CHECK(bitwise_equal(adapted.hidden, frozen.hidden));
}

TEST_CASE("vlm: sequence layout and contracts") {
  ParamStore<double> store(4);
  const auto vlm = Vlm<double>::make(store, small(), 8, 8);
  Rng rng(6);
  const auto fm = vlm.image_features(random_image(rng));
  const TD regions = vlm.region_tokens(fm, kRegions);
  CHECK(regions.shape() == Shape{2, 8});  // one token per box
  const auto a = vlm.assemble_input(TokenSequence::text({2, 3}), fm, regions, 3);
  const std::size_t n_img = fm.grid_h * fm.grid_w;
  REQUIRE(a.seq.size() == 2 + n_img + 2 + 3);
  CHECK(a.h.shape() == Shape{a.seq.size(), 8});
  for (std::size_t i = 0; i < a.seq.size(); ++i) {
    const Segment want = i < 2 ? Segment::text : i < 2 + n_img ? Segment::image : i < 2 + n_img + 2 ? Segment::region : Segment::img_slot;
    CHECK(a.seq.segments[i] == want);
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.seq.ids[a.seq.size() - 3 + i] == 12 + i);
  CHECK_THROWS_AS(vlm.assemble_input(TokenSequence::text({2}), fm, regions, 2), ContractError);
  CHECK_THROWS_AS(vlm.assemble_input(TokenSequence::text({2}), fm, TD::zeros({1, 5}), 3), DimensionError);
  const auto out = vlm.forward_causal(a.h);
  CHECK(out.logits.shape() == Shape{a.seq.size(), 15});
}

TEST_CASE("vlm: causal mask keeps earlier positions independent of later ones") {
  ParamStore<double> store(7);
  const auto vlm = Vlm<double>::make(store, small(), 8, 8);
  Rng rng(8);
  const TD h = random_tensor<double>({9, 8}, rng);
  TD h2 = TD(h.shape(), std::vector<double>(h.data().begin(), h.data().end()));
  for (std::size_t j = 0; j < 8; ++j) h2.mutable_data()[8 * 8 + j] += 1.0;
  const auto a = vlm.forward_causal(h), b = vlm.forward_causal(h2);
  for (std::size_t i = 0; i < 8 * 8; ++i) CHECK(a.hidden[i] == b.hidden[i]);
  bool last_differs = false;
  for (std::size_t j = 0; j < 8; ++j) last_differs |= a.hidden[64 + j] != b.hidden[64 + j];
  CHECK(last_differs);
}

TEST_CASE("loss_vlm: matches an explicit log-softmax over the shifted rows") {
  Rng rng(9);
  const std::size_t len = 7, vocab = 5, r = 3;
  const TD logits = random_tensor<double>({len, vocab + r}, rng);
  double want = 0;
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t row = len - r - 1 + i;
    double z = 0;
    for (std::size_t j = 0; j < vocab + r; ++j) z += std::exp(logits[row * (vocab + r) + j]);
    want -= logits[row * (vocab + r) + vocab + i] - std::log(z);
  }
  const double got = loss_vlm(logits, r, vocab).item();
  CHECK(std::abs(got - want) <= 1e-12);
  CHECK(gradcheck({logits}, [&](const std::vector<TD>&) { return loss_vlm(logits, r, vocab); }) <= 1e-4);
  CHECK_THROWS_AS(loss_vlm(logits, 0, vocab), ContractError);
  CHECK_THROWS_AS(loss_vlm(random_tensor<double>({3, 8}, rng), 3, vocab), ContractError);
}

TEST_CASE("extract_edit_states: the final r rows in order") {
  Rng rng(10);
  const TD h = random_tensor<double>({6, 4}, rng);
  const TD e = extract_edit_states(h, 2);
  REQUIRE(e.shape() == Shape{2, 4});
  for (std::size_t i = 0; i < 8; ++i) CHECK(e[i] == h[16 + i]);
  CHECK_THROWS_AS(extract_edit_states(h, 7), ContractError);
}

TEST_CASE("vlm: only adapters, expansion, region and adapter layers train") {
  ParamStore<double> store(11);
  auto vlm = Vlm<double>::make(store, small(), 8, 8);
  for (const auto& p : store.params()) {
    const bool lora = p.name.find("lora") != std::string::npos;
    const bool want = lora || p.group == "vlm.expansion" || p.group == "vlm.region" || p.group == "vlm.adapter";
    CHECK_MESSAGE(p.trainable == want, p.name);
  }
  Rng rng(12);
  const TD img = random_image(rng);
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(loss_vlm(vlm.run(img, TokenSequence::text({1, 2}), kRegions, true).logits, 3, 12));
  }
  for (const auto& p : store.params())
    if (!p.trainable) CHECK_FALSE(p.value.has_grad());
  CHECK(store.find("vlm.expansion")->value.has_grad());
}

TEST_CASE("vlm: greedy decoding returns r ids and region tokens matter") {
  ParamStore<double> store(13);
  const auto vlm = Vlm<double>::make(store, small(), 8, 8);
  Rng rng(14);
  const TD img = random_image(rng);
  const auto ids = vlm.greedy_slots(img, TokenSequence::text({3}), kRegions, true);
  CHECK(ids.size() == 3);
  for (auto id : ids) CHECK(id < 15);
  const auto with = vlm.run(img, TokenSequence::text({3}), kRegions, true);
  const auto without = vlm.run(img, TokenSequence::text({3}), kRegions, false);
  CHECK(with.logits.dim(0) == without.logits.dim(0) + 2);
}

TEST_CASE("loss_vlm: uniform logits, certainty and slot relabeling") {
  const TD uniform = TD::zeros({6, 10});
  CHECK(std::abs(loss_vlm(uniform, 4, 6).item() - 4 * std::log(10.0)) <= 1e-12);
  TD certain = TD::zeros({6, 10});
  for (std::size_t i = 0; i < 4; ++i) certain.mutable_data()[(1 + i) * 10 + 6 + i] = 1000.0;
  CHECK(loss_vlm(certain, 4, 6).item() == 0.0);
  Rng rng(15);
  const TD logits = random_tensor<double>({6, 10}, rng);
  std::vector<double> swapped(logits.data().begin(), logits.data().end());
  for (std::size_t row = 0; row < 6; ++row) std::swap(swapped[row * 10 + 6], swapped[row * 10 + 7]);
  CHECK(loss_vlm(logits, 4, 6).item() != loss_vlm(TD({6, 10}, swapped), 4, 6).item());
}

TEST_CASE("vlm: causal mask also holds for logits") {
  ParamStore<double> store(16);
  const auto vlm = Vlm<double>::make(store, small(), 8, 8);
  Rng rng(17);
  const TD h = random_tensor<double>({7, 8}, rng);
  for (std::size_t pos = 3; pos < 7; ++pos) {
    std::vector<double> v(h.data().begin(), h.data().end());
    for (std::size_t p = pos; p < 7; ++p)
      for (std::size_t j = 0; j < 8; ++j) v[p * 8 + j] = rng.normal();
    const auto a = vlm.forward_causal(h), b = vlm.forward_causal(TD(h.shape(), v));
    for (std::size_t i = 0; i < pos * 15; ++i) CHECK(a.logits[i] == b.logits[i]);
  }
}
