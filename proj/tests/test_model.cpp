#include <doctest.h>

#include <cmath>

#include "fireedit/config.hpp"
#include "fireedit/dataset.hpp"
#include "fireedit/model.hpp"

using namespace fireedit;
using TF = Tensor<float>;
using TD = Tensor<double>;

namespace {

const RunConfig kMicro = micro_config();

std::vector<DatasetRecord> records(std::uint64_t seed, std::size_t n = 2) {
  return generate_dataset(kMicro.data, n, seed);
}

template <typename T>
bool differs(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return true;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return true;
  return false;
}

TD noise(const Shape& shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return TD(shape, v);
}

}  // namespace

TEST_CASE("model: diffusion loss equals an independent MSE and the total is the sum") {
  EditModel<double> m(kMicro.model, 1);
  const auto data = records(2);
  Rng rng(3);
  const std::size_t s = kMicro.model.latent_size();
  const TrainDraw<double> d{DropDecision{false, false}, 9, noise({s, s, m.codec().channels()}, rng)};
  const LossParts<double> parts = m.losses(data[0], d);
  CHECK(parts.vlm_active);

  const TD src = image_tensor<double>(data[0].source);
  const auto text = m.encode_text(src, data[0].instruction, data[0].boxes);
  const TD z_t = add_noise(m.schedule(), m.codec().encode(image_tensor<double>(data[0].target)), 9, d.eps);
  const TD eps_hat = m.denoiser()(z_t, m.codec().encode(src), 9, m.condition(text.e_t, 9), m.visual(src, text.e_t),
                                  kMicro.model.lambda);
  double mse = 0;
  for (std::size_t i = 0; i < eps_hat.size(); ++i) mse += (eps_hat[i] - d.eps[i]) * (eps_hat[i] - d.eps[i]);
  mse /= static_cast<double>(eps_hat.size());
  CHECK(std::abs(parts.diff.item() - mse) <= 1e-12);
  CHECK(std::abs(parts.total.item() - (parts.vlm.item() + parts.diff.item())) <= 1e-6);
}

TEST_CASE("model: a dropped text condition skips the language loss") {
  EditModel<double> m(kMicro.model, 1);
  const auto data = records(2);
  Rng rng(4);
  const std::size_t s = kMicro.model.latent_size();
  const TrainDraw<double> d{DropDecision{false, true}, 5, noise({s, s, m.codec().channels()}, rng)};
  const auto parts = m.losses(data[0], d);
  CHECK_FALSE(parts.vlm_active);
  CHECK(parts.vlm.item() == 0.0);
  CHECK(parts.total.item() == parts.diff.item());
}

TEST_CASE("model: sampling is deterministic and range-checked") {
  EditModel<float> m(kMicro.model, 5);
  const auto data = records(6);
  SampleOptions o;
  o.steps = 4;
  o.seed = 11;
  const Image a = m.sample(data[0].source, data[0].instruction, data[0].boxes, o);
  const Image b = m.sample(data[0].source, data[0].instruction, data[0].boxes, o);
  CHECK(a == b);
  for (float v : a.values) CHECK((v >= 0.0f && v <= 1.0f));
  o.steps = kMicro.model.steps + 1;
  CHECK_THROWS_AS(m.sample(data[0].source, data[0].instruction, data[0].boxes, o), ContractError);
  o.steps = 0;
  CHECK_THROWS_AS(m.sample(data[0].source, data[0].instruction, data[0].boxes, o), ContractError);
}

TEST_CASE("model: zero guidance scales ignore the instruction and the source") {
  EditModel<float> m(kMicro.model, 7);
  const auto data = records(8);
  SampleOptions o;
  o.steps = 4;
  o.seed = 3;
  o.scales = GuidanceScales{0, 0};
  const Image a = m.sample(data[0].source, data[0].instruction, data[0].boxes, o);
  const Image b = m.sample(data[1].source, data[1].instruction, data[1].boxes, o);
  CHECK(a == b);
  o.scales = GuidanceScales{1.5, 7.5};
  CHECK_FALSE(m.sample(data[0].source, data[0].instruction, data[0].boxes, o) ==
              m.sample(data[1].source, data[1].instruction, data[1].boxes, o));
}

TEST_CASE("model: conditioning paths are live at random init across seeds") {
  std::size_t text_changes_e = 0, every_row_matters = 0, fine_tokens_matter = 0, image_drop_matters = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EditModel<double> m(kMicro.model, 100 + seed);
    const auto data = records(200 + seed);
    const TD src = image_tensor<double>(data[0].source);

    TokenSequence other = data[0].instruction;
    other.ids[0] = (other.ids[0] + 1) % vocabulary().size();
    const auto a = m.encode_text(src, data[0].instruction, data[0].boxes);
    const auto b = m.encode_text(src, other, data[0].boxes);
    text_changes_e += differs(a.e, b.e);

    bool all_rows = true;
    for (std::size_t r = 0; r < a.e.dim(0); ++r) {
      std::vector<double> v(a.e.data().begin(), a.e.data().end());
      for (std::size_t j = 0; j < a.e.dim(1); ++j) v[r * a.e.dim(1) + j] = 0;
      all_rows = all_rows && differs(m.qformer().bridge(TD(a.e.shape(), v)), a.e_t);
    }
    every_row_matters += all_rows;

    const TD tokens = m.hybrid().encode(src);
    std::vector<double> v(tokens.data().begin(), tokens.data().end());
    const std::size_t w = tokens.dim(1);
    for (std::size_t i = m.hybrid().coarse_tokens() * w; i < v.size(); ++i) v[i] = 0;
    fine_tokens_matter += differs(m.hvca()(TD(tokens.shape(), v), a.e_t), m.hvca()(tokens, a.e_t));

    Rng rng(seed);
    const std::size_t s = kMicro.model.latent_size();
    const TD z = noise({s, s, m.codec().channels()}, rng);
    const TD with = m.denoiser()(z, m.codec().encode(src), 7, m.condition(a.e_t, 7), m.visual(src, a.e_t), 1.0);
    const TD without = m.denoiser()(z, TD(), 7, m.condition(a.e_t, 7), m.visual(src, a.e_t), 1.0);
    image_drop_matters += differs(with, without);
  }
  CHECK(text_changes_e >= 9);
  CHECK(every_row_matters >= 9);
  CHECK(fine_tokens_matter >= 9);
  CHECK(image_drop_matters >= 9);
}

TEST_CASE("model: greedy slots and ablation switches") {
  ModelConfig c = kMicro.model;
  EditModel<float> full(c, 9);
  const auto data = records(10);
  CHECK(full.greedy_slots(data[0]).size() == c.img_tokens);
  c.use_hvca = false;
  EditModel<float> no_hvca(c, 9);
  CHECK_FALSE(no_hvca.visual(image_tensor<float>(data[0].source), no_hvca.null_text()).defined());
  c.use_tati = false;
  EditModel<float> no_tati(c, 9);
  const TF e = no_tati.null_text();
  CHECK_FALSE(differs(no_tati.condition(e, 3), e));
}
