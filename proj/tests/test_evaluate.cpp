#include <doctest.h>

#include <cmath>

#include "fireedit/config.hpp"
#include "fireedit/dataset.hpp"
#include "fireedit/evaluate.hpp"

using namespace fireedit;

TEST_CASE("metrics: constant images") {
  const Image a = Image::filled(4, 4, 0.2f, 0.4f, 0.6f);
  const Image b = Image::filled(4, 4, 0.3f, 0.4f, 0.4f);
  CHECK(mean_l1(a, b) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(mean_l2(a, b) == doctest::Approx((0.01 + 0.04) / 3).epsilon(1e-6));
  CHECK(mean_l1(a, a) == 0.0);
  CHECK_THROWS_AS(mean_l1(a, Image::filled(4, 2, 0, 0, 0)), ContractError);
}

TEST_CASE("metrics: masked L1 ignores the edit box") {
  const Image a = Image::filled(4, 4, 0, 0, 0);
  Image b = a;
  for (std::size_t y = 1; y < 3; ++y)
    for (std::size_t x = 1; x < 3; ++x) b.at(y, x, 0) = 1.0f;
  CHECK(masked_l1(a, b, Box{1, 1, 3, 3}) == 0.0);
  b.at(0, 0, 2) = 0.6f;
  CHECK(masked_l1(a, b, Box{1, 1, 3, 3}) == doctest::Approx(0.6 / (12 * 3)).epsilon(1e-6));
  CHECK(masked_l1(a, b, Box{0, 0, 4, 4}) == 0.0);
}

TEST_CASE("metrics: feature cosine and the report") {
  RunConfig c = micro_config();
  EditModel<float> model(c.model, 3);
  const auto data = generate_dataset(c.data, 2, 4);
  CHECK(feature_cosine(model, data[0].source, data[0].source) == doctest::Approx(1.0));
  SampleOptions o;
  o.steps = 4;
  o.seed = 9;
  const EvalReport r1 = evaluate(model, data, o, c.metric_names());
  const EvalReport r2 = evaluate(model, data, o, c.metric_names());
  const std::string text = format_report(r1);
  CHECK(text == format_report(r2));
  CHECK(text.rfind("records=2\nslot_accuracy=", 0) == 0);
  CHECK(text.find("masked_l1=") != std::string::npos);
  CHECK(r1.slots_total == 2 * c.model.img_tokens);
  CHECK(slot_accuracy(model, data) == doctest::Approx(r1.slot_accuracy()));
  CHECK(r1.mean("l1") == doctest::Approx((r1.records[0].l1 + r1.records[1].l1) / 2));
}

TEST_CASE("metrics: range extremes, identity and an elementwise oracle") {
  const Image black = Image::filled(5, 3, 0, 0, 0), white = Image::filled(5, 3, 1, 1, 1);
  CHECK(mean_l1(black, white) == 1.0);
  CHECK(mean_l2(white, white) == 0.0);
  Rng rng(8);
  Image a = black, b = black;
  for (float& v : a.values) v = static_cast<float>(rng.uniform());
  for (float& v : b.values) v = static_cast<float>(rng.uniform());
  double oracle = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) oracle += std::fabs(double(a.values[i]) - double(b.values[i]));
  CHECK(std::abs(mean_l1(a, b) - oracle / a.values.size()) <= 1e-8);
  RunConfig c = micro_config();
  EditModel<float> model(c.model, 1);
  const Image img = generate_dataset(c.data, 1, 2)[0].source;
  CHECK(mean_l1(img, img) == 0.0);
  CHECK(feature_cosine(model, img, img) == doctest::Approx(1.0).epsilon(1e-12));
}
