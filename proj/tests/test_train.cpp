#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "fireedit/dataset.hpp"
#include "fireedit/train.hpp"

using namespace fireedit;

namespace {

RunConfig micro(std::uint64_t seed = 1) {
  RunConfig c = micro_config();
  c.seed = seed;
  c.records = 4;
  c.batch_size = 3;
  c.p_img = 0.3;
  c.p_txt = 0.3;
  return c;
}

std::vector<DatasetRecord> data(const RunConfig& c) { return generate_dataset(c.data, c.records, c.seed); }

}  // namespace

TEST_CASE("train: same seed gives byte-identical checkpoints and logs") {
  const RunConfig c = micro();
  Trainer a(c, data(c)), b(c, data(c));
  std::ostringstream la, lb;
  a.run(6, &la);
  b.run(6, &lb);
  CHECK(la.str() == lb.str());
  CHECK(encode_checkpoint(a.checkpoint()) == encode_checkpoint(b.checkpoint()));
  Trainer other(micro(2), data(c));
  other.run(6);
  CHECK(encode_checkpoint(other.checkpoint()) != encode_checkpoint(a.checkpoint()));
}

TEST_CASE("train: resume from a checkpoint continues the same trajectory") {
  const RunConfig c = micro();
  Trainer straight(c, data(c));
  straight.run(6);
  Trainer first(c, data(c));
  first.run(3);
  const auto bytes = encode_checkpoint(first.checkpoint());
  Trainer second(c, data(c));
  second.restore(decode_checkpoint(bytes));
  CHECK(second.step() == 3);
  second.run(6);
  CHECK(encode_checkpoint(second.checkpoint()) == encode_checkpoint(straight.checkpoint()));
}

TEST_CASE("train: frozen parameters never move and losses fall") {
  RunConfig c = micro();
  c.p_img = c.p_txt = 0;
  c.learning_rate = 3e-3;
  Trainer t(c, data(c));
  const auto before = model_tensors(t.model().store());
  const double l0 = t.evaluate_losses(0).l_total;
  t.run(40);
  const double l1 = t.evaluate_losses(0).l_total;
  CHECK(l1 < l0);
  const auto after = model_tensors(t.model().store());
  std::size_t moved = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto* p = t.model().store().find(before[i].name);
    if (!p->trainable) CHECK_MESSAGE(before[i] == after[i], before[i].name);
    else moved += before[i] != after[i];
  }
  CHECK(moved > 0);
}

TEST_CASE("train: one step at the default rate lowers that record's loss") {
  std::size_t failures = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RunConfig c = micro(seed);
    c.records = 1;
    c.batch_size = 1;
    Trainer t(c, data(c));
    const double before = t.evaluate_losses(0).l_total;
    t.train_step();
    failures += !(t.evaluate_losses(0).l_total < before);
  }
  CHECK(failures <= 1);
}

TEST_CASE("train: the step-0 loss is reproducible bitwise") {
  const RunConfig c = micro();
  Trainer a(c, data(c)), b(c, data(c));
  CHECK(a.train_step().l_total == b.train_step().l_total);
}

TEST_CASE("train: cosine schedule decays from the peak to zero") {
  RunConfig c = micro();
  c.train_steps = 100;
  c.lr_schedule = "constant";
  CHECK(learning_rate_at(c, 0) == c.learning_rate);
  CHECK(learning_rate_at(c, 57) == c.learning_rate);
  c.lr_schedule = "cosine";
  CHECK(learning_rate_at(c, 0) == c.learning_rate);
  CHECK(learning_rate_at(c, 50) == doctest::Approx(c.learning_rate / 2));
  CHECK(learning_rate_at(c, 100) == doctest::Approx(0.0));
  CHECK(learning_rate_at(c, 30) > learning_rate_at(c, 31));
}

TEST_CASE("adam: first update is -lr * sign(g) and clipping bounds the step") {
  ParamStore<float> store(1);
  Tensor<float> w = store.add("w", "g", {3}, Init::zeros, true);
  {
    GradTape<float> tape;
    TapeScope<float> scope(tape);
    tape.backward(sum(mul(w, Tensor<float>({3}, {3.0f, -4.0f, 0.0f}))));
  }
  Adam adam(store, AdamSettings{0.1, 0.9, 0.999, 1e-8, 1.0});
  CHECK(adam.step(store) == doctest::Approx(5.0));
  CHECK(w[0] == doctest::Approx(-0.1).epsilon(1e-5));
  CHECK(w[1] == doctest::Approx(0.1).epsilon(1e-5));
  CHECK(w[2] == 0.0f);
  CHECK(adam.steps() == 1);
}

TEST_CASE("train: log lines round trip") {
  const StepLog s{17, 0.5, 0.25, 0.75, 1e-3};
  const std::string line = format_log(s);
  CHECK(line.rfind("step=17 l_vlm=", 0) == 0);
  const StepLog back = parse_log(line);
  CHECK(back.step == 17);
  CHECK(back.l_total == 0.75);
  CHECK_THROWS_AS(parse_log("loss=3"), ConfigError);
}

TEST_CASE("train: a non-finite parameter stops training with a named error") {
  const RunConfig c = micro();
  Trainer t(c, data(c));
  for (auto& p : t.model().store().params())
    if (p.name.rfind("denoiser", 0) == 0 && p.trainable) {
      p.value.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
      break;
    }
  try {
    t.train_step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 0") != std::string::npos);
    CHECK(msg.find("op '") != std::string::npos);
  }
}

TEST_CASE("checkpoint: loading into a different model names the mismatched tensors") {
  const RunConfig c = micro();
  Trainer t(c, data(c));
  RunConfig wider = c;
  wider.model.cond_width = 12;
  EditModel<float> other(wider.model, 0);
  try {
    load_model_tensors(other.store(), t.checkpoint());
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("null.text") != std::string::npos);
    CHECK(msg.find("tensor null.text: model [3x12] vs checkpoint [3x8]") != std::string::npos);
  }

  auto model = model_from_checkpoint(t.checkpoint());
  CHECK(model_tensors(model->store()) == model_tensors(t.model().store()));
}
