#include "fireedit/evaluate.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "fireedit/dataset.hpp"

namespace fireedit {

namespace {

void check_same(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width)
    throw ContractError("metric inputs differ in size: " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                        " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
}

std::size_t count_slots(const EditModel<float>& model, const DatasetRecord& record) {
  const auto slots = model.greedy_slots(record);
  const std::size_t vocab = model.config().vocab_size;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < slots.size(); ++i) ok += slots[i] == vocab + i;
  return ok;
}

}  // namespace

double mean_l1(const Image& a, const Image& b) {
  check_same(a, b);
  double s = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += std::abs(static_cast<double>(a.values[i]) - b.values[i]);
  return s / static_cast<double>(a.values.size());
}

double mean_l2(const Image& a, const Image& b) {
  check_same(a, b);
  double s = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = static_cast<double>(a.values[i]) - b.values[i];
    s += d * d;
  }
  return s / static_cast<double>(a.values.size());
}

double masked_l1(const Image& a, const Image& b, const Box& box) {
  check_same(a, b);
  double s = 0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < a.height; ++y)
    for (std::size_t x = 0; x < a.width; ++x) {
      if (box.contains(x, y)) continue;
      for (std::size_t c = 0; c < Image::channels; ++c) s += std::abs(static_cast<double>(a.at(y, x, c)) - b.at(y, x, c));
      n += Image::channels;
    }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

double feature_cosine(const EditModel<float>& model, const Image& a, const Image& b) {
  check_same(a, b);
  const auto& enc = model.vlm().vision();
  const Tensor<float> fa = enc.content(image_tensor<float>(a));
  const Tensor<float> fb = enc.content(image_tensor<float>(b));
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    dot += static_cast<double>(fa[i]) * fb[i];
    na += static_cast<double>(fa[i]) * fa[i];
    nb += static_cast<double>(fb[i]) * fb[i];
  }
  if (na == 0 || nb == 0) return na == nb ? 1.0 : 0.0;
  return dot / std::sqrt(na * nb);
}

double EvalReport::mean(const std::string& metric) const {
  if (records.empty()) return 0;
  double s = 0;
  for (const RecordEval& r : records) {
    if (metric == "l1") s += r.l1;
    else if (metric == "l2") s += r.l2;
    else if (metric == "cosine") s += r.cosine;
    else if (metric == "masked_l1") s += r.masked_l1;
    else throw ConfigError("unknown metric '" + metric + "'");
  }
  return s / static_cast<double>(records.size());
}

double EvalReport::slot_accuracy() const {
  return slots_total == 0 ? 0.0 : static_cast<double>(slots_correct) / static_cast<double>(slots_total);
}

EvalReport evaluate(const EditModel<float>& model, const std::vector<DatasetRecord>& data,
                    const SampleOptions& options, const std::vector<std::string>& metrics,
                    std::vector<Image>* samples) {
  EvalReport rep;
  rep.metrics = metrics;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const DatasetRecord& rec = data[i];
    SampleOptions o = options;
    o.seed = mix_seed(options.seed, i);
    const Image out = model.sample(rec.source, rec.instruction, rec.boxes, o);
    RecordEval e;
    e.index = i;
    e.kind = rec.edit_kind;
    e.l1 = mean_l1(out, rec.target);
    e.l2 = mean_l2(out, rec.target);
    e.cosine = feature_cosine(model, out, rec.target);
    e.masked_l1 = masked_l1(out, rec.target, rec.edit_box);
    e.slots_correct = count_slots(model, rec);
    rep.slots_correct += e.slots_correct;
    rep.slots_total += model.config().img_tokens;
    rep.records.push_back(e);
    if (samples) samples->push_back(out);
  }
  return rep;
}

double slot_accuracy(const EditModel<float>& model, const std::vector<DatasetRecord>& data) {
  std::size_t ok = 0;
  for (const DatasetRecord& rec : data) ok += count_slots(model, rec);
  const std::size_t total = data.size() * model.config().img_tokens;
  return total == 0 ? 0.0 : static_cast<double>(ok) / static_cast<double>(total);
}

std::string format_report(const EvalReport& report) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "records=%zu\nslot_accuracy=%.9g\n", report.records.size(), report.slot_accuracy());
  out += buf;
  for (const auto& m : report.metrics) {
    std::snprintf(buf, sizeof(buf), "%s=%.9g\n", m.c_str(), report.mean(m));
    out += buf;
  }
  for (const RecordEval& r : report.records) {
    std::snprintf(buf, sizeof(buf), "record=%zu kind=%s", r.index, edit_kind_name(r.kind));
    out += buf;
    for (const auto& m : report.metrics) {
      const double v = m == "l1" ? r.l1 : m == "l2" ? r.l2 : m == "cosine" ? r.cosine : r.masked_l1;
      std::snprintf(buf, sizeof(buf), " %s=%.9g", m.c_str(), v);
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), " slots=%zu\n", r.slots_correct);
    out += buf;
  }
  return out;
}

void write_ppm(const std::string& path, const Image& image) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  f << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  for (float v : image.values) {
    const float c = std::min(1.0f, std::max(0.0f, v));
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
  }
}

}  // namespace fireedit
