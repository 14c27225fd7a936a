#pragma once

// Image metrics, greedy slot accuracy and the plain-text metric report.

#include <string>
#include <vector>

#include "fireedit/model.hpp"

namespace fireedit {

double mean_l1(const Image& a, const Image& b);
// Mean squared error.
double mean_l2(const Image& a, const Image& b);
// Mean absolute difference over pixels outside `box`; 0 when the box covers
// the image.
double masked_l1(const Image& a, const Image& b, const Box& box);
// Cosine similarity of frozen patch-encoder content features.
double feature_cosine(const EditModel<float>& model, const Image& a, const Image& b);

struct RecordEval {
  std::size_t index = 0;
  EditKind kind = EditKind::add;
  double l1 = 0, l2 = 0, cosine = 0, masked_l1 = 0;
  std::size_t slots_correct = 0;
};

struct EvalReport {
  std::vector<std::string> metrics;
  std::vector<RecordEval> records;
  std::size_t slots_total = 0, slots_correct = 0;

  double mean(const std::string& metric) const;
  double slot_accuracy() const;
};

// Samples every record (seed mixed with the record index) and scores it
// against its target.
EvalReport evaluate(const EditModel<float>& model, const std::vector<DatasetRecord>& data,
                    const SampleOptions& options, const std::vector<std::string>& metrics,
                    std::vector<Image>* samples = nullptr);
// Slot accuracy only, no sampling.
double slot_accuracy(const EditModel<float>& model, const std::vector<DatasetRecord>& data);

std::string format_report(const EvalReport& report);

// Binary PPM (P6).
void write_ppm(const std::string& path, const Image& image);

}  // namespace fireedit
