#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sensor/common.hpp"

namespace sensor::metrics {

// Rows are true classes, columns predicted.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::size_t> counts;

  explicit ConfusionMatrix(std::size_t classes = kNumClasses) : k(classes), counts(classes * classes, 0) {}
  std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * k + pred]; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * k + pred]; }
  std::size_t total() const;
  // Header row of class names, then one row per true class.
  std::string to_csv(const std::vector<std::string>& names) const;

  bool operator==(const ConfusionMatrix&) const = default;
};

// Inverse of ConfusionMatrix::to_csv.
ConfusionMatrix parse_confusion_csv(const std::string& csv);

ConfusionMatrix confusion(const std::vector<Label>& truth, const std::vector<Label>& pred);
ConfusionMatrix confusion(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred, std::size_t k);

struct PrfReport {
  std::vector<double> precision, recall, f1;
  // Set when a zero denominator forced the 0 convention.
  std::vector<bool> precision_undefined, recall_undefined;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  double accuracy = 0;
};

PrfReport prf_macro(const ConfusionMatrix& m);

struct AucReport {
  std::vector<std::optional<double>> per_class;  // empty optional: class lacks positives or negatives
  double macro = 0;
  std::size_t defined = 0;
};

// One-vs-rest rank statistic with ties counted as one half.
// scores[i][c] is the score of item i for class c.
AucReport roc_auc_ovr(const std::vector<std::size_t>& truth, const std::vector<std::vector<double>>& scores);
AucReport roc_auc_ovr(const std::vector<Label>& truth, const std::vector<std::array<double, kNumClasses>>& scores);

// Two-sample AUC: P(pos > neg) + 0.5 P(pos == neg).
double auc_binary(const std::vector<double>& positives, const std::vector<double>& negatives);

// Cross-tabulation of two annotators; rows annotator A.
struct AgreementTable {
  std::size_t k = 0;
  std::vector<std::size_t> counts;

  explicit AgreementTable(std::size_t classes = kNumClasses) : k(classes), counts(classes * classes, 0) {}
  static AgreementTable from_rows(const std::vector<std::vector<std::size_t>>& rows);
  std::size_t& at(std::size_t a, std::size_t b) { return counts[a * k + b]; }
  std::size_t at(std::size_t a, std::size_t b) const { return counts[a * k + b]; }
  std::size_t total() const;
};

AgreementTable agreement_table(const std::vector<Label>& a, const std::vector<Label>& b);

struct KappaResult {
  double kappa = 0.0;
  double observed = 0.0;
  double expected = 0.0;
  bool degenerate = false;  // p_e == 1
};

KappaResult cohens_kappa(const AgreementTable& table);

inline constexpr double kMtldThreshold = 0.72;

struct MtldDetail {
  double forward = 0.0;
  double backward = 0.0;
  double value = 0.0;
};

// Mean of forward and backward passes. A pass with zero (full + partial)
// factors returns the token count.
double mtld(const std::vector<std::string>& tokens, double threshold = kMtldThreshold);
MtldDetail mtld_detail(const std::vector<std::string>& tokens, double threshold = kMtldThreshold);

struct Summary {
  double mean = 0, median = 0, q1 = 0, q3 = 0, min = 0, max = 0;
  std::size_t n = 0;
};

// Quartiles by linear interpolation between order statistics.
Summary summarize(std::vector<double> values);

// CSV "row,before,after" with per-review MTLD values (blank cell where one
// column is shorter), then summary rows labelled mean, median, q1, q3.
std::string diversity_profile(const std::vector<std::vector<std::string>>& before,
                              const std::vector<std::vector<std::string>>& after,
                              double threshold = kMtldThreshold);

struct EvaluationReport {
  ConfusionMatrix confusion;
  PrfReport prf;
  AucReport auc;
  std::size_t n = 0;

  // Key-value sections.
  std::string to_text(const std::string& model_name = "") const;
};

EvaluationReport evaluate(const std::vector<Label>& truth, const std::vector<Label>& pred,
                          const std::vector<std::array<double, kNumClasses>>& scores);

struct BenchReport {
  std::uintmax_t file_bytes = 0;
  double size_mb = 0;
  std::size_t runs = 0;
  std::size_t warmups = 0;
  double min_ms = 0, max_ms = 0, mean_ms = 0;
  std::vector<double> samples_ms;

  std::string to_text() const;
};

// Times run(i) for i in [0, runs) after `warmups` untimed calls; the model
// size is the byte size of model_path.
BenchReport bench(const std::filesystem::path& model_path, const std::function<void(std::size_t)>& run,
                  std::size_t runs = 100, std::size_t warmups = 10);

}  // namespace sensor::metrics
