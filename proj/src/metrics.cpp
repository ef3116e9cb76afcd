#include "sensor/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace sensor::metrics {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

std::string ConfusionMatrix::to_csv(const std::vector<std::string>& names) const {
  if (names.size() != k) throw ValidationError("class name count does not match the matrix");
  std::string out = "true\\pred";
  for (const auto& n : names) out += "," + n;
  out += "\n";
  for (std::size_t t = 0; t < k; ++t) {
    out += names[t];
    for (std::size_t p = 0; p < k; ++p) out += "," + std::to_string(at(t, p));
    out += "\n";
  }
  return out;
}

ConfusionMatrix parse_confusion_csv(const std::string& csv) {
  std::vector<std::vector<std::size_t>> rows;
  std::istringstream in(csv);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::size_t> row;
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    while (std::getline(cells, cell, ',')) {
      std::size_t v = 0;
      auto t = trim(cell);
      auto res = std::from_chars(t.data(), t.data() + t.size(), v);
      if (res.ec != std::errc{} || res.ptr != t.data() + t.size()) throw ValidationError("bad confusion cell '" + cell + "'");
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  ConfusionMatrix m(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw ValidationError("confusion CSV is not square");
    for (std::size_t j = 0; j < rows.size(); ++j) m.at(i, j) = rows[i][j];
  }
  return m;
}

ConfusionMatrix confusion(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred, std::size_t k) {
  if (truth.size() != pred.size()) {
    throw ValidationError("label vectors differ in length (" + std::to_string(truth.size()) + " vs " +
                          std::to_string(pred.size()) + ")");
  }
  ConfusionMatrix m(k);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= k || pred[i] >= k) throw ValidationError("label outside the taxonomy");
    ++m.at(truth[i], pred[i]);
  }
  return m;
}

ConfusionMatrix confusion(const std::vector<Label>& truth, const std::vector<Label>& pred) {
  std::vector<std::size_t> t, p;
  for (auto l : truth) t.push_back(static_cast<std::size_t>(label_code(l)));
  for (auto l : pred) p.push_back(static_cast<std::size_t>(label_code(l)));
  return confusion(t, p, kNumClasses);
}

PrfReport prf_macro(const ConfusionMatrix& m) {
  const auto total = m.total();
  if (total == 0) throw ValidationError("empty confusion matrix");
  PrfReport r;
  std::size_t diag = 0;
  for (std::size_t c = 0; c < m.k; ++c) {
    std::size_t tp = m.at(c, c), pred = 0, actual = 0;
    for (std::size_t j = 0; j < m.k; ++j) {
      pred += m.at(j, c);
      actual += m.at(c, j);
    }
    diag += tp;
    const double p = pred ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
    const double rc = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
    r.precision.push_back(p);
    r.recall.push_back(rc);
    r.precision_undefined.push_back(pred == 0);
    r.recall_undefined.push_back(actual == 0);
    r.f1.push_back(p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0);
  }
  const double k = static_cast<double>(m.k);
  r.macro_precision = std::accumulate(r.precision.begin(), r.precision.end(), 0.0) / k;
  r.macro_recall = std::accumulate(r.recall.begin(), r.recall.end(), 0.0) / k;
  r.macro_f1 = std::accumulate(r.f1.begin(), r.f1.end(), 0.0) / k;
  r.accuracy = static_cast<double>(diag) / static_cast<double>(total);
  return r;
}

double auc_binary(const std::vector<double>& positives, const std::vector<double>& negatives) {
  if (positives.empty() || negatives.empty()) throw ValidationError("AUC needs positives and negatives");
  // Mann-Whitney U with mid-ranks.
  std::vector<std::pair<double, bool>> all;
  all.reserve(positives.size() + negatives.size());
  for (double s : positives) all.emplace_back(s, true);
  for (double s : negatives) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < all.size() && all[j].first == all[i].first) {
      if (all[j].second) ++pos_in_group;
      ++j;
    }
    // ranks i+1 .. j, mid-rank (i+1+j)/2
    rank_sum += static_cast<double>(pos_in_group) * static_cast<double>(i + 1 + j) / 2.0;
    i = j;
  }
  const double P = static_cast<double>(positives.size());
  const double N = static_cast<double>(negatives.size());
  return (rank_sum - P * (P + 1) / 2.0) / (P * N);
}

AucReport roc_auc_ovr(const std::vector<std::size_t>& truth, const std::vector<std::vector<double>>& scores) {
  if (truth.size() != scores.size()) throw ValidationError("truth and score rows differ in length");
  if (scores.empty()) throw ValidationError("AUC of an empty set");
  const std::size_t k = scores[0].size();
  AucReport r;
  double sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (scores[i].size() != k) throw ValidationError("ragged score matrix");
      if (!std::isfinite(scores[i][c])) throw ValidationError("non-finite score");
      (truth[i] == c ? pos : neg).push_back(scores[i][c]);
    }
    if (pos.empty() || neg.empty()) {
      r.per_class.push_back(std::nullopt);
      continue;
    }
    const double a = auc_binary(pos, neg);
    r.per_class.push_back(a);
    sum += a;
    ++r.defined;
  }
  if (r.defined == 0) throw ValidationError("no class has a defined AUC");
  r.macro = sum / static_cast<double>(r.defined);
  return r;
}

AucReport roc_auc_ovr(const std::vector<Label>& truth, const std::vector<std::array<double, kNumClasses>>& scores) {
  std::vector<std::size_t> t;
  std::vector<std::vector<double>> s;
  for (auto l : truth) t.push_back(static_cast<std::size_t>(label_code(l)));
  for (const auto& row : scores) s.emplace_back(row.begin(), row.end());
  return roc_auc_ovr(t, s);
}

AgreementTable AgreementTable::from_rows(const std::vector<std::vector<std::size_t>>& rows) {
  AgreementTable t(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw ValidationError("agreement table must be square");
    for (std::size_t j = 0; j < rows.size(); ++j) t.at(i, j) = rows[i][j];
  }
  return t;
}

std::size_t AgreementTable::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

AgreementTable agreement_table(const std::vector<Label>& a, const std::vector<Label>& b) {
  if (a.size() != b.size()) throw ValidationError("annotator label vectors differ in length");
  AgreementTable t;
  for (std::size_t i = 0; i < a.size(); ++i) ++t.at(label_code(a[i]), label_code(b[i]));
  return t;
}

KappaResult cohens_kappa(const AgreementTable& table) {
  const auto total = table.total();
  if (total == 0) throw ValidationError("kappa of an empty table");
  const double n = static_cast<double>(total);
  KappaResult r;
  for (std::size_t c = 0; c < table.k; ++c) {
    r.observed += static_cast<double>(table.at(c, c)) / n;
    double row = 0, col = 0;
    for (std::size_t j = 0; j < table.k; ++j) {
      row += static_cast<double>(table.at(c, j));
      col += static_cast<double>(table.at(j, c));
    }
    r.expected += (row / n) * (col / n);
  }
  if (r.expected >= 1.0) {
    r.degenerate = true;
    r.kappa = r.observed >= 1.0 ? 1.0 : 0.0;
    return r;
  }
  r.kappa = (r.observed - r.expected) / (1.0 - r.expected);
  return r;
}

namespace {

double mtld_pass(const std::vector<std::string>& tokens, double threshold, bool reverse) {
  const std::size_t n = tokens.size();
  double factors = 0.0;
  std::unordered_set<std::string> types;
  std::size_t count = 0;
  double ttr = 1.0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& tok = tokens[reverse ? n - 1 - k : k];
    ++count;
    types.insert(tok);
    ttr = static_cast<double>(types.size()) / static_cast<double>(count);
    if (ttr < threshold) {
      factors += 1.0;
      types.clear();
      count = 0;
      ttr = 1.0;
    }
  }
  if (count > 0) factors += (1.0 - ttr) / (1.0 - threshold);
  if (factors == 0.0) return static_cast<double>(n);
  return static_cast<double>(n) / factors;
}

}  // namespace

MtldDetail mtld_detail(const std::vector<std::string>& tokens, double threshold) {
  if (tokens.empty()) throw ValidationError("MTLD of an empty token list");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("MTLD threshold must be in (0, 1)");
  MtldDetail d;
  d.forward = mtld_pass(tokens, threshold, false);
  d.backward = mtld_pass(tokens, threshold, true);
  d.value = (d.forward + d.backward) / 2.0;
  return d;
}

double mtld(const std::vector<std::string>& tokens, double threshold) { return mtld_detail(tokens, threshold).value; }

Summary summarize(std::vector<double> values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  s.median = quantile(0.5);
  s.q1 = quantile(0.25);
  s.q3 = quantile(0.75);
  s.min = values.front();
  s.max = values.back();
  return s;
}

std::string diversity_profile(const std::vector<std::vector<std::string>>& before,
                              const std::vector<std::vector<std::string>>& after, double threshold) {
  auto column = [&](const std::vector<std::vector<std::string>>& docs) {
    std::vector<double> v;
    v.reserve(docs.size());
    for (const auto& d : docs) v.push_back(mtld(d, threshold));
    return v;
  };
  const auto b = column(before);
  const auto a = column(after);
  std::string out = "row,before,after\n";
  for (std::size_t i = 0; i < std::max(a.size(), b.size()); ++i) {
    out += std::to_string(i + 1) + ",";
    if (i < b.size()) out += fmt(b[i]);
    out += ",";
    if (i < a.size()) out += fmt(a[i]);
    out += "\n";
  }
  const auto sb = summarize(b), sa = summarize(a);
  auto cell = [](const Summary& s, double v) { return s.n ? fmt(v) : std::string(); };
  out += "mean," + cell(sb, sb.mean) + "," + cell(sa, sa.mean) + "\n";
  out += "median," + cell(sb, sb.median) + "," + cell(sa, sa.median) + "\n";
  out += "q1," + cell(sb, sb.q1) + "," + cell(sa, sa.q1) + "\n";
  out += "q3," + cell(sb, sb.q3) + "," + cell(sa, sa.q3) + "\n";
  return out;
}

EvaluationReport evaluate(const std::vector<Label>& truth, const std::vector<Label>& pred,
                          const std::vector<std::array<double, kNumClasses>>& scores) {
  EvaluationReport r;
  r.confusion = confusion(truth, pred);
  r.prf = prf_macro(r.confusion);
  r.auc = roc_auc_ovr(truth, scores);
  r.n = truth.size();
  return r;
}

std::string EvaluationReport::to_text(const std::string& model_name) const {
  std::ostringstream out;
  out << "[summary]\n";
  if (!model_name.empty()) out << "model=" << model_name << "\n";
  out << "n=" << n << "\n"
      << "accuracy=" << fmt(prf.accuracy) << "\n"
      << "macro_precision=" << fmt(prf.macro_precision) << "\n"
      << "macro_recall=" << fmt(prf.macro_recall) << "\n"
      << "macro_f1=" << fmt(prf.macro_f1) << "\n"
      << "macro_roc_auc=" << fmt(auc.macro) << "\n"
      << "auc_classes_defined=" << auc.defined << "\n";
  for (std::size_t c = 0; c < prf.precision.size(); ++c) {
    const auto name = std::string(label_name(label_from_code(static_cast<int>(c))));
    out << "\n[class." << name << "]\n"
        << "precision=" << fmt(prf.precision[c]) << (prf.precision_undefined[c] ? " (undefined: no predictions)" : "")
        << "\n"
        << "recall=" << fmt(prf.recall[c]) << (prf.recall_undefined[c] ? " (undefined: no true items)" : "") << "\n"
        << "f1=" << fmt(prf.f1[c]) << "\n"
        << "roc_auc=" << (auc.per_class[c] ? fmt(*auc.per_class[c]) : std::string("undefined")) << "\n";
  }
  out << "\n[confusion]\n"
      << confusion.to_csv({"PFR", "PB", "PIR"});
  return out.str();
}

std::string BenchReport::to_text() const {
  std::ostringstream out;
  out << "[bench]\n"
      << "model_bytes=" << file_bytes << "\n"
      << "model_size_mb=" << fmt(size_mb) << "\n"
      << "runs=" << runs << "\n"
      << "warmups=" << warmups << "\n"
      << "min_ms=" << fmt(min_ms) << "\n"
      << "max_ms=" << fmt(max_ms) << "\n"
      << "mean_ms=" << fmt(mean_ms) << "\n"
      << "mode=single-input, serial; run on an otherwise idle machine\n";
  return out.str();
}

BenchReport bench(const std::filesystem::path& model_path, const std::function<void(std::size_t)>& run,
                  std::size_t runs, std::size_t warmups) {
  if (runs < 1) throw ValidationError("bench needs at least one run");
  std::error_code ec;
  BenchReport r;
  r.file_bytes = std::filesystem::file_size(model_path, ec);
  if (ec) throw ValidationError("cannot stat model file " + model_path.string());
  r.size_mb = static_cast<double>(r.file_bytes) / (1024.0 * 1024.0);
  r.runs = runs;
  r.warmups = warmups;
  for (std::size_t i = 0; i < warmups; ++i) run(i);
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run(i);
    const auto t1 = std::chrono::steady_clock::now();
    r.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  r.min_ms = *std::min_element(r.samples_ms.begin(), r.samples_ms.end());
  r.max_ms = *std::max_element(r.samples_ms.begin(), r.samples_ms.end());
  r.mean_ms = std::accumulate(r.samples_ms.begin(), r.samples_ms.end(), 0.0) / static_cast<double>(runs);
  // Guard the order-statistics invariant against summation rounding.
  r.mean_ms = std::clamp(r.mean_ms, r.min_ms, r.max_ms);
  return r;
}

}  // namespace sensor::metrics
