#include "doctest.h"
#include "mtld_reference.hpp"
#include "sensor/metrics.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace sensor;
using namespace sensor::metrics;

namespace {

double pairwise_auc(const std::vector<std::size_t>& truth, const std::vector<std::vector<double>>& s, std::size_t c) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] != c) continue;
    for (std::size_t j = 0; j < truth.size(); ++j) {
      if (truth[j] == c) continue;
      pairs += 1;
      if (s[i][c] > s[j][c]) wins += 1;
      else if (s[i][c] == s[j][c]) wins += 0.5;
    }
  }
  return wins / pairs;
}

std::vector<std::vector<std::string>> fixture_texts() {
  std::istringstream in(sensor::testing::read_file(sensor::testing::fixture_dir() / "mtld_texts.txt"));
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(in, line))
    if (!trim(line).empty()) out.push_back(split_whitespace(line));
  return out;
}

std::vector<Label> labels(std::initializer_list<int> codes) {
  std::vector<Label> out;
  for (int c : codes) out.push_back(label_from_code(c));
  return out;
}

}  // namespace

TEST_CASE("confusion tallies") {
  // 12 pairs, tallied by hand:
  //        PFR PB PIR
  // PFR     2  1  1
  // PB      0  3  1
  // PIR     1  0  3
  auto t = labels({0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2});
  auto p = labels({0, 0, 1, 2, 1, 1, 1, 2, 2, 2, 2, 0});
  auto m = confusion(t, p);
  ConfusionMatrix want;
  want.counts = {2, 1, 1, 0, 3, 1, 1, 0, 3};
  CHECK(m == want);
  CHECK(m.total() == 12);

  auto diag = confusion(t, t);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(diag.at(i, j) == (i == j ? 4u : 0u));

  auto all_pir = confusion(t, std::vector<Label>(12, Label::PIR));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(all_pir.at(i, 2) == 4);
    CHECK(all_pir.at(i, 0) + all_pir.at(i, 1) == 0);
  }
  CHECK_THROWS_AS(confusion(t, labels({0})), ValidationError);
  CHECK_THROWS_AS(confusion(std::vector<std::size_t>{0}, std::vector<std::size_t>{3}, 3), ValidationError);
}

TEST_CASE("precision recall f1") {
  ConfusionMatrix m;
  m.counts = {4, 1, 0, 1, 4, 0, 0, 0, 2};
  auto r = prf_macro(m);
  CHECK(r.accuracy == doctest::Approx(10.0 / 12));
  CHECK(r.precision[0] == doctest::Approx(0.8));
  CHECK(r.recall[0] == doctest::Approx(0.8));
  CHECK(r.f1[0] == doctest::Approx(0.8));
  CHECK(r.f1[2] == doctest::Approx(1.0));
  CHECK(r.macro_f1 == doctest::Approx((0.8 + 0.8 + 1.0) / 3));

  ConfusionMatrix d;
  d.counts = {3, 0, 0, 0, 5, 0, 0, 0, 1};
  auto dr = prf_macro(d);
  CHECK(dr.macro_f1 == 1.0);
  CHECK(dr.macro_precision == 1.0);
  CHECK(dr.accuracy == 1.0);

  ConfusionMatrix z;
  z.counts = {3, 1, 0, 2, 5, 0, 0, 0, 0};
  auto zr = prf_macro(z);
  CHECK(zr.precision[2] == 0.0);
  CHECK(zr.recall[2] == 0.0);
  CHECK(zr.f1[2] == 0.0);
  CHECK(zr.precision_undefined[2]);
  CHECK(zr.recall_undefined[2]);
  CHECK_FALSE(zr.precision_undefined[0]);

  CHECK_THROWS_AS(prf_macro(ConfusionMatrix{}), ValidationError);
}

TEST_CASE("macro f1 matches an independent recomputation") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    ConfusionMatrix m;
    for (auto& c : m.counts) c = rng.below(6);
    if (m.total() == 0) m.at(0, 0) = 1;
    auto r = prf_macro(m);
    double f1sum = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      double tp = m.at(c, c), fp = 0, fn = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        if (j == c) continue;
        fp += m.at(j, c);
        fn += m.at(c, j);
      }
      // F1 = 2TP / (2TP + FP + FN)
      f1sum += tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    }
    CHECK(r.macro_f1 == doctest::Approx(f1sum / 3).epsilon(1e-12));
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(r.precision[c] >= 0.0);
      CHECK(r.precision[c] <= 1.0);
      CHECK(r.recall[c] <= 1.0);
    }
  }
}

TEST_CASE("confusion csv round trip reproduces the report") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    ConfusionMatrix m;
    for (auto& c : m.counts) c = rng.below(20);
    m.at(1, 1) += 1;
    auto back = parse_confusion_csv(m.to_csv({"PFR", "PB", "PIR"}));
    CHECK(back == m);
    auto a = prf_macro(m), b = prf_macro(back);
    CHECK(a.macro_f1 == b.macro_f1);
    CHECK(a.accuracy == b.accuracy);
  }
  CHECK_THROWS_AS(parse_confusion_csv("h,a,b\na,1,x\nb,0,1\n"), ValidationError);
  CHECK_THROWS_AS(parse_confusion_csv("h,a,b\na,1,2\n"), ValidationError);
}

TEST_CASE("auc conventions") {
  std::vector<std::size_t> t{0, 0, 1, 1, 2, 2};
  std::vector<std::vector<double>> perfect;
  for (auto c : t) {
    std::vector<double> row(3, 0.0);
    row[c] = 1.0;
    perfect.push_back(row);
  }
  auto r = roc_auc_ovr(t, perfect);
  CHECK(r.defined == 3);
  for (auto& a : r.per_class) CHECK(*a == 1.0);
  CHECK(r.macro == 1.0);

  std::vector<std::vector<double>> flat(6, std::vector<double>(3, 0.3));
  auto f = roc_auc_ovr(t, flat);
  for (auto& a : f.per_class) CHECK(*a == 0.5);

  // 6-item toy example against the pairwise definition
  std::vector<std::vector<double>> toy{{.7, .2, .1}, {.4, .4, .2}, {.3, .5, .2}, {.4, .3, .3}, {.1, .1, .8}, {.3, .3, .4}};
  auto tr = roc_auc_ovr(t, toy);
  for (std::size_t c = 0; c < 3; ++c) CHECK(*tr.per_class[c] == doctest::Approx(pairwise_auc(t, toy, c)).epsilon(1e-15));
  // class 1 by hand: positives {.5,.3}, negatives {.2,.4,.1,.3}: (4 + 2.5) / 8
  CHECK(*tr.per_class[1] == doctest::Approx(6.5 / 8));

  std::vector<std::size_t> only01{0, 0, 1};
  auto partial = roc_auc_ovr(only01, {{.9, .1, 0}, {.8, .2, 0}, {.1, .9, 0}});
  CHECK_FALSE(partial.per_class[2].has_value());
  CHECK(partial.defined == 2);
  CHECK(partial.macro == 1.0);

  CHECK_THROWS_AS(roc_auc_ovr(std::vector<std::size_t>{1, 1}, {{0, 1, 0}, {0, 1, 0}}), ValidationError);
  CHECK_THROWS_AS(roc_auc_ovr(std::vector<std::size_t>{0, 1}, {{NAN, 1, 0}, {0, 1, 0}}), ValidationError);
}

TEST_CASE("auc equals the pairwise oracle on random instances") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(49);
    std::vector<std::size_t> t(n);
    std::vector<std::vector<double>> s(n, std::vector<double>(3));
    const bool coarse = rng.below(2) == 0;  // coarse grids force ties
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = rng.below(3);
      for (auto& v : s[i]) v = coarse ? static_cast<double>(rng.below(4)) / 4 : rng.uniform();
    }
    bool any = false;
    for (std::size_t c = 0; c < 3; ++c) {
      auto pos = std::count(t.begin(), t.end(), c);
      any = any || (pos > 0 && static_cast<std::size_t>(pos) < n);
    }
    if (!any) {
      CHECK_THROWS_AS(roc_auc_ovr(t, s), ValidationError);
      continue;
    }
    auto r = roc_auc_ovr(t, s);
    for (std::size_t c = 0; c < 3; ++c) {
      if (!r.per_class[c]) continue;
      CHECK(std::abs(*r.per_class[c] - pairwise_auc(t, s, c)) <= 1e-12);
    }
  }
}

TEST_CASE("kappa") {
  auto k = cohens_kappa(AgreementTable::from_rows({{4, 1}, {1, 4}}));
  CHECK(k.observed == doctest::Approx(0.8));
  CHECK(k.expected == doctest::Approx(0.5));
  CHECK(k.kappa == doctest::Approx(0.6));

  auto same = labels({0, 1, 2, 2, 1, 0, 0});
  CHECK(cohens_kappa(agreement_table(same, same)).kappa == doctest::Approx(1.0));

  // independent with matching marginals: p_o = p_e
  auto chance = cohens_kappa(AgreementTable::from_rows({{1, 1}, {1, 1}}));
  CHECK(chance.kappa == doctest::Approx(0.0));

  auto one_class = cohens_kappa(AgreementTable::from_rows({{5, 0}, {0, 0}}));
  CHECK(one_class.degenerate);
  CHECK(one_class.kappa == 1.0);

  CHECK_THROWS_AS(cohens_kappa(AgreementTable{}), ValidationError);
  CHECK_THROWS_AS(agreement_table(same, labels({0})), ValidationError);
}

TEST_CASE("kappa is invariant under consistent relabeling") {
  Rng rng(8);
  const std::vector<std::array<int, 3>> perms{{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<Label> a, b;
    for (std::size_t i = 0; i < n; ++i) {
      a.push_back(label_from_code(static_cast<int>(rng.below(3))));
      b.push_back(rng.below(3) == 0 ? a.back() : label_from_code(static_cast<int>(rng.below(3))));
    }
    auto base = cohens_kappa(agreement_table(a, b));
    CHECK(base.kappa <= 1.0 + 1e-12);
    CHECK(base.kappa >= -1.0 - 1e-12);
    const auto& p = perms[rng.below(perms.size())];
    std::vector<Label> pa, pb;
    for (std::size_t i = 0; i < n; ++i) {
      pa.push_back(label_from_code(p[label_code(a[i])]));
      pb.push_back(label_from_code(p[label_code(b[i])]));
    }
    auto moved = cohens_kappa(agreement_table(pa, pb));
    CHECK(moved.kappa == doctest::Approx(base.kappa).epsilon(1e-12));
    CHECK(moved.degenerate == base.degenerate);
  }
}

TEST_CASE("mtld matches the reference on the fixture texts") {
  auto texts = fixture_texts();
  REQUIRE(texts.size() == sensor::testing::kMtldReference.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    CAPTURE(i);
    CHECK(std::abs(mtld(texts[i]) - sensor::testing::kMtldReference[i]) <= 1e-9);
  }
}

TEST_CASE("mtld special cases") {
  std::vector<std::string> distinct;
  for (int i = 0; i < 50; ++i) distinct.push_back("t" + std::to_string(i));
  CHECK(mtld(distinct) == 50.0);

  std::vector<std::string> same(100, "z");
  CHECK(mtld(same) == doctest::Approx(2.0));
  CHECK(mtld(same) < 5.0);

  std::vector<std::string> ab;
  for (int i = 0; i < 40; ++i) ab.push_back(i % 2 ? "b" : "a");
  auto d = mtld_detail(ab);
  CHECK(d.forward == doctest::Approx(d.backward));

  CHECK_THROWS_AS(mtld({}), ValidationError);
  CHECK_THROWS_AS(mtld({"a"}, 1.0), ValidationError);
  CHECK(mtld({"a", "a", "a"}, 0.5) > 0.0);
}

TEST_CASE("mtld is symmetric on palindromes") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> half;
    const std::size_t vocab = 1 + rng.below(8);
    for (std::size_t i = 0, n = 1 + rng.below(30); i < n; ++i) half.push_back("w" + std::to_string(rng.below(vocab)));
    auto pal = half;
    const bool odd = rng.below(2) == 0;
    pal.insert(pal.end(), half.rbegin() + (odd ? 1 : 0), half.rend());
    auto rev = pal;
    std::reverse(rev.begin(), rev.end());
    CHECK(mtld(pal) == mtld(rev));
    auto d = mtld_detail(pal);
    CHECK(d.forward == d.backward);
    CHECK(d.value >= 0.0);
  }
}

TEST_CASE("summary statistics") {
  auto s = summarize({4, 1, 3, 2});
  CHECK(s.mean == 2.5);
  CHECK(s.median == 2.5);
  CHECK(s.q1 == doctest::Approx(1.75));
  CHECK(s.q3 == doctest::Approx(3.25));
  CHECK(s.min == 1);
  CHECK(s.max == 4);
  CHECK(summarize({}).n == 0);
}

TEST_CASE("diversity profile") {
  auto texts = fixture_texts();
  std::vector<std::vector<std::string>> ten(texts.begin(), texts.begin() + 10);
  auto csv = diversity_profile(ten, ten);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "row,before,after");
  double sum = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    std::getline(in, line);
    auto c1 = line.find(','), c2 = line.find(',', c1 + 1);
    const double before = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
    const double after = std::stod(line.substr(c2 + 1));
    CHECK(before == after);
    CHECK(before == doctest::Approx(mtld(ten[i])).epsilon(1e-15));
    sum += before;
  }
  std::getline(in, line);
  REQUIRE(line.rfind("mean,", 0) == 0);
  CHECK(std::stod(line.substr(5)) == doctest::Approx(sum / 10).epsilon(1e-12));
  for (const char* key : {"median,", "q1,", "q3,"}) {
    std::getline(in, line);
    CHECK(line.rfind(key, 0) == 0);
  }

  std::vector<std::vector<std::string>> three(texts.begin(), texts.begin() + 3);
  auto uneven = diversity_profile(three, ten);
  CHECK(uneven.find("\n4,,") != std::string::npos);
}

TEST_CASE("evaluation report text") {
  auto t = labels({0, 1, 2, 2});
  auto p = labels({0, 1, 2, 1});
  std::vector<std::array<double, 3>> s{{.8, .1, .1}, {.1, .8, .1}, {.1, .1, .8}, {.1, .5, .4}};
  auto r = evaluate(t, p, s);
  CHECK(r.n == 4);
  CHECK(r.prf.accuracy == 0.75);
  auto text = r.to_text("grace");
  CHECK(text.find("model=grace") != std::string::npos);
  CHECK(text.find("[class.PIR]") != std::string::npos);
  auto csv = text.substr(text.find("[confusion]\n") + 12);
  CHECK(parse_confusion_csv(csv) == r.confusion);
}

TEST_CASE("bench order statistics") {
  sensor::testing::TempDir tmp;
  sensor::testing::write_file(tmp / "m.bin", std::string(3 * 1024 * 1024 / 2, 'x'));
  std::size_t calls = 0;
  auto one = bench(tmp / "m.bin", [&](std::size_t) { ++calls; }, 1, 2);
  CHECK(calls == 3);
  CHECK(one.min_ms == one.max_ms);
  CHECK(one.mean_ms == one.min_ms);
  CHECK(one.size_mb == 1.5);
  CHECK(one.file_bytes == 3 * 1024 * 1024 / 2);

  volatile double sink = 0;
  for (std::size_t runs : {2u, 7u, 30u}) {
    auto r = bench(tmp / "m.bin", [&](std::size_t i) {
      for (std::size_t k = 0; k < 1000 * (i % 5 + 1); ++k) sink = sink + std::sqrt(static_cast<double>(k));
    }, runs, 0);
    CHECK(r.runs == runs);
    CHECK(r.samples_ms.size() == runs);
    CHECK(r.min_ms <= r.mean_ms);
    CHECK(r.mean_ms <= r.max_ms);
  }
  CHECK(one.to_text().find("serial") != std::string::npos);
  CHECK_THROWS_AS(bench(tmp / "missing.bin", [](std::size_t) {}, 1, 0), ValidationError);
  CHECK_THROWS_AS(bench(tmp / "m.bin", [](std::size_t) {}, 0, 0), ValidationError);
}
