#include "doctest.h"
#include "sensor/corpus.hpp"
#include "test_util.hpp"

#include <set>

using namespace sensor;
using namespace sensor::corpus;
using sensor::testing::TempDir;

namespace {

std::set<std::string> ids_of(const std::vector<Review>& v) {
  std::set<std::string> s;
  for (const auto& r : v) s.insert(r.review_id);
  return s;
}

std::vector<Review> make_reviews(std::size_t n) {
  std::vector<Review> out;
  for (std::size_t i = 0; i < n; ++i) {
    Review r;
    r.review_id = "r" + std::to_string(i);
    r.raw_text = "text number " + std::to_string(i);
    r.gold_label = static_cast<Label>(i % 3);
    out.push_back(r);
  }
  return out;
}

}  // namespace

TEST_CASE("label taxonomy is a bijection over three codes") {
  for (Label l : kAllLabels) {
    CHECK(label_from_code(label_code(l)) == l);
    CHECK(parse_label(label_name(l)) == l);
    auto oh = one_hot(l);
    CHECK(oh[0] + oh[1] + oh[2] == 1.0);
  }
  CHECK_THROWS_AS(label_from_code(3), ValidationError);
  CHECK_FALSE(parse_label("BUG").has_value());
}

TEST_CASE("load_csv maps scraper columns") {
  auto res = parse_reviews(
      "reviewId,content,at\n"
      "a1,first review,2023-01-05 10:11:12\n"
      "a2,\"second, with comma\",2023-01-06\n"
      "a3,third,2023-02-01\n");
  REQUIRE(res.errors.empty());
  REQUIRE(res.reviews.size() == 3);
  CHECK(res.reviews[0].review_id == "a1");
  CHECK(res.reviews[0].raw_text == "first review");
  CHECK(format_date(*res.reviews[0].posted_at) == "2023-01-05");
  CHECK(res.reviews[1].raw_text == "second, with comma");
  CHECK_FALSE(res.reviews[2].rating.has_value());
}

TEST_CASE("empty content cell is a row error with its line number") {
  auto res = parse_reviews("reviewId,content\nx,hello\ny,\nz,  \n");
  CHECK(res.reviews.size() == 1);
  REQUIRE(res.errors.size() == 2);
  CHECK(res.errors[0].line == 3);
  CHECK(res.errors[1].line == 4);
}

TEST_CASE("shuffled column order loads identically") {
  auto canonical = parse_reviews(
      "review_id,app_id,rating,raw_text,gold_label\n"
      "1,com.x,5,good app,PIR\n"
      "2,com.x,1,\"my data leaked\",PB\n");
  auto shuffled = parse_reviews(
      "GOLD_LABEL,Raw_Text,rating,App_Id,Review_Id\n"
      "PIR,good app,5,com.x,1\n"
      "PB,\"my data leaked\",1,com.x,2\n");
  CHECK(canonical.reviews == shuffled.reviews);
}

TEST_CASE("file-level and row-level errors") {
  CHECK_THROWS_AS(parse_reviews("review_id,rating\n1,5\n"), ValidationError);
  CHECK_THROWS_AS(parse_reviews(""), ValidationError);
  CHECK_THROWS_AS(parse_reviews("content\n\"unterminated\n"), ValidationError);

  auto res = parse_reviews("content,rating\nok,9\nok2,3,extra\nbad \"quote\",2\n");
  CHECK(res.reviews.empty());
  CHECK(res.errors.size() == 3);

  auto dup = parse_reviews("review_id,content\na,x\na,y\n");
  CHECK(dup.reviews.size() == 1);
  CHECK(dup.errors.size() == 1);
}

TEST_CASE("BOM and CRLF are tolerated on read") {
  auto res = parse_reviews("\xEF\xBB\xBFreviewId,content\r\n1,hi\r\n2,\"multi\r\nline\"\r\n");
  REQUIRE(res.reviews.size() == 2);
  CHECK(res.reviews[0].review_id == "1");
  CHECK(res.reviews[1].raw_text == "multi\r\nline");
}

TEST_CASE("save_csv round trip preserves populated fields") {
  TempDir tmp;
  std::vector<Review> reviews;
  for (int i = 0; i < 5; ++i) {
    Review r;
    r.review_id = "id" + std::to_string(i);
    r.app_id = "com.app";
    r.posted_at = parse_date("2024-03-0" + std::to_string(i + 1));
    r.rating = i + 1;
    r.raw_text = i == 2 ? "She said \"no, never\", twice" : "  padded text " + std::to_string(i);
    r.processed_text = "processed " + std::to_string(i);
    r.tokens = std::vector<std::string>{"tok", std::to_string(i)};
    r.source = i == 4 ? Source::Augmented : Source::Scraped;
    if (i == 4) r.parent_id = "id0";
    r.label_a = Label::PB;
    r.label_b = Label::PIR;
    r.gold_label = static_cast<Label>(i % 3);
    r.model_label = Label::PFR;
    r.model_probs = std::array<double, 3>{0.1 + i * 0.01, 0.2, 0.7 - i * 0.01};
    r.extra["thumbsUpCount"] = std::to_string(i * 7);
    reviews.push_back(r);
  }
  save_csv(reviews, tmp / "r.csv");
  auto loaded = load_csv(tmp / "r.csv");
  CHECK(loaded.errors.empty());
  CHECK(loaded.reviews == reviews);
  CHECK(loaded.extra_columns == std::vector<std::string>{"thumbsUpCount"});

  const std::string text = sensor::testing::read_file(tmp / "r.csv");
  CHECK(text.find("\"She said \"\"no, never\"\", twice\"") != std::string::npos);
  CHECK(text.rfind("\xEF\xBB\xBF", 0) == std::string::npos);
}

TEST_CASE("save_csv of zero reviews writes only the header") {
  TempDir tmp;
  save_csv({}, tmp / "empty.csv");
  const std::string text = sensor::testing::read_file(tmp / "empty.csv");
  CHECK(text == csv_line(canonical_header()));
  CHECK(load_csv(tmp / "empty.csv").reviews.empty());
}

TEST_CASE("save_csv reports the failing path") {
  try {
    save_csv(make_reviews(1), "/nonexistent-dir/x.csv");
    FAIL("expected a throw");
  } catch (const RuntimeError& e) {
    CHECK(std::string(e.what()).find("/nonexistent-dir/x.csv") != std::string::npos);
  }
}

TEST_CASE("deduplicate keeps first occurrence after trimming") {
  auto mk = [](std::vector<std::string> texts) {
    std::vector<Review> v;
    for (std::size_t i = 0; i < texts.size(); ++i) {
      Review r;
      r.review_id = std::to_string(i);
      r.raw_text = texts[i];
      r.processed_text = texts[i];
      v.push_back(r);
    }
    return v;
  };
  auto out = deduplicate(mk({"a b c", "a b c", "d"}), DedupKey::RawText);
  CHECK(out.size() == 2);
  CHECK(out[0].review_id == "0");
  CHECK(deduplicate(mk({"p", "q", "r"}), DedupKey::RawText).size() == 3);

  // Oracle: size of the set of trimmed strings.
  std::vector<std::string> texts{"x ", "x", " y", "y", "x y", "x  y"};
  std::set<std::string> oracle;
  for (auto& t : texts) oracle.insert(std::string(trim(t)));
  CHECK(deduplicate(mk(texts), DedupKey::ProcessedText).size() == oracle.size());
  CHECK(deduplicate(mk({"x ", "x"}), DedupKey::RawText).size() == 1);

  std::vector<Review> no_processed = make_reviews(2);
  CHECK_THROWS_AS(deduplicate(no_processed, DedupKey::ProcessedText), ValidationError);
}

TEST_CASE("split sizes follow the floor rule") {
  auto s = split_sizes(15945);
  CHECK(s.train == 12756);
  CHECK(s.validation == 1594);
  CHECK(s.test == 1595);
  auto t = split_sizes(10);
  CHECK(t.train == 8);
  CHECK(t.validation == 1);
  CHECK(t.test == 1);
  CHECK_THROWS_AS(split_dataset(make_reviews(9), 1), ValidationError);
}

TEST_CASE("split is a deterministic partition") {
  for (std::size_t n : {10u, 11u, 19u, 57u, 100u, 333u}) {
    auto reviews = make_reviews(n);
    auto a = split_dataset(reviews, 42);
    auto b = split_dataset(reviews, 42);
    CHECK(a.manifest.to_text() == b.manifest.to_text());
    CHECK(ids_of(a.train) == ids_of(b.train));
    CHECK(a.train.size() == (n * 8) / 10);
    CHECK(a.validation.size() == n / 10);

    auto tr = ids_of(a.train), va = ids_of(a.validation), te = ids_of(a.test);
    std::set<std::string> all;
    all.insert(tr.begin(), tr.end());
    all.insert(va.begin(), va.end());
    all.insert(te.begin(), te.end());
    CHECK(all.size() == n);
    CHECK(all == ids_of(reviews));

    std::size_t class_total = 0;
    for (auto& part : a.manifest.class_counts)
      for (auto c : part) class_total += c;
    CHECK(class_total == n);
  }
}

TEST_CASE("different seeds change membership but not sizes") {
  auto reviews = make_reviews(200);
  auto a = split_dataset(reviews, 1);
  auto b = split_dataset(reviews, 2);
  CHECK(a.train.size() == b.train.size());
  CHECK(a.test.size() == b.test.size());
  CHECK(ids_of(a.train) != ids_of(b.train));
}
