#include "sensor/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

namespace sensor::corpus {

std::string_view source_name(Source s) {
  switch (s) {
    case Source::Scraped:
      return "scraped";
    case Source::Uploaded:
      return "uploaded";
    case Source::Augmented:
      return "augmented";
  }
  return "uploaded";
}

std::optional<Source> parse_source(std::string_view text) {
  const std::string t = to_lower_ascii(trim(text));
  if (t == "scraped") return Source::Scraped;
  if (t == "uploaded") return Source::Uploaded;
  if (t == "augmented") return Source::Augmented;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// CSV parsing

std::vector<CsvRecord> parse_csv(std::string_view text) {
  if (text.size() >= 3 && static_cast<unsigned char>(text[0]) == 0xEF &&
      static_cast<unsigned char>(text[1]) == 0xBB && static_cast<unsigned char>(text[2]) == 0xBF) {
    text.remove_prefix(3);
  }

  std::vector<CsvRecord> records;
  std::size_t i = 0;
  std::size_t line = 1;
  const std::size_t n = text.size();

  while (i < n) {
    CsvRecord rec;
    rec.line = line;
    std::string field;
    bool at_field_start = true;
    bool end_of_record = false;

    while (!end_of_record) {
      if (i >= n) {
        rec.fields.push_back(std::move(field));
        break;
      }
      char c = text[i];
      if (at_field_start && c == '"') {
        // Quoted field.
        ++i;
        bool closed = false;
        while (i < n) {
          char q = text[i];
          if (q == '"') {
            if (i + 1 < n && text[i + 1] == '"') {
              field += '"';
              i += 2;
              continue;
            }
            ++i;
            closed = true;
            break;
          }
          if (q == '\n') ++line;
          field += q;
          ++i;
        }
        if (!closed) {
          throw ValidationError("unterminated quoted field starting on line " +
                                std::to_string(rec.line));
        }
        // Anything between the closing quote and the delimiter is malformed.
        while (i < n && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
          if (!rec.error) rec.error = "unexpected character after closing quote";
          ++i;
        }
        at_field_start = false;
        continue;
      }
      if (c == ',') {
        rec.fields.push_back(std::move(field));
        field.clear();
        at_field_start = true;
        ++i;
        continue;
      }
      if (c == '\r' || c == '\n') {
        rec.fields.push_back(std::move(field));
        if (c == '\r' && i + 1 < n && text[i + 1] == '\n') ++i;
        ++i;
        ++line;
        end_of_record = true;
        continue;
      }
      if (c == '"' && !rec.error) rec.error = "bare quote in unquoted field";
      field += c;
      at_field_start = false;
      ++i;
    }

    // Skip blank lines.
    if (rec.fields.size() == 1 && rec.fields[0].empty() && !rec.error) continue;
    records.push_back(std::move(rec));
  }
  return records;
}

std::string csv_escape(std::string_view field) {
  bool needs_quotes = field.find_first_of(",\"\r\n") != std::string_view::npos;
  if (!field.empty() && (std::isspace(static_cast<unsigned char>(field.front())) ||
                         std::isspace(static_cast<unsigned char>(field.back())))) {
    needs_quotes = true;
  }
  if (!needs_quotes) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string csv_line(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(fields[i]);
  }
  out += '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Schema

namespace {

std::string normalize_header(std::string_view h) {
  std::string out;
  for (char c : trim(h)) {
    if (c == '_' || c == ' ' || c == '-') continue;
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

constexpr const char* kTokensColumn = "tokens";
constexpr std::array<const char*, kNumClasses> kProbColumns{"p_pfr", "p_pb", "p_pir"};

}  // namespace

CsvSchema CsvSchema::standard() {
  CsvSchema s;
  auto add = [&](std::string_view alias, const char* canonical) {
    s.aliases[normalize_header(alias)] = canonical;
  };
  for (const auto& col : canonical_header()) add(col, col.c_str());
  add(kTokensColumn, kTokensColumn);
  for (const char* p : kProbColumns) add(p, p);

  add("reviewId", "review_id");
  add("id", "review_id");
  add("appId", "app_id");
  add("app", "app_id");
  add("at", "posted_at");
  add("date", "posted_at");
  add("timestamp", "posted_at");
  add("score", "rating");
  add("stars", "rating");
  add("content", "raw_text");
  add("text", "raw_text");
  add("review", "raw_text");
  add("review_text", "raw_text");
  add("body", "raw_text");
  add("label", "gold_label");
  add("gold", "gold_label");
  add("class", "gold_label");
  return s;
}

std::optional<std::string> CsvSchema::canonical(std::string_view header) const {
  auto it = aliases.find(normalize_header(header));
  if (it == aliases.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

LoadResult parse_reviews(std::string_view csv_text, const CsvSchema& schema) {
  auto records = parse_csv(csv_text);
  if (records.empty()) throw ValidationError("CSV has no header row");

  const CsvRecord& header = records.front();
  LoadResult result;

  // Column index -> canonical name, or unknown header.
  std::vector<std::optional<std::string>> mapped(header.fields.size());
  std::set<std::string> seen_canonical;
  bool has_text = false;
  for (std::size_t c = 0; c < header.fields.size(); ++c) {
    auto canon = schema.canonical(header.fields[c]);
    if (canon && !seen_canonical.insert(*canon).second) {
      // A second column mapping onto the same field is kept verbatim instead.
      canon.reset();
    }
    if (canon) {
      if (*canon == "raw_text") has_text = true;
      mapped[c] = canon;
    } else {
      result.extra_columns.push_back(header.fields[c]);
    }
  }
  if (!has_text) throw ValidationError("CSV has no review text column");

  std::unordered_set<std::string> ids;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const CsvRecord& rec = records[r];
    auto fail = [&](std::string msg) { result.errors.push_back({rec.line, std::move(msg)}); };
    if (rec.error) {
      fail(*rec.error);
      continue;
    }
    if (rec.fields.size() != header.fields.size()) {
      fail("expected " + std::to_string(header.fields.size()) + " fields, found " +
           std::to_string(rec.fields.size()));
      continue;
    }

    Review rv;
    std::optional<std::string> error;
    std::array<std::optional<double>, kNumClasses> probs{};
    bool any_prob = false;
    auto set_label = [&](std::optional<Label>& slot, std::string_view value, const char* col) {
      if (trim(value).empty()) return;
      slot = parse_label(value);
      if (!slot) error = std::string("unknown label in ") + col + ": " + std::string(value);
    };

    for (std::size_t c = 0; c < rec.fields.size() && !error; ++c) {
      const std::string& value = rec.fields[c];
      if (!mapped[c]) {
        rv.extra[header.fields[c]] = value;
        continue;
      }
      const std::string& col = *mapped[c];
      if (col == "review_id") {
        rv.review_id = std::string(trim(value));
      } else if (col == "app_id") {
        rv.app_id = std::string(trim(value));
      } else if (col == "posted_at") {
        if (!trim(value).empty()) {
          rv.posted_at = parse_date(value);
          if (!rv.posted_at) error = "unparseable date: " + value;
        }
      } else if (col == "rating") {
        auto v = trim(value);
        if (!v.empty()) {
          int rating = 0;
          auto res = std::from_chars(v.data(), v.data() + v.size(), rating);
          if (res.ec != std::errc{} || res.ptr != v.data() + v.size() || rating < 1 || rating > 5) {
            error = "rating must be an integer 1-5: " + value;
          } else {
            rv.rating = rating;
          }
        }
      } else if (col == "raw_text") {
        rv.raw_text = value;
      } else if (col == "processed_text") {
        if (!value.empty()) rv.processed_text = value;
      } else if (col == kTokensColumn) {
        if (!value.empty()) rv.tokens = split_whitespace(value);
      } else if (col == "source") {
        if (!trim(value).empty()) {
          auto s = parse_source(value);
          if (!s) error = "unknown source: " + value;
          else rv.source = *s;
        }
      } else if (col == "parent_id") {
        if (!trim(value).empty()) rv.parent_id = std::string(trim(value));
      } else if (col == "label_a") {
        set_label(rv.label_a, value, "label_a");
      } else if (col == "label_b") {
        set_label(rv.label_b, value, "label_b");
      } else if (col == "gold_label") {
        set_label(rv.gold_label, value, "gold_label");
      } else if (col == "model_label") {
        set_label(rv.model_label, value, "model_label");
      } else {
        for (std::size_t k = 0; k < kNumClasses; ++k) {
          if (col == kProbColumns[k] && !trim(value).empty()) {
            probs[k] = parse_double(value);
            if (!probs[k]) error = "bad probability: " + value;
            any_prob = true;
          }
        }
      }
    }
    if (error) {
      fail(*error);
      continue;
    }
    if (trim(rv.raw_text).empty()) {
      fail("empty review text");
      continue;
    }
    if (any_prob) {
      if (!probs[0] || !probs[1] || !probs[2]) {
        fail("incomplete probability columns");
        continue;
      }
      rv.model_probs = std::array<double, kNumClasses>{*probs[0], *probs[1], *probs[2]};
    }
    if (rv.review_id.empty()) rv.review_id = "row-" + std::to_string(rec.line);
    if (!ids.insert(rv.review_id).second) {
      fail("duplicate review_id: " + rv.review_id);
      continue;
    }
    if (rv.source == Source::Augmented && !rv.parent_id) {
      fail("augmented review without parent_id");
      continue;
    }
    result.reviews.push_back(std::move(rv));
  }
  return result;
}

LoadResult load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_reviews(buf.str(), schema);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Saving

std::string format_reviews(const std::vector<Review>& reviews, bool include_labels,
                           const std::vector<std::string>& extra_columns) {
  bool any_tokens = false;
  bool any_probs = false;
  std::vector<std::string> extras = extra_columns;
  std::set<std::string> extra_set(extras.begin(), extras.end());
  for (const auto& r : reviews) {
    any_tokens |= r.tokens.has_value();
    any_probs |= r.model_probs.has_value();
    for (const auto& [k, v] : r.extra) {
      if (extra_set.insert(k).second) extras.push_back(k);
    }
  }

  std::vector<std::string> header;
  for (const auto& col : canonical_header()) {
    if (!include_labels && (col == "label_a" || col == "label_b" || col == "gold_label" ||
                            col == "model_label")) {
      continue;
    }
    header.push_back(col);
  }
  if (any_tokens) header.push_back(kTokensColumn);
  if (any_probs && include_labels) {
    for (const char* p : kProbColumns) header.push_back(p);
  }
  for (const auto& e : extras) header.push_back(e);

  std::string out = csv_line(header);
  auto label_cell = [](const std::optional<Label>& l) {
    return l ? std::string(label_name(*l)) : std::string();
  };
  for (const auto& r : reviews) {
    std::vector<std::string> row;
    row.reserve(header.size());
    for (const auto& col : header) {
      if (col == "review_id") row.push_back(r.review_id);
      else if (col == "app_id") row.push_back(r.app_id);
      else if (col == "posted_at") row.push_back(r.posted_at ? format_date(*r.posted_at) : "");
      else if (col == "rating") row.push_back(r.rating ? std::to_string(*r.rating) : "");
      else if (col == "raw_text") row.push_back(r.raw_text);
      else if (col == "processed_text") row.push_back(r.processed_text.value_or(""));
      else if (col == "source") row.emplace_back(source_name(r.source));
      else if (col == "parent_id") row.push_back(r.parent_id.value_or(""));
      else if (col == "label_a") row.push_back(label_cell(r.label_a));
      else if (col == "label_b") row.push_back(label_cell(r.label_b));
      else if (col == "gold_label") row.push_back(label_cell(r.gold_label));
      else if (col == "model_label") row.push_back(label_cell(r.model_label));
      else if (col == kTokensColumn) row.push_back(r.tokens ? join(*r.tokens, " ") : "");
      else if (col == kProbColumns[0] || col == kProbColumns[1] || col == kProbColumns[2]) {
        std::size_t k = col == kProbColumns[0] ? 0 : col == kProbColumns[1] ? 1 : 2;
        row.push_back(r.model_probs ? format_double((*r.model_probs)[k]) : "");
      } else {
        auto it = r.extra.find(col);
        row.push_back(it == r.extra.end() ? "" : it->second);
      }
    }
    out += csv_line(row);
  }
  return out;
}

void save_csv(const std::vector<Review>& reviews, const std::filesystem::path& path,
              bool include_labels, const std::vector<std::string>& extra_columns) {
  const std::string text = format_reviews(reviews, include_labels, extra_columns);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw RuntimeError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Dataset operations

std::vector<Review> deduplicate(const std::vector<Review>& reviews, DedupKey key) {
  std::unordered_set<std::string> seen;
  std::vector<Review> out;
  for (const auto& r : reviews) {
    std::string_view text;
    if (key == DedupKey::RawText) {
      text = r.raw_text;
    } else {
      if (!r.processed_text) {
        throw ValidationError("review " + r.review_id + " has no processed_text");
      }
      text = *r.processed_text;
    }
    if (seen.emplace(trim(text)).second) out.push_back(r);
  }
  return out;
}

SplitSizes split_sizes(std::size_t n) {
  const std::size_t train = (n * 8) / 10;
  const std::size_t validation = n / 10;
  return {train, validation, n - train - validation};
}

std::string SplitManifest::to_text() const {
  std::ostringstream out;
  static constexpr std::array<const char*, 3> names{"train", "validation", "test"};
  out << "seed=" << seed << '\n';
  for (std::size_t s = 0; s < 3; ++s) {
    out << names[s] << ".count=" << sizes[s] << '\n';
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      out << names[s] << '.' << label_name(static_cast<Label>(c)) << '=' << class_counts[s][c]
          << '\n';
    }
    out << names[s] << ".unlabeled=" << class_counts[s][kNumClasses] << '\n';
  }
  return out.str();
}

DatasetSplit split_dataset(const std::vector<Review>& reviews, std::uint64_t seed) {
  const std::size_t n = reviews.size();
  if (n < 10) {
    throw ValidationError("split needs at least 10 reviews, got " + std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);

  const SplitSizes sizes = split_sizes(n);
  DatasetSplit split;
  split.seed = seed;
  split.manifest.seed = seed;
  split.manifest.sizes = {sizes.train, sizes.validation, sizes.test};

  for (std::size_t k = 0; k < n; ++k) {
    const Review& r = reviews[order[k]];
    std::size_t part = k < sizes.train ? 0 : k < sizes.train + sizes.validation ? 1 : 2;
    auto& bucket = part == 0 ? split.train : part == 1 ? split.validation : split.test;
    bucket.push_back(r);
    std::size_t cls = r.gold_label ? static_cast<std::size_t>(label_code(*r.gold_label)) : kNumClasses;
    ++split.manifest.class_counts[part][cls];
  }
  return split;
}

}  // namespace sensor::corpus
