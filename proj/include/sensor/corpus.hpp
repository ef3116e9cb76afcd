#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sensor/common.hpp"

namespace sensor::corpus {

enum class Source : std::uint8_t { Scraped, Uploaded, Augmented };

std::string_view source_name(Source s);
std::optional<Source> parse_source(std::string_view text);

struct Review {
  std::string review_id;
  std::string app_id;
  std::optional<Date> posted_at;
  std::optional<int> rating;
  std::string raw_text;
  std::optional<std::string> processed_text;
  std::optional<std::vector<std::string>> tokens;
  Source source = Source::Uploaded;
  std::optional<std::string> parent_id;

  std::optional<Label> label_a;
  std::optional<Label> label_b;
  std::optional<Label> gold_label;
  std::optional<Label> model_label;
  std::optional<std::array<double, kNumClasses>> model_probs;

  // Columns the schema does not know, keyed by their header as written.
  std::map<std::string, std::string> extra;

  bool operator==(const Review&) const = default;
};

// ---------------------------------------------------------------------------
// CSV

// Parses RFC-4180 text into records. Throws ValidationError on an unterminated
// quoted field. A bare quote inside an unquoted field is reported per record.
struct CsvRecord {
  std::vector<std::string> fields;
  std::size_t line = 0;  // 1-based line where the record starts
  std::optional<std::string> error;
};
std::vector<CsvRecord> parse_csv(std::string_view text);

std::string csv_escape(std::string_view field);
std::string csv_line(const std::vector<std::string>& fields);

// Maps incoming header names onto canonical columns. Matching ignores case,
// spaces, underscores, and hyphens ("reviewId" == "review_id").
struct CsvSchema {
  std::map<std::string, std::string> aliases;  // normalized alias -> canonical column

  static CsvSchema standard();
  std::optional<std::string> canonical(std::string_view header) const;
};

struct RowError {
  std::size_t line = 0;
  std::string message;
};

struct LoadResult {
  std::vector<Review> reviews;
  std::vector<RowError> errors;
  // Unknown headers in file order, kept so a round trip reproduces them.
  std::vector<std::string> extra_columns;
};

inline const std::vector<std::string>& canonical_header() {
  static const std::vector<std::string> header{
      "review_id", "app_id", "posted_at", "rating",  "raw_text",   "processed_text",
      "source",    "parent_id", "label_a", "label_b", "gold_label", "model_label"};
  return header;
}

// Rows that fail validation land in `errors` and are skipped. Throws
// ValidationError for file-level problems (no header, no text column).
LoadResult parse_reviews(std::string_view csv_text, const CsvSchema& schema = CsvSchema::standard());
LoadResult load_csv(const std::filesystem::path& path, const CsvSchema& schema = CsvSchema::standard());

// Optional columns (tokens, model probabilities) are emitted only when some
// review populates them. Label columns are omitted when include_labels is off.
std::string format_reviews(const std::vector<Review>& reviews, bool include_labels = true,
                           const std::vector<std::string>& extra_columns = {});
void save_csv(const std::vector<Review>& reviews, const std::filesystem::path& path,
              bool include_labels = true, const std::vector<std::string>& extra_columns = {});

// ---------------------------------------------------------------------------
// Dataset operations

enum class DedupKey { RawText, ProcessedText };

std::vector<Review> deduplicate(const std::vector<Review>& reviews, DedupKey key);

struct SplitManifest {
  std::uint64_t seed = 0;
  std::array<std::size_t, 3> sizes{};                        // train, validation, test
  std::array<std::array<std::size_t, kNumClasses + 1>, 3> class_counts{};  // last = unlabeled

  std::string to_text() const;
};

struct DatasetSplit {
  std::vector<Review> train;
  std::vector<Review> validation;
  std::vector<Review> test;
  std::uint64_t seed = 0;
  SplitManifest manifest;
};

struct SplitSizes {
  std::size_t train, validation, test;
};
SplitSizes split_sizes(std::size_t n);

DatasetSplit split_dataset(const std::vector<Review>& reviews, std::uint64_t seed);

}  // namespace sensor::corpus
