#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sensor/corpus.hpp"

namespace sensor::privacy {

// Theme name -> keyword phrases. Phrases are lowercase, trimmed, and may
// contain internal spaces ("log in").
struct KeywordThemes {
  std::vector<std::string> theme_order;
  std::map<std::string, std::set<std::string>> themes;
  std::size_t duplicates_dropped = 0;

  // Sections start with "[theme name]"; one phrase per line; '#' comments.
  static KeywordThemes load(const std::filesystem::path& path);
  static KeywordThemes parse(std::string_view text);

  void add(const std::string& theme, const std::string& phrase);
  std::size_t keyword_count() const;
};

struct KeywordMatch {
  std::string theme;
  std::string keyword;
  bool operator==(const KeywordMatch&) const = default;
  auto operator<=>(const KeywordMatch&) const = default;
};

struct FilterDecision {
  std::string review_id;
  bool is_candidate = false;
  std::vector<KeywordMatch> matched;
  std::size_t word_count = 0;
};

inline constexpr std::size_t kMinCandidateWords = 5;

// Number of maximal whitespace-delimited runs.
std::size_t word_count(std::string_view raw_text);

// Whole-word, case-insensitive matching. Words are maximal runs of ASCII
// alphanumerics; a phrase matches a consecutive run of words. Each
// (theme, keyword) is reported once, in theme order then keyword order.
std::vector<KeywordMatch> match_keywords(std::string_view raw_text, const KeywordThemes& themes);

struct FilterResult {
  std::vector<corpus::Review> candidates;
  std::vector<corpus::Review> rest;
  std::vector<FilterDecision> decisions;  // one per input, input order
};

FilterResult filter_candidates(const std::vector<corpus::Review>& reviews, const KeywordThemes& themes);

// Seeded uniform sample without replacement, in sampled order.
std::vector<corpus::Review> sample_irrelevant(const std::vector<corpus::Review>& rest, std::size_t n,
                                              std::uint64_t seed);

std::string format_decisions(const std::vector<FilterDecision>& decisions);

}  // namespace sensor::privacy
