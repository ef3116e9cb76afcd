#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "sensor/corpus.hpp"

namespace sensor::textprep {

// Lemmatizers map one lowercase token to its lemma. Implementations must be
// idempotent: lemma(lemma(w)) == lemma(w).
class Lemmatizer {
 public:
  virtual ~Lemmatizer() = default;
  virtual std::string lemma(const std::string& word) const = 0;
};

struct SuffixRule {
  std::string suffix;
  std::string replacement;
  std::size_t min_stem = 0;
};

// Suffix rewrite rules plus an exception table, iterated to a fixpoint.
class RuleLemmatizer : public Lemmatizer {
 public:
  RuleLemmatizer() = default;
  RuleLemmatizer(std::vector<SuffixRule> rules, std::unordered_map<std::string, std::string> exceptions);

  static RuleLemmatizer load(const std::filesystem::path& path);

  std::string lemma(const std::string& word) const override;

  const std::vector<SuffixRule>& rules() const { return rules_; }

 private:
  std::string apply_once(const std::string& word) const;

  std::vector<SuffixRule> rules_;
  std::unordered_map<std::string, std::string> exceptions_;
};

struct PrepConfig {
  std::unordered_map<std::string, std::string> contractions;
  std::unordered_set<std::string> stopwords;
  std::shared_ptr<const Lemmatizer> lemmatizer;
  std::set<char> punctuation_keep{',', ';', '.', '?', '!'};

  // Reads contractions.txt, stopwords.txt, and lemma_rules.txt from `dir`.
  static PrepConfig load(const std::filesystem::path& dir);
};

// lowercase -> contraction expansion -> HTML strip + entity decode ->
// '@' mention removal -> digit removal -> special-character removal (keeping
// punctuation_keep) -> whitespace collapse -> trim.
std::string preprocess(std::string_view raw_text, const PrepConfig& config);

// Strips all punctuation, splits on whitespace, drops stopwords, lemmatizes.
// Lemmas that are themselves stopwords are dropped too.
std::vector<std::string> postprocess(std::string_view text, const PrepConfig& config);

enum class Stage { Pre, Post };

struct DropReport {
  Stage stage = Stage::Pre;
  std::size_t inputs = 0;
  std::size_t survivors = 0;
  std::vector<std::string> empty;      // review ids
  std::vector<std::string> duplicate;  // review ids

  std::string to_text() const;
};

struct StageResult {
  std::vector<corpus::Review> reviews;
  DropReport report;
};

// Pre: raw_text -> processed_text. Post: processed_text -> tokens.
// After either stage, empty and exact-duplicate outputs are dropped in input
// order (first occurrence survives).
StageResult run_stage(const std::vector<corpus::Review>& reviews, Stage stage, const PrepConfig& config);

}  // namespace sensor::textprep
