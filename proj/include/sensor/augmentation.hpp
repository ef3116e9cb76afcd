#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sensor/corpus.hpp"

namespace sensor::augment {

enum class Technique : std::uint8_t {
  RandomWordDrop,
  SynonymSubstitution,
  ContextualSubstitution,
  ContextualInsertion,
  AbstractSummarization,
};
inline constexpr std::size_t kNumTechniques = 5;
inline constexpr std::array<Technique, kNumTechniques> kAllTechniques{
    Technique::RandomWordDrop, Technique::SynonymSubstitution, Technique::ContextualSubstitution,
    Technique::ContextualInsertion, Technique::AbstractSummarization};

std::string_view technique_tag(Technique t);

struct AugPlan {
  // Applications per review, indexed by Technique.
  std::array<std::size_t, kNumTechniques> counts{2, 2, 2, 2, 1};
  std::uint64_t seed = 0;
  double drop_prob = 0.1;
  double sub_prob = 0.3;

  std::size_t per_review() const;
  // "default" or five comma-separated counts ("2,2,2,2,1").
  static AugPlan parse(std::string_view spec, std::uint64_t seed);
};

struct SynonymLexicon {
  std::map<std::string, std::vector<std::string>> entries;

  // "word: syn1, syn2" per line, '#' comments. Self-synonyms are dropped.
  static SynonymLexicon parse(std::string_view text);
  static SynonymLexicon load(const std::filesystem::path& path);
};

// Raised by providers when a single request cannot be served.
class ProviderError : public RuntimeError {
 public:
  using RuntimeError::RuntimeError;
};

// Stand-in for the neural augmenters.
class TextTransformProvider {
 public:
  virtual ~TextTransformProvider() = default;
  virtual std::string substitute(const std::string& text, std::uint64_t seed) = 0;
  virtual std::string insert(const std::string& text, std::uint64_t seed) = 0;
  virtual std::string summarize(const std::string& text, std::uint64_t seed) = 0;
  virtual std::string describe() const = 0;
};

// Deterministic placeholder transforms:
//   substitute - one seeded token becomes kSubstituteMarker
//   insert     - kInsertMarker goes in at a seeded position
//   summarize  - the first ceil(n/2) tokens
class StubProvider : public TextTransformProvider {
 public:
  static constexpr const char* kSubstituteMarker = "xxmask";
  static constexpr const char* kInsertMarker = "xxinsert";

  std::string substitute(const std::string& text, std::uint64_t seed) override;
  std::string insert(const std::string& text, std::uint64_t seed) override;
  std::string summarize(const std::string& text, std::uint64_t seed) override;
  std::string describe() const override { return "stub"; }
};

// Talks to a child process over its standard streams. Each request is one
// JSON object per line: {"op": "substitute"|"insert"|"summarize", "text": ..., "seed": N}.
// The reply is one line holding either a JSON string or {"text": ...};
// {"error": ...} or anything unparseable fails that request.
class CommandProvider : public TextTransformProvider {
 public:
  explicit CommandProvider(std::string command);
  ~CommandProvider() override;
  CommandProvider(const CommandProvider&) = delete;
  CommandProvider& operator=(const CommandProvider&) = delete;

  std::string substitute(const std::string& text, std::uint64_t seed) override;
  std::string insert(const std::string& text, std::uint64_t seed) override;
  std::string summarize(const std::string& text, std::uint64_t seed) override;
  std::string describe() const override { return "cmd:" + command_; }

 private:
  std::string request(std::string_view op, const std::string& text, std::uint64_t seed);

  std::string command_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string read_buffer_;
};

// "stub" or "cmd:<command line>".
std::unique_ptr<TextTransformProvider> make_provider(std::string_view spec);

// Each whitespace token is dropped independently with probability drop_prob.
// At least one token always survives. Throws ValidationError on empty input
// or drop_prob outside (0, 1).
std::string random_word_drop(const std::string& text, double drop_prob, std::uint64_t seed);

// Tokens whose alphabetic core is in the lexicon are replaced, with
// probability sub_prob, by a uniformly chosen synonym. Trailing punctuation is
// kept. Token order never changes.
std::string synonym_substitution(const std::string& text, const SynonymLexicon& lexicon,
                                 double sub_prob, std::uint64_t seed);

struct AugReport {
  std::size_t originals = 0;
  std::array<std::size_t, kNumTechniques> generated{};
  std::array<std::size_t, kNumTechniques> skipped{};

  std::size_t total_generated() const;
  std::string to_text() const;
};

struct AugResult {
  std::vector<corpus::Review> reviews;  // originals, then augmented
  AugReport report;
};

// Augments on processed_text (pre-processed, punctuation retained). Output:
// the originals in input order, then for each parent in input order its
// augmentations ordered by (technique, repetition). Augmented ids are
// "<parent>~<tag><rep>".
AugResult augment_training_set(const std::vector<corpus::Review>& train, const AugPlan& plan,
                               const SynonymLexicon& lexicon, TextTransformProvider& provider);

}  // namespace sensor::augment
