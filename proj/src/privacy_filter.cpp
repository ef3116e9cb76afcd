#include "sensor/privacy_filter.hpp"

#include <fstream>
#include <sstream>
#include <unordered_set>

namespace sensor::privacy {

namespace {

bool is_word_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && !is_word_char(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && is_word_char(text[j])) ++j;
    if (j > i) words.push_back(to_lower_ascii(text.substr(i, j - i)));
    i = j;
  }
  return words;
}

}  // namespace

void KeywordThemes::add(const std::string& theme, const std::string& phrase) {
  if (!themes.count(theme)) theme_order.push_back(theme);
  // Canonical form: lowercase words joined by single spaces.
  const std::string canonical = join(words_of(phrase), " ");
  if (canonical.empty()) throw ValidationError("empty keyword in theme '" + theme + "'");
  if (!themes[theme].insert(canonical).second) ++duplicates_dropped;
}

std::size_t KeywordThemes::keyword_count() const {
  std::size_t n = 0;
  for (const auto& [_, kws] : themes) n += kws.size();
  return n;
}

KeywordThemes KeywordThemes::parse(std::string_view text) {
  KeywordThemes kt;
  std::istringstream in{std::string(text)};
  std::string line;
  std::string current;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ValidationError("bad theme header on line " + std::to_string(lineno));
      current = to_lower_ascii(trim(t.substr(1, t.size() - 2)));
      if (current.empty()) throw ValidationError("empty theme name on line " + std::to_string(lineno));
      if (!kt.themes.count(current)) {
        kt.theme_order.push_back(current);
        kt.themes[current];
      }
      continue;
    }
    if (current.empty()) {
      throw ValidationError("keyword before any theme header on line " + std::to_string(lineno));
    }
    kt.add(current, std::string(t));
  }
  if (kt.keyword_count() == 0) throw ValidationError("keyword config has no keywords");
  return kt;
}

KeywordThemes KeywordThemes::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::size_t word_count(std::string_view raw_text) { return split_whitespace(raw_text).size(); }

std::vector<KeywordMatch> match_keywords(std::string_view raw_text, const KeywordThemes& themes) {
  const auto words = words_of(raw_text);
  std::unordered_set<std::string> singles(words.begin(), words.end());

  auto contains_phrase = [&](const std::string& phrase) {
    if (phrase.find(' ') == std::string::npos) return singles.count(phrase) > 0;
    const auto parts = split_whitespace(phrase);
    if (parts.size() > words.size()) return false;
    for (std::size_t i = 0; i + parts.size() <= words.size(); ++i) {
      bool ok = true;
      for (std::size_t k = 0; k < parts.size() && ok; ++k) ok = words[i + k] == parts[k];
      if (ok) return true;
    }
    return false;
  };

  std::vector<KeywordMatch> out;
  for (const auto& theme : themes.theme_order) {
    for (const auto& kw : themes.themes.at(theme)) {
      if (contains_phrase(kw)) out.push_back({theme, kw});
    }
  }
  return out;
}

FilterResult filter_candidates(const std::vector<corpus::Review>& reviews, const KeywordThemes& themes) {
  FilterResult res;
  res.decisions.reserve(reviews.size());
  for (const auto& r : reviews) {
    FilterDecision d;
    d.review_id = r.review_id;
    d.word_count = word_count(r.raw_text);
    d.matched = match_keywords(r.raw_text, themes);
    d.is_candidate = d.word_count >= kMinCandidateWords && !d.matched.empty();
    (d.is_candidate ? res.candidates : res.rest).push_back(r);
    res.decisions.push_back(std::move(d));
  }
  return res;
}

std::vector<corpus::Review> sample_irrelevant(const std::vector<corpus::Review>& rest, std::size_t n,
                                              std::uint64_t seed) {
  if (n > rest.size()) {
    throw ValidationError("cannot sample " + std::to_string(n) + " reviews from " +
                          std::to_string(rest.size()));
  }
  std::vector<std::size_t> idx(rest.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // Partial Fisher-Yates: the first n slots are the sample.
  Rng rng(derive_seed(seed, "sample_irrelevant"));
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  std::vector<corpus::Review> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(rest[idx[i]]);
  return out;
}

std::string format_decisions(const std::vector<FilterDecision>& decisions) {
  std::string out = corpus::csv_line({"review_id", "is_candidate", "word_count", "matches"});
  for (const auto& d : decisions) {
    std::vector<std::string> m;
    for (const auto& km : d.matched) m.push_back(km.theme + ":" + km.keyword);
    out += corpus::csv_line({d.review_id, d.is_candidate ? "1" : "0", std::to_string(d.word_count),
                             join(m, "|")});
  }
  return out;
}

}  // namespace sensor::privacy
