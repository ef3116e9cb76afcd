#include "sensor/textprep.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace sensor::textprep {

namespace {

std::vector<std::string> read_config_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    lines.emplace_back(t);
  }
  return lines;
}

bool is_lower_alpha(char c) { return c >= 'a' && c <= 'z'; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }
bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Lowercases ASCII and folds typographic apostrophes to '.
std::string lowercase_stage(std::string_view in) {
  std::string out;
  out.reserve(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    unsigned char c = static_cast<unsigned char>(in[i]);
    if (c == 0xE2 && i + 2 < in.size() && static_cast<unsigned char>(in[i + 1]) == 0x80 &&
        (static_cast<unsigned char>(in[i + 2]) == 0x98 || static_cast<unsigned char>(in[i + 2]) == 0x99)) {
      out += '\'';
      i += 2;
      continue;
    }
    out += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
  }
  return out;
}

std::string expand_contractions(const std::string& in,
                                const std::unordered_map<std::string, std::string>& lexicon) {
  std::string out;
  out.reserve(in.size());
  std::size_t i = 0;
  while (i < in.size()) {
    if (is_lower_alpha(in[i]) || in[i] == '\'') {
      std::size_t j = i;
      while (j < in.size() && (is_lower_alpha(in[j]) || in[j] == '\'')) ++j;
      std::string word = in.substr(i, j - i);
      auto it = lexicon.find(word);
      out += it == lexicon.end() ? word : it->second;
      i = j;
    } else {
      out += in[i++];
    }
  }
  return out;
}

void append_codepoint_ascii(std::string& out, long cp) {
  if (cp > 0 && cp < 128) out += static_cast<char>(cp);
  else out += ' ';
}

std::string strip_html(const std::string& in) {
  // Tags first.
  std::string no_tags;
  no_tags.reserve(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] == '<' && i + 1 < in.size() &&
        (is_lower_alpha(in[i + 1]) || in[i + 1] == '/' || in[i + 1] == '!')) {
      std::size_t close = in.find('>', i + 1);
      if (close != std::string::npos) {
        no_tags += ' ';
        i = close;
        continue;
      }
    }
    no_tags += in[i];
  }

  static const std::unordered_map<std::string, char> named{
      {"amp", '&'}, {"lt", '<'}, {"gt", '>'}, {"quot", '"'}, {"apos", '\''}, {"nbsp", ' '}};
  std::string out;
  out.reserve(no_tags.size());
  for (std::size_t i = 0; i < no_tags.size(); ++i) {
    if (no_tags[i] == '&') {
      std::size_t semi = no_tags.find(';', i + 1);
      if (semi != std::string::npos && semi - i <= 10) {
        std::string name = no_tags.substr(i + 1, semi - i - 1);
        if (!name.empty() && name[0] == '#') {
          bool hex = name.size() > 1 && name[1] == 'x';
          std::string digits = name.substr(hex ? 2 : 1);
          bool valid = !digits.empty();
          for (char c : digits) valid &= hex ? std::isxdigit(static_cast<unsigned char>(c)) != 0 : is_digit(c);
          if (valid) {
            append_codepoint_ascii(out, std::stol(digits, nullptr, hex ? 16 : 10));
            i = semi;
            continue;
          }
        } else if (auto it = named.find(name); it != named.end()) {
          out += it->second;
          i = semi;
          continue;
        }
      }
    }
    out += no_tags[i];
  }
  return out;
}

std::string remove_mentions(const std::string& in) {
  std::string out;
  out.reserve(in.size());
  std::size_t i = 0;
  while (i < in.size()) {
    bool token_start = i == 0 || is_space(in[i - 1]);
    if (token_start && in[i] == '@') {
      while (i < in.size() && !is_space(in[i])) ++i;
      continue;
    }
    out += in[i++];
  }
  return out;
}

std::string collapse_whitespace(const std::string& in) {
  std::string out;
  out.reserve(in.size());
  bool pending_space = false;
  for (char c : in) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

RuleLemmatizer::RuleLemmatizer(std::vector<SuffixRule> rules,
                               std::unordered_map<std::string, std::string> exceptions)
    : rules_(std::move(rules)), exceptions_(std::move(exceptions)) {}

RuleLemmatizer RuleLemmatizer::load(const std::filesystem::path& path) {
  std::vector<SuffixRule> rules;
  std::unordered_map<std::string, std::string> exceptions;
  for (const auto& line : read_config_lines(path)) {
    auto parts = split_whitespace(line);
    if (parts.size() == 3 && parts[0] == "exception") {
      exceptions[parts[1]] = parts[2];
    } else if (parts.size() == 4 && parts[0] == "rule") {
      SuffixRule r;
      r.suffix = parts[1];
      r.replacement = parts[2] == "-" ? "" : parts[2];
      r.min_stem = static_cast<std::size_t>(std::stoul(parts[3]));
      rules.push_back(std::move(r));
    } else {
      throw ValidationError(path.string() + ": bad lemma rule line: " + line);
    }
  }
  if (rules.empty() && exceptions.empty()) throw ValidationError(path.string() + ": no lemma rules");
  return RuleLemmatizer(std::move(rules), std::move(exceptions));
}

std::string RuleLemmatizer::apply_once(const std::string& word) const {
  if (auto it = exceptions_.find(word); it != exceptions_.end()) return it->second;
  for (const auto& r : rules_) {
    if (ends_with(word, r.suffix) && word.size() - r.suffix.size() >= r.min_stem) {
      return word.substr(0, word.size() - r.suffix.size()) + r.replacement;
    }
  }
  return word;
}

std::string RuleLemmatizer::lemma(const std::string& word) const {
  std::string current = word;
  for (int i = 0; i < 16; ++i) {
    std::string next = apply_once(current);
    if (next == current || next.empty()) return current;
    current = std::move(next);
  }
  return current;
}

PrepConfig PrepConfig::load(const std::filesystem::path& dir) {
  PrepConfig cfg;
  for (const auto& line : read_config_lines(dir / "contractions.txt")) {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("bad contraction line: " + line);
    std::string key(trim(std::string_view(line).substr(0, eq)));
    std::string value(trim(std::string_view(line).substr(eq + 1)));
    if (key.empty() || value.empty()) throw ValidationError("bad contraction line: " + line);
    cfg.contractions[to_lower_ascii(key)] = to_lower_ascii(value);
  }
  for (const auto& line : read_config_lines(dir / "stopwords.txt")) {
    cfg.stopwords.insert(to_lower_ascii(line));
  }
  cfg.lemmatizer = std::make_shared<RuleLemmatizer>(RuleLemmatizer::load(dir / "lemma_rules.txt"));
  if (cfg.contractions.empty() || cfg.stopwords.empty()) {
    throw ValidationError("text preparation lexicons must not be empty");
  }
  return cfg;
}

// ---------------------------------------------------------------------------

std::string preprocess(std::string_view raw_text, const PrepConfig& config) {
  std::string s = lowercase_stage(raw_text);
  s = expand_contractions(s, config.contractions);
  s = strip_html(s);
  s = remove_mentions(s);

  std::string cleaned;
  cleaned.reserve(s.size());
  for (char c : s) {
    if (is_digit(c) || c == '\'') continue;
    if (is_lower_alpha(c) || is_space(c) || config.punctuation_keep.count(c)) {
      cleaned += c;
    } else {
      cleaned += ' ';
    }
  }
  return collapse_whitespace(cleaned);
}

std::vector<std::string> postprocess(std::string_view text, const PrepConfig& config) {
  std::string letters;
  letters.reserve(text.size());
  for (char c : text) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    if (c == '\'') continue;
    letters += is_lower_alpha(c) ? c : ' ';
  }
  std::vector<std::string> tokens;
  for (auto& tok : split_whitespace(letters)) {
    if (config.stopwords.count(tok)) continue;
    std::string lemma = config.lemmatizer ? config.lemmatizer->lemma(tok) : tok;
    if (lemma.empty() || config.stopwords.count(lemma)) continue;
    tokens.push_back(std::move(lemma));
  }
  return tokens;
}

std::string DropReport::to_text() const {
  std::ostringstream out;
  out << "stage=" << (stage == Stage::Pre ? "pre" : "post") << '\n';
  out << "inputs=" << inputs << '\n';
  out << "survivors=" << survivors << '\n';
  out << "dropped.empty=" << empty.size() << '\n';
  out << "dropped.duplicate=" << duplicate.size() << '\n';
  for (const auto& id : empty) out << "empty " << id << '\n';
  for (const auto& id : duplicate) out << "duplicate " << id << '\n';
  return out.str();
}

StageResult run_stage(const std::vector<corpus::Review>& reviews, Stage stage, const PrepConfig& config) {
  StageResult result;
  result.report.stage = stage;
  result.report.inputs = reviews.size();
  std::unordered_set<std::string> seen;

  for (const auto& in : reviews) {
    corpus::Review r = in;
    std::string key;
    if (stage == Stage::Pre) {
      r.processed_text = preprocess(r.raw_text, config);
      key = *r.processed_text;
    } else {
      if (!r.processed_text) {
        throw ValidationError("review " + r.review_id + " has no processed_text; run the pre stage first");
      }
      r.tokens = postprocess(*r.processed_text, config);
      key = join(*r.tokens, " ");
    }
    if (key.empty()) {
      result.report.empty.push_back(r.review_id);
      continue;
    }
    if (!seen.insert(key).second) {
      result.report.duplicate.push_back(r.review_id);
      continue;
    }
    result.reviews.push_back(std::move(r));
  }
  result.report.survivors = result.reviews.size();
  return result;
}

}  // namespace sensor::textprep
