#include "sensor/augmentation.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "json.hpp"

namespace sensor::augment {

std::string_view technique_tag(Technique t) {
  switch (t) {
    case Technique::RandomWordDrop:
      return "drop";
    case Technique::SynonymSubstitution:
      return "syn";
    case Technique::ContextualSubstitution:
      return "csub";
    case Technique::ContextualInsertion:
      return "cins";
    case Technique::AbstractSummarization:
      return "summ";
  }
  return "?";
}

std::size_t AugPlan::per_review() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

AugPlan AugPlan::parse(std::string_view spec, std::uint64_t seed) {
  AugPlan plan;
  plan.seed = seed;
  spec = trim(spec);
  if (spec == "default" || spec.empty()) return plan;
  std::size_t idx = 0;
  std::string item;
  std::istringstream in{std::string(spec)};
  while (std::getline(in, item, ',')) {
    if (idx >= kNumTechniques) throw ValidationError("augmentation plan has more than five counts");
    try {
      std::size_t pos = 0;
      long v = std::stol(std::string(trim(item)), &pos);
      if (v < 0 || pos != trim(item).size()) throw std::invalid_argument("");
      plan.counts[idx++] = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ValidationError("bad augmentation count: '" + item + "'");
    }
  }
  if (idx != kNumTechniques) throw ValidationError("augmentation plan needs five counts");
  return plan;
}

SynonymLexicon SynonymLexicon::parse(std::string_view text) {
  SynonymLexicon lex;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    auto colon = t.find(':');
    if (colon == std::string_view::npos) {
      throw ValidationError("synonym line " + std::to_string(lineno) + " has no ':'");
    }
    const std::string word = to_lower_ascii(trim(t.substr(0, colon)));
    if (word.empty() || split_whitespace(word).size() != 1) {
      throw ValidationError("synonym line " + std::to_string(lineno) + ": bad headword");
    }
    auto& syns = lex.entries[word];
    std::istringstream list{std::string(t.substr(colon + 1))};
    std::string syn;
    while (std::getline(list, syn, ',')) {
      const std::string s = to_lower_ascii(trim(syn));
      if (s.empty() || s == word) continue;
      if (split_whitespace(s).size() != 1) {
        throw ValidationError("synonym line " + std::to_string(lineno) + ": '" + s + "' is not one token");
      }
      if (std::find(syns.begin(), syns.end(), s) == syns.end()) syns.push_back(s);
    }
    if (syns.empty()) lex.entries.erase(word);
  }
  return lex;
}

SynonymLexicon SynonymLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

// ---------------------------------------------------------------------------
// Lexical transforms

std::string random_word_drop(const std::string& text, double drop_prob, std::uint64_t seed) {
  if (!(drop_prob > 0.0 && drop_prob < 1.0)) {
    throw ValidationError("drop_prob must be in (0, 1)");
  }
  auto tokens = split_whitespace(text);
  if (tokens.empty()) throw ValidationError("random_word_drop on empty text");

  Rng rng(seed);
  std::vector<std::string> kept;
  for (auto& t : tokens) {
    if (rng.uniform() >= drop_prob) kept.push_back(t);
  }
  if (kept.empty()) kept.push_back(tokens[rng.below(tokens.size())]);
  return join(kept, " ");
}

std::string synonym_substitution(const std::string& text, const SynonymLexicon& lexicon,
                                 double sub_prob, std::uint64_t seed) {
  if (!(sub_prob >= 0.0 && sub_prob <= 1.0)) throw ValidationError("sub_prob must be in [0, 1]");
  auto tokens = split_whitespace(text);
  Rng rng(seed);
  for (auto& tok : tokens) {
    std::size_t core_len = 0;
    while (core_len < tok.size() && std::isalpha(static_cast<unsigned char>(tok[core_len]))) ++core_len;
    if (core_len == 0) continue;
    auto it = lexicon.entries.find(to_lower_ascii(tok.substr(0, core_len)));
    if (it == lexicon.entries.end()) continue;
    if (rng.uniform() < sub_prob) {
      tok = it->second[rng.below(it->second.size())] + tok.substr(core_len);
    }
  }
  return join(tokens, " ");
}

// ---------------------------------------------------------------------------
// Providers

namespace {

std::vector<std::string> tokens_or_fail(const std::string& text) {
  auto tokens = split_whitespace(text);
  if (tokens.empty()) throw ProviderError("empty text");
  return tokens;
}

}  // namespace

std::string StubProvider::substitute(const std::string& text, std::uint64_t seed) {
  auto tokens = tokens_or_fail(text);
  Rng rng(seed);
  tokens[rng.below(tokens.size())] = kSubstituteMarker;
  return join(tokens, " ");
}

std::string StubProvider::insert(const std::string& text, std::uint64_t seed) {
  auto tokens = tokens_or_fail(text);
  Rng rng(seed);
  const auto pos = static_cast<std::ptrdiff_t>(rng.below(tokens.size() + 1));
  tokens.insert(tokens.begin() + pos, kInsertMarker);
  return join(tokens, " ");
}

std::string StubProvider::summarize(const std::string& text, std::uint64_t) {
  auto tokens = tokens_or_fail(text);
  tokens.resize((tokens.size() + 1) / 2);
  return join(tokens, " ");
}

CommandProvider::CommandProvider(std::string command) : command_(std::move(command)) {
  int in_pipe[2];
  int out_pipe[2];
  if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) {
    throw RuntimeError("pipe failed: " + std::string(std::strerror(errno)));
  }
  pid_ = fork();
  if (pid_ < 0) throw RuntimeError("fork failed: " + std::string(std::strerror(errno)));
  if (pid_ == 0) {
    dup2(in_pipe[0], STDIN_FILENO);
    dup2(out_pipe[1], STDOUT_FILENO);
    close(in_pipe[0]);
    close(in_pipe[1]);
    close(out_pipe[0]);
    close(out_pipe[1]);
    execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  close(in_pipe[0]);
  close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  // A dead child must surface as a failed write, not a killed process.
  std::signal(SIGPIPE, SIG_IGN);
}

CommandProvider::~CommandProvider() {
  if (to_child_ >= 0) close(to_child_);
  if (from_child_ >= 0) close(from_child_);
  if (pid_ > 0) {
    int status = 0;
    waitpid(pid_, &status, 0);
  }
}

std::string CommandProvider::request(std::string_view op, const std::string& text, std::uint64_t seed) {
  if (to_child_ < 0) throw ProviderError("provider process is gone");
  nlohmann::json req{{"op", op}, {"text", text}, {"seed", seed}};
  std::string line = req.dump() + "\n";
  std::size_t written = 0;
  while (written < line.size()) {
    ssize_t n = write(to_child_, line.data() + written, line.size() - written);
    if (n <= 0) {
      close(to_child_);
      to_child_ = -1;
      throw ProviderError("provider write failed");
    }
    written += static_cast<std::size_t>(n);
  }

  std::size_t nl;
  while ((nl = read_buffer_.find('\n')) == std::string::npos) {
    char buf[4096];
    ssize_t n = read(from_child_, buf, sizeof buf);
    if (n <= 0) {
      close(to_child_);
      to_child_ = -1;
      throw ProviderError("provider closed its output");
    }
    read_buffer_.append(buf, static_cast<std::size_t>(n));
  }
  const std::string reply = read_buffer_.substr(0, nl);
  read_buffer_.erase(0, nl + 1);

  nlohmann::json parsed = nlohmann::json::parse(reply, nullptr, false);
  if (parsed.is_string()) return parsed.get<std::string>();
  if (parsed.is_object() && parsed.contains("text") && parsed["text"].is_string()) {
    return parsed["text"].get<std::string>();
  }
  if (parsed.is_object() && parsed.contains("error")) {
    throw ProviderError("provider error: " + parsed["error"].dump());
  }
  throw ProviderError("unparseable provider reply");
}

std::string CommandProvider::substitute(const std::string& text, std::uint64_t seed) {
  return request("substitute", text, seed);
}
std::string CommandProvider::insert(const std::string& text, std::uint64_t seed) {
  return request("insert", text, seed);
}
std::string CommandProvider::summarize(const std::string& text, std::uint64_t seed) {
  return request("summarize", text, seed);
}

std::unique_ptr<TextTransformProvider> make_provider(std::string_view spec) {
  if (spec == "stub") return std::make_unique<StubProvider>();
  if (spec.substr(0, 4) == "cmd:" && spec.size() > 4) {
    return std::make_unique<CommandProvider>(std::string(spec.substr(4)));
  }
  throw ValidationError("unknown provider '" + std::string(spec) + "' (expected stub or cmd:<exec>)");
}

// ---------------------------------------------------------------------------

std::size_t AugReport::total_generated() const {
  std::size_t n = 0;
  for (auto g : generated) n += g;
  return n;
}

std::string AugReport::to_text() const {
  std::ostringstream out;
  out << "originals=" << originals << '\n';
  for (std::size_t t = 0; t < kNumTechniques; ++t) {
    const auto tag = technique_tag(kAllTechniques[t]);
    out << tag << ".generated=" << generated[t] << '\n';
    out << tag << ".skipped=" << skipped[t] << '\n';
  }
  out << "total_generated=" << total_generated() << '\n';
  out << "total_output=" << originals + total_generated() << '\n';
  return out.str();
}

AugResult augment_training_set(const std::vector<corpus::Review>& train, const AugPlan& plan,
                               const SynonymLexicon& lexicon, TextTransformProvider& provider) {
  AugResult result;
  result.report.originals = train.size();
  result.reviews = train;
  if (train.empty() && plan.per_review() > 0) throw ValidationError("training set is empty");

  for (const auto& parent : train) {
    if (!parent.processed_text) {
      throw ValidationError("review " + parent.review_id + " has not been pre-processed");
    }
    const std::string& text = *parent.processed_text;
    const std::uint64_t id_hash = fnv1a64(parent.review_id);

    for (std::size_t t = 0; t < kNumTechniques; ++t) {
      const Technique tech = kAllTechniques[t];
      for (std::size_t rep = 1; rep <= plan.counts[t]; ++rep) {
        const std::uint64_t seed = derive_seed(plan.seed, technique_tag(tech), id_hash, rep);
        std::string out;
        try {
          switch (tech) {
            case Technique::RandomWordDrop:
              out = random_word_drop(text, plan.drop_prob, seed);
              break;
            case Technique::SynonymSubstitution:
              out = synonym_substitution(text, lexicon, plan.sub_prob, seed);
              break;
            case Technique::ContextualSubstitution:
              out = provider.substitute(text, seed);
              break;
            case Technique::ContextualInsertion:
              out = provider.insert(text, seed);
              break;
            case Technique::AbstractSummarization:
              out = provider.summarize(text, seed);
              break;
          }
        } catch (const ProviderError&) {
          ++result.report.skipped[t];
          continue;
        }
        if (trim(out).empty()) {
          ++result.report.skipped[t];
          continue;
        }

        corpus::Review child;
        child.review_id = parent.review_id + "~" + std::string(technique_tag(tech)) + std::to_string(rep);
        child.app_id = parent.app_id;
        child.posted_at = parent.posted_at;
        child.rating = parent.rating;
        child.raw_text = out;
        child.processed_text = out;
        child.source = corpus::Source::Augmented;
        child.parent_id = parent.review_id;
        child.gold_label = parent.gold_label;
        result.reviews.push_back(std::move(child));
        ++result.report.generated[t];
      }
    }
  }
  return result;
}

}  // namespace sensor::augment
