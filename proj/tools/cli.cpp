#include "cli.hpp"

#include <pthread.h>
#include <signal.h>

#include <atomic>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "sensor/acquisition.hpp"
#include "sensor/augmentation.hpp"
#include "sensor/baselines.hpp"
#include "sensor/common.hpp"
#include "sensor/config.hpp"
#include "sensor/corpus.hpp"
#include "sensor/embeddings.hpp"
#include "sensor/grace.hpp"
#include "sensor/metrics.hpp"
#include "sensor/model_io.hpp"
#include "sensor/privacy_filter.hpp"
#include "sensor/service.hpp"
#include "sensor/textprep.hpp"

namespace sensor::cli {

namespace fs = std::filesystem;
using corpus::Review;

std::string RunManifest::to_text() const {
  std::ostringstream o;
  o << "subcommand=" << subcommand << '\n'
    << "tool_version=" << tool_version << '\n'
    << "config_hash=" << config_hash << '\n'
    << "seed=" << seed << '\n';
  for (const auto& [k, v] : inputs) o << "input." << k << '=' << v << '\n';
  for (const auto& [k, v] : outputs) o << "output." << k << '=' << v << '\n';
  o << "started_at=" << started_at << '\n' << "finished_at=" << finished_at << '\n';
  return o.str();
}

RunManifest RunManifest::parse(std::string_view text) {
  RunManifest m;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("malformed manifest line: " + line);
    const auto k = line.substr(0, eq);
    const auto v = line.substr(eq + 1);
    if (k == "subcommand") m.subcommand = v;
    else if (k == "tool_version") m.tool_version = v;
    else if (k == "config_hash") m.config_hash = v;
    else if (k == "seed") m.seed = std::stoull(v);
    else if (k == "started_at") m.started_at = v;
    else if (k == "finished_at") m.finished_at = v;
    else if (k.rfind("input.", 0) == 0) m.inputs.emplace_back(k.substr(6), v);
    else if (k.rfind("output.", 0) == 0) m.outputs.emplace_back(k.substr(7), v);
  }
  return m;
}

fs::path run_manifest_path(const fs::path& primary_output) {
  return fs::path(primary_output.string() + ".run.manifest");
}

fs::path default_data_dir() { return SENSOR_DEFAULT_DATA_DIR; }

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << text;
  if (!out) throw RuntimeError("write failed: " + path.string());
}

std::string hex64(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

using Defaults = std::vector<std::pair<std::string, std::string>>;

const Defaults kCbowDefaults{{"cbow.dim", "200"},    {"cbow.window", "5"},      {"cbow.negatives", "5"},
                             {"cbow.epochs", "5"},   {"cbow.lr", "0.025"},      {"cbow.min_lr", "0.0001"},
                             {"cbow.min_count", "2"}};

const Defaults kGraceDefaults{{"grace.embed_dim", "200"},      {"grace.hidden", "896"},
                              {"grace.dense", "256"},          {"grace.max_len", "150"},
                              {"grace.dropout", "0.5"},        {"grace.combine", "concat"},
                              {"grace.freeze_embedding", "false"}, {"grace.vocab_min_count", "2"},
                              {"train.lr", "0.001"},           {"train.epochs", "50"},
                              {"train.batch_size", "256"},     {"train.patience", "3"},
                              {"train.clip_norm", "5"}};

const Defaults kBaselineDefaults{{"baseline.lr", "0.01"}, {"baseline.l2", "0.0001"}, {"baseline.epochs", "20"}};

// defaults < file < --set flags < environment
KeyValueConfig layered(const std::vector<std::string>& keys, const std::map<std::string, std::string>& defaults,
                       const std::string& file, const std::vector<std::string>& sets) {
  const std::set<std::string> known(keys.begin(), keys.end());
  auto check = [&](const std::string& k, const std::string& where) {
    if (!known.count(k)) throw ValidationError("unknown config key '" + k + "' in " + where);
  };
  KeyValueConfig c;
  for (const auto& [k, v] : defaults) c.set(k, v);
  if (!file.empty()) {
    auto f = KeyValueConfig::load(file);
    for (const auto& [k, v] : f.values()) check(k, file);
    c.merge(f);
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got '" + s + "'");
    const auto k = std::string(trim(s.substr(0, eq)));
    check(k, "--set");
    c.set(k, std::string(trim(s.substr(eq + 1))));
  }
  c.apply_environment(keys);
  return c;
}

KeyValueConfig layered(const Defaults& defaults, const std::string& file, const std::vector<std::string>& sets) {
  std::vector<std::string> keys;
  std::map<std::string, std::string> d;
  for (const auto& [k, v] : defaults) {
    keys.push_back(k);
    d[k] = v;
  }
  return layered(keys, d, file, sets);
}

std::size_t get_size(const KeyValueConfig& c, const std::string& key) {
  const auto v = c.get_int(key, 0);
  if (v < 0) throw ValidationError(key + " must not be negative");
  return static_cast<std::size_t>(v);
}

class Run {
 public:
  Run(std::string subcommand, std::uint64_t seed) {
    m_.subcommand = std::move(subcommand);
    m_.seed = seed;
    m_.tool_version = SENSOR_VERSION;
    m_.config_hash = hex64(fnv1a64(""));
    m_.started_at = acquisition::utc_timestamp_now();
  }
  void config(const KeyValueConfig& c) { m_.config_hash = hex64(fnv1a64(c.canonical_text())); }
  void input(const std::string& key, const fs::path& p) { m_.inputs.emplace_back(key, p.string()); }
  void output(const std::string& key, const fs::path& p) { m_.outputs.emplace_back(key, p.string()); }
  void finish(const fs::path& manifest_path) {
    m_.finished_at = acquisition::utc_timestamp_now();
    write_text(manifest_path, m_.to_text());
  }

 private:
  RunManifest m_;
};

std::vector<Review> load_reviews(const fs::path& path, std::ostream& err, std::vector<std::string>* extra = nullptr) {
  auto loaded = corpus::load_csv(path);
  if (!loaded.errors.empty()) {
    err << "warning: " << path.string() << ": skipped " << loaded.errors.size() << " malformed row(s)";
    err << " (first at line " << loaded.errors.front().line << ": " << loaded.errors.front().message << ")\n";
  }
  if (extra) *extra = loaded.extra_columns;
  return std::move(loaded.reviews);
}

void ensure_tokens(std::vector<Review>& reviews, const fs::path& prep_dir) {
  std::optional<textprep::PrepConfig> prep;
  for (auto& r : reviews) {
    if (r.tokens) continue;
    if (!prep) prep = textprep::PrepConfig::load(prep_dir);
    const auto text = r.processed_text ? *r.processed_text : textprep::preprocess(r.raw_text, *prep);
    r.tokens = textprep::postprocess(text, *prep);
  }
}

std::vector<std::vector<std::string>> docs_of(const std::vector<Review>& reviews) {
  std::vector<std::vector<std::string>> docs;
  std::vector<std::string> empty;
  for (const auto& r : reviews) {
    if (!r.tokens || r.tokens->empty()) empty.push_back(r.review_id);
    else docs.push_back(*r.tokens);
  }
  if (!empty.empty()) throw ValidationError("reviews with no tokens: " + join(empty, ", "));
  return docs;
}

std::vector<Label> gold_of(const std::vector<Review>& reviews) {
  std::vector<Label> y;
  for (const auto& r : reviews) {
    if (!r.gold_label) throw ValidationError("review " + r.review_id + " has no gold label");
    y.push_back(*r.gold_label);
  }
  return y;
}

struct AnyModel {
  std::string kind;
  std::optional<grace::GraceModel> grace;
  std::optional<baselines::BaselineModel> baseline;

  std::vector<grace::Prediction> predict(const std::vector<std::vector<std::string>>& docs) const {
    if (grace) return grace::predict(*grace, docs);
    std::vector<grace::Prediction> out;
    for (const auto& o : baseline->predict(docs)) out.push_back({o.label, o.scores});
    return out;
  }
};

AnyModel load_any(const fs::path& path) {
  const auto c = model_io::read_file(path);
  AnyModel m;
  if (c.type == model_io::TypeTag::Grace) {
    m.kind = "grace";
    m.grace = grace::from_container(c);
  } else {
    m.baseline = baselines::baseline_from_container(c);
    m.kind = std::string("baseline-") + std::string(baselines::repr_name(m.baseline->repr)) +
             (m.baseline->hierarchical ? "-hierarchical" : "-flat");
  }
  return m;
}

std::vector<std::string> words_for_diversity(const Review& r) {
  if (r.tokens) return *r.tokens;
  if (r.processed_text) return split_whitespace(*r.processed_text);
  return split_whitespace(to_lower_ascii(r.raw_text));
}

// Kappa column: label_a/label_b when the file carries them, else gold_label.
std::vector<std::pair<std::string, Label>> labels_for(const std::vector<Review>& reviews, bool first) {
  bool has_own = false;
  for (const auto& r : reviews) has_own |= (first ? r.label_a : r.label_b).has_value();
  std::vector<std::pair<std::string, Label>> out;
  for (const auto& r : reviews) {
    const auto& l = has_own ? (first ? r.label_a : r.label_b) : r.gold_label;
    if (l) out.emplace_back(r.review_id, *l);
  }
  return out;
}

int serve(const fs::path& config_path, std::optional<int> port_flag, const std::string& listen_flag,
          std::ostream& out) {
  const auto& keys = service::ServiceOptions::config_keys();
  auto cfg = layered(keys, {}, config_path.string(), {});
  if (port_flag) cfg.set("port", std::to_string(*port_flag));
  if (!listen_flag.empty()) cfg.set("listen", listen_flag);
  cfg.apply_environment(keys);

  auto opts = service::ServiceOptions::from_config(cfg);
  if (opts.prep_dir.empty()) opts.prep_dir = default_data_dir();
  const auto host = cfg.get_or("listen", "127.0.0.1");
  const auto port = cfg.get_int("port", 8080);
  if (port < 0 || port > 65535) throw ValidationError("port must be in [0, 65535]");
  std::optional<fs::path> static_dir;
  if (auto s = cfg.get("static_dir"); s && !s->empty()) static_dir = *s;

  Run run("serve", 0);
  run.config(cfg);
  run.input("config", config_path);
  run.output("store", opts.store_path);
  const auto manifest = run_manifest_path(opts.store_path);

  sigset_t set, old;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, &old);

  service::AnnotationService svc(opts);
  service::HttpApi http(svc, static_dir);
  const int bound = http.bind(host, static_cast<int>(port));
  run.finish(manifest);
  out << "listening on http://" << host << ':' << bound << std::endl;

  std::atomic<bool> signalled{false};
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    signalled = true;
    http.stop();
  });
  http.run();
  if (!signalled) pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  pthread_sigmask(SIG_SETMASK, &old, nullptr);
  run.finish(manifest);
  out << "stopped" << std::endl;
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SENSOR review pipeline and annotation service", "sensor"};
  app.require_subcommand(1);
  app.set_version_flag("--version", SENSOR_VERSION);

  std::function<void()> action;
  std::uint64_t seed = 1;
  std::string config_path;
  std::vector<std::string> sets;
  std::string data_dir = default_data_dir().string();

  auto add_seed = [&](CLI::App* s) { s->add_option("--seed", seed, "Seed for every random choice")->capture_default_str(); };
  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", config_path, "Key-value config file")->check(CLI::ExistingFile);
    s->add_option("--set", sets, "Override a config key (key=value), repeatable");
  };
  auto add_prep_dir = [&](CLI::App* s) {
    s->add_option("--prep-dir", data_dir, "Text pre-processing resources")->check(CLI::ExistingDirectory)->capture_default_str();
  };

  // scrape
  std::string app_id, from_s, to_s, source_spec, out_path;
  std::size_t max_reviews = 100;
  auto* scrape = app.add_subcommand("scrape", "Fetch reviews for one app and date range");
  scrape->add_option("--app-id", app_id)->required();
  scrape->add_option("--from", from_s, "YYYY-MM-DD")->required();
  scrape->add_option("--to", to_s, "YYYY-MM-DD")->required();
  scrape->add_option("--max", max_reviews, "Maximum number of reviews")->capture_default_str();
  scrape->add_option("--source", source_spec, "live or fixture:<csv>")->required();
  scrape->add_option("--out", out_path)->required();
  add_seed(scrape);
  scrape->callback([&] {
    action = [&] {
      Run run("scrape", seed);
      acquisition::ScrapeRequest req;
      req.app_id = app_id;
      auto from = parse_date(from_s);
      auto to = parse_date(to_s);
      if (!from || !to) throw ValidationError("--from and --to must be YYYY-MM-DD");
      req.start_date = *from;
      req.end_date = *to;
      req.max_reviews = max_reviews;
      req.validate();
      std::unique_ptr<acquisition::ReviewSource> source;
      if (source_spec.rfind("fixture:", 0) == 0) {
        const fs::path p = source_spec.substr(8);
        if (!fs::exists(p)) throw ValidationError("fixture not found: " + p.string());
        source = std::make_unique<acquisition::FixtureSource>(p);
        run.input("fixture", p);
      } else if (source_spec == "live") {
        source = std::make_unique<acquisition::PlayStoreSource>(acquisition::make_https_transport());
      } else {
        throw ValidationError("--source must be live or fixture:<path>");
      }
      auto page = acquisition::fetch_all(*source, req, max_reviews);
      auto m = acquisition::export_scrape(page.reviews, req, out_path, source->describe(), page.dropped_undated);
      run.output("reviews", out_path);
      run.output("scrape_manifest", acquisition::manifest_path_for(out_path));
      run.finish(run_manifest_path(out_path));
      out << "scraped " << m.count << " review(s), dropped " << m.dropped_undated << " undated\n";
    };
  });

  // filter
  std::string keywords = (default_data_dir() / "privacy_keywords.txt").string();
  std::string in_path, out_candidates, out_rest, decisions_path, out_sample;
  std::size_t sample_n = 0;
  auto* filter = app.add_subcommand("filter", "Split reviews into privacy candidates and the rest");
  filter->add_option("--keywords", keywords)->check(CLI::ExistingFile)->capture_default_str();
  filter->add_option("--in", in_path)->required()->check(CLI::ExistingFile);
  filter->add_option("--out-candidates", out_candidates)->required();
  filter->add_option("--out-rest", out_rest)->required();
  filter->add_option("--decisions", decisions_path)->required();
  filter->add_option("--sample-irrelevant", sample_n, "Draw this many reviews from the rest");
  filter->add_option("--out-sample", out_sample, "Where the drawn sample goes");
  add_seed(filter);
  filter->callback([&] {
    action = [&] {
      if (sample_n > 0 && out_sample.empty()) throw ValidationError("--sample-irrelevant needs --out-sample");
      Run run("filter", seed);
      auto themes = privacy::KeywordThemes::load(keywords);
      std::vector<std::string> extra;
      auto reviews = load_reviews(in_path, err, &extra);
      auto res = privacy::filter_candidates(reviews, themes);
      corpus::save_csv(res.candidates, out_candidates, true, extra);
      corpus::save_csv(res.rest, out_rest, true, extra);
      write_text(decisions_path, privacy::format_decisions(res.decisions));
      run.input("reviews", in_path);
      run.input("keywords", keywords);
      run.output("candidates", out_candidates);
      run.output("rest", out_rest);
      run.output("decisions", decisions_path);
      if (sample_n > 0) {
        auto sample = privacy::sample_irrelevant(res.rest, sample_n, seed);
        corpus::save_csv(sample, out_sample, true, extra);
        run.output("sample", out_sample);
      }
      run.finish(run_manifest_path(out_candidates));
      out << "candidates " << res.candidates.size() << ", rest " << res.rest.size() << '\n';
    };
  });

  // prep
  std::string stage_s, report_path;
  std::vector<std::string> in_paths;
  auto* prep = app.add_subcommand("prep", "Pre-process (pre) or tokenize (post) review text");
  prep->add_option("--stage", stage_s)->required()->check(CLI::IsMember({"pre", "post"}));
  prep->add_option("--in", in_paths, "Input CSV, repeatable (rows are concatenated)")->required()->check(CLI::ExistingFile);
  prep->add_option("--out", out_path)->required();
  prep->add_option("--report", report_path);
  add_prep_dir(prep);
  add_seed(prep);
  prep->callback([&] {
    action = [&] {
      Run run("prep", seed);
      const auto cfg = textprep::PrepConfig::load(data_dir);
      std::vector<Review> reviews;
      std::vector<std::string> extra;
      for (const auto& p : in_paths) {
        std::vector<std::string> e;
        auto part = load_reviews(p, err, &e);
        for (const auto& c : e)
          if (std::find(extra.begin(), extra.end(), c) == extra.end()) extra.push_back(c);
        reviews.insert(reviews.end(), part.begin(), part.end());
        run.input("reviews", p);
      }
      auto res = textprep::run_stage(reviews, stage_s == "pre" ? textprep::Stage::Pre : textprep::Stage::Post, cfg);
      corpus::save_csv(res.reviews, out_path, true, extra);
      run.input("prep_dir", data_dir);
      run.output("reviews", out_path);
      const auto report = res.report.to_text();
      if (!report_path.empty()) {
        write_text(report_path, report);
        run.output("report", report_path);
      } else {
        out << report;
      }
      run.finish(run_manifest_path(out_path));
    };
  });

  // split
  std::string out_dir;
  auto* split = app.add_subcommand("split", "Seeded train/validation/test split");
  split->add_option("--in", in_path)->required()->check(CLI::ExistingFile);
  split->add_option("--out-dir", out_dir)->required();
  add_seed(split);
  split->callback([&] {
    action = [&] {
      Run run("split", seed);
      std::vector<std::string> extra;
      auto reviews = load_reviews(in_path, err, &extra);
      auto s = corpus::split_dataset(reviews, seed);
      const fs::path dir = out_dir;
      fs::create_directories(dir);
      corpus::save_csv(s.train, dir / "train.csv", true, extra);
      corpus::save_csv(s.validation, dir / "validation.csv", true, extra);
      corpus::save_csv(s.test, dir / "test.csv", true, extra);
      write_text(dir / "split.manifest", s.manifest.to_text());
      run.input("reviews", in_path);
      run.output("train", dir / "train.csv");
      run.output("validation", dir / "validation.csv");
      run.output("test", dir / "test.csv");
      run.output("split_manifest", dir / "split.manifest");
      run.finish(run_manifest_path(dir / "split"));
      out << "train " << s.train.size() << ", validation " << s.validation.size() << ", test " << s.test.size()
          << '\n';
    };
  });

  // augment
  std::string plan_s = "default", provider_s = "stub";
  std::string lexicon = (default_data_dir() / "synonyms.txt").string();
  auto* augment = app.add_subcommand("augment", "Augment the training set");
  augment->add_option("--in", in_path)->required()->check(CLI::ExistingFile);
  augment->add_option("--plan", plan_s, "default or five counts like 2,2,2,2,1")->capture_default_str();
  augment->add_option("--provider", provider_s, "stub or cmd:<command>")->capture_default_str();
  augment->add_option("--lexicon", lexicon)->check(CLI::ExistingFile)->capture_default_str();
  augment->add_option("--out", out_path)->required();
  augment->add_option("--report", report_path);
  add_prep_dir(augment);
  add_seed(augment);
  augment->callback([&] {
    action = [&] {
      Run run("augment", seed);
      std::vector<std::string> extra;
      auto train = load_reviews(in_path, err, &extra);
      const auto plan = augment::AugPlan::parse(plan_s, seed);
      const auto lex = augment::SynonymLexicon::load(lexicon);
      auto provider = augment::make_provider(provider_s);
      auto res = augment::augment_training_set(train, plan, lex, *provider);
      const auto before_dedup = res.reviews.size();

      bool tokenized = false;
      for (const auto& r : train) tokenized |= r.tokens.has_value();
      std::size_t dropped_empty = 0;
      std::vector<Review> kept;
      if (tokenized) {
        const auto cfg = textprep::PrepConfig::load(data_dir);
        for (auto& r : res.reviews) {
          if (!r.tokens) r.tokens = textprep::postprocess(*r.processed_text, cfg);
          if (r.tokens->empty() && r.parent_id) {
            ++dropped_empty;
            continue;
          }
          kept.push_back(std::move(r));
        }
      } else {
        kept = std::move(res.reviews);
      }
      auto deduped = corpus::deduplicate(kept, corpus::DedupKey::ProcessedText);
      corpus::save_csv(deduped, out_path, true, extra);

      std::ostringstream rep;
      rep << res.report.to_text() << "rows_before_dedup=" << before_dedup << '\n'
          << "dropped_empty=" << dropped_empty << '\n'
          << "dropped_duplicates=" << kept.size() - deduped.size() << '\n'
          << "rows_written=" << deduped.size() << '\n';
      run.input("train", in_path);
      run.input("lexicon", lexicon);
      run.input("provider", provider->describe());
      run.output("augmented", out_path);
      if (!report_path.empty()) {
        write_text(report_path, rep.str());
        run.output("report", report_path);
      } else {
        out << rep.str();
      }
      run.finish(run_manifest_path(out_path));
    };
  });

  // train-cbow
  std::string trace_path;
  auto* cbow = app.add_subcommand("train-cbow", "Train CBOW word embeddings");
  cbow->add_option("--in", in_path, "Tokenized CSV")->required()->check(CLI::ExistingFile);
  cbow->add_option("--out", out_path)->required();
  cbow->add_option("--trace", trace_path, "Per-epoch loss file");
  add_config(cbow);
  add_seed(cbow);
  cbow->callback([&] {
    action = [&] {
      Run run("train-cbow", seed);
      const auto cfg = layered(kCbowDefaults, config_path, sets);
      run.config(cfg);
      embed::CbowConfig c;
      c.dim = get_size(cfg, "cbow.dim");
      c.window = get_size(cfg, "cbow.window");
      c.negatives = get_size(cfg, "cbow.negatives");
      c.epochs = get_size(cfg, "cbow.epochs");
      c.initial_lr = cfg.get_double("cbow.lr", c.initial_lr);
      c.min_lr = cfg.get_double("cbow.min_lr", c.min_lr);
      c.min_count = get_size(cfg, "cbow.min_count");
      c.seed = derive_seed(seed, "cbow");
      c.validate();
      auto reviews = load_reviews(in_path, err);
      std::vector<std::vector<std::string>> docs;
      for (const auto& r : reviews) {
        if (!r.tokens) throw ValidationError("review " + r.review_id + " is not tokenized (run prep --stage post)");
        docs.push_back(*r.tokens);
      }
      auto res = embed::train_cbow(docs, c);
      embed::save_embeddings(res.embeddings, out_path);
      run.input("corpus", in_path);
      if (!config_path.empty()) run.input("config", config_path);
      run.output("embeddings", out_path);
      if (!trace_path.empty()) {
        std::ostringstream t;
        t << "epoch,loss\n" << std::setprecision(17);
        for (std::size_t e = 0; e < res.trace.epoch_loss.size(); ++e) t << e + 1 << ',' << res.trace.epoch_loss[e] << '\n';
        write_text(trace_path, t.str());
        run.output("trace", trace_path);
      }
      run.finish(run_manifest_path(out_path));
      out << "vocabulary " << res.embeddings.vocab.size() << ", dim " << res.embeddings.dim() << '\n';
    };
  });

  // train-grace
  std::string train_path, val_path, embeddings_path;
  auto* tg = app.add_subcommand("train-grace", "Train the GRACE classifier");
  tg->add_option("--train", train_path)->required()->check(CLI::ExistingFile);
  tg->add_option("--val", val_path)->required()->check(CLI::ExistingFile);
  tg->add_option("--embeddings", embeddings_path, "Pre-trained CBOW embeddings")->check(CLI::ExistingFile);
  tg->add_option("--out", out_path)->required();
  add_config(tg);
  add_seed(tg);
  tg->callback([&] {
    action = [&] {
      Run run("train-grace", seed);
      const auto cfg = layered(kGraceDefaults, config_path, sets);
      run.config(cfg);
      grace::GraceConfig gc;
      gc.embed_dim = get_size(cfg, "grace.embed_dim");
      gc.hidden = get_size(cfg, "grace.hidden");
      gc.dense = get_size(cfg, "grace.dense");
      gc.max_len = get_size(cfg, "grace.max_len");
      gc.dropout = cfg.get_double("grace.dropout", gc.dropout);
      const auto combine = cfg.get_or("grace.combine", "concat");
      if (combine == "concat") gc.combine = grace::Combine::Concat;
      else if (combine == "sum") gc.combine = grace::Combine::Sum;
      else throw ValidationError("grace.combine must be concat or sum");
      gc.freeze_embedding = cfg.get_bool("grace.freeze_embedding", false);
      grace::TrainConfig tc;
      tc.lr = cfg.get_double("train.lr", tc.lr);
      tc.epochs = get_size(cfg, "train.epochs");
      tc.batch_size = get_size(cfg, "train.batch_size");
      tc.patience = get_size(cfg, "train.patience");
      tc.clip_norm = cfg.get_double("train.clip_norm", tc.clip_norm);
      tc.seed = derive_seed(seed, "grace.train");
      tc.validate();

      auto train = load_reviews(train_path, err);
      auto val = load_reviews(val_path, err);
      std::optional<embed::EmbeddingMatrix> emb;
      embed::Vocabulary vocab;
      if (!embeddings_path.empty()) {
        emb = embed::load_embeddings(embeddings_path);
        gc.embed_dim = emb->dim();
        vocab = emb->vocab;
        run.input("embeddings", embeddings_path);
      } else {
        std::vector<std::vector<std::string>> docs;
        for (const auto& r : train) {
          if (!r.tokens) throw ValidationError("review " + r.review_id + " is not tokenized (run prep --stage post)");
          docs.push_back(*r.tokens);
        }
        vocab = embed::Vocabulary::build(docs, get_size(cfg, "grace.vocab_min_count"));
      }
      gc.validate();
      auto model = grace::GraceModel::initialize(gc, vocab, derive_seed(seed, "grace.init"), emb ? &*emb : nullptr);
      const auto train_set = grace::make_dataset(model.vocab, train, gc.max_len);
      const auto val_set = grace::make_dataset(model.vocab, val, gc.max_len);
      auto trace = grace::train(model, train_set, val_set, tc, [&](std::size_t epoch, const grace::TrainTrace& t) {
        err << "epoch " << epoch << " train_loss " << t.train_loss.back() << " val_loss " << t.val_loss.back()
            << " val_accuracy " << t.val_accuracy.back() << '\n';
      });
      grace::save_model(model, out_path);
      const auto trace_file = out_path + ".trace";
      write_text(trace_file, trace.to_text());
      run.input("train", train_path);
      run.input("validation", val_path);
      if (!config_path.empty()) run.input("config", config_path);
      run.output("model", out_path);
      run.output("trace", trace_file);
      run.finish(run_manifest_path(out_path));
      out << "stopped at epoch " << trace.stopped_epoch << ", best epoch " << trace.best_epoch << '\n';
    };
  });

  // train-baseline
  std::string repr_s = "tfidf", loss_s = "log";
  bool hierarchical = false;
  auto* tb = app.add_subcommand("train-baseline", "Train a linear baseline");
  tb->add_option("--repr", repr_s)->check(CLI::IsMember({"tfidf", "cbow-mean"}))->capture_default_str();
  tb->add_option("--loss", loss_s)->check(CLI::IsMember({"log", "hinge"}))->capture_default_str();
  tb->add_flag("--hierarchical", hierarchical, "Two-stage classifier");
  tb->add_option("--in", in_path)->required()->check(CLI::ExistingFile);
  tb->add_option("--embeddings", embeddings_path, "Needed for cbow-mean")->check(CLI::ExistingFile);
  tb->add_option("--out", out_path)->required();
  add_config(tb);
  add_seed(tb);
  tb->callback([&] {
    action = [&] {
      Run run("train-baseline", seed);
      const auto cfg = layered(kBaselineDefaults, config_path, sets);
      run.config(cfg);
      baselines::LinearConfig lc;
      lc.loss = baselines::parse_loss(loss_s);
      lc.lr = cfg.get_double("baseline.lr", lc.lr);
      lc.l2 = cfg.get_double("baseline.l2", lc.l2);
      lc.epochs = get_size(cfg, "baseline.epochs");
      lc.seed = derive_seed(seed, "baseline");
      const auto repr = baselines::parse_repr(repr_s);
      std::optional<embed::EmbeddingMatrix> emb;
      if (repr == baselines::Repr::CbowMean) {
        if (embeddings_path.empty()) throw ValidationError("--repr cbow-mean needs --embeddings");
        emb = embed::load_embeddings(embeddings_path);
        run.input("embeddings", embeddings_path);
      }
      auto train = load_reviews(in_path, err);
      auto model = baselines::train_baseline(train, repr, hierarchical, lc, emb ? &*emb : nullptr);
      baselines::save_baseline(model, out_path);
      run.input("train", in_path);
      if (!config_path.empty()) run.input("config", config_path);
      run.output("model", out_path);
      run.finish(run_manifest_path(out_path));
      out << "trained " << repr_s << (hierarchical ? " hierarchical" : " flat") << " baseline on " << train.size()
          << " review(s)\n";
    };
  });

  // predict
  std::string model_path;
  auto* predict = app.add_subcommand("predict", "Label reviews with a trained model");
  predict->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  predict->add_option("--in", in_path)->required()->check(CLI::ExistingFile);
  predict->add_option("--out", out_path)->required();
  add_prep_dir(predict);
  add_seed(predict);
  predict->callback([&] {
    action = [&] {
      Run run("predict", seed);
      const auto model = load_any(model_path);
      std::vector<std::string> extra;
      auto reviews = load_reviews(in_path, err, &extra);
      ensure_tokens(reviews, data_dir);
      const auto preds = model.predict(docs_of(reviews));
      for (std::size_t i = 0; i < reviews.size(); ++i) {
        reviews[i].model_label = preds[i].label;
        reviews[i].model_probs = preds[i].probs;
      }
      corpus::save_csv(reviews, out_path, true, extra);
      run.input("model", model_path);
      run.input("reviews", in_path);
      run.output("predictions", out_path);
      run.finish(run_manifest_path(out_path));
      out << "predicted " << reviews.size() << " review(s) with " << model.kind << '\n';
    };
  });

  // evaluate
  std::string test_path;
  auto* evaluate = app.add_subcommand("evaluate", "Score a model on a labeled test set");
  evaluate->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--test", test_path)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--out-report", report_path)->required();
  add_prep_dir(evaluate);
  add_seed(evaluate);
  evaluate->callback([&] {
    action = [&] {
      Run run("evaluate", seed);
      const auto model = load_any(model_path);
      auto reviews = load_reviews(test_path, err);
      ensure_tokens(reviews, data_dir);
      const auto truth = gold_of(reviews);
      const auto preds = model.predict(docs_of(reviews));
      std::vector<Label> pred;
      std::vector<std::array<double, kNumClasses>> scores;
      for (const auto& p : preds) {
        pred.push_back(p.label);
        scores.push_back(p.probs);
      }
      const auto rep = metrics::evaluate(truth, pred, scores);
      write_text(report_path, rep.to_text(model.kind));
      const fs::path rp = report_path;
      const auto cm_path = rp.parent_path() / (rp.stem().string() + ".confusion.csv");
      std::vector<std::string> names;
      for (auto l : kAllLabels) names.emplace_back(label_name(l));
      write_text(cm_path, rep.confusion.to_csv(names));
      run.input("model", model_path);
      run.input("test", test_path);
      run.output("report", report_path);
      run.output("confusion", cm_path);
      run.finish(run_manifest_path(report_path));
      out << std::fixed << std::setprecision(4) << "accuracy " << rep.prf.accuracy << ", macro_f1 " << rep.prf.macro_f1;
      if (rep.auc.defined) out << ", roc_auc " << rep.auc.macro;
      out << '\n';
    };
  });

  // bench
  std::size_t runs = 100, warmups = 10;
  auto* benchc = app.add_subcommand("bench", "Time single-review prediction");
  benchc->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  benchc->add_option("--runs", runs)->capture_default_str();
  benchc->add_option("--warmups", warmups)->capture_default_str();
  benchc->add_option("--in", in_path, "Reviews to cycle through (default: one synthetic review)")->check(CLI::ExistingFile);
  benchc->add_option("--out", out_path, "Report file (default: standard output)");
  add_prep_dir(benchc);
  add_seed(benchc);
  benchc->callback([&] {
    action = [&] {
      Run run("bench", seed);
      const auto model = load_any(model_path);
      std::vector<std::vector<std::string>> docs;
      if (!in_path.empty()) {
        auto reviews = load_reviews(in_path, err);
        ensure_tokens(reviews, data_dir);
        docs = docs_of(reviews);
        run.input("reviews", in_path);
      } else {
        std::vector<std::string> vocab_tokens;
        if (model.grace) vocab_tokens = model.grace->vocab.tokens();
        else if (model.baseline->tfidf) vocab_tokens = model.baseline->tfidf->terms();
        else vocab_tokens = model.baseline->embeddings->vocab.tokens();
        std::vector<std::string> doc;
        for (std::size_t i = 0; i < 30 && vocab_tokens.size() > 2; ++i) doc.push_back(vocab_tokens[2 + i % (vocab_tokens.size() - 2)]);
        if (doc.empty()) doc.push_back("review");
        docs.push_back(doc);
      }
      if (docs.empty()) throw ValidationError("no reviews to benchmark");
      auto rep = metrics::bench(
          model_path, [&](std::size_t i) { (void)model.predict({docs[i % docs.size()]}); }, runs, warmups);
      run.input("model", model_path);
      const fs::path primary = out_path.empty() ? fs::path(model_path + ".bench") : fs::path(out_path);
      if (!out_path.empty()) {
        write_text(out_path, rep.to_text());
        run.output("report", out_path);
      } else {
        out << rep.to_text();
      }
      run.finish(run_manifest_path(primary));
    };
  });

  // kappa
  std::string file_a, file_b;
  auto* kappa = app.add_subcommand("kappa", "Cohen's kappa between two annotators");
  kappa->add_option("--file-a", file_a)->required()->check(CLI::ExistingFile);
  kappa->add_option("--file-b", file_b)->required()->check(CLI::ExistingFile);
  kappa->add_option("--out", out_path, "Report file (default: standard output)");
  add_seed(kappa);
  kappa->callback([&] {
    action = [&] {
      Run run("kappa", seed);
      const auto a = labels_for(load_reviews(file_a, err), true);
      const auto b = labels_for(load_reviews(file_b, err), false);
      std::map<std::string, Label> by_id(b.begin(), b.end());
      std::vector<Label> la, lb;
      for (const auto& [id, l] : a) {
        auto it = by_id.find(id);
        if (it == by_id.end()) continue;
        la.push_back(l);
        lb.push_back(it->second);
      }
      if (la.empty()) throw ValidationError("the two files share no labeled review ids");
      const auto table = metrics::agreement_table(la, lb);
      const auto k = metrics::cohens_kappa(table);
      std::ostringstream rep;
      rep << std::setprecision(17) << "n=" << la.size() << '\n'
          << "kappa=" << k.kappa << '\n'
          << "observed=" << k.observed << '\n'
          << "expected=" << k.expected << '\n'
          << "degenerate=" << (k.degenerate ? "true" : "false") << '\n';
      run.input("file_a", file_a);
      run.input("file_b", file_b);
      const fs::path primary = out_path.empty() ? fs::path(file_a + ".kappa") : fs::path(out_path);
      if (!out_path.empty()) {
        write_text(out_path, rep.str());
        run.output("report", out_path);
      } else {
        out << rep.str();
      }
      run.finish(run_manifest_path(primary));
    };
  });

  // diversity
  std::string before_path, after_path;
  double threshold = metrics::kMtldThreshold;
  auto* diversity = app.add_subcommand("diversity", "MTLD profile before and after augmentation");
  diversity->add_option("--before", before_path)->required()->check(CLI::ExistingFile);
  diversity->add_option("--after", after_path)->required()->check(CLI::ExistingFile);
  diversity->add_option("--threshold", threshold)->capture_default_str();
  diversity->add_option("--out", out_path)->required();
  add_seed(diversity);
  diversity->callback([&] {
    action = [&] {
      Run run("diversity", seed);
      auto collect = [&](const std::string& p) {
        std::vector<std::vector<std::string>> docs;
        for (const auto& r : load_reviews(p, err)) {
          auto w = words_for_diversity(r);
          if (!w.empty()) docs.push_back(std::move(w));
        }
        return docs;
      };
      write_text(out_path, metrics::diversity_profile(collect(before_path), collect(after_path), threshold));
      run.input("before", before_path);
      run.input("after", after_path);
      run.output("profile", out_path);
      run.finish(run_manifest_path(out_path));
    };
  });

  // serve
  std::string serve_config, listen;
  std::optional<int> port;
  auto* servec = app.add_subcommand("serve", "Run the annotation service");
  servec->add_option("--config", serve_config)->required()->check(CLI::ExistingFile);
  servec->add_option("--port", port, "Overrides the config port (0 picks a free one)");
  servec->add_option("--listen", listen, "Overrides the config listen address");
  servec->callback([&] {
    action = [&] { serve(serve_config, port, listen, out); };
  });

  std::vector<const char*> argv{"sensor"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << sub->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << SENSOR_VERSION << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << "error: " << e.what() << "\n\n" << sub->help();
    return 1;
  }

  try {
    if (action) action();
    return 0;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const RuntimeError& e) {
    err << "runtime error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace sensor::cli
