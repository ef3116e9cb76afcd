#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <sstream>

#include "cli.hpp"
#include "sensor/corpus.hpp"
#include "sensor/embeddings.hpp"
#include "sensor/grace.hpp"
#include "sensor/metrics.hpp"
#include "synthetic_corpus.hpp"
#include "test_util.hpp"

#include "doctest.h"
#include "httplib.h"

using namespace sensor;
using namespace sensor::testing;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

CliResult sensor_cli(const std::vector<std::string>& args) {
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  return {code, o.str(), e.str()};
}

std::string p(const TempDir& d, const std::string& name) { return (d / name).string(); }

const char* kCbowConfig =
    "# tiny embeddings\n"
    "cbow.dim = 8\n"
    "cbow.epochs = 2\n"
    "cbow.min_count = 1\n";

const char* kGraceConfig =
    "grace.hidden = 8\n"
    "grace.dense = 8\n"
    "grace.max_len = 20\n"
    "grace.dropout = 0.1\n"
    "grace.vocab_min_count = 1\n"
    "train.epochs = 12\n"
    "train.batch_size = 32\n"
    "train.lr = 0.01\n";

// Tokenized, labeled synthetic reviews at `path`.
void write_tokenized(const fs::path& path, std::size_t n, std::uint64_t seed) {
  auto reviews = synthetic_corpus(n, seed);
  for (auto& r : reviews) {
    r.processed_text = r.raw_text;
    r.tokens = split_whitespace(r.raw_text);
  }
  corpus::save_csv(reviews, path);
}

std::map<std::string, std::string> key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

TEST_CASE("end-to-end fixture pipeline") {
  TempDir d;
  SyntheticOptions opt;
  opt.privacy_keywords = true;
  corpus::save_csv(synthetic_corpus(300, 11, opt), d / "fixture.csv");
  write_file(d / "cbow.conf", kCbowConfig);
  write_file(d / "grace.conf", kGraceConfig);

  auto ok = [](const CliResult& r) {
    INFO(r.err);
    REQUIRE(r.code == 0);
  };
  ok(sensor_cli({"scrape", "--app-id", "com.example.synthetic", "--from", "2024-01-01", "--to", "2024-12-31",
                 "--max", "1000", "--source", "fixture:" + p(d, "fixture.csv"), "--out", p(d, "scraped.csv")}));
  CHECK(corpus::load_csv(d / "scraped.csv").reviews.size() == 300);

  ok(sensor_cli({"filter", "--in", p(d, "scraped.csv"), "--out-candidates", p(d, "cand.csv"), "--out-rest",
                 p(d, "rest.csv"), "--decisions", p(d, "decisions.csv"), "--sample-irrelevant", "60",
                 "--out-sample", p(d, "sample.csv"), "--seed", "3"}));
  const auto cand = corpus::load_csv(d / "cand.csv").reviews.size();
  const auto rest = corpus::load_csv(d / "rest.csv").reviews.size();
  CHECK(cand + rest == 300);
  CHECK(cand >= 200);
  CHECK(corpus::load_csv(d / "sample.csv").reviews.size() == std::min<std::size_t>(60, rest));

  ok(sensor_cli({"prep", "--stage", "pre", "--in", p(d, "cand.csv"), "--in", p(d, "sample.csv"), "--out",
                 p(d, "pre.csv"), "--report", p(d, "pre.txt")}));
  ok(sensor_cli({"prep", "--stage", "post", "--in", p(d, "pre.csv"), "--out", p(d, "post.csv")}));
  CHECK(read_file(d / "pre.txt").find("stage=pre") != std::string::npos);

  ok(sensor_cli({"split", "--in", p(d, "post.csv"), "--out-dir", p(d, "split"), "--seed", "5"}));
  const auto post_n = corpus::load_csv(d / "post.csv").reviews.size();
  const auto sizes = corpus::split_sizes(post_n);
  CHECK(corpus::load_csv(d / "split/train.csv").reviews.size() == sizes.train);
  CHECK(corpus::load_csv(d / "split/validation.csv").reviews.size() == sizes.validation);
  CHECK(corpus::load_csv(d / "split/test.csv").reviews.size() == sizes.test);
  CHECK(fs::exists(d / "split/split.manifest"));

  ok(sensor_cli({"augment", "--in", p(d, "split/train.csv"), "--plan", "default", "--seed", "5", "--provider",
                 "stub", "--out", p(d, "aug.csv"), "--report", p(d, "aug.txt")}));
  const auto aug = corpus::load_csv(d / "aug.csv").reviews;
  CHECK(aug.size() > sizes.train);
  for (const auto& r : aug) CHECK(r.tokens.has_value());
  const auto aug_report = key_values(read_file(d / "aug.txt"));
  CHECK(aug_report.at("rows_before_dedup") == std::to_string(10 * sizes.train));

  ok(sensor_cli({"train-cbow", "--in", p(d, "aug.csv"), "--out", p(d, "emb.vec"), "--config", p(d, "cbow.conf"),
                 "--seed", "7"}));
  ok(sensor_cli({"train-grace", "--train", p(d, "aug.csv"), "--val", p(d, "split/validation.csv"), "--embeddings",
                 p(d, "emb.vec"), "--config", p(d, "grace.conf"), "--out", p(d, "grace.bin"), "--seed", "7"}));
  CHECK(grace::load_model(d / "grace.bin").config.embed_dim == 8);

  auto ev = sensor_cli({"evaluate", "--model", p(d, "grace.bin"), "--test", p(d, "split/test.csv"), "--out-report",
                        p(d, "report.txt")});
  ok(ev);
  const auto report = read_file(d / "report.txt");
  CHECK(report.find("[summary]") != std::string::npos);
  CHECK(report.find("[confusion]") != std::string::npos);
  const auto kv = key_values(report);
  CHECK(kv.at("n") == std::to_string(sizes.test));
  const double f1 = std::stod(kv.at("macro_f1"));
  CHECK(f1 >= 0.0);
  CHECK(f1 <= 1.0);
  const auto cm = metrics::parse_confusion_csv(read_file(d / "report.confusion.csv"));
  CHECK(cm.total() == sizes.test);

  for (const auto& m : {"scraped.csv", "cand.csv", "pre.csv", "post.csv", "split/split", "aug.csv", "emb.vec",
                        "grace.bin", "report.txt"}) {
    INFO(m);
    CHECK(fs::exists(cli::run_manifest_path(d / m)));
  }
}

TEST_CASE("predict, baselines, bench, kappa and diversity") {
  TempDir d;
  write_tokenized(d / "train.csv", 90, 1);
  write_tokenized(d / "test.csv", 30, 2);
  write_file(d / "grace.conf", kGraceConfig);
  write_file(d / "cbow.conf", kCbowConfig);

  REQUIRE(sensor_cli({"train-grace", "--train", p(d, "train.csv"), "--val", p(d, "test.csv"), "--config",
                      p(d, "grace.conf"), "--set", "grace.embed_dim=6", "--set", "train.epochs=2", "--out",
                      p(d, "g.bin")})
              .code == 0);
  auto pr = sensor_cli({"predict", "--model", p(d, "g.bin"), "--in", p(d, "test.csv"), "--out", p(d, "pred.csv")});
  REQUIRE(pr.code == 0);
  const auto preds = corpus::load_csv(d / "pred.csv").reviews;
  REQUIRE(preds.size() == 30);
  const auto model = grace::load_model(d / "g.bin");
  const auto direct = grace::predict(model, corpus::load_csv(d / "test.csv").reviews);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    CHECK(preds[i].model_label == direct[i].label);
    REQUIRE(preds[i].model_probs.has_value());
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK((*preds[i].model_probs)[c] == doctest::Approx(direct[i].probs[c]).epsilon(1e-6));
  }

  // predict tokenizes raw text itself
  corpus::save_csv(synthetic_corpus(5, 9), d / "raw.csv");
  CHECK(sensor_cli({"predict", "--model", p(d, "g.bin"), "--in", p(d, "raw.csv"), "--out", p(d, "raw_pred.csv")}).code == 0);

  REQUIRE(sensor_cli({"train-baseline", "--repr", "tfidf", "--loss", "hinge", "--in", p(d, "train.csv"), "--out",
                      p(d, "b.bin")})
              .code == 0);
  REQUIRE(sensor_cli({"train-cbow", "--in", p(d, "train.csv"), "--out", p(d, "e.vec"), "--config", p(d, "cbow.conf")})
              .code == 0);
  REQUIRE(sensor_cli({"train-baseline", "--repr", "cbow-mean", "--hierarchical", "--in", p(d, "train.csv"),
                      "--embeddings", p(d, "e.vec"), "--out", p(d, "h.bin")})
              .code == 0);
  CHECK(sensor_cli({"train-baseline", "--repr", "cbow-mean", "--in", p(d, "train.csv"), "--out", p(d, "x.bin")}).code == 1);
  for (const auto& m : {"b.bin", "h.bin"}) {
    auto ev = sensor_cli({"evaluate", "--model", p(d, m), "--test", p(d, "test.csv"), "--out-report", p(d, std::string(m) + ".txt")});
    INFO(ev.err);
    CHECK(ev.code == 0);
    CHECK(ev.out.find("macro_f1") != std::string::npos);
  }

  auto b = sensor_cli({"bench", "--model", p(d, "g.bin"), "--runs", "7", "--warmups", "2", "--out", p(d, "bench.txt")});
  REQUIRE(b.code == 0);
  const auto bench = key_values(read_file(d / "bench.txt"));
  CHECK(bench.at("runs") == "7");
  CHECK(std::stod(bench.at("min_ms")) <= std::stod(bench.at("mean_ms")));
  CHECK(std::stod(bench.at("mean_ms")) <= std::stod(bench.at("max_ms")));
  CHECK(sensor_cli({"bench", "--model", p(d, "b.bin"), "--runs", "3", "--warmups", "0", "--in", p(d, "test.csv")}).code == 0);

  // annotator files: B flips two labels
  auto a_rows = synthetic_corpus(20, 4);
  auto b_rows = a_rows;
  b_rows[0].gold_label = Label::PIR == *b_rows[0].gold_label ? Label::PFR : Label::PIR;
  b_rows[5].gold_label = Label::PB == *b_rows[5].gold_label ? Label::PFR : Label::PB;
  corpus::save_csv(a_rows, d / "a.csv");
  corpus::save_csv(b_rows, d / "b.csv");
  auto k = sensor_cli({"kappa", "--file-a", p(d, "a.csv"), "--file-b", p(d, "b.csv")});
  REQUIRE(k.code == 0);
  std::vector<Label> la, lb;
  for (std::size_t i = 0; i < a_rows.size(); ++i) {
    la.push_back(*a_rows[i].gold_label);
    lb.push_back(*b_rows[i].gold_label);
  }
  const auto expected = metrics::cohens_kappa(metrics::agreement_table(la, lb));
  CHECK(std::stod(key_values(k.out).at("kappa")) == doctest::Approx(expected.kappa).epsilon(1e-15));
  CHECK(key_values(k.out).at("n") == "20");

  auto dv = sensor_cli({"diversity", "--before", p(d, "train.csv"), "--after", p(d, "test.csv"), "--out", p(d, "div.csv")});
  REQUIRE(dv.code == 0);
  const auto div = read_file(d / "div.csv");
  CHECK(div.rfind("row,before,after\n", 0) == 0);
  CHECK(div.find("\nmean,") != std::string::npos);
}

TEST_CASE("exit codes and usage") {
  TempDir d;
  auto missing = sensor_cli({"train-cbow", "--out", p(d, "e.vec")});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("--in") != std::string::npos);
  CHECK(missing.err.find("Usage") != std::string::npos);

  auto unknown = sensor_cli({"split", "--in", p(d, "x.csv"), "--bogus"});
  CHECK(unknown.code == 1);
  CHECK(sensor_cli({"frobnicate"}).code == 1);
  CHECK(sensor_cli({}).code == 1);

  auto help = sensor_cli({"evaluate", "--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("--out-report") != std::string::npos);

  // validation: untokenized input to train-cbow
  corpus::save_csv(synthetic_corpus(6, 1), d / "raw.csv");
  auto v = sensor_cli({"train-cbow", "--in", p(d, "raw.csv"), "--out", p(d, "e.vec")});
  CHECK(v.code == 1);
  CHECK(v.err.find("not tokenized") != std::string::npos);
  CHECK(sensor_cli({"scrape", "--app-id", "a.b", "--from", "2024-05-01", "--to", "2024-01-01", "--source", "live",
                    "--out", p(d, "s.csv")})
            .code == 1);

#ifndef SENSOR_LIVE_SCRAPER
  // runtime: the live source is not compiled in
  auto rt = sensor_cli({"scrape", "--app-id", "a.b", "--from", "2024-01-01", "--to", "2024-02-01", "--source", "live",
                        "--out", p(d, "s.csv")});
  CHECK(rt.code == 2);
#endif

  // a corrupt model file is a validation error
  write_file(d / "bad.bin", "not a model");
  write_tokenized(d / "t.csv", 6, 1);
  CHECK(sensor_cli({"predict", "--model", p(d, "bad.bin"), "--in", p(d, "t.csv"), "--out", p(d, "o.csv")}).code == 1);
}

TEST_CASE("config layering: defaults < file < flags < environment") {
  TempDir d;
  write_tokenized(d / "t.csv", 30, 1);
  write_file(d / "c.conf", "cbow.dim = 9\ncbow.epochs = 1\ncbow.min_count = 1\n");
  auto dim_of = [&](const std::vector<std::string>& extra) {
    std::vector<std::string> args{"train-cbow", "--in", p(d, "t.csv"), "--out", p(d, "e.vec"), "--config", p(d, "c.conf")};
    args.insert(args.end(), extra.begin(), extra.end());
    auto r = sensor_cli(args);
    INFO(r.err);
    REQUIRE(r.code == 0);
    return embed::load_embeddings(d / "e.vec").dim();
  };
  CHECK(dim_of({}) == 9);
  CHECK(dim_of({"--set", "cbow.dim=7"}) == 7);
  ::setenv("SENSOR_CBOW_DIM", "5", 1);
  CHECK(dim_of({"--set", "cbow.dim=7"}) == 5);
  ::unsetenv("SENSOR_CBOW_DIM");

  CHECK(sensor_cli({"train-cbow", "--in", p(d, "t.csv"), "--out", p(d, "e.vec"), "--set", "cbow.dimm=3"}).code == 1);
  write_file(d / "typo.conf", "cbow.windw = 2\n");
  CHECK(sensor_cli({"train-cbow", "--in", p(d, "t.csv"), "--out", p(d, "e.vec"), "--config", p(d, "typo.conf")}).code == 1);
  CHECK(sensor_cli({"train-cbow", "--in", p(d, "t.csv"), "--out", p(d, "e.vec"), "--set", "cbow.dim=-3"}).code == 1);
}

TEST_CASE("re-runs with the same seed give byte-identical outputs") {
  TempDir d;
  write_tokenized(d / "train.csv", 60, 1);
  write_tokenized(d / "val.csv", 15, 2);
  write_file(d / "cbow.conf", kCbowConfig);
  write_file(d / "grace.conf", kGraceConfig);

  auto run_all = [&](const std::string& tag, const std::string& seed) {
    REQUIRE(sensor_cli({"train-cbow", "--in", p(d, "train.csv"), "--out", p(d, tag + ".vec"), "--config",
                        p(d, "cbow.conf"), "--seed", seed})
                .code == 0);
    REQUIRE(sensor_cli({"train-grace", "--train", p(d, "train.csv"), "--val", p(d, "val.csv"), "--embeddings",
                        p(d, tag + ".vec"), "--config", p(d, "grace.conf"), "--set", "train.epochs=3", "--out",
                        p(d, tag + ".bin"), "--seed", seed})
                .code == 0);
    REQUIRE(sensor_cli({"augment", "--in", p(d, "train.csv"), "--out", p(d, tag + ".aug.csv"), "--seed", seed}).code == 0);
    REQUIRE(sensor_cli({"split", "--in", p(d, "train.csv"), "--out-dir", p(d, tag + "-split"), "--seed", seed}).code == 0);
  };
  run_all("a", "13");
  run_all("b", "13");
  run_all("c", "14");
  for (const auto& ext : {".vec", ".bin", ".bin.trace", ".aug.csv", "-split/train.csv", "-split/split.manifest"}) {
    INFO(ext);
    CHECK(read_file(d / ("a" + std::string(ext))) == read_file(d / ("b" + std::string(ext))));
  }
  CHECK(read_file(d / "a.vec") != read_file(d / "c.vec"));
  CHECK(read_file(d / "a.bin") != read_file(d / "c.bin"));

  auto ma = cli::RunManifest::parse(read_file(cli::run_manifest_path(d / "a.bin")));
  auto mb = cli::RunManifest::parse(read_file(cli::run_manifest_path(d / "b.bin")));
  CHECK(ma.subcommand == "train-grace");
  CHECK(ma.seed == 13);
  CHECK(ma.tool_version == SENSOR_VERSION);
  CHECK(ma.config_hash == mb.config_hash);
  CHECK(ma.config_hash.size() == 16);
  CHECK(ma.outputs.front() == std::pair<std::string, std::string>{"model", p(d, "a.bin")});
  CHECK_FALSE(ma.started_at.empty());
  CHECK_FALSE(ma.finished_at.empty());
  ma.started_at = mb.started_at;
  ma.finished_at = mb.finished_at;
  ma.inputs = mb.inputs;
  ma.outputs = mb.outputs;
  CHECK(ma.to_text() == mb.to_text());
  CHECK(cli::RunManifest::parse(mb.to_text()).to_text() == mb.to_text());
}

TEST_CASE("serve answers health and stops on SIGTERM") {
  TempDir d;
  write_file(d / "serve.conf", "store = " + p(d, "store.db") + "\nlisten = 127.0.0.1\nport = 0\npassword_cost = minimum\n");
  int pipefd[2];
  REQUIRE(::pipe(pipefd) == 0);
  const pid_t pid = ::fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    ::dup2(pipefd[1], STDOUT_FILENO);
    ::close(pipefd[0]);
    ::close(pipefd[1]);
    const auto conf = p(d, "serve.conf");
    ::execl(SENSOR_CLI_BINARY, SENSOR_CLI_BINARY, "serve", "--config", conf.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(pipefd[1]);
  std::string line;
  char c;
  while (::read(pipefd[0], &c, 1) == 1 && c != '\n') line += c;
  INFO(line);
  const auto colon = line.rfind(':');
  REQUIRE(line.rfind("listening on http://127.0.0.1:", 0) == 0);
  const int port = std::stoi(line.substr(colon + 1));

  httplib::Client client("127.0.0.1", port);
  auto res = client.Get("/api/v1/health");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->body.find("\"ok\"") != std::string::npos);

  ::kill(pid, SIGTERM);
  int status = 0;
  ::waitpid(pid, &status, 0);
  ::close(pipefd[0]);
  CHECK(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  CHECK(fs::exists(cli::run_manifest_path(d / "store.db")));
}
