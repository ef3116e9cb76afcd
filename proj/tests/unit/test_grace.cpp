#include "doctest.h"
#include "early_stop_cases.hpp"
#include "sensor/grace.hpp"
#include "test_util.hpp"

#include <cmath>
#include <fstream>

using namespace sensor;
using namespace sensor::grace;

namespace {

GraceConfig tiny_config() {
  GraceConfig c;
  c.embed_dim = 4;
  c.hidden = 3;
  c.dense = 4;
  c.max_len = 5;
  c.dropout = 0.5;
  return c;
}

embed::Vocabulary letters_vocab() {
  return embed::Vocabulary::build({split_whitespace("a b c d e f g h")}, 1);
}

std::vector<std::vector<std::string>> toks(std::initializer_list<std::string> texts) {
  std::vector<std::vector<std::string>> out;
  for (const auto& t : texts) out.push_back(split_whitespace(t));
  return out;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(a), std::abs(b)); }

double worst_gradient_error(GraceModelT<double>& model, const Batch& batch, const std::vector<Label>& labels,
                            std::uint64_t seed) {
  const auto analytic = loss_and_gradients(model, batch, labels, seed, true);
  auto grads = const_cast<GraceParams<double>&>(analytic.grads).named();
  auto params = model.params.named();
  const double eps = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].second;
    const auto& g = *grads[i].second;
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double saved = p.data()[k];
      p.data()[k] = saved + eps;
      const double lp = loss_only(model, batch, labels, seed, true);
      p.data()[k] = saved - eps;
      const double lm = loss_only(model, batch, labels, seed, true);
      p.data()[k] = saved;
      const double numeric = (lp - lm) / (2 * eps);
      if (std::max(std::abs(numeric), std::abs(g.data()[k])) < 1e-8) continue;
      const double e = rel_err(numeric, g.data()[k]);
      if (e > worst) {
        worst = e;
        INFO(params[i].first << "[" << k << "] analytic " << g.data()[k] << " numeric " << numeric);
        CHECK(e < 1e-3);
      }
    }
  }
  return worst;
}

std::vector<corpus::Review> toy_reviews(std::size_t n) {
  const std::vector<std::string> pfr{"please", "add", "option", "setting", "want", "feature"};
  const std::vector<std::string> pb{"leak", "crash", "bug", "exposed", "broken", "error"};
  const std::vector<std::string> pir{"fun", "game", "love", "great", "nice", "cool"};
  const std::vector<std::string> filler{"the", "app", "my", "it", "is", "this"};
  Rng rng(21);
  std::vector<corpus::Review> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<Label>(i % 3);
    const auto& cue = label == Label::PFR ? pfr : label == Label::PB ? pb : pir;
    std::vector<std::string> t;
    const auto len = 3 + rng.below(4);
    for (std::size_t k = 0; k < len; ++k) t.push_back(rng.below(2) ? cue[rng.below(cue.size())] : filler[rng.below(6)]);
    t.push_back(cue[rng.below(cue.size())]);
    corpus::Review r;
    r.review_id = "toy" + std::to_string(i);
    r.raw_text = join(t, " ");
    r.tokens = t;
    r.gold_label = label;
    out.push_back(r);
  }
  return out;
}

embed::Vocabulary vocab_of(const std::vector<corpus::Review>& reviews) {
  std::vector<std::vector<std::string>> docs;
  for (const auto& r : reviews) docs.push_back(*r.tokens);
  return embed::Vocabulary::build(docs, 1);
}

}  // namespace

TEST_CASE("config map round trip and validation") {
  GraceConfig c = tiny_config();
  c.combine = Combine::Sum;
  c.freeze_embedding = true;
  c.dropout = 0.3;
  auto back = GraceConfig::from_map(c.to_map());
  CHECK(back.to_map() == c.to_map());
  CHECK_THROWS_AS(GraceConfig::from_map({{"combine", "max"}}), ValidationError);
  CHECK_THROWS_AS(GraceConfig::from_map({{"dropout", "1"}}), ValidationError);
  CHECK_THROWS_AS(GraceConfig::from_map({{"hidden", "-3"}}), ValidationError);
  CHECK(GraceConfig{}.feature_dim() == 1792);
}

TEST_CASE("parameter count matches the declared shapes") {
  auto vocab = letters_vocab();
  GraceConfig c;  // full-size dimensions
  auto m = GraceModel::initialize(c, vocab, 1);
  const std::size_t V = vocab.size(), D = 200, H = 896, F = 1792, K = 256;
  CHECK(m.parameter_count() == V * D + 3 * D * H + 3 * H * H + 3 * H + F * K + K + K * 3 + 3);
  CHECK(m.params.embedding.row(0).isZero(0));
  CHECK(m.params.bz.isZero(0));
  const double bound = std::sqrt(6.0 / (H + H));
  CHECK(m.params.Uz.cwiseAbs().maxCoeff() <= bound);
}

TEST_CASE("softmax output is a distribution") {
  auto model = GraceModel::initialize(tiny_config(), letters_vocab(), 3);
  auto batch = encode(model.vocab, toks({"a b c", "d", "e f g h a b c", "zz a"}), 5);
  auto p = forward(model, batch);
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    CHECK(std::abs(p.row(i).cast<double>().sum() - 1.0) < 1e-6);
    CHECK(p.row(i).minCoeff() >= 0.0f);
  }
  CHECK(forward(model, batch) == p);
  CHECK(forward(model, batch, true, 7) == forward(model, batch, true, 7));
}

TEST_CASE("zero parameters give uniform output and ln 3 loss") {
  auto model = GraceModelT<double>::initialize(tiny_config(), letters_vocab(), 3);
  model.params.set_zero();
  auto batch = encode(model.vocab, toks({"a b c", "h"}), 5);
  auto p = forward(model, batch);
  for (Eigen::Index i = 0; i < p.size(); ++i) CHECK(p.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(loss_only(model, batch, {Label::PB, Label::PIR}, 0, false) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("loss approaches zero for a confident correct prediction") {
  auto model = GraceModelT<double>::initialize(tiny_config(), letters_vocab(), 3);
  model.params.set_zero();
  model.params.b2(0, 1) = 40.0;
  auto batch = encode(model.vocab, toks({"a b"}), 5);
  CHECK(loss_only(model, batch, {Label::PB}, 0, false) < 1e-12);
  model.params.b2(0, 1) = 20.0;
  CHECK(loss_only(model, batch, {Label::PFR}, 0, false) == doctest::Approx(std::log(2.0 + std::exp(20.0))).epsilon(1e-12));
  model.params.b2(0, 1) = 1000.0;
  CHECK(loss_only(model, batch, {Label::PFR}, 0, false) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("analytic gradients match central differences") {
  for (auto combine : {Combine::Concat, Combine::Sum}) {
    CAPTURE(static_cast<int>(combine));
    auto cfg = tiny_config();
    cfg.combine = combine;
    auto model = GraceModelT<double>::initialize(cfg, letters_vocab(), 11);
    // Larger weights than the init so every gate sees non-trivial curvature.
    Rng rng(4);
    for (auto& [name, p] : model.params.named()) {
      for (Eigen::Index k = 0; k < p->size(); ++k) p->data()[k] = rng.uniform(-0.9, 0.9);
    }
    model.params.embedding.row(embed::kPad).setZero();
    auto batch = encode(model.vocab, toks({"a b c d e", "f g a"}), 5);
    const double worst = worst_gradient_error(model, batch, {Label::PB, Label::PIR}, 99);
    CHECK(worst < 1e-3);
    MESSAGE("worst relative error " << worst);
  }
}

TEST_CASE("frozen embedding gets no gradient") {
  auto cfg = tiny_config();
  cfg.freeze_embedding = true;
  auto model = GraceModelT<double>::initialize(cfg, letters_vocab(), 11);
  auto batch = encode(model.vocab, toks({"a b c", "d e"}), 5);
  auto lg = loss_and_gradients(model, batch, {Label::PFR, Label::PB}, 1);
  CHECK(lg.grads.embedding.isZero(0));
  CHECK_FALSE(lg.grads.Wz.isZero(0));
}

TEST_CASE("appending PAD never changes the output") {
  auto cfg = tiny_config();
  cfg.max_len = 12;
  auto model = GraceModel::initialize(cfg, letters_vocab(), 5);
  Rng rng(8);
  const std::vector<std::string> letters{"a", "b", "c", "d", "e", "f", "g", "h", "q"};
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<std::string> doc;
    const auto n = 1 + rng.below(6);
    for (std::size_t i = 0; i < n; ++i) doc.push_back(letters[rng.below(letters.size())]);
    auto narrow = encode(model.vocab, {doc}, 6);
    auto wide = encode(model.vocab, {doc}, 12);
    auto mixed = encode(model.vocab, {doc, split_whitespace("a b c d e f g h a b c d")}, 12);
    auto pn = forward(model, narrow);
    auto pw = forward(model, wide);
    auto pm = forward(model, mixed);
    CHECK((pn - pw).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((pn.row(0) - pm.row(0)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("malformed batches are rejected") {
  auto model = GraceModel::initialize(tiny_config(), letters_vocab(), 5);
  auto empty_row = encode(model.vocab, toks({"a b", ""}), 5);
  CHECK_THROWS_AS(forward(model, empty_row), ValidationError);

  auto gap = encode(model.vocab, toks({"a b c"}), 5);
  gap.mask[1] = 0;
  CHECK_THROWS_AS(forward(model, gap), ValidationError);

  auto out_of_range = encode(model.vocab, toks({"a"}), 5);
  out_of_range.indices[0] = 999;
  CHECK_THROWS_AS(forward(model, out_of_range), ValidationError);

  auto ok = encode(model.vocab, toks({"a"}), 5);
  CHECK_THROWS_AS(loss_and_gradients(model, ok, {}, 0), ValidationError);
}

TEST_CASE("non-finite gradients name the parameter") {
  auto model = GraceModelT<double>::initialize(tiny_config(), letters_vocab(), 3);
  model.params.Uz(0, 0) = std::numeric_limits<double>::quiet_NaN();
  auto batch = encode(model.vocab, toks({"a b c"}), 5);
  try {
    loss_and_gradients(model, batch, {Label::PB}, 0);
    FAIL("expected a throw");
  } catch (const RuntimeError& e) {
    CHECK(std::string(e.what()).find("non-finite gradient in ") != std::string::npos);
  }
}

TEST_CASE("early stopping fixtures") {
  for (const auto& fx : sensor::testing::early_stop_cases()) {
    EarlyStopping es(3);
    std::size_t stopped = 0;
    for (double v : fx.val_loss) {
      ++stopped;
      if (es.observe(v)) break;
    }
    CAPTURE(fx.val_loss.size());
    CHECK(stopped == fx.stopped_epoch);
    CHECK(es.best_epoch() == fx.best_epoch);
  }
  CHECK_THROWS_AS(EarlyStopping(0), ValidationError);
}

TEST_CASE("early stopping properties on random sequences") {
  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t patience = 1 + rng.below(4);
    std::vector<double> seq;
    const auto n = 1 + rng.below(20);
    for (std::size_t i = 0; i < n; ++i) seq.push_back(static_cast<double>(rng.below(6)) / 4.0);
    EarlyStopping es(patience);
    std::size_t stopped = 0;
    bool stop = false;
    for (double v : seq) {
      ++stopped;
      if ((stop = es.observe(v))) break;
    }
    const auto best = es.best_epoch();
    REQUIRE(best >= 1);
    CHECK(best <= stopped);
    // best is the first minimum of the observed prefix
    for (std::size_t i = 0; i < stopped; ++i) {
      CHECK(seq[i] >= seq[best - 1]);
      if (i < best - 1) CHECK(seq[i] > seq[best - 1]);
    }
    if (stop) {
      CHECK(stopped - best == patience);
    } else {
      CHECK(stopped == seq.size());
      CHECK(stopped - best < patience);
    }
  }
}

TEST_CASE("argmax tie rule") {
  CHECK(argmax_label({0.2, 0.5, 0.3}) == Label::PB);
  CHECK(argmax_label({1.0 / 3, 1.0 / 3, 1.0 / 3}) == Label::PFR);
  CHECK(argmax_label({0.2, 0.4, 0.4}) == Label::PB);
}

TEST_CASE("memorizes a 30-example toy set") {
  auto reviews = toy_reviews(30);
  auto vocab = vocab_of(reviews);
  GraceConfig cfg;
  cfg.embed_dim = 8;
  cfg.hidden = 8;
  cfg.dense = 8;
  cfg.max_len = 10;
  cfg.dropout = 0.0;
  auto model = GraceModel::initialize(cfg, vocab, 2);
  auto data = make_dataset(vocab, reviews, cfg.max_len);
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 8;
  tc.lr = 0.01;
  tc.patience = 200;
  tc.seed = 4;
  auto trace = train(model, data, data, tc);
  CHECK(accuracy(model, data) == 1.0);
  CHECK(trace.best_epoch <= trace.stopped_epoch);
  CHECK(trace.stopped_epoch <= tc.epochs);
  CHECK(trace.val_loss[trace.best_epoch - 1] == *std::min_element(trace.val_loss.begin(), trace.val_loss.end()));
}

TEST_CASE("training is deterministic, restores the best epoch and keeps PAD zero") {
  auto reviews = toy_reviews(24);
  auto vocab = vocab_of(reviews);
  GraceConfig cfg;
  cfg.embed_dim = 6;
  cfg.hidden = 5;
  cfg.dense = 6;
  cfg.max_len = 8;
  auto data = make_dataset(vocab, reviews, cfg.max_len);
  auto val = make_dataset(vocab, toy_reviews(9), cfg.max_len);
  TrainConfig tc;
  tc.epochs = 12;
  tc.batch_size = 5;
  tc.lr = 0.02;
  tc.seed = 6;

  auto m1 = GraceModel::initialize(cfg, vocab, 1);
  auto m2 = GraceModel::initialize(cfg, vocab, 1);
  std::size_t calls = 0;
  auto t1 = train(m1, data, val, tc, [&](std::size_t, const TrainTrace&) { ++calls; });
  auto t2 = train(m2, data, val, tc);
  CHECK(t1 == t2);
  CHECK(calls == t1.stopped_epoch);
  CHECK(model_io::serialize(to_container(m1)) == model_io::serialize(to_container(m2)));
  CHECK(m1.params.embedding.row(embed::kPad).isZero(0));

  // Restored weights reproduce the best validation loss.
  const double restored = loss_only(m1, val.inputs, val.labels, 0, false);
  CHECK(restored == doctest::Approx(t1.val_loss[t1.best_epoch - 1]).epsilon(1e-12));
  CHECK(t1.to_text().find("best_epoch=" + std::to_string(t1.best_epoch)) != std::string::npos);
}

TEST_CASE("freeze flag leaves the embedding untouched") {
  auto reviews = toy_reviews(12);
  auto vocab = vocab_of(reviews);
  GraceConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden = 4;
  cfg.dense = 4;
  cfg.max_len = 8;
  cfg.freeze_embedding = true;
  auto data = make_dataset(vocab, reviews, cfg.max_len);
  auto model = GraceModel::initialize(cfg, vocab, 1);
  const auto before = model.params.embedding;
  const auto W1 = model.params.W1;
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  train(model, data, data, tc);
  CHECK(model.params.embedding == before);
  CHECK(model.params.W1 != W1);
}

TEST_CASE("divergence aborts with the trace so far") {
  auto reviews = toy_reviews(6);
  auto vocab = vocab_of(reviews);
  GraceConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden = 4;
  cfg.dense = 4;
  cfg.max_len = 8;
  auto data = make_dataset(vocab, reviews, cfg.max_len);
  auto model = GraceModel::initialize(cfg, vocab, 1);
  model.params.W2(0, 0) = std::numeric_limits<float>::infinity();
  try {
    train(model, data, data, TrainConfig{});
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.trace.stopped_epoch == 0);
  }
}

TEST_CASE("pretrained embeddings seed the model") {
  embed::CbowConfig cc;
  cc.dim = 4;
  cc.epochs = 1;
  cc.min_count = 1;
  auto emb = embed::train_cbow({split_whitespace("a b c d a b c d")}, cc).embeddings;
  auto model = GraceModel::initialize(tiny_config(), embed::Vocabulary{}, 1, &emb);
  CHECK(model.vocab.tokens() == emb.vocab.tokens());
  CHECK(model.params.embedding == emb.matrix);
  auto cfg = tiny_config();
  cfg.embed_dim = 5;
  CHECK_THROWS_AS(GraceModel::initialize(cfg, embed::Vocabulary{}, 1, &emb), ValidationError);
}

TEST_CASE("batched prediction equals per-review prediction") {
  auto reviews = toy_reviews(40);
  auto vocab = vocab_of(reviews);
  GraceConfig cfg;
  cfg.embed_dim = 6;
  cfg.hidden = 5;
  cfg.dense = 6;
  cfg.max_len = 8;
  auto model = GraceModel::initialize(cfg, vocab, 9);
  auto all = predict(model, reviews);
  REQUIRE(all.size() == reviews.size());
  for (std::size_t i = 0; i < reviews.size(); ++i) {
    auto one = predict(model, std::vector<corpus::Review>{reviews[i]});
    CHECK(one[0].label == all[i].label);
    for (std::size_t c = 0; c < kNumClasses; ++c) CHECK(std::abs(one[0].probs[c] - all[i].probs[c]) < 1e-6);
  }
  auto untok = reviews[0];
  untok.tokens.reset();
  CHECK_THROWS_AS(predict(model, std::vector<corpus::Review>{untok}), ValidationError);
  auto blank = reviews[0];
  blank.tokens = std::vector<std::string>{};
  CHECK_THROWS_AS(predict(model, std::vector<corpus::Review>{blank}), ValidationError);
}

TEST_CASE("model file round trip") {
  sensor::testing::TempDir tmp;
  auto reviews = toy_reviews(10);
  auto vocab = vocab_of(reviews);
  GraceConfig cfg;
  cfg.embed_dim = 6;
  cfg.hidden = 5;
  cfg.dense = 7;
  cfg.max_len = 8;
  cfg.combine = Combine::Sum;
  auto model = GraceModel::initialize(cfg, vocab, 9);
  save_model(model, tmp / "m.bin");
  auto back = load_model(tmp / "m.bin", vocab.hash());
  CHECK(back.config.to_map() == cfg.to_map());
  auto batch = make_dataset(vocab, reviews, cfg.max_len).inputs;
  CHECK(forward(back, batch) == forward(model, batch));

  const auto size = std::filesystem::file_size(tmp / "m.bin");
  CHECK(size > model.parameter_count() * 4);
  save_model(GraceModel::initialize(cfg, vocab, 10), tmp / "m2.bin");
  CHECK(std::filesystem::file_size(tmp / "m2.bin") == size);

  CHECK_THROWS_AS(load_model(tmp / "m.bin", vocab.hash() + 1), ValidationError);

  auto bytes = sensor::testing::read_file(tmp / "m.bin");
  auto corrupt = bytes;
  corrupt[0] = 'X';
  sensor::testing::write_file(tmp / "bad.bin", corrupt);
  CHECK_THROWS_AS(load_model(tmp / "bad.bin"), ValidationError);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  sensor::testing::write_file(tmp / "flip.bin", flipped);
  CHECK_THROWS_AS(load_model(tmp / "flip.bin"), ValidationError);

  auto version = bytes;
  version[8] = 9;
  sensor::testing::write_file(tmp / "ver.bin", version);
  try {
    load_model(tmp / "ver.bin");
    FAIL("expected a version error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  sensor::testing::write_file(tmp / "short.bin", bytes.substr(0, 40));
  CHECK_THROWS_AS(load_model(tmp / "short.bin"), ValidationError);
}
