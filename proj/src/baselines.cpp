#include "sensor/baselines.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>

namespace sensor::baselines {

SparseVec to_sparse(const Eigen::VectorXd& dense) {
  SparseVec out;
  for (Eigen::Index i = 0; i < dense.size(); ++i) {
    if (dense(i) != 0.0) out.emplace_back(static_cast<std::uint32_t>(i), dense(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// TF-IDF

TfidfVectorizer TfidfVectorizer::fit(const std::vector<std::vector<std::string>>& docs) {
  if (docs.empty()) throw ValidationError("TF-IDF needs a non-empty training corpus");
  std::map<std::string, std::size_t> df;
  for (const auto& d : docs) {
    std::vector<std::string> uniq(d.begin(), d.end());
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    for (const auto& t : uniq) ++df[t];
  }
  const double n = static_cast<double>(docs.size());
  std::vector<std::string> terms;
  std::vector<double> idf;
  for (const auto& [t, f] : df) {
    terms.push_back(t);
    idf.push_back(std::log((1.0 + n) / (1.0 + static_cast<double>(f))) + 1.0);
  }
  return from_parts(std::move(terms), std::move(idf));
}

TfidfVectorizer TfidfVectorizer::from_parts(std::vector<std::string> terms, std::vector<double> idf, bool l2) {
  if (terms.size() != idf.size()) throw ValidationError("TF-IDF terms and idf differ in length");
  TfidfVectorizer v;
  v.terms_ = std::move(terms);
  v.idf_ = std::move(idf);
  v.l2_ = l2;
  for (std::size_t i = 0; i < v.terms_.size(); ++i) {
    if (i > 0 && !(v.terms_[i - 1] < v.terms_[i])) throw ValidationError("TF-IDF terms must be sorted and unique");
    v.index_.emplace(v.terms_[i], static_cast<std::uint32_t>(i));
  }
  return v;
}

double TfidfVectorizer::idf_of(const std::string& term) const {
  auto it = index_.find(term);
  return it == index_.end() ? 0.0 : idf_[it->second];
}

SparseVec TfidfVectorizer::transform(const std::vector<std::string>& tokens) const {
  std::map<std::uint32_t, double> counts;
  for (const auto& t : tokens) {
    auto it = index_.find(t);
    if (it != index_.end()) counts[it->second] += 1.0;
  }
  SparseVec out;
  double norm2 = 0.0;
  for (auto& [i, c] : counts) {
    const double v = c * idf_[i];
    out.emplace_back(i, v);
    norm2 += v * v;
  }
  if (l2_ && norm2 > 0.0) {
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& [i, v] : out) v *= inv;
  }
  return out;
}

FeatureMatrix TfidfVectorizer::transform_all(const std::vector<std::vector<std::string>>& docs) const {
  FeatureMatrix X;
  X.dim = dim();
  X.rows.reserve(docs.size());
  for (const auto& d : docs) X.rows.push_back(transform(d));
  return X;
}

Eigen::VectorXd mean_embedding(const embed::EmbeddingMatrix& emb, const std::vector<std::string>& tokens) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(emb.dim()));
  std::size_t n = 0;
  for (const auto& t : tokens) {
    const auto idx = emb.vocab.index_of(t);
    if (idx == embed::kUnk) continue;
    sum += emb.matrix.row(idx).transpose().cast<double>();
    ++n;
  }
  if (n > 0) sum /= static_cast<double>(n);
  return sum;
}

// ---------------------------------------------------------------------------
// Linear models

std::string_view loss_name(Loss l) { return l == Loss::Log ? "log" : "hinge"; }

Loss parse_loss(std::string_view s) {
  if (s == "log") return Loss::Log;
  if (s == "hinge") return Loss::Hinge;
  throw ValidationError("loss must be log or hinge, got '" + std::string(s) + "'");
}

Eigen::VectorXd LinearModel::scores(const SparseVec& x) const {
  Eigen::VectorXd s = b;
  for (const auto& [i, v] : x) {
    if (i < W.cols()) s += W.col(i) * v;
  }
  return s;
}

std::size_t LinearModel::predict(const SparseVec& x) const {
  const auto s = scores(x);
  std::size_t best = 0;
  for (Eigen::Index c = 1; c < s.size(); ++c) {
    if (s(c) > s(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(c);
  }
  return best;
}

LinearModel train_linear(const FeatureMatrix& X, const std::vector<std::size_t>& y, std::size_t classes,
                         const LinearConfig& config) {
  if (classes < 2) throw ValidationError("a linear classifier needs at least two classes");
  if (X.rows.size() != y.size()) throw ValidationError("feature rows and labels differ in count");
  if (!(config.lr > 0.0) || !(config.l2 >= 0.0)) throw ValidationError("lr must be > 0 and l2 >= 0");
  for (auto c : y) {
    if (c >= classes) throw ValidationError("label index out of range");
  }
  const auto D = static_cast<Eigen::Index>(X.dim);
  const auto K = static_cast<Eigen::Index>(classes);
  LinearModel m;
  m.config = config;
  m.classes = classes;

  // w_c = scale_c * v_c keeps the L2 shrink O(1) on sparse rows.
  Eigen::MatrixXd V = Eigen::MatrixXd::Zero(K, D);
  Eigen::VectorXd scale = Eigen::VectorXd::Ones(K);
  Eigen::VectorXd bias = Eigen::VectorXd::Zero(K);
  const std::size_t n = X.rows.size();
  std::vector<std::size_t> order(n);
  std::uint64_t t = 0;
  for (std::size_t epoch = 0; epoch < config.epochs && n > 0; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, "linear-shuffle", epoch));
    rng.shuffle(order);
    for (auto i : order) {
      const double eta = config.lr / (1.0 + static_cast<double>(t) / static_cast<double>(n));
      ++t;
      const auto& x = X.rows[i];
      for (Eigen::Index c = 0; c < K; ++c) {
        double s = bias(c);
        for (const auto& [j, v] : x) s += scale(c) * V(c, j) * v;
        const double yc = y[i] == static_cast<std::size_t>(c) ? 1.0 : -1.0;
        double g = 0.0;
        if (config.loss == Loss::Log) {
          const double z = yc * s;
          g = -yc / (1.0 + std::exp(z));
        } else if (yc * s < 1.0) {
          g = -yc;
        }
        scale(c) *= 1.0 - eta * config.l2;
        if (scale(c) < 1e-9) {
          V.row(c) *= scale(c);
          scale(c) = 1.0;
        }
        if (g != 0.0) {
          const double step = eta * g / scale(c);
          for (const auto& [j, v] : x) V(c, j) -= step * v;
          bias(c) -= eta * g;
        }
      }
    }
    if (!V.allFinite() || !bias.allFinite()) throw RuntimeError("linear model diverged in epoch " + std::to_string(epoch + 1));
  }
  m.W = scale.asDiagonal() * V;
  m.b = bias;
  // Keep values float-representable so the saved model predicts identically.
  m.W = m.W.cast<float>().cast<double>();
  m.b = m.b.cast<float>().cast<double>();
  return m;
}

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Label HierarchicalModel::predict(const SparseVec& x) const {
  if (stage1.predict(x) == 1) return Label::PIR;
  return stage2.predict(x) == 0 ? Label::PFR : Label::PB;
}

std::array<double, kNumClasses> HierarchicalModel::class_scores(const SparseVec& x) const {
  const auto s1 = stage1.scores(x);
  const auto s2 = stage2.scores(x);
  const double p_rel = logistic(s1(0) - s1(1));
  const double p_pfr = logistic(s2(0) - s2(1));
  return {p_rel * p_pfr, p_rel * (1.0 - p_pfr), 1.0 - p_rel};
}

HierarchicalModel train_hierarchical(const FeatureMatrix& X, const std::vector<Label>& y, const LinearConfig& config) {
  if (X.rows.size() != y.size()) throw ValidationError("feature rows and labels differ in count");
  HierarchicalModel h;
  std::vector<std::size_t> y1;
  FeatureMatrix X2;
  X2.dim = X.dim;
  std::vector<std::size_t> y2;
  for (std::size_t i = 0; i < y.size(); ++i) {
    y1.push_back(y[i] == Label::PIR ? 1 : 0);
    if (y[i] != Label::PIR) {
      X2.rows.push_back(X.rows[i]);
      y2.push_back(y[i] == Label::PFR ? 0 : 1);
    }
  }
  LinearConfig c1 = config;
  c1.seed = derive_seed(config.seed, "stage1");
  LinearConfig c2 = config;
  c2.seed = derive_seed(config.seed, "stage2");
  h.stage1 = train_linear(X, y1, 2, c1);
  h.stage2 = train_linear(X2, y2, 2, c2);
  return h;
}

// ---------------------------------------------------------------------------
// Bundled model

std::string_view repr_name(Repr r) { return r == Repr::Tfidf ? "tfidf" : "cbow-mean"; }

Repr parse_repr(std::string_view s) {
  if (s == "tfidf") return Repr::Tfidf;
  if (s == "cbow-mean") return Repr::CbowMean;
  throw ValidationError("repr must be tfidf or cbow-mean, got '" + std::string(s) + "'");
}

SparseVec BaselineModel::features(const std::vector<std::string>& tokens) const {
  if (repr == Repr::Tfidf) return tfidf.value().transform(tokens);
  return to_sparse(mean_embedding(embeddings.value(), tokens));
}

std::vector<BaselineOutput> BaselineModel::predict(const std::vector<std::vector<std::string>>& docs) const {
  std::vector<BaselineOutput> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    const auto x = features(d);
    BaselineOutput o;
    if (hierarchical) {
      o.label = hier.predict(x);
      o.scores = hier.class_scores(x);
    } else {
      const auto s = flat.scores(x);
      for (std::size_t c = 0; c < kNumClasses; ++c) o.scores[c] = s(static_cast<Eigen::Index>(c));
      o.label = label_from_code(static_cast<int>(flat.predict(x)));
    }
    out.push_back(o);
  }
  return out;
}

std::vector<BaselineOutput> BaselineModel::predict(const std::vector<corpus::Review>& reviews) const {
  std::vector<std::vector<std::string>> docs;
  for (const auto& r : reviews) {
    if (!r.tokens) throw ValidationError("review " + r.review_id + " is not tokenized");
    docs.push_back(*r.tokens);
  }
  return predict(docs);
}

BaselineModel train_baseline(const std::vector<corpus::Review>& train, Repr repr, bool hierarchical,
                             const LinearConfig& config, const embed::EmbeddingMatrix* embeddings) {
  if (train.empty()) throw ValidationError("baseline training set is empty");
  std::vector<std::vector<std::string>> docs;
  std::vector<Label> labels;
  for (const auto& r : train) {
    if (!r.tokens) throw ValidationError("review " + r.review_id + " is not tokenized");
    if (!r.gold_label) throw ValidationError("review " + r.review_id + " has no gold label");
    docs.push_back(*r.tokens);
    labels.push_back(*r.gold_label);
  }

  BaselineModel m;
  m.repr = repr;
  m.hierarchical = hierarchical;
  FeatureMatrix X;
  if (repr == Repr::Tfidf) {
    m.tfidf = TfidfVectorizer::fit(docs);
    // Float-representable idf, as for the weights.
    auto idf = m.tfidf->idf();
    for (auto& v : idf) v = static_cast<double>(static_cast<float>(v));
    m.tfidf = TfidfVectorizer::from_parts(m.tfidf->terms(), std::move(idf));
    X = m.tfidf->transform_all(docs);
  } else {
    if (!embeddings) throw ValidationError("cbow-mean representation needs embeddings");
    m.embeddings = *embeddings;
    X.dim = embeddings->dim();
    for (const auto& d : docs) X.rows.push_back(to_sparse(mean_embedding(*embeddings, d)));
  }

  if (hierarchical) {
    m.hier = train_hierarchical(X, labels, config);
  } else {
    std::vector<std::size_t> y;
    for (auto l : labels) y.push_back(static_cast<std::size_t>(label_code(l)));
    m.flat = train_linear(X, y, kNumClasses, config);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

model_io::Tensor tensor_of(const std::string& name, const Eigen::MatrixXd& m) {
  model_io::Tensor t;
  t.name = name;
  t.rows = static_cast<std::uint32_t>(m.rows());
  t.cols = static_cast<std::uint32_t>(m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.data.push_back(static_cast<float>(m(i, j)));
  return t;
}

Eigen::MatrixXd matrix_of(const model_io::Tensor& t) {
  Eigen::MatrixXd m(t.rows, t.cols);
  for (std::uint32_t i = 0; i < t.rows; ++i)
    for (std::uint32_t j = 0; j < t.cols; ++j) m(i, j) = t.data[static_cast<std::size_t>(i) * t.cols + j];
  return m;
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void put_linear(model_io::Container& c, const std::string& prefix, const LinearModel& m) {
  c.tensors.push_back(tensor_of(prefix + "W", m.W));
  c.tensors.push_back(tensor_of(prefix + "b", m.b));
}

LinearModel get_linear(const model_io::Container& c, const std::string& prefix, const LinearConfig& cfg,
                       std::size_t classes, std::size_t dim) {
  LinearModel m;
  m.config = cfg;
  m.classes = classes;
  m.W = matrix_of(c.tensor(prefix + "W"));
  const auto b = matrix_of(c.tensor(prefix + "b"));
  if (static_cast<std::size_t>(m.W.rows()) != classes || static_cast<std::size_t>(m.W.cols()) != dim ||
      b.size() != m.W.rows()) {
    throw ValidationError("tensor " + prefix + "W/b has an unexpected shape");
  }
  m.b = Eigen::Map<const Eigen::VectorXd>(b.data(), b.size());
  return m;
}

}  // namespace

model_io::Container to_container(const BaselineModel& model) {
  model_io::Container c;
  c.type = model.hierarchical ? model_io::TypeTag::HierarchicalBaseline : model_io::TypeTag::LinearBaseline;
  const auto& cfg = model.hierarchical ? model.hier.stage1.config : model.flat.config;
  c.config = {{"repr", std::string(repr_name(model.repr))},
              {"loss", std::string(loss_name(cfg.loss))},
              {"lr", fmt(cfg.lr)},
              {"l2", fmt(cfg.l2)},
              {"epochs", std::to_string(cfg.epochs)}};
  if (model.repr == Repr::Tfidf) {
    const auto& tf = model.tfidf.value();
    c.vocab = tf.terms();
    c.vocab_hash = fnv1a64(join(c.vocab, "\n"));
    Eigen::MatrixXd idf(1, static_cast<Eigen::Index>(tf.dim()));
    for (std::size_t i = 0; i < tf.dim(); ++i) idf(0, static_cast<Eigen::Index>(i)) = tf.idf()[i];
    c.tensors.push_back(tensor_of("idf", idf));
  } else {
    const auto& emb = model.embeddings.value();
    c.vocab = emb.vocab.tokens();
    c.vocab_hash = emb.vocab.hash();
    c.tensors.push_back(tensor_of("embedding", emb.matrix.cast<double>()));
  }
  if (model.hierarchical) {
    put_linear(c, "stage1.", model.hier.stage1);
    put_linear(c, "stage2.", model.hier.stage2);
  } else {
    put_linear(c, "linear.", model.flat);
  }
  return c;
}

BaselineModel baseline_from_container(const model_io::Container& c) {
  if (c.type != model_io::TypeTag::LinearBaseline && c.type != model_io::TypeTag::HierarchicalBaseline) {
    throw ValidationError("model file is not a baseline model");
  }
  if (fnv1a64(join(c.vocab, "\n")) != c.vocab_hash) throw ValidationError("model file vocabulary hash mismatch");
  BaselineModel m;
  m.hierarchical = c.type == model_io::TypeTag::HierarchicalBaseline;
  m.repr = parse_repr(c.config_value("repr"));
  LinearConfig cfg;
  cfg.loss = parse_loss(c.config_value("loss"));
  cfg.lr = std::stod(c.config_value("lr"));
  cfg.l2 = std::stod(c.config_value("l2"));
  cfg.epochs = std::stoul(c.config_value("epochs"));

  std::size_t dim = 0;
  if (m.repr == Repr::Tfidf) {
    const auto& t = c.tensor("idf");
    if (t.rows != 1 || t.cols != c.vocab.size()) throw ValidationError("idf tensor does not match the term list");
    m.tfidf = TfidfVectorizer::from_parts(c.vocab, std::vector<double>(t.data.begin(), t.data.end()));
    dim = c.vocab.size();
  } else {
    embed::EmbeddingMatrix emb;
    emb.vocab = embed::Vocabulary::from_tokens(c.vocab);
    const auto& t = c.tensor("embedding");
    if (t.rows != c.vocab.size()) throw ValidationError("embedding tensor does not match the vocabulary");
    emb.matrix.resize(t.rows, t.cols);
    std::copy(t.data.begin(), t.data.end(), emb.matrix.data());
    dim = t.cols;
    m.embeddings = std::move(emb);
  }
  if (m.hierarchical) {
    m.hier.stage1 = get_linear(c, "stage1.", cfg, 2, dim);
    m.hier.stage2 = get_linear(c, "stage2.", cfg, 2, dim);
  } else {
    m.flat = get_linear(c, "linear.", cfg, kNumClasses, dim);
  }
  return m;
}

void save_baseline(const BaselineModel& model, const std::filesystem::path& path) {
  model_io::write_file(to_container(model), path);
}

BaselineModel load_baseline(const std::filesystem::path& path) { return baseline_from_container(model_io::read_file(path)); }

}  // namespace sensor::baselines
