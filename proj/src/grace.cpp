#include "sensor/grace.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

namespace sensor::grace {

namespace {

constexpr std::size_t kChunkRows = 32;
constexpr double kLogClamp = 1e-12;

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::size_t parse_size(const std::map<std::string, std::string>& m, const std::string& key, std::size_t fallback) {
  auto it = m.find(key);
  if (it == m.end()) return fallback;
  std::size_t v = 0;
  auto res = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (res.ec != std::errc() || res.ptr != it->second.data() + it->second.size()) {
    throw ValidationError("config '" + key + "' is not a non-negative integer: " + it->second);
  }
  return v;
}

double parse_double(const std::map<std::string, std::string>& m, const std::string& key, double fallback) {
  auto it = m.find(key);
  if (it == m.end()) return fallback;
  double v = 0;
  auto res = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (res.ec != std::errc() || res.ptr != it->second.data() + it->second.size()) {
    throw ValidationError("config '" + key + "' is not a number: " + it->second);
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void GraceConfig::validate() const {
  if (embed_dim == 0 || hidden == 0 || dense == 0) throw ValidationError("GRACE dimensions must be >= 1");
  if (max_len == 0) throw ValidationError("max_len must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must be in [0, 1)");
}

std::map<std::string, std::string> GraceConfig::to_map() const {
  return {
      {"embed_dim", std::to_string(embed_dim)},
      {"hidden", std::to_string(hidden)},
      {"dense", std::to_string(dense)},
      {"max_len", std::to_string(max_len)},
      {"dropout", fmt_double(dropout)},
      {"combine", combine == Combine::Concat ? "concat" : "sum"},
      {"freeze_embedding", freeze_embedding ? "true" : "false"},
  };
}

GraceConfig GraceConfig::from_map(const std::map<std::string, std::string>& m) {
  GraceConfig c;
  c.embed_dim = parse_size(m, "embed_dim", c.embed_dim);
  c.hidden = parse_size(m, "hidden", c.hidden);
  c.dense = parse_size(m, "dense", c.dense);
  c.max_len = parse_size(m, "max_len", c.max_len);
  c.dropout = parse_double(m, "dropout", c.dropout);
  if (auto it = m.find("combine"); it != m.end()) {
    if (it->second == "concat") {
      c.combine = Combine::Concat;
    } else if (it->second == "sum") {
      c.combine = Combine::Sum;
    } else {
      throw ValidationError("combine must be concat or sum, got " + it->second);
    }
  }
  if (auto it = m.find("freeze_embedding"); it != m.end()) {
    if (it->second != "true" && it->second != "false") throw ValidationError("freeze_embedding must be true or false");
    c.freeze_embedding = it->second == "true";
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
std::vector<std::pair<std::string, Mat<T>*>> GraceParams<T>::named() {
  return {{"embedding", &embedding}, {"gru.Wz", &Wz}, {"gru.Wr", &Wr}, {"gru.Wn", &Wn}, {"gru.Uz", &Uz},
          {"gru.Ur", &Ur},           {"gru.Un", &Un}, {"gru.bz", &bz}, {"gru.br", &br}, {"gru.bn", &bn},
          {"dense1.W", &W1},         {"dense1.b", &b1}, {"output.W", &W2}, {"output.b", &b2}};
}

template <typename T>
std::vector<std::pair<std::string, const Mat<T>*>> GraceParams<T>::named() const {
  std::vector<std::pair<std::string, const Mat<T>*>> out;
  for (auto& [n, p] : const_cast<GraceParams*>(this)->named()) out.emplace_back(n, p);
  return out;
}

template <typename T>
void GraceParams<T>::resize_like(const GraceParams& other) {
  auto mine = named();
  auto theirs = other.named();
  for (std::size_t i = 0; i < mine.size(); ++i) mine[i].second->setZero(theirs[i].second->rows(), theirs[i].second->cols());
}

template <typename T>
void GraceParams<T>::set_zero() {
  for (auto& [n, p] : named()) p->setZero();
}

template <typename T>
GraceModelT<T> GraceModelT<T>::initialize(const GraceConfig& config, const embed::Vocabulary& vocab, std::uint64_t seed,
                                          const embed::EmbeddingMatrix* pretrained) {
  config.validate();
  GraceModelT m;
  m.config = config;
  m.vocab = pretrained ? pretrained->vocab : vocab;
  const auto V = static_cast<Eigen::Index>(m.vocab.size());
  const auto D = static_cast<Eigen::Index>(config.embed_dim);
  const auto H = static_cast<Eigen::Index>(config.hidden);
  const auto F = static_cast<Eigen::Index>(config.feature_dim());
  const auto K = static_cast<Eigen::Index>(config.dense);
  const auto C = static_cast<Eigen::Index>(kNumClasses);
  auto& p = m.params;

  Rng rng(derive_seed(seed, "grace-init"));
  auto glorot = [&](Mat<T>& w, Eigen::Index rows, Eigen::Index cols) {
    w.resize(rows, cols);
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) w(i, j) = static_cast<T>(rng.uniform(-bound, bound));
  };

  if (pretrained) {
    if (pretrained->dim() != config.embed_dim) {
      throw ValidationError("embedding dim " + std::to_string(pretrained->dim()) + " does not match embed_dim " +
                            std::to_string(config.embed_dim));
    }
    p.embedding = pretrained->matrix.template cast<T>();
  } else {
    p.embedding.resize(V, D);
    const double bound = 0.5 / static_cast<double>(D);
    for (Eigen::Index i = 0; i < V; ++i)
      for (Eigen::Index j = 0; j < D; ++j) p.embedding(i, j) = static_cast<T>(rng.uniform(-bound, bound));
  }
  p.embedding.row(embed::kPad).setZero();

  glorot(p.Wz, D, H);
  glorot(p.Wr, D, H);
  glorot(p.Wn, D, H);
  glorot(p.Uz, H, H);
  glorot(p.Ur, H, H);
  glorot(p.Un, H, H);
  p.bz = Mat<T>::Zero(1, H);
  p.br = Mat<T>::Zero(1, H);
  p.bn = Mat<T>::Zero(1, H);
  glorot(p.W1, F, K);
  p.b1 = Mat<T>::Zero(1, K);
  glorot(p.W2, K, C);
  p.b2 = Mat<T>::Zero(1, C);
  return m;
}

template <typename T>
std::size_t GraceModelT<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, p] : params.named()) n += static_cast<std::size_t>(p->size());
  return n;
}

template <typename T>
template <typename U>
GraceModelT<U> GraceModelT<T>::cast() const {
  GraceModelT<U> out;
  out.config = config;
  out.vocab = vocab;
  auto src = params.named();
  auto dst = out.params.named();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
  return out;
}

// ---------------------------------------------------------------------------
// Inputs

std::size_t Batch::length(std::size_t r) const {
  std::size_t n = 0;
  while (n < max_len && mask[r * max_len + n]) ++n;
  for (std::size_t t = 0; t < max_len; ++t) {
    const bool valid = t < n;
    if (mask[r * max_len + t] != (valid ? 1 : 0) || (at(r, t) == embed::kPad) == valid) {
      throw ValidationError("row " + std::to_string(r) + ": mask must be a prefix matching the non-PAD tokens");
    }
  }
  return n;
}

Batch Batch::slice(const std::vector<std::size_t>& rows_) const {
  Batch b;
  b.rows = rows_.size();
  b.max_len = max_len;
  b.indices.reserve(b.rows * max_len);
  b.mask.reserve(b.rows * max_len);
  for (auto r : rows_) {
    b.indices.insert(b.indices.end(), indices.begin() + static_cast<std::ptrdiff_t>(r * max_len),
                     indices.begin() + static_cast<std::ptrdiff_t>((r + 1) * max_len));
    b.mask.insert(b.mask.end(), mask.begin() + static_cast<std::ptrdiff_t>(r * max_len),
                  mask.begin() + static_cast<std::ptrdiff_t>((r + 1) * max_len));
  }
  return b;
}

Batch encode(const embed::Vocabulary& vocab, const std::vector<std::vector<std::string>>& docs, std::size_t max_len) {
  Batch b;
  b.rows = docs.size();
  b.max_len = max_len;
  b.indices.assign(b.rows * max_len, embed::kPad);
  b.mask.assign(b.rows * max_len, 0);
  for (std::size_t r = 0; r < docs.size(); ++r) {
    const auto n = std::min(docs[r].size(), max_len);
    for (std::size_t t = 0; t < n; ++t) {
      b.indices[r * max_len + t] = vocab.index_of(docs[r][t]);
      b.mask[r * max_len + t] = 1;
    }
  }
  return b;
}

Dataset make_dataset(const embed::Vocabulary& vocab, const std::vector<corpus::Review>& reviews, std::size_t max_len) {
  std::vector<std::vector<std::string>> docs;
  Dataset d;
  for (const auto& r : reviews) {
    if (!r.tokens) throw ValidationError("review " + r.review_id + " is not tokenized");
    if (!r.gold_label) throw ValidationError("review " + r.review_id + " has no gold label");
    docs.push_back(*r.tokens);
    d.labels.push_back(*r.gold_label);
  }
  d.inputs = encode(vocab, docs, max_len);
  return d;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <typename T>
Mat<T> sigmoid(const Mat<T>& a) {
  return (T(1) + (-a.array()).exp()).inverse().matrix();
}

template <typename T>
void row_softmax(Mat<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const T mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
}

// Runs rows [r0, r1) of the batch. Adds scaled gradients into grads when
// given; writes probabilities into probs rows r0.. when given. Returns the
// summed (unscaled) loss when labels are given.
template <typename T>
double run_chunk(const GraceModelT<T>& model, const Batch& batch, std::size_t r0, std::size_t r1, const Label* labels,
                 double loss_scale, bool train_mode, std::uint64_t dropout_seed, GraceParams<T>* grads,
                 Mat<T>* probs) {
  const auto& cfg = model.config;
  const auto& P = model.params;
  const Eigen::Index nb = static_cast<Eigen::Index>(r1 - r0);
  const Eigen::Index H = static_cast<Eigen::Index>(cfg.hidden);
  const Eigen::Index F = static_cast<Eigen::Index>(cfg.feature_dim());
  const bool concat = cfg.combine == Combine::Concat;

  std::vector<std::size_t> len(static_cast<std::size_t>(nb));
  std::size_t lmax = 0;
  for (Eigen::Index b = 0; b < nb; ++b) {
    const auto r = r0 + static_cast<std::size_t>(b);
    len[b] = batch.length(r);
    if (len[b] == 0) throw ValidationError("row " + std::to_string(r) + " has no valid steps");
    for (std::size_t t = 0; t < len[b]; ++t) {
      if (batch.at(r, t) < 0 || static_cast<std::size_t>(batch.at(r, t)) >= model.vocab.size()) {
        throw ValidationError("row " + std::to_string(r) + " has an index outside the vocabulary");
      }
    }
    lmax = std::max(lmax, len[b]);
  }
  const Eigen::Index L = static_cast<Eigen::Index>(lmax);

  // Embedding gather, time-major: row t*nb + b.
  Mat<T> X = Mat<T>::Zero(L * nb, P.embedding.cols());
  for (Eigen::Index b = 0; b < nb; ++b)
    for (std::size_t t = 0; t < len[b]; ++t)
      X.row(static_cast<Eigen::Index>(t) * nb + b) = P.embedding.row(batch.at(r0 + static_cast<std::size_t>(b), t));

  const Mat<T> Axz = X * P.Wz;
  const Mat<T> Axr = X * P.Wr;
  const Mat<T> Axn = X * P.Wn;
  Mat<T> Hall(L * nb, H), Zs(L * nb, H), Rs(L * nb, H), Ns(L * nb, H);
  Mat<T> Hp = Mat<T>::Zero(nb, H);
  for (Eigen::Index t = 0; t < L; ++t) {
    Mat<T> az = Axz.middleRows(t * nb, nb) + Hp * P.Uz;
    az.rowwise() += P.bz.row(0);
    Mat<T> ar = Axr.middleRows(t * nb, nb) + Hp * P.Ur;
    ar.rowwise() += P.br.row(0);
    const Mat<T> z = sigmoid<T>(az);
    const Mat<T> r = sigmoid<T>(ar);
    const Mat<T> q = r.cwiseProduct(Hp);
    Mat<T> an = Axn.middleRows(t * nb, nb) + q * P.Un;
    an.rowwise() += P.bn.row(0);
    const Mat<T> n = an.array().tanh().matrix();
    Mat<T> h = ((T(1) - z.array()) * Hp.array() + z.array() * n.array()).matrix();
    Zs.middleRows(t * nb, nb) = z;
    Rs.middleRows(t * nb, nb) = r;
    Ns.middleRows(t * nb, nb) = n;
    Hall.middleRows(t * nb, nb) = h;
    Hp = std::move(h);
  }

  // Self-attention and masked pooling, per row.
  const T inv_sqrt_h = T(1) / std::sqrt(static_cast<T>(H));
  std::vector<Mat<T>> Hs(static_cast<std::size_t>(nb)), As(static_cast<std::size_t>(nb));
  Mat<T> G(nb, F);
  for (Eigen::Index b = 0; b < nb; ++b) {
    const auto l = static_cast<Eigen::Index>(len[b]);
    Mat<T>& hs = Hs[b];
    hs.resize(l, H);
    for (Eigen::Index t = 0; t < l; ++t) hs.row(t) = Hall.row(t * nb + b);
    Mat<T> a = (hs * hs.transpose()) * inv_sqrt_h;
    row_softmax(a);
    const Mat<T> c = a * hs;
    if (concat) {
      G.row(b).head(H) = hs.colwise().mean();
      G.row(b).tail(H) = c.colwise().mean();
    } else {
      G.row(b) = (hs + c).colwise().mean();
    }
    As[b] = std::move(a);
  }

  Mat<T> Mk = Mat<T>::Ones(nb, F);
  if (train_mode && cfg.dropout > 0.0) {
    const T keep_scale = static_cast<T>(1.0 / (1.0 - cfg.dropout));
    for (Eigen::Index b = 0; b < nb; ++b) {
      Rng rng(derive_seed(dropout_seed, "dropout", r0 + static_cast<std::size_t>(b)));
      for (Eigen::Index k = 0; k < F; ++k) Mk(b, k) = rng.uniform() >= cfg.dropout ? keep_scale : T(0);
    }
  }
  const Mat<T> Gd = G.cwiseProduct(Mk);
  Mat<T> A1 = Gd * P.W1;
  A1.rowwise() += P.b1.row(0);
  const Mat<T> U = A1.cwiseMax(T(0));
  Mat<T> Pr = U * P.W2;
  Pr.rowwise() += P.b2.row(0);
  row_softmax(Pr);
  if (probs) probs->middleRows(static_cast<Eigen::Index>(r0), nb) = Pr;

  double loss = 0.0;
  if (!labels) return loss;
  Mat<T> dLg = Mat<T>::Zero(nb, static_cast<Eigen::Index>(kNumClasses));
  for (Eigen::Index b = 0; b < nb; ++b) {
    const auto y = label_code(labels[r0 + static_cast<std::size_t>(b)]);
    const double py = static_cast<double>(Pr(b, y));
    loss += -std::log(std::max(py, kLogClamp));
    if (py >= kLogClamp) {
      dLg.row(b) = Pr.row(b) * static_cast<T>(loss_scale);
      dLg(b, y) -= static_cast<T>(loss_scale);
    }
  }
  if (!grads) return loss;

  auto& g = *grads;
  g.W2 += U.transpose() * dLg;
  g.b2 += dLg.colwise().sum();
  const Mat<T> dA1 = (dLg * P.W2.transpose()).cwiseProduct((A1.array() > T(0)).template cast<T>().matrix());
  g.W1 += Gd.transpose() * dA1;
  g.b1 += dA1.colwise().sum();
  const Mat<T> dG = (dA1 * P.W1.transpose()).cwiseProduct(Mk);

  Mat<T> dHall = Mat<T>::Zero(L * nb, H);
  for (Eigen::Index b = 0; b < nb; ++b) {
    const auto l = static_cast<Eigen::Index>(len[b]);
    const T inv_l = T(1) / static_cast<T>(l);
    const Mat<T>& hs = Hs[b];
    const Mat<T>& a = As[b];
    Eigen::Matrix<T, 1, Eigen::Dynamic> dh_direct, dc;
    if (concat) {
      dh_direct = dG.row(b).head(H) * inv_l;
      dc = dG.row(b).tail(H) * inv_l;
    } else {
      dh_direct = dG.row(b) * inv_l;
      dc = dh_direct;
    }
    const Mat<T> dC = Mat<T>::Ones(l, 1) * dc;
    const Mat<T> dA = dC * hs.transpose();
    Mat<T> dHs = Mat<T>::Ones(l, 1) * dh_direct + a.transpose() * dC;
    const auto rowdot = (a.array() * dA.array()).rowwise().sum();
    Mat<T> dS = (a.array() * (dA.array().colwise() - rowdot)).matrix();
    dHs += ((dS + dS.transpose()) * hs) * inv_sqrt_h;
    for (Eigen::Index t = 0; t < l; ++t) dHall.row(t * nb + b) = dHs.row(t);
  }

  Mat<T> dAz(L * nb, H), dAr(L * nb, H), dAn(L * nb, H);
  Mat<T> dh_next = Mat<T>::Zero(nb, H);
  for (Eigen::Index t = L - 1; t >= 0; --t) {
    const Mat<T> hp = t == 0 ? Mat<T>::Zero(nb, H) : Mat<T>(Hall.middleRows((t - 1) * nb, nb));
    const auto z = Zs.middleRows(t * nb, nb).array();
    const auto r = Rs.middleRows(t * nb, nb).array();
    const auto n = Ns.middleRows(t * nb, nb).array();
    const Mat<T> dh = dHall.middleRows(t * nb, nb) + dh_next;
    const Mat<T> daz = (dh.array() * (n - hp.array()) * z * (T(1) - z)).matrix();
    const Mat<T> dan = (dh.array() * z * (T(1) - n * n)).matrix();
    const Mat<T> dq = dan * P.Un.transpose();
    const Mat<T> dar = (dq.array() * hp.array() * r * (T(1) - r)).matrix();
    const Mat<T> q = (r * hp.array()).matrix();
    g.Uz += hp.transpose() * daz;
    g.Ur += hp.transpose() * dar;
    g.Un += q.transpose() * dan;
    dAz.middleRows(t * nb, nb) = daz;
    dAr.middleRows(t * nb, nb) = dar;
    dAn.middleRows(t * nb, nb) = dan;
    dh_next = (dh.array() * (T(1) - z) + dq.array() * r).matrix() + daz * P.Uz.transpose() + dar * P.Ur.transpose();
  }
  g.bz += dAz.colwise().sum();
  g.br += dAr.colwise().sum();
  g.bn += dAn.colwise().sum();
  g.Wz += X.transpose() * dAz;
  g.Wr += X.transpose() * dAr;
  g.Wn += X.transpose() * dAn;
  if (!cfg.freeze_embedding) {
    const Mat<T> dX = dAz * P.Wz.transpose() + dAr * P.Wr.transpose() + dAn * P.Wn.transpose();
    for (Eigen::Index b = 0; b < nb; ++b) {
      for (std::size_t t = 0; t < len[b]; ++t) {
        const auto idx = batch.at(r0 + static_cast<std::size_t>(b), t);
        if (idx != embed::kPad) g.embedding.row(idx) += dX.row(static_cast<Eigen::Index>(t) * nb + b);
      }
    }
  }
  return loss;
}

template <typename T>
void check_inputs(const GraceModelT<T>& model, const Batch& batch) {
  if (batch.rows == 0) throw ValidationError("empty batch");
  if (batch.indices.size() != batch.rows * batch.max_len || batch.mask.size() != batch.indices.size()) {
    throw ValidationError("batch arrays are inconsistent with its shape");
  }
  if (model.params.embedding.rows() != static_cast<Eigen::Index>(model.vocab.size())) {
    throw ValidationError("embedding rows do not match the vocabulary");
  }
}

}  // namespace

template <typename T>
Mat<T> forward(const GraceModelT<T>& model, const Batch& batch, bool train_mode, std::uint64_t dropout_seed) {
  check_inputs(model, batch);
  Mat<T> probs(static_cast<Eigen::Index>(batch.rows), static_cast<Eigen::Index>(kNumClasses));
  for (std::size_t r0 = 0; r0 < batch.rows; r0 += kChunkRows) {
    run_chunk<T>(model, batch, r0, std::min(batch.rows, r0 + kChunkRows), nullptr, 0.0, train_mode, dropout_seed,
                 nullptr, &probs);
  }
  return probs;
}

template <typename T>
LossAndGrad<T> loss_and_gradients(const GraceModelT<T>& model, const Batch& batch, const std::vector<Label>& labels,
                                  std::uint64_t dropout_seed, bool train_mode) {
  check_inputs(model, batch);
  if (labels.size() != batch.rows) throw ValidationError("label count does not match batch rows");
  LossAndGrad<T> out;
  out.grads.resize_like(model.params);
  const double scale = 1.0 / static_cast<double>(batch.rows);
  for (std::size_t r0 = 0; r0 < batch.rows; r0 += kChunkRows) {
    out.loss += run_chunk<T>(model, batch, r0, std::min(batch.rows, r0 + kChunkRows), labels.data(), scale, train_mode,
                             dropout_seed, &out.grads, nullptr);
  }
  out.loss *= scale;
  for (auto& [name, p] : out.grads.named()) {
    if (!p->allFinite()) throw RuntimeError("non-finite gradient in " + name);
  }
  return out;
}

template <typename T>
double loss_only(const GraceModelT<T>& model, const Batch& batch, const std::vector<Label>& labels,
                 std::uint64_t dropout_seed, bool train_mode) {
  check_inputs(model, batch);
  if (labels.size() != batch.rows) throw ValidationError("label count does not match batch rows");
  double loss = 0.0;
  for (std::size_t r0 = 0; r0 < batch.rows; r0 += kChunkRows) {
    loss += run_chunk<T>(model, batch, r0, std::min(batch.rows, r0 + kChunkRows), labels.data(), 0.0, train_mode,
                         dropout_seed, nullptr, nullptr);
  }
  return loss / static_cast<double>(batch.rows);
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (patience < 1) throw ValidationError("patience must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("learning rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("Adam betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ValidationError("Adam eps must be > 0");
  if (!(clip_norm > 0.0)) throw ValidationError("clip_norm must be > 0");
}

std::string TrainTrace::to_text() const {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,val_accuracy\n";
  for (std::size_t e = 0; e < train_loss.size(); ++e) {
    out << (e + 1) << ',' << fmt_double(train_loss[e]) << ',' << fmt_double(val_loss[e]) << ','
        << fmt_double(val_accuracy[e]) << '\n';
  }
  out << "stopped_epoch=" << stopped_epoch << "\nbest_epoch=" << best_epoch
      << "\nearly_stopped=" << (early_stopped ? "true" : "false") << '\n';
  return out.str();
}

EarlyStopping::EarlyStopping(std::size_t patience) : patience_(patience) {
  if (patience < 1) throw ValidationError("patience must be >= 1");
}

bool EarlyStopping::observe(double val_loss) {
  ++seen_;
  improved_last_ = seen_ == 1 || val_loss < best_;
  if (improved_last_) {
    best_ = val_loss;
    best_epoch_ = seen_;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return since_best_ >= patience_;
}

namespace {

template <typename T>
std::pair<double, double> evaluate(const GraceModelT<T>& model, const Dataset& data) {
  const Mat<T> probs = forward(model, data.inputs, false, 0);
  double loss = 0.0;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const auto y = data.labels[static_cast<std::size_t>(i)];
    loss += -std::log(std::max(static_cast<double>(probs(i, label_code(y))), kLogClamp));
    std::array<double, kNumClasses> p{};
    for (std::size_t c = 0; c < kNumClasses; ++c) p[c] = static_cast<double>(probs(i, static_cast<Eigen::Index>(c)));
    if (argmax_label(p) == y) ++correct;
  }
  const auto n = static_cast<double>(probs.rows());
  return {loss / n, static_cast<double>(correct) / n};
}

}  // namespace

template <typename T>
TrainTrace train(GraceModelT<T>& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                 const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.inputs.rows == 0 || val_set.inputs.rows == 0) throw ValidationError("train and validation sets must be non-empty");
  if (train_set.labels.size() != train_set.inputs.rows || val_set.labels.size() != val_set.inputs.rows) {
    throw ValidationError("label counts do not match inputs");
  }

  TrainTrace trace;
  EarlyStopping stopper(config.patience);
  GraceParams<T> best = model.params;
  GraceParams<T> m1, m2;
  m1.resize_like(model.params);
  m2.resize_like(model.params);
  std::uint64_t step = 0;

  const std::size_t N = train_set.inputs.rows;
  std::vector<std::size_t> order(N);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler(derive_seed(config.seed, "shuffle", epoch));
    shuffler.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t s = 0; s < N; s += config.batch_size, ++batch_no) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(s),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(N, s + config.batch_size)));
      const Batch batch = train_set.inputs.slice(rows);
      std::vector<Label> labels;
      labels.reserve(rows.size());
      for (auto r : rows) labels.push_back(train_set.labels[r]);

      LossAndGrad<T> lg;
      try {
        lg = loss_and_gradients(model, batch, labels, derive_seed(config.seed, "dropout", epoch, batch_no), true);
      } catch (const RuntimeError& e) {
        throw DivergenceError(std::string("training diverged in epoch ") + std::to_string(epoch) + ": " + e.what(),
                              trace);
      }
      if (!std::isfinite(lg.loss)) {
        throw DivergenceError("training loss is not finite in epoch " + std::to_string(epoch), trace);
      }
      loss_sum += lg.loss * static_cast<double>(rows.size());

      double norm2 = 0.0;
      for (auto& [name, g] : lg.grads.named()) norm2 += g->template cast<double>().squaredNorm();
      const double norm = std::sqrt(norm2);
      const T clip = norm > config.clip_norm ? static_cast<T>(config.clip_norm / norm) : T(1);

      ++step;
      const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
      const T c1 = static_cast<T>(1.0 - std::pow(config.beta1, static_cast<double>(step)));
      const T c2 = static_cast<T>(1.0 - std::pow(config.beta2, static_cast<double>(step)));
      const T lr = static_cast<T>(config.lr), eps = static_cast<T>(config.eps);
      auto params = model.params.named();
      auto grads = lg.grads.named();
      auto ms = m1.named();
      auto vs = m2.named();
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (model.config.freeze_embedding && params[i].first == "embedding") continue;
        auto g = (grads[i].second->array() * clip).eval();
        auto& m = *ms[i].second;
        auto& v = *vs[i].second;
        m = (b1 * m.array() + (T(1) - b1) * g).matrix();
        v = (b2 * v.array() + (T(1) - b2) * g.square()).matrix();
        *params[i].second -= (lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps)).matrix();
      }
      model.params.embedding.row(embed::kPad).setZero();
    }

    const auto [val_loss, val_acc] = evaluate(model, val_set);
    trace.train_loss.push_back(loss_sum / static_cast<double>(N));
    trace.val_loss.push_back(val_loss);
    trace.val_accuracy.push_back(val_acc);
    trace.stopped_epoch = epoch;
    if (!std::isfinite(val_loss)) throw DivergenceError("validation loss is not finite in epoch " + std::to_string(epoch), trace);

    const bool stop = stopper.observe(val_loss);
    if (stopper.improved_last()) best = model.params;
    trace.best_epoch = stopper.best_epoch();
    if (on_epoch) on_epoch(epoch, trace);
    if (stop) {
      trace.early_stopped = true;
      break;
    }
  }
  model.params = std::move(best);
  return trace;
}

// ---------------------------------------------------------------------------
// Inference and persistence

Label argmax_label(const std::array<double, kNumClasses>& probs) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < kNumClasses; ++c) {
    if (probs[c] > probs[best]) best = c;
  }
  return label_from_code(static_cast<int>(best));
}

std::vector<Prediction> predict(const GraceModel& model, const std::vector<std::vector<std::string>>& docs) {
  std::vector<Prediction> out;
  if (docs.empty()) return out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (docs[i].empty()) throw ValidationError("document " + std::to_string(i) + " has no tokens");
  }
  const auto probs = forward(model, encode(model.vocab, docs, model.config.max_len), false, 0);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Prediction p;
    for (std::size_t c = 0; c < kNumClasses; ++c) p.probs[c] = static_cast<double>(probs(i, static_cast<Eigen::Index>(c)));
    p.label = argmax_label(p.probs);
    out.push_back(p);
  }
  return out;
}

std::vector<Prediction> predict(const GraceModel& model, const std::vector<corpus::Review>& reviews) {
  std::vector<std::vector<std::string>> docs;
  std::vector<std::string> bad;
  for (const auto& r : reviews) {
    if (!r.tokens) throw ValidationError("review " + r.review_id + " is not tokenized");
    if (r.tokens->empty()) bad.push_back(r.review_id);
    docs.push_back(*r.tokens);
  }
  if (!bad.empty()) throw ValidationError("reviews with no tokens: " + join(bad, ", "));
  return predict(model, docs);
}

double accuracy(const GraceModel& model, const Dataset& data) { return evaluate(model, data).second; }

model_io::Container to_container(const GraceModel& model) {
  model_io::Container c;
  c.type = model_io::TypeTag::Grace;
  c.config = model.config.to_map();
  c.vocab = model.vocab.tokens();
  c.vocab_hash = model.vocab.hash();
  for (auto& [name, p] : model.params.named()) {
    model_io::Tensor t;
    t.name = name;
    t.rows = static_cast<std::uint32_t>(p->rows());
    t.cols = static_cast<std::uint32_t>(p->cols());
    t.data.assign(p->data(), p->data() + p->size());
    c.tensors.push_back(std::move(t));
  }
  return c;
}

GraceModel from_container(const model_io::Container& c) {
  if (c.type != model_io::TypeTag::Grace) throw ValidationError("model file is not a GRACE model");
  GraceModel m;
  m.config = GraceConfig::from_map(c.config);
  m.vocab = embed::Vocabulary::from_tokens(c.vocab);
  if (m.vocab.hash() != c.vocab_hash) throw ValidationError("model file vocabulary hash mismatch");

  const auto D = m.config.embed_dim, H = m.config.hidden, F = m.config.feature_dim(), K = m.config.dense;
  const std::map<std::string, std::pair<std::size_t, std::size_t>> shapes{
      {"embedding", {m.vocab.size(), D}}, {"gru.Wz", {D, H}},  {"gru.Wr", {D, H}},   {"gru.Wn", {D, H}},
      {"gru.Uz", {H, H}},                 {"gru.Ur", {H, H}},  {"gru.Un", {H, H}},   {"gru.bz", {1, H}},
      {"gru.br", {1, H}},                 {"gru.bn", {1, H}},  {"dense1.W", {F, K}}, {"dense1.b", {1, K}},
      {"output.W", {K, kNumClasses}},     {"output.b", {1, kNumClasses}}};
  if (c.tensors.size() != shapes.size()) throw ValidationError("model file has an unexpected tensor count");
  for (auto& [name, p] : m.params.named()) {
    const auto& t = c.tensor(name);
    const auto [rows, cols] = shapes.at(name);
    if (t.rows != rows || t.cols != cols) {
      throw ValidationError("tensor " + name + " has shape " + std::to_string(t.rows) + "x" + std::to_string(t.cols) +
                            ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    p->resize(t.rows, t.cols);
    std::copy(t.data.begin(), t.data.end(), p->data());
  }
  return m;
}

void save_model(const GraceModel& model, const std::filesystem::path& path) {
  model_io::write_file(to_container(model), path);
}

GraceModel load_model(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash) {
  auto c = model_io::read_file(path);
  if (expected_vocab_hash && c.vocab_hash != *expected_vocab_hash) {
    throw ValidationError("model vocabulary hash does not match the expected vocabulary");
  }
  return from_container(c);
}

// ---------------------------------------------------------------------------

template struct GraceParams<float>;
template struct GraceParams<double>;
template struct GraceModelT<float>;
template struct GraceModelT<double>;
template GraceModelT<double> GraceModelT<float>::cast<double>() const;
template GraceModelT<float> GraceModelT<double>::cast<float>() const;
template GraceModelT<float> GraceModelT<float>::cast<float>() const;
template GraceModelT<double> GraceModelT<double>::cast<double>() const;

template Mat<float> forward(const GraceModelT<float>&, const Batch&, bool, std::uint64_t);
template Mat<double> forward(const GraceModelT<double>&, const Batch&, bool, std::uint64_t);
template LossAndGrad<float> loss_and_gradients(const GraceModelT<float>&, const Batch&, const std::vector<Label>&,
                                               std::uint64_t, bool);
template LossAndGrad<double> loss_and_gradients(const GraceModelT<double>&, const Batch&, const std::vector<Label>&,
                                                std::uint64_t, bool);
template double loss_only(const GraceModelT<float>&, const Batch&, const std::vector<Label>&, std::uint64_t, bool);
template double loss_only(const GraceModelT<double>&, const Batch&, const std::vector<Label>&, std::uint64_t, bool);
template TrainTrace train(GraceModelT<float>&, const Dataset&, const Dataset&, const TrainConfig&, const EpochCallback&);
template TrainTrace train(GraceModelT<double>&, const Dataset&, const Dataset&, const TrainConfig&, const EpochCallback&);

}  // namespace sensor::grace
