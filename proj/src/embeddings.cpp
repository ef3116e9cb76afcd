#include "sensor/embeddings.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace sensor::embed {

Vocabulary::Vocabulary() {
  tokens_ = {kPadToken, kUnkToken};
  freq_ = {0, 0};
  index_ = {{kPadToken, kPad}, {kUnkToken, kUnk}};
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& corpus, std::size_t min_count) {
  std::map<std::string, std::uint64_t> counts;
  std::size_t total = 0;
  for (const auto& doc : corpus) {
    for (const auto& t : doc) {
      ++counts[t];
      ++total;
    }
  }
  if (total == 0) throw ValidationError("cannot build a vocabulary from an empty corpus");
  if (min_count == 0) min_count = 1;

  std::vector<std::pair<std::string, std::uint64_t>> kept;
  std::uint64_t unk = 0;
  for (auto& [tok, n] : counts) {
    if (tok == kPadToken || tok == kUnkToken) {
      unk += n;
    } else if (n >= min_count) {
      kept.emplace_back(tok, n);
    } else {
      unk += n;
    }
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary v;
  v.min_count_ = min_count;
  v.freq_[kUnk] = unk;
  for (auto& [tok, n] : kept) {
    v.index_.emplace(tok, static_cast<std::int32_t>(v.tokens_.size()));
    v.tokens_.push_back(tok);
    v.freq_.push_back(n);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken) {
    throw ValidationError("vocabulary must start with <pad> and <unk>");
  }
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  for (auto& t : tokens) {
    if (!v.index_.emplace(t, static_cast<std::int32_t>(v.tokens_.size())).second) {
      throw ValidationError("duplicate vocabulary token '" + t + "'");
    }
    v.tokens_.push_back(std::move(t));
  }
  v.freq_.assign(v.tokens_.size(), 0);
  return v;
}

std::int32_t Vocabulary::index_of(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end() || it->second == kPad) return kUnk;
  return it->second;
}

std::uint64_t Vocabulary::hash() const { return fnv1a64(join(tokens_, "\n")); }

std::vector<std::int32_t> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<std::int32_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(index_of(t));
  return out;
}

void CbowConfig::validate() const {
  if (dim == 0) throw ValidationError("cbow dim must be >= 1");
  if (window == 0) throw ValidationError("cbow window must be >= 1");
  if (negatives == 0) throw ValidationError("cbow negatives must be >= 1");
  if (!(initial_lr > 0.0) || !(min_lr >= 0.0) || min_lr > initial_lr) {
    throw ValidationError("cbow learning rates must satisfy 0 <= min_lr <= initial_lr, initial_lr > 0");
  }
}

RowMatrixD initial_input_matrix(std::size_t vocab_size, std::size_t dim, std::uint64_t seed) {
  RowMatrixD m(vocab_size, dim);
  Rng rng(derive_seed(seed, "cbow-init"));
  const double bound = 0.5 / static_cast<double>(dim);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
  }
  m.row(kPad).setZero();
  return m;
}

NoiseSampler::NoiseSampler(const std::vector<std::uint64_t>& frequencies, double power) {
  cumulative_.resize(frequencies.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < frequencies.size(); ++i) {
    if (i != static_cast<std::size_t>(kPad) && frequencies[i] > 0) {
      acc += std::pow(static_cast<double>(frequencies[i]), power);
    }
    cumulative_[i] = acc;
  }
  if (acc <= 0.0) throw ValidationError("noise distribution has no mass");
}

std::int32_t NoiseSampler::sample(Rng& rng) const {
  const double u = rng.uniform() * cumulative_.back();
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  if (it == cumulative_.end()) --it;
  return static_cast<std::int32_t>(it - cumulative_.begin());
}

double NoiseSampler::probability(std::int32_t index) const {
  const auto i = static_cast<std::size_t>(index);
  const double lo = i == 0 ? 0.0 : cumulative_[i - 1];
  return (cumulative_[i] - lo) / cumulative_.back();
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// -log s(x), stable for large |x|.
double neg_log_sigmoid(double x) { return x > 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x)); }

struct ExampleGrad {
  double loss = 0.0;
  Eigen::VectorXd h;
  Eigen::VectorXd grad_h;
  // dL/d(out row target_k) = coef_k * h
  std::vector<std::pair<std::int32_t, double>> out_coef;
};

void example_grad(const RowMatrixD& in, const RowMatrixD& out, const std::vector<std::int32_t>& context,
                  std::int32_t center, const std::vector<std::int32_t>& negatives, ExampleGrad& g) {
  const auto dim = in.cols();
  g.h.setZero(dim);
  for (auto c : context) g.h += in.row(c).transpose();
  g.h /= static_cast<double>(context.size());
  g.grad_h.setZero(dim);
  g.out_coef.clear();
  g.loss = 0.0;

  auto target = [&](std::int32_t idx, double label) {
    const double s = out.row(idx).dot(g.h);
    g.loss += label > 0 ? neg_log_sigmoid(s) : neg_log_sigmoid(-s);
    const double coef = sigmoid(s) - label;
    g.grad_h += coef * out.row(idx).transpose();
    g.out_coef.emplace_back(idx, coef);
  };
  target(center, 1.0);
  for (auto n : negatives) target(n, 0.0);
}

}  // namespace

double cbow_example_loss(const RowMatrixD& in, const RowMatrixD& out, const std::vector<std::int32_t>& context,
                         std::int32_t center, const std::vector<std::int32_t>& negatives, RowMatrixD* grad_in,
                         RowMatrixD* grad_out) {
  if (context.empty()) throw ValidationError("cbow example needs a non-empty context");
  ExampleGrad g;
  example_grad(in, out, context, center, negatives, g);
  if (grad_in) {
    grad_in->setZero(in.rows(), in.cols());
    for (auto c : context) grad_in->row(c) += g.grad_h.transpose() / static_cast<double>(context.size());
  }
  if (grad_out) {
    grad_out->setZero(out.rows(), out.cols());
    for (auto& [idx, coef] : g.out_coef) grad_out->row(idx) += coef * g.h.transpose();
  }
  return g.loss;
}

CbowResult train_cbow(const std::vector<std::vector<std::string>>& corpus, const CbowConfig& config) {
  config.validate();
  CbowResult result;
  auto& emb = result.embeddings;
  emb.vocab = Vocabulary::build(corpus, config.min_count);
  const auto V = emb.vocab.size();
  const auto dim = config.dim;

  std::vector<std::vector<std::int32_t>> docs;
  docs.reserve(corpus.size());
  std::size_t examples = 0;
  for (const auto& d : corpus) {
    docs.push_back(emb.vocab.encode(d));
    if (d.size() >= 2) examples += d.size();
  }
  result.trace.examples_per_epoch = examples;

  RowMatrixD in = initial_input_matrix(V, dim, config.seed);
  RowMatrixD out = RowMatrixD::Zero(V, dim);
  NoiseSampler noise(emb.vocab.frequencies());
  Rng rng(derive_seed(config.seed, "cbow-negatives"));

  const double total = static_cast<double>(config.epochs * examples);
  std::size_t done = 0;
  std::vector<std::int32_t> context;
  std::vector<std::int32_t> negs;
  ExampleGrad g;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (const auto& doc : docs) {
      if (doc.size() < 2) continue;
      for (std::size_t i = 0; i < doc.size(); ++i) {
        const double lr =
            std::max(config.min_lr, config.initial_lr - (config.initial_lr - config.min_lr) * done / std::max(1.0, total));
        ++done;
        context.clear();
        const std::size_t lo = i >= config.window ? i - config.window : 0;
        const std::size_t hi = std::min(doc.size(), i + config.window + 1);
        for (std::size_t j = lo; j < hi; ++j) {
          if (j != i) context.push_back(doc[j]);
        }
        const std::int32_t center = doc[i];
        negs.clear();
        for (std::size_t k = 0; k < config.negatives; ++k) {
          for (int attempt = 0; attempt < 16; ++attempt) {
            auto n = noise.sample(rng);
            if (n != center) {
              negs.push_back(n);
              break;
            }
          }
        }

        example_grad(in, out, context, center, negs, g);
        loss_sum += g.loss;
        for (auto& [idx, coef] : g.out_coef) out.row(idx) -= lr * coef * g.h.transpose();
        const double scale = lr / static_cast<double>(context.size());
        for (auto c : context) in.row(c) -= scale * g.grad_h.transpose();
      }
    }
    if (!std::isfinite(loss_sum)) throw RuntimeError("cbow training diverged in epoch " + std::to_string(epoch + 1));
    result.trace.epoch_loss.push_back(examples ? loss_sum / static_cast<double>(examples) : 0.0);
  }

  in.row(kPad).setZero();
  emb.matrix = in.cast<float>();
  return result;
}

LookupResult lookup(const EmbeddingMatrix& emb, const std::vector<std::string>& tokens, std::size_t max_len) {
  LookupResult r;
  r.indices.assign(max_len, kPad);
  r.mask.assign(max_len, 0);
  r.length = std::min(tokens.size(), max_len);
  r.embedded = Eigen::MatrixXf::Zero(static_cast<Eigen::Index>(emb.dim()), static_cast<Eigen::Index>(max_len));
  for (std::size_t i = 0; i < r.length; ++i) {
    const auto idx = emb.vocab.index_of(tokens[i]);
    r.indices[i] = idx;
    r.mask[i] = 1;
    r.embedded.col(static_cast<Eigen::Index>(i)) = emb.matrix.row(idx).transpose();
  }
  return r;
}

namespace {

void append_float(std::string& out, float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

}  // namespace

std::string format_embeddings(const EmbeddingMatrix& emb) {
  std::string out;
  out += std::to_string(emb.vocab.size()) + " " + std::to_string(emb.dim()) + "\n";
  for (std::size_t i = 0; i < emb.vocab.size(); ++i) {
    out += emb.vocab.token(static_cast<std::int32_t>(i));
    for (std::size_t j = 0; j < emb.dim(); ++j) {
      out += ' ';
      append_float(out, emb.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
    out += '\n';
  }
  return out;
}

void save_embeddings(const EmbeddingMatrix& emb, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeError("cannot write " + path.string());
  f << format_embeddings(emb);
  if (!f) throw RuntimeError("write failed: " + path.string());
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw ValidationError(path.string() + ": empty embedding file");
  std::size_t V = 0, dim = 0;
  {
    std::istringstream hdr(line);
    if (!(hdr >> V >> dim) || V < 2 || dim == 0) throw ValidationError(path.string() + ": bad header '" + line + "'");
  }
  std::vector<std::string> tokens;
  RowMatrixF m(V, dim);
  for (std::size_t i = 0; i < V; ++i) {
    if (!std::getline(f, line)) throw ValidationError(path.string() + ": expected " + std::to_string(V) + " rows");
    auto parts = split_whitespace(line);
    if (parts.size() != dim + 1) {
      throw ValidationError(path.string() + ": row " + std::to_string(i + 1) + " has " +
                            std::to_string(parts.size() - 1) + " values, expected " + std::to_string(dim));
    }
    tokens.push_back(parts[0]);
    for (std::size_t j = 0; j < dim; ++j) {
      float v = 0;
      const auto& s = parts[j + 1];
      auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw ValidationError(path.string() + ": bad value '" + s + "' in row " + std::to_string(i + 1));
      }
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  }
  EmbeddingMatrix emb;
  emb.vocab = Vocabulary::from_tokens(std::move(tokens));
  if (!m.row(kPad).isZero(0)) throw ValidationError(path.string() + ": PAD row must be zero");
  emb.matrix = std::move(m);
  return emb;
}

double cosine(const EmbeddingMatrix& emb, const std::string& a, const std::string& b) {
  const auto ra = emb.matrix.row(emb.vocab.index_of(a)).cast<double>();
  const auto rb = emb.matrix.row(emb.vocab.index_of(b)).cast<double>();
  const double na = ra.norm(), nb = rb.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return ra.dot(rb) / (na * nb);
}

}  // namespace sensor::embed
