#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "sensor/common.hpp"

namespace sensor::embed {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kUnk = 1;
inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";

class Vocabulary {
 public:
  Vocabulary();

  // Indices: PAD 0, UNK 1, then kept tokens by (frequency desc, token asc).
  // Tokens seen fewer than min_count times count toward UNK.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, std::size_t min_count);
  // Rebuilds from an index-ordered token list (PAD and UNK first). Frequencies are unknown (0).
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::int32_t index_of(const std::string& token) const;
  const std::string& token(std::int32_t index) const { return tokens_.at(static_cast<std::size_t>(index)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::uint64_t frequency(std::int32_t index) const { return freq_.at(static_cast<std::size_t>(index)); }
  const std::vector<std::uint64_t>& frequencies() const { return freq_; }
  std::size_t min_count() const { return min_count_; }
  // FNV-1a over the newline-joined token list.
  std::uint64_t hash() const;

  std::vector<std::int32_t> encode(const std::vector<std::string>& tokens) const;

 private:
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> freq_;
  std::unordered_map<std::string, std::int32_t> index_;
  std::size_t min_count_ = 1;
};

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EmbeddingMatrix {
  Vocabulary vocab;
  RowMatrixF matrix;  // vocab.size() x dim, row kPad is zero

  std::size_t dim() const { return static_cast<std::size_t>(matrix.cols()); }
};

struct CbowConfig {
  std::size_t dim = 200;
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::size_t epochs = 5;
  double initial_lr = 0.025;
  double min_lr = 1e-4;
  std::size_t min_count = 2;
  std::uint64_t seed = 1;

  void validate() const;
};

// Seeded uniform init in (-0.5/dim, 0.5/dim); PAD row zero.
RowMatrixD initial_input_matrix(std::size_t vocab_size, std::size_t dim, std::uint64_t seed);

// Cumulative noise distribution over vocabulary indices, proportional to
// frequency^0.75. PAD has zero mass.
class NoiseSampler {
 public:
  explicit NoiseSampler(const std::vector<std::uint64_t>& frequencies, double power = 0.75);
  std::int32_t sample(Rng& rng) const;
  double probability(std::int32_t index) const;

 private:
  std::vector<double> cumulative_;
};

// Negative-sampling loss for one example:
//   h = mean of input rows over context
//   L = -log s(out[center].h) - sum_k log s(-out[neg_k].h)
// When grad_in / grad_out are given they receive dL/d(matrix), same shape as
// the inputs, accumulated over repeated indices.
double cbow_example_loss(const RowMatrixD& in, const RowMatrixD& out, const std::vector<std::int32_t>& context,
                         std::int32_t center, const std::vector<std::int32_t>& negatives,
                         RowMatrixD* grad_in = nullptr, RowMatrixD* grad_out = nullptr);

struct CbowTrace {
  std::vector<double> epoch_loss;  // mean example loss per epoch
  std::size_t examples_per_epoch = 0;
};

struct CbowResult {
  EmbeddingMatrix embeddings;
  CbowTrace trace;
};

// Single-threaded SGD, deterministic for a fixed seed.
CbowResult train_cbow(const std::vector<std::vector<std::string>>& corpus, const CbowConfig& config);

struct LookupResult {
  std::vector<std::int32_t> indices;  // max_len, post-padded with kPad
  std::vector<std::uint8_t> mask;     // 1 on real tokens
  std::size_t length = 0;
  Eigen::MatrixXf embedded;           // dim x max_len, PAD columns zero
};

// Head of the sequence is kept when longer than max_len.
LookupResult lookup(const EmbeddingMatrix& emb, const std::vector<std::string>& tokens, std::size_t max_len = 150);

// Text format: "vocab_size dim" header, then "token v1 ... vdim" per row in index order.
void save_embeddings(const EmbeddingMatrix& emb, const std::filesystem::path& path);
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
std::string format_embeddings(const EmbeddingMatrix& emb);

double cosine(const EmbeddingMatrix& emb, const std::string& a, const std::string& b);

}  // namespace sensor::embed
