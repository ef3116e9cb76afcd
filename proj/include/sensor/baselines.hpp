#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sensor/common.hpp"
#include "sensor/corpus.hpp"
#include "sensor/embeddings.hpp"
#include "sensor/model_io.hpp"

namespace sensor::baselines {

// (feature index, value), indices strictly increasing.
using SparseVec = std::vector<std::pair<std::uint32_t, double>>;

struct FeatureMatrix {
  std::size_t dim = 0;
  std::vector<SparseVec> rows;
};

SparseVec to_sparse(const Eigen::VectorXd& dense);

// idf(t) = ln((1 + N) / (1 + df_t)) + 1; value = raw count * idf, then L2-normalized.
class TfidfVectorizer {
 public:
  static TfidfVectorizer fit(const std::vector<std::vector<std::string>>& docs);
  static TfidfVectorizer from_parts(std::vector<std::string> terms, std::vector<double> idf, bool l2 = true);

  SparseVec transform(const std::vector<std::string>& tokens) const;
  FeatureMatrix transform_all(const std::vector<std::vector<std::string>>& docs) const;

  std::size_t dim() const { return terms_.size(); }
  const std::vector<std::string>& terms() const { return terms_; }
  const std::vector<double>& idf() const { return idf_; }
  double idf_of(const std::string& term) const;
  bool l2() const { return l2_; }

 private:
  std::vector<std::string> terms_;  // sorted
  std::vector<double> idf_;
  std::unordered_map<std::string, std::uint32_t> index_;
  bool l2_ = true;
};

// Mean of the rows of known (non-UNK) tokens; zero when none are known.
Eigen::VectorXd mean_embedding(const embed::EmbeddingMatrix& emb, const std::vector<std::string>& tokens);

enum class Loss { Log, Hinge };
std::string_view loss_name(Loss l);
Loss parse_loss(std::string_view s);

struct LinearConfig {
  Loss loss = Loss::Log;
  double lr = 0.01;
  double l2 = 1e-4;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
};

// One-vs-rest linear classifier over `classes` labels 0..classes-1.
// Step size at update t (0-based, counted over all epochs) is
// lr / (1 + t / n_samples).
struct LinearModel {
  LinearConfig config;
  std::size_t classes = 0;
  Eigen::MatrixXd W;  // classes x dim
  Eigen::VectorXd b;

  Eigen::VectorXd scores(const SparseVec& x) const;
  // Ties go to the lower class index.
  std::size_t predict(const SparseVec& x) const;
};

LinearModel train_linear(const FeatureMatrix& X, const std::vector<std::size_t>& y, std::size_t classes,
                         const LinearConfig& config);

// Stage 1: privacy-related (0) vs irrelevant (1). Stage 2: PFR (0) vs PB (1),
// trained on gold privacy-related rows only.
struct HierarchicalModel {
  LinearModel stage1;
  LinearModel stage2;

  Label predict(const SparseVec& x) const;
  // Pseudo-probabilities for ranking metrics:
  // (p_rel * p_pfr, p_rel * (1 - p_pfr), 1 - p_rel) with p = logistic(margin).
  std::array<double, kNumClasses> class_scores(const SparseVec& x) const;
};

HierarchicalModel train_hierarchical(const FeatureMatrix& X, const std::vector<Label>& y, const LinearConfig& config);

enum class Repr { Tfidf, CbowMean };
std::string_view repr_name(Repr r);
Repr parse_repr(std::string_view s);

struct BaselineOutput {
  Label label = Label::PFR;
  std::array<double, kNumClasses> scores{};
};

// Representation plus flat or hierarchical classifier.
struct BaselineModel {
  Repr repr = Repr::Tfidf;
  bool hierarchical = false;
  std::optional<TfidfVectorizer> tfidf;
  std::optional<embed::EmbeddingMatrix> embeddings;
  LinearModel flat;
  HierarchicalModel hier;

  SparseVec features(const std::vector<std::string>& tokens) const;
  std::vector<BaselineOutput> predict(const std::vector<std::vector<std::string>>& docs) const;
  std::vector<BaselineOutput> predict(const std::vector<corpus::Review>& reviews) const;
};

// Reviews need tokens and gold labels. CbowMean needs embeddings.
BaselineModel train_baseline(const std::vector<corpus::Review>& train, Repr repr, bool hierarchical,
                             const LinearConfig& config, const embed::EmbeddingMatrix* embeddings = nullptr);

model_io::Container to_container(const BaselineModel& model);
BaselineModel baseline_from_container(const model_io::Container& c);
void save_baseline(const BaselineModel& model, const std::filesystem::path& path);
BaselineModel load_baseline(const std::filesystem::path& path);

}  // namespace sensor::baselines
