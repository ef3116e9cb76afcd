#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sensor/common.hpp"
#include "sensor/corpus.hpp"
#include "sensor/embeddings.hpp"
#include "sensor/model_io.hpp"

namespace sensor::grace {

// How per-step GRU outputs and attention contexts are merged before pooling.
enum class Combine { Concat, Sum };

struct GraceConfig {
  std::size_t embed_dim = 200;
  std::size_t hidden = 896;
  std::size_t dense = 256;
  std::size_t max_len = 150;
  double dropout = 0.5;
  Combine combine = Combine::Concat;
  bool freeze_embedding = false;

  std::size_t feature_dim() const { return combine == Combine::Concat ? 2 * hidden : hidden; }
  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static GraceConfig from_map(const std::map<std::string, std::string>& m);
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// GRU: z = s(x Wz + h Uz + bz), r = s(x Wr + h Ur + br),
//      n = tanh(x Wn + (r*h) Un + bn), h' = (1-z)*h + z*n.
template <typename T>
struct GraceParams {
  Mat<T> embedding;
  Mat<T> Wz, Wr, Wn;
  Mat<T> Uz, Ur, Un;
  Mat<T> bz, br, bn;
  Mat<T> W1, b1;
  Mat<T> W2, b2;

  // Declaration order; also the order in the model file.
  std::vector<std::pair<std::string, Mat<T>*>> named();
  std::vector<std::pair<std::string, const Mat<T>*>> named() const;
  void resize_like(const GraceParams& other);
  void set_zero();
};

template <typename T>
struct GraceModelT {
  GraceConfig config;
  embed::Vocabulary vocab;
  GraceParams<T> params;

  // Glorot-uniform weights, zero biases. Embedding copied from pretrained when
  // given (its vocabulary is adopted), else seeded uniform in +-0.5/dim.
  static GraceModelT initialize(const GraceConfig& config, const embed::Vocabulary& vocab, std::uint64_t seed,
                                const embed::EmbeddingMatrix* pretrained = nullptr);

  std::size_t parameter_count() const;

  template <typename U>
  GraceModelT<U> cast() const;
};

using GraceModel = GraceModelT<float>;

// Index sequences, row-major rows x max_len, post-padded with PAD.
struct Batch {
  std::size_t rows = 0;
  std::size_t max_len = 0;
  std::vector<std::int32_t> indices;
  std::vector<std::uint8_t> mask;

  std::int32_t at(std::size_t r, std::size_t t) const { return indices[r * max_len + t]; }
  // Number of valid steps in row r. Throws if the mask is not a prefix or disagrees with PAD.
  std::size_t length(std::size_t r) const;
  Batch slice(const std::vector<std::size_t>& rows) const;
};

Batch encode(const embed::Vocabulary& vocab, const std::vector<std::vector<std::string>>& docs, std::size_t max_len);

struct Dataset {
  Batch inputs;
  std::vector<Label> labels;
};

Dataset make_dataset(const embed::Vocabulary& vocab, const std::vector<corpus::Review>& reviews, std::size_t max_len);

// Probabilities, rows x 3. Dropout applies only in train_mode.
template <typename T>
Mat<T> forward(const GraceModelT<T>& model, const Batch& batch, bool train_mode = false, std::uint64_t dropout_seed = 0);

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  GraceParams<T> grads;
};

// Mean clamped cross-entropy over the batch and its gradient for every parameter.
template <typename T>
LossAndGrad<T> loss_and_gradients(const GraceModelT<T>& model, const Batch& batch, const std::vector<Label>& labels,
                                  std::uint64_t dropout_seed, bool train_mode = true);

template <typename T>
double loss_only(const GraceModelT<T>& model, const Batch& batch, const std::vector<Label>& labels,
                 std::uint64_t dropout_seed, bool train_mode = true);

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 50;
  std::size_t batch_size = 256;
  std::size_t patience = 3;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TrainTrace {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_accuracy;
  std::size_t stopped_epoch = 0;  // 1-based, last epoch run
  std::size_t best_epoch = 0;     // 1-based
  bool early_stopped = false;

  std::string to_text() const;
  bool operator==(const TrainTrace&) const = default;
};

// Validation-loss bookkeeping. An epoch improves only with a strictly lower loss.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience);
  // Returns true when training should stop after this epoch.
  bool observe(double val_loss);
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t epochs_seen() const { return seen_; }
  bool improved_last() const { return improved_last_; }

 private:
  std::size_t patience_;
  std::size_t seen_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
  double best_ = 0.0;
  bool improved_last_ = false;
};

class DivergenceError : public RuntimeError {
 public:
  DivergenceError(const std::string& what, TrainTrace trace) : RuntimeError(what), trace(std::move(trace)) {}
  TrainTrace trace;
};

using EpochCallback = std::function<void(std::size_t epoch, const TrainTrace& trace)>;

// Adam with global-norm clipping; per-epoch seeded shuffle; the model ends
// holding the best-epoch parameters.
template <typename T>
TrainTrace train(GraceModelT<T>& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config,
                 const EpochCallback& on_epoch = {});

struct Prediction {
  Label label = Label::PFR;
  std::array<double, kNumClasses> probs{};
};

// argmax with ties going to the lower class code.
Label argmax_label(const std::array<double, kNumClasses>& probs);

std::vector<Prediction> predict(const GraceModel& model, const std::vector<std::vector<std::string>>& docs);
// Reviews must carry tokens.
std::vector<Prediction> predict(const GraceModel& model, const std::vector<corpus::Review>& reviews);

double accuracy(const GraceModel& model, const Dataset& data);

model_io::Container to_container(const GraceModel& model);
GraceModel from_container(const model_io::Container& c);
void save_model(const GraceModel& model, const std::filesystem::path& path);
// Throws ValidationError on a wrong type tag, a corrupted file, or when
// expected_vocab_hash is given and differs.
GraceModel load_model(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash = {});

}  // namespace sensor::grace
