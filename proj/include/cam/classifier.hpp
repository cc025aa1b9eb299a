#pragma once

#include "cam/autodiff.hpp"
#include "cam/causal.hpp"
#include "cam/layers.hpp"
#include "cam/text_features.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace cam {

struct BagConfig {
  std::uint32_t buckets = 1u << 18;
  int dim = 64;
  bool bigrams = true;
  std::uint64_t hash_seed = 0;
  std::vector<std::string> classes = {"low", "medium", "high"};
  int epochs = 5;
  double learning_rate = 0.01;
  double heldout_fraction = 0.1;
  std::uint64_t seed = 0;  // shuffling and held-out split
};

struct TrainReport {
  double final_loss = 0.0;  // mean training loss of the last epoch
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  long heldout_size = 0;
};

struct LabeledText {
  std::string text;
  int label = 0;
};

// Soft-input view of a BagClassifier over a closed vocabulary: the embedding
// row of every word entry and a 0/1 mask marking which entries are words.
// Vocabulary word entries grouped by hash bucket, in ascending bucket order.
// Hard and soft paths both accumulate over buckets in this order, so one-hot
// inputs reproduce the hard prediction bit for bit.
struct SoftBagView {
  struct Group {
    std::uint32_t bucket = 0;
    std::vector<Index> entries;
    RowVector embedding;
  };
  Index vocab_size = 0;
  int dim = 0;
  std::vector<Group> groups;
  Matrix head_weight;
  Matrix head_bias;
};

// fastText-style classifier: mean of hashed unigram/bigram embeddings, then a
// linear softmax head. Embedding rows are created lazily with a deterministic
// hash-seeded initialization, so only buckets seen in training use memory.
class BagClassifier {
 public:
  explicit BagClassifier(BagConfig cfg = {});

  static std::pair<BagClassifier, TrainReport> train(std::span<const LabeledText> data, const BagConfig& cfg);

  // Bucket ids of the text's unigrams, then (when enabled) its bigrams.
  std::vector<std::uint32_t> feature_ids(std::string_view text, bool with_bigrams) const;
  std::uint32_t bucket(std::string_view gram) const;

  RowVector predict(std::string_view text) const;
  RowVector predict_unigram(std::string_view text) const;
  // Log-probabilities; predict() is their exponential.
  RowVector log_predict(std::string_view text) const;
  RowVector log_predict_unigram(std::string_view text) const;
  int predict_class(std::string_view text) const;

  SoftBagView soft_view(std::span<const std::string> vocabulary) const;
  // Expected-unigram-embedding prediction from per-position distributions.
  RowVector predict_soft(const Matrix& distributions, const SoftBagView& view) const;

  const BagConfig& config() const { return cfg_; }
  int num_classes() const { return static_cast<int>(cfg_.classes.size()); }
  std::size_t active_rows() const { return rows_.size(); }

  void save(const std::filesystem::path& dir) const;
  static BagClassifier load(const std::filesystem::path& dir);

 private:
  RowVector init_row(std::uint32_t bucket) const;
  RowVector row(std::uint32_t bucket) const;
  RowVector predict_ids(std::span<const std::uint32_t> ids) const;
  RowVector log_predict_ids(std::span<const std::uint32_t> ids) const;

  BagConfig cfg_;
  std::unordered_map<std::uint32_t, RowVector> rows_;
  Matrix head_w_;  // d x C, zero-initialized
  RowVector head_b_;
};

// log P(. | distributions) on a tape, differentiable w.r.t. the distributions.
// `view` must outlive the backward pass.
Var soft_bag_log_probs(const Var& distributions, const SoftBagView& view);

struct FeatureClassifierConfig {
  std::vector<Feature> features;
  std::vector<std::string> classes = {"low", "medium", "high"};
  int hidden = 32;
  int epochs = 60;
  int batch_size = 16;
  double learning_rate = 5e-3;
  double heldout_fraction = 0.1;
  std::uint64_t seed = 0;
};

// Standardized selected features -> tanh MLP -> softmax.
class FeatureClassifier {
 public:
  static std::pair<FeatureClassifier, TrainReport> train(std::span<const FeatureVector> x, std::span<const int> labels,
                                                          const FeatureClassifierConfig& cfg);

  RowVector predict(const FeatureVector& v) const;
  // Full kNumFeatures-wide row (hard or soft counts) -> log-probabilities.
  Var log_probs(const Var& features) const;

  const FeatureClassifierConfig& config() const { return cfg_; }
  void save(const std::filesystem::path& dir) const;
  static FeatureClassifier load(const std::filesystem::path& dir);

 private:
  FeatureClassifier() = default;
  void build(Rng& rng);

  FeatureClassifierConfig cfg_;
  ParameterSet params_;
  Mlp net_;
  Matrix select_;  // kNumFeatures x k column selector
  Standardizer std_;
};

}  // namespace cam
