#pragma once

#include "cam/autodiff.hpp"
#include "cam/classifier.hpp"
#include "cam/document.hpp"
#include "cam/layers.hpp"
#include "cam/text_features.hpp"
#include "cam/vocabulary.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cam {

// ---------------------------------------------------------------------------
// Prompts

std::vector<int> format_prompt(const Vocabulary& vocab, MetricClass metric, int topic,
                               std::span<const std::string> keywords,
                               std::span<const std::string> text = {});

struct ParsedPrompt {
  MetricClass metric = MetricClass::low;
  int topic = 0;
  std::vector<std::string> keywords;
  std::vector<int> text;  // ids after <sot>
};
ParsedPrompt parse_prompt(const Vocabulary& vocab, std::span<const int> ids);

// ---------------------------------------------------------------------------
// Model

enum class AttentionMode { off, additive, replace };
std::string_view attention_mode_name(AttentionMode m);
AttentionMode parse_attention_mode(std::string_view name);

struct TransformerConfig {
  int layers = 4;
  int heads = 4;
  int dim = 128;
  int vocab_size = 0;
  int max_len = 256;
  int control_dim = 32;
  AttentionMode attention = AttentionMode::additive;
  bool norm_injection = true;
  bool embedding_injection = true;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static TransformerConfig from_json(const nlohmann::json& j);
};

// Which injection points a forward pass uses.
struct Injections {
  bool embedding = true;
  bool norm = true;
  AttentionMode attention = AttentionMode::additive;

  static Injections none() { return {false, false, AttentionMode::off}; }
};

// Multi-head causal self-attention. `eta` (1 x d) is the control query term:
// added to every query (additive), used as every query (replace) or ignored.
struct AttentionWeights {
  Var wq, wk, wv, wo;  // d x d
};
Var controlled_attention(const Var& x, const AttentionWeights& w, const Var& eta,
                         AttentionMode mode, int heads);

// gamma * (x - mean) / sqrt(var + eps) + beta, per row; gamma, beta are 1 x d.
Var controlled_layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

class Transformer {
 public:
  explicit Transformer(TransformerConfig cfg);
  Transformer(Transformer&&) = default;
  Transformer& operator=(Transformer&&) = default;

  const TransformerConfig& config() const { return cfg_; }
  Injections default_injections() const;

  // Per-position next-token logits, n x vocab.
  Var forward(Tape& tape, std::span<const int> ids, MetricClass y) const;
  Var forward(Tape& tape, std::span<const int> ids, MetricClass y, const Injections& inj) const;
  Matrix logits(std::span<const int> ids, MetricClass y) const;
  Matrix logits(std::span<const int> ids, MetricClass y, const Injections& inj) const;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  void save(const std::filesystem::path& dir, const Vocabulary& vocab) const;
  static std::pair<Transformer, Vocabulary> load(const std::filesystem::path& dir);

 private:
  struct Norm {
    const Parameter *gamma, *beta, *gamma_map, *beta_map;
  };
  struct Block {
    Norm ln1, ln2;
    const Parameter *wq, *wk, *wv, *wo, *eta, *eta_bias;
    Linear fc1, fc2;
  };

  Norm make_norm(const std::string& name);
  Var norm(Tape& t, const Norm& n, const Var& x, const Var& c, bool inject) const;

  TransformerConfig cfg_;
  ParameterSet params_;
  const Parameter* tok_ = nullptr;
  const Parameter* pos_ = nullptr;
  const Parameter* control_table_ = nullptr;
  const Parameter* control_input_ = nullptr;
  std::vector<Block> blocks_;
  Norm final_;
};

// ---------------------------------------------------------------------------
// Losses

// Mean next-token negative log-likelihood.
Var loss_lm(const Var& logits, std::span<const int> targets);
// -log P(y | distributions) under a frozen bag classifier's soft path; used
// for both the metric and the topic loss.
Var loss_metric(const Var& distributions, int y, const SoftBagView& clf);
Var loss_topic(const Var& distributions, int topic, const SoftBagView& clf);

enum class CausalMode { full, literal };
std::string_view causal_mode_name(CausalMode m);
CausalMode parse_causal_mode(std::string_view name);

// full: -sum_c p_c log q_c. literal: -p_y log q_y.
Var causal_cross_entropy(const RowVector& p, const Var& log_q, int y, CausalMode mode);
// p from the real text's features, q from the expected features of the
// generated distributions, both through the frozen feature classifier.
Var loss_causal(const FeatureVector& real, const Var& distributions, int y, const FeatureClassifier& fc,
                const SoftFeatureMap& map, CausalMode mode);

struct LossWeights {
  double g = 1.0;
  double metric = 1.0;
  double topic = 1.0;
  double causal = 1.0;
};

struct LossBundle {
  double l_g = 0.0;
  double l_metric = 0.0;
  double l_topic = 0.0;
  double l_causal = 0.0;
  LossWeights weights;

  double total() const;
  nlohmann::json to_json() const;
};

// ---------------------------------------------------------------------------
// Training and generation

struct GenExample {
  std::vector<int> prompt;   // through <sot>
  std::vector<int> article;  // without <eot>
  MetricClass y = MetricClass::low;
  int topic = 0;
  FeatureVector features;  // of the real article
  int eot = 0;
};

GenExample make_example(const Vocabulary& vocab, const Document& doc, const std::string& metric);

// Frozen feedback models. Null members disable the matching loss.
struct Feedback {
  const SoftBagView* metric = nullptr;
  const SoftBagView* topic = nullptr;
  const FeatureClassifier* causal = nullptr;
  const SoftFeatureMap* features = nullptr;
  const BagClassifier* reward = nullptr;  // hard classifier for REINFORCE
  const Vocabulary* vocab = nullptr;      // decodes REINFORCE samples
};

struct GenTrainConfig {
  LossWeights weights;
  int epochs = 3;
  double learning_rate = 1e-3;
  long max_steps = -1;  // stop after this many updates when >= 0
  CausalMode causal_mode = CausalMode::full;
  bool reinforce = false;  // sampled-sequence metric loss instead of the soft path
  double reinforce_decay = 0.9;
  std::uint64_t seed = 0;
};

struct GenTrainLog {
  std::vector<LossBundle> epochs;  // means over each epoch
  std::vector<LossBundle> steps;
};

// Losses of one teacher-forced example; adds gradients when the tape records.
LossBundle example_losses(Tape& tape, const Transformer& model, const GenExample& ex, const Feedback& fb,
                          const LossWeights& w, CausalMode mode, Var* total = nullptr);

// Summed next-token NLL over prompt + article + <eot> (cut to the context
// window) and the number of predicted tokens.
struct TokenNll {
  double sum = 0.0;
  long tokens = 0;
};
TokenNll sequence_nll(const Transformer& model, const GenExample& ex);

GenTrainLog train_generator(Transformer& model, std::span<const GenExample> data, const Feedback& fb,
                            const GenTrainConfig& cfg);

enum class DecodeMode { greedy, temperature };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int max_new_tokens = 128;
};
DecodeMode parse_decode_mode(std::string_view name);

// Continuation ids after `prompt`, stopping before <eot> or at the length cap.
std::vector<int> generate(const Transformer& model, const Vocabulary& vocab, std::span<const int> prompt,
                          MetricClass y, const DecodeConfig& cfg);

}  // namespace cam
