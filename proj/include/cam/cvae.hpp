#pragma once

#include "cam/autodiff.hpp"
#include "cam/causal.hpp"
#include "cam/layers.hpp"
#include "cam/vocabulary.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cam {

// Closed-form KL between diagonal Gaussians, summed over dimensions.
double gaussian_kl(const RowVector& mu_q, const RowVector& logvar_q, const RowVector& mu_p,
                   const RowVector& logvar_p);
Var gaussian_kl(const Var& mu_q, const Var& logvar_q, const Var& mu_p, const Var& logvar_p);

// sum_c q_c ln(q_c / p_c) with p floored at 1e-10; terms with q_c = 0 vanish.
double categorical_kl(const RowVector& q, const RowVector& p);
// Same from log-probabilities on a tape.
Var categorical_kl(const Var& log_q, const Var& log_p);

enum class CvaeVariant { noncausal, causal };
std::string_view cvae_variant_name(CvaeVariant v);
CvaeVariant parse_cvae_variant(std::string_view name);

// How y' is chosen at generation time.
enum class MetricChoice { force, argmax, sample };
MetricChoice parse_metric_choice(std::string_view name);

struct CvaeConfig {
  int vocab_size = 0;
  int embed_dim = 200;
  int sentence_dim = 300;  // bi-GRU output, half per direction
  int context_dim = 600;
  int decoder_dim = 400;
  int latent_dim = 64;
  int metric_embed_dim = 16;
  int hidden_dim = 128;  // width of the prior/recognition/metric/treatment MLPs
  int treatments = 0;    // number of causal features in t
  int max_len = 40;      // decoded tokens per sentence
  int sot = -1;          // decoder start, end and word-dropout ids
  int eot = -1;
  int unk = -1;
  std::uint64_t seed = 0;

  // Full-size defaults for `vocab`, with its special ids.
  static CvaeConfig for_vocabulary(const Vocabulary& vocab);

  void validate() const;
  nlohmann::json to_json() const;
  static CvaeConfig from_json(const nlohmann::json& j);
};

// One (context, next sentence, bucket, treatment vector) tuple, as ids.
struct CvaeExample {
  std::vector<std::vector<int>> context;
  std::vector<int> sentence;  // without <sot>/<eot>
  int y = 0;
  RowVector t;  // 1 x treatments, entries in {0, 1}
};

// Per-sentence examples: each sentence of a document's text is predicted from
// the document context plus the sentences before it (at most `window`).
// t holds the document's binarized causal features.
std::vector<CvaeExample> make_cvae_examples(const Vocabulary& vocab, const Document& doc, const std::string& metric,
                                            std::span<const FeatureEffect> causal, int window = 3);

// Relative weights of the loss terms. Zeroing metric_kl and treatment turns
// the causal bound into the non-causal one.
struct CvaeWeights {
  double kl_z = 1.0;
  double reconstruction = 1.0;
  double metric = 1.0;
  double metric_kl = 1.0;
  double treatment = 1.0;
};

struct CvaeTerms {
  double kl_z = 0.0;
  double reconstruction = 0.0;  // -log p(x | c, z, y'), summed over tokens
  double metric = 0.0;          // -log p(y' = y | c, z)
  double metric_kl = 0.0;       // KL(q(y' | t, x, c) || p(y' | c, z))
  double treatment = 0.0;       // -log p(t | x)
  double total = 0.0;

  nlohmann::json to_json() const;
};

class Cvae {
 public:
  explicit Cvae(CvaeConfig cfg);
  Cvae(Cvae&&) = default;
  Cvae& operator=(Cvae&&) = default;

  const CvaeConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // Sentence summary from the bi-GRU, 1 x sentence_dim.
  Var encode_sentence(Tape& t, std::span<const int> ids) const;
  // Final context-GRU state over sentence summaries; the learned null vector
  // when there is no context. 1 x context_dim.
  Var encode_context(Tape& t, std::span<const std::vector<int>> sentences) const;
  Matrix context_vector(std::span<const std::vector<int>> sentences) const;

  struct Gaussian {
    Var mu, logvar;
  };
  Gaussian prior(Tape& t, const Var& c) const;
  Gaussian recognition(Tape& t, const Var& x, const Var& c, int y) const;
  Var metric_prior_logits(Tape& t, const Var& c, const Var& z) const;
  Var metric_posterior_logits(Tape& t, const RowVector& treatment, const Var& x, const Var& c) const;
  Var treatment_logits(Tape& t, const Var& x) const;
  // Teacher-forced decoder logits for <sot> + ids; one row per target
  // (ids then <eot>). `inputs` may differ from the targets by word dropout.
  Var decoder_logits(Tape& t, const Var& c, const Var& z, int y, std::span<const int> inputs) const;

  // Negated bound of one example. `eps` is the reparameterization noise
  // (1 x latent_dim); the non-causal variant ignores metric_kl and treatment.
  CvaeTerms loss(Tape& t, const CvaeExample& ex, const RowVector& eps, CvaeVariant variant,
                 const CvaeWeights& w, Var* total = nullptr, std::span<const int> decoder_inputs = {}) const;

  void save(const std::filesystem::path& dir, const Vocabulary& vocab, CvaeVariant variant) const;
  struct Loaded;
  static Loaded load(const std::filesystem::path& dir);

 private:
  Var embed(Tape& t, std::span<const int> ids) const;
  Var metric_embedding(Tape& t, int y) const;

  CvaeConfig cfg_;
  ParameterSet params_;
  const Parameter* words_ = nullptr;
  const Parameter* metric_table_ = nullptr;
  const Parameter* null_context_ = nullptr;
  Gru sent_fwd_, sent_bwd_, context_, decoder_;
  Mlp prior_, recognition_, metric_prior_, metric_posterior_, treatment_;
  Linear decoder_init_, decoder_out_;
};

struct Cvae::Loaded {
  Cvae model;
  Vocabulary vocab;
  CvaeVariant variant;
};

struct CvaeTrainConfig {
  CvaeVariant variant = CvaeVariant::causal;
  CvaeWeights weights;
  int epochs = 30;
  double learning_rate = 1e-3;
  double lr_decay = 0.6;             // applied after an epoch without enough improvement
  double early_stop = 0.996;         // improvement means val < best * early_stop
  int patience = 2;                  // stop after this many epochs without improvement
  double kl_anneal_fraction = 0.25;  // of all steps; 0 disables annealing
  double word_dropout = 0.1;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct CvaeEpoch {
  CvaeTerms train;  // means
  double validation = 0.0;
  double learning_rate = 0.0;
  double kl_weight = 0.0;  // at the end of the epoch
};

struct CvaeTrainLog {
  std::vector<CvaeEpoch> epochs;
  std::vector<double> step_losses;
  bool stopped_early = false;
};

// Linear KL weight: 0 at step 0, 1 from `anneal_steps` on.
double kl_anneal_weight(long step, long anneal_steps);

CvaeTrainLog train_cvae(Cvae& model, std::span<const CvaeExample> data, const CvaeTrainConfig& cfg);

struct CvaeDecodeConfig {
  MetricChoice metric = MetricChoice::force;
  bool greedy = true;
  double temperature = 1.0;
  int max_tokens = 40;
  std::uint64_t seed = 0;
};

// Next-sentence ids: z ~ p(z | c), y' per `cfg.metric`, then decoding until
// <eot> or the length cap.
std::vector<int> generate_cvae(const Cvae& model, std::span<const std::vector<int>> context, int y,
                               const CvaeDecodeConfig& cfg);

}  // namespace cam
