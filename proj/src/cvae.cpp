#include "cam/cvae.hpp"

#include "cam/text_features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cam {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Divergences

double gaussian_kl(const RowVector& mu_q, const RowVector& logvar_q, const RowVector& mu_p,
                   const RowVector& logvar_p) {
  if (mu_q.size() != mu_p.size() || logvar_q.size() != mu_q.size() || logvar_p.size() != mu_p.size()) {
    throw ShapeError("gaussian_kl: parameter shapes differ");
  }
  // exp(lq - lp) rather than exp(lq) / exp(lp) so equal inputs give exactly 0.
  const auto d = logvar_q.array() - logvar_p.array();
  return 0.5 * (d.exp() + (mu_q - mu_p).array().square() * (-logvar_p.array()).exp() - d - 1.0).sum();
}

Var gaussian_kl(const Var& mu_q, const Var& logvar_q, const Var& mu_p, const Var& logvar_p) {
  Var d = ops::sub(logvar_q, logvar_p);
  Var spread = ops::mul(ops::square(ops::sub(mu_q, mu_p)), ops::exp(ops::scale(logvar_p, -1.0)));
  Var inner = ops::add_scalar(ops::sub(ops::add(ops::exp(d), spread), d), -1.0);
  return ops::scale(ops::sum(inner), 0.5);
}

double categorical_kl(const RowVector& q, const RowVector& p) {
  if (q.size() != p.size()) throw ShapeError("categorical_kl: sizes differ");
  double kl = 0.0;
  for (Index c = 0; c < q.size(); ++c) {
    if (q(c) > 0.0) kl += q(c) * std::log(q(c) / std::max(p(c), 1e-10));
  }
  return kl;
}

Var categorical_kl(const Var& log_q, const Var& log_p) {
  return ops::sum(ops::mul(ops::exp(log_q), ops::sub(log_q, log_p)));
}

std::string_view cvae_variant_name(CvaeVariant v) { return v == CvaeVariant::causal ? "causal" : "noncausal"; }

CvaeVariant parse_cvae_variant(std::string_view name) {
  if (name == "causal") return CvaeVariant::causal;
  if (name == "noncausal" || name == "non-causal") return CvaeVariant::noncausal;
  throw ConfigError("unknown CVAE variant '" + std::string(name) + "' (expected causal or noncausal)");
}

MetricChoice parse_metric_choice(std::string_view name) {
  if (name == "force") return MetricChoice::force;
  if (name == "argmax") return MetricChoice::argmax;
  if (name == "sample") return MetricChoice::sample;
  throw ConfigError("unknown metric choice '" + std::string(name) + "' (expected force, argmax or sample)");
}

// ---------------------------------------------------------------------------
// Config

CvaeConfig CvaeConfig::for_vocabulary(const Vocabulary& vocab) {
  CvaeConfig c;
  c.vocab_size = vocab.size();
  c.sot = vocab.special(Vocabulary::kStartText);
  c.eot = vocab.special(Vocabulary::kEndText);
  c.unk = vocab.special(Vocabulary::kUnk);
  return c;
}

void CvaeConfig::validate() const {
  for (int v : {embed_dim, sentence_dim, context_dim, decoder_dim, latent_dim, metric_embed_dim, hidden_dim, max_len}) {
    if (v < 1) throw ConfigError("cvae: dimensions and max_len must be positive");
  }
  if (sentence_dim % 2 != 0) throw ConfigError("cvae: sentence_dim must be even (two GRU directions)");
  if (treatments < 0) throw ConfigError("cvae: negative treatment count");
  if (vocab_size < 2) throw ConfigError("cvae: vocabulary size must be at least 2");
  for (int id : {sot, eot, unk}) {
    if (id < 0 || id >= vocab_size) throw ConfigError("cvae: special token ids must lie in the vocabulary");
  }
}

json CvaeConfig::to_json() const {
  return {{"vocab_size", vocab_size},   {"embed_dim", embed_dim},
          {"sentence_dim", sentence_dim}, {"context_dim", context_dim},
          {"decoder_dim", decoder_dim}, {"latent_dim", latent_dim},
          {"metric_embed_dim", metric_embed_dim}, {"hidden_dim", hidden_dim},
          {"treatments", treatments},   {"max_len", max_len},
          {"sot", sot},                 {"eot", eot},
          {"unk", unk},                 {"seed", seed}};
}

CvaeConfig CvaeConfig::from_json(const json& j) {
  CvaeConfig c;
  std::map<std::string, int*> ints = {{"vocab_size", &c.vocab_size},   {"embed_dim", &c.embed_dim},
                                      {"sentence_dim", &c.sentence_dim}, {"context_dim", &c.context_dim},
                                      {"decoder_dim", &c.decoder_dim}, {"latent_dim", &c.latent_dim},
                                      {"metric_embed_dim", &c.metric_embed_dim}, {"hidden_dim", &c.hidden_dim},
                                      {"treatments", &c.treatments},   {"max_len", &c.max_len},
                                      {"sot", &c.sot},                 {"eot", &c.eot},
                                      {"unk", &c.unk}};
  for (const auto& [k, v] : j.items()) {
    if (auto it = ints.find(k); it != ints.end()) {
      *it->second = v.get<int>();
    } else if (k == "seed") {
      c.seed = v.get<std::uint64_t>();
    } else {
      throw ConfigError("cvae config: unknown key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

json CvaeTerms::to_json() const {
  return {{"kl_z", kl_z},           {"reconstruction", reconstruction}, {"metric", metric},
          {"metric_kl", metric_kl}, {"treatment", treatment},           {"total", total}};
}

// ---------------------------------------------------------------------------
// Data

std::vector<CvaeExample> make_cvae_examples(const Vocabulary& vocab, const Document& doc, const std::string& metric,
                                            std::span<const FeatureEffect> causal, int window) {
  auto it = doc.buckets.find(metric);
  if (it == doc.buckets.end()) throw DataError("document " + doc.id + ": no bucket for metric '" + metric + "'");
  const FeatureVector fv = extract_features(doc);
  RowVector t(static_cast<Index>(causal.size()));
  for (std::size_t k = 0; k < causal.size(); ++k) {
    t(static_cast<Index>(k)) = fv[parse_feature(causal[k].feature)] > causal[k].threshold ? 1.0 : 0.0;
  }
  auto sentence_ids = [&](std::string_view s) {
    auto w = tokenize(s);
    w.emplace_back(Vocabulary::kSentence);
    return vocab.encode(w);
  };
  std::vector<std::vector<int>> history;
  for (const auto& s : doc.context) {
    if (!tokenize(s).empty()) history.push_back(sentence_ids(s));
  }
  std::vector<CvaeExample> out;
  for (auto para : split_paragraphs(doc.text)) {
    for (auto sent : split_sentences(para)) {
      if (tokenize(sent).empty()) continue;
      CvaeExample ex;
      const std::size_t from = history.size() > static_cast<std::size_t>(window)
                                   ? history.size() - static_cast<std::size_t>(window)
                                   : 0;
      ex.context.assign(history.begin() + static_cast<std::ptrdiff_t>(from), history.end());
      ex.sentence = sentence_ids(sent);
      ex.y = static_cast<int>(it->second);
      ex.t = t;
      history.push_back(ex.sentence);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

Cvae::Cvae(CvaeConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const Index V = cfg_.vocab_size, E = cfg_.embed_dim, S = cfg_.sentence_dim, C = cfg_.context_dim,
              D = cfg_.decoder_dim, L = cfg_.latent_dim, M = cfg_.metric_embed_dim, H = cfg_.hidden_dim,
              K = cfg_.treatments;
  Parameter& w = params_.add("embed.words", V, E);
  xavier_uniform(w, rng);
  words_ = &w;
  Parameter& m = params_.add("embed.metric", kNumMetricClasses, M);
  xavier_uniform(m, rng);
  metric_table_ = &m;
  null_context_ = &params_.add("context.null", 1, C);
  sent_fwd_ = Gru::create(params_, "sentence.forward", E, S / 2, rng);
  sent_bwd_ = Gru::create(params_, "sentence.backward", E, S / 2, rng);
  context_ = Gru::create(params_, "context", S, C, rng);
  prior_ = Mlp::create(params_, "prior", {C, H, 2 * L}, Activation::tanh, rng);
  recognition_ = Mlp::create(params_, "recognition", {S + C + M, H, 2 * L}, Activation::tanh, rng);
  metric_prior_ = Mlp::create(params_, "metric_prior", {C + L, H, kNumMetricClasses}, Activation::tanh, rng);
  metric_posterior_ =
      Mlp::create(params_, "metric_posterior", {K + S + C, H, kNumMetricClasses}, Activation::tanh, rng);
  if (K > 0) treatment_ = Mlp::create(params_, "treatment", {S, H, K}, Activation::tanh, rng);
  decoder_init_ = Linear::create(params_, "decoder.init", C + L + M, D, rng);
  decoder_ = Gru::create(params_, "decoder.gru", E + L + M, D, rng);
  decoder_out_ = Linear::create(params_, "decoder.out", D, V, rng);
}

Var Cvae::embed(Tape& t, std::span<const int> ids) const { return ops::embedding(t.param(*words_), ids); }

Var Cvae::metric_embedding(Tape& t, int y) const {
  if (y < 0 || y >= kNumMetricClasses) throw DataError("cvae: metric class " + std::to_string(y) + " out of range");
  return ops::slice_rows(t.param(*metric_table_), y, 1);
}

Var Cvae::encode_sentence(Tape& t, std::span<const int> ids) const {
  const Var h0 = t.constant(Matrix::Zero(1, cfg_.sentence_dim / 2));
  if (ids.empty()) return t.constant(Matrix::Zero(1, cfg_.sentence_dim));
  Var xs = embed(t, ids);
  const std::vector<Var> parts = {sent_fwd_.run(t, xs, h0), sent_bwd_.run(t, xs, h0, true)};
  return ops::concat_cols(parts);
}

Var Cvae::encode_context(Tape& t, std::span<const std::vector<int>> sentences) const {
  if (sentences.empty()) return t.param(*null_context_);
  std::vector<Var> rows;
  for (const auto& s : sentences) rows.push_back(encode_sentence(t, s));
  return context_.run(t, ops::concat_rows(rows), t.constant(Matrix::Zero(1, cfg_.context_dim)));
}

Matrix Cvae::context_vector(std::span<const std::vector<int>> sentences) const {
  Tape t(false);
  return encode_context(t, sentences).value();
}

namespace {

Cvae::Gaussian split_gaussian(const Var& out, Index latent) {
  return {ops::slice_cols(out, 0, latent), ops::slice_cols(out, latent, latent)};
}

Var cat(std::initializer_list<Var> parts) {
  const std::vector<Var> v(parts);
  return ops::concat_cols(v);
}

}  // namespace

Cvae::Gaussian Cvae::prior(Tape& t, const Var& c) const { return split_gaussian(prior_(t, c), cfg_.latent_dim); }

Cvae::Gaussian Cvae::recognition(Tape& t, const Var& x, const Var& c, int y) const {
  return split_gaussian(recognition_(t, cat({x, c, metric_embedding(t, y)})), cfg_.latent_dim);
}

Var Cvae::metric_prior_logits(Tape& t, const Var& c, const Var& z) const { return metric_prior_(t, cat({c, z})); }

Var Cvae::metric_posterior_logits(Tape& t, const RowVector& treatment, const Var& x, const Var& c) const {
  if (treatment.size() != cfg_.treatments) {
    throw ShapeError("cvae: treatment vector of " + std::to_string(treatment.size()) + " entries, expected " +
                     std::to_string(cfg_.treatments));
  }
  if (cfg_.treatments == 0) return metric_posterior_(t, cat({x, c}));
  return metric_posterior_(t, cat({t.constant(treatment), x, c}));
}

Var Cvae::treatment_logits(Tape& t, const Var& x) const {
  if (cfg_.treatments == 0) throw ConfigError("cvae: model has no treatment features");
  return treatment_(t, x);
}

Var Cvae::decoder_logits(Tape& t, const Var& c, const Var& z, int y, std::span<const int> inputs) const {
  Var ye = metric_embedding(t, y);
  Var h = ops::tanh(decoder_init_(t, cat({c, z, ye})));
  std::vector<int> ids = {cfg_.sot};
  ids.insert(ids.end(), inputs.begin(), inputs.end());
  Var xs = embed(t, ids);
  std::vector<Var> states;
  for (Index k = 0; k < static_cast<Index>(ids.size()); ++k) {
    h = decoder_.step(t, cat({ops::slice_rows(xs, k, 1), z, ye}), h);
    states.push_back(h);
  }
  return decoder_out_(t, ops::concat_rows(states));
}

CvaeTerms Cvae::loss(Tape& t, const CvaeExample& ex, const RowVector& eps, CvaeVariant variant,
                     const CvaeWeights& w, Var* total, std::span<const int> decoder_inputs) const {
  if (eps.size() != cfg_.latent_dim) throw ShapeError("cvae: noise must have latent_dim entries");
  if (!decoder_inputs.empty() && decoder_inputs.size() != ex.sentence.size()) {
    throw ShapeError("cvae: decoder inputs must match the sentence length");
  }
  Var c = encode_context(t, ex.context);
  Var x = encode_sentence(t, ex.sentence);
  const Gaussian p = prior(t, c);
  const Gaussian q = recognition(t, x, c, ex.y);
  // Reparameterized single sample from q(z | x, c, y').
  Var z = ops::add(q.mu, ops::mul_const(ops::exp(ops::scale(q.logvar, 0.5)), eps));

  CvaeTerms terms;
  Var kl = gaussian_kl(q.mu, q.logvar, p.mu, p.logvar);
  std::vector<int> targets = ex.sentence;
  targets.push_back(cfg_.eot);
  Var rec = ops::cross_entropy_sum(decoder_logits(t, c, z, ex.y, decoder_inputs.empty() ? ex.sentence : decoder_inputs),
                                   targets);
  Var log_prior_y = ops::log_softmax_rows(metric_prior_logits(t, c, z));
  const std::vector<int> y = {ex.y};
  Var met = ops::cross_entropy_sum(metric_prior_logits(t, c, z), y);
  terms.kl_z = kl.scalar();
  terms.reconstruction = rec.scalar();
  terms.metric = met.scalar();
  Var sum = ops::add(ops::add(ops::scale(kl, w.kl_z), ops::scale(rec, w.reconstruction)), ops::scale(met, w.metric));
  if (variant == CvaeVariant::causal) {
    Var log_post_y = ops::log_softmax_rows(metric_posterior_logits(t, ex.t, x, c));
    Var mkl = categorical_kl(log_post_y, log_prior_y);
    terms.metric_kl = mkl.scalar();
    sum = ops::add(sum, ops::scale(mkl, w.metric_kl));
    if (cfg_.treatments > 0) {
      // Independent Bernoullis; the mean BCE times k is the summed NLL.
      Var tr = ops::scale(ops::bce_with_logits(treatment_logits(t, x), ex.t), static_cast<double>(cfg_.treatments));
      terms.treatment = tr.scalar();
      sum = ops::add(sum, ops::scale(tr, w.treatment));
    }
  }
  terms.total = sum.scalar();
  if (!std::isfinite(terms.total)) throw NumericError("cvae: non-finite loss " + terms.to_json().dump());
  if (total) *total = sum;
  return terms;
}

void Cvae::save(const std::filesystem::path& dir, const Vocabulary& vocab, CvaeVariant variant) const {
  if (vocab.size() != cfg_.vocab_size) throw ShapeError("cvae save: vocabulary size mismatch");
  std::filesystem::create_directories(dir);
  json h;
  h["kind"] = "cvae";
  h["variant"] = cvae_variant_name(variant);
  h["config"] = cfg_.to_json();
  h["vocabulary"] = vocab.tokens();
  std::ofstream f(dir / "header.json");
  if (!f) throw Error("cannot write " + (dir / "header.json").string());
  f << h.dump(2) << "\n";
  save_parameters(dir / "params.bin", params_);
}

Cvae::Loaded Cvae::load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "header.json");
  if (!f) throw Error("cannot read " + (dir / "header.json").string());
  json h;
  try {
    h = json::parse(f);
  } catch (const json::exception& e) {
    throw DataError((dir / "header.json").string() + ": " + e.what());
  }
  if (h.value("kind", "") != "cvae") throw DataError(dir.string() + ": not a CVAE checkpoint");
  Loaded out{Cvae(CvaeConfig::from_json(h.at("config"))),
             Vocabulary::from_tokens(h.at("vocabulary").get<std::vector<std::string>>()),
             parse_cvae_variant(h.at("variant").get<std::string>())};
  if (out.vocab.size() != out.model.cfg_.vocab_size) throw DataError(dir.string() + ": vocabulary size mismatch");
  load_parameters(dir / "params.bin", out.model.params_);
  return out;
}

// ---------------------------------------------------------------------------
// Training

double kl_anneal_weight(long step, long anneal_steps) {
  if (anneal_steps <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(anneal_steps));
}

namespace {

RowVector normal_row(Rng& rng, Index n) {
  RowVector r(n);
  for (Index i = 0; i < n; ++i) r(i) = rng.normal();
  return r;
}

}  // namespace

CvaeTrainLog train_cvae(Cvae& model, std::span<const CvaeExample> data, const CvaeTrainConfig& cfg) {
  if (data.empty()) throw DataError("cvae training: no examples");
  const auto& mc = model.config();
  for (const auto& ex : data) {
    if (ex.t.size() != mc.treatments) throw ShapeError("cvae training: treatment width differs from the model");
  }
  Rng rng(cfg.seed);
  std::vector<std::size_t> order = iota_indices(data.size());
  rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (train.empty()) throw DataError("cvae training: validation split leaves no training examples");

  // Fixed validation noise so epochs are comparable.
  Rng val_rng = rng.split(1);
  std::vector<RowVector> val_eps;
  for (std::size_t k = 0; k < val.size(); ++k) val_eps.push_back(normal_row(val_rng, mc.latent_dim));

  Adam opt(model.params().all(), AdamConfig{cfg.learning_rate});
  const long total_steps = static_cast<long>(cfg.epochs) * static_cast<long>(train.size());
  const long anneal = static_cast<long>(std::llround(cfg.kl_anneal_fraction * static_cast<double>(total_steps)));
  CvaeTrainLog log;
  double best = std::numeric_limits<double>::infinity();
  int bad = 0;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train);
    CvaeEpoch e;
    for (std::size_t i : train) {
      const CvaeExample& ex = data[i];
      CvaeWeights w = cfg.weights;
      w.kl_z *= kl_anneal_weight(step, anneal);
      std::vector<int> inputs = ex.sentence;
      if (cfg.word_dropout > 0.0) {
        for (int& id : inputs) {
          if (rng.bernoulli(cfg.word_dropout)) id = mc.unk;
        }
      }
      const RowVector eps = normal_row(rng, mc.latent_dim);
      Tape tape;
      Var total;
      const CvaeTerms t = model.loss(tape, ex, eps, cfg.variant, w, &total, inputs);
      tape.backward(total);
      opt.step();
      ++step;
      log.step_losses.push_back(t.total);
      e.train.kl_z += t.kl_z;
      e.train.reconstruction += t.reconstruction;
      e.train.metric += t.metric;
      e.train.metric_kl += t.metric_kl;
      e.train.treatment += t.treatment;
      e.train.total += t.total;
    }
    const double n = static_cast<double>(train.size());
    e.train.kl_z /= n;
    e.train.reconstruction /= n;
    e.train.metric /= n;
    e.train.metric_kl /= n;
    e.train.treatment /= n;
    e.train.total /= n;
    e.kl_weight = kl_anneal_weight(step, anneal);
    e.learning_rate = opt.learning_rate();

    double score = e.train.total;
    if (!val.empty()) {
      score = 0.0;
      for (std::size_t k = 0; k < val.size(); ++k) {
        Tape tape(false);
        score += model.loss(tape, data[val[k]], val_eps[k], cfg.variant, cfg.weights).total;
      }
      score /= static_cast<double>(val.size());
    }
    e.validation = score;
    log.epochs.push_back(e);
    if (score < best * cfg.early_stop || !std::isfinite(best)) {
      best = score;
      bad = 0;
    } else {
      ++bad;
      opt.set_learning_rate(opt.learning_rate() * cfg.lr_decay);
      if (bad >= cfg.patience) {
        log.stopped_early = true;
        break;
      }
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Generation

std::vector<int> generate_cvae(const Cvae& model, std::span<const std::vector<int>> context, int y,
                               const CvaeDecodeConfig& cfg) {
  if (!cfg.greedy && !(cfg.temperature > 0.0)) throw ConfigError("generate_cvae: temperature must be positive");
  const auto& mc = model.config();
  Rng rng(cfg.seed);
  Tape t(false);
  Var c = model.encode_context(t, context);
  const Cvae::Gaussian p = model.prior(t, c);
  const RowVector eps = normal_row(rng, mc.latent_dim);
  Var z = t.constant(p.mu.value() + (p.logvar.value().array() * 0.5).exp().matrix().cwiseProduct(eps));
  int yp = y;
  if (cfg.metric != MetricChoice::force) {
    const RowVector lp = ops::log_softmax_rows(model.metric_prior_logits(t, c, z)).value();
    if (cfg.metric == MetricChoice::argmax) {
      Index k;
      lp.maxCoeff(&k);
      yp = static_cast<int>(k);
    } else {
      const RowVector pr = lp.array().exp().matrix();
      yp = rng.categorical(std::vector<double>(pr.data(), pr.data() + pr.size()));
    }
  }
  std::vector<int> out;
  // Re-running the teacher-forced decoder over the prefix keeps one code path;
  // sentences are short.
  while (static_cast<int>(out.size()) < std::min(cfg.max_tokens, mc.max_len)) {
    Tape step(false);
    Var cs = step.constant(c.value());
    Var zs = step.constant(z.value());
    const Matrix logits = model.decoder_logits(step, cs, zs, yp, out).value();
    const RowVector row = logits.row(logits.rows() - 1);
    int next = 0;
    if (cfg.greedy) {
      Index k;
      row.maxCoeff(&k);
      next = static_cast<int>(k);
    } else {
      const RowVector pr = ((row.array() - row.maxCoeff()) / cfg.temperature).exp().matrix();
      next = rng.categorical(std::vector<double>(pr.data(), pr.data() + pr.size()));
    }
    if (next == mc.eot) break;
    out.push_back(next);
  }
  return out;
}

}  // namespace cam
