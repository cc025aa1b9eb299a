#include "cam/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

namespace cam {

using nlohmann::json;

namespace {

bool is_topic_token(const std::string& t) {
  if (t.size() < 4 || t.rfind("<t", 0) != 0 || t.back() != '>') return false;
  return std::all_of(t.begin() + 2, t.end() - 1, [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

// ---------------------------------------------------------------------------
// Prompts

std::vector<int> format_prompt(const Vocabulary& vocab, MetricClass metric, int topic,
                               std::span<const std::string> keywords, std::span<const std::string> text) {
  std::vector<int> ids = {vocab.special(Vocabulary::metric_token(metric)),
                          vocab.special(Vocabulary::topic_token(topic)), vocab.special(Vocabulary::kKeywords)};
  for (const auto& k : keywords) ids.push_back(vocab.id(k));
  ids.push_back(vocab.special(Vocabulary::kStartText));
  for (const auto& t : text) ids.push_back(vocab.id(t));
  return ids;
}

ParsedPrompt parse_prompt(const Vocabulary& vocab, std::span<const int> ids) {
  if (ids.size() < 4) throw DataError("parse_prompt: sequence too short");
  ParsedPrompt p;
  bool found = false;
  for (int c = 0; c < kNumMetricClasses; ++c) {
    if (vocab.token(ids[0]) == Vocabulary::metric_token(static_cast<MetricClass>(c))) {
      p.metric = static_cast<MetricClass>(c);
      found = true;
    }
  }
  if (!found) throw DataError("parse_prompt: no metric token at position 0");
  const std::string& t = vocab.token(ids[1]);
  if (!is_topic_token(t)) throw DataError("parse_prompt: no topic token at position 1");
  p.topic = std::stoi(t.substr(2, t.size() - 3));
  if (ids[2] != vocab.special(Vocabulary::kKeywords)) throw DataError("parse_prompt: missing <kw>");
  const int sot = vocab.special(Vocabulary::kStartText);
  std::size_t i = 3;
  for (; i < ids.size() && ids[i] != sot; ++i) p.keywords.push_back(vocab.token(ids[i]));
  if (i == ids.size()) throw DataError("parse_prompt: missing <sot>");
  p.text.assign(ids.begin() + static_cast<std::ptrdiff_t>(i) + 1, ids.end());
  return p;
}

// ---------------------------------------------------------------------------
// Config

std::string_view attention_mode_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::off:
      return "off";
    case AttentionMode::additive:
      return "additive";
    case AttentionMode::replace:
      return "replace";
  }
  return "off";
}

AttentionMode parse_attention_mode(std::string_view name) {
  for (auto m : {AttentionMode::off, AttentionMode::additive, AttentionMode::replace}) {
    if (attention_mode_name(m) == name) return m;
  }
  throw ConfigError("unknown attention mode '" + std::string(name) + "' (expected off, additive or replace)");
}

void TransformerConfig::validate() const {
  if (layers < 1 || heads < 1 || dim < 1 || max_len < 2 || control_dim < 1) {
    throw ConfigError("transformer: layers, heads, dim, control_dim must be positive and max_len >= 2");
  }
  if (dim % heads != 0) {
    throw ConfigError("transformer: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (vocab_size < 2) throw ConfigError("transformer: vocabulary size must be at least 2");
}

json TransformerConfig::to_json() const {
  return {{"layers", layers},
          {"heads", heads},
          {"dim", dim},
          {"vocab_size", vocab_size},
          {"max_len", max_len},
          {"control_dim", control_dim},
          {"attention", attention_mode_name(attention)},
          {"norm_injection", norm_injection},
          {"embedding_injection", embedding_injection},
          {"seed", seed}};
}

TransformerConfig TransformerConfig::from_json(const json& j) {
  TransformerConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "layers") {
      c.layers = v.get<int>();
    } else if (k == "heads") {
      c.heads = v.get<int>();
    } else if (k == "dim") {
      c.dim = v.get<int>();
    } else if (k == "vocab_size") {
      c.vocab_size = v.get<int>();
    } else if (k == "max_len") {
      c.max_len = v.get<int>();
    } else if (k == "control_dim") {
      c.control_dim = v.get<int>();
    } else if (k == "attention") {
      c.attention = parse_attention_mode(v.get<std::string>());
    } else if (k == "norm_injection") {
      c.norm_injection = v.get<bool>();
    } else if (k == "embedding_injection") {
      c.embedding_injection = v.get<bool>();
    } else if (k == "seed") {
      c.seed = v.get<std::uint64_t>();
    } else {
      throw ConfigError("transformer config: unknown key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Building blocks

Var controlled_attention(const Var& x, const AttentionWeights& w, const Var& eta, AttentionMode mode, int heads) {
  const Index n = x.rows();
  const Index d = w.wq.cols();
  if (heads < 1 || d % heads != 0) throw ShapeError("attention: width " + std::to_string(d) + " vs heads");
  Var q;
  switch (mode) {
    case AttentionMode::off:
      q = ops::matmul(x, w.wq);
      break;
    case AttentionMode::additive:
      if (!eta.valid()) throw ConfigError("attention: additive mode needs a control query");
      q = ops::add_row(ops::matmul(x, w.wq), eta);
      break;
    case AttentionMode::replace:
      if (!eta.valid()) throw ConfigError("attention: replace mode needs a control query");
      q = ops::broadcast_rows(eta, n);
      break;
  }
  Var k = ops::matmul(x, w.wk);
  Var v = ops::matmul(x, w.wv);
  Matrix mask = Matrix::Zero(n, n);
  for (Index r = 0; r < n; ++r) {
    for (Index c = r + 1; c < n; ++c) mask(r, c) = -std::numeric_limits<double>::infinity();
  }
  const Index dk = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> outs;
  for (int h = 0; h < heads; ++h) {
    Var qh = ops::slice_cols(q, h * dk, dk);
    Var kh = ops::slice_cols(k, h * dk, dk);
    Var vh = ops::slice_cols(v, h * dk, dk);
    Var a = ops::softmax_rows(ops::add_const(ops::scale(ops::matmul_nt(qh, kh), s), mask));
    outs.push_back(ops::matmul(a, vh));
  }
  Var cat = heads == 1 ? outs[0] : ops::concat_cols(outs);
  return ops::matmul(cat, w.wo);
}

Var controlled_layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  return ops::add_row(ops::mul_row(ops::layer_norm_rows(x, eps), gamma), beta);
}

// ---------------------------------------------------------------------------
// Model

Transformer::Norm Transformer::make_norm(const std::string& name) {
  const Index d = cfg_.dim;
  Parameter& g = params_.add(name + ".gamma", 1, d);
  g.value.setOnes();
  Parameter& b = params_.add(name + ".beta", 1, d);
  Parameter& gm = params_.add(name + ".gamma_map", cfg_.control_dim, d);
  Parameter& bm = params_.add(name + ".beta_map", cfg_.control_dim, d);
  return {&g, &b, &gm, &bm};
}

Transformer::Transformer(TransformerConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const Index d = cfg_.dim;
  Parameter& tok = params_.add("embed.token", cfg_.vocab_size, d);
  xavier_uniform(tok, rng);
  Parameter& pos = params_.add("embed.position", cfg_.max_len, d);
  xavier_uniform(pos, rng);
  // Random control vectors; their projections start at zero so every
  // injection point is a no-op until trained.
  Parameter& table = params_.add("control.table", kNumMetricClasses, cfg_.control_dim);
  xavier_uniform(table, rng);
  tok_ = &tok;
  pos_ = &pos;
  control_table_ = &table;
  control_input_ = &params_.add("control.input", cfg_.control_dim, d);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "block" + std::to_string(l);
    Block b;
    b.ln1 = make_norm(p + ".ln1");
    auto square = [&](const std::string& n) {
      Parameter& w = params_.add(p + ".attn." + n, d, d);
      xavier_uniform(w, rng);
      return &w;
    };
    b.wq = square("query");
    b.wk = square("key");
    b.wv = square("value");
    b.wo = square("output");
    b.eta = &params_.add(p + ".attn.eta", cfg_.control_dim, d);
    b.eta_bias = &params_.add(p + ".attn.eta_bias", 1, d);
    b.ln2 = make_norm(p + ".ln2");
    b.fc1 = Linear::create(params_, p + ".mlp.fc1", d, 4 * d, rng);
    b.fc2 = Linear::create(params_, p + ".mlp.fc2", 4 * d, d, rng);
    blocks_.push_back(b);
  }
  final_ = make_norm("final");
}

Injections Transformer::default_injections() const {
  return {cfg_.embedding_injection, cfg_.norm_injection, cfg_.attention};
}

Var Transformer::norm(Tape& t, const Norm& n, const Var& x, const Var& c, bool inject) const {
  Var g = t.param(*n.gamma);
  Var b = t.param(*n.beta);
  if (inject) {
    g = ops::add(g, ops::matmul(c, t.param(*n.gamma_map)));
    b = ops::add(b, ops::matmul(c, t.param(*n.beta_map)));
  }
  return controlled_layer_norm(x, g, b);
}

Var Transformer::forward(Tape& tape, std::span<const int> ids, MetricClass y) const {
  return forward(tape, ids, y, default_injections());
}

Var Transformer::forward(Tape& t, std::span<const int> ids, MetricClass y, const Injections& inj) const {
  const Index n = static_cast<Index>(ids.size());
  if (n == 0) throw ShapeError("transformer: empty input");
  if (n > cfg_.max_len) {
    throw ShapeError("transformer: sequence of " + std::to_string(n) + " exceeds max length " +
                     std::to_string(cfg_.max_len));
  }
  Var tok = t.param(*tok_);
  Var x = ops::add(ops::embedding(tok, ids), ops::slice_rows(t.param(*pos_), 0, n));
  Var c = ops::slice_rows(t.param(*control_table_), static_cast<Index>(y), 1);
  if (inj.embedding) x = ops::add_row(x, ops::matmul(c, t.param(*control_input_)));
  for (const Block& b : blocks_) {
    Var a = norm(t, b.ln1, x, c, inj.norm);
    Var eta;
    if (inj.attention != AttentionMode::off) {
      eta = ops::add(ops::matmul(c, t.param(*b.eta)), t.param(*b.eta_bias));
    }
    AttentionWeights w{t.param(*b.wq), t.param(*b.wk), t.param(*b.wv), t.param(*b.wo)};
    x = ops::add(x, controlled_attention(a, w, eta, inj.attention, cfg_.heads));
    Var m = norm(t, b.ln2, x, c, inj.norm);
    x = ops::add(x, b.fc2(t, ops::gelu(b.fc1(t, m))));
  }
  Var h = norm(t, final_, x, c, inj.norm);
  return ops::matmul_nt(h, tok);
}

Matrix Transformer::logits(std::span<const int> ids, MetricClass y) const {
  return logits(ids, y, default_injections());
}

Matrix Transformer::logits(std::span<const int> ids, MetricClass y, const Injections& inj) const {
  Tape tape(false);
  return forward(tape, ids, y, inj).value();
}

void Transformer::save(const std::filesystem::path& dir, const Vocabulary& vocab) const {
  if (vocab.size() != cfg_.vocab_size) throw ShapeError("transformer save: vocabulary size mismatch");
  std::filesystem::create_directories(dir);
  json h;
  h["kind"] = "transformer";
  h["config"] = cfg_.to_json();
  h["vocabulary"] = vocab.tokens();
  std::ofstream f(dir / "header.json");
  if (!f) throw Error("cannot write " + (dir / "header.json").string());
  f << h.dump(2) << "\n";
  save_parameters(dir / "params.bin", params_);
}

std::pair<Transformer, Vocabulary> Transformer::load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "header.json");
  if (!f) throw Error("cannot read " + (dir / "header.json").string());
  json h;
  try {
    h = json::parse(f);
  } catch (const json::exception& e) {
    throw DataError((dir / "header.json").string() + ": " + e.what());
  }
  if (h.value("kind", "") != "transformer") throw DataError(dir.string() + ": not a transformer checkpoint");
  Vocabulary vocab = Vocabulary::from_tokens(h.at("vocabulary").get<std::vector<std::string>>());
  Transformer m(TransformerConfig::from_json(h.at("config")));
  if (vocab.size() != m.cfg_.vocab_size) throw DataError(dir.string() + ": vocabulary size mismatch");
  load_parameters(dir / "params.bin", m.params_);
  return {std::move(m), std::move(vocab)};
}

// ---------------------------------------------------------------------------
// Losses

Var loss_lm(const Var& logits, std::span<const int> targets) { return ops::cross_entropy(logits, targets); }

Var loss_metric(const Var& distributions, int y, const SoftBagView& clf) {
  Var lp = soft_bag_log_probs(distributions, clf);
  if (y < 0 || y >= lp.cols()) throw DataError("loss_metric: class " + std::to_string(y) + " out of range");
  return ops::scale(ops::slice_cols(lp, y, 1), -1.0);
}

Var loss_topic(const Var& distributions, int topic, const SoftBagView& clf) {
  return loss_metric(distributions, topic, clf);
}

std::string_view causal_mode_name(CausalMode m) { return m == CausalMode::full ? "full" : "literal"; }

CausalMode parse_causal_mode(std::string_view name) {
  if (name == "full") return CausalMode::full;
  if (name == "literal") return CausalMode::literal;
  throw ConfigError("unknown causal loss mode '" + std::string(name) + "' (expected full or literal)");
}

Var causal_cross_entropy(const RowVector& p, const Var& log_q, int y, CausalMode mode) {
  if (p.cols() != log_q.cols() || log_q.rows() != 1) {
    throw ShapeError("causal loss: p " + shape_string(p) + " vs log q " + shape_string(log_q.value()));
  }
  if (mode == CausalMode::full) return ops::scale(ops::sum(ops::mul_const(log_q, p)), -1.0);
  if (y < 0 || y >= p.cols()) throw DataError("causal loss: class " + std::to_string(y) + " out of range");
  return ops::scale(ops::slice_cols(log_q, y, 1), -p(y));
}

Var loss_causal(const FeatureVector& real, const Var& distributions, int y, const FeatureClassifier& fc,
                const SoftFeatureMap& map, CausalMode mode) {
  Tape frozen(false);
  const RowVector p = fc.log_probs(frozen.constant(real.row())).value().array().exp().matrix();
  Var log_q = fc.log_probs(soft_expected_features(distributions, map));
  return causal_cross_entropy(p, log_q, y, mode);
}

double LossBundle::total() const {
  return weights.g * l_g + weights.metric * l_metric + weights.topic * l_topic + weights.causal * l_causal;
}

json LossBundle::to_json() const {
  return {{"l_g", l_g},
          {"l_metric", l_metric},
          {"l_topic", l_topic},
          {"l_causal", l_causal},
          {"lambda_g", weights.g},
          {"lambda_metric", weights.metric},
          {"lambda_topic", weights.topic},
          {"lambda_causal", weights.causal},
          {"total", total()}};
}

// ---------------------------------------------------------------------------
// Training

GenExample make_example(const Vocabulary& vocab, const Document& doc, const std::string& metric) {
  auto it = doc.buckets.find(metric);
  if (it == doc.buckets.end()) throw DataError("document " + doc.id + ": no bucket for metric '" + metric + "'");
  GenExample ex;
  ex.y = it->second;
  ex.topic = doc.topic.value_or(0);
  std::vector<std::string> kws;
  for (const auto& k : doc.keywords) {
    for (auto& w : tokenize(k)) kws.push_back(std::move(w));
  }
  ex.prompt = format_prompt(vocab, ex.y, ex.topic, kws);
  ex.article = vocab.encode(text_to_tokens(doc.text));
  ex.features = extract_features(doc);
  ex.eot = vocab.special(Vocabulary::kEndText);
  return ex;
}

namespace {

// Input/target ids of the teacher-forced sequence prompt + article + <eot>,
// with the article cut to fit the context window.
struct Sequence {
  std::vector<int> input, target;
  Index article_start = 0, article_len = 0;
};

Sequence teacher_forced(const GenExample& ex, int eot, int max_len) {
  std::vector<int> full = ex.prompt;
  if (static_cast<int>(full.size()) + 1 > max_len) throw ShapeError("prompt longer than the context window");
  const std::size_t room = static_cast<std::size_t>(max_len + 1) - full.size() - 1;
  const std::size_t len = std::min(ex.article.size(), room);
  full.insert(full.end(), ex.article.begin(), ex.article.begin() + static_cast<std::ptrdiff_t>(len));
  if (full.size() < static_cast<std::size_t>(max_len) + 1) full.push_back(eot);
  Sequence s;
  s.input.assign(full.begin(), full.end() - 1);
  s.target.assign(full.begin() + 1, full.end());
  s.article_start = static_cast<Index>(ex.prompt.size()) - 1;
  s.article_len = static_cast<Index>(len);
  return s;
}

}  // namespace

LossBundle example_losses(Tape& tape, const Transformer& model, const GenExample& ex, const Feedback& fb,
                          const LossWeights& w, CausalMode mode, Var* total) {
  const auto& cfg = model.config();
  Sequence s = teacher_forced(ex, ex.eot, cfg.max_len);
  LossBundle out;
  out.weights = w;
  Var logits = model.forward(tape, s.input, ex.y);
  Var l_g = loss_lm(logits, s.target);
  out.l_g = l_g.scalar();
  Var sum = ops::scale(l_g, w.g);
  const bool aux = s.article_len > 0 && ((w.metric != 0.0 && fb.metric) || (w.topic != 0.0 && fb.topic) ||
                                        (w.causal != 0.0 && fb.causal && fb.features));
  if (aux) {
    Var dist = ops::softmax_rows(ops::slice_rows(logits, s.article_start, s.article_len));
    if (w.metric != 0.0 && fb.metric) {
      Var l = loss_metric(dist, static_cast<int>(ex.y), *fb.metric);
      out.l_metric = l.scalar();
      sum = ops::add(sum, ops::scale(l, w.metric));
    }
    if (w.topic != 0.0 && fb.topic) {
      Var l = loss_topic(dist, ex.topic, *fb.topic);
      out.l_topic = l.scalar();
      sum = ops::add(sum, ops::scale(l, w.topic));
    }
    if (w.causal != 0.0 && fb.causal && fb.features) {
      Var l = loss_causal(ex.features, dist, static_cast<int>(ex.y), *fb.causal, *fb.features, mode);
      out.l_causal = l.scalar();
      sum = ops::add(sum, ops::scale(l, w.causal));
    }
  }
  if (total) *total = sum;
  return out;
}

TokenNll sequence_nll(const Transformer& model, const GenExample& ex) {
  const Sequence s = teacher_forced(ex, ex.eot, model.config().max_len);
  Tape tape(false);
  Var logits = model.forward(tape, s.input, ex.y);
  return {ops::cross_entropy_sum(logits, s.target).scalar(), static_cast<long>(s.target.size())};
}

namespace {

void check_finite(const LossBundle& b, long step) {
  if (std::isfinite(b.total())) return;
  throw NumericError("generator training: non-finite loss at step " + std::to_string(step) + " " + b.to_json().dump());
}

std::vector<int> sample_continuation(const Transformer& model, std::span<const int> prompt, MetricClass y, int eot,
                                     int max_new, Rng& rng) {
  std::vector<int> ids(prompt.begin(), prompt.end());
  std::vector<int> out;
  while (static_cast<int>(out.size()) < max_new && static_cast<int>(ids.size()) < model.config().max_len) {
    const Matrix z = model.logits(ids, y);
    RowVector row = z.row(z.rows() - 1);
    row = (row.array() - row.maxCoeff()).exp().matrix();
    std::vector<double> w(row.data(), row.data() + row.size());
    const int next = rng.categorical(w);
    if (next == eot) break;
    out.push_back(next);
    ids.push_back(next);
  }
  return out;
}

}  // namespace

GenTrainLog train_generator(Transformer& model, std::span<const GenExample> data, const Feedback& fb,
                            const GenTrainConfig& cfg) {
  if (data.empty()) throw DataError("generator training: empty corpus");
  if (cfg.reinforce && (!fb.reward || !fb.vocab)) {
    throw ConfigError("generator training: REINFORCE needs a reward classifier and vocabulary");
  }
  Adam opt(model.params().all(), AdamConfig{cfg.learning_rate});
  Rng rng(cfg.seed);
  Rng sampler = rng.split(1);
  std::vector<std::size_t> order = iota_indices(data.size());
  GenTrainLog log;
  double baseline = 0.0;
  bool have_baseline = false;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps >= 0 && step >= cfg.max_steps) break;
    rng.shuffle(order);
    LossBundle mean;
    mean.weights = cfg.weights;
    long n = 0;
    for (std::size_t i : order) {
      if (cfg.max_steps >= 0 && step >= cfg.max_steps) break;
      const GenExample& ex = data[i];
      Tape tape;
      Var total;
      LossWeights w = cfg.weights;
      if (cfg.reinforce) w.metric = 0.0;
      LossBundle b = example_losses(tape, model, ex, fb, w, cfg.causal_mode, &total);
      b.weights = cfg.weights;
      if (cfg.reinforce && cfg.weights.metric != 0.0) {
        // Score-function estimate: the reward is the hard classifier's
        // log-probability of the target on a sampled continuation.
        const int max_new = std::max(1, static_cast<int>(ex.article.size()));
        std::vector<int> sample = sample_continuation(model, ex.prompt, ex.y, ex.eot, max_new, sampler);
        const std::string text = tokens_to_text(fb.vocab->decode_tokens(sample));
        const double reward = std::log(std::max(fb.reward->predict(text)(static_cast<Index>(ex.y)), 1e-300));
        const double advantage = have_baseline ? reward - baseline : 0.0;
        baseline = have_baseline ? cfg.reinforce_decay * baseline + (1.0 - cfg.reinforce_decay) * reward : reward;
        have_baseline = true;
        b.l_metric = -reward;
        if (!sample.empty() && advantage != 0.0) {
          std::vector<int> seq = ex.prompt;
          seq.insert(seq.end(), sample.begin(), sample.end());
          std::vector<int> input(seq.begin(), seq.end() - 1);
          Var z = ops::slice_rows(model.forward(tape, input, ex.y), static_cast<Index>(ex.prompt.size()) - 1,
                                  static_cast<Index>(sample.size()));
          Var nll = ops::cross_entropy(z, sample);
          total = ops::add(total, ops::scale(nll, cfg.weights.metric * advantage));
        }
      }
      check_finite(b, step);
      tape.backward(total);
      opt.step();
      ++step;
      log.steps.push_back(b);
      mean.l_g += b.l_g;
      mean.l_metric += b.l_metric;
      mean.l_topic += b.l_topic;
      mean.l_causal += b.l_causal;
      ++n;
    }
    if (n > 0) {
      mean.l_g /= n;
      mean.l_metric /= n;
      mean.l_topic /= n;
      mean.l_causal /= n;
      log.epochs.push_back(mean);
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Generation

DecodeMode parse_decode_mode(std::string_view name) {
  if (name == "greedy") return DecodeMode::greedy;
  if (name == "temperature" || name == "sample") return DecodeMode::temperature;
  throw ConfigError("unknown decode mode '" + std::string(name) + "' (expected greedy or temperature)");
}

std::vector<int> generate(const Transformer& model, const Vocabulary& vocab, std::span<const int> prompt,
                          MetricClass y, const DecodeConfig& cfg) {
  if (prompt.empty()) throw DataError("generate: empty prompt");
  if (cfg.mode == DecodeMode::temperature && !(cfg.temperature > 0.0)) {
    throw ConfigError("generate: temperature must be positive");
  }
  const int eot = vocab.special(Vocabulary::kEndText);
  Rng rng(cfg.seed);
  std::vector<int> ids(prompt.begin(), prompt.end());
  std::vector<int> out;
  while (static_cast<int>(out.size()) < cfg.max_new_tokens && static_cast<int>(ids.size()) < model.config().max_len) {
    const Matrix z = model.logits(ids, y);
    const RowVector row = z.row(z.rows() - 1);
    int next = 0;
    if (cfg.mode == DecodeMode::greedy) {
      Index k;
      row.maxCoeff(&k);
      next = static_cast<int>(k);
    } else {
      const RowVector p = ((row.array() - row.maxCoeff()) / cfg.temperature).exp().matrix();
      std::vector<double> w(p.data(), p.data() + p.size());
      next = rng.categorical(w);
    }
    if (next == eot) break;
    out.push_back(next);
    ids.push_back(next);
  }
  return out;
}

}  // namespace cam
