#include "cam/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace cam {

using json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

std::uint64_t fnv1a(std::uint64_t h, std::string_view bytes) {
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= kFnvPrime;
  }
  return h;
}

RowVector softmax(const RowVector& logits) {
  RowVector p = (logits.array() - logits.maxCoeff()).exp().matrix();
  return p / p.sum();
}

bool is_word_entry(const std::string& entry) {
  const auto toks = tokenize(entry);
  return toks.size() == 1 && toks[0] == entry;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// Held-out split shared by both classifiers: seeded permutation, the last
// heldout_fraction of it is held out.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double fraction,
                                                                            Rng& rng) {
  auto order = iota_indices(n);
  rng.shuffle(order);
  const auto held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> test(order.end() - static_cast<std::ptrdiff_t>(held), order.end());
  return {train, test};
}

void check_labels(std::span<const int> labels, int classes) {
  std::vector<int> seen(static_cast<std::size_t>(classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= classes) throw DataError("label " + std::to_string(y) + " outside the class range");
    seen[static_cast<std::size_t>(y)] = 1;
  }
  if (std::count(seen.begin(), seen.end(), 1) < 2) throw DataError("classifier training needs at least two classes");
}

}  // namespace

BagClassifier::BagClassifier(BagConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.buckets == 0 || cfg_.dim < 1 || cfg_.classes.size() < 2) throw ConfigError("invalid bag classifier config");
  head_w_ = Matrix::Zero(cfg_.dim, static_cast<Index>(cfg_.classes.size()));
  head_b_ = RowVector::Zero(static_cast<Index>(cfg_.classes.size()));
}

std::uint32_t BagClassifier::bucket(std::string_view gram) const {
  std::uint64_t h = kFnvOffset;
  for (int i = 0; i < 8; ++i) {
    const char byte = static_cast<char>((cfg_.hash_seed >> (8 * i)) & 0xff);
    h = fnv1a(h, std::string_view(&byte, 1));
  }
  return static_cast<std::uint32_t>(fnv1a(h, gram) % cfg_.buckets);
}

std::vector<std::uint32_t> BagClassifier::feature_ids(std::string_view text, bool with_bigrams) const {
  const auto toks = tokenize(text);
  std::vector<std::uint32_t> ids;
  for (const auto& t : toks) ids.push_back(bucket(t));
  if (with_bigrams) {
    for (std::size_t i = 1; i < toks.size(); ++i) ids.push_back(bucket(toks[i - 1] + '\x01' + toks[i]));
  }
  return ids;
}

RowVector BagClassifier::init_row(std::uint32_t b) const {
  RowVector r(cfg_.dim);
  std::uint64_t s = splitmix64(cfg_.hash_seed ^ (0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(b) + 1)));
  const double bound = 1.0 / cfg_.dim;
  for (int k = 0; k < cfg_.dim; ++k) {
    s = splitmix64(s);
    const double u = static_cast<double>(s >> 11) * 0x1.0p-53;
    r(k) = (2.0 * u - 1.0) * bound;
  }
  return r;
}

RowVector BagClassifier::row(std::uint32_t b) const {
  auto it = rows_.find(b);
  return it != rows_.end() ? it->second : init_row(b);
}

namespace {

// Mass-weighted mean of bucket embeddings, summed in the order given.
template <typename Terms>
RowVector weighted_mean(const Terms& terms, int dim, double& total) {
  RowVector h = RowVector::Zero(dim);
  total = 0.0;
  for (const auto& [m, e] : terms) {
    h += m * *e;
    total += m;
  }
  if (total > 0.0) h /= total;
  return h;
}

Var head_log_probs(const Var& h, const Matrix& w, const Matrix& b) {
  Tape& t = h.tape();
  return ops::log_softmax_rows(ops::add_const(ops::matmul(h, t.constant(w)), b));
}

RowVector uniform_log_probs(Index c) { return RowVector::Constant(c, -std::log(static_cast<double>(c))); }

}  // namespace

RowVector BagClassifier::predict_ids(std::span<const std::uint32_t> ids) const {
  return log_predict_ids(ids).array().exp().matrix();
}

RowVector BagClassifier::log_predict_ids(std::span<const std::uint32_t> ids) const {
  if (ids.empty()) return uniform_log_probs(num_classes());
  std::map<std::uint32_t, double> counts;
  for (auto id : ids) counts[id] += 1.0;
  std::vector<RowVector> rows;
  rows.reserve(counts.size());
  std::vector<std::pair<double, const RowVector*>> terms;
  for (const auto& [id, n] : counts) rows.push_back(row(id));
  std::size_t k = 0;
  for (const auto& [id, n] : counts) terms.emplace_back(n, &rows[k++]);
  double total = 0.0;
  const RowVector h = weighted_mean(terms, cfg_.dim, total);
  Tape tape(false);
  return head_log_probs(tape.constant(h), head_w_, head_b_).value();
}

RowVector BagClassifier::predict(std::string_view text) const { return predict_ids(feature_ids(text, cfg_.bigrams)); }

RowVector BagClassifier::predict_unigram(std::string_view text) const { return predict_ids(feature_ids(text, false)); }

RowVector BagClassifier::log_predict(std::string_view text) const {
  return log_predict_ids(feature_ids(text, cfg_.bigrams));
}

RowVector BagClassifier::log_predict_unigram(std::string_view text) const {
  return log_predict_ids(feature_ids(text, false));
}

int BagClassifier::predict_class(std::string_view text) const {
  Index k;
  predict(text).maxCoeff(&k);
  return static_cast<int>(k);
}

std::pair<BagClassifier, TrainReport> BagClassifier::train(std::span<const LabeledText> data, const BagConfig& cfg) {
  std::vector<int> labels;
  for (const auto& d : data) labels.push_back(d.label);
  BagClassifier clf(cfg);
  check_labels(labels, clf.num_classes());

  Rng rng(cfg.seed);
  auto [train_idx, held_idx] = holdout_split(data.size(), cfg.heldout_fraction, rng);
  std::vector<std::vector<std::uint32_t>> ids(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) ids[i] = clf.feature_ids(data[i].text, cfg.bigrams);

  // Adam with lazily updated embedding rows (moments live with the row).
  struct RowState {
    RowVector m, v;
  };
  std::unordered_map<std::uint32_t, RowState> row_state;
  const int C = clf.num_classes();
  Matrix mw = Matrix::Zero(cfg.dim, C), vw = Matrix::Zero(cfg.dim, C);
  RowVector mb = RowVector::Zero(C), vb = RowVector::Zero(C);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = cfg.learning_rate;
  long step = 0;

  TrainReport report;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train_idx);
    double total = 0.0;
    for (std::size_t i : train_idx) {
      const auto& x = ids[i];
      if (x.empty()) continue;
      RowVector h = RowVector::Zero(cfg.dim);
      for (auto id : x) h += clf.row(id);
      h /= static_cast<double>(x.size());
      const RowVector p = softmax(h * clf.head_w_ + clf.head_b_);
      total += -std::log(std::max(p(data[i].label), 1e-300));
      RowVector g = p;
      g(data[i].label) -= 1.0;
      const Matrix gw = h.transpose() * g;
      const RowVector gh = (g * clf.head_w_.transpose()) / static_cast<double>(x.size());

      ++step;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      auto adam = [&](auto& param, auto& m, auto& v, const auto& grad) {
        m = b1 * m + (1 - b1) * grad;
        v = (b2 * v.array() + (1 - b2) * grad.array().square()).matrix();
        param -= (lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps)).matrix();
      };
      adam(clf.head_w_, mw, vw, gw);
      adam(clf.head_b_, mb, vb, g);
      // A bucket repeated in the text gets its gradient summed.
      std::map<std::uint32_t, int> counts;
      for (auto id : x) ++counts[id];
      for (const auto& [id, n] : counts) {
        auto [it, fresh] = clf.rows_.try_emplace(id);
        if (fresh) it->second = clf.init_row(id);
        auto& st = row_state[id];
        if (st.m.size() == 0) {
          st.m = RowVector::Zero(cfg.dim);
          st.v = RowVector::Zero(cfg.dim);
        }
        const RowVector grad = gh * static_cast<double>(n);
        adam(it->second, st.m, st.v, grad);
      }
    }
    report.final_loss = train_idx.empty() ? 0.0 : total / static_cast<double>(train_idx.size());
  }
  auto accuracy = [&](const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    long ok = 0;
    for (auto i : idx) {
      Index k;
      clf.predict_ids(ids[i]).maxCoeff(&k);
      ok += k == data[i].label;
    }
    return static_cast<double>(ok) / static_cast<double>(idx.size());
  };
  report.train_accuracy = accuracy(train_idx);
  report.heldout_accuracy = accuracy(held_idx);
  report.heldout_size = static_cast<long>(held_idx.size());
  return {std::move(clf), report};
}

SoftBagView BagClassifier::soft_view(std::span<const std::string> vocabulary) const {
  SoftBagView v;
  v.vocab_size = static_cast<Index>(vocabulary.size());
  v.dim = cfg_.dim;
  std::map<std::uint32_t, std::vector<Index>> by_bucket;
  for (std::size_t i = 0; i < vocabulary.size(); ++i) {
    if (is_word_entry(vocabulary[i])) by_bucket[bucket(vocabulary[i])].push_back(static_cast<Index>(i));
  }
  for (auto& [b, entries] : by_bucket) v.groups.push_back({b, std::move(entries), row(b)});
  v.head_weight = head_w_;
  v.head_bias = head_b_;
  return v;
}

RowVector BagClassifier::predict_soft(const Matrix& distributions, const SoftBagView& view) const {
  Tape tape(false);
  return soft_bag_log_probs(tape.constant(distributions), view).value().array().exp().matrix();
}

Var soft_bag_log_probs(const Var& distributions, const SoftBagView& view) {
  if (distributions.cols() != view.vocab_size) {
    throw ShapeError("predict_soft: distributions " + shape_string(distributions.value()) + " vs vocabulary of " +
                     std::to_string(view.vocab_size));
  }
  check_distribution_rows(distributions.value(), "predict_soft");
  Tape& t = distributions.tape();
  Var mass = ops::sum_rows(distributions);  // 1 x V expected token counts
  const Matrix& mv = mass.value();
  std::vector<double> group_mass;
  std::vector<std::pair<double, const RowVector*>> terms;
  for (const auto& g : view.groups) {
    double m = 0.0;
    for (Index e : g.entries) m += mv(0, e);
    group_mass.push_back(m);
    terms.emplace_back(m, &g.embedding);
  }
  double words = 0.0;
  RowVector h = weighted_mean(terms, view.dim, words);
  if (words < 1e-12) {
    // No expected word mass: the empty-text convention.
    return t.constant(uniform_log_probs(view.head_bias.cols()));
  }
  // dh/dm_v = (E_g - h) / W for entry v in bucket group g.
  Var hv = t.record(h, {mass}, [mass, &view, words, id = t.size()](const Matrix& g) {
    Tape& tp = mass.tape();
    if (!tp.requires_grad(mass)) return;
    const Matrix& hval = tp.value_of(static_cast<int>(id));
    Matrix& buf = tp.grad_buffer(mass);
    for (const auto& grp : view.groups) {
      const double d = (g.row(0) * (grp.embedding - hval.row(0)).transpose())(0, 0) / words;
      for (Index e : grp.entries) buf(0, e) += d;
    }
  });
  return head_log_probs(hv, view.head_weight, view.head_bias);
}

void BagClassifier::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json h;
  h["kind"] = "bag_classifier";
  h["buckets"] = cfg_.buckets;
  h["dim"] = cfg_.dim;
  h["orders"] = cfg_.bigrams ? json::array({1, 2}) : json::array({1});
  h["hash_seed"] = cfg_.hash_seed;
  h["classes"] = cfg_.classes;
  h["epochs"] = cfg_.epochs;
  h["learning_rate"] = cfg_.learning_rate;
  h["heldout_fraction"] = cfg_.heldout_fraction;
  h["seed"] = cfg_.seed;
  write_json(dir / "header.json", h);

  std::vector<std::uint32_t> keys;
  for (const auto& [k, r] : rows_) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  Matrix ids(1, static_cast<Index>(keys.size()));
  Matrix rows(static_cast<Index>(keys.size()), cfg_.dim);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    ids(0, static_cast<Index>(i)) = keys[i];
    rows.row(static_cast<Index>(i)) = rows_.at(keys[i]);
  }
  auto named = [](std::string name, const Matrix& m) {
    return NamedTensor{std::move(name), {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, m};
  };
  save_tensors(dir / "params.bin", {named("embedding.ids", ids), named("embedding.rows", rows),
                                    named("head.weight", head_w_), named("head.bias", head_b_)});
}

BagClassifier BagClassifier::load(const std::filesystem::path& dir) {
  const json h = read_json(dir / "header.json");
  if (h.value("kind", "") != "bag_classifier") throw DataError(dir.string() + " is not a bag classifier");
  BagConfig cfg;
  cfg.buckets = h.at("buckets").get<std::uint32_t>();
  cfg.dim = h.at("dim").get<int>();
  cfg.bigrams = h.at("orders").size() > 1;
  cfg.hash_seed = h.at("hash_seed").get<std::uint64_t>();
  cfg.classes = h.at("classes").get<std::vector<std::string>>();
  cfg.epochs = h.value("epochs", cfg.epochs);
  cfg.learning_rate = h.value("learning_rate", cfg.learning_rate);
  cfg.heldout_fraction = h.value("heldout_fraction", cfg.heldout_fraction);
  cfg.seed = h.value("seed", cfg.seed);
  BagClassifier clf(cfg);
  std::map<std::string, Matrix> t;
  for (auto& nt : load_tensors(dir / "params.bin")) t[nt.name] = std::move(nt.value);
  for (const char* name : {"embedding.ids", "embedding.rows", "head.weight", "head.bias"}) {
    if (!t.count(name)) throw DataError("classifier checkpoint lacks '" + std::string(name) + "'");
  }
  const Matrix& ids = t["embedding.ids"];
  const Matrix& rows = t["embedding.rows"];
  if (rows.rows() != ids.cols() || (ids.cols() > 0 && rows.cols() != cfg.dim)) {
    throw ShapeError("classifier checkpoint: embedding shapes disagree");
  }
  for (Index i = 0; i < ids.cols(); ++i) clf.rows_[static_cast<std::uint32_t>(ids(0, i))] = rows.row(i);
  if (t["head.weight"].rows() != cfg.dim || t["head.weight"].cols() != clf.num_classes()) {
    throw ShapeError("classifier checkpoint: head shape " + shape_string(t["head.weight"]));
  }
  clf.head_w_ = t["head.weight"];
  clf.head_b_ = t["head.bias"];
  return clf;
}

void FeatureClassifier::build(Rng& rng) {
  const auto k = static_cast<Index>(cfg_.features.size());
  select_ = Matrix::Zero(kNumFeatures, k);
  for (Index j = 0; j < k; ++j) select_(static_cast<int>(cfg_.features[static_cast<std::size_t>(j)]), j) = 1.0;
  net_ = Mlp::create(params_, "net", {k, cfg_.hidden, static_cast<Index>(cfg_.classes.size())}, Activation::tanh, rng);
}

std::pair<FeatureClassifier, TrainReport> FeatureClassifier::train(std::span<const FeatureVector> x,
                                                                    std::span<const int> labels,
                                                                    const FeatureClassifierConfig& cfg) {
  if (cfg.features.empty()) throw ConfigError("feature classifier needs at least one feature");
  if (x.size() != labels.size()) throw ShapeError("feature classifier: features and labels differ in length");
  check_labels(labels, static_cast<int>(cfg.classes.size()));
  FeatureClassifier fc;
  fc.cfg_ = cfg;
  Rng rng(cfg.seed);
  fc.build(rng);
  const Matrix all = feature_matrix(x, cfg.features);
  auto [train_idx, held_idx] = holdout_split(x.size(), cfg.heldout_fraction, rng);
  Matrix train_x(static_cast<Index>(train_idx.size()), all.cols());
  for (std::size_t i = 0; i < train_idx.size(); ++i) train_x.row(static_cast<Index>(i)) = all.row(static_cast<Index>(train_idx[i]));
  fc.std_ = Standardizer::fit(train_x);
  const Matrix z = fc.std_.apply(all);

  Adam opt(fc.params_.all(), {cfg.learning_rate});
  TrainReport report;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train_idx);
    double total = 0.0;
    int batches = 0;
    for (std::size_t s = 0; s < train_idx.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(train_idx.size(), s + static_cast<std::size_t>(cfg.batch_size));
      Matrix bx(static_cast<Index>(e - s), z.cols());
      std::vector<int> by;
      for (std::size_t i = s; i < e; ++i) {
        bx.row(static_cast<Index>(i - s)) = z.row(static_cast<Index>(train_idx[i]));
        by.push_back(labels[train_idx[i]]);
      }
      Tape tape;
      Var l = ops::cross_entropy(fc.net_(tape, tape.constant(bx)), by);
      total += l.scalar();
      ++batches;
      tape.backward(l);
      opt.step();
    }
    report.final_loss = batches ? total / batches : 0.0;
  }
  auto accuracy = [&](const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    long ok = 0;
    for (auto i : idx) {
      Index k;
      fc.predict(x[i]).maxCoeff(&k);
      ok += k == labels[i];
    }
    return static_cast<double>(ok) / static_cast<double>(idx.size());
  };
  report.train_accuracy = accuracy(train_idx);
  report.heldout_accuracy = accuracy(held_idx);
  report.heldout_size = static_cast<long>(held_idx.size());
  return {std::move(fc), report};
}

Var FeatureClassifier::log_probs(const Var& features) const {
  if (features.cols() != kNumFeatures) {
    throw ShapeError("feature classifier expects " + std::to_string(kNumFeatures) + " columns, got " +
                     shape_string(features.value()));
  }
  Tape& t = features.tape();
  Var x = ops::matmul(features, t.constant(select_));
  x = ops::mul_const(ops::add_const(x, (-std_.mean).replicate(x.rows(), 1)),
                     std_.scale.cwiseInverse().replicate(x.rows(), 1));
  return ops::log_softmax_rows(net_(t, x));
}

RowVector FeatureClassifier::predict(const FeatureVector& v) const {
  Tape tape(false);
  return log_probs(tape.constant(v.row())).value().array().exp().matrix();
}

void FeatureClassifier::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json h;
  h["kind"] = "feature_classifier";
  h["features"] = json::array();
  for (Feature f : cfg_.features) h["features"].push_back(feature_name(f));
  h["classes"] = cfg_.classes;
  h["hidden"] = cfg_.hidden;
  h["epochs"] = cfg_.epochs;
  h["batch_size"] = cfg_.batch_size;
  h["learning_rate"] = cfg_.learning_rate;
  h["heldout_fraction"] = cfg_.heldout_fraction;
  h["seed"] = cfg_.seed;
  h["standardizer_mean"] = std::vector<double>(std_.mean.data(), std_.mean.data() + std_.mean.size());
  h["standardizer_scale"] = std::vector<double>(std_.scale.data(), std_.scale.data() + std_.scale.size());
  write_json(dir / "header.json", h);
  save_parameters(dir / "params.bin", params_);
}

FeatureClassifier FeatureClassifier::load(const std::filesystem::path& dir) {
  const json h = read_json(dir / "header.json");
  if (h.value("kind", "") != "feature_classifier") throw DataError(dir.string() + " is not a feature classifier");
  FeatureClassifier fc;
  for (const auto& f : h.at("features")) fc.cfg_.features.push_back(parse_feature(f.get<std::string>()));
  fc.cfg_.classes = h.at("classes").get<std::vector<std::string>>();
  fc.cfg_.hidden = h.at("hidden").get<int>();
  fc.cfg_.epochs = h.value("epochs", fc.cfg_.epochs);
  fc.cfg_.batch_size = h.value("batch_size", fc.cfg_.batch_size);
  fc.cfg_.learning_rate = h.value("learning_rate", fc.cfg_.learning_rate);
  fc.cfg_.heldout_fraction = h.value("heldout_fraction", fc.cfg_.heldout_fraction);
  fc.cfg_.seed = h.value("seed", fc.cfg_.seed);
  Rng rng(0);
  fc.build(rng);
  const auto mean = h.at("standardizer_mean").get<std::vector<double>>();
  const auto scale = h.at("standardizer_scale").get<std::vector<double>>();
  if (mean.size() != fc.cfg_.features.size() || scale.size() != mean.size()) {
    throw DataError("feature classifier header: standardizer size mismatch");
  }
  fc.std_.mean = Eigen::Map<const RowVector>(mean.data(), static_cast<Index>(mean.size()));
  fc.std_.scale = Eigen::Map<const RowVector>(scale.data(), static_cast<Index>(scale.size()));
  load_parameters(dir / "params.bin", fc.params_);
  return fc;
}

}  // namespace cam
