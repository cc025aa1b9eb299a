#include "cam/corpus.hpp"
#include "cam/transformer.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

using namespace cam;

namespace {

TransformerConfig tiny_config(int vocab) {
  TransformerConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 16;
  c.control_dim = 8;
  c.max_len = 48;
  c.vocab_size = vocab;
  c.seed = 5;
  return c;
}

// Marker corpus with its vocabulary, examples and frozen feedback models.
struct Setup {
  std::vector<Document> docs;
  Vocabulary vocab;
  std::vector<GenExample> examples;
  BagClassifier metric_clf;
  BagClassifier topic_clf;
  std::optional<FeatureClassifier> fc;
  SoftBagView metric_view, topic_view;
  SoftFeatureMap map;

  explicit Setup(int n = 60) {
    MarkerConfig mc;
    mc.docs = n;
    mc.seed = 11;
    docs = marker_corpus(mc);
    vocab = Vocabulary::build(docs, 2, 200);
    for (const auto& d : docs) examples.push_back(make_example(vocab, d, "participation"));
    std::vector<LabeledText> by_metric, by_topic;
    std::vector<FeatureVector> feats;
    std::vector<int> labels;
    for (const auto& d : docs) {
      by_metric.push_back({d.text, static_cast<int>(d.buckets.at("participation"))});
      by_topic.push_back({d.text, *d.topic});
      feats.push_back(extract_features(d));
      labels.push_back(static_cast<int>(d.buckets.at("participation")));
    }
    BagConfig bc;
    bc.buckets = 1u << 12;
    bc.dim = 8;
    bc.seed = 2;
    metric_clf = BagClassifier::train(by_metric, bc).first;
    bc.classes = {"0", "1"};
    topic_clf = BagClassifier::train(by_topic, bc).first;
    FeatureClassifierConfig fcc;
    fcc.features = {Feature::word_count, Feature::sentence_count, Feature::verb_count};
    fcc.epochs = 5;
    fc = FeatureClassifier::train(feats, labels, fcc).first;
    metric_view = metric_clf.soft_view(vocab.tokens());
    topic_view = topic_clf.soft_view(vocab.tokens());
    map = SoftFeatureMap::build(vocab.tokens());
  }

  Feedback feedback() const { return {&metric_view, &topic_view, &*fc, &map, &metric_clf, &vocab}; }
};

Matrix one_hot(std::span<const int> ids, Index vocab) {
  Matrix m = Matrix::Zero(static_cast<Index>(ids.size()), vocab);
  for (std::size_t i = 0; i < ids.size(); ++i) m(static_cast<Index>(i), ids[i]) = 1.0;
  return m;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void perturb(ParameterSet& params, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (Parameter* p : params.all()) p->value += testing::random_matrix(rng, p->value.rows(), p->value.cols(), scale);
}

}  // namespace

TEST_CASE("prompt format") {
  const Setup s(12);
  const std::vector<std::string> kw = {"cat"};
  const auto ids = format_prompt(s.vocab, MetricClass::high, 1, kw);
  REQUIRE(ids.size() == 5);
  CHECK(s.vocab.token(ids[0]) == "<m_high>");
  CHECK(s.vocab.token(ids[1]) == "<t1>");
  CHECK(s.vocab.token(ids[2]) == "<kw>");
  CHECK(s.vocab.token(ids[3]) == "<unk>");  // "cat" is not in the marker vocabulary
  CHECK(s.vocab.token(ids[4]) == "<sot>");

  const auto empty = format_prompt(s.vocab, MetricClass::low, 0, {});
  REQUIRE(empty.size() == 4);
  CHECK(s.vocab.token(empty[2]) == "<kw>");
  CHECK(s.vocab.token(empty[3]) == "<sot>");

  const std::string noun = s.docs[0].keywords[0];
  const std::vector<std::string> kws = {noun, "zzlow"};
  const std::vector<std::string> text = {"zzhigh", "."};
  const ParsedPrompt p = parse_prompt(s.vocab, format_prompt(s.vocab, MetricClass::medium, 1, kws, text));
  CHECK(p.metric == MetricClass::medium);
  CHECK(p.topic == 1);
  CHECK(p.keywords == kws);
  CHECK(s.vocab.decode_tokens(p.text) == text);

  CHECK_THROWS_AS(format_prompt(s.vocab, MetricClass::low, 7, {}), ConfigError);
}

TEST_CASE("generator tokens round trip through text") {
  const std::string text = "The cat sat quickly. It ran.\n\nA new paragraph here.";
  const auto toks = text_to_tokens(text);
  const std::vector<std::string> expected = {"the", "cat", "sat", "quickly", ".", "it", "ran", ".",
                                             "<p>", "a",   "new", "paragraph", "here", "."};
  CHECK(toks == expected);
  CHECK(text_to_tokens(tokens_to_text(toks)) == toks);
  CHECK(extract_features(tokens_to_text(toks)).row() == extract_features(text).row());
}

TEST_CASE("controlled attention") {
  Tape t(false);
  Rng rng(4);
  const Index d = 4;
  auto rnd = [&] { return t.constant(testing::random_matrix(rng, d, d)); };
  AttentionWeights w{rnd(), rnd(), rnd(), t.constant(Matrix::Identity(d, d))};
  const Var eta = t.constant(testing::random_matrix(rng, 1, d));

  SUBCASE("single position attends to itself") {
    const Var x = t.constant(testing::random_matrix(rng, 1, d));
    const Matrix v = x.value() * w.wv.value();
    for (auto m : {AttentionMode::off, AttentionMode::additive, AttentionMode::replace}) {
      CHECK((controlled_attention(x, w, eta, m, 2).value() - v).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
  SUBCASE("additive with zero control query equals off") {
    const Var x = t.constant(testing::random_matrix(rng, 5, d));
    const Var zero = t.constant(Matrix::Zero(1, d));
    CHECK(controlled_attention(x, w, zero, AttentionMode::additive, 2).value() ==
          controlled_attention(x, w, Var{}, AttentionMode::off, 2).value());
  }
  SUBCASE("hand-computed two-position case") {
    // d_k = 2, one head, identity projections except a scaled query.
    Matrix x(2, 2);
    x << 1, 0, 0, 1;
    Matrix wq(2, 2);
    wq << 2, 0, 0, 1;
    const Matrix id = Matrix::Identity(2, 2);
    AttentionWeights hw{t.constant(wq), t.constant(id), t.constant(id), t.constant(id)};
    const Matrix out = controlled_attention(t.constant(x), hw, Var{}, AttentionMode::off, 1).value();
    // Row 0 sees only itself. Row 1: q = (0, 1), scores (0, 1)/sqrt 2.
    const double a = std::exp(0.0), b = std::exp(1.0 / std::sqrt(2.0));
    CHECK(out(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out(0, 1) == doctest::Approx(0.0));
    CHECK(out(1, 0) == doctest::Approx(a / (a + b)).epsilon(1e-12));
    CHECK(out(1, 1) == doctest::Approx(b / (a + b)).epsilon(1e-12));
  }
  SUBCASE("replace mode uses the control query at every position") {
    const Matrix x = testing::random_matrix(rng, 3, d);
    const Matrix q = Matrix::Ones(3, 1) * eta.value();
    AttentionWeights rw = w;
    // With W_Q set so that x W_Q reproduces the broadcast query, off mode is the oracle.
    const Matrix wq = x.completeOrthogonalDecomposition().pseudoInverse() * q;
    rw.wq = t.constant(wq);
    const Matrix expect = controlled_attention(t.constant(x), rw, Var{}, AttentionMode::off, 2).value();
    const Matrix got = controlled_attention(t.constant(x), w, eta, AttentionMode::replace, 2).value();
    CHECK((got - expect).cwiseAbs().maxCoeff() <= 1e-9);
  }
  SUBCASE("missing control query") {
    const Var x = t.constant(testing::random_matrix(rng, 2, d));
    CHECK_THROWS_AS(controlled_attention(x, w, Var{}, AttentionMode::additive, 2), ConfigError);
  }
  CHECK_THROWS_AS(parse_attention_mode("both"), ConfigError);
}

TEST_CASE("controlled layer norm") {
  Tape t(false);
  auto ln = [&](Matrix x, double g, double b) {
    const Index d = x.cols();
    return controlled_layer_norm(t.constant(x), t.constant(Matrix::Constant(1, d, g)),
                                 t.constant(Matrix::Constant(1, d, b)))
        .value();
  };
  Matrix v(1, 2);
  v << 1, -1;
  Matrix r = ln(v, 1, 0);
  CHECK(r(0, 0) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(r(0, 1) == doctest::Approx(-1.0).epsilon(1e-5));
  r = ln(v, 2, 1);
  CHECK(r(0, 0) == doctest::Approx(3.0).epsilon(1e-5));
  CHECK(r(0, 1) == doctest::Approx(-1.0).epsilon(1e-5));
  r = ln(Matrix::Constant(1, 3, 4.0), 2, 0.5);
  CHECK(r == Matrix::Constant(1, 3, 0.5));
}

TEST_CASE("forward pass") {
  const Setup s(12);
  Transformer m(tiny_config(s.vocab.size()));
  const auto& ex = s.examples[0];
  std::vector<int> ids = ex.prompt;
  ids.insert(ids.end(), ex.article.begin(), ex.article.end());

  SUBCASE("identity initialization") {
    const Matrix base = m.logits(ids, MetricClass::low, Injections::none());
    CHECK(base.allFinite());
    for (auto mode : {AttentionMode::additive}) {
      for (auto y : {MetricClass::low, MetricClass::high}) {
        CHECK(m.logits(ids, y, {true, true, mode}) == base);
      }
    }
  }
  SUBCASE("causal masking") {
    perturb(m.params(), 3, 0.05);
    const Matrix a = m.logits(ids, MetricClass::medium);
    std::vector<int> changed = ids;
    const std::size_t t = 6;
    for (std::size_t k = t + 1; k < changed.size(); ++k) changed[k] = (changed[k] + 3) % s.vocab.size();
    const Matrix b = m.logits(changed, MetricClass::medium);
    CHECK(a.topRows(t + 1) == b.topRows(t + 1));
    CHECK(a.bottomRows(1) != b.bottomRows(1));
  }
  SUBCASE("overlong input") {
    std::vector<int> lng(49, 1);
    CHECK_THROWS_AS(m.logits(lng, MetricClass::low), ShapeError);
  }
  SUBCASE("config validation") {
    TransformerConfig c = tiny_config(10);
    c.heads = 3;
    CHECK_THROWS_AS(Transformer{c}, ConfigError);
    TransformerConfig full = tiny_config(10);
    full.heads = 16;
    full.dim = 768;
    CHECK_NOTHROW(full.validate());
  }
}

TEST_CASE("language-model loss") {
  Tape t(false);
  const std::vector<int> targets = {3, 1000, 7};
  CHECK(loss_lm(t.constant(Matrix::Zero(3, 1024)), targets).scalar() ==
        doctest::Approx(std::log(1024.0)).epsilon(1e-12));
  Matrix peaked = Matrix::Zero(3, 1024);
  for (int r = 0; r < 3; ++r) peaked(r, targets[r]) = 50.0;
  CHECK(loss_lm(t.constant(peaked), targets).scalar() < 1e-3);

  Rng rng(6);
  const Matrix z = testing::random_matrix(rng, 4, 9, 2.0);
  const std::vector<int> tg = {0, 8, 3, 3};
  double oracle = 0.0;
  for (Index r = 0; r < 4; ++r) {
    double mx = z.row(r).maxCoeff(), se = 0.0;
    for (Index c = 0; c < 9; ++c) se += std::exp(z(r, c) - mx);
    oracle += -(z(r, tg[r]) - mx - std::log(se));
  }
  CHECK(std::abs(loss_lm(t.constant(z), tg).scalar() - oracle / 4) <= 1e-10);
  const std::vector<int> bad = {9};
  CHECK_THROWS_AS(loss_lm(t.constant(Matrix::Zero(1, 9)), bad), DataError);
}

TEST_CASE("metric and topic losses") {
  Tape t(false);
  SoftBagView v;
  v.vocab_size = 2;
  v.dim = 1;
  v.groups = {{5, {0}, RowVector::Constant(1, 1.0)}};
  v.head_weight = Matrix::Zero(1, 3);
  v.head_bias = Matrix::Zero(1, 3);
  Matrix p(1, 2);
  p << 1.0, 0.0;
  CHECK(loss_metric(t.constant(p), 1, v).scalar() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  v.head_bias << 0.0, 0.0, 1000.0;
  CHECK(loss_metric(t.constant(p), 2, v).scalar() == 0.0);

  SoftBagView topics = v;
  topics.head_weight = Matrix::Zero(1, 20);
  topics.head_bias = Matrix::Zero(1, 20);
  CHECK(loss_topic(t.constant(p), 4, topics).scalar() == doctest::Approx(std::log(20.0)).epsilon(1e-12));
  topics.head_bias(0, 4) = 1000.0;
  CHECK(loss_topic(t.constant(p), 4, topics).scalar() == 0.0);

  const Setup s(45);
  Rng rng(9);
  const Matrix w0 = testing::random_matrix(rng, 5, s.vocab.size(), 0.5);
  for (int y = 0; y < 3; ++y) {
    CHECK(testing::check_input_gradient(w0, [&](Tape&, const Var& w) {
            return loss_metric(ops::softmax_rows(w), y, s.metric_view);
          }) <= 1e-4);
  }
  CHECK(testing::check_input_gradient(
            w0, [&](Tape&, const Var& w) { return loss_topic(ops::softmax_rows(w), 1, s.topic_view); }) <= 1e-4);
}

TEST_CASE("causal loss") {
  Tape t(false);
  auto logq = [&](std::initializer_list<double> q) {
    RowVector r(static_cast<Index>(q.size()));
    Index i = 0;
    for (double x : q) r(i++) = std::log(std::max(x, 1e-12));
    return t.constant(r);
  };
  RowVector p(3);
  p << 1, 0, 0;
  CHECK(causal_cross_entropy(p, logq({1, 0, 0}), 0, CausalMode::full).scalar() == 0.0);
  CHECK(causal_cross_entropy(p, logq({1, 0, 0}), 0, CausalMode::literal).scalar() == 0.0);
  p << 0.5, 0.5, 0.0;
  const double expect = -0.5 * std::log(0.25) - 0.5 * std::log(0.75);
  CHECK(causal_cross_entropy(p, logq({0.25, 0.75, 0}), 0, CausalMode::full).scalar() ==
        doctest::Approx(expect).epsilon(1e-12));
  CHECK(std::abs(expect - 0.8370) < 5e-5);
  CHECK(causal_cross_entropy(p, logq({0.25, 0.75, 0}), 1, CausalMode::literal).scalar() ==
        doctest::Approx(-0.5 * std::log(0.75)).epsilon(1e-12));
  CHECK_THROWS_AS(parse_causal_mode("partial"), ConfigError);

  const Setup s(45);
  const GenExample& ex = s.examples[1];
  SUBCASE("q = p gives the entropy of p") {
    const Matrix oh = one_hot(ex.article, s.vocab.size());
    const Var l = loss_causal(ex.features, t.constant(oh), static_cast<int>(ex.y), *s.fc, s.map, CausalMode::full);
    const RowVector pr = s.fc->predict(ex.features);
    const double entropy = -(pr.array() * pr.array().log()).sum();
    CHECK(l.scalar() == doctest::Approx(entropy).epsilon(1e-12));
  }
  SUBCASE("q matches the hard path on decoded text") {
    const Matrix oh = one_hot(ex.article, s.vocab.size());
    const Var soft = s.fc->log_probs(soft_expected_features(t.constant(oh), s.map));
    const FeatureVector hard = extract_features(tokens_to_text(s.vocab.decode_tokens(ex.article)));
    CHECK(soft.value() == s.fc->log_probs(t.constant(hard.row())).value());
  }
  SUBCASE("gradients") {
    Rng rng(10);
    const Matrix w0 = testing::random_matrix(rng, 6, s.vocab.size(), 0.5);
    for (auto mode : {CausalMode::full, CausalMode::literal}) {
      CHECK(testing::check_input_gradient(w0, [&](Tape&, const Var& w) {
              return loss_causal(ex.features, ops::softmax_rows(w), static_cast<int>(ex.y), *s.fc, s.map, mode);
            }) <= 1e-4);
    }
  }
}

TEST_CASE("soft metric loss on one-hot rows equals the hard unigram path") {
  const Setup s(45);
  Tape t(false);
  for (int i = 0; i < 5; ++i) {
    const GenExample& ex = s.examples[static_cast<std::size_t>(i)];
    const Matrix oh = one_hot(ex.article, s.vocab.size());
    const std::string text = tokens_to_text(s.vocab.decode_tokens(ex.article));
    const double hard = -s.metric_clf.log_predict_unigram(text)(static_cast<Index>(ex.y));
    CHECK(loss_metric(t.constant(oh), static_cast<int>(ex.y), s.metric_view).scalar() == hard);
  }
}

TEST_CASE("loss bundle") {
  LossBundle b{1.5, 0.25, 2.0, 0.75, {1, 1, 1, 1}};
  CHECK(b.total() == 4.5);
  LossBundle d = b;
  d.weights.causal = 2.0;
  CHECK(d.total() - b.total() == 0.75);
  d = b;
  d.weights.g = 2.0;
  CHECK(d.total() - b.total() == 1.5);
  CHECK(b.to_json()["total"] == 4.5);
}

TEST_CASE("total-loss gradients reach every parameter") {
  const Setup s(30);
  TransformerConfig c = tiny_config(s.vocab.size());
  for (auto mode : {AttentionMode::additive, AttentionMode::replace}) {
    c.attention = mode;
    Transformer m(c);
    // Move adapters off zero so every path carries gradient.
    perturb(m.params(), 8, 0.1);
    GenExample ex = s.examples[2];
    ex.article.resize(8);
    const Feedback fb = s.feedback();
    const auto report = testing::check_parameter_gradients(m.params(), [&](Tape& t) {
      Var total;
      example_losses(t, m, ex, fb, {}, CausalMode::full, &total);
      return total;
    });
    INFO(report.worst_name);
    CHECK(report.worst <= 1e-4);
  }
}

TEST_CASE("generator training") {
  const Setup s(60);
  const TransformerConfig c = tiny_config(s.vocab.size());
  const Feedback fb = s.feedback();

  SUBCASE("zero auxiliary weights reproduce plain LM training") {
    Transformer a(c), b(c);
    GenTrainConfig tc;
    tc.epochs = 1;
    tc.max_steps = 20;
    tc.seed = 4;
    tc.weights = {1, 0, 0, 0};
    train_generator(a, s.examples, fb, tc);
    train_generator(b, s.examples, Feedback{}, tc);
    for (std::size_t i = 0; i < a.params().size(); ++i) {
      CHECK(a.params().all()[i]->value == b.params().all()[i]->value);
    }
  }
  SUBCASE("deterministic checkpoints") {
    GenTrainConfig tc;
    tc.epochs = 1;
    tc.max_steps = 15;
    tc.seed = 9;
    const auto dir = std::filesystem::temp_directory_path() / "cam_test_gen";
    std::filesystem::remove_all(dir);
    for (int run = 0; run < 2; ++run) {
      Transformer m(c);
      train_generator(m, s.examples, fb, tc);
      m.save(dir / std::to_string(run), s.vocab);
    }
    CHECK(read_file(dir / "0" / "params.bin") == read_file(dir / "1" / "params.bin"));
    CHECK(read_file(dir / "0" / "header.json") == read_file(dir / "1" / "header.json"));
    auto [loaded, vocab] = Transformer::load(dir / "0");
    CHECK(vocab.tokens() == s.vocab.tokens());
    Transformer m(c);
    train_generator(m, s.examples, fb, tc);
    CHECK(loaded.logits(s.examples[0].prompt, MetricClass::high) == m.logits(s.examples[0].prompt, MetricClass::high));
    std::filesystem::remove_all(dir);
  }
  SUBCASE("REINFORCE mode runs deterministically") {
    GenTrainConfig tc;
    tc.epochs = 1;
    tc.max_steps = 4;
    tc.reinforce = true;
    Transformer a(c), b(c);
    const auto la = train_generator(a, s.examples, fb, tc);
    const auto lb = train_generator(b, s.examples, fb, tc);
    CHECK(la.steps.back().l_metric == lb.steps.back().l_metric);
    CHECK(a.params().all()[0]->value == b.params().all()[0]->value);
    CHECK_THROWS_AS(train_generator(a, s.examples, Feedback{}, tc), ConfigError);
  }
}

TEST_CASE("language-model loss descends over three epochs") {
  MarkerConfig mc;
  mc.docs = 200;
  mc.seed = 21;
  const auto docs = marker_corpus(mc);
  const Vocabulary vocab = Vocabulary::build(docs, 2, 200);
  std::vector<GenExample> ex;
  for (const auto& d : docs) ex.push_back(make_example(vocab, d, "participation"));
  Transformer m(tiny_config(vocab.size()));
  GenTrainConfig tc;
  tc.epochs = 3;
  tc.seed = 1;
  const auto log = train_generator(m, ex, Feedback{}, tc);
  REQUIRE(log.steps.size() == 600);
  auto window = [&](std::size_t from) {
    double sum = 0.0;
    for (std::size_t i = from; i < from + 50; ++i) sum += log.steps[i].l_g;
    return sum / 50;
  };
  CHECK(window(550) < window(0));
  CHECK(log.epochs.size() == 3);
}

TEST_CASE("generation") {
  const Setup s(60);
  Transformer m(tiny_config(s.vocab.size()));
  perturb(m.params(), 2, 0.05);
  const auto& prompt = s.examples[0].prompt;
  DecodeConfig greedy;
  greedy.max_new_tokens = 10;
  const auto g1 = generate(m, s.vocab, prompt, MetricClass::high, greedy);
  CHECK(g1 == generate(m, s.vocab, prompt, MetricClass::high, greedy));
  CHECK(g1.size() <= 10);
  DecodeConfig sample;
  sample.mode = DecodeMode::temperature;
  sample.seed = 77;
  sample.max_new_tokens = 12;
  CHECK(generate(m, s.vocab, prompt, MetricClass::low, sample) ==
        generate(m, s.vocab, prompt, MetricClass::low, sample));
  CHECK_THROWS_AS(generate(m, s.vocab, std::vector<int>{}, MetricClass::low, greedy), DataError);
  CHECK_THROWS_AS(parse_decode_mode("beam"), ConfigError);
}
