#include "cam/classifier.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

#include <cmath>
#include <filesystem>

using namespace cam;

namespace {

const std::vector<std::string> kWords = {"market", "river", "stone", "cloud", "table", "music", "garden", "window",
                                         "paper", "engine", "forest", "bridge"};
const char* kMarkers[] = {"zzlow", "zzmed", "zzhigh"};

std::vector<LabeledText> marker_corpus(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LabeledText> out;
  for (int i = 0; i < n; ++i) {
    LabeledText t;
    t.label = i % 3;
    const int len = rng.uniform_int(6, 12);
    const int pos = rng.uniform_int(0, len - 1);
    for (int k = 0; k < len; ++k) {
      if (!t.text.empty()) t.text += ' ';
      t.text += k == pos ? kMarkers[t.label] : kWords[rng.uniform_int(kWords.size())];
    }
    out.push_back(t);
  }
  return out;
}

BagConfig small_bag() {
  BagConfig c;
  c.buckets = 1u << 12;
  c.dim = 8;
  c.epochs = 5;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("bag classifier learns a marker corpus") {
  const auto data = marker_corpus(500, 1);
  auto [clf, report] = BagClassifier::train(data, BagConfig{});
  CHECK(report.heldout_size == 50);
  CHECK(report.heldout_accuracy >= 0.95);
  // Memorization: training examples map back to their labels.
  int ok = 0;
  for (int i = 0; i < 30; ++i) ok += clf.predict_class(data[i].text) == data[i].label;
  CHECK(ok == 30);
  CHECK(std::abs(clf.predict("market river zzhigh").sum() - 1.0) <= 1e-9);
}

TEST_CASE("untrained classifier is uniform") {
  BagClassifier clf;
  Rng rng(2);
  RowVector mean = RowVector::Zero(3);
  for (int i = 0; i < 50; ++i) {
    std::string text = kWords[rng.uniform_int(kWords.size())] + " " + kWords[rng.uniform_int(kWords.size())];
    mean += clf.predict(text);
  }
  mean /= 50.0;
  for (int c = 0; c < 3; ++c) CHECK(std::abs(mean(c) - 1.0 / 3.0) <= 0.1);
  const RowVector empty = clf.predict("");
  for (int c = 0; c < 3; ++c) CHECK(empty(c) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("training is deterministic and hashing is stable") {
  const auto data = marker_corpus(120, 4);
  auto [a, ra] = BagClassifier::train(data, small_bag());
  auto [b, rb] = BagClassifier::train(data, small_bag());
  CHECK(a.predict("river zzmed stone") == b.predict("river zzmed stone"));
  CHECK(ra.final_loss == rb.final_loss);

  // FNV-1a of the seed bytes then the token, pinned so that a change in the
  // hashing scheme is caught on any platform.
  BagClassifier h;
  std::uint64_t x = 1469598103934665603ull;
  for (int i = 0; i < 8; ++i) x = (x ^ 0u) * 1099511628211ull;
  for (unsigned char c : std::string("cat")) x = (x ^ c) * 1099511628211ull;
  CHECK(h.bucket("cat") == static_cast<std::uint32_t>(x % (1u << 18)));
  BagConfig other;
  other.hash_seed = 1;
  CHECK(BagClassifier(other).bucket("cat") != h.bucket("cat"));
}

TEST_CASE("bigram channel is order sensitive") {
  const auto data = marker_corpus(300, 5);
  auto [clf, rep] = BagClassifier::train(data, small_bag());
  // Same unigrams, different bigrams.
  const std::string a = "river stone zzlow market";
  const std::string b = "market zzlow stone river";
  CHECK(clf.predict_unigram(a) == clf.predict_unigram(b));
  CHECK(clf.predict(a) != clf.predict(b));
}

TEST_CASE("single-class corpus is rejected") {
  std::vector<LabeledText> data = {{"a b", 1}, {"c d", 1}};
  CHECK_THROWS_AS(BagClassifier::train(data, small_bag()), DataError);
}

TEST_CASE("soft prediction") {
  const auto data = marker_corpus(200, 6);
  auto [clf, rep] = BagClassifier::train(data, small_bag());
  std::vector<std::string> vocab = {"<unk>", ".", "<p>"};
  for (const auto& w : kWords) vocab.push_back(w);
  for (const char* m : kMarkers) vocab.push_back(m);
  const SoftBagView view = clf.soft_view(vocab);
  const Index V = static_cast<Index>(vocab.size());

  SUBCASE("one-hot rows equal the unigram-only hard path") {
    const std::vector<int> ids = {3, 5, 1, 16, 7, 1};
    Matrix p = Matrix::Zero(static_cast<Index>(ids.size()), V);
    std::string text;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      p(static_cast<Index>(i), ids[i]) = 1.0;
      if (vocab[ids[i]] == ".") {
        text += ".";
      } else {
        text += (text.empty() ? "" : " ") + vocab[ids[i]];
      }
    }
    CHECK(clf.predict_soft(p, view) == clf.predict_unigram(text));
  }
  SUBCASE("uniform rows equal the head applied to the mean word embedding") {
    const Matrix p = Matrix::Constant(4, V, 1.0 / static_cast<double>(V));
    // Uniform mass weights every word entry equally, which is the hard path
    // on a text holding each word once.
    std::string text;
    for (const auto& w : vocab) {
      if (w.front() != '<' && w != ".") text += w + " ";
    }
    CHECK((clf.predict_soft(p, view) - clf.predict_unigram(text)).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("gradient w.r.t. the distributions") {
    // Differentiate through unnormalized positive weights so that finite
    // differences stay on the simplex.
    Rng rng(8);
    const Matrix w0 = testing::random_matrix(rng, 3, V, 0.5);
    const double err = testing::check_input_gradient(w0, [&](Tape&, const Var& w) {
      Var p = ops::softmax_rows(w);
      return ops::slice_cols(soft_bag_log_probs(p, view), 2, 1);
    });
    CHECK(err <= 1e-4);
  }
  SUBCASE("row sums are checked") {
    Matrix bad = Matrix::Constant(2, V, 0.5);
    CHECK_THROWS_AS(clf.predict_soft(bad, view), DataError);
  }
}

TEST_CASE("bag classifier checkpoint round trip") {
  const auto data = marker_corpus(90, 7);
  auto [clf, rep] = BagClassifier::train(data, small_bag());
  const auto dir = std::filesystem::temp_directory_path() / "cam_bag_ckpt";
  std::filesystem::remove_all(dir);
  clf.save(dir);
  const BagClassifier back = BagClassifier::load(dir);
  CHECK(back.predict(data[0].text) == clf.predict(data[0].text));
  CHECK(back.active_rows() == clf.active_rows());
  std::filesystem::remove_all(dir);
}

TEST_CASE("feature classifier") {
  Rng rng(12);
  std::vector<FeatureVector> x(600);
  std::vector<int> y(600);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i][Feature::verb_count] = rng.uniform_int(0, 20);
    x[i][Feature::word_count] = rng.uniform_int(30, 90);
    y[i] = x[i][Feature::verb_count] > 13 ? 2 : (x[i][Feature::verb_count] > 6 ? 1 : 0);
  }
  FeatureClassifierConfig cfg;
  cfg.features = {Feature::verb_count, Feature::word_count};
  cfg.seed = 1;

  SUBCASE("threshold labels are learned") {
    auto [fc, rep] = FeatureClassifier::train(x, y, cfg);
    CHECK(rep.heldout_accuracy >= 0.95);
    CHECK(std::abs(fc.predict(x[0]).sum() - 1.0) <= 1e-9);

    const auto dir = std::filesystem::temp_directory_path() / "cam_fc_ckpt";
    std::filesystem::remove_all(dir);
    fc.save(dir);
    const FeatureClassifier back = FeatureClassifier::load(dir);
    CHECK(back.predict(x[3]) == fc.predict(x[3]));
    std::filesystem::remove_all(dir);
  }
  SUBCASE("permuted labels sit at chance") {
    std::vector<int> perm(y.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i % 3);
    rng.shuffle(perm);
    cfg.heldout_fraction = 0.5;
    cfg.epochs = 20;
    auto [fc, rep] = FeatureClassifier::train(x, perm, cfg);
    CHECK(std::abs(rep.heldout_accuracy - 1.0 / 3.0) <= 0.1);
  }
  SUBCASE("tape path gradient") {
    auto [fc, rep] = FeatureClassifier::train(x, y, cfg);
    const Matrix v0 = x[5].row();
    const double err = testing::check_input_gradient(v0, [&](Tape&, const Var& v) {
      return ops::slice_cols(fc.log_probs(v), 1, 1);
    });
    CHECK(err <= 1e-4);
  }
}
