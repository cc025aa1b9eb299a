#include "cam/corpus.hpp"
#include "cam/eval.hpp"
#include "doctest.h"

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

using namespace cam;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream f(p);
  std::string line;
  std::getline(f, line);
  return line;
}

TransformerConfig tiny(int vocab) {
  TransformerConfig c;
  c.layers = 1;
  c.heads = 2;
  c.dim = 16;
  c.control_dim = 4;
  c.max_len = 40;
  c.vocab_size = vocab;
  c.seed = 2;
  return c;
}

}  // namespace

TEST_CASE("perplexity") {
  MarkerConfig mc;
  mc.docs = 12;
  mc.seed = 3;
  const auto docs = marker_corpus(mc);
  const Vocabulary vocab = Vocabulary::build(docs, 2, 100);
  std::vector<GenExample> data;
  for (const auto& d : docs) data.push_back(make_example(vocab, d, "participation"));

  SUBCASE("uniform model gives the vocabulary size") {
    // Pad the vocabulary to 512 entries so the value is a round number.
    std::vector<std::string> tokens = vocab.tokens();
    for (int i = 0; static_cast<int>(tokens.size()) < 512; ++i) tokens.push_back("pad" + std::to_string(i));
    const Vocabulary big = Vocabulary::from_tokens(tokens);
    Transformer m(tiny(big.size()));
    m.params().get("embed.token").value.setZero();  // tied output: all logits 0
    std::vector<GenExample> ex;
    for (const auto& d : docs) ex.push_back(make_example(big, d, "participation"));
    CHECK(std::abs(perplexity(m, ex) - 512.0) <= 1e-6);
  }
  SUBCASE("matches exp of the LM loss on one example") {
    Transformer m(tiny(vocab.size()));
    Tape t(false);
    const LossBundle b = example_losses(t, m, data[0], {}, {1.0, 0.0, 0.0, 0.0}, CausalMode::full);
    CHECK(std::abs(perplexity(m, std::span(data).first(1)) - std::exp(b.l_g)) <= 1e-9);
  }
  SUBCASE("token-weighted, so batch partitioning does not matter") {
    Transformer m(tiny(vocab.size()));
    std::vector<TokenNll> parts;
    for (const auto& ex : data) parts.push_back(sequence_nll(m, ex));
    const double whole = perplexity(m, data);
    const double a = std::log(perplexity(std::span(parts).first(5)));
    const double b = std::log(perplexity(std::span(parts).subspan(5)));
    long na = 0, nb = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) (i < 5 ? na : nb) += parts[i].tokens;
    const double merged = std::exp((a * static_cast<double>(na) + b * static_cast<double>(nb)) /
                                   static_cast<double>(na + nb));
    CHECK(std::abs(whole - merged) <= 1e-9 * whole);
  }
  SUBCASE("memorizer") {
    Transformer m(tiny(vocab.size()));
    const std::vector<GenExample> one = {data[0]};
    GenTrainConfig g;
    g.epochs = 150;
    g.learning_rate = 1e-2;
    g.weights = {1.0, 0.0, 0.0, 0.0};
    train_generator(m, one, {}, g);
    const double ppl = perplexity(m, one);
    MESSAGE("memorized perplexity " << ppl);
    CHECK(ppl < 1.1);
  }
  CHECK_THROWS_AS(perplexity(std::span<const TokenNll>{}), DataError);
}

TEST_CASE("control accuracy") {
  std::vector<Generation> gens;
  for (int i = 0; i < 9; ++i) gens.push_back({"text " + std::to_string(i), static_cast<MetricClass>(i % 3)});

  SUBCASE("perfect predictions") {
    const auto r = control_accuracy(gens, [&](std::string_view t) { return (t.back() - '0') % 3; });
    CHECK(r.accuracy == 1.0);
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) CHECK(r.confusion[a][b] == (a == b ? 3 : 0));
    }
  }
  SUBCASE("constant predictor over balanced targets") {
    const auto r = control_accuracy(gens, [](std::string_view) { return 1; });
    CHECK(r.accuracy == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    long trace = 0, total = 0;
    for (int a = 0; a < 3; ++a) {
      long row = 0;
      for (int b = 0; b < 3; ++b) {
        total += r.confusion[a][b];
        row += r.confusion[a][b];
      }
      trace += r.confusion[a][a];
      CHECK(row == 3);
    }
    CHECK(r.accuracy == static_cast<double>(trace) / static_cast<double>(total));
  }
  CHECK_THROWS_AS(control_accuracy(std::span<const Generation>{}, [](std::string_view) { return 0; }), DataError);
  CHECK_THROWS_AS(control_accuracy(gens, [](std::string_view) { return 3; }), DataError);
}

TEST_CASE("ROUGE") {
  const std::vector<std::string> ref = {"the cat sat"};
  CHECK(rouge("the cat ran", ref, RougeVariant::one) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(rouge("the cat ran", ref, RougeVariant::two) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(rouge("the cat ran", ref, RougeVariant::l) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  for (auto v : {RougeVariant::one, RougeVariant::two, RougeVariant::l}) {
    CHECK(rouge("The cat sat.", ref, v) == 1.0);
    CHECK(rouge("dogs bark loudly", ref, v) == 0.0);
  }
  SUBCASE("best reference wins") {
    const std::vector<std::string> refs = {"a dog", "the cat sat"};
    CHECK(rouge("the cat sat", refs, RougeVariant::one) == 1.0);
  }
  SUBCASE("clipped counts and LCS") {
    const std::vector<std::string> h = {"the", "the", "the"}, r = {"the", "cat"};
    const auto s = rouge_score(h, r, RougeVariant::one);
    CHECK(s.precision == doctest::Approx(1.0 / 3.0));
    CHECK(s.recall == 0.5);
    const std::vector<std::string> a = {"a", "b", "c", "d", "e"}, b = {"a", "x", "c", "e", "b"};
    CHECK(rouge_score(a, b, RougeVariant::l).precision == doctest::Approx(3.0 / 5.0));
  }
  SUBCASE("precision and recall swap with the arguments") {
    const std::vector<std::string> a = {"one", "two", "three", "two", "five"}, b = {"two", "three", "six"};
    for (auto v : {RougeVariant::one, RougeVariant::two}) {
      CHECK(rouge_score(a, b, v).precision == rouge_score(b, a, v).recall);
      CHECK(rouge_score(a, b, v).recall == rouge_score(b, a, v).precision);
    }
  }
  CHECK_THROWS_AS(rouge("", ref, RougeVariant::one), DataError);
  CHECK_THROWS_AS(rouge("x", std::vector<std::string>{}, RougeVariant::one), DataError);
  const std::vector<std::string> hyps = {"the cat ran", "the cat sat"};
  const std::vector<std::vector<std::string>> refs = {ref, ref};
  const auto m = mean_rouge(hyps, refs);
  CHECK(m.rouge_2 == doctest::Approx(0.75));
}

TEST_CASE("feature distributions") {
  const std::vector<Feature> feats = {Feature::word_count, Feature::verb_count};

  SUBCASE("identical texts give zero gaps") {
    std::vector<Generation> g = {{"The cat sat on the mat.", MetricClass::low},
                                 {"The cat sat on the mat.", MetricClass::high}};
    const auto d = feature_distribution(g, feats);
    for (const auto& gap : d.gap) CHECK(*gap == 0.0);
    CHECK(d.warnings.size() == 1);  // no medium samples
    CHECK(d.classes.size() == 2);
  }
  SUBCASE("planted verb gap") {
    // High texts carry five more verbs than low texts; the oracle gap is
    // the difference of per-class mean counts measured independently.
    Rng rng(3);
    const auto& verbs = synth_pool("verb");
    std::vector<Generation> g;
    double low_sum = 0.0, high_sum = 0.0;
    for (int i = 0; i < 40; ++i) {
      const int base = rng.uniform_int(1, 4);
      for (MetricClass c : {MetricClass::low, MetricClass::high}) {
        const int n = base + (c == MetricClass::high ? 5 : 0);
        std::string text = "The team";
        for (int k = 0; k < n; ++k) text += " " + verbs[static_cast<std::size_t>(k) % verbs.size()];
        text += ".";
        (c == MetricClass::high ? high_sum : low_sum) += extract_features(text)[Feature::verb_count];
        g.push_back({text, c});
      }
    }
    const auto d = feature_distribution(g, feats);
    CHECK(*d.gap[1] == doctest::Approx((high_sum - low_sum) / 40.0).epsilon(1e-12));
    CHECK(*d.gap[1] == doctest::Approx(5.0).epsilon(0.05));
  }
  SUBCASE("mean and std") {
    std::vector<Generation> g = {{"a b", MetricClass::low}, {"a b c d", MetricClass::low}, {"x", MetricClass::medium}};
    const auto d = feature_distribution(g, feats);
    CHECK(d.classes[0].mean[0] == 3.0);
    CHECK(d.classes[0].std[0] == 1.0);
    CHECK_FALSE(d.gap[0].has_value());
  }
  std::vector<Generation> one = {{"a", MetricClass::low}};
  CHECK_THROWS_AS(feature_distribution(one, feats), DataError);
}

TEST_CASE("report files") {
  EvalReport r;
  VariantReport v;
  v.name = "causal";
  v.samples = 9;
  v.control.accuracy = 5.0 / 9.0;
  v.control.confusion = {{{2, 1, 0}, {1, 1, 1}, {0, 1, 2}}};
  v.perplexity = 12.345678901234567;
  v.rouge = RougeSummary{0.1, 1.0 / 3.0, 0.2};
  std::vector<Generation> g = {{"The cat sat.", MetricClass::low}, {"A dog ran very fast today.", MetricClass::high}};
  const std::vector<Feature> feats = {Feature::word_count, Feature::adverb_count};
  v.features = feature_distribution(g, feats);
  r.variants.push_back(v);
  v.name = "baseline <plain> & \"raw\"";
  v.perplexity.reset();
  v.rouge.reset();
  r.variants.push_back(v);

  const auto dir = std::filesystem::temp_directory_path() / "cam_eval_report";
  std::filesystem::remove_all(dir);
  write_report(r, dir);

  CHECK(EvalReport::from_json(nlohmann::json::parse(read_file(dir / "report.json"))) == r);
  const auto j = nlohmann::json::parse(read_file(dir / "report.json"));
  CHECK(j["variants"][0]["bleurt"].is_null());
  CHECK(j["variants"][1]["perplexity"].is_null());

  CHECK(first_line(dir / "tables" / "summary.csv") ==
        "variant,samples,control_accuracy,perplexity,rouge_1,rouge_2,rouge_l,bleurt");
  CHECK(first_line(dir / "tables" / "confusion.csv") ==
        "variant,target,predicted_low,predicted_medium,predicted_high");
  CHECK(first_line(dir / "tables" / "features.csv") == "variant,target,feature,n,mean,std");
  CHECK(first_line(dir / "tables" / "gaps.csv") == "variant,feature,high_minus_low");
  CHECK(read_file(dir / "tables" / "confusion.csv").find("causal,medium,1,1,1\n") != std::string::npos);

  for (const char* svg : {"confusion.svg", "features.svg"}) {
    CAPTURE(svg);
    boost::property_tree::ptree tree;
    CHECK_NOTHROW(boost::property_tree::read_xml((dir / "figures" / svg).string(), tree));
    CHECK(tree.count("svg") == 1);
  }
  std::filesystem::remove_all(dir);
}
