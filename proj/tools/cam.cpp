// cam: command-line entry point for the corpus, causal, training, generation
// and evaluation pipelines.

#include "cam/causal.hpp"
#include "cam/classifier.hpp"
#include "cam/corpus.hpp"
#include "cam/cvae.hpp"
#include "cam/eval.hpp"
#include "cam/transformer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace cam;

namespace {

// ---------------------------------------------------------------------------
// Config files and logging

// JSON config: one object per subcommand, e.g. {"train-gen": {"epochs": 3}}.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& is) const override {
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw CLI::ConfigError(std::string("config file: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConfigError("config file: top level must be an object");
    std::vector<CLI::ConfigItem> items;
    walk(j, {}, items);
    return items;
  }

 private:
  static std::string scalar(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

  static void walk(const json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, v] : j.items()) {
      if (v.is_object()) {
        auto p = parents;
        p.push_back(key);
        walk(v, p, out);
        continue;
      }
      if (v.is_null()) continue;
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (v.is_array()) {
        for (const auto& e : v) item.inputs.push_back(scalar(e));
      } else {
        item.inputs.push_back(scalar(v));
      }
      out.push_back(std::move(item));
    }
  }
};

// Line-oriented JSON to stderr; the same records with a timestamp go to
// <out>/run.log, the only place wall-clock time appears.
class Logger {
 public:
  void open(const fs::path& file) { file_.open(file, std::ios::app); }
  void set_command(std::string cmd) { command_ = std::move(cmd); }

  void info(std::string_view msg, ordered_json fields = ordered_json::object()) { emit("info", msg, fields); }
  void warn(std::string_view msg, ordered_json fields = ordered_json::object()) { emit("warn", msg, fields); }
  void error(std::string_view msg, ordered_json fields = ordered_json::object()) { emit("error", msg, fields); }

 private:
  void emit(std::string_view level, std::string_view msg, const ordered_json& fields) {
    ordered_json rec;
    rec["level"] = level;
    rec["command"] = command_;
    rec["msg"] = msg;
    for (const auto& [k, v] : fields.items()) rec[k] = v;
    std::cerr << rec.dump() << '\n';
    if (file_.is_open()) {
      ordered_json timed;
      timed["time"] = timestamp();
      for (const auto& [k, v] : rec.items()) timed[k] = v;
      file_ << timed.dump() << '\n';
      file_.flush();
    }
  }

  static std::string timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  std::ofstream file_;
  std::string command_;
};

Logger g_log;

// Resolved values of every option of `sub`, typed where the text parses as
// a JSON number or boolean. Usable as a --config file.
ordered_json option_snapshot(const CLI::App& sub) {
  ordered_json opts = ordered_json::object();
  for (const CLI::Option* o : sub.get_options()) {
    if (o->get_lnames().empty()) continue;
    const std::string& name = o->get_lnames().front();
    if (name == "help" || name == "config") continue;
    std::vector<std::string> values = o->count() > 0 ? o->results() : std::vector<std::string>{};
    if (o->count() == 0 && !o->get_default_str().empty()) values = {o->get_default_str()};
    auto typed = [](const std::string& s) -> ordered_json {
      if (s == "true" || s == "false") return s == "true";
      if (!s.empty() && (std::isdigit(static_cast<unsigned char>(s[0])) || s[0] == '-')) {
        try {
          const auto v = ordered_json::parse(s);
          if (v.is_number()) return v;
        } catch (const json::exception&) {
        }
      }
      return s;
    };
    if (o->get_items_expected_max() > 1) {
      ordered_json arr = ordered_json::array();
      for (const auto& v : values) arr.push_back(typed(v));
      opts[name] = arr;
    } else {
      opts[name] = values.empty() ? ordered_json(nullptr) : typed(values.back());
    }
  }
  ordered_json out;
  out[sub.get_name()] = opts;
  return out;
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

ordered_json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path.string());
  try {
    return ordered_json::parse(f);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
}

std::vector<Document> load_corpus(const std::string& path) {
  require(path, "--corpus");
  auto docs = load_jsonl(path);
  if (docs.empty()) throw DataError(path + ": empty corpus");
  return docs;
}

int topic_count(const std::vector<Document>& docs) {
  int k = 0;
  for (const auto& d : docs) {
    if (d.topic) k = std::max(k, *d.topic + 1);
  }
  return k;
}

std::string checkpoint_kind(const fs::path& dir) {
  const auto h = read_json(dir / "header.json");
  return h.value("kind", "");
}

std::vector<Feature> selected_features(const std::string& ate_path, const std::string& list) {
  if (!list.empty()) return parse_feature_list(list);
  if (ate_path.empty()) return {};
  return ATEReport::from_json(read_json(ate_path)).significant_features();
}

// Per-sample seed derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k) { return splitmix64(seed ^ splitmix64(k + 1)); }

// ---------------------------------------------------------------------------
// Subcommands

struct Common {
  std::string out;
  std::uint64_t seed = 0;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--out", c.out, "Output directory (all artifacts go here)");
  sub->add_option("--seed", c.seed, "Random seed")->envname("CAM_SEED");
}

// synth ----------------------------------------------------------------------

struct SynthOpts {
  Common common;
  std::string kind = "planted";
  int docs = 0;
  std::string spec;
};

void run_synth(const SynthOpts& o) {
  const fs::path out = o.common.out;
  if (o.kind == "planted") {
    SynthConfig cfg = o.spec.empty() ? SynthConfig::planted_default() : SynthConfig::from_json(read_json(o.spec));
    if (o.docs > 0) cfg.docs = o.docs;
    cfg.seed = o.common.seed;
    const SynthCorpus c = synthesize_corpus(cfg);
    save_jsonl(out / "corpus.jsonl", c.docs);
    write_json(out / "truth.json", c.truth);
    g_log.info("synthesized", {{"docs", c.docs.size()}, {"kind", o.kind}});
  } else if (o.kind == "marker") {
    MarkerConfig cfg;
    if (o.docs > 0) cfg.docs = o.docs;
    cfg.seed = o.common.seed;
    const auto docs = marker_corpus(cfg);
    save_jsonl(out / "corpus.jsonl", docs);
    g_log.info("synthesized", {{"docs", docs.size()}, {"kind", o.kind}});
  } else {
    throw ConfigError("unknown --kind '" + o.kind + "' (expected planted or marker)");
  }
}

// ingest ---------------------------------------------------------------------

struct IngestOpts {
  Common common;
  std::string corpus;
  std::string metric = "participation";
  long long min_words = 30;
  long long max_words = 5000;
  long long min_participation = 1;
  long long bucket_low = -1;
  long long bucket_high = -1;
  int keywords = 10;
  int topics = 20;
  int lda_iterations = 500;
  std::string topic_key;
  std::string split = "0.8,0.1,0.1";
};

void run_ingest(const IngestOpts& o) {
  const fs::path out = o.common.out;
  auto docs = load_corpus(o.corpus);
  const std::size_t raw = docs.size();
  FilterConfig fc;
  fc.min_words = o.min_words;
  fc.max_words = o.max_words;
  fc.min_participation = o.min_participation;
  fc.participation_metric = o.metric;
  docs = filter_corpus(docs, fc);
  if (docs.empty()) throw DataError("no documents survive filtering");

  std::vector<long long> values;
  for (const auto& d : docs) {
    if (auto it = d.metrics.find(o.metric); it != d.metrics.end()) values.push_back(it->second);
  }
  if (values.empty()) throw DataError("no document carries metric '" + o.metric + "'");
  const long long t_low = o.bucket_low >= 0 ? o.bucket_low : quantile_value(values, 1.0 / 3.0);
  const long long t_high = o.bucket_high >= 0 ? o.bucket_high : quantile_value(values, 2.0 / 3.0);
  if (!(t_low < t_high)) {
    throw DataError("bucket thresholds " + std::to_string(t_low) + " and " + std::to_string(t_high) +
                    " are not increasing; set --bucket-low/--bucket-high");
  }
  assign_buckets(docs, o.metric, t_low, t_high);

  if (docs.size() >= 2 && o.keywords > 0) {
    const auto kw = tfidf_keywords(docs, o.keywords);
    for (std::size_t i = 0; i < docs.size(); ++i) docs[i].keywords = kw[i];
  }
  if (!o.topic_key.empty()) {
    for (auto& d : docs) {
      if (!d.metadata.contains(o.topic_key)) throw DataError(d.id + ": no metadata key '" + o.topic_key + "'");
      d.topic = d.metadata[o.topic_key].get<int>();
    }
  } else {
    LdaConfig lc;
    lc.topics = o.topics;
    lc.iterations = o.lda_iterations;
    lc.seed = o.common.seed;
    const auto topics = lda_topics(docs, lc);
    for (std::size_t i = 0; i < docs.size(); ++i) docs[i].topic = topics[i];
  }

  const auto r = split_list(o.split);
  if (r.size() != 3) throw ConfigError("--split needs three comma-separated ratios");
  const CorpusSplit s = split_corpus(docs, {std::stod(r[0]), std::stod(r[1]), std::stod(r[2])}, o.common.seed);
  save_jsonl(out / "train.jsonl", s.train);
  save_jsonl(out / "dev.jsonl", s.dev);
  save_jsonl(out / "test.jsonl", s.test);
  ordered_json summary = {{"raw", raw},          {"kept", docs.size()},    {"train", s.train.size()},
                          {"dev", s.dev.size()}, {"test", s.test.size()}, {"metric", o.metric},
                          {"bucket_low", t_low}, {"bucket_high", t_high}};
  write_json(out / "ingest.json", summary);
  g_log.info("ingested", summary);
}

// features -------------------------------------------------------------------

struct FeaturesOpts {
  Common common;
  std::string corpus;
};

void run_features(const FeaturesOpts& o) {
  const auto docs = load_corpus(o.corpus);
  std::vector<std::string> ids;
  std::vector<FeatureVector> vectors;
  for (const auto& d : docs) {
    ids.push_back(d.id);
    vectors.push_back(extract_features(d));
  }
  std::ofstream f(fs::path(o.common.out) / "features.csv");
  if (!f) throw Error("cannot write features.csv");
  write_features_csv(f, ids, vectors);
  g_log.info("features written", {{"docs", docs.size()}});
}

// ate ------------------------------------------------------------------------

struct AteOpts {
  Common common;
  std::string corpus;
  std::string metric = "participation";
  std::string features = "word_count,noun_count,verb_count,adjective_count,adverb_count";
  double tau = 0.1;
  NetConfig net;
};

void run_ate(const AteOpts& o) {
  const fs::path out = o.common.out;
  const auto docs = load_corpus(o.corpus);
  AteConfig cfg;
  cfg.tau_sig = o.tau;
  cfg.seed = o.common.seed;
  cfg.net = o.net;
  cfg.net.seed = o.common.seed;
  const auto feats = parse_feature_list(o.features);
  const ATEReport r = ate_report(docs, feats, o.metric, cfg);
  write_json(out / "ate_report.json", r.to_json());
  std::ofstream csv(out / "ate_report.csv");
  r.write_csv(csv);
  for (const auto& e : r.effects) {
    g_log.info("effect", {{"feature", e.feature}, {"ate", e.ate}, {"naive", e.naive}, {"significant", e.significant}});
  }
}

// train-clf ------------------------------------------------------------------

struct ClfOpts {
  Common common;
  std::string corpus;
  std::string metric = "participation";
  std::string kind = "bag";
  std::string ate_report;
  std::string features;
  BagConfig bag;
  int epochs = 5;
  double learning_rate = 0.01;
};

std::vector<int> labels_of(const std::vector<Document>& docs, const std::string& metric) {
  std::vector<int> y;
  for (const auto& d : docs) {
    auto it = d.buckets.find(metric);
    if (it == d.buckets.end()) throw DataError(d.id + ": no bucket for '" + metric + "' (run ingest first)");
    y.push_back(static_cast<int>(it->second));
  }
  return y;
}

void run_train_clf(const ClfOpts& o) {
  const fs::path out = o.common.out;
  const auto docs = load_corpus(o.corpus);
  const auto y = labels_of(docs, o.metric);
  TrainReport rep;
  if (o.kind == "bag") {
    BagConfig cfg = o.bag;
    cfg.epochs = o.epochs;
    cfg.learning_rate = o.learning_rate;
    cfg.seed = o.common.seed;
    std::vector<LabeledText> data;
    for (std::size_t i = 0; i < docs.size(); ++i) data.push_back({docs[i].text, y[i]});
    auto [clf, r] = BagClassifier::train(data, cfg);
    clf.save(out / "classifier");
    rep = r;
  } else if (o.kind == "feature") {
    FeatureClassifierConfig cfg;
    cfg.features = selected_features(o.ate_report, o.features);
    if (cfg.features.empty()) throw ConfigError("feature classifier needs --features or an ATE report with significant features");
    cfg.seed = o.common.seed;
    std::vector<FeatureVector> x;
    for (const auto& d : docs) x.push_back(extract_features(d));
    auto [clf, r] = FeatureClassifier::train(x, y, cfg);
    clf.save(out / "classifier");
    rep = r;
  } else {
    throw ConfigError("unknown --kind '" + o.kind + "' (expected bag or feature)");
  }
  ordered_json j = {{"kind", o.kind},
                    {"final_loss", rep.final_loss},
                    {"train_accuracy", rep.train_accuracy},
                    {"heldout_accuracy", rep.heldout_accuracy},
                    {"heldout_size", rep.heldout_size}};
  write_json(out / "train_report.json", j);
  g_log.info("classifier trained", j);
}

// train-gen ------------------------------------------------------------------

struct GenOpts {
  Common common;
  std::string corpus;
  std::string ate_report;
  std::string metric = "participation";
  LossWeights weights;
  std::string mode = "additive";
  bool norm_injection = true;
  bool embedding_injection = true;
  TransformerConfig arch;
  int vocab = 5000;
  int epochs = 3;
  double learning_rate = 1e-3;
  long max_steps = -1;
  std::string causal_mode = "full";
  bool reinforce = false;
  int clf_epochs = 5;
};

void run_train_gen(const GenOpts& o) {
  const fs::path out = o.common.out;
  const auto docs = load_corpus(o.corpus);
  const auto labels = labels_of(docs, o.metric);
  const int topics = std::max(1, topic_count(docs));
  const Vocabulary vocab = Vocabulary::build(docs, topics, o.vocab);

  TransformerConfig tc = o.arch;
  tc.vocab_size = vocab.size();
  tc.attention = parse_attention_mode(o.mode);
  tc.norm_injection = o.norm_injection;
  tc.embedding_injection = o.embedding_injection;
  tc.seed = o.common.seed;
  Transformer model(tc);

  std::vector<GenExample> examples;
  for (const auto& d : docs) examples.push_back(make_example(vocab, d, o.metric));

  // Frozen feedback models, trained here on the same corpus.
  std::optional<BagClassifier> metric_clf, topic_clf;
  std::optional<FeatureClassifier> causal_clf;
  SoftBagView metric_view, topic_view;
  SoftFeatureMap map;
  Feedback fb;
  BagConfig bc;
  bc.epochs = o.clf_epochs;
  bc.seed = derive_seed(o.common.seed, 1);
  if (o.weights.metric != 0.0 || o.reinforce) {
    std::vector<LabeledText> data;
    for (std::size_t i = 0; i < docs.size(); ++i) data.push_back({docs[i].text, labels[i]});
    auto [clf, r] = BagClassifier::train(data, bc);
    g_log.info("metric classifier", {{"heldout_accuracy", r.heldout_accuracy}});
    metric_clf = std::move(clf);
    metric_view = metric_clf->soft_view(vocab.tokens());
    fb.metric = &metric_view;
    fb.reward = &*metric_clf;
    fb.vocab = &vocab;
    metric_clf->save(out / "feedback" / "metric");
  }
  if (o.weights.topic != 0.0 && topics > 1) {
    BagConfig tcfg = bc;
    tcfg.classes.clear();
    for (int k = 0; k < topics; ++k) tcfg.classes.push_back(std::to_string(k));
    std::vector<LabeledText> data;
    for (const auto& d : docs) data.push_back({d.text, d.topic.value_or(0)});
    auto [clf, r] = BagClassifier::train(data, tcfg);
    g_log.info("topic classifier", {{"heldout_accuracy", r.heldout_accuracy}});
    topic_clf = std::move(clf);
    topic_view = topic_clf->soft_view(vocab.tokens());
    fb.topic = &topic_view;
    topic_clf->save(out / "feedback" / "topic");
  }
  if (o.weights.causal != 0.0) {
    if (o.ate_report.empty()) throw ConfigError("--lambda-causal needs --ate-report");
    FeatureClassifierConfig fcc;
    fcc.features = ATEReport::from_json(read_json(o.ate_report)).significant_features();
    if (fcc.features.empty()) throw DataError("ATE report lists no significant features; the causal loss has no target");
    fcc.seed = derive_seed(o.common.seed, 2);
    std::vector<FeatureVector> x;
    for (const auto& ex : examples) x.push_back(ex.features);
    auto [clf, r] = FeatureClassifier::train(x, labels, fcc);
    g_log.info("causal feature classifier", {{"heldout_accuracy", r.heldout_accuracy}});
    causal_clf = std::move(clf);
    map = SoftFeatureMap::build(vocab.tokens());
    fb.causal = &*causal_clf;
    fb.features = &map;
    causal_clf->save(out / "feedback" / "causal");
  }

  GenTrainConfig g;
  g.weights = o.weights;
  g.epochs = o.epochs;
  g.learning_rate = o.learning_rate;
  g.max_steps = o.max_steps;
  g.causal_mode = parse_causal_mode(o.causal_mode);
  g.reinforce = o.reinforce;
  g.seed = o.common.seed;
  const GenTrainLog log = train_generator(model, examples, fb, g);
  ordered_json jl = ordered_json::array();
  for (std::size_t e = 0; e < log.epochs.size(); ++e) {
    const auto losses = ordered_json::parse(log.epochs[e].to_json().dump());
    jl.push_back(losses);
    g_log.info("epoch", {{"epoch", e + 1}, {"losses", losses}});
  }
  model.save(out / "model", vocab);
  write_json(out / "train_log.json", {{"epochs", jl}, {"steps", log.steps.size()}});
}

// generate -------------------------------------------------------------------

struct GenerateOpts {
  Common common;
  std::string model;
  std::string metric = "high";
  int topic = 0;
  std::string keywords;
  int max_tokens = 128;
  std::string decode = "greedy";
  double temperature = 1.0;
};

void run_generate(const GenerateOpts& o) {
  require(o.model, "--model");
  const auto [model, vocab] = Transformer::load(o.model);
  const MetricClass y = parse_class(o.metric);
  std::vector<std::string> kws;
  for (const auto& k : split_list(o.keywords)) {
    for (auto& w : tokenize(k)) kws.push_back(std::move(w));
  }
  const auto prompt = format_prompt(vocab, y, o.topic, kws);
  DecodeConfig dc;
  dc.mode = parse_decode_mode(o.decode);
  dc.temperature = o.temperature;
  dc.seed = o.common.seed;
  dc.max_new_tokens = o.max_tokens;
  const auto ids = generate(model, vocab, prompt, y, dc);
  const std::string text = tokens_to_text(vocab.decode_tokens(ids));
  write_json(fs::path(o.common.out) / "generation.json",
             {{"metric", o.metric}, {"topic", o.topic}, {"keywords", kws}, {"ids", ids}, {"text", text}});
  std::cout << text << '\n';
}

// train-cvae -----------------------------------------------------------------

struct CvaeOpts {
  Common common;
  std::string corpus;
  std::string ate_report;
  std::string metric = "participation";
  std::string variant = "causal";
  int vocab = 5000;
  int window = 3;
  CvaeConfig arch;
  CvaeTrainConfig train;
};

void run_train_cvae(const CvaeOpts& o) {
  const fs::path out = o.common.out;
  const auto docs = load_corpus(o.corpus);
  const Vocabulary vocab = Vocabulary::build(docs, 0, o.vocab);
  std::vector<FeatureEffect> causal;
  if (!o.ate_report.empty()) {
    for (const auto& e : ATEReport::from_json(read_json(o.ate_report)).effects) {
      if (e.significant) causal.push_back(e);
    }
  }
  const CvaeVariant variant = parse_cvae_variant(o.variant);
  if (variant == CvaeVariant::causal && causal.empty()) {
    throw ConfigError("the causal variant needs --ate-report with at least one significant feature");
  }
  std::vector<CvaeExample> data;
  for (const auto& d : docs) {
    for (auto& ex : make_cvae_examples(vocab, d, o.metric, causal, o.window)) data.push_back(std::move(ex));
  }
  CvaeConfig cfg = o.arch;
  const CvaeConfig ids = CvaeConfig::for_vocabulary(vocab);
  cfg.vocab_size = ids.vocab_size;
  cfg.sot = ids.sot;
  cfg.eot = ids.eot;
  cfg.unk = ids.unk;
  cfg.treatments = static_cast<int>(causal.size());
  cfg.seed = o.common.seed;
  Cvae model(cfg);
  CvaeTrainConfig tc = o.train;
  tc.variant = variant;
  tc.seed = o.common.seed;
  g_log.info("cvae data", {{"examples", data.size()}, {"treatments", causal.size()}, {"vocab", vocab.size()}});
  const CvaeTrainLog log = train_cvae(model, data, tc);
  ordered_json jl = ordered_json::array();
  for (std::size_t e = 0; e < log.epochs.size(); ++e) {
    const auto& ep = log.epochs[e];
    ordered_json j = {{"epoch", e + 1},
                      {"train", ep.train.to_json()},
                      {"validation", ep.validation},
                      {"learning_rate", ep.learning_rate},
                      {"kl_weight", ep.kl_weight}};
    g_log.info("epoch", j);
    jl.push_back(std::move(j));
  }
  model.save(out / "model", vocab, variant);
  std::vector<std::string> names;
  for (const auto& e : causal) names.push_back(e.feature);
  write_json(out / "train_log.json", {{"epochs", jl}, {"stopped_early", log.stopped_early}, {"treatments", names}});
}

// generate-cvae --------------------------------------------------------------

struct GenerateCvaeOpts {
  Common common;
  std::string model;
  std::string context_file;
  std::string metric = "high";
  std::string metric_choice = "force";
  std::string decode = "greedy";
  double temperature = 1.0;
  int max_tokens = 40;
  int sentences = 1;
};

std::vector<std::vector<int>> encode_sentences(const Vocabulary& vocab, std::string_view text) {
  std::vector<std::vector<int>> out;
  for (auto para : split_paragraphs(text)) {
    for (auto sent : split_sentences(para)) {
      auto w = tokenize(sent);
      if (w.empty()) continue;
      w.emplace_back(Vocabulary::kSentence);
      out.push_back(vocab.encode(w));
    }
  }
  return out;
}

// Sentences generated one after another, each appended to the context.
std::string cvae_continuation(const Cvae& model, const Vocabulary& vocab, std::vector<std::vector<int>> context,
                              int y, CvaeDecodeConfig dc, int sentences, std::size_t window) {
  std::string text;
  const std::uint64_t seed = dc.seed;
  for (int s = 0; s < sentences; ++s) {
    dc.seed = derive_seed(seed, static_cast<std::uint64_t>(s));
    const std::size_t from = context.size() > window ? context.size() - window : 0;
    const std::vector<std::vector<int>> recent(context.begin() + static_cast<std::ptrdiff_t>(from), context.end());
    auto ids = generate_cvae(model, recent, y, dc);
    const std::string sent = tokens_to_text(vocab.decode_tokens(ids));
    if (!text.empty() && !sent.empty()) text += ' ';
    text += sent;
    context.push_back(std::move(ids));
  }
  return text;
}

void run_generate_cvae(const GenerateCvaeOpts& o) {
  require(o.model, "--model");
  const auto loaded = Cvae::load(o.model);
  std::string ctx_text;
  if (!o.context_file.empty()) {
    std::ifstream f(o.context_file);
    if (!f) throw Error("cannot read " + o.context_file);
    ctx_text.assign(std::istreambuf_iterator<char>(f), {});
  }
  CvaeDecodeConfig dc;
  dc.metric = parse_metric_choice(o.metric_choice);
  dc.greedy = parse_decode_mode(o.decode) == DecodeMode::greedy;
  dc.temperature = o.temperature;
  dc.max_tokens = o.max_tokens;
  dc.seed = o.common.seed;
  const int y = static_cast<int>(parse_class(o.metric));
  const std::string text =
      cvae_continuation(loaded.model, loaded.vocab, encode_sentences(loaded.vocab, ctx_text), y, dc, o.sentences, 3);
  write_json(fs::path(o.common.out) / "generation.json",
             {{"metric", o.metric}, {"metric_choice", o.metric_choice}, {"text", text}});
  std::cout << text << '\n';
}

// evaluate -------------------------------------------------------------------

struct EvalOpts {
  Common common;
  std::vector<std::string> models;
  std::vector<std::string> names;
  std::string corpus;
  std::string classifier;
  std::string metric = "participation";
  std::string ate_report;
  std::string features;
  int samples = 50;
  std::string decode = "temperature";
  double temperature = 1.0;
  int max_tokens = 128;
  int cvae_sentences = 3;
};

void run_evaluate(const EvalOpts& o) {
  if (o.models.empty()) throw ConfigError("missing required option --model");
  require(o.classifier, "--classifier");
  if (!o.names.empty() && o.names.size() != o.models.size()) throw ConfigError("--name must be given once per --model");
  const auto docs = load_corpus(o.corpus);
  const BagClassifier clf = BagClassifier::load(o.classifier);
  std::vector<Feature> feats = selected_features(o.ate_report, o.features);
  if (feats.empty()) feats = {Feature::word_count, Feature::verb_count};
  const std::size_t n_docs =
      o.samples > 0 ? std::min(docs.size(), static_cast<std::size_t>(o.samples)) : docs.size();

  EvalReport report;
  for (std::size_t m = 0; m < o.models.size(); ++m) {
    VariantReport v;
    v.name = o.names.empty() ? fs::path(o.models[m]).parent_path().filename().string() : o.names[m];
    if (v.name.empty()) v.name = o.models[m];
    const std::string kind = checkpoint_kind(o.models[m]);
    std::vector<Generation> gens;
    std::vector<std::string> hyps;
    std::vector<std::vector<std::string>> refs;
    if (kind == "transformer") {
      const auto [model, vocab] = Transformer::load(o.models[m]);
      std::vector<GenExample> held_out;
      for (const auto& d : docs) held_out.push_back(make_example(vocab, d, o.metric));
      v.perplexity = perplexity(model, held_out);
      for (std::size_t i = 0; i < n_docs; ++i) {
        for (int y = 0; y < kNumMetricClasses; ++y) {
          const MetricClass cls = static_cast<MetricClass>(y);
          std::vector<int> prompt = held_out[i].prompt;
          prompt[0] = vocab.id(Vocabulary::metric_token(cls));
          DecodeConfig dc;
          dc.mode = parse_decode_mode(o.decode);
          dc.temperature = o.temperature;
          dc.max_new_tokens = o.max_tokens;
          dc.seed = derive_seed(o.common.seed, i * kNumMetricClasses + static_cast<std::size_t>(y));
          gens.push_back({tokens_to_text(vocab.decode_tokens(generate(model, vocab, prompt, cls, dc))), cls});
        }
      }
    } else if (kind == "cvae") {
      const auto loaded = Cvae::load(o.models[m]);
      std::vector<CvaeExample> held_out;
      const RowVector no_t = RowVector::Zero(loaded.model.config().treatments);
      for (const auto& d : docs) {
        for (auto& ex : make_cvae_examples(loaded.vocab, d, o.metric, {})) {
          ex.t = no_t;  // not used by the reconstruction bound
          held_out.push_back(std::move(ex));
        }
      }
      v.perplexity = cvae_perplexity(loaded.model, held_out, derive_seed(o.common.seed, 1u << 20));
      for (std::size_t i = 0; i < n_docs; ++i) {
        std::string ctx;
        for (const auto& c : docs[i].context) ctx += c + " ";
        for (int y = 0; y < kNumMetricClasses; ++y) {
          CvaeDecodeConfig dc;
          dc.greedy = parse_decode_mode(o.decode) == DecodeMode::greedy;
          dc.temperature = o.temperature;
          dc.seed = derive_seed(o.common.seed, i * kNumMetricClasses + static_cast<std::size_t>(y));
          gens.push_back({cvae_continuation(loaded.model, loaded.vocab, encode_sentences(loaded.vocab, ctx), y, dc,
                                            o.cvae_sentences, 3),
                          static_cast<MetricClass>(y)});
        }
      }
    } else {
      throw DataError(o.models[m] + ": unknown checkpoint kind '" + kind + "'");
    }
    for (std::size_t k = 0; k < gens.size(); ++k) {
      if (tokenize(gens[k].text).empty()) continue;
      hyps.push_back(gens[k].text);
      refs.push_back({docs[k / kNumMetricClasses].text});
    }
    v.samples = static_cast<long>(gens.size());
    v.control = control_accuracy(gens, clf);
    if (!hyps.empty()) v.rouge = mean_rouge(hyps, refs);
    v.features = feature_distribution(gens, feats);
    for (const auto& w : v.features.warnings) g_log.warn(w, {{"variant", v.name}});
    g_log.info("variant evaluated", {{"variant", v.name},
                                     {"control_accuracy", v.control.accuracy},
                                     {"perplexity", *v.perplexity},
                                     {"empty_generations", gens.size() - hyps.size()}});
    report.variants.push_back(std::move(v));
  }
  write_report(report, o.common.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Metric-guided text generation with causal feedback"};
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config file with one object per subcommand");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();

  SynthOpts synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic corpus");
  add_common(s_synth, synth.common);
  s_synth->add_option("--kind", synth.kind, "planted or marker")->check(CLI::IsMember({"planted", "marker"}));
  s_synth->add_option("--docs", synth.docs, "Number of documents (0 keeps the config value)");
  s_synth->add_option("--spec", synth.spec, "Synthetic corpus spec (JSON)");

  IngestOpts ingest;
  auto* s_ingest = app.add_subcommand("ingest", "Filter, bucket, annotate and split a corpus");
  add_common(s_ingest, ingest.common);
  s_ingest->add_option("--corpus", ingest.corpus, "Input JSON Lines corpus");
  s_ingest->add_option("--metric", ingest.metric, "Metric to bucket");
  s_ingest->add_option("--min-words", ingest.min_words);
  s_ingest->add_option("--max-words", ingest.max_words);
  s_ingest->add_option("--min-participation", ingest.min_participation);
  s_ingest->add_option("--bucket-low", ingest.bucket_low, "Low threshold (negative: 1/3 quantile)");
  s_ingest->add_option("--bucket-high", ingest.bucket_high, "High threshold (negative: 2/3 quantile)");
  s_ingest->add_option("--keywords", ingest.keywords, "TF-IDF keywords per document");
  s_ingest->add_option("--topics", ingest.topics, "LDA topics");
  s_ingest->add_option("--lda-iterations", ingest.lda_iterations);
  s_ingest->add_option("--topic-key", ingest.topic_key, "Take topics from this metadata key instead of LDA");
  s_ingest->add_option("--split", ingest.split, "train,dev,test ratios");

  FeaturesOpts features;
  auto* s_features = app.add_subcommand("features", "Extract text features to CSV");
  add_common(s_features, features.common);
  s_features->add_option("--corpus", features.corpus);

  AteOpts ate;
  auto* s_ate = app.add_subcommand("ate", "Doubly robust treatment effects of text features");
  add_common(s_ate, ate.common);
  s_ate->add_option("--corpus", ate.corpus);
  s_ate->add_option("--metric", ate.metric);
  s_ate->add_option("--features", ate.features, "Comma-separated feature names");
  s_ate->add_option("--tau", ate.tau, "Significance threshold on |ATE|");
  s_ate->add_option("--hidden-layers", ate.net.hidden_layers);
  s_ate->add_option("--width", ate.net.width);
  s_ate->add_option("--epochs", ate.net.epochs);
  s_ate->add_option("--batch-size", ate.net.batch_size);
  s_ate->add_option("--lr", ate.net.learning_rate);

  ClfOpts clf;
  auto* s_clf = app.add_subcommand("train-clf", "Train a metric classifier");
  add_common(s_clf, clf.common);
  s_clf->add_option("--corpus", clf.corpus);
  s_clf->add_option("--metric", clf.metric);
  s_clf->add_option("--kind", clf.kind, "bag or feature")->check(CLI::IsMember({"bag", "feature"}));
  s_clf->add_option("--ate-report", clf.ate_report, "Significant features for --kind feature");
  s_clf->add_option("--features", clf.features, "Explicit features for --kind feature");
  s_clf->add_option("--buckets", clf.bag.buckets, "Hash buckets");
  s_clf->add_option("--dim", clf.bag.dim, "Embedding width");
  s_clf->add_option("--hash-seed", clf.bag.hash_seed);
  s_clf->add_flag("--bigrams,!--no-bigrams", clf.bag.bigrams);
  s_clf->add_option("--epochs", clf.epochs);
  s_clf->add_option("--lr", clf.learning_rate);

  GenOpts gen;
  auto* s_gen = app.add_subcommand("train-gen", "Train the controlled transformer generator");
  add_common(s_gen, gen.common);
  s_gen->add_option("--corpus", gen.corpus);
  s_gen->add_option("--ate-report", gen.ate_report);
  s_gen->add_option("--metric", gen.metric);
  s_gen->add_option("--lambda-g", gen.weights.g);
  s_gen->add_option("--lambda-metric", gen.weights.metric);
  s_gen->add_option("--lambda-topic", gen.weights.topic);
  s_gen->add_option("--lambda-causal", gen.weights.causal);
  s_gen->add_option("--mode", gen.mode, "Attention injection: additive, replace or off")
      ->check(CLI::IsMember({"additive", "replace", "off"}));
  s_gen->add_flag("--norm-injection,!--no-norm-injection", gen.norm_injection);
  s_gen->add_flag("--embedding-injection,!--no-embedding-injection", gen.embedding_injection);
  s_gen->add_option("--layers", gen.arch.layers);
  s_gen->add_option("--heads", gen.arch.heads);
  s_gen->add_option("--dim", gen.arch.dim);
  s_gen->add_option("--control-dim", gen.arch.control_dim);
  s_gen->add_option("--max-len", gen.arch.max_len);
  s_gen->add_option("--vocab", gen.vocab, "Maximum vocabulary size");
  s_gen->add_option("--epochs", gen.epochs);
  s_gen->add_option("--lr", gen.learning_rate);
  s_gen->add_option("--max-steps", gen.max_steps, "Stop after this many updates (negative: no limit)");
  s_gen->add_option("--causal-mode", gen.causal_mode, "full or literal")->check(CLI::IsMember({"full", "literal"}));
  s_gen->add_flag("--reinforce", gen.reinforce, "Sampled-sequence metric loss");
  s_gen->add_option("--clf-epochs", gen.clf_epochs, "Epochs of the feedback bag classifiers");

  GenerateOpts generate_o;
  auto* s_generate = app.add_subcommand("generate", "Generate text with a trained transformer");
  add_common(s_generate, generate_o.common);
  s_generate->add_option("--model", generate_o.model, "Model directory");
  s_generate->add_option("--metric", generate_o.metric, "low, medium or high");
  s_generate->add_option("--topic", generate_o.topic);
  s_generate->add_option("--keywords", generate_o.keywords, "Comma-separated keywords");
  s_generate->add_option("--max-tokens", generate_o.max_tokens);
  s_generate->add_option("--decode", generate_o.decode, "greedy or sample");
  s_generate->add_option("--temperature", generate_o.temperature);

  CvaeOpts cvae;
  auto* s_cvae = app.add_subcommand("train-cvae", "Train the (causal) CVAE");
  add_common(s_cvae, cvae.common);
  s_cvae->add_option("--corpus", cvae.corpus);
  s_cvae->add_option("--ate-report", cvae.ate_report);
  s_cvae->add_option("--metric", cvae.metric);
  s_cvae->add_option("--variant", cvae.variant, "causal or noncausal")
      ->check(CLI::IsMember({"causal", "noncausal"}));
  s_cvae->add_option("--vocab", cvae.vocab);
  s_cvae->add_option("--window", cvae.window, "Context sentences");
  s_cvae->add_option("--embed-dim", cvae.arch.embed_dim);
  s_cvae->add_option("--sentence-dim", cvae.arch.sentence_dim);
  s_cvae->add_option("--context-dim", cvae.arch.context_dim);
  s_cvae->add_option("--decoder-dim", cvae.arch.decoder_dim);
  s_cvae->add_option("--latent-dim", cvae.arch.latent_dim);
  s_cvae->add_option("--metric-embed-dim", cvae.arch.metric_embed_dim);
  s_cvae->add_option("--hidden-dim", cvae.arch.hidden_dim);
  s_cvae->add_option("--max-len", cvae.arch.max_len);
  s_cvae->add_option("--epochs", cvae.train.epochs);
  s_cvae->add_option("--lr", cvae.train.learning_rate);
  s_cvae->add_option("--lr-decay", cvae.train.lr_decay);
  s_cvae->add_option("--early-stop", cvae.train.early_stop);
  s_cvae->add_option("--patience", cvae.train.patience);
  s_cvae->add_option("--kl-anneal", cvae.train.kl_anneal_fraction, "Fraction of steps with a rising KL weight");
  s_cvae->add_option("--word-dropout", cvae.train.word_dropout);
  s_cvae->add_option("--validation", cvae.train.validation_fraction);

  GenerateCvaeOpts gcvae;
  auto* s_gcvae = app.add_subcommand("generate-cvae", "Generate next sentences with a trained CVAE");
  add_common(s_gcvae, gcvae.common);
  s_gcvae->add_option("--model", gcvae.model);
  s_gcvae->add_option("--context-file", gcvae.context_file, "Plain-text context (may be omitted)");
  s_gcvae->add_option("--metric", gcvae.metric);
  s_gcvae->add_option("--metric-choice", gcvae.metric_choice, "force, argmax or sample")
      ->check(CLI::IsMember({"force", "argmax", "sample"}));
  s_gcvae->add_option("--decode", gcvae.decode, "greedy or sample");
  s_gcvae->add_option("--temperature", gcvae.temperature);
  s_gcvae->add_option("--max-tokens", gcvae.max_tokens);
  s_gcvae->add_option("--sentences", gcvae.sentences);

  EvalOpts ev;
  auto* s_eval = app.add_subcommand("evaluate", "Control accuracy, perplexity, ROUGE and feature reports");
  add_common(s_eval, ev.common);
  s_eval->add_option("--model", ev.models, "Model directory (repeatable)");
  s_eval->add_option("--name", ev.names, "Variant name per --model");
  s_eval->add_option("--corpus", ev.corpus, "Held-out corpus");
  s_eval->add_option("--classifier", ev.classifier, "Bag classifier directory used to score generations");
  s_eval->add_option("--metric", ev.metric);
  s_eval->add_option("--ate-report", ev.ate_report, "Features for the distribution report");
  s_eval->add_option("--features", ev.features, "Explicit features for the distribution report");
  s_eval->add_option("--samples", ev.samples, "Held-out documents used as prompts (0: all)");
  s_eval->add_option("--decode", ev.decode, "greedy or sample");
  s_eval->add_option("--temperature", ev.temperature);
  s_eval->add_option("--max-tokens", ev.max_tokens);
  s_eval->add_option("--cvae-sentences", ev.cvae_sentences, "Sentences generated per CVAE prompt");

  for (auto* sub : app.get_subcommands({})) sub->allow_config_extras(CLI::config_extras_mode::error);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* sub = app.get_subcommands().front();
  g_log.set_command(sub->get_name());
  const std::map<std::string, Common*> commons = {
      {"synth", &synth.common},        {"ingest", &ingest.common},     {"features", &features.common},
      {"ate", &ate.common},            {"train-clf", &clf.common},     {"train-gen", &gen.common},
      {"generate", &generate_o.common}, {"train-cvae", &cvae.common},  {"generate-cvae", &gcvae.common},
      {"evaluate", &ev.common}};
  try {
    const Common& c = *commons.at(sub->get_name());
    require(c.out, "--out");
    fs::create_directories(c.out);
    g_log.open(fs::path(c.out) / "run.log");
    write_json(fs::path(c.out) / "config.json", option_snapshot(*sub));
    g_log.info("start", {{"seed", c.seed}});
    const std::string& name = sub->get_name();
    if (name == "synth") run_synth(synth);
    else if (name == "ingest") run_ingest(ingest);
    else if (name == "features") run_features(features);
    else if (name == "ate") run_ate(ate);
    else if (name == "train-clf") run_train_clf(clf);
    else if (name == "train-gen") run_train_gen(gen);
    else if (name == "generate") run_generate(generate_o);
    else if (name == "train-cvae") run_train_cvae(cvae);
    else if (name == "generate-cvae") run_generate_cvae(gcvae);
    else if (name == "evaluate") run_evaluate(ev);
    g_log.info("done");
  } catch (const std::exception& e) {
    std::string type = "error";
    if (dynamic_cast<const ConfigError*>(&e)) type = "config_error";
    else if (dynamic_cast<const DataError*>(&e)) type = "data_error";
    else if (dynamic_cast<const NumericError*>(&e)) type = "numeric_error";
    else if (dynamic_cast<const ShapeError*>(&e)) type = "shape_error";
    g_log.error(e.what(), {{"type", type}});
    return 1;
  }
  return 0;
}
