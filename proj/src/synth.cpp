#include "cam/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

namespace cam {

using json = nlohmann::ordered_json;

namespace {

const std::map<std::string, std::vector<std::string>, std::less<>>& pools() {
  static const std::map<std::string, std::vector<std::string>, std::less<>> p = {
      {"verb",
       {"announced", "argued", "reported", "launched", "warned", "claimed", "visited", "joined",
        "watched", "offered", "raised", "described", "supported", "explained", "discovered", "built",
        "bought", "taught", "won", "lost"}},
      {"adjective",
       {"new", "local", "strong", "quiet", "bright", "huge", "rapid", "famous", "crucial", "modern",
        "steady", "urgent", "rare", "fresh", "calm", "brave"}},
      {"adverb",
       {"quickly", "slowly", "often", "rarely", "clearly", "nearly", "finally", "recently", "simply",
        "mostly", "certainly", "easily"}},
      {"pronoun", {"she", "he", "they", "we", "it", "someone", "everyone", "nobody"}},
      {"filler", {"the", "of", "and", "to", "in", "with", "for", "on", "at", "by", "from", "a"}},
  };
  return p;
}

const std::vector<std::vector<std::string>>& topic_pools() {
  static const std::vector<std::vector<std::string>> p = {
      {"team", "coach", "league", "match", "goal", "stadium", "trophy", "fan", "season", "player",
       "tournament", "medal", "champion", "athlete", "race", "game"},
      {"senator", "election", "ballot", "campaign", "congress", "mayor", "governor", "policy", "law",
       "court", "judge", "parliament", "minister", "treaty", "border", "citizen"},
      {"market", "stock", "investor", "profit", "budget", "inflation", "trade", "tariff", "merger",
       "startup", "revenue", "salary", "bank", "economy", "debt", "customer"},
      {"scientist", "experiment", "theory", "laboratory", "telescope", "satellite", "rocket", "galaxy",
       "planet", "species", "climate", "carbon", "discovery", "research", "data", "energy"},
      {"virus", "vaccine", "disease", "symptom", "nurse", "clinic", "medicine", "diet", "fitness",
       "patient", "doctor", "hospital", "treatment", "health", "exercise", "drug"},
      {"concert", "album", "song", "singer", "band", "guitar", "piano", "theater", "actor", "festival",
       "film", "movie", "stage", "audience", "museum", "artist"},
  };
  return p;
}

bool plantable(Feature f) {
  switch (f) {
    case Feature::verb_count:
    case Feature::adjective_count:
    case Feature::adverb_count:
    case Feature::pronoun_count:
    case Feature::word_count:
      return true;
    default:
      return false;
  }
}

std::pair<int, int> read_range(const json& j, const char* key) {
  if (!j.is_array() || j.size() != 2) throw ConfigError(std::string("'") + key + "' must be [lo, hi]");
  std::pair<int, int> r{j[0].get<int>(), j[1].get<int>()};
  if (r.first > r.second || r.first < 0) throw ConfigError(std::string("'") + key + "' must satisfy 0 <= lo <= hi");
  return r;
}

const std::string& pick(Rng& rng, const std::vector<std::string>& pool) {
  return pool[rng.uniform_int(pool.size())];
}

// Deals `count` items over `slots` round-robin from a random start.
std::vector<int> deal(Rng& rng, int count, int slots) {
  std::vector<int> out(slots, count / slots);
  const int start = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(slots)));
  for (int i = 0; i < count % slots; ++i) ++out[(start + i) % slots];
  return out;
}

std::string make_sentence(Rng& rng, int topic, int adjectives, int adverbs, int verbs, int pronouns,
                          int fillers) {
  const auto& nouns = topic_pools()[topic];
  std::vector<std::string> w;
  const int lead = fillers / 2;
  for (int i = 0; i < lead; ++i) w.push_back(pick(rng, synth_pool("filler")));
  for (int i = 0; i < adjectives; ++i) w.push_back(pick(rng, synth_pool("adjective")));
  w.push_back(pick(rng, nouns));
  for (int i = 0; i < adverbs; ++i) w.push_back(pick(rng, synth_pool("adverb")));
  for (int i = 0; i < verbs; ++i) w.push_back(pick(rng, synth_pool("verb")));
  for (int i = lead; i < fillers; ++i) w.push_back(pick(rng, synth_pool("filler")));
  for (int i = 0; i < pronouns; ++i) w.push_back(pick(rng, synth_pool("pronoun")));
  w.push_back(pick(rng, nouns));
  std::string s;
  for (const auto& x : w) {
    if (!s.empty()) s += ' ';
    s += x;
  }
  return s + ".";
}

}  // namespace

const std::vector<std::string>& synth_pool(std::string_view name) {
  auto it = pools().find(name);
  if (it == pools().end()) throw ConfigError("unknown word pool '" + std::string(name) + "'");
  return it->second;
}

const std::vector<std::string>& synth_topic_nouns(int topic) { return topic_pools().at(static_cast<std::size_t>(topic)); }

int synth_topic_pool_count() { return static_cast<int>(topic_pools().size()); }

SynthConfig SynthConfig::planted_default() {
  SynthConfig cfg;
  const std::vector<double> probs = {0.3, 0.5, 0.7};
  cfg.features = {
      {Feature::verb_count, 0.0, probs, {2, 5}, {9, 13}},
      {Feature::adjective_count, 0.3, probs, {1, 3}, {6, 9}},
      {Feature::adverb_count, 2.0, probs, {0, 2}, {5, 8}},
  };
  return cfg;
}

SynthConfig SynthConfig::from_json(const json& j) {
  static const std::set<std::string> keys = {"docs", "seed", "metric", "topics", "features", "base_outcome",
                                             "topic_shift", "noise_sd", "sentences", "length",
                                             "context_sentences", "bucket_low", "bucket_high"};
  if (!j.is_object()) throw ConfigError("synth config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw ConfigError("unknown synth config key '" + k + "'");
  }
  SynthConfig cfg;
  cfg.docs = j.value("docs", cfg.docs);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.metric = j.value("metric", cfg.metric);
  cfg.topics = j.value("topics", cfg.topics);
  cfg.base_outcome = j.value("base_outcome", cfg.base_outcome);
  cfg.topic_shift = j.value("topic_shift", cfg.topic_shift);
  cfg.noise_sd = j.value("noise_sd", cfg.noise_sd);
  cfg.bucket_low = j.value("bucket_low", cfg.bucket_low);
  cfg.bucket_high = j.value("bucket_high", cfg.bucket_high);
  if (j.contains("sentences")) cfg.sentences = read_range(j["sentences"], "sentences");
  if (j.contains("length")) cfg.length = read_range(j["length"], "length");
  if (j.contains("context_sentences")) cfg.context_sentences = read_range(j["context_sentences"], "context_sentences");
  if (j.contains("features")) {
    for (const auto& f : j["features"]) {
      static const std::set<std::string> fkeys = {"feature", "effect", "treat_prob", "low_range", "high_range"};
      for (const auto& [k, v] : f.items()) {
        if (!fkeys.count(k)) throw ConfigError("unknown synth feature key '" + k + "'");
      }
      SynthFeature sf;
      sf.feature = parse_feature(f.at("feature").get<std::string>());
      sf.effect = f.value("effect", 0.0);
      sf.treat_prob = f.at("treat_prob").get<std::vector<double>>();
      if (f.contains("low_range")) sf.low_range = read_range(f["low_range"], "low_range");
      if (f.contains("high_range")) sf.high_range = read_range(f["high_range"], "high_range");
      cfg.features.push_back(sf);
    }
  }
  return cfg;
}

json SynthConfig::to_json() const {
  json j;
  j["docs"] = docs;
  j["seed"] = seed;
  j["metric"] = metric;
  j["topics"] = topics;
  j["features"] = json::array();
  for (const auto& f : features) {
    j["features"].push_back({{"feature", feature_name(f.feature)},
                             {"effect", f.effect},
                             {"treat_prob", f.treat_prob},
                             {"low_range", {f.low_range.first, f.low_range.second}},
                             {"high_range", {f.high_range.first, f.high_range.second}}});
  }
  j["base_outcome"] = base_outcome;
  j["topic_shift"] = topic_shift;
  j["noise_sd"] = noise_sd;
  j["sentences"] = {sentences.first, sentences.second};
  j["length"] = {length.first, length.second};
  j["context_sentences"] = {context_sentences.first, context_sentences.second};
  j["bucket_low"] = bucket_low;
  j["bucket_high"] = bucket_high;
  return j;
}

SynthCorpus synthesize_corpus(const SynthConfig& cfg) {
  if (cfg.docs < 1) throw ConfigError("synth: docs must be positive");
  if (cfg.topics < 1 || cfg.topics > synth_topic_pool_count()) {
    throw ConfigError("synth: topics must be in [1, " + std::to_string(synth_topic_pool_count()) + "]");
  }
  if (cfg.sentences.first < 1) throw ConfigError("synth: documents need at least one sentence");
  std::set<Feature> seen;
  for (const auto& f : cfg.features) {
    if (!plantable(f.feature)) {
      throw ConfigError("synth: feature '" + std::string(feature_name(f.feature)) + "' cannot be planted");
    }
    if (!seen.insert(f.feature).second) throw ConfigError("synth: feature planted twice");
    if (static_cast<int>(f.treat_prob.size()) != cfg.topics) {
      throw ConfigError("synth: treat_prob needs one entry per topic");
    }
    if (f.low_range.second >= f.high_range.first) {
      throw ConfigError("synth: low_range must lie below high_range for '" +
                        std::string(feature_name(f.feature)) + "'");
    }
  }

  Rng rng(cfg.seed);
  Rng text_rng = rng.split(1);
  Rng noise_rng = rng.split(2);
  Rng round_rng = rng.split(3);

  std::vector<Document> docs;
  std::vector<double> latent(static_cast<std::size_t>(cfg.docs));
  std::vector<std::uint64_t> stratum(static_cast<std::size_t>(cfg.docs));

  for (int i = 0; i < cfg.docs; ++i) {
    const int topic = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.topics)));
    const int sentences = rng.uniform_int(cfg.sentences.first, cfg.sentences.second);
    std::map<Feature, int> counts = {{Feature::verb_count, sentences},
                                     {Feature::adjective_count, 0},
                                     {Feature::adverb_count, 0},
                                     {Feature::pronoun_count, 0}};
    double y = cfg.base_outcome + cfg.topic_shift * topic;
    std::uint64_t pattern = static_cast<std::uint64_t>(topic);
    std::optional<int> word_target;
    for (const auto& f : cfg.features) {
      const bool treated = rng.bernoulli(f.treat_prob[static_cast<std::size_t>(topic)]);
      const auto& range = treated ? f.high_range : f.low_range;
      const int c = rng.uniform_int(range.first, range.second);
      if (f.feature == Feature::word_count) {
        word_target = c;
      } else {
        counts[f.feature] = c;
      }
      if (treated) y += f.effect;
      pattern = pattern * 2 + (treated ? 1 : 0);
    }
    const int content = 2 * sentences + counts[Feature::verb_count] + counts[Feature::adjective_count] +
                        counts[Feature::adverb_count] + counts[Feature::pronoun_count];
    // Length is drawn independently of the other knobs and function words
    // fill the gap, so word_count carries no information about them.
    const int words = word_target ? *word_target : rng.uniform_int(cfg.length.first, cfg.length.second);
    const int fillers = words - content;
    if (fillers < 0) {
      throw ConfigError("synth: length " + std::to_string(words) + " is below the " + std::to_string(content) +
                        " content words of a document");
    }
    y += cfg.noise_sd * noise_rng.normal();
    latent[static_cast<std::size_t>(i)] = y;
    stratum[static_cast<std::size_t>(i)] = pattern;

    const auto adj = deal(text_rng, counts[Feature::adjective_count], sentences);
    const auto adv = deal(text_rng, counts[Feature::adverb_count], sentences);
    const auto verb = deal(text_rng, counts[Feature::verb_count], sentences);
    const auto pron = deal(text_rng, counts[Feature::pronoun_count], sentences);
    const auto fill = deal(text_rng, fillers, sentences);
    const int paragraphs = std::min(1 + topic, sentences);
    const auto per_paragraph = deal(text_rng, sentences, paragraphs);

    Document doc;
    char id[32];
    std::snprintf(id, sizeof id, "synth-%05d", i);
    doc.id = id;
    int s = 0;
    for (int p = 0; p < paragraphs; ++p) {
      if (p > 0) doc.text += "\n\n";
      for (int k = 0; k < per_paragraph[p]; ++k, ++s) {
        if (k > 0) doc.text += ' ';
        doc.text += make_sentence(text_rng, topic, adj[s], adv[s], verb[s], pron[s], fill[s]);
      }
    }
    const int ctx = text_rng.uniform_int(cfg.context_sentences.first, cfg.context_sentences.second);
    for (int k = 0; k < ctx; ++k) doc.context.push_back(make_sentence(text_rng, topic, 1, 0, 1, 0, 2));
    doc.metadata = {{"synthetic_topic", topic}};
    docs.push_back(std::move(doc));
  }

  // Error-diffusion rounding per stratum: count_i = floor(S_i + u) - floor(S_{i-1} + u)
  // with a uniform offset u per stratum, so E[count_i] = latent_i exactly.
  std::map<std::uint64_t, std::pair<double, double>> carry;  // stratum -> (offset, running sum)
  std::vector<long long> outcomes;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    auto it = carry.find(stratum[i]);
    if (it == carry.end()) it = carry.emplace(stratum[i], std::make_pair(round_rng.uniform(), 0.0)).first;
    auto& [offset, sum] = it->second;
    const double before = std::floor(sum + offset);
    sum += std::max(latent[i], 0.0);
    const auto count = static_cast<long long>(std::floor(sum + offset) - before);
    docs[i].metrics[cfg.metric] = count;
    outcomes.push_back(count);
  }

  long long t_low = cfg.bucket_low;
  long long t_high = cfg.bucket_high;
  if (t_low < 0 || t_high < 0) {
    t_low = quantile_value(outcomes, 1.0 / 3.0);
    t_high = quantile_value(outcomes, 2.0 / 3.0);
    if (t_high <= t_low) t_high = t_low + 1;
  }
  assign_buckets(docs, cfg.metric, t_low, t_high);

  json truth;
  truth["metric"] = cfg.metric;
  truth["seed"] = cfg.seed;
  truth["effects"] = json::object();
  truth["treatment_thresholds"] = json::object();
  for (const auto& f : cfg.features) {
    truth["effects"][std::string(feature_name(f.feature))] = f.effect;
    truth["treatment_thresholds"][std::string(feature_name(f.feature))] = f.low_range.second;
  }
  truth["confounder"] = {{"name", "topic"},
                         {"levels", cfg.topics},
                         {"outcome_shift_per_level", cfg.topic_shift},
                         {"observable_proxy", "paragraph_count"}};
  truth["bucket_thresholds"] = {{"low", t_low}, {"high", t_high}};
  truth["config"] = cfg.to_json();
  return {std::move(docs), std::move(truth)};
}

std::string marker_word(MetricClass c) { return "zz" + std::string(class_name(c)); }

std::vector<Document> marker_corpus(const MarkerConfig& cfg) {
  if (cfg.docs < 1) throw ConfigError("marker corpus: docs must be positive");
  if (cfg.topics < 1 || cfg.topics > synth_topic_pool_count()) {
    throw ConfigError("marker corpus: topics must be in [1, " + std::to_string(synth_topic_pool_count()) + "]");
  }
  Rng rng(cfg.seed);
  std::vector<Document> docs;
  for (int i = 0; i < cfg.docs; ++i) {
    const auto cls = static_cast<MetricClass>(i % kNumMetricClasses);
    const int topic = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.topics)));
    const int n = rng.uniform_int(cfg.sentences.first, cfg.sentences.second);
    Document d;
    char id[32];
    std::snprintf(id, sizeof id, "marker-%05d", i);
    d.id = id;
    for (int k = 0; k < n; ++k) {
      std::string s = make_sentence(rng, topic, 1, 0, 1, 0, 2);
      s.pop_back();
      std::vector<std::string> w;
      std::size_t start = 0;
      while (start <= s.size()) {
        const std::size_t sp = std::min(s.find(' ', start), s.size());
        w.push_back(s.substr(start, sp - start));
        start = sp + 1;
      }
      w.insert(w.begin() + static_cast<std::ptrdiff_t>(rng.uniform_int(w.size() + 1)), marker_word(cls));
      std::string sent;
      for (const auto& x : w) sent += (sent.empty() ? "" : " ") + x;
      d.text += (d.text.empty() ? "" : " ") + sent + ".";
    }
    d.keywords = {synth_topic_nouns(topic)[rng.uniform_int(synth_topic_nouns(topic).size())]};
    d.topic = topic;
    d.metrics[cfg.metric] = static_cast<long long>(std::pow(10, static_cast<int>(cls)));
    d.buckets[cfg.metric] = cls;
    docs.push_back(std::move(d));
  }
  return docs;
}

}  // namespace cam
