#pragma once

#include "cam/core.hpp"
#include "cam/document.hpp"
#include "cam/text_features.hpp"

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace cam {

// JSON Lines I/O. Derived fields (keywords, topic, buckets) are written only
// when set, so raw corpora stay raw after a round trip.
nlohmann::ordered_json document_to_json(const Document& doc);
Document document_from_json(const nlohmann::ordered_json& j);  // DataError on bad fields
std::vector<Document> read_jsonl(std::istream& is);
std::vector<Document> load_jsonl(const std::filesystem::path& path);
void write_jsonl(std::ostream& os, const std::vector<Document>& docs);
void save_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs);

struct FilterConfig {
  long long min_words = 30;
  long long max_words = 5000;
  long long min_participation = 1;
  std::string participation_metric = "participation";
};

// Keeps min_words < words < max_words and participation > min_participation
// (the participation test only applies to documents carrying that metric).
std::vector<Document> filter_corpus(const std::vector<Document>& docs, const FilterConfig& cfg = {});

// low iff value <= t_low, high iff value > t_high, medium otherwise.
MetricClass bucketize(long long value, long long t_low, long long t_high);
// Sets doc.buckets[metric] for every document carrying the metric.
void assign_buckets(std::vector<Document>& docs, const std::string& metric, long long t_low,
                    long long t_high);

// Top-n tokens per document by raw tf * ln(N / df); ties lexicographic.
std::vector<std::vector<std::string>> tfidf_keywords(const std::vector<Document>& docs, int n = 10);

struct LdaConfig {
  int topics = 20;
  std::uint64_t seed = 23;
  int iterations = 500;
  double alpha = -1.0;  // negative selects 50 / topics
  double beta = 0.01;
};

// Collapsed Gibbs sampling over token-id documents; returns the argmax topic
// of each document's final topic counts (lowest id on ties).
std::vector<int> lda_topics(const std::vector<std::vector<int>>& docs, int vocab_size,
                            const LdaConfig& cfg = {});
// Tokenizes each text, drops function words (determiners, adpositions,
// conjunctions, pronouns, numbers, other), and runs lda_topics.
std::vector<int> lda_topics(const std::vector<Document>& docs, const LdaConfig& cfg = {});

struct CorpusSplit {
  std::vector<Document> train;
  std::vector<Document> dev;
  std::vector<Document> test;
};

// Seeded shuffle then contiguous slices of floor(ratio * n) documents for
// train and dev; test takes the remainder.
CorpusSplit split_corpus(const std::vector<Document>& docs, std::array<double, 3> ratios,
                         std::uint64_t seed);

// Value at quantile q of the sorted values (lower nearest rank).
long long quantile_value(std::vector<long long> values, double q);

// One planted binary treatment. T = 1 iff the feature count exceeds
// low_range.second; counts are drawn uniformly from the arm's range.
struct SynthFeature {
  Feature feature = Feature::verb_count;
  double effect = 0.0;
  std::vector<double> treat_prob;  // P(T = 1 | topic), one entry per topic
  std::pair<int, int> low_range{2, 5};
  std::pair<int, int> high_range{9, 13};
};

struct SynthConfig {
  int docs = 5000;
  std::uint64_t seed = 7;
  std::string metric = "participation";
  int topics = 3;  // categorical confounder
  std::vector<SynthFeature> features;
  double base_outcome = 10.0;
  double topic_shift = 2.0;  // outcome shift per topic index
  double noise_sd = 0.1;
  std::pair<int, int> sentences{3, 6};
  std::pair<int, int> length{50, 80};  // word count when word_count is not planted
  std::pair<int, int> context_sentences{1, 2};
  // Bucket thresholds; negative values select the 1/3 and 2/3 outcome quantiles.
  long long bucket_low = -1;
  long long bucket_high = -1;

  // Three features with effects 0, 0.3 and 2.0, all confounded by topic.
  static SynthConfig planted_default();
  static SynthConfig from_json(const nlohmann::ordered_json& j);
  nlohmann::ordered_json to_json() const;
};

struct SynthCorpus {
  std::vector<Document> docs;
  nlohmann::ordered_json truth;  // planted effects, thresholds, config
};

// Documents from slot templates with per-document feature knobs. The
// latent outcome is base + sum(effect * T) + topic_shift * topic + noise;
// it is turned into counts by error-diffusion rounding within each
// (topic, treatment pattern) stratum, which is unbiased per document.
SynthCorpus synthesize_corpus(const SynthConfig& cfg);

// Short documents whose bucket is announced by a class marker word
// ("zzlow", "zzmedium", "zzhigh") placed once in every sentence. Classes are
// balanced; topics are drawn uniformly and set the nouns.
struct MarkerConfig {
  int docs = 200;
  std::uint64_t seed = 0;
  std::string metric = "participation";
  int topics = 2;
  std::pair<int, int> sentences{2, 3};
};
std::vector<Document> marker_corpus(const MarkerConfig& cfg);
std::string marker_word(MetricClass c);

// Word pools used by the generator, exposed for tests.
const std::vector<std::string>& synth_pool(std::string_view name);
const std::vector<std::string>& synth_topic_nouns(int topic);
int synth_topic_pool_count();

}  // namespace cam
