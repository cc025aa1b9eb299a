#pragma once

#include "cam/autodiff.hpp"
#include "cam/document.hpp"

#include <array>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cam {

enum class PosTag { noun, verb, adjective, adverb, pronoun, determiner, adposition, conjunction, number, other };

PosTag parse_pos_tag(std::string_view name);

// Word -> tag map with ordered suffix fallbacks. File format:
//   [words]            one "word<TAB>TAG" per line
//   [suffixes]         one "suffix<TAB>TAG" per line, tried in file order
// '#' starts a comment line. Tags: NOUN VERB ADJ ADV PRON DET ADP CONJ NUM OTHER.
class PosLexicon {
 public:
  static PosLexicon parse(std::string_view text);
  static PosLexicon load(const std::filesystem::path& path);
  // The lexicon compiled into the library from data/pos_lexicon.tsv.
  static const PosLexicon& bundled();

  PosTag tag(std::string_view token) const;
  std::size_t word_count() const { return words_.size(); }
  std::size_t suffix_count() const { return suffixes_.size(); }

 private:
  std::unordered_map<std::string, PosTag> words_;
  std::vector<std::pair<std::string, PosTag>> suffixes_;
  PosTag default_tag_ = PosTag::noun;
};

// Lowercased runs of ASCII letters/digits; bytes >= 0x80 count as word
// characters so UTF-8 sequences stay inside tokens.
std::vector<std::string> tokenize(std::string_view text);

// A sentence ends at '.', '!' or '?' followed by whitespace or end of text.
// Only segments that contain a token are counted.
std::vector<std::string_view> split_sentences(std::string_view text);
// Paragraphs are separated by blank lines.
std::vector<std::string_view> split_paragraphs(std::string_view text);

enum class Feature {
  word_count,
  sentence_count,
  paragraph_count,
  noun_count,
  verb_count,
  adjective_count,
  adverb_count,
  pronoun_count,
  link_count,
  image_count,
  slideshow_count,
};
inline constexpr int kNumFeatures = 11;

std::string_view feature_name(Feature f);
Feature parse_feature(std::string_view name);  // ConfigError on unknown names
std::vector<Feature> parse_feature_list(std::string_view comma_separated);

struct FeatureVector {
  std::array<double, kNumFeatures> values{};

  double& operator[](Feature f) { return values[static_cast<int>(f)]; }
  double operator[](Feature f) const { return values[static_cast<int>(f)]; }
  RowVector row() const;
  bool operator==(const FeatureVector&) const = default;
};

FeatureVector extract_features(std::string_view text, const PosLexicon& lexicon = PosLexicon::bundled());
// Text features plus link/image/slideshow counts read from metadata keys
// "link_count", "image_count", "slideshow_count" (0 when absent).
FeatureVector extract_features(const Document& doc, const PosLexicon& lexicon = PosLexicon::bundled());

// Rows = documents, columns = the selected features in the given order.
Matrix feature_matrix(std::span<const FeatureVector> vectors, std::span<const Feature> columns);

// CSV with header "id,word_count,...,slideshow_count".
void write_features_csv(std::ostream& os, std::span<const std::string> ids,
                        std::span<const FeatureVector> vectors);

// Linear map from per-position token distributions to expected feature
// counts: counts = sum_t p_t * indicator + offset. Built over a closed
// vocabulary; an entry is a word iff tokenize(entry) == {entry}.
struct SoftFeatureMap {
  Matrix indicator;  // V x kNumFeatures
  RowVector offset;  // 1 x kNumFeatures

  static SoftFeatureMap build(std::span<const std::string> vocabulary,
                              const PosLexicon& lexicon = PosLexicon::bundled(),
                              std::string_view sentence_token = ".",
                              std::string_view paragraph_token = "<p>");
  Index vocab_size() const { return indicator.rows(); }
};

// Expected feature counts of a sequence whose positions are independent
// categorical distributions (one row per position). DataError when a row
// does not sum to one within 1e-9.
RowVector soft_expected_features(const Matrix& distributions, const SoftFeatureMap& map);
Var soft_expected_features(const Var& distributions, const SoftFeatureMap& map);

void check_distribution_rows(const Matrix& distributions, const char* op);

}  // namespace cam
