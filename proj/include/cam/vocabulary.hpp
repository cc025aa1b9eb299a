#pragma once

#include "cam/document.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cam {

// Word-level vocabulary. Ids 0.. hold the special tokens, then words by
// descending corpus frequency (ties alphabetical).
class Vocabulary {
 public:
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr std::string_view kKeywords = "<kw>";
  static constexpr std::string_view kStartText = "<sot>";
  static constexpr std::string_view kEndText = "<eot>";
  static constexpr std::string_view kParagraph = "<p>";
  static constexpr std::string_view kSentence = ".";

  Vocabulary() = default;
  // Specials for `topics` topic tokens plus up to max_size total entries.
  static Vocabulary build(std::span<const Document> docs, int topics, int max_size);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  static std::string metric_token(MetricClass c);
  static std::string topic_token(int topic);

  int size() const { return static_cast<int>(tokens_.size()); }
  int topics() const { return topics_; }
  bool contains(std::string_view token) const;
  std::optional<int> find(std::string_view token) const;
  int id(std::string_view token) const;  // <unk> for unknown words
  // ConfigError when the special token is not registered.
  int special(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode_tokens(std::span<const int> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
  int topics_ = 0;
};

// Text <-> generator tokens. Sentences end with "." and paragraphs are
// separated by "<p>", so decoded text splits back into the same structure.
std::vector<std::string> text_to_tokens(std::string_view text);
std::string tokens_to_text(std::span<const std::string> tokens);

}  // namespace cam
