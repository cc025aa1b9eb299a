#include "cam/vocabulary.hpp"

#include "cam/text_features.hpp"

#include <algorithm>
#include <set>

namespace cam {

std::string Vocabulary::metric_token(MetricClass c) { return "<m_" + std::string(class_name(c)) + ">"; }

std::string Vocabulary::topic_token(int topic) { return "<t" + std::to_string(topic) + ">"; }

namespace {

std::vector<std::string> special_tokens(int topics) {
  std::vector<std::string> s = {std::string(Vocabulary::kUnk)};
  for (int c = 0; c < kNumMetricClasses; ++c) s.push_back(Vocabulary::metric_token(static_cast<MetricClass>(c)));
  for (int k = 0; k < topics; ++k) s.push_back(Vocabulary::topic_token(k));
  for (auto t : {Vocabulary::kKeywords, Vocabulary::kStartText, Vocabulary::kEndText, Vocabulary::kParagraph,
                 Vocabulary::kSentence}) {
    s.emplace_back(t);
  }
  return s;
}

bool is_topic_token(const std::string& t) {
  if (t.size() < 4 || t.rfind("<t", 0) != 0 || t.back() != '>') return false;
  return std::all_of(t.begin() + 2, t.end() - 1, [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
      throw DataError("vocabulary: duplicate token '" + v.tokens_[i] + "'");
    }
    if (is_topic_token(v.tokens_[i])) ++v.topics_;
  }
  return v;
}

Vocabulary Vocabulary::build(std::span<const Document> docs, int topics, int max_size) {
  if (topics < 0) throw ConfigError("vocabulary: negative topic count");
  std::vector<std::string> tokens = special_tokens(topics);
  if (max_size < static_cast<int>(tokens.size())) {
    throw ConfigError("vocabulary: max size " + std::to_string(max_size) + " below the " +
                      std::to_string(tokens.size()) + " special tokens");
  }
  const std::set<std::string> specials(tokens.begin(), tokens.end());
  std::map<std::string, long> counts;
  auto count = [&](const std::vector<std::string>& ts) {
    for (const auto& t : ts) {
      if (!specials.contains(t)) ++counts[t];
    }
  };
  for (const auto& d : docs) {
    count(text_to_tokens(d.text));
    for (const auto& s : d.context) count(text_to_tokens(s));
    for (const auto& k : d.keywords) count(tokenize(k));
  }
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [w, n] : ranked) {
    if (static_cast<int>(tokens.size()) >= max_size) break;
    tokens.push_back(w);
  }
  return from_tokens(std::move(tokens));
}

bool Vocabulary::contains(std::string_view token) const { return index_.find(token) != index_.end(); }

std::optional<int> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(std::string_view token) const {
  if (auto i = find(token)) return *i;
  return special(kUnk);
}

int Vocabulary::special(std::string_view token) const {
  if (auto i = find(token)) return *i;
  throw ConfigError("special token '" + std::string(token) + "' is not registered in the vocabulary");
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode_tokens(std::span<const int> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

std::vector<std::string> text_to_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (auto para : split_paragraphs(text)) {
    std::vector<std::string> words;
    for (auto sent : split_sentences(para)) {
      auto ws = tokenize(sent);
      if (ws.empty()) continue;
      words.insert(words.end(), ws.begin(), ws.end());
      words.emplace_back(Vocabulary::kSentence);
    }
    if (words.empty()) continue;
    if (!out.empty()) out.emplace_back(Vocabulary::kParagraph);
    out.insert(out.end(), words.begin(), words.end());
  }
  return out;
}

std::string tokens_to_text(std::span<const std::string> tokens) {
  std::string out;
  for (const auto& w : tokens) {
    if (w == Vocabulary::kSentence) {
      out += ".";
    } else if (w == Vocabulary::kParagraph) {
      out += "\n\n";
    } else {
      if (!out.empty() && out.back() != '\n') out += " ";
      out += w;
    }
  }
  return out;
}

}  // namespace cam
