#include "cam/text_features.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

namespace cam {

extern const std::string_view kBundledLexicon;

namespace {

constexpr std::array<std::string_view, kNumFeatures> kFeatureNames = {
    "word_count",   "sentence_count", "paragraph_count", "noun_count",
    "verb_count",   "adjective_count", "adverb_count",   "pronoun_count",
    "link_count",   "image_count",    "slideshow_count"};

bool is_word_byte(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool has_token(std::string_view s) {
  for (char c : s) {
    if (is_word_byte(static_cast<unsigned char>(c))) return true;
  }
  return false;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

bool is_digits(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
  }
  return true;
}

}  // namespace

PosTag parse_pos_tag(std::string_view name) {
  if (name == "NOUN") return PosTag::noun;
  if (name == "VERB") return PosTag::verb;
  if (name == "ADJ") return PosTag::adjective;
  if (name == "ADV") return PosTag::adverb;
  if (name == "PRON") return PosTag::pronoun;
  if (name == "DET") return PosTag::determiner;
  if (name == "ADP") return PosTag::adposition;
  if (name == "CONJ") return PosTag::conjunction;
  if (name == "NUM") return PosTag::number;
  if (name == "OTHER") return PosTag::other;
  throw DataError("unknown POS tag '" + std::string(name) + "'");
}

PosLexicon PosLexicon::parse(std::string_view text) {
  PosLexicon lex;
  enum { none, words, suffixes } section = none;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty() || line.front() == '#') continue;
    if (line == "[words]") {
      section = words;
      continue;
    }
    if (line == "[suffixes]") {
      section = suffixes;
      continue;
    }
    const std::size_t tab = line.find('\t');
    if (section == none || tab == std::string_view::npos) {
      throw DataError("lexicon line " + std::to_string(line_no) + ": expected 'entry<TAB>TAG' inside a section");
    }
    const std::string key(line.substr(0, tab));
    PosTag tag;
    try {
      tag = parse_pos_tag(line.substr(tab + 1));
    } catch (const DataError& e) {
      throw DataError("lexicon line " + std::to_string(line_no) + ": " + e.what());
    }
    if (section == words) {
      lex.words_[key] = tag;
    } else {
      lex.suffixes_.emplace_back(key, tag);
    }
  }
  return lex;
}

PosLexicon PosLexicon::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open lexicon '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

const PosLexicon& PosLexicon::bundled() {
  static const PosLexicon lex = parse(kBundledLexicon);
  return lex;
}

PosTag PosLexicon::tag(std::string_view token) const {
  if (auto it = words_.find(std::string(token)); it != words_.end()) return it->second;
  if (is_digits(token)) return PosTag::number;
  for (const auto& [suffix, tag] : suffixes_) {
    if (token.size() > suffix.size() && token.ends_with(suffix)) return tag;
  }
  return default_tag_;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_word_byte(c)) {
      cur.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch);
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string_view> split_sentences(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') && (i + 1 == text.size() || is_space(text[i + 1]))) {
      std::string_view s = trim(text.substr(start, i + 1 - start));
      if (has_token(s)) out.push_back(s);
      start = i + 1;
    }
  }
  std::string_view rest = trim(text.substr(start));
  if (has_token(rest)) out.push_back(rest);
  return out;
}

std::vector<std::string_view> split_paragraphs(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '\n') {
      ++i;
      continue;
    }
    // A blank line: newline, optional horizontal whitespace, newline.
    std::size_t j = i + 1;
    while (j < text.size() && text[j] != '\n' && is_space(text[j])) ++j;
    if (j < text.size() && text[j] == '\n') {
      std::string_view p = trim(text.substr(start, i - start));
      if (has_token(p)) out.push_back(p);
      while (j < text.size() && is_space(text[j])) ++j;
      start = i = j;
    } else {
      i = j;
    }
  }
  std::string_view rest = trim(text.substr(start));
  if (has_token(rest)) out.push_back(rest);
  return out;
}

std::string_view feature_name(Feature f) { return kFeatureNames[static_cast<int>(f)]; }

Feature parse_feature(std::string_view name) {
  for (int i = 0; i < kNumFeatures; ++i) {
    if (kFeatureNames[i] == name) return static_cast<Feature>(i);
  }
  throw ConfigError("unknown feature '" + std::string(name) + "'");
}

std::vector<Feature> parse_feature_list(std::string_view list) {
  std::vector<Feature> out;
  while (!list.empty()) {
    const std::size_t comma = list.find(',');
    std::string_view item = trim(list.substr(0, comma));
    if (!item.empty()) out.push_back(parse_feature(item));
    list.remove_prefix(comma == std::string_view::npos ? list.size() : comma + 1);
  }
  return out;
}

RowVector FeatureVector::row() const {
  RowVector r(kNumFeatures);
  for (int i = 0; i < kNumFeatures; ++i) r(i) = values[i];
  return r;
}

FeatureVector extract_features(std::string_view text, const PosLexicon& lexicon) {
  FeatureVector v;
  const auto tokens = tokenize(text);
  v[Feature::word_count] = static_cast<double>(tokens.size());
  v[Feature::sentence_count] = static_cast<double>(split_sentences(text).size());
  v[Feature::paragraph_count] = static_cast<double>(split_paragraphs(text).size());
  for (const auto& tok : tokens) {
    switch (lexicon.tag(tok)) {
      case PosTag::noun: v[Feature::noun_count] += 1; break;
      case PosTag::verb: v[Feature::verb_count] += 1; break;
      case PosTag::adjective: v[Feature::adjective_count] += 1; break;
      case PosTag::adverb: v[Feature::adverb_count] += 1; break;
      case PosTag::pronoun: v[Feature::pronoun_count] += 1; break;
      default: break;
    }
  }
  return v;
}

FeatureVector extract_features(const Document& doc, const PosLexicon& lexicon) {
  FeatureVector v = extract_features(doc.text, lexicon);
  const std::pair<Feature, const char*> meta[] = {{Feature::link_count, "link_count"},
                                                  {Feature::image_count, "image_count"},
                                                  {Feature::slideshow_count, "slideshow_count"}};
  for (const auto& [f, key] : meta) {
    if (doc.metadata.is_object() && doc.metadata.contains(key) && doc.metadata[key].is_number()) {
      v[f] = std::max(0.0, doc.metadata[key].get<double>());
    }
  }
  return v;
}

Matrix feature_matrix(std::span<const FeatureVector> vectors, std::span<const Feature> columns) {
  Matrix m(static_cast<Index>(vectors.size()), static_cast<Index>(columns.size()));
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    for (std::size_t j = 0; j < columns.size(); ++j) {
      m(static_cast<Index>(i), static_cast<Index>(j)) = vectors[i][columns[j]];
    }
  }
  return m;
}

void write_features_csv(std::ostream& os, std::span<const std::string> ids,
                        std::span<const FeatureVector> vectors) {
  if (ids.size() != vectors.size()) throw ShapeError("write_features_csv: ids and vectors differ in length");
  os << "id";
  for (auto name : kFeatureNames) os << ',' << name;
  os << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    os << ids[i];
    for (double v : vectors[i].values) os << ',' << v;
    os << '\n';
  }
}

SoftFeatureMap SoftFeatureMap::build(std::span<const std::string> vocabulary, const PosLexicon& lexicon,
                                     std::string_view sentence_token, std::string_view paragraph_token) {
  SoftFeatureMap map;
  map.indicator = Matrix::Zero(static_cast<Index>(vocabulary.size()), kNumFeatures);
  map.offset = RowVector::Zero(kNumFeatures);
  map.offset(static_cast<int>(Feature::paragraph_count)) = 1.0;
  for (std::size_t v = 0; v < vocabulary.size(); ++v) {
    const std::string& entry = vocabulary[v];
    auto row = map.indicator.row(static_cast<Index>(v));
    if (entry == sentence_token) {
      row(static_cast<int>(Feature::sentence_count)) = 1.0;
      continue;
    }
    if (entry == paragraph_token) {
      row(static_cast<int>(Feature::paragraph_count)) = 1.0;
      continue;
    }
    const auto toks = tokenize(entry);
    if (toks.size() != 1 || toks[0] != entry) continue;
    row(static_cast<int>(Feature::word_count)) = 1.0;
    switch (lexicon.tag(entry)) {
      case PosTag::noun: row(static_cast<int>(Feature::noun_count)) = 1.0; break;
      case PosTag::verb: row(static_cast<int>(Feature::verb_count)) = 1.0; break;
      case PosTag::adjective: row(static_cast<int>(Feature::adjective_count)) = 1.0; break;
      case PosTag::adverb: row(static_cast<int>(Feature::adverb_count)) = 1.0; break;
      case PosTag::pronoun: row(static_cast<int>(Feature::pronoun_count)) = 1.0; break;
      default: break;
    }
  }
  return map;
}

void check_distribution_rows(const Matrix& p, const char* op) {
  for (Index r = 0; r < p.rows(); ++r) {
    const double s = p.row(r).sum();
    if (!(std::abs(s - 1.0) <= 1e-9)) {
      std::ostringstream msg;
      msg << op << ": row " << r << " sums to " << s << ", expected 1";
      throw DataError(msg.str());
    }
  }
}

RowVector soft_expected_features(const Matrix& distributions, const SoftFeatureMap& map) {
  if (distributions.cols() != map.vocab_size()) {
    throw ShapeError("soft_expected_features: distributions " + shape_string(distributions) +
                     " vs vocabulary of " + std::to_string(map.vocab_size()));
  }
  check_distribution_rows(distributions, "soft_expected_features");
  return (distributions.colwise().sum() * map.indicator) + map.offset;
}

Var soft_expected_features(const Var& distributions, const SoftFeatureMap& map) {
  if (distributions.cols() != map.vocab_size()) {
    throw ShapeError("soft_expected_features: distributions " + shape_string(distributions.value()) +
                     " vs vocabulary of " + std::to_string(map.vocab_size()));
  }
  check_distribution_rows(distributions.value(), "soft_expected_features");
  Tape& t = distributions.tape();
  Var counts = ops::matmul(ops::sum_rows(distributions), t.constant(map.indicator));
  return ops::add_const(counts, map.offset);
}

}  // namespace cam
