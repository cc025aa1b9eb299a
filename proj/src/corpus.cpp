#include "cam/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

namespace cam {

using json = nlohmann::ordered_json;

nlohmann::ordered_json document_to_json(const Document& doc) {
  json j;
  j["id"] = doc.id;
  j["text"] = doc.text;
  j["context"] = doc.context;
  j["metrics"] = json::object();
  for (const auto& [k, v] : doc.metrics) j["metrics"][k] = v;
  j["metadata"] = doc.metadata;
  if (!doc.keywords.empty()) j["keywords"] = doc.keywords;
  if (doc.topic) j["topic"] = *doc.topic;
  if (!doc.buckets.empty()) {
    j["buckets"] = json::object();
    for (const auto& [k, v] : doc.buckets) j["buckets"][k] = class_name(v);
  }
  return j;
}

Document document_from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw DataError("expected a JSON object");
  Document doc;
  if (!j.contains("id") || !j["id"].is_string()) throw DataError("missing string field 'id'");
  if (!j.contains("text") || !j["text"].is_string()) throw DataError("missing string field 'text'");
  doc.id = j["id"].get<std::string>();
  doc.text = j["text"].get<std::string>();
  if (j.contains("context")) {
    if (!j["context"].is_array()) throw DataError("'context' must be an array of strings");
    for (const auto& s : j["context"]) {
      if (!s.is_string()) throw DataError("'context' must be an array of strings");
      doc.context.push_back(s.get<std::string>());
    }
  }
  if (j.contains("metrics")) {
    if (!j["metrics"].is_object()) throw DataError("'metrics' must be an object");
    for (const auto& [k, v] : j["metrics"].items()) {
      if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw DataError("metric '" + k + "' must be a non-negative integer");
      }
      doc.metrics[k] = v.get<long long>();
    }
  }
  if (j.contains("metadata")) {
    if (!j["metadata"].is_object()) throw DataError("'metadata' must be an object");
    doc.metadata = j["metadata"];
  }
  if (j.contains("keywords")) {
    for (const auto& s : j["keywords"]) doc.keywords.push_back(s.get<std::string>());
  }
  if (j.contains("topic")) {
    if (!j["topic"].is_number_integer()) throw DataError("'topic' must be an integer");
    doc.topic = j["topic"].get<int>();
  }
  if (j.contains("buckets")) {
    for (const auto& [k, v] : j["buckets"].items()) doc.buckets[k] = parse_class(v.get<std::string>());
  }
  return doc;
}

std::vector<Document> read_jsonl(std::istream& is) {
  std::vector<Document> docs;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      docs.push_back(document_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!ids.insert(docs.back().id).second) {
      throw DataError("line " + std::to_string(line_no) + ": duplicate id '" + docs.back().id + "'");
    }
  }
  return docs;
}

std::vector<Document> load_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open corpus '" + path.string() + "'");
  try {
    return read_jsonl(is);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_jsonl(std::ostream& os, const std::vector<Document>& docs) {
  for (const auto& d : docs) os << document_to_json(d).dump() << '\n';
}

void save_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write '" + path.string() + "'");
  write_jsonl(os, docs);
  if (!os) throw DataError("write failed for '" + path.string() + "'");
}

std::vector<Document> filter_corpus(const std::vector<Document>& docs, const FilterConfig& cfg) {
  std::vector<Document> out;
  for (const auto& d : docs) {
    const auto words = static_cast<long long>(tokenize(d.text).size());
    if (!(words > cfg.min_words && words < cfg.max_words)) continue;
    auto it = d.metrics.find(cfg.participation_metric);
    if (it != d.metrics.end() && !(it->second > cfg.min_participation)) continue;
    out.push_back(d);
  }
  return out;
}

MetricClass bucketize(long long value, long long t_low, long long t_high) {
  if (t_low >= t_high) {
    throw ConfigError("bucketize: t_low (" + std::to_string(t_low) + ") must be below t_high (" +
                      std::to_string(t_high) + ")");
  }
  if (value <= t_low) return MetricClass::low;
  if (value > t_high) return MetricClass::high;
  return MetricClass::medium;
}

void assign_buckets(std::vector<Document>& docs, const std::string& metric, long long t_low, long long t_high) {
  for (auto& d : docs) {
    auto it = d.metrics.find(metric);
    if (it != d.metrics.end()) d.buckets[metric] = bucketize(it->second, t_low, t_high);
  }
}

std::vector<std::vector<std::string>> tfidf_keywords(const std::vector<Document>& docs, int n) {
  if (docs.size() < 2) throw DataError("tfidf_keywords: need at least two documents for idf");
  std::vector<std::map<std::string, int>> tf(docs.size());
  std::map<std::string, int> df;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    for (auto& tok : tokenize(docs[i].text)) ++tf[i][tok];
    for (const auto& [tok, c] : tf[i]) ++df[tok];
  }
  const double n_docs = static_cast<double>(docs.size());
  std::vector<std::vector<std::string>> out(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    std::vector<std::pair<double, std::string>> scored;
    for (const auto& [tok, c] : tf[i]) scored.emplace_back(c * std::log(n_docs / df[tok]), tok);
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    const std::size_t k = std::min<std::size_t>(scored.size(), static_cast<std::size_t>(std::max(n, 0)));
    for (std::size_t r = 0; r < k; ++r) out[i].push_back(scored[r].second);
  }
  return out;
}

std::vector<int> lda_topics(const std::vector<std::vector<int>>& docs, int vocab_size, const LdaConfig& cfg) {
  const int K = cfg.topics;
  if (K < 1) throw ConfigError("lda_topics: topic count must be at least 1");
  if (vocab_size < 1) throw DataError("lda_topics: empty vocabulary");
  const double alpha = cfg.alpha < 0 ? 50.0 / K : cfg.alpha;
  const double beta = cfg.beta;
  const double vbeta = vocab_size * beta;

  Rng rng(cfg.seed);
  std::vector<std::vector<int>> z(docs.size());
  std::vector<int> nwk(static_cast<std::size_t>(vocab_size) * K, 0);
  std::vector<int> nk(K, 0);
  std::vector<std::vector<int>> ndk(docs.size(), std::vector<int>(K, 0));
  for (std::size_t d = 0; d < docs.size(); ++d) {
    z[d].resize(docs[d].size());
    for (std::size_t i = 0; i < docs[d].size(); ++i) {
      const int w = docs[d][i];
      if (w < 0 || w >= vocab_size) throw DataError("lda_topics: token id out of range");
      const int k = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(K)));
      z[d][i] = k;
      ++nwk[static_cast<std::size_t>(w) * K + k];
      ++nk[k];
      ++ndk[d][k];
    }
  }
  std::vector<double> p(K);
  for (int it = 0; it < cfg.iterations; ++it) {
    for (std::size_t d = 0; d < docs.size(); ++d) {
      for (std::size_t i = 0; i < docs[d].size(); ++i) {
        const int w = docs[d][i];
        int* row = &nwk[static_cast<std::size_t>(w) * K];
        int k = z[d][i];
        --row[k];
        --nk[k];
        --ndk[d][k];
        double total = 0.0;
        for (int t = 0; t < K; ++t) {
          total += (ndk[d][t] + alpha) * (row[t] + beta) / (nk[t] + vbeta);
          p[t] = total;
        }
        const double u = rng.uniform() * total;
        k = static_cast<int>(std::upper_bound(p.begin(), p.end(), u) - p.begin());
        if (k >= K) k = K - 1;
        z[d][i] = k;
        ++row[k];
        ++nk[k];
        ++ndk[d][k];
      }
    }
  }
  std::vector<int> topics(docs.size());
  for (std::size_t d = 0; d < docs.size(); ++d) {
    topics[d] = static_cast<int>(std::max_element(ndk[d].begin(), ndk[d].end()) - ndk[d].begin());
  }
  return topics;
}

std::vector<int> lda_topics(const std::vector<Document>& docs, const LdaConfig& cfg) {
  const PosLexicon& lex = PosLexicon::bundled();
  std::map<std::string, int> vocab;
  std::vector<std::vector<std::string>> tokens(docs.size());
  for (std::size_t d = 0; d < docs.size(); ++d) {
    for (auto& tok : tokenize(docs[d].text)) {
      switch (lex.tag(tok)) {
        case PosTag::determiner:
        case PosTag::adposition:
        case PosTag::conjunction:
        case PosTag::pronoun:
        case PosTag::number:
        case PosTag::other:
          continue;
        default:
          vocab.emplace(tok, 0);
          tokens[d].push_back(std::move(tok));
      }
    }
  }
  int next = 0;
  for (auto& [tok, id] : vocab) id = next++;
  std::vector<std::vector<int>> ids(docs.size());
  for (std::size_t d = 0; d < docs.size(); ++d) {
    for (const auto& tok : tokens[d]) ids[d].push_back(vocab[tok]);
  }
  return lda_topics(ids, std::max(next, 1), cfg);
}

CorpusSplit split_corpus(const std::vector<Document>& docs, std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  auto order = iota_indices(docs.size());
  Rng rng(seed);
  rng.shuffle(order);
  const double n = static_cast<double>(docs.size());
  const auto n_train = static_cast<std::size_t>(std::floor(ratios[0] * n + 1e-9));
  const auto n_dev = std::min(docs.size() - n_train, static_cast<std::size_t>(std::floor(ratios[1] * n + 1e-9)));
  CorpusSplit s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Document& d = docs[order[i]];
    if (i < n_train) {
      s.train.push_back(d);
    } else if (i < n_train + n_dev) {
      s.dev.push_back(d);
    } else {
      s.test.push_back(d);
    }
  }
  return s;
}

long long quantile_value(std::vector<long long> values, double q) {
  if (values.empty()) throw DataError("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1)));
  return values[std::min(idx, values.size() - 1)];
}

}  // namespace cam
