#include "cam/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace cam {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Perplexity

double perplexity(std::span<const TokenNll> parts) {
  double sum = 0.0;
  long tokens = 0;
  for (const auto& p : parts) {
    sum += p.sum;
    tokens += p.tokens;
  }
  if (tokens == 0) throw DataError("perplexity: no tokens");
  return std::exp(sum / static_cast<double>(tokens));
}

double perplexity(const Transformer& model, std::span<const GenExample> held_out) {
  std::vector<TokenNll> parts;
  parts.reserve(held_out.size());
  for (const auto& ex : held_out) parts.push_back(sequence_nll(model, ex));
  return perplexity(parts);
}

double cvae_perplexity(const Cvae& model, std::span<const CvaeExample> held_out, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenNll> parts;
  CvaeWeights w;
  w.metric = 0.0;
  for (const auto& ex : held_out) {
    RowVector eps(model.config().latent_dim);
    for (Index i = 0; i < eps.size(); ++i) eps(i) = rng.normal();
    Tape t(false);
    const CvaeTerms terms = model.loss(t, ex, eps, CvaeVariant::noncausal, w);
    parts.push_back({terms.reconstruction + terms.kl_z, static_cast<long>(ex.sentence.size()) + 1});
  }
  return perplexity(parts);
}

// ---------------------------------------------------------------------------
// Control accuracy

ControlResult control_accuracy(std::span<const Generation> generations,
                               const std::function<int(std::string_view)>& predict) {
  if (generations.empty()) throw DataError("control accuracy: no generations");
  ControlResult r;
  long hits = 0;
  for (const auto& g : generations) {
    const int p = predict(g.text);
    if (p < 0 || p >= kNumMetricClasses) throw DataError("control accuracy: prediction out of range");
    const int y = static_cast<int>(g.target);
    ++r.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
    hits += p == y;
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(generations.size());
  return r;
}

ControlResult control_accuracy(std::span<const Generation> generations, const BagClassifier& clf) {
  if (clf.num_classes() != kNumMetricClasses) throw ConfigError("control accuracy needs a 3-class classifier");
  return control_accuracy(generations, [&](std::string_view t) { return clf.predict_class(t); });
}

// ---------------------------------------------------------------------------
// ROUGE

namespace {

std::map<std::vector<std::string>, long> ngram_counts(std::span<const std::string> w, std::size_t n) {
  std::map<std::vector<std::string>, long> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++out[std::vector<std::string>(w.begin() + i, w.begin() + i + n)];
  return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore from_overlap(double overlap, double hyp_total, double ref_total) {
  RougeScore s;
  s.precision = hyp_total > 0 ? overlap / hyp_total : 0.0;
  s.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

}  // namespace

RougeScore rouge_score(std::span<const std::string> hypothesis, std::span<const std::string> reference,
                       RougeVariant variant) {
  if (variant == RougeVariant::l) {
    return from_overlap(static_cast<double>(lcs_length(hypothesis, reference)),
                        static_cast<double>(hypothesis.size()), static_cast<double>(reference.size()));
  }
  const std::size_t n = variant == RougeVariant::one ? 1 : 2;
  const auto h = ngram_counts(hypothesis, n);
  const auto r = ngram_counts(reference, n);
  long overlap = 0, h_total = 0, r_total = 0;
  for (const auto& [g, c] : h) {
    h_total += c;
    if (auto it = r.find(g); it != r.end()) overlap += std::min(c, it->second);
  }
  for (const auto& [g, c] : r) r_total += c;
  return from_overlap(static_cast<double>(overlap), static_cast<double>(h_total), static_cast<double>(r_total));
}

double rouge(std::string_view hypothesis, std::span<const std::string> references, RougeVariant variant) {
  if (references.empty()) throw DataError("rouge: no references");
  const auto hyp = tokenize(hypothesis);
  if (hyp.empty()) throw DataError("rouge: empty hypothesis");
  double best = 0.0;
  for (const auto& ref : references) best = std::max(best, rouge_score(hyp, tokenize(ref), variant).f1);
  return best;
}

RougeSummary mean_rouge(std::span<const std::string> hypotheses,
                        std::span<const std::vector<std::string>> references) {
  if (hypotheses.size() != references.size()) throw ShapeError("rouge: one reference list per hypothesis");
  if (hypotheses.empty()) throw DataError("rouge: no hypotheses");
  RougeSummary s;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    s.rouge_1 += rouge(hypotheses[i], references[i], RougeVariant::one);
    s.rouge_2 += rouge(hypotheses[i], references[i], RougeVariant::two);
    s.rouge_l += rouge(hypotheses[i], references[i], RougeVariant::l);
  }
  const double n = static_cast<double>(hypotheses.size());
  s.rouge_1 /= n;
  s.rouge_2 /= n;
  s.rouge_l /= n;
  return s;
}

// ---------------------------------------------------------------------------
// Feature distributions

FeatureDistribution feature_distribution(std::span<const Generation> generations, std::span<const Feature> features) {
  FeatureDistribution out;
  out.features.assign(features.begin(), features.end());
  const std::size_t k = features.size();
  std::array<std::vector<std::vector<double>>, kNumMetricClasses> values;  // [class][sample][feature]
  for (const auto& g : generations) {
    const FeatureVector fv = extract_features(g.text);
    std::vector<double> row;
    for (Feature f : features) row.push_back(fv[f]);
    values[static_cast<std::size_t>(g.target)].push_back(std::move(row));
  }
  std::array<const ClassFeatures*, kNumMetricClasses> by_class{};
  out.classes.reserve(kNumMetricClasses);
  for (int c = 0; c < kNumMetricClasses; ++c) {
    const auto& v = values[static_cast<std::size_t>(c)];
    if (v.empty()) {
      out.warnings.push_back("no samples for class " + std::string(class_name(static_cast<MetricClass>(c))));
      continue;
    }
    ClassFeatures cf;
    cf.target = static_cast<MetricClass>(c);
    cf.n = static_cast<long>(v.size());
    cf.mean.assign(k, 0.0);
    cf.std.assign(k, 0.0);
    for (const auto& row : v) {
      for (std::size_t j = 0; j < k; ++j) cf.mean[j] += row[j];
    }
    for (std::size_t j = 0; j < k; ++j) cf.mean[j] /= static_cast<double>(cf.n);
    for (const auto& row : v) {
      for (std::size_t j = 0; j < k; ++j) cf.std[j] += (row[j] - cf.mean[j]) * (row[j] - cf.mean[j]);
    }
    for (std::size_t j = 0; j < k; ++j) cf.std[j] = std::sqrt(cf.std[j] / static_cast<double>(cf.n));
    out.classes.push_back(std::move(cf));
  }
  if (out.classes.size() < 2) throw DataError("feature distribution: fewer than two target classes have samples");
  for (const auto& cf : out.classes) by_class[static_cast<std::size_t>(cf.target)] = &cf;
  const ClassFeatures* low = by_class[static_cast<std::size_t>(MetricClass::low)];
  const ClassFeatures* high = by_class[static_cast<std::size_t>(MetricClass::high)];
  for (std::size_t j = 0; j < k; ++j) {
    if (low && high) {
      out.gap.emplace_back(high->mean[j] - low->mean[j]);
    } else {
      out.gap.emplace_back(std::nullopt);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

namespace {

ordered_json optional_number(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

std::optional<double> read_optional(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

ordered_json EvalReport::to_json() const {
  ordered_json out;
  out["variants"] = ordered_json::array();
  for (const auto& v : variants) {
    ordered_json j;
    j["name"] = v.name;
    j["samples"] = v.samples;
    j["control_accuracy"] = v.control.accuracy;
    j["confusion"] = v.control.confusion;
    j["perplexity"] = optional_number(v.perplexity);
    if (v.rouge) {
      j["rouge_1"] = v.rouge->rouge_1;
      j["rouge_2"] = v.rouge->rouge_2;
      j["rouge_l"] = v.rouge->rouge_l;
    } else {
      j["rouge_1"] = j["rouge_2"] = j["rouge_l"] = nullptr;
    }
    j["bleurt"] = nullptr;
    ordered_json f;
    std::vector<std::string> names;
    for (Feature x : v.features.features) names.emplace_back(feature_name(x));
    f["features"] = names;
    f["classes"] = ordered_json::array();
    for (const auto& c : v.features.classes) {
      f["classes"].push_back({{"target", class_name(c.target)}, {"n", c.n}, {"mean", c.mean}, {"std", c.std}});
    }
    f["high_minus_low"] = ordered_json::array();
    for (const auto& g : v.features.gap) f["high_minus_low"].push_back(optional_number(g));
    f["warnings"] = v.features.warnings;
    j["feature_distribution"] = std::move(f);
    out["variants"].push_back(std::move(j));
  }
  return out;
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  try {
    for (const auto& v : j.at("variants")) {
      VariantReport vr;
      vr.name = v.at("name").get<std::string>();
      vr.samples = v.at("samples").get<long>();
      vr.control.accuracy = v.at("control_accuracy").get<double>();
      vr.control.confusion = v.at("confusion").get<Confusion>();
      vr.perplexity = read_optional(v.at("perplexity"));
      if (!v.at("rouge_1").is_null()) {
        vr.rouge = RougeSummary{v.at("rouge_1").get<double>(), v.at("rouge_2").get<double>(),
                                v.at("rouge_l").get<double>()};
      }
      const auto& f = v.at("feature_distribution");
      for (const auto& name : f.at("features")) vr.features.features.push_back(parse_feature(name.get<std::string>()));
      for (const auto& c : f.at("classes")) {
        vr.features.classes.push_back({parse_class(c.at("target").get<std::string>()), c.at("n").get<long>(),
                                       c.at("mean").get<std::vector<double>>(),
                                       c.at("std").get<std::vector<double>>()});
      }
      for (const auto& g : f.at("high_minus_low")) vr.features.gap.push_back(read_optional(g));
      vr.features.warnings = f.at("warnings").get<std::vector<std::string>>();
      r.variants.push_back(std::move(vr));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("evaluation report: ") + e.what());
  }
  return r;
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string csv_cell(const std::optional<double>& v) {
  if (!v) return {};
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

// Grouped bar chart: one group per label, one bar per series.
std::string bar_chart(const std::string& title, const std::vector<std::string>& groups,
                      const std::vector<std::string>& series, const std::vector<std::vector<double>>& values) {
  static constexpr const char* kColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"};
  const double bar = 14.0, gap = 18.0, left = 60.0, top = 40.0, height = 200.0;
  const double group_w = bar * static_cast<double>(series.size()) + gap;
  const double width = left + group_w * static_cast<double>(groups.size()) + 140.0;
  double lo = 0.0, hi = 0.0;
  for (const auto& row : values) {
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi - lo <= 0.0) hi = lo + 1.0;
  auto y_of = [&](double v) { return top + height * (hi - v) / (hi - lo); };
  std::ostringstream os;
  os.precision(6);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + 90
     << "\">\n"
     << "  <text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n"
     << "  <line x1=\"" << left << "\" y1=\"" << y_of(0.0) << "\" x2=\"" << width - 140 << "\" y2=\"" << y_of(0.0)
     << "\" stroke=\"black\"/>\n"
     << "  <text x=\"4\" y=\"" << y_of(hi) + 4 << "\" font-size=\"10\">" << hi << "</text>\n"
     << "  <text x=\"4\" y=\"" << y_of(lo) + 4 << "\" font-size=\"10\">" << lo << "</text>\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double x0 = left + group_w * static_cast<double>(g);
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = values[g][s];
      const double y = std::min(y_of(v), y_of(0.0));
      os << "  <rect x=\"" << x0 + bar * static_cast<double>(s) << "\" y=\"" << y << "\" width=\"" << bar - 1
         << "\" height=\"" << std::abs(y_of(v) - y_of(0.0)) << "\" fill=\"" << kColors[s % 5] << "\"><title>"
         << xml_escape(groups[g] + " / " + series[s]) << ": " << v << "</title></rect>\n";
    }
    os << "  <text x=\"" << x0 << "\" y=\"" << top + height + 16 << "\" font-size=\"9\" transform=\"rotate(30 " << x0
       << ' ' << top + height + 16 << ")\">" << xml_escape(groups[g]) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = top + 14.0 * static_cast<double>(s);
    os << "  <rect x=\"" << width - 130 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\"" << kColors[s % 5]
       << "\"/>\n  <text x=\"" << width - 115 << "\" y=\"" << y + 9 << "\" font-size=\"10\">" << xml_escape(series[s])
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << content;
  if (!f) throw Error("write failed: " + path.string());
}

}  // namespace

void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "tables");
  std::filesystem::create_directories(dir / "figures");
  write_text(dir / "report.json", report.to_json().dump(2) + "\n");

  std::ostringstream summary, confusion, features, gaps;
  summary << "variant,samples,control_accuracy,perplexity,rouge_1,rouge_2,rouge_l,bleurt\n";
  confusion << "variant,target,predicted_low,predicted_medium,predicted_high\n";
  features << "variant,target,feature,n,mean,std\n";
  gaps << "variant,feature,high_minus_low\n";
  std::vector<std::string> conf_groups, gap_groups;
  std::vector<std::vector<double>> conf_values, gap_values;
  for (const auto& v : report.variants) {
    const auto r = v.rouge;
    summary << v.name << ',' << v.samples << ',' << csv_cell(v.control.accuracy) << ',' << csv_cell(v.perplexity)
            << ',' << csv_cell(r ? std::optional(r->rouge_1) : std::nullopt) << ','
            << csv_cell(r ? std::optional(r->rouge_2) : std::nullopt) << ','
            << csv_cell(r ? std::optional(r->rouge_l) : std::nullopt) << ",\n";
    for (int t = 0; t < kNumMetricClasses; ++t) {
      const auto& row = v.control.confusion[static_cast<std::size_t>(t)];
      confusion << v.name << ',' << class_name(static_cast<MetricClass>(t)) << ',' << row[0] << ',' << row[1] << ','
                << row[2] << '\n';
      conf_groups.push_back(v.name + " " + std::string(class_name(static_cast<MetricClass>(t))));
      conf_values.push_back({static_cast<double>(row[0]), static_cast<double>(row[1]), static_cast<double>(row[2])});
    }
    const auto& fd = v.features;
    for (const auto& c : fd.classes) {
      for (std::size_t j = 0; j < fd.features.size(); ++j) {
        features << v.name << ',' << class_name(c.target) << ',' << feature_name(fd.features[j]) << ',' << c.n << ','
                 << csv_cell(c.mean[j]) << ',' << csv_cell(c.std[j]) << '\n';
      }
    }
    for (std::size_t j = 0; j < fd.features.size(); ++j) {
      gaps << v.name << ',' << feature_name(fd.features[j]) << ',' << csv_cell(fd.gap[j]) << '\n';
      std::vector<double> means(kNumMetricClasses, 0.0);
      for (const auto& c : fd.classes) means[static_cast<std::size_t>(c.target)] = c.mean[j];
      gap_groups.push_back(v.name + " " + std::string(feature_name(fd.features[j])));
      gap_values.push_back(std::move(means));
    }
  }
  write_text(dir / "tables" / "summary.csv", summary.str());
  write_text(dir / "tables" / "confusion.csv", confusion.str());
  write_text(dir / "tables" / "features.csv", features.str());
  write_text(dir / "tables" / "gaps.csv", gaps.str());
  const std::vector<std::string> classes = {"low", "medium", "high"};
  write_text(dir / "figures" / "confusion.svg",
             bar_chart("Predicted class per target class", conf_groups,
                       {"predicted low", "predicted medium", "predicted high"}, conf_values));
  write_text(dir / "figures" / "features.svg",
             bar_chart("Mean feature value per target class", gap_groups, classes, gap_values));
}

}  // namespace cam
