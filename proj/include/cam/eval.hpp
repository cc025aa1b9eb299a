#pragma once

#include "cam/classifier.hpp"
#include "cam/cvae.hpp"
#include "cam/document.hpp"
#include "cam/text_features.hpp"
#include "cam/transformer.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cam {

// exp of the token-weighted mean NLL. DataError when there are no tokens.
double perplexity(std::span<const TokenNll> parts);
double perplexity(const Transformer& model, std::span<const GenExample> held_out);

// Bound-based CVAE perplexity: exp of the summed reconstruction NLL plus
// latent KL over the predicted tokens (sentence + <eot>), one seeded
// posterior sample per sentence; in expectation an upper bound on the true
// perplexity.
double cvae_perplexity(const Cvae& model, std::span<const CvaeExample> held_out, std::uint64_t seed);

// A generated text and the class it was asked to have.
struct Generation {
  std::string text;
  MetricClass target = MetricClass::low;
};

using Confusion = std::array<std::array<long, kNumMetricClasses>, kNumMetricClasses>;  // [target][predicted]

struct ControlResult {
  double accuracy = 0.0;
  Confusion confusion{};

  bool operator==(const ControlResult&) const = default;
};

ControlResult control_accuracy(std::span<const Generation> generations,
                               const std::function<int(std::string_view)>& predict);
ControlResult control_accuracy(std::span<const Generation> generations, const BagClassifier& clf);

enum class RougeVariant { one, two, l };

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Over tokenize() words. ROUGE-1/2 count clipped n-gram overlap; ROUGE-L
// uses the longest common subsequence. F1 is 0 when P and R are both 0.
RougeScore rouge_score(std::span<const std::string> hypothesis, std::span<const std::string> reference,
                       RougeVariant variant);
// Best F1 over the references. DataError on an empty hypothesis or no references.
double rouge(std::string_view hypothesis, std::span<const std::string> references, RougeVariant variant);

struct RougeSummary {
  double rouge_1 = 0.0;
  double rouge_2 = 0.0;
  double rouge_l = 0.0;

  bool operator==(const RougeSummary&) const = default;
};
// Mean of the per-hypothesis best F1 values; references[i] belong to hypotheses[i].
RougeSummary mean_rouge(std::span<const std::string> hypotheses,
                        std::span<const std::vector<std::string>> references);

struct ClassFeatures {
  MetricClass target = MetricClass::low;
  long n = 0;
  std::vector<double> mean;  // one per feature
  std::vector<double> std;   // population standard deviation

  bool operator==(const ClassFeatures&) const = default;
};

struct FeatureDistribution {
  std::vector<Feature> features;
  std::vector<ClassFeatures> classes;     // classes with samples, in class order
  std::vector<std::optional<double>> gap;  // high mean - low mean; empty when a side is missing
  std::vector<std::string> warnings;

  bool operator==(const FeatureDistribution&) const = default;
};

// DataError unless at least two target classes have samples.
FeatureDistribution feature_distribution(std::span<const Generation> generations, std::span<const Feature> features);

struct VariantReport {
  std::string name;
  long samples = 0;
  ControlResult control;
  std::optional<double> perplexity;
  std::optional<RougeSummary> rouge;
  FeatureDistribution features;

  bool operator==(const VariantReport&) const = default;
};

struct EvalReport {
  std::vector<VariantReport> variants;

  nlohmann::ordered_json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  bool operator==(const EvalReport&) const = default;
};

// Writes, under `dir`:
//   report.json
//   tables/summary.csv    variant,samples,control_accuracy,perplexity,rouge_1,rouge_2,rouge_l,bleurt
//   tables/confusion.csv  variant,target,predicted_low,predicted_medium,predicted_high
//   tables/features.csv   variant,target,feature,n,mean,std
//   tables/gaps.csv       variant,feature,high_minus_low
//   figures/confusion.svg and figures/features.svg
// Missing values are empty CSV cells. bleurt is always empty.
void write_report(const EvalReport& report, const std::filesystem::path& dir);

}  // namespace cam
