#pragma once

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cam {

enum class MetricClass { low = 0, medium = 1, high = 2 };
inline constexpr int kNumMetricClasses = 3;

std::string_view class_name(MetricClass c);
MetricClass parse_class(std::string_view name);  // ConfigError on unknown names

struct ControlLabel {
  MetricClass cls = MetricClass::low;
  std::string metric_name;

  bool operator==(const ControlLabel&) const = default;
};

struct Document {
  std::string id;
  std::string text;
  std::vector<std::string> context;
  std::map<std::string, long long> metrics;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
  std::vector<std::string> keywords;
  std::optional<int> topic;
  std::map<std::string, MetricClass> buckets;

  bool operator==(const Document&) const = default;
};

}  // namespace cam
