#include "cam/document.hpp"

#include "cam/core.hpp"

namespace cam {

std::string_view class_name(MetricClass c) {
  switch (c) {
    case MetricClass::low: return "low";
    case MetricClass::medium: return "medium";
    case MetricClass::high: return "high";
  }
  return "low";
}

MetricClass parse_class(std::string_view name) {
  if (name == "low") return MetricClass::low;
  if (name == "medium") return MetricClass::medium;
  if (name == "high") return MetricClass::high;
  throw ConfigError("unknown metric class '" + std::string(name) + "' (expected low, medium or high)");
}

}  // namespace cam
