#pragma once

#include "cam/autodiff.hpp"
#include "cam/corpus.hpp"
#include "cam/layers.hpp"
#include "cam/text_features.hpp"

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace cam {

struct TreatmentAssignment {
  std::string feature_name;
  double threshold = 0.0;
  std::vector<int> T;  // 1 iff value > threshold
};

// Median threshold unless one is given; ties go to T = 0.
TreatmentAssignment binarize_treatment(std::span<const FeatureVector> features, Feature feature,
                                       std::optional<double> threshold = std::nullopt);
TreatmentAssignment binarize_values(std::span<const double> values, std::string name,
                                    std::optional<double> threshold = std::nullopt);

template <typename T>
concept ScalarLike = !std::is_base_of_v<Eigen::EigenBase<T>, T>;

namespace detail {
template <typename Scalar>
void check_propensity(const Scalar& p) {
  if (!(p > Scalar(0) && p < Scalar(1))) throw NumericError("propensity outside (0, 1)");
}
}  // namespace detail

// R(0) = Y0 (1 - T) / (1 - p) + Y0_hat (T - p) / (1 - p), evaluated as
// Y0_hat + (1 - T)(Y0 - Y0_hat) / (1 - p) so that T = 1 returns Y0_hat exactly.
template <ScalarLike Scalar>
Scalar response_without_treatment(Scalar y0, Scalar t, Scalar y0_hat, Scalar p) {
  detail::check_propensity(p);
  return y0_hat + (Scalar(1) - t) * (y0 - y0_hat) / (Scalar(1) - p);
}

// R(1) = Y1 T / p - Y1_hat (T - p) / p, evaluated as Y1_hat + T (Y1 - Y1_hat) / p.
template <ScalarLike Scalar>
Scalar response_with_treatment(Scalar y1, Scalar t, Scalar y1_hat, Scalar p) {
  detail::check_propensity(p);
  return y1_hat + t * (y1 - y1_hat) / p;
}

// Column-wise versions over Eigen arrays of equal length.
template <typename Derived>
typename Derived::PlainObject response_without_treatment(const Eigen::ArrayBase<Derived>& y0,
                                                         const Eigen::ArrayBase<Derived>& t,
                                                         const Eigen::ArrayBase<Derived>& y0_hat,
                                                         const Eigen::ArrayBase<Derived>& p) {
  if (!((p > 0).all() && (p < 1).all())) throw NumericError("propensity outside (0, 1)");
  return y0_hat + (1 - t) * (y0 - y0_hat) / (1 - p);
}

template <typename Derived>
typename Derived::PlainObject response_with_treatment(const Eigen::ArrayBase<Derived>& y1,
                                                      const Eigen::ArrayBase<Derived>& t,
                                                      const Eigen::ArrayBase<Derived>& y1_hat,
                                                      const Eigen::ArrayBase<Derived>& p) {
  if (!((p > 0).all() && (p < 1).all())) throw NumericError("propensity outside (0, 1)");
  return y1_hat + t * (y1 - y1_hat) / p;
}

// mean_i(R_i(1) - R_i(0))
template <typename Derived>
double average_treatment_effect(const Eigen::ArrayBase<Derived>& r1, const Eigen::ArrayBase<Derived>& r0) {
  if (r1.size() == 0) throw DataError("average_treatment_effect: empty corpus");
  if (r1.size() != r0.size()) throw ShapeError("average_treatment_effect: response lengths differ");
  return (r1 - r0).mean();
}

// mean(Y | T = 1) - mean(Y | T = 0)
double naive_difference(std::span<const double> y, std::span<const int> t);

struct Standardizer {
  RowVector mean;
  RowVector scale;  // std, with 1 for constant columns

  static Standardizer fit(const Matrix& x);
  Matrix apply(const Matrix& x) const;
};

struct NetConfig {
  int hidden_layers = 5;
  int width = 128;
  int epochs = 10;
  int batch_size = 5;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

class PropensityModel {
 public:
  static constexpr double kDefaultClip = 0.01;

  // Trained by binary cross-entropy; throws DataError when one arm is empty.
  static PropensityModel fit(const Matrix& x, std::span<const int> t, const NetConfig& cfg,
                             double clip = kDefaultClip);
  // Clipped to [clip, 1 - clip].
  Vector predict(const Matrix& x) const;
  double training_loss() const { return loss_; }

 private:
  ParameterSet params_;
  Mlp net_;
  Standardizer std_;
  double clip_ = kDefaultClip;
  double loss_ = 0.0;
};

// Feed-forward regressor on standardized inputs and targets.
class Regressor {
 public:
  static Regressor fit(const Matrix& x, std::span<const double> y, const NetConfig& cfg);
  Vector predict(const Matrix& x) const;

 private:
  ParameterSet params_;
  Mlp net_;
  Standardizer std_;
  double y_mean_ = 0.0;
  double y_scale_ = 1.0;
};

struct OutcomeModel {
  Regressor arm0;
  Regressor arm1;
  double mae_t0 = 0.0;  // held-out mean absolute error per arm
  double mae_t1 = 0.0;
};

// Each arm's regressor sees only its own rows, split 90/10 for the held-out
// MAE. DataError when an arm has fewer than 10 rows.
OutcomeModel fit_outcomes(const Matrix& x, std::span<const int> t, std::span<const double> y,
                          const NetConfig& cfg);

struct FeatureEffect {
  std::string feature;
  double threshold = 0.0;
  double ate = 0.0;
  double naive = 0.0;
  bool significant = false;
  double propensity_loss = 0.0;
  double mae_t0 = 0.0;
  double mae_t1 = 0.0;
  long n_t0 = 0;
  long n_t1 = 0;
};

struct AteConfig {
  double tau_sig = 0.1;
  std::uint64_t seed = 0;
  NetConfig net;
  double clip = PropensityModel::kDefaultClip;
  std::map<std::string, double> thresholds;  // per-feature override of the median
};

struct ATEReport {
  std::string metric;
  double tau_sig = 0.1;
  std::uint64_t seed = 0;
  std::vector<FeatureEffect> effects;

  std::vector<Feature> significant_features() const;
  nlohmann::ordered_json to_json() const;
  static ATEReport from_json(const nlohmann::ordered_json& j);
  // Columns: feature, ate, significant, propensity_loss, mae_t0, mae_t1, n_t0, n_t1
  void write_csv(std::ostream& os) const;
};

// Doubly robust estimate for one treatment with the remaining features as
// covariates.
FeatureEffect estimate_effect(const std::vector<FeatureVector>& features, std::span<const double> y,
                              Feature treatment, const AteConfig& cfg);

// Full pipeline per feature over documents carrying `metric`.
ATEReport ate_report(const std::vector<Document>& docs, std::span<const Feature> features,
                     const std::string& metric, const AteConfig& cfg);

}  // namespace cam
