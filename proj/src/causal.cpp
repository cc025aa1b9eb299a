#include "cam/causal.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace cam {

using json = nlohmann::ordered_json;

namespace {

Mlp make_net(ParameterSet& params, Index in, const NetConfig& cfg, Rng& rng) {
  std::vector<Index> sizes = {in};
  for (int i = 0; i < cfg.hidden_layers; ++i) sizes.push_back(cfg.width);
  sizes.push_back(1);
  return Mlp::create(params, "net", sizes, Activation::relu, rng);
}

Matrix take_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(static_cast<Index>(rows[i]));
  return out;
}

// Mini-batch Adam over (x, target) rows. `loss` maps (outputs, targets) to
// a scalar; returns the mean batch loss of the final epoch.
template <typename Loss>
double train_net(ParameterSet& params, const Mlp& net, const Matrix& x, const Matrix& target,
                 const NetConfig& cfg, Rng& rng, Loss loss) {
  Adam opt(params.all(), {cfg.learning_rate});
  auto order = iota_indices(static_cast<std::size_t>(x.rows()));
  double last = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::span<const std::size_t> rows(order.data() + start, end - start);
      Tape tape;
      Var out = net(tape, tape.constant(take_rows(x, rows)));
      Var l = loss(out, take_rows(target, rows));
      total += l.scalar();
      ++batches;
      tape.backward(l);
      opt.step();
    }
    last = batches ? total / batches : 0.0;
  }
  return last;
}

Vector run_net(const Mlp& net, const Matrix& x) {
  Tape tape(false);
  return net(tape, tape.constant(x)).value().col(0);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TreatmentAssignment binarize_values(std::span<const double> values, std::string name, std::optional<double> threshold) {
  if (values.empty()) throw DataError("binarize_treatment: no values for '" + name + "'");
  TreatmentAssignment a;
  a.feature_name = std::move(name);
  if (!threshold) {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*lo == *hi) throw DataError("degenerate treatment: '" + a.feature_name + "' is constant");
    a.threshold = median(std::vector<double>(values.begin(), values.end()));
  } else {
    a.threshold = *threshold;
  }
  a.T.reserve(values.size());
  for (double v : values) a.T.push_back(v > a.threshold ? 1 : 0);
  return a;
}

TreatmentAssignment binarize_treatment(std::span<const FeatureVector> features, Feature feature,
                                       std::optional<double> threshold) {
  std::vector<double> values;
  values.reserve(features.size());
  for (const auto& f : features) values.push_back(f[feature]);
  return binarize_values(values, std::string(feature_name(feature)), threshold);
}

double naive_difference(std::span<const double> y, std::span<const int> t) {
  double s1 = 0, s0 = 0;
  long n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (t[i]) {
      s1 += y[i];
      ++n1;
    } else {
      s0 += y[i];
      ++n0;
    }
  }
  if (!n1 || !n0) throw DataError("naive_difference: one treatment arm is empty");
  return s1 / n1 - s0 / n0;
}

Standardizer Standardizer::fit(const Matrix& x) {
  Standardizer s;
  s.mean = x.colwise().mean();
  s.scale = ((x.rowwise() - s.mean).array().square().colwise().mean()).sqrt().matrix();
  for (Index c = 0; c < s.scale.size(); ++c) {
    if (!(s.scale(c) > 1e-12)) s.scale(c) = 1.0;
  }
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  return ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

PropensityModel PropensityModel::fit(const Matrix& x, std::span<const int> t, const NetConfig& cfg, double clip) {
  const long n1 = std::count(t.begin(), t.end(), 1);
  if (n1 == 0 || n1 == static_cast<long>(t.size())) {
    throw DataError("fit_propensity: both treatment arms must be non-empty");
  }
  if (!(clip > 0.0 && clip < 0.5)) throw ConfigError("propensity clip must lie in (0, 0.5)");
  PropensityModel m;
  m.clip_ = clip;
  Rng rng(cfg.seed);
  m.net_ = make_net(m.params_, x.cols(), cfg, rng);
  m.std_ = Standardizer::fit(x);
  Matrix target(x.rows(), 1);
  for (Index i = 0; i < x.rows(); ++i) target(i, 0) = t[static_cast<std::size_t>(i)];
  m.loss_ = train_net(m.params_, m.net_, m.std_.apply(x), target, cfg, rng,
                      [](const Var& out, const Matrix& y) { return ops::bce_with_logits(out, y); });
  return m;
}

Vector PropensityModel::predict(const Matrix& x) const {
  Vector logits = run_net(net_, std_.apply(x));
  Vector p = (1.0 + (-logits.array()).exp()).inverse().matrix();
  return p.cwiseMax(clip_).cwiseMin(1.0 - clip_);
}

Regressor Regressor::fit(const Matrix& x, std::span<const double> y, const NetConfig& cfg) {
  Regressor r;
  Rng rng(cfg.seed);
  r.net_ = make_net(r.params_, x.cols(), cfg, rng);
  r.std_ = Standardizer::fit(x);
  Matrix target(x.rows(), 1);
  for (Index i = 0; i < x.rows(); ++i) target(i, 0) = y[static_cast<std::size_t>(i)];
  r.y_mean_ = target.mean();
  const double sd = std::sqrt((target.array() - r.y_mean_).square().mean());
  r.y_scale_ = sd > 1e-12 ? sd : 1.0;
  const Matrix z = ((target.array() - r.y_mean_) / r.y_scale_).matrix();
  train_net(r.params_, r.net_, r.std_.apply(x), z, cfg, rng,
            [](const Var& out, const Matrix& yz) { return ops::mse(out, yz); });
  return r;
}

Vector Regressor::predict(const Matrix& x) const {
  return (run_net(net_, std_.apply(x)).array() * y_scale_ + y_mean_).matrix();
}

OutcomeModel fit_outcomes(const Matrix& x, std::span<const int> t, std::span<const double> y, const NetConfig& cfg) {
  OutcomeModel m;
  Rng rng(cfg.seed);
  for (int arm = 0; arm < 2; ++arm) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] == arm) rows.push_back(i);
    }
    if (rows.size() < 10) {
      throw DataError("fit_outcomes: arm " + std::to_string(arm) + " has " + std::to_string(rows.size()) +
                      " rows, need at least 10");
    }
    Rng arm_rng = rng.split(static_cast<std::uint64_t>(arm));
    arm_rng.shuffle(rows);
    const auto n_train = static_cast<std::size_t>(std::floor(0.9 * static_cast<double>(rows.size()) + 1e-9));
    std::span<const std::size_t> train(rows.data(), n_train);
    std::span<const std::size_t> held(rows.data() + n_train, rows.size() - n_train);
    std::vector<double> y_train;
    for (auto i : train) y_train.push_back(y[i]);
    NetConfig arm_cfg = cfg;
    arm_cfg.seed = arm_rng.next_u64();
    Regressor reg = Regressor::fit(take_rows(x, train), y_train, arm_cfg);
    const Vector pred = reg.predict(take_rows(x, held));
    double mae = 0.0;
    for (std::size_t k = 0; k < held.size(); ++k) mae += std::abs(pred(static_cast<Index>(k)) - y[held[k]]);
    mae /= static_cast<double>(held.size());
    if (arm == 0) {
      m.arm0 = std::move(reg);
      m.mae_t0 = mae;
    } else {
      m.arm1 = std::move(reg);
      m.mae_t1 = mae;
    }
  }
  return m;
}

FeatureEffect estimate_effect(const std::vector<FeatureVector>& features, std::span<const double> y,
                              Feature treatment, const AteConfig& cfg) {
  const std::string name(feature_name(treatment));
  std::optional<double> threshold;
  if (auto it = cfg.thresholds.find(name); it != cfg.thresholds.end()) threshold = it->second;
  const TreatmentAssignment a = binarize_treatment(features, treatment, threshold);

  std::vector<Feature> covariates;
  for (int f = 0; f < kNumFeatures; ++f) {
    if (static_cast<Feature>(f) != treatment) covariates.push_back(static_cast<Feature>(f));
  }
  const Matrix x = feature_matrix(features, covariates);

  Rng rng(cfg.seed);
  Rng feature_rng = rng.split(static_cast<std::uint64_t>(treatment) + 1);
  NetConfig pcfg = cfg.net;
  pcfg.seed = feature_rng.next_u64();
  NetConfig ocfg = cfg.net;
  ocfg.seed = feature_rng.next_u64();

  const PropensityModel prop = PropensityModel::fit(x, a.T, pcfg, cfg.clip);
  const OutcomeModel out = fit_outcomes(x, a.T, y, ocfg);

  const Eigen::ArrayXd p = prop.predict(x).array();
  const Eigen::ArrayXd y0_hat = out.arm0.predict(x).array();
  const Eigen::ArrayXd y1_hat = out.arm1.predict(x).array();
  const Eigen::ArrayXd yy = Eigen::Map<const Eigen::ArrayXd>(y.data(), static_cast<Index>(y.size()));
  Eigen::ArrayXd t(static_cast<Index>(a.T.size()));
  for (std::size_t i = 0; i < a.T.size(); ++i) t(static_cast<Index>(i)) = a.T[i];
  // The observed outcome stands in for Y(0) and Y(1); R(0) drops it when
  // T = 1 and R(1) drops it when T = 0.
  const Eigen::ArrayXd r0 = response_without_treatment(yy, t, y0_hat, p);
  const Eigen::ArrayXd r1 = response_with_treatment(yy, t, y1_hat, p);

  FeatureEffect e;
  e.feature = name;
  e.threshold = a.threshold;
  e.ate = average_treatment_effect(r1, r0);
  e.naive = naive_difference(y, a.T);
  e.significant = std::abs(e.ate) > cfg.tau_sig;
  e.propensity_loss = prop.training_loss();
  e.mae_t0 = out.mae_t0;
  e.mae_t1 = out.mae_t1;
  e.n_t1 = std::count(a.T.begin(), a.T.end(), 1);
  e.n_t0 = static_cast<long>(a.T.size()) - e.n_t1;
  return e;
}

ATEReport ate_report(const std::vector<Document>& docs, std::span<const Feature> features, const std::string& metric,
                     const AteConfig& cfg) {
  std::vector<FeatureVector> fv;
  std::vector<double> y;
  for (const auto& d : docs) {
    auto it = d.metrics.find(metric);
    if (it == d.metrics.end()) continue;
    fv.push_back(extract_features(d));
    y.push_back(static_cast<double>(it->second));
  }
  if (fv.empty()) throw DataError("ate_report: no document carries metric '" + metric + "'");
  ATEReport r;
  r.metric = metric;
  r.tau_sig = cfg.tau_sig;
  r.seed = cfg.seed;
  for (Feature f : features) r.effects.push_back(estimate_effect(fv, y, f, cfg));
  return r;
}

std::vector<Feature> ATEReport::significant_features() const {
  std::vector<Feature> out;
  for (const auto& e : effects) {
    if (e.significant) out.push_back(parse_feature(e.feature));
  }
  return out;
}

json ATEReport::to_json() const {
  json j;
  j["metric"] = metric;
  j["tau_sig"] = std::isfinite(tau_sig) ? json(tau_sig) : json("inf");
  j["seed"] = seed;
  j["features"] = json::array();
  for (const auto& e : effects) {
    j["features"].push_back({{"feature", e.feature},
                             {"threshold", e.threshold},
                             {"ate", e.ate},
                             {"naive_difference", e.naive},
                             {"significant", e.significant},
                             {"propensity_loss", e.propensity_loss},
                             {"mae_t0", e.mae_t0},
                             {"mae_t1", e.mae_t1},
                             {"n_t0", e.n_t0},
                             {"n_t1", e.n_t1}});
  }
  return j;
}

ATEReport ATEReport::from_json(const json& j) {
  ATEReport r;
  try {
    r.metric = j.at("metric").get<std::string>();
    r.tau_sig = j.at("tau_sig").is_string() ? INFINITY : j.at("tau_sig").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& f : j.at("features")) {
      FeatureEffect e;
      e.feature = f.at("feature").get<std::string>();
      e.threshold = f.at("threshold").get<double>();
      e.ate = f.at("ate").get<double>();
      e.naive = f.at("naive_difference").get<double>();
      e.significant = f.at("significant").get<bool>();
      e.propensity_loss = f.at("propensity_loss").get<double>();
      e.mae_t0 = f.at("mae_t0").get<double>();
      e.mae_t1 = f.at("mae_t1").get<double>();
      e.n_t0 = f.at("n_t0").get<long>();
      e.n_t1 = f.at("n_t1").get<long>();
      r.effects.push_back(e);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed ATE report: ") + e.what());
  }
  return r;
}

void ATEReport::write_csv(std::ostream& os) const {
  os << "feature,ate,significant,propensity_loss,mae_t0,mae_t1,n_t0,n_t1\n";
  const auto old = os.precision(17);
  for (const auto& e : effects) {
    os << e.feature << ',' << e.ate << ',' << (e.significant ? "true" : "false") << ',' << e.propensity_loss << ','
       << e.mae_t0 << ',' << e.mae_t1 << ',' << e.n_t0 << ',' << e.n_t1 << '\n';
  }
  os.precision(old);
}

}  // namespace cam
