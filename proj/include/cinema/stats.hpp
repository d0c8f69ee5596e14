#pragma once

// Population-level statistics: bootstrap significance testing, OLS association
// with t-based inference, Cox proportional hazards with Breslow ties, and
// demographic disparity ratios.

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "cinema/dataio.hpp"
#include "cinema/rng.hpp"

namespace cinema {

enum class Group { White = 0, NonWhite = 1 };

struct SubjectRecord {
  std::string id;
  double age = 0;
  int sex = 0;        // {0,1}
  double bmi = 0;     // kg/m^2, > 0
  int disease = 0;    // {0,1}
  double time = 0;    // follow-up, years, >= 0
  int event = 0;      // {0,1}
  Group group = Group::White;
  std::map<std::string, double> metrics;

  void validate() const {
    require(time >= 0, errc::invalid_argument, "record: negative follow-up time");
    require(bmi > 0, errc::invalid_argument, "record: BMI must be positive");
    require(sex == 0 || sex == 1, errc::invalid_argument, "record: sex must be 0/1");
    require(disease == 0 || disease == 1, errc::invalid_argument, "record: disease must be 0/1");
    require(event == 0 || event == 1, errc::invalid_argument, "record: event must be 0/1");
  }
};

inline std::string significance_tier(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "ns";
}

// ---- bootstrap comparison ---------------------------------------------------------------

struct BootstrapResult {
  std::string metric;
  double mean_a = 0, std_a = 0;  // over replicate means
  double mean_b = 0, std_b = 0;
  std::vector<double> replicates_a, replicates_b;
  double p_value = 1.0;
  std::string tier = "ns";
};

namespace detail {
inline std::pair<double, double> mean_sd(const std::vector<double>& x) {
  double m = 0;
  for (double v : x) m += v;
  m /= double(x.size());
  double s2 = 0;
  for (double v : x) s2 += (v - m) * (v - m);
  s2 = x.size() > 1 ? s2 / double(x.size() - 1) : 0.0;
  return {m, std::sqrt(s2)};
}
}  // namespace detail

// Paired bootstrap: each replicate resamples subject indices with replacement
// (the same indices for both arms) and averages each arm's metric; a two-sided
// paired t-test runs over the B replicate differences. An identically-zero
// difference reports p = 1 (ns) rather than dividing by zero.
inline BootstrapResult bootstrap_compare(const std::vector<double>& a,
                                         const std::vector<double>& b, uint64_t seed,
                                         int64_t B = 100,
                                         const std::string& metric_name = "") {
  require(a.size() == b.size(), errc::invalid_argument,
          "bootstrap: arms must share the subject index set");
  require(a.size() >= 2, errc::invalid_argument, "bootstrap: need at least 2 subjects");
  require(B >= 2, errc::invalid_argument, "bootstrap: need at least 2 replicates");
  int64_t n = int64_t(a.size());
  BootstrapResult r;
  r.metric = metric_name;
  r.replicates_a.reserve(size_t(B));
  r.replicates_b.reserve(size_t(B));
  for (int64_t rep = 0; rep < B; ++rep) {
    Rng rng(mix_seed(seed, uint64_t(rep), uint64_t(0xB007)));
    double sa = 0, sb = 0;
    for (int64_t i = 0; i < n; ++i) {
      int64_t j = rng.uniform_int(n);
      sa += a[size_t(j)];
      sb += b[size_t(j)];
    }
    r.replicates_a.push_back(sa / double(n));
    r.replicates_b.push_back(sb / double(n));
  }
  std::tie(r.mean_a, r.std_a) = detail::mean_sd(r.replicates_a);
  std::tie(r.mean_b, r.std_b) = detail::mean_sd(r.replicates_b);
  std::vector<double> d(size_t(B), 0.0);
  for (int64_t i = 0; i < B; ++i) d[size_t(i)] = r.replicates_b[size_t(i)] - r.replicates_a[size_t(i)];
  auto [dm, dsd] = detail::mean_sd(d);
  if (dsd == 0.0) {
    r.p_value = (dm == 0.0) ? 1.0 : 0.0;
  } else {
    double t = dm / (dsd / std::sqrt(double(B)));
    boost::math::students_t dist(double(B - 1));
    r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  }
  r.tier = significance_tier(r.p_value);
  return r;
}

// ---- ordinary least squares --------------------------------------------------------------

struct CoefficientEstimate {
  std::string name;
  double beta = 0, ci_lo = 0, ci_hi = 0, p_value = 1.0, std_error = 0;
};

inline const std::vector<std::string>& ols_term_names() {
  static const std::vector<std::string> names{"intercept", "disease", "age", "sex", "bmi"};
  return names;
}

// y = b0 + b1 disease + b2 age + b3 sex + b4 bmi; t inference with n-5 dof
inline std::vector<CoefficientEstimate> ols_fit(const std::vector<double>& y,
                                                const std::vector<SubjectRecord>& records) {
  int64_t n = int64_t(y.size());
  require(n == int64_t(records.size()), errc::invalid_argument, "ols: y/record count mismatch");
  constexpr int64_t kTerms = 5;
  require(n > kTerms, errc::invalid_argument, "ols: need more than 5 subjects");
  Eigen::MatrixXd X(n, kTerms);
  Eigen::VectorXd yv(n);
  for (int64_t i = 0; i < n; ++i) {
    const auto& rec = records[size_t(i)];
    X(i, 0) = 1.0;
    X(i, 1) = double(rec.disease);
    X(i, 2) = rec.age;
    X(i, 3) = double(rec.sex);
    X(i, 4) = rec.bmi;
    yv(i) = y[size_t(i)];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < kTerms) {
    // walk the columns to name the first one that adds no rank
    int64_t r_prev = 0;
    for (int64_t c = 0; c < kTerms; ++c) {
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> sub(X.leftCols(c + 1));
      if (sub.rank() == r_prev)
        fail(errc::numerical,
             "ols: rank-deficient design, column '" + ols_term_names()[size_t(c)] +
                 "' is linearly dependent");
      r_prev = sub.rank();
    }
    fail(errc::numerical, "ols: rank-deficient design");
  }
  Eigen::VectorXd beta = qr.solve(yv);
  Eigen::VectorXd resid = yv - X * beta;
  double dof = double(n - kTerms);
  double sigma2 = resid.squaredNorm() / dof;
  Eigen::MatrixXd cov = sigma2 * (X.transpose() * X).inverse();
  boost::math::students_t dist(dof);
  double tq = boost::math::quantile(dist, 0.975);
  std::vector<CoefficientEstimate> out;
  for (int64_t j = 0; j < kTerms; ++j) {
    CoefficientEstimate e;
    e.name = ols_term_names()[size_t(j)];
    e.beta = beta(j);
    e.std_error = std::sqrt(std::max(cov(j, j), 0.0));
    if (e.std_error > 0) {
      double t = e.beta / e.std_error;
      e.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    } else {
      e.p_value = e.beta == 0 ? 1.0 : 0.0;
    }
    e.ci_lo = e.beta - tq * e.std_error;
    e.ci_hi = e.beta + tq * e.std_error;
    out.push_back(e);
  }
  return out;
}

// ---- Cox proportional hazards -------------------------------------------------------------

inline const std::vector<std::string>& cox_term_names() {
  static const std::vector<std::string> names{"disease", "age", "sex", "bmi"};
  return names;
}

namespace detail {

struct CoxData {
  // subjects sorted by ascending time; per distinct event time: index range of the
  // risk set start (all with time >= t) and the event subjects at t
  Eigen::MatrixXd X;             // standardized covariates [n, k]
  std::vector<double> time;
  std::vector<int> event;
};

// Log partial likelihood with Breslow ties, plus gradient and Hessian.
// Accumulates in extended precision so the gradient noise floor at n ~ 10^4
// stays below the 1e-8 convergence tolerance.
inline double cox_lpl(const CoxData& d, const Eigen::VectorXd& beta, Eigen::VectorXd* grad,
                      Eigen::MatrixXd* hess) {
  int64_t n = d.X.rows(), k = d.X.cols();
  Eigen::VectorXd eta = d.X * beta;
  long double lpl = 0;
  std::vector<long double> g(size_t(k), 0.0L), h(size_t(k * k), 0.0L);
  // walk from latest to earliest time, accumulating the risk-set sums
  long double s0 = 0;
  std::vector<long double> s1(size_t(k), 0.0L), s2(size_t(k * k), 0.0L);
  int64_t i = n - 1;
  while (i >= 0) {
    double t = d.time[size_t(i)];
    int64_t j = i;
    while (j >= 0 && d.time[size_t(j)] == t) --j;
    // add all subjects with this time to the risk set
    for (int64_t m = j + 1; m <= i; ++m) {
      long double w = std::exp((long double)eta(m));
      s0 += w;
      for (int64_t p = 0; p < k; ++p) {
        long double xp = (long double)d.X(m, p);
        s1[size_t(p)] += w * xp;
        for (int64_t q = 0; q < k; ++q) s2[size_t(p * k + q)] += w * xp * (long double)d.X(m, q);
      }
    }
    // events at this time (Breslow: one shared denominator per event)
    for (int64_t m = j + 1; m <= i; ++m) {
      if (!d.event[size_t(m)]) continue;
      lpl += (long double)eta(m) - std::log(s0);
      for (int64_t p = 0; p < k; ++p) {
        long double mu_p = s1[size_t(p)] / s0;
        g[size_t(p)] += (long double)d.X(m, p) - mu_p;
        for (int64_t q = 0; q < k; ++q)
          h[size_t(p * k + q)] -= s2[size_t(p * k + q)] / s0 - mu_p * (s1[size_t(q)] / s0);
      }
    }
    i = j;
  }
  if (grad)
    for (int64_t p = 0; p < k; ++p) (*grad)(p) = double(g[size_t(p)]);
  if (hess)
    for (int64_t p = 0; p < k; ++p)
      for (int64_t q = 0; q < k; ++q) (*hess)(p, q) = double(h[size_t(p * k + q)]);
  return double(lpl);
}

}  // namespace detail

// Newton-Raphson with step halving; gradient inf-norm < 1e-8 within 100 iterations.
// Errors: constant covariate, monotone likelihood (separation), non-convergence.
inline std::vector<CoefficientEstimate> cox_fit(const std::vector<SubjectRecord>& records) {
  int64_t n = int64_t(records.size());
  constexpr int64_t k = 4;
  require(n >= 2, errc::invalid_argument, "cox: need at least 2 subjects");
  int64_t n_events = 0;
  for (const auto& r : records) n_events += r.event;
  require(n_events >= 1, errc::invalid_argument, "cox: no events observed");

  std::vector<int64_t> order(size_t(n), 0);
  for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return records[size_t(a)].time < records[size_t(b)].time;
  });

  Eigen::MatrixXd Xraw(n, k);
  detail::CoxData d;
  d.time.resize(size_t(n));
  d.event.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) {
    const auto& r = records[size_t(order[size_t(i)])];
    Xraw(i, 0) = double(r.disease);
    Xraw(i, 1) = r.age;
    Xraw(i, 2) = double(r.sex);
    Xraw(i, 3) = r.bmi;
    d.time[size_t(i)] = r.time;
    d.event[size_t(i)] = r.event;
  }
  Eigen::VectorXd mean = Xraw.colwise().mean();
  Eigen::VectorXd sd(k);
  for (int64_t j = 0; j < k; ++j) {
    double s2 = (Xraw.col(j).array() - mean(j)).square().sum() / double(n - 1);
    sd(j) = std::sqrt(s2);
    require(sd(j) > 0, errc::numerical,
            "cox: constant covariate '" + cox_term_names()[size_t(j)] + "'");
  }
  d.X.resize(n, k);
  for (int64_t j = 0; j < k; ++j) d.X.col(j) = (Xraw.col(j).array() - mean(j)) / sd(j);

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(k);
  Eigen::VectorXd grad(k);
  Eigen::MatrixXd hess(k, k);
  double lpl = detail::cox_lpl(d, beta, &grad, &hess);
  bool converged = false;
  for (int iter = 0; iter < 100; ++iter) {
    if (grad.lpNorm<Eigen::Infinity>() < 1e-8) {
      converged = true;
      break;
    }
    Eigen::VectorXd step = (-hess).ldlt().solve(grad);
    double scale_f = 1.0;
    Eigen::VectorXd cand;
    double lpl_new = -std::numeric_limits<double>::infinity();
    for (int h = 0; h < 40; ++h) {
      cand = beta + scale_f * step;
      lpl_new = detail::cox_lpl(d, cand, nullptr, nullptr);
      if (lpl_new >= lpl) break;
      scale_f *= 0.5;
    }
    require(lpl_new >= lpl, errc::numerical, "cox: no convergence (likelihood not improving)");
    beta = cand;
    lpl = detail::cox_lpl(d, beta, &grad, &hess);
    // per-SD log hazard ratio beyond 8 never occurs with identifiable data; the
    // likelihood is monotone in beta (separation) and the gradient only decays
    require(beta.lpNorm<Eigen::Infinity>() < 8.0, errc::numerical,
            "cox: monotone likelihood (perfect separation)");
  }
  require(converged, errc::numerical, "cox: no convergence within 100 iterations");

  // observed information in standardized space; transform back by 1/sd
  Eigen::MatrixXd info_inv = (-hess).inverse();
  boost::math::normal norm01;
  double zq = boost::math::quantile(norm01, 0.975);
  std::vector<CoefficientEstimate> out;
  for (int64_t j = 0; j < k; ++j) {
    CoefficientEstimate e;
    e.name = cox_term_names()[size_t(j)];
    e.beta = beta(j) / sd(j);
    e.std_error = std::sqrt(std::max(info_inv(j, j), 0.0)) / sd(j);
    double z = e.std_error > 0 ? e.beta / e.std_error : 0.0;
    e.p_value = e.std_error > 0
                    ? 2.0 * boost::math::cdf(boost::math::complement(norm01, std::abs(z)))
                    : 1.0;
    e.ci_lo = e.beta - zq * e.std_error;
    e.ci_hi = e.beta + zq * e.std_error;
    out.push_back(e);
  }
  return out;
}

// ---- demographic disparity ------------------------------------------------------------------

struct DisparityRatio {
  double ratio = 1.0;  // White positive rate / NonWhite positive rate; +inf sentinel
  int64_t n_white = 0, n_white_above = 0;
  int64_t n_nonwhite = 0, n_nonwhite_above = 0;
  double q = 0;  // threshold used
};

// positive outcome = value strictly greater than q (the displayed formula's m > q)
inline DisparityRatio disparity_ratio(const std::vector<double>& values,
                                      const std::vector<Group>& groups, double q) {
  require(values.size() == groups.size(), errc::invalid_argument,
          "disparity: value/group count mismatch");
  DisparityRatio r;
  r.q = q;
  for (size_t i = 0; i < values.size(); ++i) {
    bool above = values[i] > q;
    if (groups[i] == Group::White) {
      ++r.n_white;
      r.n_white_above += above;
    } else {
      ++r.n_nonwhite;
      r.n_nonwhite_above += above;
    }
  }
  require(r.n_white > 0 && r.n_nonwhite > 0, errc::invalid_argument,
          "disparity: both groups must be non-empty");
  double rw = double(r.n_white_above) / double(r.n_white);
  double rn = double(r.n_nonwhite_above) / double(r.n_nonwhite);
  r.ratio = rn > 0 ? rw / rn : std::numeric_limits<double>::infinity();
  return r;
}

// thresholds at the 25th..75th percentiles (step 5) of all subjects' values
inline std::vector<DisparityRatio> disparity_sweep(const std::vector<double>& values,
                                                   const std::vector<Group>& groups) {
  require(!values.empty(), errc::invalid_argument, "disparity: no values");
  std::vector<DisparityRatio> out;
  for (int p = 25; p <= 75; p += 5) {
    double q = percentile(values, double(p));
    out.push_back(disparity_ratio(values, groups, q));
  }
  return out;
}

}  // namespace cinema
