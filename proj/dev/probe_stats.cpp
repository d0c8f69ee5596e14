#include <chrono>
#include <cstdio>

#include "cinema/stats.hpp"

using namespace cinema;

int main() {
  // OLS exact recovery
  {
    std::vector<SubjectRecord> recs;
    std::vector<double> y;
    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
      SubjectRecord r;
      r.disease = int(rng.uniform_int(2));
      r.age = rng.uniform(40, 80);
      r.sex = int(rng.uniform_int(2));
      r.bmi = rng.uniform(18, 35);
      recs.push_back(r);
      y.push_back(2.0 + 3.0 * r.disease);
    }
    auto fit = ols_fit(y, recs);
    printf("ols exact: intercept %.9f disease %.9f age %.2e sex %.2e bmi %.2e\n", fit[0].beta,
           fit[1].beta, fit[2].beta, fit[3].beta, fit[4].beta);
  }

  // OLS coverage: planted -0.41, n=1e4, 100 trials
  {
    auto t0 = std::chrono::steady_clock::now();
    int covered = 0;
    for (int trial = 0; trial < 100; ++trial) {
      Rng rng(mix_seed(1234, uint64_t(trial)));
      std::vector<SubjectRecord> recs;
      std::vector<double> y;
      recs.reserve(10000);
      for (int i = 0; i < 10000; ++i) {
        SubjectRecord r;
        r.disease = int(rng.uniform_int(2));
        r.age = rng.uniform(40, 80);
        r.sex = int(rng.uniform_int(2));
        r.bmi = rng.uniform(18, 35);
        recs.push_back(r);
        y.push_back(60.0 - 0.41 * r.disease - 0.05 * r.age + 0.3 * r.sex - 0.1 * r.bmi +
                    rng.normal() * 6.0);
      }
      auto fit = ols_fit(y, recs);
      if (fit[1].ci_lo <= -0.41 && -0.41 <= fit[1].ci_hi) ++covered;
    }
    auto t1 = std::chrono::steady_clock::now();
    printf("ols coverage: %d/100 (%.1fs)\n", covered,
           std::chrono::duration<double>(t1 - t0).count());
  }

  // Cox: HR 2 between disease groups, n=5000, no censoring
  {
    auto t0 = std::chrono::steady_clock::now();
    Rng rng(77);
    std::vector<SubjectRecord> recs;
    for (int i = 0; i < 5000; ++i) {
      SubjectRecord r;
      r.disease = int(rng.uniform_int(2));
      r.age = rng.uniform(40, 80);
      r.sex = int(rng.uniform_int(2));
      r.bmi = rng.uniform(18, 35);
      double hazard = std::exp(std::log(2.0) * r.disease);
      r.time = -std::log(1.0 - rng.uniform()) / hazard;
      r.event = 1;
      recs.push_back(r);
    }
    auto fit = cox_fit(recs);
    printf("cox beta_disease %.4f (ln2=%.4f) ci [%.4f, %.4f]\n", fit[0].beta, std::log(2.0),
           fit[0].ci_lo, fit[0].ci_hi);
    // time rescale invariance
    for (auto& r : recs) r.time *= 365.25;
    auto fit2 = cox_fit(recs);
    printf("cox rescale dev %.3e  (%.1fs)\n", std::abs(fit2[0].beta - fit[0].beta),
           std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  // bootstrap tiers
  {
    Rng rng(5);
    std::vector<double> a, b, c;
    for (int i = 0; i < 40; ++i) {
      double v = rng.uniform(0.5, 0.9);
      a.push_back(v);
      b.push_back(v);
      c.push_back(v + 10.0);
    }
    auto same = bootstrap_compare(a, b, 9);
    auto shift = bootstrap_compare(a, c, 9);
    printf("bootstrap same: p %.3f tier %s | shifted: p %.3g tier %s\n", same.p_value,
           same.tier.c_str(), shift.p_value, shift.tier.c_str());
    // affine invariance
    std::vector<double> a2 = a, c2 = c;
    for (auto& v : a2) v = 3.7 * v - 1.2;
    for (auto& v : c2) v = 3.7 * v - 1.2;
    auto shift2 = bootstrap_compare(a2, c2, 9);
    printf("bootstrap affine p dev: %.3e\n", std::abs(shift2.p_value - shift.p_value));
  }

  // disparity
  {
    Rng rng(13);
    std::vector<double> vals;
    std::vector<Group> grp, swapped;
    for (int i = 0; i < 10000; ++i) {
      vals.push_back(rng.normal());
      bool w = rng.uniform() < 0.5;
      grp.push_back(w ? Group::White : Group::NonWhite);
      swapped.push_back(w ? Group::NonWhite : Group::White);
    }
    double worst = 0;
    for (const auto& r : disparity_sweep(vals, grp)) worst = std::max(worst, std::abs(r.ratio - 1));
    printf("disparity exchangeable worst |ratio-1|: %.4f\n", worst);
    double q = percentile(vals, 50);
    auto r1 = disparity_ratio(vals, grp, q);
    auto r2 = disparity_ratio(vals, swapped, q);
    printf("reciprocal: %.6f * %.6f = %.9f\n", r1.ratio, r2.ratio, r1.ratio * r2.ratio);
    // hand case: rates 0.5 vs 0.4 -> 1.25
    std::vector<double> hv;
    std::vector<Group> hg;
    for (int i = 0; i < 10; ++i) {
      hv.push_back(i < 5 ? 1.0 : 0.0);
      hg.push_back(Group::White);
    }
    for (int i = 0; i < 10; ++i) {
      hv.push_back(i < 4 ? 1.0 : 0.0);
      hg.push_back(Group::NonWhite);
    }
    printf("hand ratio: %.4f (expect 1.25)\n", disparity_ratio(hv, hg, 0.5).ratio);
    // infinity sentinel
    std::vector<double> iv{1, 1, 0, 0};
    std::vector<Group> ig{Group::White, Group::White, Group::NonWhite, Group::NonWhite};
    auto ri = disparity_ratio(iv, ig, 0.5);
    printf("inf sentinel: %s above W %lld N %lld\n", std::isinf(ri.ratio) ? "inf" : "finite",
           (long long)ri.n_white_above, (long long)ri.n_nonwhite_above);
  }

  // cox degenerate errors
  {
    std::vector<SubjectRecord> recs;
    Rng rng(3);
    for (int i = 0; i < 30; ++i) {
      SubjectRecord r;
      r.disease = 1;  // constant
      r.age = rng.uniform(40, 80);
      r.sex = int(rng.uniform_int(2));
      r.bmi = rng.uniform(18, 35);
      r.time = rng.uniform(1, 10);
      r.event = 1;
      recs.push_back(r);
    }
    try {
      cox_fit(recs);
      printf("cox constant: NO ERROR (bad)\n");
    } catch (const error& e) {
      printf("cox constant: %s\n", e.what());
    }
    // perfect separation: disease=1 all die early, disease=0 all late
    for (int i = 0; i < 30; ++i) {
      auto& r = recs[size_t(i)];
      r.disease = i < 15 ? 1 : 0;
      r.time = i < 15 ? 1.0 + 0.01 * i : 10.0 + 0.01 * i;
    }
    try {
      cox_fit(recs);
      printf("cox separation: NO ERROR (bad)\n");
    } catch (const error& e) {
      printf("cox separation: %s\n", e.what());
    }
  }
  return 0;
}
