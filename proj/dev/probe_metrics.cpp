#include <cstdio>

#include "cinema/cardiometrics.hpp"
#include "cinema/rng.hpp"

using namespace cinema;

// brute-force pooled boundary-distance percentile
static double hd95_brute(const NdArray<uint8_t>& a, const NdArray<uint8_t>& b, uint8_t label,
                         std::array<double, 3> sp) {
  auto dims = std::array<int64_t, 3>{a.shape[0], a.shape[1], a.shape[2]};
  auto ba = detail::boundary_voxels(a, label, dims);
  auto bb = detail::boundary_voxels(b, label, dims);
  auto [nz, ny, nx] = dims;
  auto coords = [&](const std::vector<uint8_t>& s) {
    std::vector<std::array<double, 3>> c;
    for (int64_t z = 0; z < nz; ++z)
      for (int64_t y = 0; y < ny; ++y)
        for (int64_t x = 0; x < nx; ++x)
          if (s[size_t((z * ny + y) * nx + x)])
            c.push_back({double(z) * sp[0], double(y) * sp[1], double(x) * sp[2]});
    return c;
  };
  auto ca = coords(ba), cb = coords(bb);
  std::vector<double> pooled;
  auto side = [&](const auto& from, const auto& to) {
    for (const auto& p : from) {
      double best = 1e300;
      for (const auto& q : to) {
        double d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                   (p[2] - q[2]) * (p[2] - q[2]);
        best = std::min(best, d);
      }
      pooled.push_back(std::sqrt(best));
    }
  };
  side(ca, cb);
  side(cb, ca);
  return percentile(pooled, 95.0);
}

int main() {
  // random 16^3 masks vs oracle
  Rng rng(42);
  double worst = 0;
  for (int t = 0; t < 30; ++t) {
    NdArray<uint8_t> a({16, 16, 16}), b({16, 16, 16});
    // random blobs: a few balls
    auto blob = [&](NdArray<uint8_t>& m) {
      int nball = 1 + int(rng.uniform_int(3));
      for (int k = 0; k < nball; ++k) {
        double cz = rng.uniform(3, 13), cy = rng.uniform(3, 13), cx = rng.uniform(3, 13);
        double r = rng.uniform(2, 5);
        for (int64_t z = 0; z < 16; ++z)
          for (int64_t y = 0; y < 16; ++y)
            for (int64_t x = 0; x < 16; ++x)
              if ((z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
                m.v[size_t((z * 16 + y) * 16 + x)] = 1;
      }
    };
    blob(a);
    blob(b);
    std::array<double, 3> sp{rng.uniform(0.5, 3), rng.uniform(0.5, 3), rng.uniform(0.5, 3)};
    double fast = hd95(a, b, 1, {sp[0], sp[1], sp[2]});
    double slow = hd95_brute(a, b, 1, sp);
    worst = std::max(worst, std::abs(fast - slow));
  }
  printf("hd95 vs brute worst |diff|: %.3e\n", worst);

  // shifted rectangle, 3 voxels at 1mm
  NdArray<uint8_t> r1({1, 10, 20}), r2({1, 10, 20});
  for (int64_t y = 2; y < 6; ++y)
    for (int64_t x = 2; x < 8; ++x) {
      r1.v[size_t(y * 20 + x)] = 1;
      r2.v[size_t(y * 20 + x + 3)] = 1;
    }
  printf("shifted rect hd95: %.6f (expect 3)\n", hd95(r1, r2, 1, {1, 1, 1}));

  // hand checks
  printf("ef(100,40)=%.1f  cv single pair=%.4f (expect 12.8565)\n", ef(100, 40),
         coefficient_of_variation({{50, 60}}));
  auto s = ef_from_series({100, 90, 80});
  printf("series ef %.1f ed %lld es %lld\n", s.ef_percent, (long long)s.ed_phase,
         (long long)s.es_phase);
  LandmarkSet L{{0, 0}, {0, 2}, {4, 1}};
  printf("lv_length %.6f (expect 4)\n", lv_length(L));
  printf("auc all-equal: %.3f  auc separated: %.3f\n",
         roc_auc({1, 1, 1, 1}, {0, 1, 0, 1}), roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}));
  ConfusionCounts cc{90, 40, 60, 10};
  auto m = classification_metrics(cc);
  printf("sens %.4f spec %.4f f1 %.4f mcc %.4f\n", m.sensitivity, m.specificity, m.f1, m.mcc);

  // dice round trip with landmarks/heatmap
  NdArray<double> maps({3, 32, 32});
  LandmarkSet lm{{10.0, 12.0}, {10.0, 40.0}, {50.0, 26.0}};
  std::array<Point2, 3> pts{lm.p1, lm.p2, lm.apex};
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < 32; ++y)
      for (int64_t x = 0; x < 32; ++x) {
        double py = pts[size_t(c)].y / 2.0, px = pts[size_t(c)].x / 2.0;
        double d2 = (y - py) * (y - py) + (x - px) * (x - px);
        maps.v[size_t((c * 32 + y) * 32 + x)] = std::exp(-d2 / 18.0);
      }
  auto dec = heatmap_to_landmarks(maps, {2.0, 2.0});
  printf("decoded p1 (%.1f,%.1f) p2 (%.1f,%.1f) apex (%.1f,%.1f)\n", dec.points.p1.y,
         dec.points.p1.x, dec.points.p2.y, dec.points.p2.x, dec.points.apex.y,
         dec.points.apex.x);
  return 0;
}
