#pragma once

// Clinical quantities and evaluation metrics computed from masks, landmarks,
// and predictions: volumes, EF, MAPSE, LV length, GLS, landmark decoding,
// Dice, HD95, within-subject CV, and classification metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "cinema/dataio.hpp"

namespace cinema {

// ---- volumes and function ------------------------------------------------------------

// count(label) * voxel volume / 1000; spacing in mm, any rank
inline double mask_volume(const NdArray<uint8_t>& mask, uint8_t label,
                          const std::vector<double>& spacing) {
  require(label <= kLabelLV, errc::invalid_argument, "mask_volume: unknown label");
  require(spacing.size() == mask.rank(), errc::invalid_argument,
          "mask_volume: spacing rank mismatch");
  double vox = 1.0;
  for (double s : spacing) {
    require(s > 0, errc::invalid_argument, "mask_volume: spacing must be positive");
    vox *= s;
  }
  int64_t count = 0;
  for (uint8_t v : mask.v) count += (v == label);
  return double(count) * vox / 1000.0;
}

inline double ef(double edv, double esv) {
  require(edv > 0, errc::invalid_argument, "ef: EDV must be positive");
  return (edv - esv) / edv * 100.0;
}

struct EfFromSeries {
  double ef_percent;
  int64_t ed_phase, es_phase;  // argmax / argmin of the volume series (first on ties)
};

inline EfFromSeries ef_from_series(const std::vector<double>& volumes) {
  require(volumes.size() >= 2, errc::invalid_argument, "ef_from_series: need at least 2 phases");
  for (double v : volumes)
    require(v >= 0, errc::invalid_argument, "ef_from_series: negative volume");
  int64_t ed = 0, es = 0;
  for (int64_t i = 1; i < int64_t(volumes.size()); ++i) {
    if (volumes[size_t(i)] > volumes[size_t(ed)]) ed = i;
    if (volumes[size_t(i)] < volumes[size_t(es)]) es = i;
  }
  return {ef(volumes[size_t(ed)], volumes[size_t(es)]), ed, es};
}

inline double point_dist(Point2 a, Point2 b) {
  return std::hypot(a.y - b.y, a.x - b.x);
}

// mean displacement of the two mitral annulus landmarks from ED to ES, mm
inline double mapse(const LandmarkSet& ed, const LandmarkSet& es) {
  return 0.5 * (point_dist(ed.p1, es.p1) + point_dist(ed.p2, es.p2));
}

// distance from the mitral annulus midpoint to the apex, mm
inline double lv_length(const LandmarkSet& lms) {
  Point2 mid{0.5 * (lms.p1.y + lms.p2.y), 0.5 * (lms.p1.x + lms.p2.x)};
  return point_dist(mid, lms.apex);
}

inline double gls(double len_ed, double len_es) {
  require(len_ed > 0, errc::invalid_argument, "gls: ED length must be positive");
  return (len_ed - len_es) / len_ed * 100.0;
}

// ---- landmark decoding ---------------------------------------------------------------

struct DecodedLandmarks {
  LandmarkSet points;                  // mm coordinates
  std::array<bool, 3> low_confidence;  // flat map (all values equal), tie-broken anyway
};

// per-channel argmax of [3, ny, nx] maps; ties keep the lowest linear index
inline DecodedLandmarks heatmap_to_landmarks(const NdArray<double>& maps,
                                             std::array<double, 2> spacing) {
  require(maps.rank() == 3 && maps.shape[0] == 3, errc::invalid_argument,
          "heatmap_to_landmarks: expected [3, ny, nx]");
  require(spacing[0] > 0 && spacing[1] > 0, errc::invalid_argument,
          "heatmap_to_landmarks: spacing must be positive");
  int64_t ny = maps.shape[1], nx = maps.shape[2];
  DecodedLandmarks out;
  std::array<Point2*, 3> pts{&out.points.p1, &out.points.p2, &out.points.apex};
  for (int64_t c = 0; c < 3; ++c) {
    const double* m = maps.v.data() + c * ny * nx;
    int64_t best = 0;
    bool flat = true;
    for (int64_t i = 0; i < ny * nx; ++i) {
      require(std::isfinite(m[i]), errc::invalid_argument,
              "heatmap_to_landmarks: non-finite map value");
      if (m[i] > m[best]) best = i;
      if (m[i] != m[0]) flat = false;
    }
    *pts[size_t(c)] = Point2{double(best / nx) * spacing[0], double(best % nx) * spacing[1]};
    out.low_confidence[size_t(c)] = flat;
  }
  return out;
}

// ---- overlap metrics -------------------------------------------------------------------

// 2|A n B| / (|A| + |B|); both empty -> 1 (correct absence counts as agreement)
inline double dice(const NdArray<uint8_t>& a, const NdArray<uint8_t>& b, uint8_t label) {
  require(a.shape == b.shape, errc::invalid_argument, "dice: shape mismatch");
  int64_t na = 0, nb = 0, inter = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    bool ia = a.v[i] == label, ib = b.v[i] == label;
    na += ia;
    nb += ib;
    inter += (ia && ib);
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(inter) / double(na + nb);
}

namespace detail {

// 1D squared distance transform (Felzenszwalb & Huttenlocher) with sample pitch w
inline void edt_1d(const std::vector<double>& f, double w, std::vector<double>& d,
                   std::vector<int64_t>& v, std::vector<double>& z) {
  int64_t n = int64_t(f.size());
  v.assign(size_t(n), 0);
  z.assign(size_t(n + 1), 0.0);
  int64_t k = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  auto sq = [](double x) { return x * x; };
  for (int64_t q = 1; q < n; ++q) {
    double s;
    while (true) {
      int64_t p = v[size_t(k)];
      s = (f[size_t(q)] + sq(double(q) * w) - f[size_t(p)] - sq(double(p) * w)) /
          (2 * w * double(q - p));
      if (s > z[size_t(k)]) break;
      --k;
    }
    ++k;
    v[size_t(k)] = q;
    z[size_t(k)] = s;
    z[size_t(k + 1)] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  d.assign(size_t(n), 0.0);
  for (int64_t q = 0; q < n; ++q) {
    while (z[size_t(k + 1)] < double(q) * w) ++k;
    int64_t p = v[size_t(k)];
    d[size_t(q)] = sq(double(q - p) * w) + f[size_t(p)];
  }
}

// full-grid squared EDT to the set marked true, anisotropic spacing, 3D
inline std::vector<double> edt_3d(const std::vector<uint8_t>& set,
                                  const std::array<int64_t, 3>& dim,
                                  const std::array<double, 3>& sp) {
  const double kInf = 1e30;
  auto [nz, ny, nx] = dim;
  std::vector<double> g(set.size());
  for (size_t i = 0; i < set.size(); ++i) g[i] = set[i] ? 0.0 : kInf;
  std::vector<double> f, d, zbuf;
  std::vector<int64_t> vbuf;
  // x pass
  f.resize(size_t(nx));
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y) {
      double* row = g.data() + (z * ny + y) * nx;
      std::copy(row, row + nx, f.begin());
      edt_1d(f, sp[2], d, vbuf, zbuf);
      std::copy(d.begin(), d.end(), row);
    }
  // y pass
  f.resize(size_t(ny));
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t x = 0; x < nx; ++x) {
      for (int64_t y = 0; y < ny; ++y) f[size_t(y)] = g[size_t((z * ny + y) * nx + x)];
      edt_1d(f, sp[1], d, vbuf, zbuf);
      for (int64_t y = 0; y < ny; ++y) g[size_t((z * ny + y) * nx + x)] = d[size_t(y)];
    }
  // z pass
  f.resize(size_t(nz));
  for (int64_t y = 0; y < ny; ++y)
    for (int64_t x = 0; x < nx; ++x) {
      for (int64_t z = 0; z < nz; ++z) f[size_t(z)] = g[size_t((z * ny + y) * nx + x)];
      edt_1d(f, sp[0], d, vbuf, zbuf);
      for (int64_t z = 0; z < nz; ++z) g[size_t((z * ny + y) * nx + x)] = d[size_t(z)];
    }
  return g;
}

// boundary voxels of the label region: 6-connectivity, the volume edge counts as outside
inline std::vector<uint8_t> boundary_voxels(const NdArray<uint8_t>& mask, uint8_t label,
                                            const std::array<int64_t, 3>& dim) {
  auto [nz, ny, nx] = dim;
  std::vector<uint8_t> out(mask.v.size(), 0);
  auto in_region = [&](int64_t z, int64_t y, int64_t x) {
    if (z < 0 || z >= nz || y < 0 || y >= ny || x < 0 || x >= nx) return false;
    return mask.v[size_t((z * ny + y) * nx + x)] == label;
  };
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        if (!in_region(z, y, x)) continue;
        bool surf = !in_region(z - 1, y, x) || !in_region(z + 1, y, x) ||
                    !in_region(z, y - 1, x) || !in_region(z, y + 1, x) ||
                    !in_region(z, y, x - 1) || !in_region(z, y, x + 1);
        if (surf) out[size_t((z * ny + y) * nx + x)] = 1;
      }
  return out;
}

}  // namespace detail

// 95th percentile (linear interpolation) of the pooled symmetric boundary distances, mm.
// Accepts 2D [ny,nx] or 3D [nz,ny,nx] masks; 2D uses the in-plane 4-neighborhood.
inline double hd95(const NdArray<uint8_t>& a, const NdArray<uint8_t>& b, uint8_t label,
                   std::vector<double> spacing) {
  require(a.shape == b.shape, errc::invalid_argument, "hd95: shape mismatch");
  require(a.rank() == 2 || a.rank() == 3, errc::invalid_argument, "hd95: expected 2D or 3D");
  require(spacing.size() == a.rank(), errc::invalid_argument, "hd95: spacing rank mismatch");
  for (double s : spacing)
    require(s > 0, errc::invalid_argument, "hd95: spacing must be positive");

  NdArray<uint8_t> a3 = a, b3 = b;
  if (a.rank() == 2) {
    a3.shape = {1, a.shape[0], a.shape[1]};
    b3.shape = a3.shape;
    spacing.insert(spacing.begin(), 1.0);
  }
  std::array<int64_t, 3> dim{a3.shape[0], a3.shape[1], a3.shape[2]};
  std::array<double, 3> sp{spacing[0], spacing[1], spacing[2]};

  std::vector<uint8_t> ba = detail::boundary_voxels(a3, label, dim);
  std::vector<uint8_t> bb = detail::boundary_voxels(b3, label, dim);
  int64_t ca = 0, cb = 0;
  for (uint8_t v : ba) ca += v;
  for (uint8_t v : bb) cb += v;
  require(ca > 0 && cb > 0, errc::invalid_argument, "hd95: empty region for label");

  std::vector<double> da = detail::edt_3d(bb, dim, sp);  // distance to boundary of b
  std::vector<double> db = detail::edt_3d(ba, dim, sp);
  std::vector<double> pooled;
  pooled.reserve(size_t(ca + cb));
  for (size_t i = 0; i < ba.size(); ++i)
    if (ba[i]) pooled.push_back(std::sqrt(da[i]));
  for (size_t i = 0; i < bb.size(); ++i)
    if (bb[i]) pooled.push_back(std::sqrt(db[i]));
  return percentile(pooled, 95.0);
}

// ---- agreement and classification ------------------------------------------------------

// within-subject coefficient of variation over repeated pairs, percent
inline double coefficient_of_variation(const std::vector<std::pair<double, double>>& pairs) {
  require(!pairs.empty(), errc::invalid_argument, "cv: no pairs");
  double acc = 0;
  for (auto [x1, x2] : pairs) {
    double m = 0.5 * (x1 + x2);
    require(m > 0, errc::invalid_argument, "cv: non-positive pair mean");
    acc += (x1 - x2) * (x1 - x2) / (2 * m * m);
  }
  return std::sqrt(acc / double(pairs.size())) * 100.0;
}

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline double sensitivity(ConfusionCounts c) {
  require(c.tp + c.fn > 0, errc::invalid_argument, "sensitivity: no positives");
  return double(c.tp) / double(c.tp + c.fn);
}

inline double specificity(ConfusionCounts c) {
  require(c.tn + c.fp > 0, errc::invalid_argument, "specificity: no negatives");
  return double(c.tn) / double(c.tn + c.fp);
}

inline double f1_score(ConfusionCounts c) {
  require(2 * c.tp + c.fp + c.fn > 0, errc::invalid_argument, "f1: no positive instances");
  return 2.0 * double(c.tp) / double(2 * c.tp + c.fp + c.fn);
}

inline double mcc(ConfusionCounts c) {
  double p1 = double(c.tp + c.fp), p2 = double(c.tp + c.fn);
  double p3 = double(c.tn + c.fp), p4 = double(c.tn + c.fn);
  require(p1 > 0 && p2 > 0 && p3 > 0 && p4 > 0, errc::invalid_argument,
          "mcc: degenerate confusion matrix (single-class margin)");
  return (double(c.tp) * double(c.tn) - double(c.fp) * double(c.fn)) /
         std::sqrt(p1 * p2 * p3 * p4);
}

struct ClassificationMetrics {
  double sensitivity, specificity, f1, mcc;
};

inline ClassificationMetrics classification_metrics(ConfusionCounts c) {
  return {sensitivity(c), specificity(c), f1_score(c), mcc(c)};
}

// rank-statistic AUC with average ranks for ties
inline double roc_auc(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  require(scores.size() == labels.size(), errc::invalid_argument, "auc: size mismatch");
  int64_t np = 0, nn = 0;
  for (uint8_t l : labels) {
    require(l <= 1, errc::invalid_argument, "auc: labels must be 0/1");
    (l ? np : nn)++;
  }
  require(np > 0 && nn > 0, errc::invalid_argument, "auc: need both classes");
  std::vector<int64_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int64_t(i);
  std::sort(order.begin(), order.end(),
            [&](int64_t i, int64_t j) { return scores[size_t(i)] < scores[size_t(j)]; });
  std::vector<double> rank(scores.size(), 0.0);
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() &&
           scores[size_t(order[j + 1])] == scores[size_t(order[i])])
      ++j;
    double avg = (double(i) + double(j)) / 2.0 + 1.0;  // 1-based average rank
    for (size_t k = i; k <= j; ++k) rank[size_t(order[k])] = avg;
    i = j + 1;
  }
  double rpos = 0;
  for (size_t k = 0; k < labels.size(); ++k)
    if (labels[k]) rpos += rank[k];
  return (rpos - double(np) * (double(np) + 1) / 2.0) / (double(np) * double(nn));
}

}  // namespace cinema
