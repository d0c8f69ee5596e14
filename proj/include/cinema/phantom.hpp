#pragma once

// Synthetic multi-view cine studies with closed-form ground truth. The left
// ventricle is an ellipsoidal blood pool inside a myocardial shell; every
// semi-axis contracts by the same factor toward end-systole, so the ejection
// fraction is exactly 1 - contraction^3. A separate valve plane (independent
// of the shell) carries the mitral landmarks, giving MAPSE = |dz| in closed
// form. The right ventricle is an offset ellipsoid clipped to the outside of
// the shell (a crescent in cross-section). LAX views are planes through the
// long axis at 0/60/120 degrees.

#include "cinema/dataio.hpp"
#include "cinema/rng.hpp"

namespace cinema {


struct PhantomParams {
  double lv_a = 20, lv_b = 20, lv_c = 36;  // ED endocardial semi-axes, mm
  double contraction = 0.8;                // ES scale applied to all semi-axes
  double wall_thickness = 6;               // mm
  double rv_offset = 24;                   // RV center offset along -x, mm
  double base_plane_z_ed = 28, base_plane_z_es = 20;  // valve plane heights, mm
  int64_t n_phases = 8;
  double noise_sigma = 0.04;
  uint64_t seed = 0;

  std::array<int64_t, 3> sax_size{16, 64, 64};       // (Z, Y, X) voxels
  std::array<double, 3> sax_spacing{6.0, 1.5, 1.5};  // mm
  std::array<int64_t, 2> lax_size{64, 64};           // (Y, X)
  std::array<double, 2> lax_spacing{1.5, 1.5};

  void validate() const {
    require(lv_a > 0 && lv_b > 0 && lv_c > 0, errc::bad_config,
            "phantom: semi-axes must be positive");
    require(contraction > 0 && contraction < 1, errc::bad_config,
            "phantom: contraction must be in (0,1)");
    require(wall_thickness > 0, errc::bad_config, "phantom: wall_thickness must be positive");
    require(rv_offset > 0, errc::bad_config, "phantom: rv_offset must be positive");
    require(n_phases >= 2, errc::bad_config, "phantom: n_phases must be >= 2");
    require(noise_sigma >= 0, errc::bad_config, "phantom: noise_sigma must be >= 0");
    require(base_plane_z_ed > 0 && base_plane_z_es > 0, errc::bad_config,
            "phantom: base planes must be above the equator (z > 0)");
    require(base_plane_z_ed < lv_c, errc::bad_config,
            "phantom: ED base plane must intersect the ED endocardium (z < c)");
    require(base_plane_z_es < lv_c * contraction, errc::bad_config,
            "phantom: ES base plane must intersect the ES endocardium (z < c*contraction)");
    for (auto s : sax_size) require(s > 0, errc::bad_config, "phantom: sax_size must be positive");
    for (auto s : lax_size) require(s > 0, errc::bad_config, "phantom: lax_size must be positive");
    for (auto s : sax_spacing)
      require(s > 0, errc::bad_config, "phantom: sax_spacing must be positive");
    for (auto s : lax_spacing)
      require(s > 0, errc::bad_config, "phantom: lax_spacing must be positive");
    check_containment();
  }

  // half-extents of everything that must fit inside the grids, at ED (k=1)
  double half_extent_x() const {
    return std::max(lv_a + wall_thickness, rv_offset + rv_a());
  }
  double half_extent_y() const { return std::max(lv_b + wall_thickness, rv_b()); }
  double half_extent_z() const {
    return std::max({lv_c + wall_thickness, rv_c(), std::max(base_plane_z_ed, base_plane_z_es)});
  }

  double rv_a() const { return 0.8 * lv_a; }
  double rv_b() const { return 0.8 * lv_b; }
  double rv_c() const { return 0.85 * lv_c; }

  void check_containment() const {
    auto min_n = [](double half, double sp) { return int64_t(std::ceil(2.0 * half / sp + 1.0)); };
    int64_t nz = min_n(half_extent_z(), sax_spacing[0]);
    int64_t ny = min_n(half_extent_y(), sax_spacing[1]);
    int64_t nx = min_n(half_extent_x(), sax_spacing[2]);
    bool sax_ok = sax_size[0] >= nz && sax_size[1] >= ny && sax_size[2] >= nx;
    double half_u = std::max(half_extent_x(), half_extent_y());
    int64_t ly = min_n(half_extent_z(), lax_spacing[0]);
    int64_t lx = min_n(half_u, lax_spacing[1]);
    bool lax_ok = lax_size[0] >= ly && lax_size[1] >= lx;
    if (!sax_ok || !lax_ok)
      fail(errc::bad_config,
           "phantom: grid too small to contain the shell; required minimum SAX (z,y,x) = (" +
               std::to_string(nz) + "," + std::to_string(ny) + "," + std::to_string(nx) +
               "), LAX (y,x) = (" + std::to_string(ly) + "," + std::to_string(lx) + ")");
  }

  // cycle profile: 0 at ED (t=0), 1 at ES (t = n_phases/2 when even)
  double cycle(int64_t t) const {
    return (1.0 - std::cos(2.0 * M_PI * double(t) / double(n_phases))) / 2.0;
  }
  double scale_at(int64_t t) const { return 1.0 - (1.0 - contraction) * cycle(t); }
  double base_z_at(int64_t t) const {
    return base_plane_z_ed + (base_plane_z_es - base_plane_z_ed) * cycle(t);
  }
};

namespace detail {

inline uint8_t phantom_label(const PhantomParams& p, double k, double x, double y, double z) {
  double ea = p.lv_a * k, eb = p.lv_b * k, ec = p.lv_c * k;
  double q_endo = (x * x) / (ea * ea) + (y * y) / (eb * eb) + (z * z) / (ec * ec);
  if (q_endo <= 1.0) return kLabelLV;
  double pa = ea + p.wall_thickness, pb = eb + p.wall_thickness, pc = ec + p.wall_thickness;
  double q_epi = (x * x) / (pa * pa) + (y * y) / (pb * pb) + (z * z) / (pc * pc);
  if (q_epi <= 1.0) return kLabelMYO;
  double ra = p.rv_a() * k, rb = p.rv_b() * k, rc = p.rv_c() * k;
  double xr = x + p.rv_offset;
  double q_rv = (xr * xr) / (ra * ra) + (y * y) / (rb * rb) + (z * z) / (rc * rc);
  if (q_rv <= 1.0) return kLabelRV;
  return kLabelBG;
}

inline double label_intensity(uint8_t label) {
  switch (label) {
    case kLabelLV:
    case kLabelRV: return 0.9;
    case kLabelMYO: return 0.5;
    default: return 0.1;
  }
}

// LAX view angles about the long axis
inline constexpr std::array<double, 3> kLaxAngles = {0.0, M_PI / 3.0, 2.0 * M_PI / 3.0};

}  // namespace detail

// closed-form scalars for the continuous cycle (no rasterization)
inline std::map<std::string, double> analytic_ground_truth(const PhantomParams& p) {
  p.validate();
  double k = p.contraction;
  double edv = 4.0 / 3.0 * M_PI * p.lv_a * p.lv_b * p.lv_c / 1000.0;  // ml
  double esv = edv * k * k * k;
  double len_ed = p.base_plane_z_ed + p.lv_c + p.wall_thickness;
  double len_es = p.base_plane_z_es + p.lv_c * k + p.wall_thickness;
  std::map<std::string, double> out;
  out["EDV_ML"] = edv;
  out["ESV_ML"] = esv;
  out["EF"] = (1.0 - k * k * k) * 100.0;
  out["MAPSE"] = std::abs(p.base_plane_z_ed - p.base_plane_z_es);
  out["LVLEN_ED"] = len_ed;
  out["LVLEN_ES"] = len_es;
  out["GLS"] = (len_ed - len_es) / len_ed * 100.0;
  return out;
}

inline CineStudy generate_study(const PhantomParams& p) {
  p.validate();
  CineStudy s;
  int64_t T = p.n_phases;
  const auto [NZ, NY, NX] = std::array{p.sax_size[0], p.sax_size[1], p.sax_size[2]};
  const auto [LY, LX] = std::array{p.lax_size[0], p.lax_size[1]};
  s.sax = NdArray<float>({T, NZ, NY, NX});
  s.gt_sax_masks = NdArray<uint8_t>({T, NZ, NY, NX});
  for (int v = 0; v < 3; ++v) {
    s.lax[size_t(v)] = NdArray<float>({T, LY, LX});
    s.gt_lax_masks[size_t(v)] = NdArray<uint8_t>({T, LY, LX});
  }
  s.spacing_sax = p.sax_spacing;
  s.spacing_lax = p.lax_spacing;

  double cz = double(NZ - 1) / 2.0, cy = double(NY - 1) / 2.0, cx = double(NX - 1) / 2.0;
  double lcy = double(LY - 1) / 2.0, lcx = double(LX - 1) / 2.0;

  for (int64_t t = 0; t < T; ++t) {
    double k = p.scale_at(t);
    Rng noise(mix_seed(p.seed, uint64_t(t), uint64_t(0xCAFE)));
    for (int64_t iz = 0; iz < NZ; ++iz) {
      double z = (double(iz) - cz) * p.sax_spacing[0];
      for (int64_t iy = 0; iy < NY; ++iy) {
        double y = (double(iy) - cy) * p.sax_spacing[1];
        for (int64_t ix = 0; ix < NX; ++ix) {
          double x = (double(ix) - cx) * p.sax_spacing[2];
          uint8_t lab = detail::phantom_label(p, k, x, y, z);
          s.gt_sax_masks.at4(t, iz, iy, ix) = lab;
          double val = detail::label_intensity(lab);
          if (p.noise_sigma > 0) val += p.noise_sigma * noise.normal();
          s.sax.at4(t, iz, iy, ix) = float(val);
        }
      }
    }
    for (int v = 0; v < 3; ++v) {
      double th = detail::kLaxAngles[size_t(v)];
      double dx = std::cos(th), dy = std::sin(th);
      Rng lnoise(mix_seed(p.seed, uint64_t(t), uint64_t(v) + 1));
      for (int64_t iy = 0; iy < LY; ++iy) {
        double z = (lcy - double(iy)) * p.lax_spacing[0];  // row 0 = base side (largest z)
        for (int64_t ix = 0; ix < LX; ++ix) {
          double u = (double(ix) - lcx) * p.lax_spacing[1];
          uint8_t lab = detail::phantom_label(p, k, u * dx, u * dy, z);
          s.gt_lax_masks[size_t(v)].at3(t, iy, ix) = lab;
          double val = detail::label_intensity(lab);
          if (p.noise_sigma > 0) val += p.noise_sigma * lnoise.normal();
          s.lax[size_t(v)].at3(t, iy, ix) = float(val);
        }
      }
      // landmarks: mitral pair at valve plane x endocardium, apex at shell tip
      double zb = p.base_z_at(t);
      double inv_r2 = (dx * dx) / (p.lv_a * k * p.lv_a * k) + (dy * dy) / (p.lv_b * k * p.lv_b * k);
      double r_th = 1.0 / std::sqrt(inv_r2);  // endocardial radius along the view direction
      double frac = 1.0 - (zb * zb) / (p.lv_c * k * p.lv_c * k);
      require(frac > 0, errc::numerical, "phantom: valve plane misses the endocardium");
      double u_int = r_th * std::sqrt(frac);
      double z_apex = -(p.lv_c * k + p.wall_thickness);
      auto to_mm = [&](double uu, double zz) {
        return Point2{(lcy - zz / p.lax_spacing[0]) * p.lax_spacing[0],
                      (uu / p.lax_spacing[1] + lcx) * p.lax_spacing[1]};
      };
      LandmarkSet lm;
      lm.p1 = to_mm(-u_int, zb);
      lm.p2 = to_mm(+u_int, zb);
      lm.apex = to_mm(0.0, z_apex);
      s.gt_landmarks[size_t(v)].push_back(lm);
    }
  }

  // contraction < 1 must show up in the rasterized blood pool
  auto count_lv = [&](int64_t t) {
    int64_t n = 0;
    for (int64_t i = 0; i < NZ * NY * NX; ++i)
      if (s.gt_sax_masks.v[size_t(t * NZ * NY * NX + i)] == kLabelLV) ++n;
    return n;
  };
  int64_t ed_count = count_lv(0);
  int64_t min_count = ed_count;
  for (int64_t t = 1; t < T; ++t) min_count = std::min(min_count, count_lv(t));
  require(min_count < ed_count, errc::numerical,
          "phantom: ES blood pool not smaller than ED on this grid");

  s.gt_scalars = analytic_ground_truth(p);
  s.validate();
  return s;
}

}  // namespace cinema
