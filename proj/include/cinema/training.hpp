#pragma once

// Pre-training and fine-tuning: schedules, optimizer wiring, augmentation,
// early stopping, task heads over the masked-autoencoder encoder, the
// from-scratch UNet baseline arm, and checkpoint round-trips. Loops are
// single-threaded and stream all randomness from (seed, epoch, item) so a
// resumed run reproduces an uninterrupted one bit for bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cinema/backbone.hpp"
#include "cinema/cardiometrics.hpp"
#include "cinema/heads.hpp"
#include "cinema/unet.hpp"

namespace cinema {

// ---- task and metric vocabulary --------------------------------------------------

enum class TaskKind {
  Pretrain,
  Segmentation,
  Classification,
  Regression,
  LandmarkHeatmap,
  LandmarkCoord,
};

inline const char* task_name(TaskKind t) {
  switch (t) {
    case TaskKind::Pretrain: return "pretrain";
    case TaskKind::Segmentation: return "segmentation";
    case TaskKind::Classification: return "classification";
    case TaskKind::Regression: return "regression";
    case TaskKind::LandmarkHeatmap: return "landmark_heatmap";
    case TaskKind::LandmarkCoord: return "landmark_coord";
  }
  fail(errc::invalid_argument, "bad task kind");
}

inline TaskKind task_from_name(const std::string& s) {
  for (TaskKind t : {TaskKind::Pretrain, TaskKind::Segmentation, TaskKind::Classification,
                     TaskKind::Regression, TaskKind::LandmarkHeatmap, TaskKind::LandmarkCoord})
    if (s == task_name(t)) return t;
  fail(errc::bad_config, "unknown task '" + s + "'");
}

enum class ValMetric { Mcc, AbsErr, Dice, L2 };

inline const char* metric_name(ValMetric m) {
  switch (m) {
    case ValMetric::Mcc: return "mcc";
    case ValMetric::AbsErr: return "abs_err";
    case ValMetric::Dice: return "dice";
    case ValMetric::L2: return "l2";
  }
  fail(errc::invalid_argument, "bad metric");
}

inline ValMetric metric_from_name(const std::string& s) {
  for (ValMetric m : {ValMetric::Mcc, ValMetric::AbsErr, ValMetric::Dice, ValMetric::L2})
    if (s == metric_name(m)) return m;
  fail(errc::bad_config, "unknown validation metric '" + s + "'");
}

inline bool metric_higher_better(ValMetric m) {
  return m == ValMetric::Mcc || m == ValMetric::Dice;
}

// ---- configuration ----------------------------------------------------------------

struct AugmentConfig {
  bool enabled = true;
  double gamma_lo = 0.7, gamma_hi = 1.5;
  double rotate_deg = 15.0;
  double zoom_lo = 0.9, zoom_hi = 1.1;
  double shear_deg = 5.0;
  double shift_px = 10.0;
  double view_dropout = 0.1;  // segmentation only: whole-view input blanking

  void validate() const {
    require(gamma_lo > 0 && gamma_hi >= gamma_lo, errc::bad_config,
            "augment: gamma range must satisfy 0 < lo <= hi");
    require(zoom_lo > 0 && zoom_hi >= zoom_lo, errc::bad_config,
            "augment: zoom range must satisfy 0 < lo <= hi");
    require(rotate_deg >= 0 && shear_deg >= 0 && shift_px >= 0, errc::bad_config,
            "augment: magnitudes must be non-negative");
    require(shear_deg < 90, errc::bad_config, "augment: shear must be below 90 degrees");
    require(view_dropout >= 0 && view_dropout <= 1, errc::bad_config,
            "augment: dropout probability must lie in [0,1]");
  }
};

struct TrainConfig {
  TaskKind task = TaskKind::Pretrain;
  int64_t epochs = 800;
  int64_t warmup_epochs = 10;
  double peak_lr = 1e-3;
  double end_lr = 1e-6;
  int64_t batch_size = 128;
  double weight_decay = 0.05;  // transformer block weights only (see ParamStore decay flags)
  double grad_clip_norm = 5.0;
  double label_smoothing = 0.0;  // classification only
  int64_t validation_frequency = 20;
  int64_t validation_patience = 5;
  ValMetric validation_metric = ValMetric::AbsErr;
  uint64_t seed = 0;
  AugmentConfig augment;

  static TrainConfig defaults(TaskKind task) {
    TrainConfig c;
    c.task = task;
    switch (task) {
      case TaskKind::Pretrain:
        break;  // 800 epochs, warmup 10, peak 1e-3, end 1e-6, batch 128
      case TaskKind::Classification:
        c.epochs = 800;
        c.end_lr = 1e-5;
        c.batch_size = 64;
        c.label_smoothing = 0.1;
        c.validation_frequency = 20;
        c.validation_metric = ValMetric::Mcc;
        break;
      case TaskKind::Regression:
        c.epochs = 800;
        c.end_lr = 1e-5;
        c.batch_size = 64;
        c.validation_frequency = 20;
        c.validation_metric = ValMetric::AbsErr;
        break;
      case TaskKind::Segmentation:
        c.epochs = 4000;
        c.warmup_epochs = 50;
        c.end_lr = 1e-5;
        c.batch_size = 64;
        c.validation_frequency = 100;
        c.validation_metric = ValMetric::Dice;
        break;
      case TaskKind::LandmarkHeatmap:
      case TaskKind::LandmarkCoord:
        c.epochs = 400;
        c.end_lr = 1e-5;
        c.batch_size = 64;
        c.validation_frequency = 20;
        c.validation_metric = ValMetric::L2;
        break;
    }
    return c;
  }

  void validate() const {
    require(epochs >= 1, errc::bad_config, "train: epochs must be positive");
    require(warmup_epochs >= 0 && warmup_epochs < epochs, errc::bad_config,
            "train: warmup must be shorter than the run");
    require(peak_lr > end_lr && end_lr > 0, errc::bad_config,
            "train: learning rates must satisfy peak > end > 0");
    require(batch_size >= 1, errc::bad_config, "train: batch size must be positive");
    require(weight_decay >= 0, errc::bad_config, "train: negative weight decay");
    require(grad_clip_norm > 0, errc::bad_config, "train: clip norm must be positive");
    require(label_smoothing >= 0 && label_smoothing < 1, errc::bad_config,
            "train: label smoothing must lie in [0,1)");
    require(validation_frequency >= 1, errc::bad_config,
            "train: validation frequency must be positive");
    require(validation_patience >= 1, errc::bad_config, "train: patience must be at least 1");
    augment.validate();
  }
};

inline nlohmann::json augment_to_json(const AugmentConfig& a) {
  return {{"enabled", a.enabled},
          {"gamma_lo", a.gamma_lo},
          {"gamma_hi", a.gamma_hi},
          {"rotate_deg", a.rotate_deg},
          {"zoom_lo", a.zoom_lo},
          {"zoom_hi", a.zoom_hi},
          {"shear_deg", a.shear_deg},
          {"shift_px", a.shift_px},
          {"view_dropout", a.view_dropout}};
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"task", task_name(c.task)},
          {"epochs", c.epochs},
          {"warmup_epochs", c.warmup_epochs},
          {"peak_lr", c.peak_lr},
          {"end_lr", c.end_lr},
          {"batch_size", c.batch_size},
          {"weight_decay", c.weight_decay},
          {"grad_clip_norm", c.grad_clip_norm},
          {"label_smoothing", c.label_smoothing},
          {"validation_frequency", c.validation_frequency},
          {"validation_patience", c.validation_patience},
          {"validation_metric", metric_name(c.validation_metric)},
          {"seed", c.seed},
          {"augment", augment_to_json(c.augment)}};
}

namespace detail {

// overrides applied on top of task defaults; unknown keys rejected
inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                                const std::string& where) {
  require(j.is_object(), errc::bad_config, where + ": expected a JSON object");
  for (const auto& item : j.items())
    require(std::find(allowed.begin(), allowed.end(), item.key()) != allowed.end(),
            errc::bad_config, where + ": unknown key '" + item.key() + "'");
}

}  // namespace detail

inline AugmentConfig augment_from_json(const nlohmann::json& j, AugmentConfig a = {}) {
  detail::reject_unknown_keys(j,
                              {"enabled", "gamma_lo", "gamma_hi", "rotate_deg", "zoom_lo",
                               "zoom_hi", "shear_deg", "shift_px", "view_dropout"},
                              "augment");
  if (j.contains("enabled")) a.enabled = j.at("enabled").get<bool>();
  if (j.contains("gamma_lo")) a.gamma_lo = j.at("gamma_lo").get<double>();
  if (j.contains("gamma_hi")) a.gamma_hi = j.at("gamma_hi").get<double>();
  if (j.contains("rotate_deg")) a.rotate_deg = j.at("rotate_deg").get<double>();
  if (j.contains("zoom_lo")) a.zoom_lo = j.at("zoom_lo").get<double>();
  if (j.contains("zoom_hi")) a.zoom_hi = j.at("zoom_hi").get<double>();
  if (j.contains("shear_deg")) a.shear_deg = j.at("shear_deg").get<double>();
  if (j.contains("shift_px")) a.shift_px = j.at("shift_px").get<double>();
  if (j.contains("view_dropout")) a.view_dropout = j.at("view_dropout").get<double>();
  a.validate();
  return a;
}

// starts from the task's defaults, then applies any overrides present
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"task", "epochs", "warmup_epochs", "peak_lr", "end_lr", "batch_size", "weight_decay",
          "grad_clip_norm", "label_smoothing", "validation_frequency", "validation_patience",
          "validation_metric", "seed", "augment"},
      "train config");
  require(j.contains("task"), errc::bad_config, "train config: missing 'task'");
  TrainConfig c = TrainConfig::defaults(task_from_name(j.at("task").get<std::string>()));
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int64_t>();
  if (j.contains("warmup_epochs")) c.warmup_epochs = j.at("warmup_epochs").get<int64_t>();
  if (j.contains("peak_lr")) c.peak_lr = j.at("peak_lr").get<double>();
  if (j.contains("end_lr")) c.end_lr = j.at("end_lr").get<double>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int64_t>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("grad_clip_norm")) c.grad_clip_norm = j.at("grad_clip_norm").get<double>();
  if (j.contains("label_smoothing")) c.label_smoothing = j.at("label_smoothing").get<double>();
  if (j.contains("validation_frequency"))
    c.validation_frequency = j.at("validation_frequency").get<int64_t>();
  if (j.contains("validation_patience"))
    c.validation_patience = j.at("validation_patience").get<int64_t>();
  if (j.contains("validation_metric"))
    c.validation_metric = metric_from_name(j.at("validation_metric").get<std::string>());
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("augment")) c.augment = augment_from_json(j.at("augment"), c.augment);
  c.validate();
  return c;
}

// ---- schedule and batching --------------------------------------------------------

// linear 0 -> peak over warmup steps, then half-cosine peak -> end; the s-th
// optimizer update (1-based) uses lr_schedule(s, ...)
inline double lr_schedule(int64_t step, int64_t warmup_steps, int64_t total_steps, double peak_lr,
                          double end_lr) {
  require(total_steps >= 1 && warmup_steps >= 0 && warmup_steps < total_steps,
          errc::invalid_argument, "lr_schedule: need 0 <= warmup < total");
  require(step >= 0 && step <= total_steps, errc::invalid_argument,
          "lr_schedule: step out of range");
  if (warmup_steps > 0 && step <= warmup_steps)
    return peak_lr * double(step) / double(warmup_steps);
  double t = double(step - warmup_steps) / double(total_steps - warmup_steps);
  return end_lr + 0.5 * (peak_lr - end_lr) * (1.0 + std::cos(M_PI * t));
}

// preset batch size, reduced to the largest power of two below smaller datasets
inline int64_t effective_batch(int64_t preset, int64_t n_items) {
  require(preset >= 1 && n_items >= 1, errc::invalid_argument, "effective_batch: need positives");
  if (n_items >= preset) return preset;
  int64_t b = 1;
  while (b * 2 <= n_items) b *= 2;
  return b;
}

struct StepPlan {
  int64_t batch = 1;
  int64_t steps_per_epoch = 1;
  int64_t warmup_steps = 0;
  int64_t total_steps = 1;
};

inline StepPlan make_step_plan(const TrainConfig& cfg, int64_t n_items) {
  cfg.validate();
  require(n_items >= 1, errc::invalid_argument, "step plan: empty dataset");
  StepPlan p;
  p.batch = effective_batch(cfg.batch_size, n_items);
  p.steps_per_epoch = (n_items + p.batch - 1) / p.batch;
  p.warmup_steps = cfg.warmup_epochs * p.steps_per_epoch;
  p.total_steps = cfg.epochs * p.steps_per_epoch;
  return p;
}

// ---- samples ---------------------------------------------------------------------

// one optimization item: a study phase on the model grid, with task targets
struct TrainSample {
  ViewImages images;                           // per config view
  ViewImages images2;                          // second phase (scalar tasks); else empty
  std::vector<NdArray<uint8_t>> masks;         // per view, segmentation only
  std::vector<LandmarkSet> lms;                // per view, landmark tasks (valid where has_lms)
  std::vector<uint8_t> has_lms;                // per view
  std::vector<std::array<double, 2>> spacing;  // in-plane (y, x) mm per view
  double target = 0;                           // regression value or class label
};

namespace detail {

inline NdArray<uint8_t> mask_phase_view(const CineStudy& s, const ViewSpec& spec, int64_t t) {
  if (spec.id == ViewId::SAX) {
    require(s.gt_sax_masks.rank() == 4, errc::invalid_argument,
            "sample: study lacks SAX ground-truth masks");
    NdArray<uint8_t> m({spec.nz, spec.ny, spec.nx});
    int64_t n = m.size();
    require(s.gt_sax_masks.shape[1] == spec.nz && s.gt_sax_masks.shape[2] == spec.ny &&
                s.gt_sax_masks.shape[3] == spec.nx,
            errc::invalid_argument, "sample: SAX mask grid mismatch");
    std::copy_n(s.gt_sax_masks.v.begin() + t * n, n, m.v.begin());
    return m;
  }
  size_t li = size_t(int(spec.id) - 1);
  const auto& src = s.gt_lax_masks[li];
  require(src.rank() == 3, errc::invalid_argument, "sample: study lacks LAX ground-truth masks");
  require(src.shape[1] == spec.ny && src.shape[2] == spec.nx, errc::invalid_argument,
          "sample: LAX mask grid mismatch");
  NdArray<uint8_t> m({spec.ny, spec.nx});
  int64_t n = m.size();
  std::copy_n(src.v.begin() + t * n, n, m.v.begin());
  return m;
}

}  // namespace detail

// scalar tasks read two phases (phase and phase2); landmark and segmentation
// targets come from the study's ground truth at the primary phase
inline TrainSample make_sample(const CineStudy& s, const ModelConfig& cfg, TaskKind task,
                               int64_t phase, int64_t phase2 = -1, double target = 0) {
  require(phase >= 0 && phase < s.n_phases(), errc::invalid_argument,
          "sample: phase out of range");
  TrainSample out;
  out.images = study_phase_views(s, cfg, phase);
  out.target = target;
  for (const auto& spec : cfg.views) {
    if (spec.id == ViewId::SAX)
      out.spacing.push_back({s.spacing_sax[1], s.spacing_sax[2]});
    else
      out.spacing.push_back({s.spacing_lax[0], s.spacing_lax[1]});
  }
  if (task == TaskKind::Classification || task == TaskKind::Regression) {
    require(phase2 >= 0 && phase2 < s.n_phases(), errc::invalid_argument,
            "sample: scalar tasks need a second phase");
    out.images2 = study_phase_views(s, cfg, phase2);
  }
  if (task == TaskKind::Segmentation)
    for (const auto& spec : cfg.views) out.masks.push_back(detail::mask_phase_view(s, spec, phase));
  if (task == TaskKind::LandmarkHeatmap || task == TaskKind::LandmarkCoord) {
    for (const auto& spec : cfg.views) {
      if (spec.id == ViewId::SAX) {
        out.lms.emplace_back();
        out.has_lms.push_back(0);
        continue;
      }
      size_t li = size_t(int(spec.id) - 1);
      require(int64_t(s.gt_landmarks[li].size()) > phase, errc::invalid_argument,
              "sample: study lacks landmarks for phase");
      out.lms.push_back(s.gt_landmarks[li][size_t(phase)]);
      out.has_lms.push_back(1);
    }
  }
  return out;
}

// ---- augmentation ------------------------------------------------------------------

namespace detail {

// forward map on pixel coordinates: p' = M (p - c) + c + t
struct Affine2 {
  double m00 = 1, m01 = 0, m10 = 0, m11 = 1;
  double cy = 0, cx = 0, ty = 0, tx = 0;

  bool is_identity() const {
    return m00 == 1 && m01 == 0 && m10 == 0 && m11 == 1 && ty == 0 && tx == 0;
  }

  std::array<double, 2> fwd(double y, double x) const {
    return {m00 * (y - cy) + m01 * (x - cx) + cy + ty,
            m10 * (y - cy) + m11 * (x - cx) + cx + tx};
  }

  std::array<double, 2> inv(double y, double x) const {
    double det = m00 * m11 - m01 * m10;
    require(std::abs(det) > 1e-12, errc::numerical, "affine: singular matrix");
    double uy = y - cy - ty, ux = x - cx - tx;
    return {(m11 * uy - m01 * ux) / det + cy, (-m10 * uy + m00 * ux) / det + cx};
  }
};

// rotation . shear . isotropic zoom about the grid center
inline Affine2 make_affine(double rot_deg, double zoom, double shear_deg, double dy, double dx,
                           int64_t ny, int64_t nx) {
  double th = rot_deg * M_PI / 180.0;
  double sh = std::tan(shear_deg * M_PI / 180.0);
  double c = std::cos(th), s = std::sin(th);
  Affine2 a;
  a.m00 = c * zoom;
  a.m01 = zoom * (c * sh - s);
  a.m10 = s * zoom;
  a.m11 = zoom * (s * sh + c);
  a.cy = double(ny - 1) / 2.0;
  a.cx = double(nx - 1) / 2.0;
  a.ty = dy;
  a.tx = dx;
  return a;
}

inline void warp_plane_bilinear(const double* src, double* dst, int64_t ny, int64_t nx,
                                const Affine2& a) {
  for (int64_t yy = 0; yy < ny; ++yy)
    for (int64_t xx = 0; xx < nx; ++xx) {
      auto [sy, sx] = a.inv(double(yy), double(xx));
      double v = 0;
      if (sy >= 0 && sy <= double(ny - 1) && sx >= 0 && sx <= double(nx - 1)) {
        int64_t y0 = int64_t(std::floor(sy)), x0 = int64_t(std::floor(sx));
        int64_t y1 = std::min(y0 + 1, ny - 1), x1 = std::min(x0 + 1, nx - 1);
        double fy = sy - double(y0), fx = sx - double(x0);
        v = (1 - fy) * ((1 - fx) * src[y0 * nx + x0] + fx * src[y0 * nx + x1]) +
            fy * ((1 - fx) * src[y1 * nx + x0] + fx * src[y1 * nx + x1]);
      }
      dst[yy * nx + xx] = v;
    }
}

inline void warp_plane_nearest(const uint8_t* src, uint8_t* dst, int64_t ny, int64_t nx,
                               const Affine2& a) {
  for (int64_t yy = 0; yy < ny; ++yy)
    for (int64_t xx = 0; xx < nx; ++xx) {
      auto [sy, sx] = a.inv(double(yy), double(xx));
      int64_t ry = llround(sy), rx = llround(sx);
      dst[yy * nx + xx] =
          (ry >= 0 && ry < ny && rx >= 0 && rx < nx) ? src[ry * nx + rx] : uint8_t(0);
    }
}

inline void warp_image(NdArray<double>& img, const Affine2& a) {
  int64_t ny = img.shape[img.rank() - 2], nx = img.shape[img.rank() - 1];
  int64_t planes = img.size() / (ny * nx);
  NdArray<double> out(img.shape);
  for (int64_t p = 0; p < planes; ++p)
    warp_plane_bilinear(img.v.data() + p * ny * nx, out.v.data() + p * ny * nx, ny, nx, a);
  img = std::move(out);
}

inline void warp_mask(NdArray<uint8_t>& m, const Affine2& a) {
  int64_t ny = m.shape[m.rank() - 2], nx = m.shape[m.rank() - 1];
  int64_t planes = m.size() / (ny * nx);
  NdArray<uint8_t> out(m.shape);
  for (int64_t p = 0; p < planes; ++p)
    warp_plane_nearest(m.v.data() + p * ny * nx, out.v.data() + p * ny * nx, ny, nx, a);
  m = std::move(out);
}

inline Point2 transform_landmark(Point2 p, const Affine2& a, std::array<double, 2> sp) {
  auto [y, x] = a.fwd(p.y / sp[0], p.x / sp[1]);
  return Point2{y * sp[0], x * sp[1]};
}

inline bool landmark_inside(Point2 p_mm, std::array<double, 2> sp, int64_t ny, int64_t nx) {
  double py = p_mm.y / sp[0], px = p_mm.x / sp[1];
  return py >= 0 && py <= double(ny - 1) && px >= 0 && px <= double(nx - 1);
}

}  // namespace detail

// gamma on intensities, then an independent affine per view (masks nearest,
// landmarks through the same forward map, redrawn while any falls outside the
// grid), then whole-view input dropout for segmentation
inline void augment_sample(TrainSample& s, const ModelConfig& cfg, TaskKind task,
                           const AugmentConfig& a, Rng& rng) {
  if (!a.enabled) return;
  a.validate();
  require(s.images.size() == cfg.views.size(), errc::invalid_argument,
          "augment: sample/view count mismatch");
  double gamma = rng.uniform(a.gamma_lo, a.gamma_hi);
  auto apply_gamma = [&](ViewImages& imgs) {
    for (auto& img : imgs)
      for (double& v : img.v) {
        require(v >= 0.0 && v <= 1.0, errc::invalid_argument,
                "augment: intensities must be normalized to [0,1]");
        v = std::pow(v, gamma);
      }
  };
  if (gamma != 1.0) {
    apply_gamma(s.images);
    apply_gamma(s.images2);
  }
  for (size_t vi = 0; vi < cfg.views.size(); ++vi) {
    const ViewSpec& spec = cfg.views[vi];
    bool with_lms = !s.has_lms.empty() && s.has_lms[vi];
    detail::Affine2 A;
    LandmarkSet moved;
    bool placed = false;
    for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
      double rot = rng.uniform(-a.rotate_deg, a.rotate_deg);
      double zm = rng.uniform(a.zoom_lo, a.zoom_hi);
      double shd = rng.uniform(-a.shear_deg, a.shear_deg);
      double dy = rng.uniform(-a.shift_px, a.shift_px);
      double dx = rng.uniform(-a.shift_px, a.shift_px);
      A = detail::make_affine(rot, zm, shd, dy, dx, spec.ny, spec.nx);
      if (!with_lms) {
        placed = true;
        break;
      }
      moved.p1 = detail::transform_landmark(s.lms[vi].p1, A, s.spacing[vi]);
      moved.p2 = detail::transform_landmark(s.lms[vi].p2, A, s.spacing[vi]);
      moved.apex = detail::transform_landmark(s.lms[vi].apex, A, s.spacing[vi]);
      placed = detail::landmark_inside(moved.p1, s.spacing[vi], spec.ny, spec.nx) &&
               detail::landmark_inside(moved.p2, s.spacing[vi], spec.ny, spec.nx) &&
               detail::landmark_inside(moved.apex, s.spacing[vi], spec.ny, spec.nx);
    }
    if (!placed) A = detail::Affine2{};  // landmarks would leave the grid: keep this view as-is
    if (A.is_identity()) continue;
    detail::warp_image(s.images[vi], A);
    if (!s.images2.empty()) detail::warp_image(s.images2[vi], A);
    if (!s.masks.empty()) detail::warp_mask(s.masks[vi], A);
    if (with_lms) s.lms[vi] = moved;
  }
  if (task == TaskKind::Segmentation && a.view_dropout > 0)
    for (auto& img : s.images)
      if (rng.uniform() < a.view_dropout) std::fill(img.v.begin(), img.v.end(), 0.0);
}

// ---- checkpoints -------------------------------------------------------------------

struct Checkpoint {
  nlohmann::json model_config;  // architecture description
  nlohmann::json train_config;  // null when absent
  int64_t epoch = 0;            // completed epochs
  int64_t opt_step = 0;         // completed optimizer updates (0 when saved without state)
  std::map<std::string, nn::Tensor> params, adam_m, adam_v;
};

namespace detail {

inline CmrcArray json_bytes(const nlohmann::json& j) {
  std::string s = j.dump();
  NdArray<uint8_t> a({int64_t(s.size())});
  std::copy(s.begin(), s.end(), a.v.begin());
  return to_cmrc(a);
}

inline nlohmann::json json_from_bytes(const CmrcArray& c) {
  NdArray<uint8_t> a = from_cmrc<uint8_t>(c);
  return nlohmann::json::parse(std::string(a.v.begin(), a.v.end()));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& model_cfg,
                            const nlohmann::json& train_cfg, int64_t epoch,
                            const nn::ParamStore& ps, nn::AdamW* opt = nullptr) {
  CmrcMap m;
  m["meta/model_config"] = detail::json_bytes(model_cfg);
  m["meta/train_config"] = detail::json_bytes(train_cfg);
  NdArray<int64_t> state({2});
  state.v[0] = epoch;
  state.v[1] = opt ? opt->steps_taken() : 0;
  m["meta/state"] = to_cmrc(state);
  for (size_t i = 0; i < ps.size(); ++i) {
    const auto& e = ps.at(i);
    m["param/" + e.name] = to_cmrc(e.value);
    if (opt) {
      m["adam/m/" + e.name] = to_cmrc(opt->moment1(i));
      m["adam/v/" + e.name] = to_cmrc(opt->moment2(i));
    }
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  write_container(m, tmp);
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  CmrcMap m = read_container(path);
  require(m.count("meta/state") && m.count("meta/model_config") && m.count("meta/train_config"),
          errc::io, "checkpoint: missing metadata arrays");
  Checkpoint ck;
  ck.model_config = detail::json_from_bytes(m.at("meta/model_config"));
  ck.train_config = detail::json_from_bytes(m.at("meta/train_config"));
  NdArray<int64_t> state = from_cmrc<int64_t>(m.at("meta/state"));
  require(state.size() == 2, errc::io, "checkpoint: bad state array");
  ck.epoch = state.v[0];
  ck.opt_step = state.v[1];
  for (const auto& [key, arr] : m) {
    if (key.rfind("param/", 0) == 0)
      ck.params[key.substr(6)] = from_cmrc<double>(arr);
    else if (key.rfind("adam/m/", 0) == 0)
      ck.adam_m[key.substr(7)] = from_cmrc<double>(arr);
    else if (key.rfind("adam/v/", 0) == 0)
      ck.adam_v[key.substr(7)] = from_cmrc<double>(arr);
  }
  return ck;
}

// copies stored values into matching parameters; strict demands an exact
// two-way name match (resume), non-strict copies the intersection (fine-tune
// initialization from a pre-training checkpoint). Shared names must agree on
// shape either way. Returns the number of parameters copied.
inline size_t load_params(nn::ParamStore& ps, const std::map<std::string, nn::Tensor>& src,
                          bool strict) {
  size_t copied = 0;
  for (size_t i = 0; i < ps.size(); ++i) {
    auto& e = ps.at(i);
    auto it = src.find(e.name);
    if (it == src.end()) {
      require(!strict, errc::io, "checkpoint: missing parameter '" + e.name + "'");
      continue;
    }
    require(it->second.shape == e.value.shape, errc::io,
            "checkpoint: shape mismatch for '" + e.name + "'");
    e.value = it->second;
    ++copied;
  }
  if (strict)
    require(copied == src.size(), errc::io,
            "checkpoint: stores parameters the model does not have");
  return copied;
}

// restores optimizer moments and step count; the checkpoint must cover the
// parameter set exactly
inline void load_optimizer(nn::AdamW& opt, const nn::ParamStore& ps, const Checkpoint& ck) {
  require(ck.adam_m.size() == ps.size() && ck.adam_v.size() == ps.size(), errc::io,
          "checkpoint: optimizer state does not match the parameter set");
  for (size_t i = 0; i < ps.size(); ++i) {
    const auto& e = ps.at(i);
    const nn::Tensor& m = ck.adam_m.at(e.name);
    const nn::Tensor& v = ck.adam_v.at(e.name);
    require(m.shape == e.value.shape && v.shape == e.value.shape, errc::io,
            "checkpoint: optimizer shape mismatch for '" + e.name + "'");
    opt.moment1(i) = m;
    opt.moment2(i) = v;
  }
  opt.set_steps(ck.opt_step);
}

inline std::vector<nn::Tensor> snapshot_values(const nn::ParamStore& ps) {
  std::vector<nn::Tensor> out;
  out.reserve(ps.size());
  for (size_t i = 0; i < ps.size(); ++i) out.push_back(ps.at(i).value);
  return out;
}

inline void restore_values(nn::ParamStore& ps, const std::vector<nn::Tensor>& snap) {
  require(snap.size() == ps.size(), errc::invalid_argument, "restore: snapshot size mismatch");
  for (size_t i = 0; i < ps.size(); ++i) ps.at(i).value = snap[i];
}

// ---- task models -------------------------------------------------------------------

enum class Arm { FineTune, RandInit, Unet };

inline const char* arm_name(Arm a) {
  switch (a) {
    case Arm::FineTune: return "finetune";
    case Arm::RandInit: return "randinit";
    case Arm::Unet: return "unet";
  }
  fail(errc::invalid_argument, "bad arm");
}

inline Arm arm_from_name(const std::string& s) {
  for (Arm a : {Arm::FineTune, Arm::RandInit, Arm::Unet})
    if (s == arm_name(a)) return a;
  fail(errc::bad_config, "unknown arm '" + s + "'");
}

// keeps only the named views, preserving canonical order
inline ModelConfig view_subset(ModelConfig cfg, const std::vector<ViewId>& keep) {
  std::vector<ViewSpec> views;
  for (const auto& v : cfg.views)
    if (std::find(keep.begin(), keep.end(), v.id) != keep.end()) views.push_back(v);
  cfg.views = std::move(views);
  cfg.validate();
  return cfg;
}

// encoder plus task head (fine-tuned or randomly initialized), or the
// from-scratch UNet baseline; one parameter store per model
struct TaskModel {
  Arm arm = Arm::RandInit;
  TaskKind task = TaskKind::Segmentation;
  ModelConfig cfg;

  std::unique_ptr<MaeModel> mae;  // encoder arms; built without the decoder
  std::vector<DenseHead> dense;   // segmentation (all views) or heatmap (LAX views)
  LinearHead linear;              // classification / regression
  std::vector<CoordHead> coords;  // coordinate regression (LAX views)
  std::vector<size_t> head_view;  // view index per dense/coord head

  nn::ParamStore unet_params;
  std::vector<Unet2d> unet2;
  std::vector<Unet3d> unet3;
  std::vector<int> unet_dim;     // per head: 2 or 3
  std::vector<size_t> unet_idx;  // per head: index into unet2 / unet3

  nn::ParamStore& params() { return arm == Arm::Unet ? unet_params : mae->params; }
  const nn::ParamStore& params() const { return arm == Arm::Unet ? unet_params : mae->params; }

  static TaskModel make(Arm arm, TaskKind task, const ModelConfig& cfg, uint64_t seed,
                        const std::vector<int64_t>& unet_widths = kUnetWidths) {
    require(task != TaskKind::Pretrain, errc::bad_config,
            "task model: pre-training uses the autoencoder directly");
    TaskModel m;
    m.arm = arm;
    m.task = task;
    m.cfg = cfg;
    m.cfg.validate();
    if (arm == Arm::Unet) {
      require(task == TaskKind::Segmentation || task == TaskKind::LandmarkHeatmap,
              errc::bad_config, "unet baseline supports segmentation and heatmap tasks only");
      int64_t classes = task == TaskKind::Segmentation ? kNumLabels : 3;
      Rng rng(mix_seed(seed, uint64_t(0x04E7)));
      for (size_t vi = 0; vi < m.cfg.views.size(); ++vi) {
        const ViewSpec& spec = m.cfg.views[vi];
        if (spec.id == ViewId::SAX) {
          if (task == TaskKind::LandmarkHeatmap) continue;  // no SAX landmarks
          m.unet3.push_back(Unet3d::make(m.unet_params,
                                         std::string("unet.") + view_name(spec.id), unet_widths,
                                         classes, spec.nz, rng));
          m.unet_dim.push_back(3);
          m.unet_idx.push_back(m.unet3.size() - 1);
        } else {
          m.unet2.push_back(Unet2d::make(m.unet_params,
                                         std::string("unet.") + view_name(spec.id), unet_widths,
                                         classes, rng));
          m.unet_dim.push_back(2);
          m.unet_idx.push_back(m.unet2.size() - 1);
        }
        m.head_view.push_back(vi);
      }
      require(!m.head_view.empty(), errc::bad_config, "task model: no views carry this task");
      return m;
    }
    m.mae = std::make_unique<MaeModel>(m.cfg, seed, /*with_decoder=*/false);
    Rng rng(mix_seed(seed, uint64_t(0x6EAD)));
    switch (task) {
      case TaskKind::Segmentation:
        for (size_t vi = 0; vi < m.cfg.views.size(); ++vi) {
          m.dense.push_back(DenseHead::make(m.mae->params,
                                            std::string("head.seg.") +
                                                view_name(m.cfg.views[vi].id),
                                            m.cfg, kNumLabels, rng));
          m.head_view.push_back(vi);
        }
        break;
      case TaskKind::Classification:
        m.linear = LinearHead::make(m.mae->params, "head.cls", m.cfg.embed_dim, 1, rng);
        break;
      case TaskKind::Regression:
        m.linear = LinearHead::make(m.mae->params, "head.reg", m.cfg.embed_dim, 1, rng);
        break;
      case TaskKind::LandmarkHeatmap:
        for (size_t vi = 0; vi < m.cfg.views.size(); ++vi) {
          if (m.cfg.views[vi].id == ViewId::SAX) continue;
          m.dense.push_back(DenseHead::make(m.mae->params,
                                            std::string("head.lmk.") +
                                                view_name(m.cfg.views[vi].id),
                                            m.cfg, 3, rng));
          m.head_view.push_back(vi);
        }
        require(!m.head_view.empty(), errc::bad_config, "task model: landmarks need a LAX view");
        break;
      case TaskKind::LandmarkCoord:
        for (size_t vi = 0; vi < m.cfg.views.size(); ++vi) {
          if (m.cfg.views[vi].id == ViewId::SAX) continue;
          m.coords.push_back(CoordHead::make(m.mae->params,
                                             std::string("head.coord.") +
                                                 view_name(m.cfg.views[vi].id),
                                             m.cfg.embed_dim, rng));
          m.head_view.push_back(vi);
        }
        require(!m.head_view.empty(), errc::bad_config, "task model: landmarks need a LAX view");
        break;
      case TaskKind::Pretrain:
        break;
    }
    return m;
  }
};

// normalized (y1,x1,y2,x2,ya,xa) in units of the view extent
inline nn::Tensor coord_targets(const LandmarkSet& lm, int64_t ny, int64_t nx,
                                std::array<double, 2> sp) {
  nn::Tensor t({1, 6});
  std::array<Point2, 3> pts{lm.p1, lm.p2, lm.apex};
  for (size_t i = 0; i < 3; ++i) {
    t.v[2 * i] = pts[i].y / (double(ny) * sp[0]);
    t.v[2 * i + 1] = pts[i].x / (double(nx) * sp[1]);
  }
  return t;
}

inline Point2 coord_denorm(double yn, double xn, int64_t ny, int64_t nx,
                           std::array<double, 2> sp) {
  return Point2{yn * double(ny) * sp[0], xn * double(nx) * sp[1]};
}

namespace detail {

inline nn::Var image_as_input(nn::Graph& g, const NdArray<double>& img) {
  nn::Tensor t(img.shape);
  t.v = img.v;
  std::vector<int64_t> shape{1, 1};
  for (int64_t d : img.shape) shape.push_back(d);
  t.shape = shape;
  return g.make(std::move(t), false);
}

// mean pool of the encoded tokens of one or two full-image passes -> [1, E]
inline nn::Var pooled_tokens(nn::Graph& g, const nn::Bound& b, const MaeModel& mae,
                             const TrainSample& s) {
  EncodeCache c1 = mae.encode(g, b, s.images, empty_mask(mae.cfg));
  nn::Var tokens = c1.encoded;
  if (!s.images2.empty()) {
    EncodeCache c2 = mae.encode(g, b, s.images2, empty_mask(mae.cfg));
    tokens = nn::concat_rows(g, tokens, c2.encoded);
  }
  int64_t E = g.val(tokens).shape[1];
  return nn::reshape(g, nn::mean_rows(g, tokens), {1, E});
}

inline nn::Var mean_of(nn::Graph& g, const std::vector<nn::Var>& parts) {
  require(!parts.empty(), errc::invalid_argument, "loss: nothing to average");
  nn::Var acc = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) acc = nn::add(g, acc, parts[i]);
  return nn::scale(g, acc, 1.0 / double(parts.size()));
}

}  // namespace detail

// builds the task objective for one sample on an existing graph/binding
inline nn::Var task_loss(nn::Graph& g, const nn::Bound& b, const TaskModel& m,
                         const TrainSample& s, const TrainConfig& cfg) {
  require(m.task == cfg.task, errc::bad_config, "task model/config mismatch");
  if (m.arm == Arm::Unet) {
    std::vector<nn::Var> losses;
    for (size_t h = 0; h < m.head_view.size(); ++h) {
      size_t vi = m.head_view[h];
      nn::Var x = detail::image_as_input(g, s.images[vi]);
      nn::Var logits = m.unet_dim[h] == 3 ? m.unet3[m.unet_idx[h]](g, b, x)
                                          : m.unet2[m.unet_idx[h]](g, b, x);
      if (m.task == TaskKind::Segmentation) {
        require(!s.masks.empty(), errc::invalid_argument, "loss: sample lacks masks");
        losses.push_back(dice_ce(g, logits, s.masks[vi]));
      } else {
        const ViewSpec& spec = m.cfg.views[vi];
        losses.push_back(dice_bce(
            g, logits, heatmap_targets(s.lms[vi], spec.ny, spec.nx, s.spacing[vi])));
      }
    }
    return detail::mean_of(g, losses);
  }
  switch (m.task) {
    case TaskKind::Classification: {
      nn::Var z = m.linear.fc(g, b, detail::pooled_tokens(g, b, *m.mae, s));
      nn::Tensor t({1, 1});
      t.v[0] = s.target * (1.0 - cfg.label_smoothing) + cfg.label_smoothing / 2.0;
      return nn::bce_sigmoid(g, z, t);
    }
    case TaskKind::Regression: {
      nn::Var z = m.linear.fc(g, b, detail::pooled_tokens(g, b, *m.mae, s));
      nn::Tensor t({1, 1});
      t.v[0] = s.target;
      return nn::mse_against(g, z, t);
    }
    default: break;
  }
  EncodeCache c = m.mae->encode(g, b, s.images, empty_mask(m.cfg));
  std::vector<nn::Var> losses;
  for (size_t h = 0; h < m.head_view.size(); ++h) {
    size_t vi = m.head_view[h];
    const ViewSpec& spec = m.cfg.views[vi];
    if (m.task == TaskKind::Segmentation) {
      require(!s.masks.empty(), errc::invalid_argument, "loss: sample lacks masks");
      losses.push_back(dice_ce(g, m.dense[h](g, b, *m.mae, c, vi), s.masks[vi]));
    } else if (m.task == TaskKind::LandmarkHeatmap) {
      losses.push_back(dice_bce(g, m.dense[h](g, b, *m.mae, c, vi),
                                heatmap_targets(s.lms[vi], spec.ny, spec.nx, s.spacing[vi])));
    } else {
      losses.push_back(nn::wing_against(g, m.coords[h](g, b, *m.mae, c, vi),
                                        coord_targets(s.lms[vi], spec.ny, spec.nx, s.spacing[vi]),
                                        10.0, 2.0));
    }
  }
  return detail::mean_of(g, losses);
}

// forward pass without gradients; one output tensor per head, scalar tasks one total
struct TaskOutputs {
  std::vector<nn::Tensor> per_head;
};

inline TaskOutputs task_forward(const TaskModel& m, const TrainSample& s) {
  nn::Graph g;
  nn::Bound b = nn::bind(g, m.params(), /*needs_grad=*/false);
  TaskOutputs out;
  if (m.arm == Arm::Unet) {
    for (size_t h = 0; h < m.head_view.size(); ++h) {
      nn::Var x = detail::image_as_input(g, s.images[m.head_view[h]]);
      nn::Var logits = m.unet_dim[h] == 3 ? m.unet3[m.unet_idx[h]](g, b, x)
                                          : m.unet2[m.unet_idx[h]](g, b, x);
      out.per_head.push_back(g.val(logits));
    }
    return out;
  }
  if (m.task == TaskKind::Classification || m.task == TaskKind::Regression) {
    nn::Var z = m.linear.fc(g, b, detail::pooled_tokens(g, b, *m.mae, s));
    out.per_head.push_back(g.val(z));
    return out;
  }
  EncodeCache c = m.mae->encode(g, b, s.images, empty_mask(m.cfg));
  for (size_t h = 0; h < m.head_view.size(); ++h) {
    size_t vi = m.head_view[h];
    nn::Var y = m.task == TaskKind::LandmarkCoord ? m.coords[h](g, b, *m.mae, c, vi)
                                                  : m.dense[h](g, b, *m.mae, c, vi);
    out.per_head.push_back(g.val(y));
  }
  return out;
}

// ---- validation metrics -------------------------------------------------------------

namespace detail {

// [B, C, spatial...] -> per-voxel argmax labels with the batch dim kept
inline NdArray<uint8_t> argmax_channels(const nn::Tensor& logits) {
  require(logits.rank() >= 3, errc::invalid_argument, "argmax: need [B,C,spatial]");
  int64_t B = logits.shape[0], C = logits.shape[1];
  int64_t sp = logits.size() / (B * C);
  std::vector<int64_t> shape{B};
  for (size_t i = 2; i < logits.shape.size(); ++i) shape.push_back(logits.shape[i]);
  NdArray<uint8_t> out(shape);
  for (int64_t bi = 0; bi < B; ++bi)
    for (int64_t i = 0; i < sp; ++i) {
      int64_t best = 0;
      for (int64_t c = 1; c < C; ++c)
        if (logits.v[size_t((bi * C + c) * sp + i)] > logits.v[size_t((bi * C + best) * sp + i)])
          best = c;
      out.v[size_t(bi * sp + i)] = uint8_t(best);
    }
  return out;
}

inline double landmark_l2_mm(const LandmarkSet& a, const LandmarkSet& b) {
  return (point_dist(a.p1, b.p1) + point_dist(a.p2, b.p2) + point_dist(a.apex, b.apex)) / 3.0;
}

}  // namespace detail

// evaluation phases per study: ED (phase 0) and ES (mid-cycle)
inline std::array<int64_t, 2> eval_phases(const CineStudy& s) {
  require(s.n_phases() >= 2, errc::invalid_argument, "eval: need at least two phases");
  return {0, s.n_phases() / 2};
}

// validation score for the configured metric over a held-out set; scalar-task
// targets are passed alongside the studies
inline double eval_metric(const TaskModel& m, const TrainConfig& cfg,
                          const std::vector<CineStudy>& val,
                          const std::vector<double>& targets = {}) {
  require(!val.empty(), errc::invalid_argument, "eval: empty validation split");
  switch (m.task) {
    case TaskKind::Segmentation: {
      double acc = 0;
      int64_t n = 0;
      for (const auto& st : val)
        for (int64_t t : eval_phases(st)) {
          TrainSample s = make_sample(st, m.cfg, m.task, t);
          TaskOutputs out = task_forward(m, s);
          for (size_t h = 0; h < m.head_view.size(); ++h) {
            NdArray<uint8_t> pred = detail::argmax_channels(out.per_head[h]);
            NdArray<uint8_t> gt = s.masks[m.head_view[h]];
            pred.shape = gt.shape;  // drop the singleton batch dim on LAX views
            for (uint8_t lbl = 1; lbl < uint8_t(kNumLabels); ++lbl) {
              acc += dice(pred, gt, lbl);
              ++n;
            }
          }
        }
      return acc / double(n);
    }
    case TaskKind::Classification: {
      require(targets.size() == val.size(), errc::invalid_argument,
              "eval: target count mismatch");
      ConfusionCounts c;
      for (size_t i = 0; i < val.size(); ++i) {
        auto ph = eval_phases(val[i]);
        TrainSample s = make_sample(val[i], m.cfg, m.task, ph[0], ph[1], targets[i]);
        bool pred = task_forward(m, s).per_head[0].v[0] > 0.0;  // sigmoid(z) > 0.5
        bool truth = targets[i] > 0.5;
        if (pred && truth) ++c.tp;
        if (pred && !truth) ++c.fp;
        if (!pred && truth) ++c.fn;
        if (!pred && !truth) ++c.tn;
      }
      // a degenerate margin makes MCC undefined; score it as no-skill
      if ((c.tp + c.fp) == 0 || (c.tp + c.fn) == 0 || (c.tn + c.fp) == 0 || (c.tn + c.fn) == 0)
        return 0.0;
      return mcc(c);
    }
    case TaskKind::Regression: {
      require(targets.size() == val.size(), errc::invalid_argument,
              "eval: target count mismatch");
      double acc = 0;
      for (size_t i = 0; i < val.size(); ++i) {
        auto ph = eval_phases(val[i]);
        TrainSample s = make_sample(val[i], m.cfg, m.task, ph[0], ph[1], targets[i]);
        acc += std::abs(task_forward(m, s).per_head[0].v[0] - targets[i]);
      }
      return acc / double(val.size());
    }
    case TaskKind::LandmarkHeatmap: {
      double acc = 0;
      int64_t n = 0;
      for (const auto& st : val)
        for (int64_t t : eval_phases(st)) {
          TrainSample s = make_sample(st, m.cfg, m.task, t);
          TaskOutputs out = task_forward(m, s);
          for (size_t h = 0; h < m.head_view.size(); ++h) {
            size_t vi = m.head_view[h];
            nn::Tensor maps = out.per_head[h];
            maps.shape = {3, m.cfg.views[vi].ny, m.cfg.views[vi].nx};
            DecodedLandmarks dec = heatmap_to_landmarks(maps, s.spacing[vi]);
            acc += detail::landmark_l2_mm(dec.points, s.lms[vi]);
            ++n;
          }
        }
      return acc / double(n);
    }
    case TaskKind::LandmarkCoord: {
      double acc = 0;
      int64_t n = 0;
      for (const auto& st : val)
        for (int64_t t : eval_phases(st)) {
          TrainSample s = make_sample(st, m.cfg, m.task, t);
          TaskOutputs out = task_forward(m, s);
          for (size_t h = 0; h < m.head_view.size(); ++h) {
            size_t vi = m.head_view[h];
            const ViewSpec& spec = m.cfg.views[vi];
            const nn::Tensor& z = out.per_head[h];
            LandmarkSet pred;
            pred.p1 = coord_denorm(z.v[0], z.v[1], spec.ny, spec.nx, s.spacing[vi]);
            pred.p2 = coord_denorm(z.v[2], z.v[3], spec.ny, spec.nx, s.spacing[vi]);
            pred.apex = coord_denorm(z.v[4], z.v[5], spec.ny, spec.nx, s.spacing[vi]);
            acc += detail::landmark_l2_mm(pred, s.lms[vi]);
            ++n;
          }
        }
      return acc / double(n);
    }
    case TaskKind::Pretrain: break;
  }
  fail(errc::invalid_argument, "eval: no metric for this task");
}

// ---- optimization loops --------------------------------------------------------------

using LogFn = std::function<void(const nlohmann::json&)>;

namespace detail {

inline void scale_grads(nn::ParamStore& ps, double s) {
  for (size_t i = 0; i < ps.size(); ++i)
    for (double& gv : ps.at(i).grad.v) gv *= s;
}

}  // namespace detail

struct PretrainResult {
  std::vector<double> epoch_loss;  // mean optimization-step loss per epoch
  double first_step_loss = 0;
  double last_step_loss = 0;
  int64_t steps_run = 0;
};

// per-epoch shuffling, per-(epoch, study) random phase and mask streams; the
// final checkpoint is written to `out` when given. start_epoch resumes a run
// whose randomness is keyed by absolute epoch, so a resumed run matches an
// uninterrupted one exactly.
inline PretrainResult pretrain(MaeModel& model, nn::AdamW& opt, const TrainConfig& cfg,
                               const std::vector<CineStudy>& data, int64_t start_epoch = 0,
                               const LogFn& log = {}, const std::filesystem::path& out = {}) {
  cfg.validate();
  require(cfg.task == TaskKind::Pretrain, errc::bad_config, "pretrain: config task mismatch");
  require(model.has_decoder, errc::bad_config, "pretrain: encoder-only model");
  require(model.cfg.views.size() == 4, errc::bad_config, "pretrain: requires all four views");
  require(!data.empty(), errc::invalid_argument, "pretrain: empty dataset");
  require(start_epoch >= 0 && start_epoch <= cfg.epochs, errc::invalid_argument,
          "pretrain: bad start epoch");
  opt.weight_decay = cfg.weight_decay;
  StepPlan plan = make_step_plan(cfg, int64_t(data.size()));
  require(opt.steps_taken() == start_epoch * plan.steps_per_epoch, errc::invalid_argument,
          "pretrain: optimizer step count does not match the start epoch");
  PretrainResult res;
  bool first_recorded = false;
  int64_t n = int64_t(data.size());
  for (int64_t e = start_epoch; e < cfg.epochs; ++e) {
    std::vector<int64_t> order(size_t(n), 0);
    for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng order_rng(mix_seed(cfg.seed, uint64_t(0x0E0E), uint64_t(e)));
    order_rng.shuffle(order);
    double epoch_loss = 0;
    for (int64_t base = 0; base < n; base += plan.batch) {
      int64_t bn = std::min(plan.batch, n - base);
      model.params.zero_grads();
      double batch_loss = 0;
      for (int64_t k = 0; k < bn; ++k) {
        int64_t idx = order[size_t(base + k)];
        const CineStudy& st = data[size_t(idx)];
        Rng phase_rng(mix_seed(cfg.seed, uint64_t(0xFA5E), uint64_t(e), uint64_t(idx)));
        int64_t phase = int64_t(phase_rng.uniform_int(st.n_phases()));
        TrainSample s = make_sample(st, model.cfg, TaskKind::Pretrain, phase);
        Rng aug_rng(mix_seed(cfg.seed, uint64_t(0xA6A6), uint64_t(e), uint64_t(idx)));
        augment_sample(s, model.cfg, TaskKind::Pretrain, cfg.augment, aug_rng);
        Rng mask_rng(mix_seed(cfg.seed, uint64_t(0x3A5C), uint64_t(e), uint64_t(idx)));
        MaskPattern pat = sample_mask_all(model.cfg, mask_rng);
        nn::Graph g;
        nn::Bound b = nn::bind(g, model.params);
        nn::Var loss = model.pretrain_loss(g, b, s.images, pat);
        batch_loss += g.val(loss).v[0];
        g.backward(loss);
        nn::harvest(g, b, model.params);
      }
      batch_loss /= double(bn);
      detail::scale_grads(model.params, 1.0 / double(bn));
      nn::clip_global_norm(model.params, cfg.grad_clip_norm);
      int64_t step = opt.steps_taken() + 1;
      double lr = lr_schedule(step, plan.warmup_steps, plan.total_steps, cfg.peak_lr, cfg.end_lr);
      opt.step(model.params, lr);
      if (!first_recorded) {
        res.first_step_loss = batch_loss;
        first_recorded = true;
      }
      res.last_step_loss = batch_loss;
      ++res.steps_run;
      epoch_loss += batch_loss;
      if (log)
        log({{"phase", "pretrain"},
             {"epoch", e},
             {"step", step},
             {"lr", lr},
             {"loss", batch_loss}});
    }
    res.epoch_loss.push_back(epoch_loss / double(plan.steps_per_epoch));
  }
  if (!out.empty())
    save_checkpoint(out, config_to_json(model.cfg), train_config_to_json(cfg), cfg.epochs,
                    model.params, &opt);
  return res;
}

struct FinetuneData {
  const std::vector<CineStudy>* train = nullptr;
  const std::vector<CineStudy>* val = nullptr;
  std::vector<double> train_targets, val_targets;  // scalar tasks only
};

struct EvalRecord {
  int64_t epoch = 0;
  double metric = 0;
  bool improved = false;
};

struct FinetuneResult {
  double best_metric = 0;
  int64_t best_epoch = -1;  // -1 when no evaluation ran
  std::vector<EvalRecord> evals;
  int64_t epochs_run = 0;
  bool stopped_early = false;
};

// fine-tunes with evaluation every validation_frequency epochs; training stops
// after validation_patience consecutive non-improving evaluations and the best
// weights are restored ("improving" means strictly better by at least 1e-6 in
// the metric's favorable direction)
inline FinetuneResult finetune(TaskModel& model, nn::AdamW& opt, const TrainConfig& cfg,
                               const FinetuneData& data, const LogFn& log = {},
                               const std::filesystem::path& out = {}) {
  cfg.validate();
  require(cfg.task == model.task, errc::bad_config, "finetune: config task mismatch");
  require(data.train && !data.train->empty(), errc::invalid_argument,
          "finetune: empty training split");
  require(data.val && !data.val->empty(), errc::invalid_argument,
          "finetune: empty validation split");
  bool scalar = model.task == TaskKind::Classification || model.task == TaskKind::Regression;
  if (scalar) {
    require(data.train_targets.size() == data.train->size() &&
                data.val_targets.size() == data.val->size(),
            errc::invalid_argument, "finetune: target count mismatch");
  }
  opt.weight_decay = cfg.weight_decay;

  // items: one per study for scalar tasks, ED and ES phases otherwise
  struct Item {
    int64_t study = 0, phase = 0, phase2 = -1;
    double target = 0;
  };
  std::vector<Item> items;
  for (size_t i = 0; i < data.train->size(); ++i) {
    const CineStudy& st = (*data.train)[i];
    auto ph = eval_phases(st);
    if (scalar)
      items.push_back({int64_t(i), ph[0], ph[1], data.train_targets[i]});
    else
      for (int64_t t : ph) items.push_back({int64_t(i), t, -1, 0.0});
  }
  StepPlan plan = make_step_plan(cfg, int64_t(items.size()));

  FinetuneResult res;
  std::vector<nn::Tensor> best_snapshot;
  bool higher = metric_higher_better(cfg.validation_metric);
  int64_t bad_evals = 0;
  int64_t n = int64_t(items.size());
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    std::vector<int64_t> order(size_t(n), 0);
    for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng order_rng(mix_seed(cfg.seed, uint64_t(0x0E0E), uint64_t(e)));
    order_rng.shuffle(order);
    for (int64_t base = 0; base < n; base += plan.batch) {
      int64_t bn = std::min(plan.batch, n - base);
      model.params().zero_grads();
      double batch_loss = 0;
      for (int64_t k = 0; k < bn; ++k) {
        const Item& it = items[size_t(order[size_t(base + k)])];
        TrainSample s = make_sample((*data.train)[size_t(it.study)], model.cfg, model.task,
                                    it.phase, it.phase2, it.target);
        Rng aug_rng(mix_seed(cfg.seed, uint64_t(0xA6A6), uint64_t(e),
                             uint64_t(order[size_t(base + k)])));
        augment_sample(s, model.cfg, model.task, cfg.augment, aug_rng);
        nn::Graph g;
        nn::Bound b = nn::bind(g, model.params());
        nn::Var loss = task_loss(g, b, model, s, cfg);
        batch_loss += g.val(loss).v[0];
        g.backward(loss);
        nn::harvest(g, b, model.params());
      }
      batch_loss /= double(bn);
      detail::scale_grads(model.params(), 1.0 / double(bn));
      nn::clip_global_norm(model.params(), cfg.grad_clip_norm);
      int64_t step = opt.steps_taken() + 1;
      double lr = lr_schedule(step, plan.warmup_steps, plan.total_steps, cfg.peak_lr, cfg.end_lr);
      opt.step(model.params(), lr);
      if (log)
        log({{"phase", "train"}, {"epoch", e}, {"step", step}, {"lr", lr}, {"loss", batch_loss}});
    }
    res.epochs_run = e + 1;
    if ((e + 1) % cfg.validation_frequency != 0) continue;
    double metric = eval_metric(model, cfg, *data.val, data.val_targets);
    bool improved = res.best_epoch < 0 ||
                    (higher ? metric >= res.best_metric + 1e-6 : metric <= res.best_metric - 1e-6);
    if (improved) {
      res.best_metric = metric;
      res.best_epoch = e + 1;
      best_snapshot = snapshot_values(model.params());
      bad_evals = 0;
    } else {
      ++bad_evals;
    }
    res.evals.push_back({e + 1, metric, improved});
    if (log)
      log({{"phase", "val"},
           {"epoch", e + 1},
           {"metric", metric_name(cfg.validation_metric)},
           {"value", metric},
           {"best", res.best_metric},
           {"bad_evals", bad_evals}});
    if (bad_evals >= cfg.validation_patience) {
      res.stopped_early = true;
      break;
    }
  }
  if (!best_snapshot.empty()) restore_values(model.params(), best_snapshot);
  if (!out.empty()) {
    nlohmann::json mc;
    if (model.arm == Arm::Unet) {
      mc["arm"] = arm_name(model.arm);
      mc["task"] = task_name(model.task);
      mc["views"] = config_to_json(model.cfg)["views"];
    } else {
      mc = config_to_json(model.cfg);
      mc["arm"] = arm_name(model.arm);
      mc["task"] = task_name(model.task);
    }
    save_checkpoint(out, mc, train_config_to_json(cfg), res.epochs_run, model.params(), &opt);
  }
  return res;
}

}  // namespace cinema
