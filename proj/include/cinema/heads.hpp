#pragma once

// Task heads attached to the encoder after decoder removal: a UNetR-style
// dense head (segmentation / heatmaps) fed by conv skips s1, s2 and the
// transformer mid and final layers, a linear head on mean-pooled tokens, and
// a coordinate-regression head. All heads run on full-image (ratio 0) passes.
// Losses: soft-Dice + CE for segmentation, soft-Dice + BCE for heatmaps,
// label-smoothed CE, MSE, and Wing.

#include "cinema/backbone.hpp"

namespace cinema {

// ---- dense head (UNetR-style ladder, weights shared across views) -----------------

class DenseHead {
public:
  int64_t out_ch = 4;
  nn::ConvT2dLayer up16, up8, up4, up2;  // 1/16 -> 1/8 -> 1/4 -> 1/2 -> 1/1
  nn::Conv2dLayer fuse4, fuse2, out;
  size_t in8g, in8b, in4g, in4b, in2g, in2b, in1g, in1b;

  static DenseHead make(nn::ParamStore& ps, const std::string& name, const ModelConfig& cfg,
                        int64_t out_channels, Rng& rng) {
    DenseHead h;
    h.out_ch = out_channels;
    int64_t E = cfg.embed_dim;
    auto [c0, c1] = cfg.conv_channels;
    auto norm = [&](const std::string& n, int64_t ch) {
      size_t gamma = ps.add(n + ".gamma", {ch}, false);
      std::fill(ps.at(gamma).value.v.begin(), ps.at(gamma).value.v.end(), 1.0);
      return std::pair<size_t, size_t>(gamma, ps.add(n + ".beta", {ch}, false));
    };
    h.up16 = nn::ConvT2dLayer::make(ps, name + ".up16", 2 * E, c1, 2, rng);
    std::tie(h.in8g, h.in8b) = norm(name + ".in8", c1);
    h.up8 = nn::ConvT2dLayer::make(ps, name + ".up8", c1, c1, 2, rng);
    h.fuse4 = nn::Conv2dLayer::make(ps, name + ".fuse4", 2 * c1, c1, 3, 1, 1, rng);
    std::tie(h.in4g, h.in4b) = norm(name + ".in4", c1);
    h.up4 = nn::ConvT2dLayer::make(ps, name + ".up4", c1, c0, 2, rng);
    h.fuse2 = nn::Conv2dLayer::make(ps, name + ".fuse2", 2 * c0, c0, 3, 1, 1, rng);
    std::tie(h.in2g, h.in2b) = norm(name + ".in2", c0);
    h.up2 = nn::ConvT2dLayer::make(ps, name + ".up2", c0, c0, 2, rng);
    std::tie(h.in1g, h.in1b) = norm(name + ".in1", c0);
    h.out = nn::Conv2dLayer::make(ps, name + ".out", c0, out_channels, 3, 1, 1, rng);
    return h;
  }

  // logits for one view: [B, out_ch, ny, nx] (B = nz SAX slices, 1 for LAX)
  nn::Var operator()(nn::Graph& g, const nn::Bound& p, const MaeModel& model,
                     const EncodeCache& c, size_t view) const {
    require(c.batch.masked.empty(), errc::invalid_argument,
            "dense head: masked encoder pass (mask ratio must be 0 for fine-tuning)");
    const ViewSpec& spec = model.cfg.views[view];
    int64_t E = model.cfg.embed_dim;
    int64_t TY = spec.tokens_y(), TX = spec.tokens_x();

    auto grid = [&](nn::Var tokens) {  // [n_vis_total, E] -> this view's [B, E, TY, TX]
      int64_t off = c.batch.vis_offset[view];
      std::vector<int64_t> rows(size_t(spec.n_tokens()), 0);
      for (int64_t i = 0; i < spec.n_tokens(); ++i) rows[size_t(i)] = off + i;
      nn::Var t = nn::index_rows(g, tokens, rows);
      t = nn::reshape(g, t, {spec.nz, TY, TX, E});
      return nn::permute(g, t, {0, 3, 1, 2});
    };
    nn::Var x = nn::concat_channels(g, {grid(c.encoded), grid(c.mid)});

    auto stage = [&](nn::Var in, const nn::ConvT2dLayer& up, size_t gamma, size_t beta) {
      nn::Var y = up(g, p, in);
      y = nn::instance_norm(g, y, p[gamma], p[beta]);
      return nn::gelu(g, y);
    };
    x = stage(x, up16, in8g, in8b);                                    // 1/8
    x = up8(g, p, x);                                                  // 1/4
    x = nn::concat_channels(g, {x, c.s2[view]});
    x = fuse4(g, p, x);
    x = nn::gelu(g, nn::instance_norm(g, x, p[in4g], p[in4b]));
    x = up4(g, p, x);                                                  // 1/2
    x = nn::concat_channels(g, {x, c.s1[view]});
    x = fuse2(g, p, x);
    x = nn::gelu(g, nn::instance_norm(g, x, p[in2g], p[in2b]));
    x = stage(x, up2, in1g, in1b);                                     // 1/1
    return out(g, p, x);
  }
};

// ---- linear head on mean-pooled tokens ------------------------------------------

class LinearHead {
public:
  nn::LinearLayer fc;

  static LinearHead make(nn::ParamStore& ps, const std::string& name, int64_t embed_dim,
                         int64_t out_dim, Rng& rng) {
    LinearHead h;
    h.fc = nn::LinearLayer::make(ps, name, embed_dim, out_dim, false, rng);
    return h;
  }

  // pooled over all tokens of all views -> [1, out_dim]
  nn::Var operator()(nn::Graph& g, const nn::Bound& p, const EncodeCache& c) const {
    require(c.batch.masked.empty(), errc::invalid_argument,
            "linear head: masked encoder pass (mask ratio must be 0 for fine-tuning)");
    int64_t E = g.val(c.encoded).shape[1];
    return fc(g, p, nn::reshape(g, nn::mean_rows(g, c.encoded), {1, E}));
  }
};

// coordinate regression: per-view pooled tokens -> 3 landmarks x (y, x), normalized to [0,1]
class CoordHead {
public:
  nn::LinearLayer fc;

  static CoordHead make(nn::ParamStore& ps, const std::string& name, int64_t embed_dim,
                        Rng& rng) {
    CoordHead h;
    h.fc = nn::LinearLayer::make(ps, name, embed_dim, 6, false, rng);
    return h;
  }

  nn::Var operator()(nn::Graph& g, const nn::Bound& p, const MaeModel& model,
                     const EncodeCache& c, size_t view) const {
    require(c.batch.masked.empty(), errc::invalid_argument,
            "coord head: masked encoder pass (mask ratio must be 0 for fine-tuning)");
    const ViewSpec& spec = model.cfg.views[view];
    int64_t off = c.batch.vis_offset[view];
    std::vector<int64_t> rows(size_t(spec.n_tokens()), 0);
    for (int64_t i = 0; i < spec.n_tokens(); ++i) rows[size_t(i)] = off + i;
    nn::Var t = nn::index_rows(g, c.encoded, rows);
    int64_t E = g.val(t).shape[1];
    return fc(g, p, nn::reshape(g, nn::mean_rows(g, t), {1, E}));
  }
};

// ---- heatmap targets -----------------------------------------------------------------

// Gaussian kernel map around a landmark, sigma in pixels; grid [ny, nx] with mm spacing
inline nn::Tensor gaussian_heatmap(Point2 p_mm, int64_t ny, int64_t nx,
                                   std::array<double, 2> spacing, double sigma = 3.0) {
  require(sigma > 0, errc::invalid_argument, "gaussian_heatmap: sigma must be positive");
  double py = p_mm.y / spacing[0], px = p_mm.x / spacing[1];
  require(py >= 0 && py <= double(ny - 1) && px >= 0 && px <= double(nx - 1),
          errc::invalid_argument, "gaussian_heatmap: landmark outside grid");
  nn::Tensor m({ny, nx});
  for (int64_t iy = 0; iy < ny; ++iy)
    for (int64_t ix = 0; ix < nx; ++ix) {
      double d2 = (double(iy) - py) * (double(iy) - py) + (double(ix) - px) * (double(ix) - px);
      m.v[size_t(iy * nx + ix)] = std::exp(-d2 / (2 * sigma * sigma));
    }
  return m;
}

// 3-channel target stack [1, 3, ny, nx] for (p1, p2, apex)
inline nn::Tensor heatmap_targets(const LandmarkSet& lm, int64_t ny, int64_t nx,
                                  std::array<double, 2> spacing, double sigma = 3.0) {
  nn::Tensor t({1, 3, ny, nx});
  std::array<Point2, 3> pts{lm.p1, lm.p2, lm.apex};
  for (size_t c = 0; c < 3; ++c) {
    nn::Tensor m = gaussian_heatmap(pts[c], ny, nx, spacing, sigma);
    std::copy(m.v.begin(), m.v.end(), t.v.begin() + int64_t(c) * ny * nx);
  }
  return t;
}

// ---- losses --------------------------------------------------------------------------

namespace detail {
// [B, C, spatial...] -> [B*spatial, C] rows for per-pixel class scores
inline nn::Var rows_by_channel(nn::Graph& g, nn::Var x) {
  const auto& s = g.val(x).shape;
  require(s.size() >= 2, errc::invalid_argument, "loss: rank < 2");
  int64_t B = s[0], C = s[1], sp = 1;
  for (size_t i = 2; i < s.size(); ++i) sp *= s[i];
  nn::Var t = nn::reshape(g, x, {B, C, sp});
  t = nn::permute(g, t, {0, 2, 1});
  return nn::reshape(g, t, {B * sp, C});
}

// soft-Dice loss with additive smoothing on probability rows [N, C] vs target rows
inline nn::Var soft_dice_rows(nn::Graph& g, nn::Var probs, const nn::Tensor& target_rows) {
  constexpr double kSmooth = 1e-5;
  nn::Var t = g.constant(target_rows);
  nn::Var inter = nn::colsum(g, nn::mul(g, probs, t));          // [1, C]
  nn::Var denom = nn::add(g, nn::colsum(g, probs), nn::colsum(g, t));
  nn::Var dice = nn::div(g, nn::add_scalar(g, nn::scale(g, inter, 2.0), kSmooth),
                         nn::add_scalar(g, denom, kSmooth));
  return nn::add_scalar(g, nn::scale(g, nn::mean_all(g, dice), -1.0), 1.0);
}
}  // namespace detail

// one-hot rows [n, C] from an integer mask
inline nn::Tensor one_hot_rows(const NdArray<uint8_t>& mask, int64_t n_classes) {
  int64_t n = mask.size();
  nn::Tensor t({n, n_classes});
  for (int64_t i = 0; i < n; ++i) {
    require(mask.v[size_t(i)] < n_classes, errc::invalid_argument,
            "one_hot: label out of range");
    t.v[size_t(i * n_classes + mask.v[size_t(i)])] = 1.0;
  }
  return t;
}

// soft-Dice + cross-entropy, equal weights; logits [B, C, spatial...], integer mask
inline nn::Var dice_ce(nn::Graph& g, nn::Var logits, const NdArray<uint8_t>& mask) {
  const auto& s = g.val(logits).shape;
  int64_t C = s[1];
  int64_t n = 1;
  for (size_t i = 0; i < s.size(); ++i)
    if (i != 1) n *= s[i];
  require(mask.size() == n, errc::invalid_argument, "dice_ce: mask/logit size mismatch");
  nn::Tensor target = one_hot_rows(mask, C);
  nn::Var rows = detail::rows_by_channel(g, logits);
  nn::Var ce = nn::ce_softmax(g, rows, target);
  nn::Var dice = detail::soft_dice_rows(g, nn::softmax_rows(g, rows), target);
  return nn::add(g, dice, ce);
}

// soft-Dice + BCE against soft target maps (heatmaps); logits [B, C, spatial...]
inline nn::Var dice_bce(nn::Graph& g, nn::Var logits, const nn::Tensor& targets) {
  require(g.val(logits).shape == targets.shape, errc::invalid_argument,
          "dice_bce: shape mismatch");
  const auto& s = targets.shape;
  int64_t B = s[0], C = s[1], sp = 1;
  for (size_t i = 2; i < s.size(); ++i) sp *= s[i];
  nn::Tensor trows({B * sp, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < sp; ++i)
        trows.v[size_t((b * sp + i) * C + c)] = targets.v[size_t((b * C + c) * sp + i)];
  nn::Var rows = detail::rows_by_channel(g, logits);
  nn::Var bce = nn::bce_sigmoid(g, rows, trows);
  nn::Var dice = detail::soft_dice_rows(g, nn::sigmoid(g, rows), trows);
  return nn::add(g, dice, bce);
}

// label-smoothed cross-entropy on [n, C] logits with integer labels
inline nn::Var ce_label_smooth(nn::Graph& g, nn::Var logits, const std::vector<int64_t>& labels,
                               double eps) {
  const auto& s = g.val(logits).shape;
  require(s.size() == 2, errc::invalid_argument, "ce: logits must be [n, classes]");
  require(int64_t(labels.size()) == s[0], errc::invalid_argument, "ce: label count mismatch");
  require(eps >= 0 && eps < 1, errc::invalid_argument, "ce: smoothing in [0,1)");
  int64_t C = s[1];
  nn::Tensor t({s[0], C}, eps / double(C));
  for (int64_t i = 0; i < s[0]; ++i) {
    require(labels[size_t(i)] >= 0 && labels[size_t(i)] < C, errc::invalid_argument,
            "ce: label out of range");
    t.v[size_t(i * C + labels[size_t(i)])] += 1.0 - eps;
  }
  return nn::ce_softmax(g, logits, t);
}

inline nn::Var mse_loss(nn::Graph& g, nn::Var pred, const nn::Tensor& target) {
  return nn::mse_against(g, pred, target);
}

// wing(x) = w ln(1 + |x|/eps) for |x| < w, else |x| - C; mean over elements
inline nn::Var wing_loss(nn::Graph& g, nn::Var pred, const nn::Tensor& target, double w = 10.0,
                         double eps = 2.0) {
  return nn::wing_against(g, pred, target, w, eps);
}

}  // namespace cinema
