#pragma once

// Residual UNet baselines trained from scratch: 2D for LAX views, 3D for SAX stacks.
// Default channel widths per level are (32, 64, 128, 256, 512); reduced width lists
// give small variants for gradient checks. The 3D net downsamples depth only while
// it remains even, so shallow stacks (e.g. 4 slices) survive five levels.

#include <array>
#include <string>
#include <vector>

#include "cinema/nn.hpp"

namespace cinema {

inline const std::vector<int64_t> kUnetWidths = {32, 64, 128, 256, 512};

namespace detail {

inline void check_unet_widths(const std::vector<int64_t>& w) {
  require(w.size() >= 2, errc::invalid_argument, "unet: need at least 2 levels");
  for (int64_t c : w) require(c > 0, errc::invalid_argument, "unet: non-positive width");
}

}  // namespace detail

// conv -> IN -> GELU -> conv -> IN, added to the input, then GELU
struct ResBlock2d {
  nn::Conv2dLayer c1, c2;
  nn::InstanceNormLayer n1, n2;

  static ResBlock2d make(nn::ParamStore& ps, const std::string& name, int64_t c, Rng& rng) {
    ResBlock2d b;
    b.c1 = nn::Conv2dLayer::make(ps, name + ".c1", c, c, 3, 1, 1, rng);
    b.n1 = nn::InstanceNormLayer::make(ps, name + ".n1", c);
    b.c2 = nn::Conv2dLayer::make(ps, name + ".c2", c, c, 3, 1, 1, rng);
    b.n2 = nn::InstanceNormLayer::make(ps, name + ".n2", c);
    return b;
  }

  nn::Var operator()(nn::Graph& g, const nn::Bound& p, nn::Var x) const {
    nn::Var y = n2(g, p, c2(g, p, nn::gelu(g, n1(g, p, c1(g, p, x)))));
    return nn::gelu(g, nn::add(g, x, y));
  }
};

struct ResBlock3d {
  nn::Conv3dLayer c1, c2;
  nn::InstanceNormLayer n1, n2;

  static ResBlock3d make(nn::ParamStore& ps, const std::string& name, int64_t c, Rng& rng) {
    ResBlock3d b;
    b.c1 = nn::Conv3dLayer::make(ps, name + ".c1", c, c, 3, 1, 1, rng);
    b.n1 = nn::InstanceNormLayer::make(ps, name + ".n1", c);
    b.c2 = nn::Conv3dLayer::make(ps, name + ".c2", c, c, 3, 1, 1, rng);
    b.n2 = nn::InstanceNormLayer::make(ps, name + ".n2", c);
    return b;
  }

  nn::Var operator()(nn::Graph& g, const nn::Bound& p, nn::Var x) const {
    nn::Var y = n2(g, p, c2(g, p, nn::gelu(g, n1(g, p, c1(g, p, x)))));
    return nn::gelu(g, nn::add(g, x, y));
  }
};

// input [B, 1, H, W] -> logits [B, classes, H, W]; H, W divisible by 2^(levels-1)
struct Unet2d {
  std::vector<int64_t> widths;
  int64_t classes = 0;

  struct Down {
    nn::Conv2dLayer conv;
    nn::InstanceNormLayer norm;
    ResBlock2d res;
  };
  struct Up {
    nn::ConvT2dLayer up;
    nn::Conv2dLayer fuse;
    nn::InstanceNormLayer norm;
    ResBlock2d res;
  };

  nn::Conv2dLayer stem;
  nn::InstanceNormLayer stem_norm;
  ResBlock2d stem_res;
  std::vector<Down> downs;  // levels 1 .. L-1
  std::vector<Up> ups;      // levels L-2 .. 0, stored deepest first
  nn::Conv2dLayer out;

  static Unet2d make(nn::ParamStore& ps, const std::string& name, std::vector<int64_t> widths,
                     int64_t classes, Rng& rng) {
    detail::check_unet_widths(widths);
    require(classes >= 1, errc::invalid_argument, "unet: need at least one output channel");
    Unet2d u;
    u.widths = widths;
    u.classes = classes;
    size_t L = widths.size();
    u.stem = nn::Conv2dLayer::make(ps, name + ".stem", 1, widths[0], 3, 1, 1, rng);
    u.stem_norm = nn::InstanceNormLayer::make(ps, name + ".stem_norm", widths[0]);
    u.stem_res = ResBlock2d::make(ps, name + ".res0", widths[0], rng);
    for (size_t i = 1; i < L; ++i) {
      std::string base = name + ".down" + std::to_string(i);
      Down d;
      d.conv = nn::Conv2dLayer::make(ps, base, widths[i - 1], widths[i], 3, 2, 1, rng);
      d.norm = nn::InstanceNormLayer::make(ps, base + "_norm", widths[i]);
      d.res = ResBlock2d::make(ps, name + ".res" + std::to_string(i), widths[i], rng);
      u.downs.push_back(d);
    }
    for (size_t i = L - 1; i-- > 0;) {
      std::string base = name + ".up" + std::to_string(i);
      Up v;
      v.up = nn::ConvT2dLayer::make(ps, base, widths[i + 1], widths[i], 2, rng);
      v.fuse = nn::Conv2dLayer::make(ps, base + "_fuse", 2 * widths[i], widths[i], 3, 1, 1, rng);
      v.norm = nn::InstanceNormLayer::make(ps, base + "_norm", widths[i]);
      v.res = ResBlock2d::make(ps, base + "_res", widths[i], rng);
      u.ups.push_back(v);
    }
    u.out = nn::Conv2dLayer::make(ps, name + ".out", widths[0], classes, 1, 1, 0, rng);
    return u;
  }

  nn::Var operator()(nn::Graph& g, const nn::Bound& p, nn::Var x) const {
    const auto& shape = g.val(x).shape;
    require(shape.size() == 4 && shape[1] == 1, errc::invalid_argument, "unet2d: need [B,1,H,W]");
    int64_t down = int64_t(1) << (widths.size() - 1);
    require(shape[2] % down == 0 && shape[3] % down == 0, errc::invalid_argument,
            "unet2d: spatial dims must be divisible by " + std::to_string(down));
    std::vector<nn::Var> skips;
    nn::Var h = stem_res(g, p, nn::gelu(g, stem_norm(g, p, stem(g, p, x))));
    skips.push_back(h);
    for (const auto& d : downs) {
      h = d.res(g, p, nn::gelu(g, d.norm(g, p, d.conv(g, p, h))));
      skips.push_back(h);
    }
    for (size_t k = 0; k < ups.size(); ++k) {
      const auto& v = ups[k];
      nn::Var up = v.up(g, p, h);
      nn::Var cat = nn::concat_channels(g, {up, skips[skips.size() - 2 - k]});
      h = v.res(g, p, nn::gelu(g, v.norm(g, p, v.fuse(g, p, cat))));
    }
    return out(g, p, h);
  }
};

// input [B, 1, D, H, W] -> logits [B, classes, D, H, W]; depth halves only while even
struct Unet3d {
  std::vector<int64_t> widths;
  int64_t classes = 0;
  int64_t depth_in = 0;
  std::vector<std::array<int, 3>> strides;  // per down level (d, h, w)

  struct Down {
    nn::Conv3dLayer conv;
    nn::InstanceNormLayer norm;
    ResBlock3d res;
  };
  struct Up {
    nn::ConvT3dLayer up;
    nn::Conv3dLayer fuse;
    nn::InstanceNormLayer norm;
    ResBlock3d res;
  };

  nn::Conv3dLayer stem;
  nn::InstanceNormLayer stem_norm;
  ResBlock3d stem_res;
  std::vector<Down> downs;
  std::vector<Up> ups;
  nn::Conv3dLayer out;

  static Unet3d make(nn::ParamStore& ps, const std::string& name, std::vector<int64_t> widths,
                     int64_t classes, int64_t depth, Rng& rng) {
    detail::check_unet_widths(widths);
    require(classes >= 1, errc::invalid_argument, "unet: need at least one output channel");
    require(depth >= 1, errc::invalid_argument, "unet3d: non-positive depth");
    Unet3d u;
    u.widths = widths;
    u.classes = classes;
    u.depth_in = depth;
    size_t L = widths.size();
    u.stem = nn::Conv3dLayer::make(ps, name + ".stem", 1, widths[0], 3, 1, 1, rng);
    u.stem_norm = nn::InstanceNormLayer::make(ps, name + ".stem_norm", widths[0]);
    u.stem_res = ResBlock3d::make(ps, name + ".res0", widths[0], rng);
    int64_t z = depth;
    for (size_t i = 1; i < L; ++i) {
      int sz = (z % 2 == 0) ? 2 : 1;
      z /= sz;
      u.strides.push_back({sz, 2, 2});
      std::string base = name + ".down" + std::to_string(i);
      Down d;
      d.conv = nn::Conv3dLayer::make(ps, base, widths[i - 1], widths[i], {3, 3, 3},
                                     u.strides.back(), {1, 1, 1}, rng);
      d.norm = nn::InstanceNormLayer::make(ps, base + "_norm", widths[i]);
      d.res = ResBlock3d::make(ps, name + ".res" + std::to_string(i), widths[i], rng);
      u.downs.push_back(d);
    }
    for (size_t i = L - 1; i-- > 0;) {
      std::string base = name + ".up" + std::to_string(i);
      Up v;
      v.up = nn::ConvT3dLayer::make(ps, base, widths[i + 1], widths[i], u.strides[i], rng);
      v.fuse = nn::Conv3dLayer::make(ps, base + "_fuse", 2 * widths[i], widths[i], 3, 1, 1, rng);
      v.norm = nn::InstanceNormLayer::make(ps, base + "_norm", widths[i]);
      v.res = ResBlock3d::make(ps, base + "_res", widths[i], rng);
      u.ups.push_back(v);
    }
    u.out = nn::Conv3dLayer::make(ps, name + ".out", widths[0], classes, 1, 1, 0, rng);
    return u;
  }

  nn::Var operator()(nn::Graph& g, const nn::Bound& p, nn::Var x) const {
    const auto& shape = g.val(x).shape;
    require(shape.size() == 5 && shape[1] == 1, errc::invalid_argument,
            "unet3d: need [B,1,D,H,W]");
    require(shape[2] == depth_in, errc::invalid_argument,
            "unet3d: depth does not match construction");
    int64_t down = int64_t(1) << (widths.size() - 1);
    require(shape[3] % down == 0 && shape[4] % down == 0, errc::invalid_argument,
            "unet3d: in-plane dims must be divisible by " + std::to_string(down));
    std::vector<nn::Var> skips;
    nn::Var h = stem_res(g, p, nn::gelu(g, stem_norm(g, p, stem(g, p, x))));
    skips.push_back(h);
    for (const auto& d : downs) {
      h = d.res(g, p, nn::gelu(g, d.norm(g, p, d.conv(g, p, h))));
      skips.push_back(h);
    }
    for (size_t k = 0; k < ups.size(); ++k) {
      const auto& v = ups[k];
      nn::Var up = v.up(g, p, h);
      nn::Var cat = nn::concat_channels(g, {up, skips[skips.size() - 2 - k]});
      h = v.res(g, p, nn::gelu(g, v.norm(g, p, v.fuse(g, p, cat))));
    }
    return out(g, p, h);
  }
};

}  // namespace cinema
