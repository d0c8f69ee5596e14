#include <cstdio>

#include "cinema/heads.hpp"

using namespace cinema;
using namespace cinema::nn;

int main() {
  ModelConfig tiny = ModelConfig::tiny();
  MaeModel model(tiny, 1);
  Rng rng(2);
  DenseHead seg = DenseHead::make(model.params, "head.seg", tiny, 4, rng);
  LinearHead lin = LinearHead::make(model.params, "head.ef", tiny.embed_dim, 1, rng);
  CoordHead coord = CoordHead::make(model.params, "head.coord", tiny.embed_dim, rng);
  DenseHead hm = DenseHead::make(model.params, "head.hm", tiny, 3, rng);

  ViewImages imgs;
  Rng ir(5);
  for (const auto& spec : tiny.views) {
    std::vector<int64_t> sh = spec.nz > 1 ? std::vector<int64_t>{spec.nz, spec.ny, spec.nx}
                                          : std::vector<int64_t>{spec.ny, spec.nx};
    NdArray<double> im(sh);
    for (auto& x : im.v) x = ir.uniform();
    imgs.push_back(std::move(im));
  }
  MaskPattern none = empty_mask(tiny);

  // synthetic labels
  NdArray<uint8_t> sax_mask({2, 32, 32});
  for (size_t i = 0; i < sax_mask.v.size(); ++i) sax_mask.v[i] = uint8_t(i % 4);
  NdArray<uint8_t> lax_mask({1, 32, 32});
  for (size_t i = 0; i < lax_mask.v.size(); ++i) lax_mask.v[i] = uint8_t((i / 7) % 4);
  LandmarkSet lm{{10.0, 12.0}, {10.0, 40.0}, {50.0, 26.0}};
  Tensor hm_t = heatmap_targets(lm, 32, 32, {2.0, 2.0});
  Tensor ef_t({1, 1}, 0.55);
  Tensor coord_t({1, 6}, 0.4);

  auto full_loss = [&](Graph& g, const Bound& b) {
    EncodeCache c = model.encode(g, b, imgs, none);
    Var l = dice_ce(g, seg(g, b, model, c, 0), sax_mask);
    l = add(g, l, dice_ce(g, seg(g, b, model, c, 1), lax_mask));
    l = add(g, l, dice_bce(g, hm(g, b, model, c, 1), hm_t));
    l = add(g, l, mse_loss(g, lin(g, b, c), ef_t));
    l = add(g, l, wing_loss(g, coord(g, b, model, c, 1), coord_t));
    l = add(g, l, ce_label_smooth(g, lin(g, b, c), {0}, 0.0));
    return l;
  };

  {
    Graph g;
    Bound b = bind(g, model.params, true);
    EncodeCache c = model.encode(g, b, imgs, none);
    Var sl = seg(g, b, model, c, 0);
    printf("seg sax logits shape %s\n", shape_str(g.val(sl).shape).c_str());
    Var hl = hm(g, b, model, c, 1);
    printf("heatmap lax logits shape %s\n", shape_str(g.val(hl).shape).c_str());
  }

  // FD over every parameter tensor
  {
    Graph g;
    Bound b = bind(g, model.params, true);
    Var loss = full_loss(g, b);
    g.backward(loss);
    model.params.zero_grads();
    harvest(g, b, model.params);
    auto loss_at = [&]() {
      Graph g2;
      Bound b2 = bind(g2, model.params, false);
      return g2.val(full_loss(g2, b2)).v[0];
    };
    double worst = 0;
    std::string worst_name;
    Rng pick(99);
    for (size_t pi = 0; pi < model.params.size(); ++pi) {
      auto& e = model.params.at(pi);
      int64_t n = int64_t(e.value.v.size());
      for (int64_t k = 0; k < std::min<int64_t>(n, 2); ++k) {
        int64_t j = pick.uniform_int(n);
        double h = 1e-5, orig = e.value.v[size_t(j)];
        e.value.v[size_t(j)] = orig + h;
        double lp = loss_at();
        e.value.v[size_t(j)] = orig - h;
        double lm = loss_at();
        e.value.v[size_t(j)] = orig;
        double fd = (lp - lm) / (2 * h), an = e.grad.v[size_t(j)];
        double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-4);
        if (rel > worst) {
          worst = rel;
          worst_name = e.name;
        }
      }
    }
    printf("heads FD worst rel err: %.3e (%s)\n", worst, worst_name.c_str());
  }

  // loss sanity: smoothing eps=0 == plain CE; wing continuity; heatmap values; dice limit
  {
    Graph g;
    Tensor lg({1, 3});
    lg.v = {1.0, -0.5, 2.0};
    Var l1 = ce_label_smooth(g, g.constant(lg), {2}, 0.0);
    double expect = -2.0 + std::log(std::exp(1.0) + std::exp(-0.5) + std::exp(2.0));
    printf("ce eps0 %.12f expect %.12f\n", g.val(l1).v[0], expect);

    Tensor hmx = gaussian_heatmap({20.0, 24.0}, 32, 32, {2.0, 2.0});
    printf("heatmap at landmark %.6f at 3px %.6f expect %.6f\n", hmx.v[10 * 32 + 12],
           hmx.v[10 * 32 + 15], std::exp(-0.5));

    // wing continuity at |x| = w
    double w = 10, e2 = 2, C = w - w * std::log(1 + w / e2);
    Tensor p({1, 2});
    p.v = {w - 1e-9, w + 1e-9};
    Tensor z({1, 2});
    Graph g2;
    Var wl = wing_loss(g2, g2.constant(p), z);
    double left = w * std::log(1 + (w - 1e-9) / e2), right = (w + 1e-9) - C;
    printf("wing cont: loss %.12f expect %.12f\n", g2.val(wl).v[0], (left + right) / 2);

    // huge-margin one-hot logits -> dice_ce ~ 0
    Graph g3;
    NdArray<uint8_t> m({1, 4, 4});
    for (size_t i = 0; i < 16; ++i) m.v[i] = uint8_t(i % 4);
    Tensor big({1, 4, 4, 4});
    for (int64_t c = 0; c < 4; ++c)
      for (int64_t i = 0; i < 16; ++i)
        big.v[size_t(c * 16 + i)] = (uint8_t(i % 4) == c) ? 200.0 : -200.0;
    Var dl = dice_ce(g3, g3.constant(big), m);
    printf("dice_ce perfect: %.3e\n", g3.val(dl).v[0]);
  }
  return 0;
}
