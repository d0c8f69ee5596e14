#include <chrono>
#include <cstdio>

#include "cinema/backbone.hpp"

using namespace cinema;
using namespace cinema::nn;

static ViewImages random_views(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  ViewImages v;
  for (const auto& spec : cfg.views) {
    std::vector<int64_t> shape = spec.nz > 1 ? std::vector<int64_t>{spec.nz, spec.ny, spec.nx}
                                             : std::vector<int64_t>{spec.ny, spec.nx};
    NdArray<double> img(shape);
    for (auto& x : img.v) x = rng.uniform();
    v.push_back(std::move(img));
  }
  return v;
}

int main() {
  // token counts, paper scale
  auto t0 = std::chrono::steady_clock::now();
  ModelConfig base = ModelConfig::base();
  int64_t sax_tok = base.views[0].n_tokens();
  int64_t lax_tok = base.views[1].n_tokens();
  printf("base tokens: sax %lld lax %lld\n", (long long)sax_tok, (long long)lax_tok);
  Rng mrng(7);
  auto msax = sample_mask(sax_tok, 0.75, mrng);
  auto mlax = sample_mask(lax_tok, 0.75, mrng);
  int64_t csax = 0, clax = 0;
  for (auto m : msax) csax += m;
  for (auto m : mlax) clax += m;
  printf("masked: sax %lld lax %lld\n", (long long)csax, (long long)clax);

  int64_t pc_base = param_count(base);
  printf("base params: %.2fM (window 107.1 - 144.9)\n", double(pc_base) / 1e6);

  ModelConfig desk = ModelConfig::desk();
  int64_t pc_desk = param_count(desk);
  MaeModel model(desk, 0);
  printf("desk params closed-form %lld store %lld tokens %lld\n", (long long)pc_desk,
         (long long)model.params.num_scalars(), (long long)desk.n_tokens_total());
  auto t1 = std::chrono::steady_clock::now();
  printf("setup time: %.3fs\n", std::chrono::duration<double>(t1 - t0).count());

  // non-leakage: perturb masked pixels, compare encoded visible tokens bit-exactly
  {
    ViewImages imgs = random_views(desk, 11);
    Rng r2(3);
    MaskPattern pat = sample_mask_all(desk, r2);
    Graph g1;
    Bound b1 = bind(g1, model.params, false);
    EncodeCache c1 = model.encode(g1, b1, imgs, pat);
    ViewImages imgs2 = imgs;
    Rng r3(4);
    for (size_t v = 0; v < desk.views.size(); ++v) {
      const auto& spec = desk.views[v];
      NdArray<double> noise = imgs2[v];
      for (auto& x : noise.v) x = r3.uniform(-5, 5);
      // write noise only inside masked patches
      NdArray<double> keeppart = apply_mask(imgs2[v], pat.masked[v], spec);
      NdArray<double> noisemaskedzero = apply_mask(noise, pat.masked[v], spec);
      for (size_t i = 0; i < imgs2[v].v.size(); ++i)
        imgs2[v].v[i] = keeppart.v[i] + (noise.v[i] - noisemaskedzero.v[i]);
    }
    Graph g2;
    Bound b2 = bind(g2, model.params, false);
    EncodeCache c2 = model.encode(g2, b2, imgs2, pat);
    const Tensor& e1 = g1.val(c1.encoded);
    const Tensor& e2 = g2.val(c2.encoded);
    double dmax = 0;
    for (size_t i = 0; i < e1.v.size(); ++i) dmax = std::max(dmax, std::abs(e1.v[i] - e2.v[i]));
    printf("non-leakage max dev: %.3e (rows %lld)\n", dmax, (long long)e1.shape[0]);
  }

  // full pretrain loss forward/backward on desk, timing
  {
    ViewImages imgs = random_views(desk, 21);
    Rng r2(5);
    MaskPattern pat = sample_mask_all(desk, r2);
    auto tf0 = std::chrono::steady_clock::now();
    Graph g;
    Bound b = bind(g, model.params, true);
    Var loss = model.pretrain_loss(g, b, imgs, pat);
    auto tf1 = std::chrono::steady_clock::now();
    g.backward(loss);
    auto tf2 = std::chrono::steady_clock::now();
    model.params.zero_grads();
    harvest(g, b, model.params);
    printf("desk loss %.6f fwd %.3fs bwd %.3fs nodes %zu\n", g.val(loss).v[0],
           std::chrono::duration<double>(tf1 - tf0).count(),
           std::chrono::duration<double>(tf2 - tf1).count(), g.num_nodes());
  }

  // finite differences through the whole model, tiny config
  {
    ModelConfig tiny = ModelConfig::tiny();
    MaeModel tm(tiny, 1);
    ViewImages imgs = random_views(tiny, 31);
    Rng r2(6);
    MaskPattern pat = sample_mask_all(tiny, r2);

    auto loss_at = [&]() {
      Graph g;
      Bound b = bind(g, tm.params, false);
      return g.val(tm.pretrain_loss(g, b, imgs, pat)).v[0];
    };
    Graph g;
    Bound b = bind(g, tm.params, true);
    Var loss = tm.pretrain_loss(g, b, imgs, pat);
    g.backward(loss);
    tm.params.zero_grads();
    harvest(g, b, tm.params);

    double worst = 0;
    std::string worst_name;
    Rng pick(99);
    for (size_t pi = 0; pi < tm.params.size(); ++pi) {
      auto& e = tm.params.at(pi);
      int64_t n = int64_t(e.value.v.size());
      int64_t probes = std::min<int64_t>(n, 3);
      for (int64_t k = 0; k < probes; ++k) {
        int64_t j = pick.uniform_int(n);
        double h = 1e-5;
        double orig = e.value.v[size_t(j)];
        e.value.v[size_t(j)] = orig + h;
        double lp = loss_at();
        e.value.v[size_t(j)] = orig - h;
        double lm = loss_at();
        e.value.v[size_t(j)] = orig;
        double fd = (lp - lm) / (2 * h);
        double an = e.grad.v[size_t(j)];
        double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
        if (rel > worst) {
          worst = rel;
          worst_name = e.name;
        }
      }
    }
    printf("tiny FD worst rel err: %.3e (%s)\n", worst, worst_name.c_str());
  }
  return 0;
}
