#pragma once

// Parameter registry, layer modules, initializers, and the AdamW optimizer.
// Parameters live outside any graph; bind() creates leaf nodes for one forward
// pass and harvest() copies gradients back after backward().

#include <map>
#include <string>

#include "cinema/autodiff.hpp"
#include "cinema/rng.hpp"

namespace cinema::nn {

class ParamStore {
public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
    bool decay = false;
  };

  size_t add(std::string name, std::vector<int64_t> shape, bool decay) {
    require(!index_.count(name), errc::invalid_argument, "duplicate parameter: " + name);
    index_[name] = entries_.size();
    entries_.push_back(Entry{std::move(name), Tensor(shape), Tensor(shape), decay});
    return entries_.size() - 1;
  }

  Entry& at(size_t i) { return entries_[i]; }
  const Entry& at(size_t i) const { return entries_[i]; }
  Entry& by_name(const std::string& n) {
    auto it = index_.find(n);
    require(it != index_.end(), errc::invalid_argument, "unknown parameter: " + n);
    return entries_[it->second];
  }
  bool has(const std::string& n) const { return index_.count(n) != 0; }
  size_t size() const { return entries_.size(); }

  int64_t num_scalars() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  std::vector<std::string> decay_names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (e.decay) out.push_back(e.name);
    return out;
  }

  void zero_grads() {
    for (auto& e : entries_) std::fill(e.grad.v.begin(), e.grad.v.end(), 0.0);
  }

private:
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

// one leaf Var per parameter, in registration order
struct Bound {
  std::vector<Var> vars;
  Var operator[](size_t i) const { return vars[i]; }
};

inline Bound bind(Graph& g, const ParamStore& ps, bool needs_grad = true) {
  Bound b;
  b.vars.reserve(ps.size());
  for (size_t i = 0; i < ps.size(); ++i) b.vars.push_back(g.make(ps.at(i).value, needs_grad));
  return b;
}

// accumulate per-node gradients into the store (call after backward)
inline void harvest(Graph& g, const Bound& b, ParamStore& ps) {
  for (size_t i = 0; i < ps.size(); ++i)
    if (g.grad_live(b.vars[i])) detail::accumulate(ps.at(i).grad, g.grad(b.vars[i]));
}

// ---- initializers -------------------------------------------------------------

inline void init_xavier_uniform(Tensor& w, Rng& rng) {
  int64_t receptive = 1;
  for (size_t i = 2; i < w.shape.size(); ++i) receptive *= w.shape[i];
  double fan_out = double(w.shape[0] * receptive);
  double fan_in = double((w.rank() >= 2 ? w.shape[1] : w.shape[0]) * receptive);
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& x : w.v) x = rng.uniform(-limit, limit);
}

inline void init_normal(Tensor& w, Rng& rng, double std_dev = 0.02) {
  for (auto& x : w.v) x = rng.normal() * std_dev;
}

// ---- layer modules (hold parameter indices, stateless forward) -----------------

struct LinearLayer {
  size_t w = 0, b = 0;
  bool has_bias = true;

  static LinearLayer make(ParamStore& ps, const std::string& name, int64_t in, int64_t out,
                          bool decay, Rng& rng, bool bias = true) {
    LinearLayer l;
    l.has_bias = bias;
    l.w = ps.add(name + ".weight", {out, in}, decay);
    init_xavier_uniform(ps.at(l.w).value, rng);
    if (bias) l.b = ps.add(name + ".bias", {out}, false);
    return l;
  }

  Var operator()(Graph& g, const Bound& p, Var x) const {
    return linear(g, x, p[w], has_bias ? p[b] : Var{});
  }
};

struct LayerNormLayer {
  size_t gamma = 0, beta = 0;

  static LayerNormLayer make(ParamStore& ps, const std::string& name, int64_t d) {
    LayerNormLayer l;
    l.gamma = ps.add(name + ".gamma", {d}, false);
    std::fill(ps.at(l.gamma).value.v.begin(), ps.at(l.gamma).value.v.end(), 1.0);
    l.beta = ps.add(name + ".beta", {d}, false);
    return l;
  }

  Var operator()(Graph& g, const Bound& p, Var x) const {
    return layer_norm(g, x, p[gamma], p[beta]);
  }
};

// per-channel affine instance norm over [B, C, spatial...] of any spatial rank
struct InstanceNormLayer {
  size_t gamma = 0, beta = 0;

  static InstanceNormLayer make(ParamStore& ps, const std::string& name, int64_t c) {
    InstanceNormLayer l;
    l.gamma = ps.add(name + ".gamma", {c}, false);
    std::fill(ps.at(l.gamma).value.v.begin(), ps.at(l.gamma).value.v.end(), 1.0);
    l.beta = ps.add(name + ".beta", {c}, false);
    return l;
  }

  Var operator()(Graph& g, const Bound& p, Var x) const {
    return instance_norm(g, x, p[gamma], p[beta]);
  }
};

struct MhaLayer {
  LinearLayer q, k, v, o;
  int heads = 1;
  int64_t dim = 0;

  static MhaLayer make(ParamStore& ps, const std::string& name, int64_t d, int heads, bool decay,
                       Rng& rng) {
    require(d % heads == 0, errc::bad_config, "attention dim not divisible by heads");
    MhaLayer m;
    m.heads = heads;
    m.dim = d;
    m.q = LinearLayer::make(ps, name + ".q", d, d, decay, rng);
    m.k = LinearLayer::make(ps, name + ".k", d, d, decay, rng);
    m.v = LinearLayer::make(ps, name + ".v", d, d, decay, rng);
    m.o = LinearLayer::make(ps, name + ".o", d, d, decay, rng);
    return m;
  }

  // x: [T, d]; attn_out, when given, receives one [T, T] map per head
  Var operator()(Graph& g, const Bound& p, Var x, std::vector<Tensor>* attn_out = nullptr) const {
    int64_t dh = dim / heads;
    Var qv = q(g, p, x), kv = k(g, p, x), vv = v(g, p, x);
    std::vector<Var> outs;
    outs.reserve(size_t(heads));
    for (int h = 0; h < heads; ++h) {
      Var qh = slice_cols(g, qv, h * dh, dh);
      Var kh = slice_cols(g, kv, h * dh, dh);
      Var vh = slice_cols(g, vv, h * dh, dh);
      Var scores = scale(g, matmul(g, qh, kh, false, true), 1.0 / std::sqrt(double(dh)));
      Var attn = softmax_rows(g, scores);
      if (attn_out) attn_out->push_back(g.val(attn));
      outs.push_back(matmul(g, attn, vh));
    }
    return o(g, p, concat_cols(g, outs));
  }
};

// pre-norm transformer block with a GELU MLP
struct BlockLayer {
  LayerNormLayer ln1, ln2;
  MhaLayer attn;
  LinearLayer fc1, fc2;

  static BlockLayer make(ParamStore& ps, const std::string& name, int64_t d, int heads,
                         int64_t mlp_hidden, Rng& rng) {
    BlockLayer b;
    b.ln1 = LayerNormLayer::make(ps, name + ".ln1", d);
    b.attn = MhaLayer::make(ps, name + ".attn", d, heads, true, rng);
    b.ln2 = LayerNormLayer::make(ps, name + ".ln2", d);
    b.fc1 = LinearLayer::make(ps, name + ".fc1", d, mlp_hidden, true, rng);
    b.fc2 = LinearLayer::make(ps, name + ".fc2", mlp_hidden, d, true, rng);
    return b;
  }

  Var operator()(Graph& g, const Bound& p, Var x, std::vector<Tensor>* attn_out = nullptr) const {
    Var y = add(g, x, attn(g, p, ln1(g, p, x), attn_out));
    Var m = fc2(g, p, gelu(g, fc1(g, p, ln2(g, p, y))));
    return add(g, y, m);
  }
};

struct Conv2dLayer {
  size_t w = 0, b = 0;
  int stride = 1, pad = 0;

  static Conv2dLayer make(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout,
                          int k, int stride, int pad, Rng& rng) {
    Conv2dLayer c;
    c.stride = stride;
    c.pad = pad;
    c.w = ps.add(name + ".weight", {cout, cin, k, k}, false);
    init_xavier_uniform(ps.at(c.w).value, rng);
    c.b = ps.add(name + ".bias", {cout}, false);
    return c;
  }

  Var operator()(Graph& g, const Bound& p, Var x) const {
    return add_channel_bias(g, conv2d(g, x, p[w], stride, pad), p[b]);
  }
};

struct Conv3dLayer {
  size_t w = 0, b = 0;
  std::array<int, 3> stride{1, 1, 1}, pad{0, 0, 0};

  // kernel per axis = 1 where stride is 1 and pad is 0 on a collapsed axis is the caller's choice;
  // kd/kh/kw come from the kernel argument per axis
  static Conv3dLayer make(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout,
                          std::array<int, 3> k, std::array<int, 3> stride, std::array<int, 3> pad,
                          Rng& rng) {
    Conv3dLayer c;
    c.stride = stride;
    c.pad = pad;
    c.w = ps.add(name + ".weight", {cout, cin, k[0], k[1], k[2]}, false);
    init_xavier_uniform(ps.at(c.w).value, rng);
    c.b = ps.add(name + ".bias", {cout}, false);
    return c;
  }

  static Conv3dLayer make(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout,
                          int k, int stride, int pad, Rng& rng) {
    return make(ps, name, cin, cout, {k, k, k}, {stride, stride, stride}, {pad, pad, pad}, rng);
  }

  Var operator()(Graph& g, const Bound& p, Var x) const {
    return add_channel_bias(g, conv3d(g, x, p[w], stride, pad), p[b]);
  }
};

struct ConvT2dLayer {
  size_t w = 0, b = 0;
  int stride = 2;

  static ConvT2dLayer make(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout,
                           int stride, Rng& rng) {
    ConvT2dLayer c;
    c.stride = stride;
    c.w = ps.add(name + ".weight", {cin, cout, stride, stride}, false);
    init_xavier_uniform(ps.at(c.w).value, rng);
    c.b = ps.add(name + ".bias", {cout}, false);
    return c;
  }

  Var operator()(Graph& g, const Bound& p, Var x) const {
    return add_channel_bias(g, conv_transpose2d(g, x, p[w], stride), p[b]);
  }
};

struct ConvT3dLayer {
  size_t w = 0, b = 0;
  std::array<int, 3> stride{2, 2, 2};

  static ConvT3dLayer make(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout,
                           std::array<int, 3> stride, Rng& rng) {
    ConvT3dLayer c;
    c.stride = stride;
    c.w = ps.add(name + ".weight", {cin, cout, stride[0], stride[1], stride[2]}, false);
    init_xavier_uniform(ps.at(c.w).value, rng);
    c.b = ps.add(name + ".bias", {cout}, false);
    return c;
  }

  static ConvT3dLayer make(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout,
                           int stride, Rng& rng) {
    return make(ps, name, cin, cout, {stride, stride, stride}, rng);
  }

  Var operator()(Graph& g, const Bound& p, Var x) const {
    return add_channel_bias(g, conv_transpose3d(g, x, p[w], stride), p[b]);
  }
};

// ---- optimizer ------------------------------------------------------------------

// returns the pre-clip global L2 norm; scales gradients in place when above max_norm
inline double clip_global_norm(ParamStore& ps, double max_norm) {
  double sq = 0;
  for (size_t i = 0; i < ps.size(); ++i)
    for (double gv : ps.at(i).grad.v) sq += gv * gv;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    double s = max_norm / norm;
    for (size_t i = 0; i < ps.size(); ++i)
      for (auto& gv : ps.at(i).grad.v) gv *= s;
  }
  return norm;
}

// decoupled weight decay, applied only to entries registered with decay=true
class AdamW {
public:
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;

  explicit AdamW(const ParamStore& ps) {
    m_.reserve(ps.size());
    v_.reserve(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
      m_.emplace_back(ps.at(i).value.shape);
      v_.emplace_back(ps.at(i).value.shape);
    }
  }

  void step(ParamStore& ps, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, double(t_));
    double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (size_t i = 0; i < ps.size(); ++i) {
      auto& e = ps.at(i);
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (int64_t j = 0; j < e.value.size(); ++j) {
        size_t sj = size_t(j);
        double gv = e.grad.v[sj];
        m.v[sj] = beta1 * m.v[sj] + (1.0 - beta1) * gv;
        v.v[sj] = beta2 * v.v[sj] + (1.0 - beta2) * gv * gv;
        double mhat = m.v[sj] / bc1;
        double vhat = v.v[sj] / bc2;
        double upd = mhat / (std::sqrt(vhat) + eps);
        if (e.decay) upd += weight_decay * e.value.v[sj];
        e.value.v[sj] -= lr * upd;
      }
    }
  }

  int64_t steps_taken() const { return t_; }

  // moment access for checkpointing
  Tensor& moment1(size_t i) { return m_[i]; }
  Tensor& moment2(size_t i) { return v_[i]; }
  void set_steps(int64_t t) { t_ = t; }

private:
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

}  // namespace cinema::nn
