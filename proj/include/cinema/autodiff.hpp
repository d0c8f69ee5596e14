#pragma once

// Reverse-mode autodiff on a dynamic tape of dense double tensors. Every op
// used by the models lives here with a hand-written backward; gradients are
// validated against central finite differences in the test suite.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "cinema/tensor.hpp"

namespace cinema::nn {

using Tensor = NdArray<double>;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
public:
  struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    std::function<void(Graph&)> back;
  };

  Var make(Tensor val, bool needs_grad) {
    nodes_.push_back(Node{std::move(val), Tensor{}, needs_grad, {}});
    return Var{int(nodes_.size()) - 1};
  }

  Var constant(Tensor val) { return make(std::move(val), false); }

  void set_backward(Var v, std::function<void(Graph&)> back) {
    nodes_[size_t(v.id)].back = std::move(back);
  }

  const Tensor& val(Var v) const { return nodes_[size_t(v.id)].val; }
  bool needs_grad(Var v) const { return nodes_[size_t(v.id)].needs_grad; }

  // grad tensor, allocated on demand with the node's shape
  Tensor& grad(Var v) {
    Node& n = nodes_[size_t(v.id)];
    if (n.grad.v.empty() && !n.val.v.empty()) n.grad = Tensor(n.val.shape);
    return n.grad;
  }

  bool grad_live(Var v) const { return !nodes_[size_t(v.id)].grad.v.empty(); }

  void backward(Var loss) {
    require(val(loss).size() == 1, errc::invalid_argument, "backward: loss must be scalar");
    grad(loss).v[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.needs_grad && n.back && !n.grad.v.empty()) n.back(*this);
    }
  }

  size_t num_nodes() const { return nodes_.size(); }

private:
  std::vector<Node> nodes_;
};

namespace detail {

// C = op(a) * op(b) for 2D tensors, transpose flags select op
inline Tensor mat_mul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  int64_t m = ta ? a.shape[1] : a.shape[0];
  int64_t K = ta ? a.shape[0] : a.shape[1];
  int64_t Kb = tb ? b.shape[1] : b.shape[0];
  int64_t n = tb ? b.shape[0] : b.shape[1];
  require(K == Kb, errc::invalid_argument, "mat_mul: inner dims mismatch");
  Tensor c({m, n});
  const double* A = a.v.data();
  const double* B = b.v.data();
  double* C = c.v.data();
  if (!ta && !tb) {
    for (int64_t i = 0; i < m; ++i) {
      const double* arow = A + i * K;
      double* crow = C + i * n;
      for (int64_t k = 0; k < K; ++k) {
        double av = arow[k];
        if (av == 0.0) continue;
        const double* brow = B + k * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (int64_t i = 0; i < m; ++i) {
      const double* arow = A + i * K;
      double* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) {
        const double* brow = B + j * K;
        double acc = 0.0;
        for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
        crow[j] = acc;
      }
    }
  } else if (ta && !tb) {
    for (int64_t k = 0; k < K; ++k) {
      const double* arow = A + k * m;
      const double* brow = B + k * n;
      for (int64_t i = 0; i < m; ++i) {
        double av = arow[i];
        if (av == 0.0) continue;
        double* crow = C + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int64_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (int64_t k = 0; k < K; ++k) {
        double av = A[k * m + i];
        if (av == 0.0) continue;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * B[j * K + k];
      }
    }
  }
  return c;
}

inline void accumulate(Tensor& dst, const Tensor& src) {
  require(dst.size() == src.size(), errc::invalid_argument, "accumulate: size mismatch");
  for (int64_t i = 0; i < src.size(); ++i) dst.v[size_t(i)] += src.v[size_t(i)];
}

}  // namespace detail

// ---- elementwise and scalar ------------------------------------------------

inline Var add(Graph& g, Var a, Var b) {
  require(g.val(a).same_shape(g.val(b)), errc::invalid_argument, "add: shape mismatch");
  Tensor v = g.val(a);
  detail::accumulate(v, g.val(b));
  Var out = g.make(std::move(v), g.needs_grad(a) || g.needs_grad(b));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      if (gg.needs_grad(a)) detail::accumulate(gg.grad(a), dy);
      if (gg.needs_grad(b)) detail::accumulate(gg.grad(b), dy);
    });
  return out;
}

inline Var sub(Graph& g, Var a, Var b) {
  require(g.val(a).same_shape(g.val(b)), errc::invalid_argument, "sub: shape mismatch");
  Tensor v = g.val(a);
  for (int64_t i = 0; i < v.size(); ++i) v.v[size_t(i)] -= g.val(b).v[size_t(i)];
  Var out = g.make(std::move(v), g.needs_grad(a) || g.needs_grad(b));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      if (gg.needs_grad(a)) detail::accumulate(gg.grad(a), dy);
      if (gg.needs_grad(b)) {
        Tensor& db = gg.grad(b);
        for (int64_t i = 0; i < dy.size(); ++i) db.v[size_t(i)] -= dy.v[size_t(i)];
      }
    });
  return out;
}

inline Var mul(Graph& g, Var a, Var b) {
  require(g.val(a).same_shape(g.val(b)), errc::invalid_argument, "mul: shape mismatch");
  Tensor v = g.val(a);
  for (int64_t i = 0; i < v.size(); ++i) v.v[size_t(i)] *= g.val(b).v[size_t(i)];
  Var out = g.make(std::move(v), g.needs_grad(a) || g.needs_grad(b));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      if (gg.needs_grad(a)) {
        Tensor& da = gg.grad(a);
        const Tensor& bv = gg.val(b);
        for (int64_t i = 0; i < dy.size(); ++i) da.v[size_t(i)] += dy.v[size_t(i)] * bv.v[size_t(i)];
      }
      if (gg.needs_grad(b)) {
        Tensor& db = gg.grad(b);
        const Tensor& av = gg.val(a);
        for (int64_t i = 0; i < dy.size(); ++i) db.v[size_t(i)] += dy.v[size_t(i)] * av.v[size_t(i)];
      }
    });
  return out;
}

inline Var div(Graph& g, Var a, Var b) {
  require(g.val(a).same_shape(g.val(b)), errc::invalid_argument, "div: shape mismatch");
  Tensor v = g.val(a);
  for (int64_t i = 0; i < v.size(); ++i) v.v[size_t(i)] /= g.val(b).v[size_t(i)];
  Var out = g.make(std::move(v), g.needs_grad(a) || g.needs_grad(b));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& bv = gg.val(b);
      const Tensor& yv = gg.val(out);
      if (gg.needs_grad(a)) {
        Tensor& da = gg.grad(a);
        for (int64_t i = 0; i < dy.size(); ++i) da.v[size_t(i)] += dy.v[size_t(i)] / bv.v[size_t(i)];
      }
      if (gg.needs_grad(b)) {
        Tensor& db = gg.grad(b);
        for (int64_t i = 0; i < dy.size(); ++i)
          db.v[size_t(i)] -= dy.v[size_t(i)] * yv.v[size_t(i)] / bv.v[size_t(i)];
      }
    });
  return out;
}

inline Var scale(Graph& g, Var a, double c) {
  Tensor v = g.val(a);
  for (auto& x : v.v) x *= c;
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      Tensor& da = gg.grad(a);
      for (int64_t i = 0; i < dy.size(); ++i) da.v[size_t(i)] += c * dy.v[size_t(i)];
    });
  return out;
}

inline Var add_scalar(Graph& g, Var a, double c) {
  Tensor v = g.val(a);
  for (auto& x : v.v) x += c;
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) { detail::accumulate(gg.grad(a), gg.grad(out)); });
  return out;
}

inline Var gelu(Graph& g, Var a) {
  Tensor v = g.val(a);
  for (auto& x : v.v) x = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& x = gg.val(a);
      Tensor& da = gg.grad(a);
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (int64_t i = 0; i < dy.size(); ++i) {
        double xv = x.v[size_t(i)];
        double cdf = 0.5 * (1.0 + std::erf(xv * M_SQRT1_2));
        double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv * xv);
        da.v[size_t(i)] += dy.v[size_t(i)] * (cdf + xv * pdf);
      }
    });
  return out;
}

inline Var sigmoid(Graph& g, Var a) {
  Tensor v = g.val(a);
  for (auto& x : v.v) x = 1.0 / (1.0 + std::exp(-x));
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& y = gg.val(out);
      Tensor& da = gg.grad(a);
      for (int64_t i = 0; i < dy.size(); ++i) {
        double s = y.v[size_t(i)];
        da.v[size_t(i)] += dy.v[size_t(i)] * s * (1.0 - s);
      }
    });
  return out;
}

// ---- shape ------------------------------------------------------------------

inline Var reshape(Graph& g, Var a, std::vector<int64_t> shape) {
  require(Tensor::count(shape) == g.val(a).size(), errc::invalid_argument,
          "reshape: element count mismatch");
  Tensor v = g.val(a);
  v.shape = shape;
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) { detail::accumulate(gg.grad(a), gg.grad(out)); });
  return out;
}

namespace detail {
// Walks the permuted layout; pairs each permuted flat offset with the matching
// offset in the original layout. Permuted axis j mirrors original axis perm[j].
template <class Fn>
inline void permute_pairs(const std::vector<int64_t>& orig_shape, const std::vector<int>& perm,
                          Fn&& fn) {
  int r = int(orig_shape.size());
  std::vector<int64_t> ostr(size_t(r), 1);
  for (int i = r - 2; i >= 0; --i)
    ostr[size_t(i)] = ostr[size_t(i) + 1] * orig_shape[size_t(i) + 1];
  std::vector<int64_t> pshape(size_t(r), 0);
  for (int j = 0; j < r; ++j) pshape[size_t(j)] = orig_shape[size_t(perm[size_t(j)])];
  std::vector<int64_t> pstr(size_t(r), 1);
  for (int i = r - 2; i >= 0; --i) pstr[size_t(i)] = pstr[size_t(i) + 1] * pshape[size_t(i) + 1];
  int64_t total = Tensor::count(orig_shape);
  for (int64_t pf = 0; pf < total; ++pf) {
    int64_t rem = pf, ooff = 0;
    for (int j = 0; j < r; ++j) {
      int64_t coord = rem / pstr[size_t(j)];
      rem %= pstr[size_t(j)];
      ooff += coord * ostr[size_t(perm[size_t(j)])];
    }
    fn(pf, ooff);
  }
}
}  // namespace detail

// output axis j takes source axis perm[j]
inline Var permute(Graph& g, Var a, std::vector<int> perm) {
  const Tensor& x = g.val(a);
  require(int(perm.size()) == x.rank(), errc::invalid_argument, "permute: rank mismatch");
  std::vector<int64_t> ishape = x.shape;  // copy: make() below may reallocate the tape
  std::vector<int64_t> oshape(perm.size());
  for (size_t j = 0; j < perm.size(); ++j) oshape[j] = x.shape[size_t(perm[j])];
  Tensor v(oshape);
  detail::permute_pairs(x.shape, perm,
                        [&](int64_t pf, int64_t of) { v.v[size_t(pf)] = x.v[size_t(of)]; });
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      Tensor& da = gg.grad(a);
      detail::permute_pairs(ishape, perm,
                            [&](int64_t pf, int64_t of) { da.v[size_t(of)] += dy.v[size_t(pf)]; });
    });
  return out;
}

inline Var concat_rows(Graph& g, const std::vector<Var>& parts) {
  require(!parts.empty(), errc::invalid_argument, "concat_rows: empty");
  std::vector<int64_t> shape = g.val(parts[0]).shape;
  int64_t rows = 0;
  int64_t inner = g.val(parts[0]).size() / std::max<int64_t>(1, shape[0]);
  bool needs = false;
  for (Var p : parts) {
    const Tensor& t = g.val(p);
    require(t.rank() == int(shape.size()), errc::invalid_argument, "concat_rows: rank mismatch");
    for (size_t i = 1; i < shape.size(); ++i)
      require(t.shape[i] == shape[i], errc::invalid_argument, "concat_rows: inner dims mismatch");
    rows += t.shape[0];
    needs = needs || g.needs_grad(p);
  }
  shape[0] = rows;
  Tensor v(shape);
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor& t = g.val(p);
    std::copy(t.v.begin(), t.v.end(), v.v.begin() + off);
    off += t.size();
  }
  (void)inner;
  Var out = g.make(std::move(v), needs);
  if (g.needs_grad(out)) {
    std::vector<Var> ps = parts;
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      int64_t o = 0;
      for (Var p : ps) {
        int64_t n = gg.val(p).size();
        if (gg.needs_grad(p)) {
          Tensor& dp = gg.grad(p);
          for (int64_t i = 0; i < n; ++i) dp.v[size_t(i)] += dy.v[size_t(o + i)];
        }
        o += n;
      }
    });
  }
  return out;
}

inline Var concat_cols(Graph& g, const std::vector<Var>& parts) {
  require(!parts.empty(), errc::invalid_argument, "concat_cols: empty");
  int64_t rows = g.val(parts[0]).shape[0];
  int64_t cols = 0;
  bool needs = false;
  for (Var p : parts) {
    require(g.val(p).rank() == 2 && g.val(p).shape[0] == rows, errc::invalid_argument,
            "concat_cols: need 2D with equal rows");
    cols += g.val(p).shape[1];
    needs = needs || g.needs_grad(p);
  }
  Tensor v({rows, cols});
  int64_t off = 0;
  for (Var p : parts) {
    const Tensor& t = g.val(p);
    int64_t c = t.shape[1];
    for (int64_t i = 0; i < rows; ++i)
      std::copy_n(t.v.begin() + i * c, c, v.v.begin() + i * cols + off);
    off += c;
  }
  Var out = g.make(std::move(v), needs);
  if (g.needs_grad(out)) {
    std::vector<Var> ps = parts;
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      int64_t o = 0;
      for (Var p : ps) {
        int64_t c = gg.val(p).shape[1];
        if (gg.needs_grad(p)) {
          Tensor& dp = gg.grad(p);
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < c; ++j) dp.v[size_t(i * c + j)] += dy.v[size_t(i * cols + o + j)];
        }
        o += c;
      }
    });
  }
  return out;
}

// concat along axis 1 of [B, C, spatial...] tensors with matching B and spatial dims
inline Var concat_channels(Graph& g, const std::vector<Var>& parts) {
  require(!parts.empty(), errc::invalid_argument, "concat_channels: empty");
  std::vector<int64_t> shape = g.val(parts[0]).shape;
  require(shape.size() >= 3, errc::invalid_argument, "concat_channels: need [B,C,spatial]");
  int64_t B = shape[0];
  int64_t S = g.val(parts[0]).size() / (B * shape[1]);
  int64_t Csum = 0;
  bool needs = false;
  for (Var p : parts) {
    const Tensor& t = g.val(p);
    require(t.rank() == int(shape.size()) && t.shape[0] == B, errc::invalid_argument,
            "concat_channels: batch mismatch");
    for (size_t i = 2; i < shape.size(); ++i)
      require(t.shape[i] == shape[i], errc::invalid_argument, "concat_channels: spatial mismatch");
    Csum += t.shape[1];
    needs = needs || g.needs_grad(p);
  }
  shape[1] = Csum;
  Tensor v(shape);
  int64_t coff = 0;
  for (Var p : parts) {
    const Tensor& t = g.val(p);
    int64_t C = t.shape[1];
    for (int64_t b = 0; b < B; ++b)
      std::copy_n(t.v.begin() + b * C * S, C * S, v.v.begin() + (b * Csum + coff) * S);
    coff += C;
  }
  Var out = g.make(std::move(v), needs);
  if (g.needs_grad(out)) {
    std::vector<Var> ps = parts;
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      int64_t co = 0;
      for (Var p : ps) {
        int64_t C = gg.val(p).shape[1];
        if (gg.needs_grad(p)) {
          Tensor& dp = gg.grad(p);
          for (int64_t b = 0; b < B; ++b) {
            const double* src = dy.v.data() + (b * Csum + co) * S;
            double* dst = dp.v.data() + b * C * S;
            for (int64_t i = 0; i < C * S; ++i) dst[i] += src[i];
          }
        }
        co += C;
      }
    });
  }
  return out;
}

inline Var slice_cols(Graph& g, Var a, int64_t off, int64_t len) {
  const Tensor& x = g.val(a);
  require(x.rank() == 2 && off >= 0 && off + len <= x.shape[1], errc::invalid_argument,
          "slice_cols: out of range");
  int64_t rows = x.shape[0], cols = x.shape[1];
  Tensor v({rows, len});
  for (int64_t i = 0; i < rows; ++i)
    std::copy_n(x.v.begin() + i * cols + off, len, v.v.begin() + i * len);
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      Tensor& da = gg.grad(a);
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < len; ++j) da.v[size_t(i * cols + off + j)] += dy.v[size_t(i * len + j)];
    });
  return out;
}

// y[i,:] = x[idx[i],:]; duplicate indices accumulate in backward
inline Var index_rows(Graph& g, Var a, std::vector<int64_t> idx) {
  const Tensor& x = g.val(a);
  require(x.rank() == 2, errc::invalid_argument, "index_rows: need 2D");
  int64_t cols = x.shape[1];
  Tensor v({int64_t(idx.size()), cols});
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < x.shape[0], errc::invalid_argument, "index_rows: out of range");
    std::copy_n(x.v.begin() + idx[i] * cols, cols, v.v.begin() + int64_t(i) * cols);
  }
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=, ix = std::move(idx)](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      Tensor& da = gg.grad(a);
      for (size_t i = 0; i < ix.size(); ++i)
        for (int64_t j = 0; j < cols; ++j)
          da.v[size_t(ix[i] * cols + j)] += dy.v[size_t(int64_t(i) * cols + j)];
    });
  return out;
}

inline Var repeat_row(Graph& g, Var a, int64_t n) {
  const Tensor& x = g.val(a);
  require(x.rank() == 1, errc::invalid_argument, "repeat_row: need 1D");
  int64_t d = x.shape[0];
  Tensor v({n, d});
  for (int64_t i = 0; i < n; ++i) std::copy_n(x.v.begin(), d, v.v.begin() + i * d);
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      Tensor& da = gg.grad(a);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) da.v[size_t(j)] += dy.v[size_t(i * d + j)];
    });
  return out;
}

// ---- linear algebra ----------------------------------------------------------

inline Var matmul(Graph& g, Var a, Var b, bool ta = false, bool tb = false) {
  Tensor v = detail::mat_mul(g.val(a), g.val(b), ta, tb);
  Var out = g.make(std::move(v), g.needs_grad(a) || g.needs_grad(b));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      if (gg.needs_grad(a)) {
        Tensor da = ta ? detail::mat_mul(gg.val(b), dy, tb, true)
                       : detail::mat_mul(dy, gg.val(b), false, !tb);
        detail::accumulate(gg.grad(a), da);
      }
      if (gg.needs_grad(b)) {
        Tensor db = tb ? detail::mat_mul(dy, gg.val(a), true, ta)
                       : detail::mat_mul(gg.val(a), dy, !ta, false);
        detail::accumulate(gg.grad(b), db);
      }
    });
  return out;
}

inline Var add_bias(Graph& g, Var x, Var b) {
  const Tensor& xv = g.val(x);
  const Tensor& bv = g.val(b);
  require(xv.rank() == 2 && bv.rank() == 1 && bv.shape[0] == xv.shape[1], errc::invalid_argument,
          "add_bias: shape mismatch");
  Tensor v = xv;
  int64_t rows = xv.shape[0], d = xv.shape[1];
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < d; ++j) v.v[size_t(i * d + j)] += bv.v[size_t(j)];
  Var out = g.make(std::move(v), g.needs_grad(x) || g.needs_grad(b));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      if (gg.needs_grad(x)) detail::accumulate(gg.grad(x), dy);
      if (gg.needs_grad(b)) {
        Tensor& db = gg.grad(b);
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < d; ++j) db.v[size_t(j)] += dy.v[size_t(i * d + j)];
      }
    });
  return out;
}

// x: [rows, d] -> linear layer x W^T + b with W: [dout, d]
inline Var linear(Graph& g, Var x, Var w, Var b = Var{}) {
  Var y = matmul(g, x, w, false, true);
  if (b.valid()) y = add_bias(g, y, b);
  return y;
}

// ---- normalization and softmax ----------------------------------------------

inline Var softmax_rows(Graph& g, Var a) {
  const Tensor& x = g.val(a);
  require(x.rank() == 2, errc::invalid_argument, "softmax_rows: need 2D");
  int64_t n = x.shape[0], m = x.shape[1];
  Tensor v({n, m});
  for (int64_t i = 0; i < n; ++i) {
    const double* row = x.v.data() + i * m;
    double mx = row[0];
    for (int64_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    double* orow = v.v.data() + i * m;
    for (int64_t j = 0; j < m; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int64_t j = 0; j < m; ++j) orow[j] /= sum;
  }
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& y = gg.val(out);
      Tensor& da = gg.grad(a);
      for (int64_t i = 0; i < n; ++i) {
        const double* yr = y.v.data() + i * m;
        const double* dr = dy.v.data() + i * m;
        double dot = 0;
        for (int64_t j = 0; j < m; ++j) dot += yr[j] * dr[j];
        double* ar = da.v.data() + i * m;
        for (int64_t j = 0; j < m; ++j) ar[j] += yr[j] * (dr[j] - dot);
      }
    });
  return out;
}

// LayerNorm over the last axis of a 2D tensor
inline Var layer_norm(Graph& g, Var a, Var gamma, Var beta, double eps = 1e-6) {
  const Tensor& x = g.val(a);
  require(x.rank() == 2, errc::invalid_argument, "layer_norm: need 2D");
  int64_t n = x.shape[0], d = x.shape[1];
  require(g.val(gamma).size() == d && g.val(beta).size() == d, errc::invalid_argument,
          "layer_norm: affine size mismatch");
  Tensor v({n, d});
  Tensor xhat({n, d});
  Tensor rstd({n});
  for (int64_t i = 0; i < n; ++i) {
    const double* row = x.v.data() + i * d;
    double mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= double(d);
    double var = 0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= double(d);
    double rs = 1.0 / std::sqrt(var + eps);
    rstd.v[size_t(i)] = rs;
    for (int64_t j = 0; j < d; ++j) {
      double xh = (row[j] - mu) * rs;
      xhat.v[size_t(i * d + j)] = xh;
      v.v[size_t(i * d + j)] = xh * g.val(gamma).v[size_t(j)] + g.val(beta).v[size_t(j)];
    }
  }
  Var out = g.make(std::move(v), g.needs_grad(a) || g.needs_grad(gamma) || g.needs_grad(beta));
  if (g.needs_grad(out))
    g.set_backward(out, [=, xh = std::move(xhat), rs = std::move(rstd)](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& gam = gg.val(gamma);
      for (int64_t i = 0; i < n; ++i) {
        const double* dr = dy.v.data() + i * d;
        const double* xr = xh.v.data() + i * d;
        if (gg.needs_grad(gamma)) {
          Tensor& dg = gg.grad(gamma);
          for (int64_t j = 0; j < d; ++j) dg.v[size_t(j)] += dr[j] * xr[j];
        }
        if (gg.needs_grad(beta)) {
          Tensor& db = gg.grad(beta);
          for (int64_t j = 0; j < d; ++j) db.v[size_t(j)] += dr[j];
        }
        if (gg.needs_grad(a)) {
          double m1 = 0, m2 = 0;
          for (int64_t j = 0; j < d; ++j) {
            double dxh = dr[j] * gam.v[size_t(j)];
            m1 += dxh;
            m2 += dxh * xr[j];
          }
          m1 /= double(d);
          m2 /= double(d);
          Tensor& da = gg.grad(a);
          double* ar = da.v.data() + i * d;
          for (int64_t j = 0; j < d; ++j) {
            double dxh = dr[j] * gam.v[size_t(j)];
            ar[j] += rs.v[size_t(i)] * (dxh - m1 - xr[j] * m2);
          }
        }
      }
    });
  return out;
}

// InstanceNorm over spatial dims of [B, C, spatial...], affine per channel
inline Var instance_norm(Graph& g, Var a, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& x = g.val(a);
  require(x.rank() >= 3, errc::invalid_argument, "instance_norm: need [B,C,spatial]");
  int64_t B = x.shape[0], C = x.shape[1];
  int64_t S = x.size() / (B * C);
  Tensor v(x.shape);
  Tensor xhat(x.shape);
  Tensor rstd({B * C});
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const double* row = x.v.data() + bc * S;
    double mu = 0;
    for (int64_t s = 0; s < S; ++s) mu += row[s];
    mu /= double(S);
    double var = 0;
    for (int64_t s = 0; s < S; ++s) var += (row[s] - mu) * (row[s] - mu);
    var /= double(S);
    double rs = 1.0 / std::sqrt(var + eps);
    rstd.v[size_t(bc)] = rs;
    int64_t c = bc % C;
    double gm = g.val(gamma).v[size_t(c)], bt = g.val(beta).v[size_t(c)];
    for (int64_t s = 0; s < S; ++s) {
      double xh = (row[s] - mu) * rs;
      xhat.v[size_t(bc * S + s)] = xh;
      v.v[size_t(bc * S + s)] = xh * gm + bt;
    }
  }
  Var out = g.make(std::move(v), g.needs_grad(a) || g.needs_grad(gamma) || g.needs_grad(beta));
  if (g.needs_grad(out))
    g.set_backward(out, [=, xh = std::move(xhat), rs = std::move(rstd)](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& gam = gg.val(gamma);
      for (int64_t bc = 0; bc < B * C; ++bc) {
        const double* dr = dy.v.data() + bc * S;
        const double* xr = xh.v.data() + bc * S;
        int64_t c = bc % C;
        if (gg.needs_grad(gamma)) {
          double acc = 0;
          for (int64_t s = 0; s < S; ++s) acc += dr[s] * xr[s];
          gg.grad(gamma).v[size_t(c)] += acc;
        }
        if (gg.needs_grad(beta)) {
          double acc = 0;
          for (int64_t s = 0; s < S; ++s) acc += dr[s];
          gg.grad(beta).v[size_t(c)] += acc;
        }
        if (gg.needs_grad(a)) {
          double m1 = 0, m2 = 0;
          double gm = gam.v[size_t(c)];
          for (int64_t s = 0; s < S; ++s) {
            double dxh = dr[s] * gm;
            m1 += dxh;
            m2 += dxh * xr[s];
          }
          m1 /= double(S);
          m2 /= double(S);
          double* ar = gg.grad(a).v.data() + bc * S;
          for (int64_t s = 0; s < S; ++s) {
            double dxh = dr[s] * gm;
            ar[s] += rs.v[size_t(bc)] * (dxh - m1 - xr[s] * m2);
          }
        }
      }
    });
  return out;
}

// ---- reductions ---------------------------------------------------------------

inline Var sum_all(Graph& g, Var a) {
  double s = 0;
  for (double x : g.val(a).v) s += x;
  Tensor v({1});
  v.v[0] = s;
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      double dy = gg.grad(out).v[0];
      Tensor& da = gg.grad(a);
      for (auto& x : da.v) x += dy;
    });
  return out;
}

inline Var mean_all(Graph& g, Var a) {
  return scale(g, sum_all(g, a), 1.0 / double(g.val(a).size()));
}

inline Var colsum(Graph& g, Var a) {
  const Tensor& x = g.val(a);
  require(x.rank() == 2, errc::invalid_argument, "colsum: need 2D");
  int64_t n = x.shape[0], d = x.shape[1];
  Tensor v({d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) v.v[size_t(j)] += x.v[size_t(i * d + j)];
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      Tensor& da = gg.grad(a);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) da.v[size_t(i * d + j)] += dy.v[size_t(j)];
    });
  return out;
}

inline Var mean_rows(Graph& g, Var a) {
  return scale(g, colsum(g, a), 1.0 / double(g.val(a).shape[0]));
}

// ---- convolutions --------------------------------------------------------------

// x: [B, Cin, H, W], w: [Cout, Cin, kh, kw]
inline Var conv2d(Graph& g, Var xv, Var wv, int stride, int pad) {
  const Tensor& x = g.val(xv);
  const Tensor& w = g.val(wv);
  require(x.rank() == 4 && w.rank() == 4 && x.shape[1] == w.shape[1], errc::invalid_argument,
          "conv2d: shape mismatch");
  int64_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  int64_t Co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  require(Ho > 0 && Wo > 0, errc::invalid_argument, "conv2d: output collapsed");
  Tensor v({B, Co, Ho, Wo});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t i = 0; i < Ho; ++i)
        for (int64_t j = 0; j < Wo; ++j) {
          double acc = 0;
          for (int64_t ci = 0; ci < Ci; ++ci)
            for (int64_t u = 0; u < kh; ++u) {
              int64_t ii = i * stride - pad + u;
              if (ii < 0 || ii >= H) continue;
              const double* xrow = x.v.data() + ((b * Ci + ci) * H + ii) * W;
              const double* wrow = w.v.data() + ((co * Ci + ci) * kh + u) * kw;
              for (int64_t vk = 0; vk < kw; ++vk) {
                int64_t jj = j * stride - pad + vk;
                if (jj < 0 || jj >= W) continue;
                acc += xrow[jj] * wrow[vk];
              }
            }
          v.v[size_t(((b * Co + co) * Ho + i) * Wo + j)] = acc;
        }
  Var out = g.make(std::move(v), g.needs_grad(xv) || g.needs_grad(wv));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& xx = gg.val(xv);
      const Tensor& ww = gg.val(wv);
      bool gx = gg.needs_grad(xv), gw = gg.needs_grad(wv);
      Tensor* dx = gx ? &gg.grad(xv) : nullptr;
      Tensor* dw = gw ? &gg.grad(wv) : nullptr;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Co; ++co)
          for (int64_t i = 0; i < Ho; ++i)
            for (int64_t j = 0; j < Wo; ++j) {
              double gy = dy.v[size_t(((b * Co + co) * Ho + i) * Wo + j)];
              if (gy == 0.0) continue;
              for (int64_t ci = 0; ci < Ci; ++ci)
                for (int64_t u = 0; u < kh; ++u) {
                  int64_t ii = i * stride - pad + u;
                  if (ii < 0 || ii >= H) continue;
                  for (int64_t vk = 0; vk < kw; ++vk) {
                    int64_t jj = j * stride - pad + vk;
                    if (jj < 0 || jj >= W) continue;
                    size_t xi = size_t(((b * Ci + ci) * H + ii) * W + jj);
                    size_t wi = size_t(((co * Ci + ci) * kh + u) * kw + vk);
                    if (gx) dx->v[xi] += gy * ww.v[wi];
                    if (gw) dw->v[wi] += gy * xx.v[xi];
                  }
                }
            }
    });
  return out;
}

// x: [B, Cin, H, W], w: [Cin, Cout, k, k], stride == k (exact upsample)
inline Var conv_transpose2d(Graph& g, Var xv, Var wv, int stride) {
  const Tensor& x = g.val(xv);
  const Tensor& w = g.val(wv);
  require(x.rank() == 4 && w.rank() == 4 && x.shape[1] == w.shape[0], errc::invalid_argument,
          "conv_transpose2d: shape mismatch");
  require(w.shape[2] == stride && w.shape[3] == stride, errc::invalid_argument,
          "conv_transpose2d: kernel must equal stride");
  int64_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  int64_t Co = w.shape[1], k = w.shape[2];
  Tensor v({B, Co, H * k, W * k});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t ci = 0; ci < Ci; ++ci)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
          double xval = x.v[size_t(((b * Ci + ci) * H + i) * W + j)];
          if (xval == 0.0) continue;
          for (int64_t co = 0; co < Co; ++co)
            for (int64_t u = 0; u < k; ++u) {
              double* orow = v.v.data() + ((b * Co + co) * H * k + i * k + u) * W * k;
              const double* wrow = w.v.data() + ((ci * Co + co) * k + u) * k;
              for (int64_t vk = 0; vk < k; ++vk) orow[j * k + vk] += xval * wrow[vk];
            }
        }
  Var out = g.make(std::move(v), g.needs_grad(xv) || g.needs_grad(wv));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& xx = gg.val(xv);
      const Tensor& ww = gg.val(wv);
      bool gx = gg.needs_grad(xv), gw = gg.needs_grad(wv);
      Tensor* dx = gx ? &gg.grad(xv) : nullptr;
      Tensor* dw = gw ? &gg.grad(wv) : nullptr;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t ci = 0; ci < Ci; ++ci)
          for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
              size_t xi = size_t(((b * Ci + ci) * H + i) * W + j);
              double xval = xx.v[xi];
              double accx = 0;
              for (int64_t co = 0; co < Co; ++co)
                for (int64_t u = 0; u < k; ++u) {
                  const double* dyrow =
                      dy.v.data() + ((b * Co + co) * H * k + i * k + u) * W * k;
                  const double* wrow = ww.v.data() + ((ci * Co + co) * k + u) * k;
                  for (int64_t vk = 0; vk < k; ++vk) {
                    double gy = dyrow[j * k + vk];
                    accx += gy * wrow[vk];
                    if (gw) dw->v[size_t(((ci * Co + co) * k + u) * k + vk)] += gy * xval;
                  }
                }
              if (gx) dx->v[xi] += accx;
            }
    });
  return out;
}

// x: [B, Cin, D, H, W], w: [Cout, Cin, kd, kh, kw]; stride/pad per axis (d, h, w)
inline Var conv3d(Graph& g, Var xv, Var wv, std::array<int, 3> stride, std::array<int, 3> pad) {
  const Tensor& x = g.val(xv);
  const Tensor& w = g.val(wv);
  require(x.rank() == 5 && w.rank() == 5 && x.shape[1] == w.shape[1], errc::invalid_argument,
          "conv3d: shape mismatch");
  int64_t B = x.shape[0], Ci = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4];
  int64_t Co = w.shape[0], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4];
  int sd = stride[0], sh = stride[1], sw = stride[2];
  int pd = pad[0], ph = pad[1], pw = pad[2];
  require(sd > 0 && sh > 0 && sw > 0, errc::invalid_argument, "conv3d: non-positive stride");
  int64_t Do = (D + 2 * pd - kd) / sd + 1;
  int64_t Ho = (H + 2 * ph - kh) / sh + 1;
  int64_t Wo = (W + 2 * pw - kw) / sw + 1;
  require(Do > 0 && Ho > 0 && Wo > 0, errc::invalid_argument, "conv3d: output collapsed");
  Tensor v({B, Co, Do, Ho, Wo});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t dd = 0; dd < Do; ++dd)
        for (int64_t i = 0; i < Ho; ++i)
          for (int64_t j = 0; j < Wo; ++j) {
            double acc = 0;
            for (int64_t ci = 0; ci < Ci; ++ci)
              for (int64_t t = 0; t < kd; ++t) {
                int64_t zz = dd * sd - pd + t;
                if (zz < 0 || zz >= D) continue;
                for (int64_t u = 0; u < kh; ++u) {
                  int64_t ii = i * sh - ph + u;
                  if (ii < 0 || ii >= H) continue;
                  const double* xrow = x.v.data() + (((b * Ci + ci) * D + zz) * H + ii) * W;
                  const double* wrow = w.v.data() + (((co * Ci + ci) * kd + t) * kh + u) * kw;
                  for (int64_t vk = 0; vk < kw; ++vk) {
                    int64_t jj = j * sw - pw + vk;
                    if (jj < 0 || jj >= W) continue;
                    acc += xrow[jj] * wrow[vk];
                  }
                }
              }
            v.v[size_t((((b * Co + co) * Do + dd) * Ho + i) * Wo + j)] = acc;
          }
  Var out = g.make(std::move(v), g.needs_grad(xv) || g.needs_grad(wv));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& xx = gg.val(xv);
      const Tensor& ww = gg.val(wv);
      bool gx = gg.needs_grad(xv), gw = gg.needs_grad(wv);
      Tensor* dx = gx ? &gg.grad(xv) : nullptr;
      Tensor* dw = gw ? &gg.grad(wv) : nullptr;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Co; ++co)
          for (int64_t dd = 0; dd < Do; ++dd)
            for (int64_t i = 0; i < Ho; ++i)
              for (int64_t j = 0; j < Wo; ++j) {
                double gy = dy.v[size_t((((b * Co + co) * Do + dd) * Ho + i) * Wo + j)];
                if (gy == 0.0) continue;
                for (int64_t ci = 0; ci < Ci; ++ci)
                  for (int64_t t = 0; t < kd; ++t) {
                    int64_t zz = dd * sd - pd + t;
                    if (zz < 0 || zz >= D) continue;
                    for (int64_t u = 0; u < kh; ++u) {
                      int64_t ii = i * sh - ph + u;
                      if (ii < 0 || ii >= H) continue;
                      for (int64_t vk = 0; vk < kw; ++vk) {
                        int64_t jj = j * sw - pw + vk;
                        if (jj < 0 || jj >= W) continue;
                        size_t xi = size_t((((b * Ci + ci) * D + zz) * H + ii) * W + jj);
                        size_t wi = size_t((((co * Ci + ci) * kd + t) * kh + u) * kw + vk);
                        if (gx) dx->v[xi] += gy * ww.v[wi];
                        if (gw) dw->v[wi] += gy * xx.v[xi];
                      }
                    }
                  }
              }
    });
  return out;
}

inline Var conv3d(Graph& g, Var xv, Var wv, int stride, int pad) {
  return conv3d(g, xv, wv, {stride, stride, stride}, {pad, pad, pad});
}

// x: [B, Cin, D, H, W], w: [Cin, Cout, kd, kh, kw], per-axis stride == kernel
inline Var conv_transpose3d(Graph& g, Var xv, Var wv, std::array<int, 3> stride) {
  const Tensor& x = g.val(xv);
  const Tensor& w = g.val(wv);
  require(x.rank() == 5 && w.rank() == 5 && x.shape[1] == w.shape[0], errc::invalid_argument,
          "conv_transpose3d: shape mismatch");
  require(w.shape[2] == stride[0] && w.shape[3] == stride[1] && w.shape[4] == stride[2],
          errc::invalid_argument, "conv_transpose3d: kernel must equal stride");
  int64_t B = x.shape[0], Ci = x.shape[1], D = x.shape[2], H = x.shape[3], W = x.shape[4];
  int64_t Co = w.shape[1], kd = w.shape[2], kh = w.shape[3], kw = w.shape[4];
  Tensor v({B, Co, D * kd, H * kh, W * kw});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t ci = 0; ci < Ci; ++ci)
      for (int64_t z = 0; z < D; ++z)
        for (int64_t i = 0; i < H; ++i)
          for (int64_t j = 0; j < W; ++j) {
            double xval = x.v[size_t((((b * Ci + ci) * D + z) * H + i) * W + j)];
            if (xval == 0.0) continue;
            for (int64_t co = 0; co < Co; ++co)
              for (int64_t t = 0; t < kd; ++t)
                for (int64_t u = 0; u < kh; ++u) {
                  double* orow =
                      v.v.data() +
                      (((b * Co + co) * D * kd + z * kd + t) * H * kh + i * kh + u) * W * kw;
                  const double* wrow = w.v.data() + (((ci * Co + co) * kd + t) * kh + u) * kw;
                  for (int64_t vk = 0; vk < kw; ++vk) orow[j * kw + vk] += xval * wrow[vk];
                }
          }
  Var out = g.make(std::move(v), g.needs_grad(xv) || g.needs_grad(wv));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      const Tensor& xx = gg.val(xv);
      const Tensor& ww = gg.val(wv);
      bool gx = gg.needs_grad(xv), gw = gg.needs_grad(wv);
      Tensor* dx = gx ? &gg.grad(xv) : nullptr;
      Tensor* dw = gw ? &gg.grad(wv) : nullptr;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t ci = 0; ci < Ci; ++ci)
          for (int64_t z = 0; z < D; ++z)
            for (int64_t i = 0; i < H; ++i)
              for (int64_t j = 0; j < W; ++j) {
                size_t xi = size_t((((b * Ci + ci) * D + z) * H + i) * W + j);
                double xval = xx.v[xi];
                double accx = 0;
                for (int64_t co = 0; co < Co; ++co)
                  for (int64_t t = 0; t < kd; ++t)
                    for (int64_t u = 0; u < kh; ++u) {
                      const double* dyrow =
                          dy.v.data() +
                          (((b * Co + co) * D * kd + z * kd + t) * H * kh + i * kh + u) * W * kw;
                      const double* wrow = ww.v.data() + (((ci * Co + co) * kd + t) * kh + u) * kw;
                      for (int64_t vk = 0; vk < kw; ++vk) {
                        double gy = dyrow[j * kw + vk];
                        accx += gy * wrow[vk];
                        if (gw)
                          dw->v[size_t((((ci * Co + co) * kd + t) * kh + u) * kw + vk)] +=
                              gy * xval;
                      }
                    }
                if (gx) dx->v[xi] += accx;
              }
    });
  return out;
}

inline Var conv_transpose3d(Graph& g, Var xv, Var wv, int stride) {
  return conv_transpose3d(g, xv, wv, {stride, stride, stride});
}

inline Var add_channel_bias(Graph& g, Var x, Var b) {
  const Tensor& xv = g.val(x);
  const Tensor& bv = g.val(b);
  require(xv.rank() >= 2 && bv.rank() == 1 && bv.shape[0] == xv.shape[1], errc::invalid_argument,
          "add_channel_bias: shape mismatch");
  int64_t B = xv.shape[0], C = xv.shape[1];
  int64_t S = xv.size() / (B * C);
  Tensor v = xv;
  for (int64_t bb = 0; bb < B; ++bb)
    for (int64_t c = 0; c < C; ++c) {
      double bias = bv.v[size_t(c)];
      double* row = v.v.data() + (bb * C + c) * S;
      for (int64_t s = 0; s < S; ++s) row[s] += bias;
    }
  Var out = g.make(std::move(v), g.needs_grad(x) || g.needs_grad(b));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      if (gg.needs_grad(x)) detail::accumulate(gg.grad(x), dy);
      if (gg.needs_grad(b)) {
        Tensor& db = gg.grad(b);
        for (int64_t bb = 0; bb < B; ++bb)
          for (int64_t c = 0; c < C; ++c) {
            const double* row = dy.v.data() + (bb * C + c) * S;
            double acc = 0;
            for (int64_t s = 0; s < S; ++s) acc += row[s];
            db.v[size_t(c)] += acc;
          }
      }
    });
  return out;
}

// mean pooling over non-overlapping k x k blocks; x: [B, C, H, W]
inline Var avgpool2d(Graph& g, Var a, int k) {
  const Tensor& x = g.val(a);
  require(x.rank() == 4 && x.shape[2] % k == 0 && x.shape[3] % k == 0, errc::invalid_argument,
          "avgpool2d: extent not divisible by window");
  int64_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  int64_t Ho = H / k, Wo = W / k;
  Tensor v({B, C, Ho, Wo});
  double inv = 1.0 / double(k * k);
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t i = 0; i < Ho; ++i)
      for (int64_t j = 0; j < Wo; ++j) {
        double acc = 0;
        for (int64_t u = 0; u < k; ++u) {
          const double* row = x.v.data() + (bc * H + i * k + u) * W;
          for (int64_t vk = 0; vk < k; ++vk) acc += row[j * k + vk];
        }
        v.v[size_t((bc * Ho + i) * Wo + j)] = acc * inv;
      }
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      Tensor& da = gg.grad(a);
      for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t i = 0; i < Ho; ++i)
          for (int64_t j = 0; j < Wo; ++j) {
            double gy = dy.v[size_t((bc * Ho + i) * Wo + j)] * inv;
            for (int64_t u = 0; u < k; ++u) {
              double* row = da.v.data() + (bc * H + i * k + u) * W;
              for (int64_t vk = 0; vk < k; ++vk) row[j * k + vk] += gy;
            }
          }
    });
  return out;
}

// multiply by a 0/1 keep mask broadcast over the channel axis; x: [B, C, H, W]
inline Var zero_masked(Graph& g, Var a, const NdArray<uint8_t>& keep) {
  const Tensor& x = g.val(a);
  require(x.rank() == 4, errc::invalid_argument, "zero_masked: need [B,C,H,W]");
  require(keep.shape == std::vector<int64_t>({x.shape[0], x.shape[2], x.shape[3]}),
          errc::invalid_argument, "zero_masked: mask shape mismatch");
  int64_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  Tensor v = x;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < H; ++i) {
        const uint8_t* mrow = keep.v.data() + (b * H + i) * W;
        double* row = v.v.data() + ((b * C + c) * H + i) * W;
        for (int64_t j = 0; j < W; ++j)
          if (!mrow[j]) row[j] = 0.0;
      }
  Var out = g.make(std::move(v), g.needs_grad(a));
  if (g.needs_grad(out))
    g.set_backward(out, [=, m = keep](Graph& gg) {
      const Tensor& dy = gg.grad(out);
      Tensor& da = gg.grad(a);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
          for (int64_t i = 0; i < H; ++i) {
            const uint8_t* mrow = m.v.data() + (b * H + i) * W;
            const double* dyr = dy.v.data() + ((b * C + c) * H + i) * W;
            double* dar = da.v.data() + ((b * C + c) * H + i) * W;
            for (int64_t j = 0; j < W; ++j)
              if (mrow[j]) dar[j] += dyr[j];
          }
    });
  return out;
}

// ---- fused losses ----------------------------------------------------------------

// -(1/n) sum_rows sum_c t[c] * log softmax(logits)[c], targets rows sum to 1
inline Var ce_softmax(Graph& g, Var logits, const Tensor& targets) {
  const Tensor& x = g.val(logits);
  require(x.rank() == 2 && x.same_shape(targets), errc::invalid_argument,
          "ce_softmax: shape mismatch");
  int64_t n = x.shape[0], C = x.shape[1];
  Tensor probs({n, C});
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = x.v.data() + i * C;
    double mx = row[0];
    for (int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    double sum = 0;
    for (int64_t j = 0; j < C; ++j) sum += std::exp(row[j] - mx);
    double lse = mx + std::log(sum);
    for (int64_t j = 0; j < C; ++j) {
      probs.v[size_t(i * C + j)] = std::exp(row[j] - lse);
      loss -= targets.v[size_t(i * C + j)] * (row[j] - lse);
    }
  }
  Tensor v({1});
  v.v[0] = loss / double(n);
  Var out = g.make(std::move(v), g.needs_grad(logits));
  if (g.needs_grad(out))
    g.set_backward(out, [=, p = std::move(probs), t = targets](Graph& gg) {
      double dy = gg.grad(out).v[0];
      Tensor& dl = gg.grad(logits);
      for (int64_t i = 0; i < n * C; ++i)
        dl.v[size_t(i)] += dy * (p.v[size_t(i)] - t.v[size_t(i)]) / double(n);
    });
  return out;
}

// mean over elements of binary cross-entropy with logits
inline Var bce_sigmoid(Graph& g, Var logits, const Tensor& targets) {
  const Tensor& x = g.val(logits);
  require(x.same_shape(targets), errc::invalid_argument, "bce_sigmoid: shape mismatch");
  int64_t n = x.size();
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    double xv = x.v[size_t(i)], t = targets.v[size_t(i)];
    loss += std::max(xv, 0.0) - xv * t + std::log1p(std::exp(-std::abs(xv)));
  }
  Tensor v({1});
  v.v[0] = loss / double(n);
  Var out = g.make(std::move(v), g.needs_grad(logits));
  if (g.needs_grad(out))
    g.set_backward(out, [=, t = targets](Graph& gg) {
      double dy = gg.grad(out).v[0];
      const Tensor& xx = gg.val(logits);
      Tensor& dl = gg.grad(logits);
      for (int64_t i = 0; i < n; ++i) {
        double s = 1.0 / (1.0 + std::exp(-xx.v[size_t(i)]));
        dl.v[size_t(i)] += dy * (s - t.v[size_t(i)]) / double(n);
      }
    });
  return out;
}

// mean squared error against a constant target
inline Var mse_against(Graph& g, Var pred, const Tensor& target) {
  const Tensor& x = g.val(pred);
  require(x.same_shape(target), errc::invalid_argument, "mse_against: shape mismatch");
  int64_t n = x.size();
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    double d = x.v[size_t(i)] - target.v[size_t(i)];
    loss += d * d;
  }
  Tensor v({1});
  v.v[0] = loss / double(n);
  Var out = g.make(std::move(v), g.needs_grad(pred));
  if (g.needs_grad(out))
    g.set_backward(out, [=, t = target](Graph& gg) {
      double dy = gg.grad(out).v[0];
      const Tensor& xx = gg.val(pred);
      Tensor& dl = gg.grad(pred);
      for (int64_t i = 0; i < n; ++i)
        dl.v[size_t(i)] += dy * 2.0 * (xx.v[size_t(i)] - t.v[size_t(i)]) / double(n);
    });
  return out;
}

// wing(x) = w ln(1 + |x|/eps) for |x| < w, else |x| - C, mean over elements
inline Var wing_against(Graph& g, Var pred, const Tensor& target, double w, double eps) {
  const Tensor& x = g.val(pred);
  require(x.same_shape(target), errc::invalid_argument, "wing_against: shape mismatch");
  int64_t n = x.size();
  double C = w - w * std::log(1.0 + w / eps);
  double loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    double d = std::abs(x.v[size_t(i)] - target.v[size_t(i)]);
    loss += d < w ? w * std::log(1.0 + d / eps) : d - C;
  }
  Tensor v({1});
  v.v[0] = loss / double(n);
  Var out = g.make(std::move(v), g.needs_grad(pred));
  if (g.needs_grad(out))
    g.set_backward(out, [=, t = target](Graph& gg) {
      double dy = gg.grad(out).v[0];
      const Tensor& xx = gg.val(pred);
      Tensor& dl = gg.grad(pred);
      for (int64_t i = 0; i < n; ++i) {
        double d = xx.v[size_t(i)] - t.v[size_t(i)];
        double ad = std::abs(d);
        double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        double slope = ad < w ? w / (eps + ad) : 1.0;
        dl.v[size_t(i)] += dy * sgn * slope / double(n);
      }
    });
  return out;
}

}  // namespace cinema::nn
