#include "calliope/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <utility>

#include "calliope/rng.hpp"

namespace calliope {

namespace {

template <typename S>
bool all_finite(const TensorT<S>& t) {
  for (S x : t.data) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

// c = a * b
template <typename S>
TensorT<S> mm(const TensorT<S>& a, const TensorT<S>& b) {
  const int m = a.rows(), k = a.cols(), n = b.cols();
  TensorT<S> c = TensorT<S>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const S* arow = a.row_ptr(i);
    S* crow = c.row_ptr(i);
    for (int l = 0; l < k; ++l) {
      const S ail = arow[l];
      if (ail == S(0)) continue;
      const S* brow = b.row_ptr(l);
      for (int j = 0; j < n; ++j) crow[j] += ail * brow[j];
    }
  }
  return c;
}

// c = a * b^T
template <typename S>
TensorT<S> mm_nt(const TensorT<S>& a, const TensorT<S>& b) {
  const int m = a.rows(), k = a.cols(), n = b.rows();
  TensorT<S> c = TensorT<S>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const S* arow = a.row_ptr(i);
    S* crow = c.row_ptr(i);
    for (int j = 0; j < n; ++j) {
      const S* brow = b.row_ptr(j);
      S acc = S(0);
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] = acc;
    }
  }
  return c;
}

// c = a^T * b
template <typename S>
TensorT<S> mm_tn(const TensorT<S>& a, const TensorT<S>& b) {
  const int m = a.cols(), k = a.rows(), n = b.cols();
  TensorT<S> c = TensorT<S>::zeros({m, n});
  for (int l = 0; l < k; ++l) {
    const S* arow = a.row_ptr(l);
    const S* brow = b.row_ptr(l);
    for (int i = 0; i < m; ++i) {
      const S ali = arow[i];
      if (ali == S(0)) continue;
      S* crow = c.row_ptr(i);
      for (int j = 0; j < n; ++j) crow[j] += ali * brow[j];
    }
  }
  return c;
}

template <typename S>
S stable_sigmoid(S x) {
  if (x >= S(0)) {
    const S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <typename S>
S stable_softplus(S x) {
  const S m = x > S(0) ? x : S(0);
  return m + std::log1p(std::exp(-std::abs(x)));
}

constexpr double kLayerNormEps = 1e-6;

}  // namespace

template <typename S>
Var GraphT<S>::leaf(TensorT<S> value, bool requires_grad) {
  if (!all_finite(value)) throw NonFiniteValue("leaf: non-finite value");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
const TensorT<S>& GraphT<S>::value(Var v) const {
  return nodes_.at(v.id).value;
}

template <typename S>
TensorT<S> GraphT<S>::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.data.empty()) return TensorT<S>::zeros(n.value.shape);
  return n.grad;
}

template <typename S>
bool GraphT<S>::requires_grad(Var v) const {
  return nodes_.at(v.id).requires_grad;
}

template <typename S>
bool GraphT<S>::any_requires(const std::vector<int>& ids) const {
  for (int id : ids) {
    if (nodes_[id].requires_grad) return true;
  }
  return false;
}

template <typename S>
Var GraphT<S>::add_node(TensorT<S> value, std::vector<int> inputs,
                        std::function<void(GraphT&)> bw, const char* op) {
  if (!all_finite(value)) {
    throw NonFiniteValue(std::string(op) + ": non-finite value in output");
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && any_requires(inputs);
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.bw = std::move(bw);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
TensorT<S>& GraphT<S>::grad_buf(int id) {
  Node& n = nodes_[id];
  if (n.grad.data.empty()) n.grad = TensorT<S>::zeros(n.value.shape);
  return n.grad;
}

template <typename S>
bool GraphT<S>::grad_present(int id) const {
  return !nodes_[id].grad.data.empty();
}

template <typename S>
void GraphT<S>::accum(int id, const TensorT<S>& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  TensorT<S>& buf = grad_buf(id);
  for (std::size_t i = 0; i < buf.data.size(); ++i) buf.data[i] += g.data[i];
}

template <typename S>
void GraphT<S>::backward(Var loss) {
  Node& l = nodes_.at(loss.id);
  if (!l.value.is_scalar()) throw NotScalar("backward: loss is not scalar");
  if (!l.requires_grad) return;  // nothing depends on a parameter
  grad_buf(loss.id).data[0] = S(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.bw && grad_present(i)) n.bw(*this);
  }
}

// ---- ops ----

template <typename S>
Var GraphT<S>::matmul(Var a, Var b) {
  const TensorT<S>& av = val(a.id);
  const TensorT<S>& bv = val(b.id);
  if (av.cols() != bv.rows()) {
    throw ShapeMismatch("matmul: " + shape_string(av) + " x " +
                        shape_string(bv));
  }
  TensorT<S> out = mm(av, bv);
  const int out_id = static_cast<int>(nodes_.size());
  const int aid = a.id, bid = b.id;
  return add_node(std::move(out), {aid, bid},
                  [aid, bid, out_id](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    if (g.nodes_[aid].requires_grad) {
                      g.accum(aid, mm_nt(dc, g.val(bid)));
                    }
                    if (g.nodes_[bid].requires_grad) {
                      g.accum(bid, mm_tn(g.val(aid), dc));
                    }
                  },
                  "matmul");
}

template <typename S>
Var GraphT<S>::transpose(Var a) {
  const TensorT<S>& av = val(a.id);
  const int m = av.rows(), n = av.cols();
  TensorT<S> out = TensorT<S>::zeros({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  }
  const int out_id = static_cast<int>(nodes_.size());
  const int aid = a.id;
  return add_node(std::move(out), {aid},
                  [aid, out_id, m, n](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    TensorT<S> da = TensorT<S>::zeros({m, n});
                    for (int i = 0; i < m; ++i) {
                      for (int j = 0; j < n; ++j) da.at(i, j) = dc.at(j, i);
                    }
                    g.accum(aid, da);
                  },
                  "transpose");
}

template <typename S>
Var GraphT<S>::add(Var a, Var b) {
  const TensorT<S>& av = val(a.id);
  const TensorT<S>& bv = val(b.id);
  if (!av.same_shape(bv)) {
    throw ShapeMismatch("add: " + shape_string(av) + " vs " + shape_string(bv));
  }
  TensorT<S> out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  const int out_id = static_cast<int>(nodes_.size());
  const int aid = a.id, bid = b.id;
  return add_node(std::move(out), {aid, bid},
                  [aid, bid, out_id](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    g.accum(aid, dc);
                    g.accum(bid, dc);
                  },
                  "add");
}

template <typename S>
Var GraphT<S>::sub(Var a, Var b) {
  const TensorT<S>& av = val(a.id);
  const TensorT<S>& bv = val(b.id);
  if (!av.same_shape(bv)) {
    throw ShapeMismatch("sub: " + shape_string(av) + " vs " + shape_string(bv));
  }
  TensorT<S> out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
  const int out_id = static_cast<int>(nodes_.size());
  const int aid = a.id, bid = b.id;
  return add_node(std::move(out), {aid, bid},
                  [aid, bid, out_id](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    g.accum(aid, dc);
                    if (g.nodes_[bid].requires_grad) {
                      TensorT<S> neg = dc;
                      for (auto& x : neg.data) x = -x;
                      g.accum(bid, neg);
                    }
                  },
                  "sub");
}

template <typename S>
Var GraphT<S>::mul(Var a, Var b) {
  const TensorT<S>& av = val(a.id);
  const TensorT<S>& bv = val(b.id);
  if (!av.same_shape(bv)) {
    throw ShapeMismatch("mul: " + shape_string(av) + " vs " + shape_string(bv));
  }
  TensorT<S> out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  const int out_id = static_cast<int>(nodes_.size());
  const int aid = a.id, bid = b.id;
  return add_node(std::move(out), {aid, bid},
                  [aid, bid, out_id](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    if (g.nodes_[aid].requires_grad) {
                      TensorT<S> da = dc;
                      const TensorT<S>& bvv = g.val(bid);
                      for (std::size_t i = 0; i < da.data.size(); ++i) {
                        da.data[i] *= bvv.data[i];
                      }
                      g.accum(aid, da);
                    }
                    if (g.nodes_[bid].requires_grad) {
                      TensorT<S> db = dc;
                      const TensorT<S>& avv = g.val(aid);
                      for (std::size_t i = 0; i < db.data.size(); ++i) {
                        db.data[i] *= avv.data[i];
                      }
                      g.accum(bid, db);
                    }
                  },
                  "mul");
}

template <typename S>
Var GraphT<S>::scale(Var a, S c) {
  TensorT<S> out = val(a.id);
  for (auto& x : out.data) x *= c;
  const int out_id = static_cast<int>(nodes_.size());
  const int aid = a.id;
  return add_node(std::move(out), {aid},
                  [aid, out_id, c](GraphT& g) {
                    TensorT<S> da = g.nodes_[out_id].grad;
                    for (auto& x : da.data) x *= c;
                    g.accum(aid, da);
                  },
                  "scale");
}

template <typename S>
Var GraphT<S>::add_rowvec(Var a, Var b) {
  const TensorT<S>& av = val(a.id);
  const TensorT<S>& bv = val(b.id);
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw ShapeMismatch("add_rowvec: " + shape_string(av) + " + " +
                        shape_string(bv));
  }
  TensorT<S> out = av;
  const int m = av.rows(), n = av.cols();
  for (int i = 0; i < m; ++i) {
    S* row = out.row_ptr(i);
    for (int j = 0; j < n; ++j) row[j] += bv.data[j];
  }
  const int out_id = static_cast<int>(nodes_.size());
  const int aid = a.id, bid = b.id;
  return add_node(std::move(out), {aid, bid},
                  [aid, bid, out_id, m, n](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    g.accum(aid, dc);
                    if (g.nodes_[bid].requires_grad) {
                      TensorT<S> db = TensorT<S>::zeros({1, n});
                      for (int i = 0; i < m; ++i) {
                        const S* row = dc.row_ptr(i);
                        for (int j = 0; j < n; ++j) db.data[j] += row[j];
                      }
                      g.accum(bid, db);
                    }
                  },
                  "add_rowvec");
}

template <typename S>
Var GraphT<S>::linear(Var x, Var w, Var b) {
  Var y = matmul(x, w);
  if (b.id < 0) return y;
  return add_rowvec(y, b);
}

template <typename S>
Var GraphT<S>::embedding_lookup(Var table, const std::vector<int>& ids) {
  const TensorT<S>& tv = val(table.id);
  const int vocab = tv.rows(), d = tv.cols();
  const int L = static_cast<int>(ids.size());
  if (L == 0) throw ShapeMismatch("embedding_lookup: empty id list");
  TensorT<S> out = TensorT<S>::zeros({L, d});
  for (int i = 0; i < L; ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw ShapeMismatch("embedding_lookup: id out of range");
    }
    const S* src = tv.row_ptr(ids[i]);
    std::copy(src, src + d, out.row_ptr(i));
  }
  const int out_id = static_cast<int>(nodes_.size());
  const int tid = table.id;
  return add_node(std::move(out), {tid},
                  [tid, out_id, ids, d](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    if (!g.nodes_[tid].requires_grad) return;
                    TensorT<S>& dt = g.grad_buf(tid);
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      const S* src = dc.row_ptr(static_cast<int>(i));
                      S* dst = dt.row_ptr(ids[i]);
                      for (int j = 0; j < d; ++j) dst[j] += src[j];
                    }
                  },
                  "embedding_lookup");
}

template <typename S>
Var GraphT<S>::softmax(Var x) {
  return masked_softmax(x, {}, false);
}

template <typename S>
Var GraphT<S>::masked_softmax(Var x, const std::vector<std::uint8_t>& key_valid,
                              bool causal) {
  const TensorT<S>& xv = val(x.id);
  const int m = xv.rows(), n = xv.cols();
  if (!key_valid.empty() && static_cast<int>(key_valid.size()) != n) {
    throw ShapeMismatch("masked_softmax: mask length != columns");
  }
  if (causal && m != n) {
    throw ShapeMismatch("masked_softmax: causal mask needs square scores");
  }
  auto allowed = [&](int i, int j) {
    if (causal && j > i) return false;
    if (!key_valid.empty() && !key_valid[j]) return false;
    return true;
  };
  TensorT<S> out = TensorT<S>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    const S* row = xv.row_ptr(i);
    S* orow = out.row_ptr(i);
    S mx = S(0);
    bool any = false;
    for (int j = 0; j < n; ++j) {
      if (!allowed(i, j)) continue;
      mx = any ? std::max(mx, row[j]) : row[j];
      any = true;
    }
    if (!any) throw ShapeMismatch("masked_softmax: fully masked row");
    S denom = S(0);
    for (int j = 0; j < n; ++j) {
      if (!allowed(i, j)) continue;
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= denom;
  }
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id;
  return add_node(std::move(out), {xid},
                  [xid, out_id, m, n](GraphT& g) {
                    const TensorT<S>& dy = g.nodes_[out_id].grad;
                    const TensorT<S>& y = g.val(out_id);
                    TensorT<S> dx = TensorT<S>::zeros({m, n});
                    for (int i = 0; i < m; ++i) {
                      const S* yr = y.row_ptr(i);
                      const S* dyr = dy.row_ptr(i);
                      S dot = S(0);
                      for (int j = 0; j < n; ++j) dot += yr[j] * dyr[j];
                      S* dxr = dx.row_ptr(i);
                      for (int j = 0; j < n; ++j) {
                        dxr[j] = yr[j] * (dyr[j] - dot);
                      }
                    }
                    g.accum(xid, dx);
                  },
                  "masked_softmax");
}

template <typename S>
Var GraphT<S>::layer_norm(Var x, Var gain, Var bias) {
  const TensorT<S>& xv = val(x.id);
  const TensorT<S>& gv = val(gain.id);
  const TensorT<S>& bv = val(bias.id);
  const int m = xv.rows(), n = xv.cols();
  if (gv.rows() != 1 || gv.cols() != n || bv.rows() != 1 || bv.cols() != n) {
    throw ShapeMismatch("layer_norm: gain/bias must be (1,n)");
  }
  TensorT<S> out = TensorT<S>::zeros({m, n});
  TensorT<S> xhat = TensorT<S>::zeros({m, n});
  std::vector<S> inv_std(m);
  for (int i = 0; i < m; ++i) {
    const S* row = xv.row_ptr(i);
    S mu = S(0);
    for (int j = 0; j < n; ++j) mu += row[j];
    mu /= S(n);
    S var = S(0);
    for (int j = 0; j < n; ++j) {
      const S d = row[j] - mu;
      var += d * d;
    }
    var /= S(n);
    const S istd = S(1) / std::sqrt(var + S(kLayerNormEps));
    inv_std[i] = istd;
    S* hrow = xhat.row_ptr(i);
    S* orow = out.row_ptr(i);
    for (int j = 0; j < n; ++j) {
      hrow[j] = (row[j] - mu) * istd;
      orow[j] = hrow[j] * gv.data[j] + bv.data[j];
    }
  }
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id, gid = gain.id, bid = bias.id;
  auto xhat_s = std::make_shared<TensorT<S>>(std::move(xhat));
  auto istd_s = std::make_shared<std::vector<S>>(std::move(inv_std));
  return add_node(
      std::move(out), {xid, gid, bid},
      [xid, gid, bid, out_id, m, n, xhat_s, istd_s](GraphT& g) {
        const TensorT<S>& dy = g.nodes_[out_id].grad;
        const TensorT<S>& gv2 = g.val(gid);
        if (g.nodes_[gid].requires_grad) {
          TensorT<S> dg = TensorT<S>::zeros({1, n});
          for (int i = 0; i < m; ++i) {
            const S* dyr = dy.row_ptr(i);
            const S* hr = xhat_s->row_ptr(i);
            for (int j = 0; j < n; ++j) dg.data[j] += dyr[j] * hr[j];
          }
          g.accum(gid, dg);
        }
        if (g.nodes_[bid].requires_grad) {
          TensorT<S> db = TensorT<S>::zeros({1, n});
          for (int i = 0; i < m; ++i) {
            const S* dyr = dy.row_ptr(i);
            for (int j = 0; j < n; ++j) db.data[j] += dyr[j];
          }
          g.accum(bid, db);
        }
        if (g.nodes_[xid].requires_grad) {
          TensorT<S> dx = TensorT<S>::zeros({m, n});
          for (int i = 0; i < m; ++i) {
            const S* dyr = dy.row_ptr(i);
            const S* hr = xhat_s->row_ptr(i);
            S mean_dh = S(0), mean_dhh = S(0);
            std::vector<S> dh(n);
            for (int j = 0; j < n; ++j) {
              dh[j] = dyr[j] * gv2.data[j];
              mean_dh += dh[j];
              mean_dhh += dh[j] * hr[j];
            }
            mean_dh /= S(n);
            mean_dhh /= S(n);
            S* dxr = dx.row_ptr(i);
            for (int j = 0; j < n; ++j) {
              dxr[j] = (dh[j] - mean_dh - hr[j] * mean_dhh) * (*istd_s)[i];
            }
          }
          g.accum(xid, dx);
        }
      },
      "layer_norm");
}

template <typename S>
Var GraphT<S>::gelu(Var x) {
  const TensorT<S>& xv = val(x.id);
  TensorT<S> out = xv;
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (auto& v : out.data) {
    v = S(0.5) * v * (S(1) + S(std::erf(static_cast<double>(v) * kInvSqrt2)));
  }
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id;
  return add_node(
      std::move(out), {xid},
      [xid, out_id](GraphT& g) {
        const TensorT<S>& dy = g.nodes_[out_id].grad;
        const TensorT<S>& xvv = g.val(xid);
        TensorT<S> dx = dy;
        constexpr double kInvSqrt2 = 0.70710678118654752440;
        constexpr double kInvSqrt2Pi = 0.39894228040143267794;
        for (std::size_t i = 0; i < dx.data.size(); ++i) {
          const double v = static_cast<double>(xvv.data[i]);
          const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
          dx.data[i] *= S(cdf + v * pdf);
        }
        g.accum(xid, dx);
      },
      "gelu");
}

template <typename S>
Var GraphT<S>::sigmoid(Var x) {
  TensorT<S> out = val(x.id);
  for (auto& v : out.data) v = stable_sigmoid(v);
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id;
  return add_node(std::move(out), {xid},
                  [xid, out_id](GraphT& g) {
                    const TensorT<S>& dy = g.nodes_[out_id].grad;
                    const TensorT<S>& y = g.val(out_id);
                    TensorT<S> dx = dy;
                    for (std::size_t i = 0; i < dx.data.size(); ++i) {
                      dx.data[i] *= y.data[i] * (S(1) - y.data[i]);
                    }
                    g.accum(xid, dx);
                  },
                  "sigmoid");
}

template <typename S>
Var GraphT<S>::log(Var x) {
  TensorT<S> out = val(x.id);
  for (auto& v : out.data) v = std::log(v);
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id;
  return add_node(std::move(out), {xid},
                  [xid, out_id](GraphT& g) {
                    const TensorT<S>& dy = g.nodes_[out_id].grad;
                    const TensorT<S>& xvv = g.val(xid);
                    TensorT<S> dx = dy;
                    for (std::size_t i = 0; i < dx.data.size(); ++i) {
                      dx.data[i] /= xvv.data[i];
                    }
                    g.accum(xid, dx);
                  },
                  "log");
}

template <typename S>
Var GraphT<S>::softplus(Var x) {
  TensorT<S> out = val(x.id);
  for (auto& v : out.data) v = stable_softplus(v);
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id;
  return add_node(std::move(out), {xid},
                  [xid, out_id](GraphT& g) {
                    const TensorT<S>& dy = g.nodes_[out_id].grad;
                    const TensorT<S>& xvv = g.val(xid);
                    TensorT<S> dx = dy;
                    for (std::size_t i = 0; i < dx.data.size(); ++i) {
                      dx.data[i] *= stable_sigmoid(xvv.data[i]);
                    }
                    g.accum(xid, dx);
                  },
                  "softplus");
}

template <typename S>
Var GraphT<S>::concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeMismatch("concat_rows: empty list");
  const int n = val(xs[0].id).cols();
  int m = 0;
  std::vector<int> ids;
  for (Var v : xs) {
    if (val(v.id).cols() != n) {
      throw ShapeMismatch("concat_rows: column mismatch");
    }
    m += val(v.id).rows();
    ids.push_back(v.id);
  }
  TensorT<S> out = TensorT<S>::zeros({m, n});
  int r = 0;
  for (int id : ids) {
    const TensorT<S>& xv = nodes_[id].value;
    std::copy(xv.data.begin(), xv.data.end(), out.row_ptr(r));
    r += xv.rows();
  }
  const int out_id = static_cast<int>(nodes_.size());
  return add_node(std::move(out), ids,
                  [ids, out_id, n](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    int r0 = 0;
                    for (int id : ids) {
                      const int mi = g.val(id).rows();
                      if (g.nodes_[id].requires_grad) {
                        TensorT<S> di = TensorT<S>::zeros({mi, n});
                        std::copy(dc.row_ptr(r0), dc.row_ptr(r0) + mi * n,
                                  di.data.begin());
                        g.accum(id, di);
                      }
                      r0 += mi;
                    }
                  },
                  "concat_rows");
}

template <typename S>
Var GraphT<S>::concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeMismatch("concat_cols: empty list");
  const int m = val(xs[0].id).rows();
  int n = 0;
  std::vector<int> ids;
  for (Var v : xs) {
    if (val(v.id).rows() != m) throw ShapeMismatch("concat_cols: row mismatch");
    n += val(v.id).cols();
    ids.push_back(v.id);
  }
  TensorT<S> out = TensorT<S>::zeros({m, n});
  int c = 0;
  for (int id : ids) {
    const TensorT<S>& xv = nodes_[id].value;
    const int ni = xv.cols();
    for (int i = 0; i < m; ++i) {
      std::copy(xv.row_ptr(i), xv.row_ptr(i) + ni, out.row_ptr(i) + c);
    }
    c += ni;
  }
  const int out_id = static_cast<int>(nodes_.size());
  return add_node(std::move(out), ids,
                  [ids, out_id, m](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    int c0 = 0;
                    for (int id : ids) {
                      const int ni = g.val(id).cols();
                      if (g.nodes_[id].requires_grad) {
                        TensorT<S> di = TensorT<S>::zeros({m, ni});
                        for (int i = 0; i < m; ++i) {
                          std::copy(dc.row_ptr(i) + c0, dc.row_ptr(i) + c0 + ni,
                                    di.row_ptr(i));
                        }
                        g.accum(id, di);
                      }
                      c0 += ni;
                    }
                  },
                  "concat_cols");
}

template <typename S>
Var GraphT<S>::slice_rows(Var x, int r0, int r1) {
  const TensorT<S>& xv = val(x.id);
  const int m = xv.rows(), n = xv.cols();
  if (r0 < 0 || r1 <= r0 || r1 > m) throw ShapeMismatch("slice_rows: range");
  TensorT<S> out = TensorT<S>::zeros({r1 - r0, n});
  std::copy(xv.row_ptr(r0), xv.row_ptr(r0) + (r1 - r0) * n, out.data.begin());
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id;
  return add_node(std::move(out), {xid},
                  [xid, out_id, r0, r1, m, n](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    TensorT<S> dx = TensorT<S>::zeros({m, n});
                    std::copy(dc.data.begin(), dc.data.end(), dx.row_ptr(r0));
                    g.accum(xid, dx);
                  },
                  "slice_rows");
}

template <typename S>
Var GraphT<S>::slice_cols(Var x, int c0, int c1) {
  const TensorT<S>& xv = val(x.id);
  const int m = xv.rows(), n = xv.cols();
  if (c0 < 0 || c1 <= c0 || c1 > n) throw ShapeMismatch("slice_cols: range");
  TensorT<S> out = TensorT<S>::zeros({m, c1 - c0});
  for (int i = 0; i < m; ++i) {
    std::copy(xv.row_ptr(i) + c0, xv.row_ptr(i) + c1, out.row_ptr(i));
  }
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id;
  return add_node(std::move(out), {xid},
                  [xid, out_id, c0, c1, m, n](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    TensorT<S> dx = TensorT<S>::zeros({m, n});
                    for (int i = 0; i < m; ++i) {
                      std::copy(dc.row_ptr(i), dc.row_ptr(i) + (c1 - c0),
                                dx.row_ptr(i) + c0);
                    }
                    g.accum(xid, dx);
                  },
                  "slice_cols");
}

template <typename S>
std::vector<Var> GraphT<S>::split_rows(Var x, int parts) {
  const int m = val(x.id).rows();
  if (parts <= 0 || m % parts != 0) {
    throw ShapeMismatch("split_rows: rows not divisible");
  }
  const int step = m / parts;
  std::vector<Var> out;
  for (int p = 0; p < parts; ++p) {
    out.push_back(slice_rows(x, p * step, (p + 1) * step));
  }
  return out;
}

template <typename S>
std::vector<Var> GraphT<S>::split_cols(Var x, int parts) {
  const int n = val(x.id).cols();
  if (parts <= 0 || n % parts != 0) {
    throw ShapeMismatch("split_cols: cols not divisible");
  }
  const int step = n / parts;
  std::vector<Var> out;
  for (int p = 0; p < parts; ++p) {
    out.push_back(slice_cols(x, p * step, (p + 1) * step));
  }
  return out;
}

template <typename S>
Var GraphT<S>::mean_rows(Var x) {
  const int m = val(x.id).rows();
  std::vector<std::uint8_t> all(m, 1);
  return masked_mean_rows(x, all);
}

template <typename S>
Var GraphT<S>::masked_mean_rows(Var x,
                                const std::vector<std::uint8_t>& row_valid) {
  const TensorT<S>& xv = val(x.id);
  const int m = xv.rows(), n = xv.cols();
  if (static_cast<int>(row_valid.size()) != m) {
    throw ShapeMismatch("masked_mean_rows: mask length != rows");
  }
  int count = 0;
  for (auto v : row_valid) count += v ? 1 : 0;
  if (count == 0) throw ShapeMismatch("masked_mean_rows: no valid rows");
  TensorT<S> out = TensorT<S>::zeros({1, n});
  for (int i = 0; i < m; ++i) {
    if (!row_valid[i]) continue;
    const S* row = xv.row_ptr(i);
    for (int j = 0; j < n; ++j) out.data[j] += row[j];
  }
  for (auto& v : out.data) v /= S(count);
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id;
  return add_node(std::move(out), {xid},
                  [xid, out_id, row_valid, m, n, count](GraphT& g) {
                    const TensorT<S>& dc = g.nodes_[out_id].grad;
                    TensorT<S> dx = TensorT<S>::zeros({m, n});
                    for (int i = 0; i < m; ++i) {
                      if (!row_valid[i]) continue;
                      S* row = dx.row_ptr(i);
                      for (int j = 0; j < n; ++j) {
                        row[j] = dc.data[j] / S(count);
                      }
                    }
                    g.accum(xid, dx);
                  },
                  "masked_mean_rows");
}

template <typename S>
Var GraphT<S>::sum(Var x) {
  const TensorT<S>& xv = val(x.id);
  S total = S(0);
  for (S v : xv.data) total += v;
  const int out_id = static_cast<int>(nodes_.size());
  const int xid = x.id;
  return add_node(TensorT<S>::scalar(total), {xid},
                  [xid, out_id](GraphT& g) {
                    const S go = g.nodes_[out_id].grad.data[0];
                    TensorT<S> dx = TensorT<S>::full(g.val(xid).shape, go);
                    g.accum(xid, dx);
                  },
                  "sum");
}

template <typename S>
Var GraphT<S>::mean_all(Var x) {
  const std::int64_t n = val(x.id).numel();
  return scale(sum(x), S(1) / S(n));
}

template <typename S>
Var GraphT<S>::cross_entropy(Var logits, const std::vector<int>& targets,
                             int ignore_id, bool mean_reduction) {
  const TensorT<S>& lv = val(logits.id);
  const int L = lv.rows(), V = lv.cols();
  if (static_cast<int>(targets.size()) != L) {
    throw ShapeMismatch("cross_entropy: target length != logit rows");
  }
  int count = 0;
  S total = S(0);
  for (int i = 0; i < L; ++i) {
    const int t = targets[i];
    if (t == ignore_id) continue;
    if (t < 0 || t >= V) throw ShapeMismatch("cross_entropy: target id range");
    const S* row = lv.row_ptr(i);
    S mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    S denom = S(0);
    for (int j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
    total += mx + std::log(denom) - row[t];
    ++count;
  }
  if (count == 0) throw ShapeMismatch("cross_entropy: all targets ignored");
  if (mean_reduction) total /= S(count);
  const int out_id = static_cast<int>(nodes_.size());
  const int lid = logits.id;
  return add_node(
      TensorT<S>::scalar(total), {lid},
      [lid, out_id, targets, ignore_id, mean_reduction, L, V, count](
          GraphT& g) {
        if (!g.nodes_[lid].requires_grad) return;
        const S go = g.nodes_[out_id].grad.data[0];
        const S w = mean_reduction ? go / S(count) : go;
        const TensorT<S>& lvv = g.val(lid);
        TensorT<S> dl = TensorT<S>::zeros({L, V});
        for (int i = 0; i < L; ++i) {
          const int t = targets[i];
          if (t == ignore_id) continue;
          const S* row = lvv.row_ptr(i);
          S mx = row[0];
          for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
          S denom = S(0);
          for (int j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
          S* drow = dl.row_ptr(i);
          for (int j = 0; j < V; ++j) {
            drow[j] = w * std::exp(row[j] - mx) / denom;
          }
          drow[t] -= w;
        }
        g.accum(lid, dl);
      },
      "cross_entropy");
}

template <typename S>
Var GraphT<S>::rel_scores(Var q, Var k, Var rel, Var u, Var v) {
  const TensorT<S>& qv = val(q.id);
  const TensorT<S>& kv = val(k.id);
  const TensorT<S>& rv = val(rel.id);
  const TensorT<S>& uv = val(u.id);
  const TensorT<S>& vv = val(v.id);
  const int L = qv.rows(), d = qv.cols();
  if (kv.rows() != L || kv.cols() != d) {
    throw ShapeMismatch("rel_scores: q/k shape mismatch");
  }
  if (rv.cols() != d || rv.rows() < 2 * L - 1) {
    throw ShapeMismatch("rel_scores: relative table too small");
  }
  if (uv.rows() != 1 || uv.cols() != d || vv.rows() != 1 || vv.cols() != d) {
    throw ShapeMismatch("rel_scores: u/v must be (1,d)");
  }
  const int center = (rv.rows() - 1) / 2;
  const S inv_sqrt_d = S(1) / std::sqrt(S(d));
  TensorT<S> out = TensorT<S>::zeros({L, L});
  for (int i = 0; i < L; ++i) {
    const S* qi = qv.row_ptr(i);
    S* orow = out.row_ptr(i);
    for (int j = 0; j < L; ++j) {
      const S* kj = kv.row_ptr(j);
      const S* rij = rv.row_ptr(center + i - j);
      S s = S(0);
      for (int a = 0; a < d; ++a) {
        s += qi[a] * kj[a] + qi[a] * rij[a] + uv.data[a] * kj[a] +
             vv.data[a] * rij[a];
      }
      orow[j] = s * inv_sqrt_d;
    }
  }
  const int out_id = static_cast<int>(nodes_.size());
  const int qid = q.id, kid = k.id, rid = rel.id, uid = u.id, vid = v.id;
  return add_node(
      std::move(out), {qid, kid, rid, uid, vid},
      [qid, kid, rid, uid, vid, out_id, L, d, center, inv_sqrt_d](GraphT& g) {
        const TensorT<S>& ds = g.nodes_[out_id].grad;
        const TensorT<S>& qvv = g.val(qid);
        const TensorT<S>& kvv = g.val(kid);
        const TensorT<S>& rvv = g.val(rid);
        const TensorT<S>& uvv = g.val(uid);
        const TensorT<S>& vvv = g.val(vid);
        const bool nq = g.nodes_[qid].requires_grad;
        const bool nk = g.nodes_[kid].requires_grad;
        const bool nr = g.nodes_[rid].requires_grad;
        const bool nu = g.nodes_[uid].requires_grad;
        const bool nv = g.nodes_[vid].requires_grad;
        TensorT<S> dq = TensorT<S>::zeros(qvv.shape);
        TensorT<S> dk = TensorT<S>::zeros(kvv.shape);
        TensorT<S> dr = TensorT<S>::zeros(rvv.shape);
        TensorT<S> du = TensorT<S>::zeros({1, d});
        TensorT<S> dv = TensorT<S>::zeros({1, d});
        for (int i = 0; i < L; ++i) {
          const S* qi = qvv.row_ptr(i);
          const S* dsr = ds.row_ptr(i);
          S* dqi = dq.row_ptr(i);
          for (int j = 0; j < L; ++j) {
            const S w = dsr[j] * inv_sqrt_d;
            if (w == S(0)) continue;
            const S* kj = kvv.row_ptr(j);
            const S* rij = rvv.row_ptr(center + i - j);
            S* dkj = dk.row_ptr(j);
            S* drij = dr.row_ptr(center + i - j);
            for (int a = 0; a < d; ++a) {
              if (nq) dqi[a] += w * (kj[a] + rij[a]);
              if (nk) dkj[a] += w * (qi[a] + uvv.data[a]);
              if (nr) drij[a] += w * (qi[a] + vvv.data[a]);
              if (nu) du.data[a] += w * kj[a];
              if (nv) dv.data[a] += w * rij[a];
            }
          }
        }
        if (nq) g.accum(qid, dq);
        if (nk) g.accum(kid, dk);
        if (nr) g.accum(rid, dr);
        if (nu) g.accum(uid, du);
        if (nv) g.accum(vid, dv);
      },
      "rel_scores");
}

template class GraphT<float>;
template class GraphT<double>;

double grad_check(
    const std::vector<Tensor64>& inputs,
    const std::function<Var(Graph64&, const std::vector<Var>&)>& build,
    const GradCheckSpec& spec) {
  Graph64 g;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.leaf(t, true));
  Var loss = build(g, vars);
  if (!g.value(loss).is_scalar()) throw NotScalar("grad_check: loss not scalar");
  g.backward(loss);
  std::vector<Tensor64> grads;
  grads.reserve(vars.size());
  for (Var v : vars) grads.push_back(g.grad(v));

  auto eval = [&](const std::vector<Tensor64>& xs) {
    Graph64 h;
    h.set_grad_enabled(false);
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const auto& t : xs) vs.push_back(h.leaf(t, false));
    return h.value(build(h, vs)).data[0];
  };

  double max_rel = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    const std::int64_t n = inputs[ti].numel();
    Rng rng(Rng::mix(spec.seed, static_cast<std::uint64_t>(ti) + 1));
    std::vector<std::int64_t> coords;
    if (spec.samples_per_tensor <= 0 || n <= spec.samples_per_tensor) {
      for (std::int64_t c = 0; c < n; ++c) coords.push_back(c);
    } else {
      for (int s = 0; s < spec.samples_per_tensor; ++s) {
        coords.push_back(rng.uniform_int(0, static_cast<int>(n - 1)));
      }
    }
    for (std::int64_t c : coords) {
      std::vector<Tensor64> xp = inputs;
      std::vector<Tensor64> xm = inputs;
      xp[ti].data[c] += spec.step;
      xm[ti].data[c] -= spec.step;
      const double fd = (eval(xp) - eval(xm)) / (2.0 * spec.step);
      const double ad = grads[ti].data[c];
      const double denom =
          std::max({std::abs(ad), std::abs(fd), 1e-6});
      max_rel = std::max(max_rel, std::abs(ad - fd) / denom);
    }
  }
  return max_rel;
}

}  // namespace calliope
