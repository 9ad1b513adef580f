#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dmvs/tensor.hpp"

namespace dmvs {

// Reverse-mode tape. Nodes are created in forward order; backward() walks
// them in reverse. With recording=false, ops compute values only, which is
// the inference path.
template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording = true;

  int push(Tensor<T> value, bool requires_grad) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.value = std::move(value);
    n.requires_grad = recording && requires_grad;
    return static_cast<int>(nodes_.size()) - 1;
  }

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  Tensor<T>& grad_buf(int id) {
    Node& n = node(id);
    if (!n.has_grad) {
      n.grad = Tensor<T>::zeros(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  bool has_grad(int id) const { return node(id).has_grad; }

  void backward(int root) {
    Node& r = node(root);
    if (!r.requires_grad) throw std::runtime_error("Tape::backward: root does not require grad");
    grad_buf(root).fill(T(1));
    for (int id = root; id >= 0; --id) {
      Node& n = node(id);
      if (n.requires_grad && n.has_grad && n.backward) n.backward();
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool defined() const { return tape != nullptr; }
  const Tensor<T>& val() const { return tape->value(id); }
  const Shape& shape() const { return val().shape(); }
  bool requires_grad() const { return tape->node(id).requires_grad; }
  const Tensor<T>& grad() const {
    if (!tape->has_grad(id)) throw std::runtime_error("Var::grad: no gradient accumulated");
    return tape->node(id).grad;
  }
};

template <typename T>
inline Var<T> make_leaf(Tape<T>& tape, Tensor<T> value, bool requires_grad = false) {
  return Var<T>{&tape, tape.push(std::move(value), requires_grad)};
}

template <typename T>
inline Var<T> make_const(Tape<T>& tape, Tensor<T> value) {
  return make_leaf(tape, std::move(value), false);
}

namespace detail {

template <typename T>
inline Var<T> finish_op(Tape<T>& tape, Tensor<T> value, bool needs,
                        std::function<void()> backward) {
  int id = tape.push(std::move(value), needs);
  if (tape.recording && needs) tape.node(id).backward = std::move(backward);
  return Var<T>{&tape, id};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
inline Var<T> unary_op(Var<T> x, FwdFn fwd, BwdFn dfdx_from_xy) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  Tensor<T> out(xv.shape());
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = fwd(xv[i]);
  bool needs = x.requires_grad();
  int xid = x.id;
  int oid_holder = -1;
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  oid_holder = o.id;
  if (tape.recording && needs) {
    tape.node(o.id).backward = [&tape, xid, oid = oid_holder, dfdx_from_xy]() {
      const Tensor<T>& g = tape.node(oid).grad;
      const Tensor<T>& xv2 = tape.value(xid);
      const Tensor<T>& yv2 = tape.value(oid);
      Tensor<T>& gx = tape.grad_buf(xid);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * dfdx_from_xy(xv2[i], yv2[i]);
    };
  }
  return o;
}

template <typename T>
inline Var<T> sigmoid(Var<T> x) {
  return unary_op(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
inline Var<T> tanh_op(Var<T> x) {
  return unary_op(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// x * sigmoid(x); smooth activation used throughout the nets.
template <typename T>
inline Var<T> silu(Var<T> x) {
  return unary_op(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
inline Var<T> log_op(Var<T> x) {
  return unary_op(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
inline Var<T> abs_op(Var<T> x) {
  return unary_op(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
inline Var<T> clamp_min(Var<T> x, T lo) {
  return unary_op(
      x, [lo](T v) { return v < lo ? lo : v; },
      [lo](T v, T) { return v < lo ? T(0) : T(1); });
}

template <typename T>
inline Var<T> mul_scalar(Var<T> x, T s) {
  return unary_op(
      x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
inline Var<T> add_scalar(Var<T> x, T s) {
  return unary_op(
      x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

// 1 - x
template <typename T>
inline Var<T> one_minus(Var<T> x) {
  return unary_op(
      x, [](T v) { return T(1) - v; }, [](T, T) { return T(-1); });
}

template <typename T, typename FwdFn, typename BwdFn>
inline Var<T> binary_op(Var<T> a, Var<T> b, FwdFn fwd, BwdFn grads) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.val();
  const Tensor<T>& bv = b.val();
  if (av.shape() != bv.shape()) throw std::invalid_argument("binary_op: shape mismatch");
  Tensor<T> out(av.shape());
  for (int64_t i = 0; i < av.numel(); ++i) out[i] = fwd(av[i], bv[i]);
  bool needs = a.requires_grad() || b.requires_grad();
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int aid = a.id, bid = b.id, oid = o.id;
    bool na = a.requires_grad(), nb = b.requires_grad();
    tape.node(o.id).backward = [&tape, aid, bid, oid, na, nb, grads]() {
      const Tensor<T>& g = tape.node(oid).grad;
      const Tensor<T>& av2 = tape.value(aid);
      const Tensor<T>& bv2 = tape.value(bid);
      Tensor<T>* ga = na ? &tape.grad_buf(aid) : nullptr;
      Tensor<T>* gb = nb ? &tape.grad_buf(bid) : nullptr;
      for (int64_t i = 0; i < g.numel(); ++i) {
        auto [da, db] = grads(av2[i], bv2[i]);
        if (ga) (*ga)[i] += g[i] * da;
        if (gb) (*gb)[i] += g[i] * db;
      }
    };
  }
  return o;
}

template <typename T>
inline Var<T> add(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; },
      [](T, T) { return std::pair<T, T>(T(1), T(1)); });
}

template <typename T>
inline Var<T> sub(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; },
      [](T, T) { return std::pair<T, T>(T(1), T(-1)); });
}

template <typename T>
inline Var<T> mul(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; },
      [](T x, T y) { return std::pair<T, T>(y, x); });
}

template <typename T>
inline Var<T> div_op(Var<T> a, Var<T> b) {
  return binary_op(
      a, b, [](T x, T y) { return x / y; },
      [](T x, T y) { return std::pair<T, T>(T(1) / y, -x / (y * y)); });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
inline Var<T> reshape(Var<T> x, Shape shape) {
  Tape<T>& tape = *x.tape;
  Tensor<T> out = x.val().reshaped(shape);
  bool needs = x.requires_grad();
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, oid = o.id;
    tape.node(o.id).backward = [&tape, xid, oid]() {
      const Tensor<T>& g = tape.node(oid).grad;
      Tensor<T>& gx = tape.grad_buf(xid);
      for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    };
  }
  return o;
}

// Concatenate along axis 0; all trailing dimensions must agree.
template <typename T>
inline Var<T> concat0(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat0: empty input");
  Tape<T>& tape = *xs[0].tape;
  Shape shape = xs[0].shape();
  int64_t tail = shape_numel(shape) / shape[0];
  int64_t total0 = 0;
  bool needs = false;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != shape.size()) throw std::invalid_argument("concat0: rank mismatch");
    for (size_t i = 1; i < s.size(); ++i)
      if (s[i] != shape[i]) throw std::invalid_argument("concat0: trailing dim mismatch");
    total0 += s[0];
    needs = needs || x.requires_grad();
  }
  Shape out_shape = shape;
  out_shape[0] = total0;
  Tensor<T> out(out_shape);
  int64_t off = 0;
  for (const auto& x : xs) {
    const Tensor<T>& v = x.val();
    std::copy(v.data(), v.data() + v.numel(), out.data() + off);
    off += v.numel();
  }
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    std::vector<int> ids;
    std::vector<int64_t> sizes;
    std::vector<bool> need_i;
    for (const auto& x : xs) {
      ids.push_back(x.id);
      sizes.push_back(x.val().numel());
      need_i.push_back(x.requires_grad());
    }
    int oid = o.id;
    (void)tail;
    tape.node(o.id).backward = [&tape, ids, sizes, need_i, oid]() {
      const Tensor<T>& g = tape.node(oid).grad;
      int64_t off2 = 0;
      for (size_t k = 0; k < ids.size(); ++k) {
        if (need_i[k]) {
          Tensor<T>& gx = tape.grad_buf(ids[k]);
          for (int64_t i = 0; i < sizes[k]; ++i) gx[i] += g[off2 + i];
        }
        off2 += sizes[k];
      }
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

// sum(x * w) with a constant weight tensor; returns a scalar var.
template <typename T>
inline Var<T> weighted_sum(Var<T> x, const Tensor<T>& w) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  if (xv.shape() != w.shape()) throw std::invalid_argument("weighted_sum: shape mismatch");
  T acc = 0;
  for (int64_t i = 0; i < xv.numel(); ++i) acc += xv[i] * w[i];
  Tensor<T> out({1});
  out[0] = acc;
  bool needs = x.requires_grad();
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, oid = o.id;
    Tensor<T> wc = w;
    tape.node(o.id).backward = [&tape, xid, oid, wc = std::move(wc)]() {
      T g = tape.node(oid).grad[0];
      Tensor<T>& gx = tape.grad_buf(xid);
      for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g * wc[i];
    };
  }
  return o;
}

// Masked mean: sum(mask * x) / sum(mask). Empty mask yields 0.
template <typename T>
inline Var<T> masked_mean(Var<T> x, const Tensor<uint8_t>& mask) {
  const Tensor<T>& xv = x.val();
  if (xv.numel() != mask.numel()) throw std::invalid_argument("masked_mean: mask size mismatch");
  int64_t count = 0;
  for (int64_t i = 0; i < mask.numel(); ++i) count += mask[i] ? 1 : 0;
  Tensor<T> w(xv.shape());
  T inv = count > 0 ? T(1) / static_cast<T>(count) : T(0);
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = mask[i] ? inv : T(0);
  return weighted_sum(x, w);
}

// ---------------------------------------------------------------------------
// Convolutions (channels-first layouts)
// ---------------------------------------------------------------------------

// conv2d on [Cin,H,W] with weights [Cout,Cin,kh,kw] and optional bias [Cout].
template <typename T>
inline Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  const Tensor<T>& wv = w.val();
  if (xv.rank() != 3 || wv.rank() != 4) throw std::invalid_argument("conv2d: rank");
  const int64_t cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int64_t cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != cin) throw std::invalid_argument("conv2d: channel mismatch");
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor<T> out({cout, oh, ow});
  const bool has_bias = b.defined();
  const T* bp = has_bias ? b.val().data() : nullptr;

  const T* xp = xv.data();
  const T* wp = wv.data();
  T* op = out.data();
#pragma omp parallel for schedule(static) if (cout * oh * ow * cin * kh * kw > 16384)
  for (int64_t co = 0; co < cout; ++co) {
    for (int64_t oy = 0; oy < oh; ++oy) {
      for (int64_t ox = 0; ox < ow; ++ox) {
        T acc = has_bias ? bp[co] : T(0);
        const int64_t iy0 = oy * stride - pad;
        const int64_t ix0 = ox * stride - pad;
        for (int64_t ci = 0; ci < cin; ++ci) {
          const T* xc = xp + ci * h * wd;
          const T* wc = wp + ((co * cin + ci) * kh) * kw;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            const T* xrow = xc + iy * wd;
            const T* wrow = wc + ky * kw;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ix0 + kx;
              if (ix < 0 || ix >= wd) continue;
              acc += wrow[kx] * xrow[ix];
            }
          }
        }
        op[(co * oh + oy) * ow + ox] = acc;
      }
    }
  }

  bool needs = x.requires_grad() || w.requires_grad() || (has_bias && b.requires_grad());
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, wid = w.id, bid = has_bias ? b.id : -1, oid = o.id;
    bool nx = x.requires_grad(), nw = w.requires_grad();
    bool nb = has_bias && b.requires_grad();
    tape.node(o.id).backward = [&tape, xid, wid, bid, oid, nx, nw, nb, stride, pad]() {
      const Tensor<T>& g = tape.node(oid).grad;
      const Tensor<T>& xv2 = tape.value(xid);
      const Tensor<T>& wv2 = tape.value(wid);
      const int64_t cin = xv2.dim(0), h = xv2.dim(1), wd = xv2.dim(2);
      const int64_t cout = wv2.dim(0), kh = wv2.dim(2), kw = wv2.dim(3);
      const int64_t oh = g.dim(1), ow = g.dim(2);
      const T* gp = g.data();
      if (nx) {
        Tensor<T>& gx = tape.grad_buf(xid);
        T* gxp = gx.data();
        const T* wp2 = wv2.data();
#pragma omp parallel for schedule(static) if (cin * h * wd > 4096)
        for (int64_t ci = 0; ci < cin; ++ci) {
          for (int64_t iy = 0; iy < h; ++iy) {
            for (int64_t ix = 0; ix < wd; ++ix) {
              T acc = 0;
              for (int64_t ky = 0; ky < kh; ++ky) {
                const int64_t num_y = iy + pad - ky;
                if (num_y < 0 || num_y % stride) continue;
                const int64_t oy = num_y / stride;
                if (oy >= oh) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                  const int64_t num_x = ix + pad - kx;
                  if (num_x < 0 || num_x % stride) continue;
                  const int64_t ox = num_x / stride;
                  if (ox >= ow) continue;
                  for (int64_t co = 0; co < cout; ++co)
                    acc += gp[(co * oh + oy) * ow + ox] *
                           wp2[((co * cin + ci) * kh + ky) * kw + kx];
                }
              }
              gxp[(ci * h + iy) * wd + ix] += acc;
            }
          }
        }
      }
      if (nw) {
        Tensor<T>& gw = tape.grad_buf(wid);
        T* gwp = gw.data();
        const T* xp2 = xv2.data();
#pragma omp parallel for schedule(static) if (cout * cin > 8)
        for (int64_t co = 0; co < cout; ++co) {
          for (int64_t ci = 0; ci < cin; ++ci) {
            for (int64_t ky = 0; ky < kh; ++ky) {
              for (int64_t kx = 0; kx < kw; ++kx) {
                T acc = 0;
                for (int64_t oy = 0; oy < oh; ++oy) {
                  const int64_t iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (int64_t ox = 0; ox < ow; ++ox) {
                    const int64_t ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= wd) continue;
                    acc += gp[(co * oh + oy) * ow + ox] * xp2[(ci * h + iy) * wd + ix];
                  }
                }
                gwp[((co * cin + ci) * kh + ky) * kw + kx] += acc;
              }
            }
          }
        }
      }
      if (nb) {
        Tensor<T>& gb = tape.grad_buf(bid);
        for (int64_t co = 0; co < cout; ++co) {
          T acc = 0;
          for (int64_t i = 0; i < oh * ow; ++i) acc += gp[co * oh * ow + i];
          gb[co] += acc;
        }
      }
    };
  }
  return o;
}

// conv3d on [Cin,D,H,W] with weights [Cout,Cin,kd,kh,kw]; one stride/pad pair
// applies to all three axes.
template <typename T>
inline Var<T> conv3d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  const Tensor<T>& wv = w.val();
  if (xv.rank() != 4 || wv.rank() != 5) throw std::invalid_argument("conv3d: rank");
  const int64_t cin = xv.dim(0), dd = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int64_t cout = wv.dim(0), kd = wv.dim(2), kh = wv.dim(3), kw = wv.dim(4);
  if (wv.dim(1) != cin) throw std::invalid_argument("conv3d: channel mismatch");
  const int64_t od = (dd + 2 * pad - kd) / stride + 1;
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor<T> out({cout, od, oh, ow});
  const bool has_bias = b.defined();
  const T* bp = has_bias ? b.val().data() : nullptr;
  const T* xp = xv.data();
  const T* wp = wv.data();
  T* op = out.data();
#pragma omp parallel for schedule(static) if (cout * od * oh * ow > 2048)
  for (int64_t co = 0; co < cout; ++co) {
    for (int64_t oz = 0; oz < od; ++oz) {
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          T acc = has_bias ? bp[co] : T(0);
          for (int64_t ci = 0; ci < cin; ++ci) {
            for (int64_t kz = 0; kz < kd; ++kz) {
              const int64_t iz = oz * stride - pad + kz;
              if (iz < 0 || iz >= dd) continue;
              for (int64_t ky = 0; ky < kh; ++ky) {
                const int64_t iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                const T* xrow = xp + ((ci * dd + iz) * h + iy) * wd;
                const T* wrow = wp + (((co * cin + ci) * kd + kz) * kh + ky) * kw;
                for (int64_t kx = 0; kx < kw; ++kx) {
                  const int64_t ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= wd) continue;
                  acc += wrow[kx] * xrow[ix];
                }
              }
            }
          }
          op[((co * od + oz) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }

  bool needs = x.requires_grad() || w.requires_grad() || (has_bias && b.requires_grad());
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, wid = w.id, bid = has_bias ? b.id : -1, oid = o.id;
    bool nx = x.requires_grad(), nw = w.requires_grad();
    bool nb = has_bias && b.requires_grad();
    tape.node(o.id).backward = [&tape, xid, wid, bid, oid, nx, nw, nb, stride, pad]() {
      const Tensor<T>& g = tape.node(oid).grad;
      const Tensor<T>& xv2 = tape.value(xid);
      const Tensor<T>& wv2 = tape.value(wid);
      const int64_t cin = xv2.dim(0), dd = xv2.dim(1), h = xv2.dim(2), wd = xv2.dim(3);
      const int64_t cout = wv2.dim(0), kd = wv2.dim(2), kh = wv2.dim(3), kw = wv2.dim(4);
      const int64_t od = g.dim(1), oh = g.dim(2), ow = g.dim(3);
      const T* gp = g.data();
      if (nx) {
        Tensor<T>& gx = tape.grad_buf(xid);
        T* gxp = gx.data();
        const T* wp2 = wv2.data();
#pragma omp parallel for schedule(static) if (cin * dd * h * wd > 4096)
        for (int64_t ci = 0; ci < cin; ++ci) {
          for (int64_t iz = 0; iz < dd; ++iz) {
            for (int64_t iy = 0; iy < h; ++iy) {
              for (int64_t ix = 0; ix < wd; ++ix) {
                T acc = 0;
                for (int64_t kz = 0; kz < kd; ++kz) {
                  const int64_t nz = iz + pad - kz;
                  if (nz < 0 || nz % stride) continue;
                  const int64_t oz = nz / stride;
                  if (oz >= od) continue;
                  for (int64_t ky = 0; ky < kh; ++ky) {
                    const int64_t ny = iy + pad - ky;
                    if (ny < 0 || ny % stride) continue;
                    const int64_t oy = ny / stride;
                    if (oy >= oh) continue;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                      const int64_t nxi = ix + pad - kx;
                      if (nxi < 0 || nxi % stride) continue;
                      const int64_t ox = nxi / stride;
                      if (ox >= ow) continue;
                      for (int64_t co = 0; co < cout; ++co)
                        acc += gp[((co * od + oz) * oh + oy) * ow + ox] *
                               wp2[(((co * cin + ci) * kd + kz) * kh + ky) * kw + kx];
                    }
                  }
                }
                gxp[((ci * dd + iz) * h + iy) * wd + ix] += acc;
              }
            }
          }
        }
      }
      if (nw) {
        Tensor<T>& gw = tape.grad_buf(wid);
        T* gwp = gw.data();
        const T* xp2 = xv2.data();
#pragma omp parallel for schedule(static) if (cout * cin > 4)
        for (int64_t co = 0; co < cout; ++co) {
          for (int64_t ci = 0; ci < cin; ++ci) {
            for (int64_t kz = 0; kz < kd; ++kz) {
              for (int64_t ky = 0; ky < kh; ++ky) {
                for (int64_t kx = 0; kx < kw; ++kx) {
                  T acc = 0;
                  for (int64_t oz = 0; oz < od; ++oz) {
                    const int64_t iz = oz * stride - pad + kz;
                    if (iz < 0 || iz >= dd) continue;
                    for (int64_t oy = 0; oy < oh; ++oy) {
                      const int64_t iy = oy * stride - pad + ky;
                      if (iy < 0 || iy >= h) continue;
                      for (int64_t ox = 0; ox < ow; ++ox) {
                        const int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= wd) continue;
                        acc += gp[((co * od + oz) * oh + oy) * ow + ox] *
                               xp2[((ci * dd + iz) * h + iy) * wd + ix];
                      }
                    }
                  }
                  gwp[(((co * cin + ci) * kd + kz) * kh + ky) * kw + kx] += acc;
                }
              }
            }
          }
        }
      }
      if (nb) {
        Tensor<T>& gb = tape.grad_buf(bid);
        const int64_t plane = od * oh * ow;
        for (int64_t co = 0; co < cout; ++co) {
          T acc = 0;
          for (int64_t i = 0; i < plane; ++i) acc += gp[co * plane + i];
          gb[co] += acc;
        }
      }
    };
  }
  return o;
}

// Nearest-neighbor upsampling by an integer ratio on the trailing `spatial`
// axes of a channels-first tensor ([C,H,W] with spatial=2, [C,D,H,W] with 3).
template <typename T>
inline Var<T> upsample_nearest(Var<T> x, int r, int spatial) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  if (xv.rank() != spatial + 1) throw std::invalid_argument("upsample_nearest: rank");
  Shape os = xv.shape();
  for (int a = 1; a <= spatial; ++a) os[static_cast<size_t>(a)] *= r;
  Tensor<T> out(os);
  const int64_t c = xv.dim(0);
  if (spatial == 2) {
    const int64_t h = xv.dim(1), w = xv.dim(2);
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t y = 0; y < h * r; ++y)
        for (int64_t x2 = 0; x2 < w * r; ++x2)
          out.at(ci, y, x2) = xv.at(ci, y / r, x2 / r);
  } else {
    const int64_t d = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t z = 0; z < d * r; ++z)
        for (int64_t y = 0; y < h * r; ++y)
          for (int64_t x2 = 0; x2 < w * r; ++x2)
            out.at(ci, z, y, x2) = xv.at(ci, z / r, y / r, x2 / r);
  }
  bool needs = x.requires_grad();
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, oid = o.id;
    tape.node(o.id).backward = [&tape, xid, oid, r, spatial]() {
      const Tensor<T>& g = tape.node(oid).grad;
      Tensor<T>& gx = tape.grad_buf(xid);
      const int64_t c = gx.dim(0);
      if (spatial == 2) {
        const int64_t h = gx.dim(1), w = gx.dim(2);
        for (int64_t ci = 0; ci < c; ++ci)
          for (int64_t y = 0; y < h * r; ++y)
            for (int64_t x2 = 0; x2 < w * r; ++x2)
              gx.at(ci, y / r, x2 / r) += g.at(ci, y, x2);
      } else {
        const int64_t d = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
        for (int64_t ci = 0; ci < c; ++ci)
          for (int64_t z = 0; z < d * r; ++z)
            for (int64_t y = 0; y < h * r; ++y)
              for (int64_t x2 = 0; x2 < w * r; ++x2)
                gx.at(ci, z / r, y / r, x2 / r) += g.at(ci, z, y, x2);
      }
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// Softmax / max along axis 0
// ---------------------------------------------------------------------------

// Softmax along axis 0, independently for each trailing index.
template <typename T>
inline Var<T> softmax0(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  const int64_t k = xv.dim(0);
  const int64_t rest = xv.numel() / k;
  Tensor<T> out(xv.shape());
  const T* xp = xv.data();
  T* op = out.data();
  for (int64_t j = 0; j < rest; ++j) {
    T mx = xp[j];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, xp[i * rest + j]);
    T denom = 0;
    for (int64_t i = 0; i < k; ++i) {
      T e = std::exp(xp[i * rest + j] - mx);
      op[i * rest + j] = e;
      denom += e;
    }
    for (int64_t i = 0; i < k; ++i) op[i * rest + j] /= denom;
  }
  bool needs = x.requires_grad();
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, oid = o.id;
    tape.node(o.id).backward = [&tape, xid, oid]() {
      const Tensor<T>& g = tape.node(oid).grad;
      const Tensor<T>& y = tape.value(oid);
      Tensor<T>& gx = tape.grad_buf(xid);
      const int64_t k = y.dim(0);
      const int64_t rest = y.numel() / k;
      for (int64_t j = 0; j < rest; ++j) {
        T dot = 0;
        for (int64_t i = 0; i < k; ++i) dot += g[i * rest + j] * y[i * rest + j];
        for (int64_t i = 0; i < k; ++i)
          gx[i * rest + j] += y[i * rest + j] * (g[i * rest + j] - dot);
      }
    };
  }
  return o;
}

// Max along axis 0; gradient routes to the (first) argmax entry.
template <typename T>
inline Var<T> max0(Var<T> x) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  const int64_t k = xv.dim(0);
  const int64_t rest = xv.numel() / k;
  Shape os(xv.shape().begin() + 1, xv.shape().end());
  Tensor<T> out(os);
  std::vector<int64_t> arg(static_cast<size_t>(rest));
  for (int64_t j = 0; j < rest; ++j) {
    T mx = xv[j];
    int64_t am = 0;
    for (int64_t i = 1; i < k; ++i) {
      T v = xv[i * rest + j];
      if (v > mx) {
        mx = v;
        am = i;
      }
    }
    out[j] = mx;
    arg[static_cast<size_t>(j)] = am;
  }
  bool needs = x.requires_grad();
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, oid = o.id;
    tape.node(o.id).backward = [&tape, xid, oid, arg = std::move(arg), rest]() {
      const Tensor<T>& g = tape.node(oid).grad;
      Tensor<T>& gx = tape.grad_buf(xid);
      for (int64_t j = 0; j < rest; ++j) gx[arg[static_cast<size_t>(j)] * rest + j] += g[j];
    };
  }
  return o;
}

// ---------------------------------------------------------------------------
// Small dense + broadcast helpers
// ---------------------------------------------------------------------------

// y = W x + b for vectors; W is [Cout,Cin].
template <typename T>
inline Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  const Tensor<T>& wv = w.val();
  const int64_t cin = xv.numel();
  const int64_t cout = wv.dim(0);
  if (wv.dim(1) != cin) throw std::invalid_argument("linear: shape mismatch");
  Tensor<T> out({cout});
  for (int64_t i = 0; i < cout; ++i) {
    T acc = b.defined() ? b.val()[i] : T(0);
    for (int64_t j = 0; j < cin; ++j) acc += wv.at(i, j) * xv[j];
    out[i] = acc;
  }
  bool needs = x.requires_grad() || w.requires_grad() || (b.defined() && b.requires_grad());
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, wid = w.id, bid = b.defined() ? b.id : -1, oid = o.id;
    bool nx = x.requires_grad(), nw = w.requires_grad();
    bool nb = b.defined() && b.requires_grad();
    tape.node(o.id).backward = [&tape, xid, wid, bid, oid, nx, nw, nb]() {
      const Tensor<T>& g = tape.node(oid).grad;
      const Tensor<T>& xv2 = tape.value(xid);
      const Tensor<T>& wv2 = tape.value(wid);
      const int64_t cout = wv2.dim(0), cin = wv2.dim(1);
      if (nx) {
        Tensor<T>& gx = tape.grad_buf(xid);
        for (int64_t j = 0; j < cin; ++j) {
          T acc = 0;
          for (int64_t i = 0; i < cout; ++i) acc += g[i] * wv2.at(i, j);
          gx[j] += acc;
        }
      }
      if (nw) {
        Tensor<T>& gw = tape.grad_buf(wid);
        for (int64_t i = 0; i < cout; ++i)
          for (int64_t j = 0; j < cin; ++j) gw.at(i, j) += g[i] * xv2[j];
      }
      if (nb) {
        Tensor<T>& gb = tape.grad_buf(bid);
        for (int64_t i = 0; i < cout; ++i) gb[i] += g[i];
      }
    };
  }
  return o;
}

// x[C,H,W] + v[C] broadcast over the spatial axes.
template <typename T>
inline Var<T> add_channel_bias(Var<T> x, Var<T> v) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  const Tensor<T>& vv = v.val();
  const int64_t c = xv.dim(0);
  if (vv.numel() != c) throw std::invalid_argument("add_channel_bias: channel mismatch");
  const int64_t plane = xv.numel() / c;
  Tensor<T> out(xv.shape());
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < plane; ++i) out[ci * plane + i] = xv[ci * plane + i] + vv[ci];
  bool needs = x.requires_grad() || v.requires_grad();
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, vid = v.id, oid = o.id;
    bool nx = x.requires_grad(), nv = v.requires_grad();
    tape.node(o.id).backward = [&tape, xid, vid, oid, nx, nv]() {
      const Tensor<T>& g = tape.node(oid).grad;
      const int64_t c = g.dim(0);
      const int64_t plane = g.numel() / c;
      if (nx) {
        Tensor<T>& gx = tape.grad_buf(xid);
        for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      }
      if (nv) {
        Tensor<T>& gv = tape.grad_buf(vid);
        for (int64_t ci = 0; ci < c; ++ci) {
          T acc = 0;
          for (int64_t i = 0; i < plane; ++i) acc += g[ci * plane + i];
          gv[ci] += acc;
        }
      }
    };
  }
  return o;
}

// Broadcast multiply of x[...,H,W] by a per-pixel map m[H,W].
template <typename T>
inline Var<T> mul_hw(Var<T> x, Var<T> m) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  const Tensor<T>& mv = m.val();
  const int64_t hw = mv.numel();
  const int64_t lead = xv.numel() / hw;
  if (lead * hw != xv.numel()) throw std::invalid_argument("mul_hw: size mismatch");
  Tensor<T> out(xv.shape());
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t i = 0; i < hw; ++i) out[l * hw + i] = xv[l * hw + i] * mv[i];
  bool needs = x.requires_grad() || m.requires_grad();
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, mid = m.id, oid = o.id;
    bool nx = x.requires_grad(), nm = m.requires_grad();
    tape.node(o.id).backward = [&tape, xid, mid, oid, nx, nm, hw, lead]() {
      const Tensor<T>& g = tape.node(oid).grad;
      const Tensor<T>& xv2 = tape.value(xid);
      const Tensor<T>& mv2 = tape.value(mid);
      if (nx) {
        Tensor<T>& gx = tape.grad_buf(xid);
        for (int64_t l = 0; l < lead; ++l)
          for (int64_t i = 0; i < hw; ++i) gx[l * hw + i] += g[l * hw + i] * mv2[i];
      }
      if (nm) {
        Tensor<T>& gm = tape.grad_buf(mid);
        for (int64_t i = 0; i < hw; ++i) {
          T acc = 0;
          for (int64_t l = 0; l < lead; ++l) acc += g[l * hw + i] * xv2[l * hw + i];
          gm[i] += acc;
        }
      }
    };
  }
  return o;
}

// Broadcast divide of x[...,H,W] by a per-pixel map m[H,W]; pixels where
// m == 0 produce 0 (used by cost-volume aggregation for empty weight sums).
template <typename T>
inline Var<T> div_hw_guarded(Var<T> x, Var<T> m) {
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.val();
  const Tensor<T>& mv = m.val();
  const int64_t hw = mv.numel();
  const int64_t lead = xv.numel() / hw;
  if (lead * hw != xv.numel()) throw std::invalid_argument("div_hw_guarded: size mismatch");
  Tensor<T> out(xv.shape());
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t i = 0; i < hw; ++i)
      out[l * hw + i] = mv[i] == T(0) ? T(0) : xv[l * hw + i] / mv[i];
  bool needs = x.requires_grad() || m.requires_grad();
  Var<T> o = detail::finish_op(tape, std::move(out), needs, std::function<void()>());
  if (tape.recording && needs) {
    int xid = x.id, mid = m.id, oid = o.id;
    bool nx = x.requires_grad(), nm = m.requires_grad();
    tape.node(o.id).backward = [&tape, xid, mid, oid, nx, nm, hw, lead]() {
      const Tensor<T>& g = tape.node(oid).grad;
      const Tensor<T>& xv2 = tape.value(xid);
      const Tensor<T>& mv2 = tape.value(mid);
      if (nx) {
        Tensor<T>& gx = tape.grad_buf(xid);
        for (int64_t l = 0; l < lead; ++l)
          for (int64_t i = 0; i < hw; ++i)
            if (mv2[i] != T(0)) gx[l * hw + i] += g[l * hw + i] / mv2[i];
      }
      if (nm) {
        Tensor<T>& gm = tape.grad_buf(mid);
        for (int64_t i = 0; i < hw; ++i) {
          if (mv2[i] == T(0)) continue;
          T acc = 0;
          for (int64_t l = 0; l < lead; ++l)
            acc += -g[l * hw + i] * xv2[l * hw + i] / (mv2[i] * mv2[i]);
          gm[i] += acc;
        }
      }
    };
  }
  return o;
}

}  // namespace dmvs
