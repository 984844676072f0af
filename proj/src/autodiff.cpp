#include "dra/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "dra/errors.hpp"

namespace dra {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, grad_enabled_, false, {}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  Var v = input(p.value);
  param_nodes_.emplace(&p, v.id);
  return v;
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& p : parents) needs = needs || nodes_[p.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(fn) : BackwardFn{}});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

double* Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad.data();
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!nodes_[v.id].requires_grad) return;
  double* dst = grad_buffer(v);
  const double* src = g.data();
  const std::size_t n = nodes_[v.id].value.size();
  if (g.size() != n) throw ArgumentError("gradient size mismatch on tape node");
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

void Tape::backward(Var root) {
  if (!grad_enabled_) throw ArgumentError("backward() on a tape with gradients disabled");
  Node& r = nodes_[root.id];
  if (r.value.size() != 1) throw ArgumentError("backward() needs a scalar root, got " + shape_string(r.value.shape()));
  if (!r.requires_grad) return;
  r.grad = Tensor(r.value.shape(), 1.0);
  r.has_grad = true;
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.has_grad ? n.grad : Tensor(n.value.shape());
}

Tensor Tape::param_grad(const Parameter& p) const {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return grad(Var{const_cast<Tape*>(this), it->second});
  return Tensor(p.value.shape());
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ArgumentError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ArgumentError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_string(a.shape()));
  }
}

template <typename F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) {
      double* d = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (t.requires_grad(a)) {
      double* d = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      double* d = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = map_values(a.value(), [s](double v) { return v * s; });
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = map_values(a.value(), [s](double v) { return v + s; });
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
}

Var silu(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return v * sigmoid(v); });
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    double* d = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = sigmoid(xv[i]);
      d[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Var relu(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    double* d = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += xv[i] > 0.0 ? g[i] : 0.0;
  });
}

Var square(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return v * v; });
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    double* d = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += 2.0 * xv[i] * g[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape->record(Tensor(Shape{}, std::vector<double>{s}), {x}, [x](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(x);
    const std::size_t n = x.value().size();
    for (std::size_t i = 0; i < n; ++i) d[i] += g[0];
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw ArgumentError("mean of empty tensor");
  return scale(sum(x), 1.0 / n);
}

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw ArgumentError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                        shape_string(b.shape()));
  }
  Tensor out({a.shape()[0], b.shape()[1]});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    ConstMatrixMap gm = g.matrix();
    if (t.requires_grad(a)) {
      MatrixMap da(t.grad_buffer(a), a.shape()[0], a.shape()[1]);
      da.noalias() += gm * b.value().matrix().transpose();
    }
    if (t.requires_grad(b)) {
      MatrixMap db(t.grad_buffer(b), b.shape()[0], b.shape()[1]);
      db.noalias() += a.value().matrix().transpose() * gm;
    }
  });
}

Var add_row_bias(Var x, Var bias) {
  require_rank(x, 2, "add_row_bias");
  const int n = x.shape()[0], m = x.shape()[1];
  if (bias.value().size() != static_cast<std::size_t>(m)) throw ArgumentError("add_row_bias: bias length mismatch");
  Tensor out = x.value();
  const Tensor& b = bias.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[i * m + j] += b[j];
  return x.tape->record(std::move(out), {x, bias}, [x, bias, n, m](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.requires_grad(bias)) {
      double* d = t.grad_buffer(bias);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) d[j] += g[i * m + j];
    }
  });
}

Var batched_matmul(Var a, Var b, bool trans_a, bool trans_b) {
  require_rank(a, 3, "batched_matmul");
  require_rank(b, 3, "batched_matmul");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as[0] != bs[0]) throw ArgumentError("batched_matmul: batch mismatch");
  const int batch = as[0];
  const int m = trans_a ? as[2] : as[1];
  const int k = trans_a ? as[1] : as[2];
  const int kb = trans_b ? bs[2] : bs[1];
  const int n = trans_b ? bs[1] : bs[2];
  if (k != kb) throw ArgumentError("batched_matmul: inner dimensions differ");
  Tensor out({batch, m, n});
  const std::size_t a_stride = static_cast<std::size_t>(as[1]) * as[2];
  const std::size_t b_stride = static_cast<std::size_t>(bs[1]) * bs[2];
  const std::size_t o_stride = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < batch; ++i) {
    ConstMatrixMap am(a.value().data() + i * a_stride, as[1], as[2]);
    ConstMatrixMap bm(b.value().data() + i * b_stride, bs[1], bs[2]);
    MatrixMap om(out.data() + i * o_stride, m, n);
    if (!trans_a && !trans_b) om.noalias() = am * bm;
    else if (trans_a && !trans_b) om.noalias() = am.transpose() * bm;
    else if (!trans_a && trans_b) om.noalias() = am * bm.transpose();
    else om.noalias() = am.transpose() * bm.transpose();
  }
  return a.tape->record(std::move(out), {a, b},
                        [a, b, trans_a, trans_b, batch, m, n, a_stride, b_stride, o_stride](Tape& t, const Tensor& g) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const bool need_a = t.requires_grad(a), need_b = t.requires_grad(b);
    double* da_ptr = need_a ? t.grad_buffer(a) : nullptr;
    double* db_ptr = need_b ? t.grad_buffer(b) : nullptr;
    for (int i = 0; i < batch; ++i) {
      ConstMatrixMap am(a.value().data() + i * a_stride, as[1], as[2]);
      ConstMatrixMap bm(b.value().data() + i * b_stride, bs[1], bs[2]);
      ConstMatrixMap gm(g.data() + i * o_stride, m, n);
      if (need_a) {
        MatrixMap da(da_ptr + i * a_stride, as[1], as[2]);
        if (!trans_a && !trans_b) da.noalias() += gm * bm.transpose();
        else if (trans_a && !trans_b) da.noalias() += bm * gm.transpose();
        else if (!trans_a && trans_b) da.noalias() += gm * bm;
        else da.noalias() += bm.transpose() * gm.transpose();
      }
      if (need_b) {
        MatrixMap db(db_ptr + i * b_stride, bs[1], bs[2]);
        if (!trans_a && !trans_b) db.noalias() += am.transpose() * gm;
        else if (trans_a && !trans_b) db.noalias() += am * gm;
        else if (!trans_a && trans_b) db.noalias() += gm.transpose() * am;
        else db.noalias() += gm.transpose() * am.transpose();
      }
    }
  });
}

Var transpose12(Var x) {
  require_rank(x, 3, "transpose12");
  const int b = x.shape()[0], r = x.shape()[1], c = x.shape()[2];
  Tensor out({b, c, r});
  const Tensor& xv = x.value();
  for (int i = 0; i < b; ++i)
    for (int p = 0; p < r; ++p)
      for (int q = 0; q < c; ++q) out[(i * c + q) * r + p] = xv[(i * r + p) * c + q];
  return x.tape->record(std::move(out), {x}, [x, b, r, c](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(x);
    for (int i = 0; i < b; ++i)
      for (int p = 0; p < r; ++p)
        for (int q = 0; q < c; ++q) d[(i * r + p) * c + q] += g[(i * c + q) * r + p];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var slice_cols(Var x, int begin, int end) {
  require_rank(x, 2, "slice_cols");
  const int n = x.shape()[0], m = x.shape()[1];
  if (begin < 0 || end > m || begin >= end) throw ArgumentError("slice_cols: range out of bounds");
  const int w = end - begin;
  Tensor out({n, w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) out[i * w + j] = x.value()[i * m + begin + j];
  return x.tape->record(std::move(out), {x}, [x, n, m, begin, w](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(x);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j) d[i * m + begin + j] += g[i * w + j];
  });
}

Var conv2d(Var x, Var weight, Var bias, int stride, int padding) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const int o = ws[0], k = ws[2];
  if (ws[1] != c || ws[3] != k) throw ArgumentError("conv2d: weight " + shape_string(ws) + " vs input " + shape_string(xs));
  if (bias.value().size() != static_cast<std::size_t>(o)) throw ArgumentError("conv2d: bias length mismatch");
  const int ho = (h + 2 * padding - k) / stride + 1;
  const int wo = (w + 2 * padding - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ArgumentError("conv2d: output would be empty");
  const int ck = c * k * k;
  const int pix = ho * wo;
  const int cols = n * pix;

  // im2col: row (ci, ky, kx), column (sample, oy, ox).
  auto col = std::make_shared<RowMatrix>(RowMatrix::Zero(ck, cols));
  const double* xv = x.value().data();
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = col->data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * cols;
        for (int s = 0; s < n; ++s) {
          const double* plane = xv + (static_cast<std::size_t>(s) * c + ci) * h * w;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= w) continue;
              row[s * pix + oy * wo + ox] = plane[iy * w + ix];
            }
          }
        }
      }

  ConstMatrixMap wm(weight.value().data(), o, ck);
  RowMatrix res = wm * (*col);
  Tensor out({n, o, ho, wo});
  const double* bv = bias.value().data();
  for (int s = 0; s < n; ++s)
    for (int oc = 0; oc < o; ++oc) {
      double* dst = out.data() + (static_cast<std::size_t>(s) * o + oc) * pix;
      const double* src = res.data() + static_cast<std::size_t>(oc) * cols + s * pix;
      for (int p = 0; p < pix; ++p) dst[p] = src[p] + bv[oc];
    }

  return x.tape->record(std::move(out), {x, weight, bias},
                        [x, weight, bias, col, n, c, h, w, o, k, ho, wo, stride, padding](Tape& t, const Tensor& g) {
    const int ck = c * k * k;
    const int pix = ho * wo;
    const int cols = n * pix;
    RowMatrix gm(o, cols);
    for (int s = 0; s < n; ++s)
      for (int oc = 0; oc < o; ++oc) {
        const double* src = g.data() + (static_cast<std::size_t>(s) * o + oc) * pix;
        double* dst = gm.data() + static_cast<std::size_t>(oc) * cols + s * pix;
        std::copy_n(src, pix, dst);
      }
    if (t.requires_grad(weight)) {
      MatrixMap dw(t.grad_buffer(weight), o, ck);
      dw.noalias() += gm * col->transpose();
    }
    if (t.requires_grad(bias)) {
      double* db = t.grad_buffer(bias);
      for (int oc = 0; oc < o; ++oc) db[oc] += gm.row(oc).sum();
    }
    if (t.requires_grad(x)) {
      ConstMatrixMap wm(weight.value().data(), o, ck);
      RowMatrix dcol = wm.transpose() * gm;
      double* dx = t.grad_buffer(x);
      for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const double* row = dcol.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * cols;
            for (int s = 0; s < n; ++s) {
              double* plane = dx + (static_cast<std::size_t>(s) * c + ci) * h * w;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride - padding + ky;
                if (iy < 0 || iy >= h) continue;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * stride - padding + kx;
                  if (ix < 0 || ix >= w) continue;
                  plane[iy * w + ix] += row[s * pix + oy * wo + ox];
                }
              }
            }
          }
    }
  });
}

Var upsample_nearest2x(Var x) {
  require_rank(x, 4, "upsample_nearest2x");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  Tensor out({n, c, 2 * h, 2 * w});
  const Tensor& xv = x.value();
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j)
        out[(static_cast<std::size_t>(p) * 2 * h + i) * 2 * w + j] = xv[(static_cast<std::size_t>(p) * h + i / 2) * w + j / 2];
  return x.tape->record(std::move(out), {x}, [x, n, c, h, w](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(x);
    for (int p = 0; p < n * c; ++p)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j)
          d[(static_cast<std::size_t>(p) * h + i / 2) * w + j / 2] += g[(static_cast<std::size_t>(p) * 2 * h + i) * 2 * w + j];
  });
}

Var spatial_mean(Var x) {
  require_rank(x, 4, "spatial_mean");
  const int n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  Tensor out({n, c});
  const Tensor& xv = x.value();
  for (int p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (int i = 0; i < hw; ++i) s += xv[static_cast<std::size_t>(p) * hw + i];
    out[p] = s / hw;
  }
  return x.tape->record(std::move(out), {x}, [x, n, c, hw](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(x);
    for (int p = 0; p < n * c; ++p) {
      const double gi = g[p] / hw;
      for (int i = 0; i < hw; ++i) d[static_cast<std::size_t>(p) * hw + i] += gi;
    }
  });
}

Var add_channel_bias(Var x, Var v) {
  require_rank(x, 4, "add_channel_bias");
  require_rank(v, 2, "add_channel_bias");
  const int n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (v.shape()[0] != n || v.shape()[1] != c) throw ArgumentError("add_channel_bias: shape mismatch");
  Tensor out = x.value();
  const Tensor& vv = v.value();
  for (int p = 0; p < n * c; ++p)
    for (int i = 0; i < hw; ++i) out[static_cast<std::size_t>(p) * hw + i] += vv[p];
  return x.tape->record(std::move(out), {x, v}, [x, v, n, c, hw](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.requires_grad(v)) {
      double* d = t.grad_buffer(v);
      for (int p = 0; p < n * c; ++p) {
        double s = 0.0;
        for (int i = 0; i < hw; ++i) s += g[static_cast<std::size_t>(p) * hw + i];
        d[p] += s;
      }
    }
  });
}

Var token_mean(Var x) {
  require_rank(x, 3, "token_mean");
  const int n = x.shape()[0], tk = x.shape()[1], d = x.shape()[2];
  Tensor out({n, d});
  const Tensor& xv = x.value();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < tk; ++j)
      for (int q = 0; q < d; ++q) out[i * d + q] += xv[(static_cast<std::size_t>(i) * tk + j) * d + q];
  for (auto& v : out.values()) v /= tk;
  return x.tape->record(std::move(out), {x}, [x, n, tk, d](Tape& t, const Tensor& g) {
    double* dx = t.grad_buffer(x);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < tk; ++j)
        for (int q = 0; q < d; ++q) dx[(static_cast<std::size_t>(i) * tk + j) * d + q] += g[i * d + q] / tk;
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const int d = x.shape().back();
  if (gain.value().size() != static_cast<std::size_t>(d) || bias.value().size() != static_cast<std::size_t>(d)) {
    throw ArgumentError("layer_norm: gain/bias length mismatch");
  }
  const int rows = static_cast<int>(x.value().size() / d);
  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (int r = 0; r < rows; ++r) {
    const double* xr = xv.data() + static_cast<std::size_t>(r) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int j = 0; j < d; ++j) {
      const double xh = (xr[j] - mu) * is;
      (*xhat)[static_cast<std::size_t>(r) * d + j] = xh;
      out[static_cast<std::size_t>(r) * d + j] = xh * gv[j] + bv[j];
    }
  }
  return x.tape->record(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std, rows, d](Tape& t, const Tensor& g) {
    const Tensor& gv = gain.value();
    const bool need_x = t.requires_grad(x);
    double* dx = need_x ? t.grad_buffer(x) : nullptr;
    double* dg = t.requires_grad(gain) ? t.grad_buffer(gain) : nullptr;
    double* db = t.requires_grad(bias) ? t.grad_buffer(bias) : nullptr;
    std::vector<double> dxh(d);
    for (int r = 0; r < rows; ++r) {
      const double* gr = g.data() + static_cast<std::size_t>(r) * d;
      const double* xr = xhat->data() + static_cast<std::size_t>(r) * d;
      double m1 = 0.0, m2 = 0.0;
      for (int j = 0; j < d; ++j) {
        if (dg) dg[j] += gr[j] * xr[j];
        if (db) db[j] += gr[j];
        dxh[j] = gr[j] * gv[j];
        m1 += dxh[j];
        m2 += dxh[j] * xr[j];
      }
      m1 /= d;
      m2 /= d;
      if (need_x) {
        for (int j = 0; j < d; ++j)
          dx[static_cast<std::size_t>(r) * d + j] += (*inv_std)[r] * (dxh[j] - m1 - xr[j] * m2);
      }
    }
  });
}

Var softmax_last(Var x) {
  const int d = x.shape().back();
  const int rows = static_cast<int>(x.value().size() / d);
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (int r = 0; r < rows; ++r) {
    const double* xr = xv.data() + static_cast<std::size_t>(r) * d;
    double* yr = out.data() + static_cast<std::size_t>(r) * d;
    const double mx = *std::max_element(xr, xr + d);
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (int j = 0; j < d; ++j) yr[j] /= s;
  }
  Tensor yv = out;
  return x.tape->record(std::move(out), {x}, [x, rows, d, yv](Tape& t, const Tensor& g) {
    double* dx = t.grad_buffer(x);
    for (int r = 0; r < rows; ++r) {
      const double* yr = yv.data() + static_cast<std::size_t>(r) * d;
      const double* gr = g.data() + static_cast<std::size_t>(r) * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += gr[j] * yr[j];
      for (int j = 0; j < d; ++j) dx[static_cast<std::size_t>(r) * d + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var embedding(Var table, std::span<const int> labels) {
  require_rank(table, 2, "embedding");
  const int k = table.shape()[0], c = table.shape()[1];
  const int n = static_cast<int>(labels.size());
  std::vector<int> idx(labels.begin(), labels.end());
  Tensor out({n, c});
  for (int i = 0; i < n; ++i) {
    if (idx[i] < 0 || idx[i] >= k) throw ArgumentError("embedding: label out of range");
    std::copy_n(table.value().data() + static_cast<std::size_t>(idx[i]) * c, c, out.data() + static_cast<std::size_t>(i) * c);
  }
  return table.tape->record(std::move(out), {table}, [table, idx, c](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(table);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < c; ++j) d[static_cast<std::size_t>(idx[i]) * c + j] += g[i * c + j];
  });
}

namespace {

// Row-wise log-softmax of a [N, K] tensor.
Tensor log_softmax_rows(const Tensor& z) {
  const int n = z.dim(0), k = z.dim(1);
  Tensor out(z.shape());
  for (int i = 0; i < n; ++i) {
    const double* zr = z.data() + static_cast<std::size_t>(i) * k;
    const double mx = *std::max_element(zr, zr + k);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(zr[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = zr[j] - lse;
  }
  return out;
}

}  // namespace

Var cross_entropy_rows(Var logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy_rows");
  const int n = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<int>(labels.size()) != n) throw ArgumentError("cross_entropy_rows: label count mismatch");
  std::vector<int> y(labels.begin(), labels.end());
  Tensor lsm = log_softmax_rows(logits.value());
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    if (y[i] < 0 || y[i] >= k) throw ArgumentError("cross_entropy_rows: label out of range");
    out[i] = -lsm[static_cast<std::size_t>(i) * k + y[i]];
  }
  return logits.tape->record(std::move(out), {logits}, [logits, y, lsm, n, k](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(logits);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const double p = std::exp(lsm[static_cast<std::size_t>(i) * k + j]);
        d[static_cast<std::size_t>(i) * k + j] += g[i] * (p - (j == y[i] ? 1.0 : 0.0));
      }
  });
}

Var kl_rows(Var p_logits, Var q_logits) {
  require_rank(p_logits, 2, "kl_rows");
  require_same_shape(p_logits, q_logits, "kl_rows");
  const int n = p_logits.shape()[0], k = p_logits.shape()[1];
  Tensor lp = log_softmax_rows(p_logits.value());
  Tensor lq = log_softmax_rows(q_logits.value());
  Tensor out({n});
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      const std::size_t a = static_cast<std::size_t>(i) * k + j;
      s += std::exp(lp[a]) * (lp[a] - lq[a]);
    }
    out[i] = s;
  }
  Tensor kl = out;
  return p_logits.tape->record(std::move(out), {p_logits, q_logits}, [p_logits, q_logits, lp, lq, kl, n, k](Tape& t, const Tensor& g) {
    double* dp = t.requires_grad(p_logits) ? t.grad_buffer(p_logits) : nullptr;
    double* dq = t.requires_grad(q_logits) ? t.grad_buffer(q_logits) : nullptr;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const std::size_t a = static_cast<std::size_t>(i) * k + j;
        const double p = std::exp(lp[a]);
        if (dp) dp[a] += g[i] * p * ((lp[a] - lq[a]) - kl[i]);
        if (dq) dq[a] += g[i] * (std::exp(lq[a]) - p);
      }
  });
}

Var cosine_rows(Var a, const Tensor& target) {
  require_rank(a, 2, "cosine_rows");
  if (a.shape() != target.shape()) {
    throw ArgumentError("cosine_rows: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(target.shape()));
  }
  const int n = a.shape()[0], d = a.shape()[1];
  Tensor out({n});
  std::vector<double> na(n), nt(n);
  const Tensor& av = a.value();
  for (int i = 0; i < n; ++i) {
    double dot = 0.0, sa = 0.0, st = 0.0;
    for (int j = 0; j < d; ++j) {
      const std::size_t q = static_cast<std::size_t>(i) * d + j;
      dot += av[q] * target[q];
      sa += av[q] * av[q];
      st += target[q] * target[q];
    }
    na[i] = std::sqrt(sa);
    nt[i] = std::sqrt(st);
    out[i] = (na[i] > 0.0 && nt[i] > 0.0) ? dot / (na[i] * nt[i]) : 0.0;
  }
  Tensor cos = out;
  return a.tape->record(std::move(out), {a}, [a, target, na, nt, cos, n, d](Tape& t, const Tensor& g) {
    double* da = t.grad_buffer(a);
    const Tensor& av = a.value();
    for (int i = 0; i < n; ++i) {
      if (!(na[i] > 0.0 && nt[i] > 0.0)) continue;
      for (int j = 0; j < d; ++j) {
        const std::size_t q = static_cast<std::size_t>(i) * d + j;
        da[q] += g[i] * (target[q] / (na[i] * nt[i]) - cos[i] * av[q] / (na[i] * na[i]));
      }
    }
  });
}

}  // namespace dra
