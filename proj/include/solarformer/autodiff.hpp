// Reverse-mode autodiff on a flat tape. Nodes are appended in forward order,
// so walking the tape backwards is a valid topological order. Backward
// closures read values straight off the tape; only intermediates that cannot
// be recomputed cheaply (attention weights, norm statistics) are captured.
#pragma once

#include "solarformer/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

namespace sf {

struct VarId {
  std::int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

template <typename T>
class Tape {
public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void(Tape&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  const Tensor<T>& val(VarId id) const { return nodes_[static_cast<std::size_t>(id.idx)].value; }
  const Tensor<T>& grad(VarId id) const { return nodes_[static_cast<std::size_t>(id.idx)].grad; }
  bool needs_grad(VarId id) const { return nodes_[static_cast<std::size_t>(id.idx)].needs_grad; }

  VarId leaf(Tensor<T> v, bool requires_grad) {
    return push(std::move(v), requires_grad && grad_enabled_);
  }
  VarId constant(Tensor<T> v) { return push(std::move(v), false); }

  // Seeds d(root)/d(root) = 1 and sweeps the tape in reverse. root must be a
  // single-element tensor.
  void backward(VarId root) {
    Node& r = node(root);
    if (r.value.numel() != 1) throw ShapeError("backward root must be scalar");
    grad_ref(root).fill(T(1));
    for (std::int32_t i = root.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this);
    }
  }

  // ---- elementwise -------------------------------------------------------

  VarId add(VarId a, VarId b) {
    check_same(a, b, "add");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    VarId id = push(std::move(out), needs_grad(a) || needs_grad(b));
    attach(id, [id, a, b](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      t.accum(a, g);
      t.accum(b, g);
    });
    return id;
  }

  VarId sub(VarId a, VarId b) {
    check_same(a, b, "sub");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    VarId id = push(std::move(out), needs_grad(a) || needs_grad(b));
    attach(id, [id, a, b](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      t.accum(a, g);
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad_ref(b);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
      }
    });
    return id;
  }

  VarId mul(VarId a, VarId b) {
    check_same(a, b, "mul");
    Tensor<T> out = val(a);
    const Tensor<T>& vb = val(b);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    VarId id = push(std::move(out), needs_grad(a) || needs_grad(b));
    attach(id, [id, a, b](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      if (t.needs_grad(a)) {
        Tensor<T>& ga = t.grad_ref(a);
        const Tensor<T>& vb2 = t.val(b);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb2[i];
      }
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad_ref(b);
        const Tensor<T>& va2 = t.val(a);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va2[i];
      }
    });
    return id;
  }

  // k*x + c, elementwise
  VarId affine(VarId a, double k, double c) {
    Tensor<T> out = val(a);
    for (std::int64_t i = 0; i < out.numel(); ++i)
      out[i] = static_cast<T>(k) * out[i] + static_cast<T>(c);
    VarId id = push(std::move(out), needs_grad(a));
    attach(id, [id, a, k](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      Tensor<T>& ga = t.grad_ref(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += static_cast<T>(k) * g[i];
    });
    return id;
  }

  VarId scale(VarId a, double k) { return affine(a, k, 0.0); }

  VarId mul_const(VarId a, const Tensor<T>& w) {
    check_shape(a, w.shape(), "mul_const");
    Tensor<T> out = val(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= w[i];
    VarId id = push(std::move(out), needs_grad(a));
    attach(id, [id, a, w](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      Tensor<T>& ga = t.grad_ref(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * w[i];
    });
    return id;
  }

  VarId log(VarId a) {
    Tensor<T> out = val(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    VarId id = push(std::move(out), needs_grad(a));
    attach(id, [id, a](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      const Tensor<T>& va = t.val(a);
      Tensor<T>& ga = t.grad_ref(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / va[i];
    });
    return id;
  }

  VarId relu(VarId a) {
    Tensor<T> out = val(a);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
    VarId id = push(std::move(out), needs_grad(a));
    attach(id, [id, a](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      const Tensor<T>& va = t.val(a);
      Tensor<T>& ga = t.grad_ref(a);
      for (std::int64_t i = 0; i < g.numel(); ++i)
        if (va[i] > T(0)) ga[i] += g[i];
    });
    return id;
  }

  // Exact GELU: x * Phi(x).
  VarId gelu(VarId a) {
    const Tensor<T>& va = val(a);
    Tensor<T> out(va.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      const T x = va[i];
      out[i] = x * T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
    }
    VarId id = push(std::move(out), needs_grad(a));
    attach(id, [id, a](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      const Tensor<T>& va2 = t.val(a);
      Tensor<T>& ga = t.grad_ref(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        const T x = va2[i];
        const T phi = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
        const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * x * x);
        ga[i] += g[i] * (phi + x * pdf);
      }
    });
    return id;
  }

  VarId sigmoid(VarId a) {
    const Tensor<T>& va = val(a);
    Tensor<T> out(va.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      const T x = va[i];
      out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                         : std::exp(x) / (T(1) + std::exp(x));
    }
    VarId id = push(std::move(out), needs_grad(a));
    attach(id, [id, a](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      const Tensor<T>& s = t.val(id);
      Tensor<T>& ga = t.grad_ref(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s[i] * (T(1) - s[i]);
    });
    return id;
  }

  // ---- matrix ops --------------------------------------------------------

  VarId matmul(VarId a, VarId b) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0))
      throw ShapeError("matmul " + shape_str(va.shape()) + " x " + shape_str(vb.shape()));
    const std::int64_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Tensor<T> out({m, n});
    out.mat(m, n).noalias() = va.mat(m, k) * vb.mat(k, n);
    VarId id = push(std::move(out), needs_grad(a) || needs_grad(b));
    attach(id, [id, a, b, m, k, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      if (t.needs_grad(a))
        t.grad_ref(a).mat(m, k).noalias() += g.mat(m, n) * t.val(b).mat(k, n).transpose();
      if (t.needs_grad(b))
        t.grad_ref(b).mat(k, n).noalias() += t.val(a).mat(m, k).transpose() * g.mat(m, n);
    });
    return id;
  }

  // y = x*W + b  with x:[m,k], W:[k,n], b:[n]
  VarId linear(VarId x, VarId w, VarId b) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    const Tensor<T>& vb = val(b);
    if (vx.ndim() != 2 || vw.ndim() != 2 || vx.dim(1) != vw.dim(0) || vb.numel() != vw.dim(1))
      throw ShapeError("linear " + shape_str(vx.shape()) + " x " + shape_str(vw.shape()));
    const std::int64_t m = vx.dim(0), k = vx.dim(1), n = vw.dim(1);
    Tensor<T> out({m, n});
    auto om = out.mat(m, n);
    om.noalias() = vx.mat(m, k) * vw.mat(k, n);
    om.rowwise() += vb.mat(1, n).row(0);
    VarId id = push(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b));
    attach(id, [id, x, w, b, m, k, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      if (t.needs_grad(x))
        t.grad_ref(x).mat(m, k).noalias() += g.mat(m, n) * t.val(w).mat(k, n).transpose();
      if (t.needs_grad(w))
        t.grad_ref(w).mat(k, n).noalias() += t.val(x).mat(m, k).transpose() * g.mat(m, n);
      if (t.needs_grad(b))
        t.grad_ref(b).mat(1, n).row(0) += g.mat(m, n).colwise().sum();
    });
    return id;
  }

  VarId add_row(VarId x, VarId v) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vv = val(v);
    const std::int64_t m = vx.dim(0), n = vx.numel() / vx.dim(0);
    if (vv.numel() != n) throw ShapeError("add_row width mismatch");
    Tensor<T> out = vx;
    out.mat(m, n).rowwise() += vv.mat(1, n).row(0);
    VarId id = push(std::move(out), needs_grad(x) || needs_grad(v));
    attach(id, [id, x, v, m, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      t.accum(x, g);
      if (t.needs_grad(v)) t.grad_ref(v).mat(1, n).row(0) += g.mat(m, n).colwise().sum();
    });
    return id;
  }

  VarId broadcast_row(VarId v, std::int64_t rows) {
    const Tensor<T>& vv = val(v);
    const std::int64_t n = vv.numel();
    Tensor<T> out({rows, n});
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < n; ++j) out.at2(r, j) = vv[j];
    VarId id = push(std::move(out), needs_grad(v));
    attach(id, [id, v, rows, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      Tensor<T>& gv = t.grad_ref(v);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < n; ++j) gv[j] += g.at2(r, j);
    });
    return id;
  }

  VarId transpose2(VarId x) {
    const Tensor<T>& vx = val(x);
    const std::int64_t m = vx.dim(0), n = vx.dim(1);
    Tensor<T> out({n, m});
    out.mat(n, m) = vx.mat(m, n).transpose();
    VarId id = push(std::move(out), needs_grad(x));
    attach(id, [id, x, m, n](Tape& t) {
      t.grad_ref(x).mat(m, n) += t.grad(id).mat(n, m).transpose();
    });
    return id;
  }

  VarId reshape(VarId x, Shape s) {
    Tensor<T> out = val(x).reshaped(std::move(s));
    VarId id = push(std::move(out), needs_grad(x));
    attach(id, [id, x](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      Tensor<T>& gx = t.grad_ref(x);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
    return id;
  }

  // ---- slicing / concatenation ------------------------------------------

  VarId slice_rows(VarId x, std::int64_t r0, std::int64_t r1) {
    const Tensor<T>& vx = val(x);
    const std::int64_t m = vx.dim(0), n = vx.numel() / m;
    if (r0 < 0 || r1 > m || r0 >= r1) throw ShapeError("slice_rows range");
    Shape s = vx.shape();
    s[0] = r1 - r0;
    Tensor<T> out(s);
    std::copy(vx.data() + r0 * n, vx.data() + r1 * n, out.data());
    VarId id = push(std::move(out), needs_grad(x));
    attach(id, [id, x, r0, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      Tensor<T>& gx = t.grad_ref(x);
      T* dst = gx.data() + r0 * n;
      for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    });
    return id;
  }

  VarId slice_cols(VarId x, std::int64_t c0, std::int64_t c1) {
    const Tensor<T>& vx = val(x);
    const std::int64_t m = vx.dim(0), n = vx.dim(1);
    if (c0 < 0 || c1 > n || c0 >= c1) throw ShapeError("slice_cols range");
    const std::int64_t w = c1 - c0;
    Tensor<T> out({m, w});
    for (std::int64_t r = 0; r < m; ++r)
      std::copy(vx.data() + r * n + c0, vx.data() + r * n + c1, out.data() + r * w);
    VarId id = push(std::move(out), needs_grad(x));
    attach(id, [id, x, c0, m, n, w](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      Tensor<T>& gx = t.grad_ref(x);
      for (std::int64_t r = 0; r < m; ++r) {
        const T* src = g.data() + r * w;
        T* dst = gx.data() + r * n + c0;
        for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
      }
    });
    return id;
  }

  VarId concat_rows(const std::vector<VarId>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const std::int64_t n = val(parts[0]).numel() / val(parts[0]).dim(0);
    std::int64_t m = 0;
    bool ng = false;
    for (VarId p : parts) {
      const Tensor<T>& vp = val(p);
      if (vp.numel() / vp.dim(0) != n) throw ShapeError("concat_rows width mismatch");
      m += vp.dim(0);
      ng = ng || needs_grad(p);
    }
    Shape s = val(parts[0]).shape();
    s[0] = m;
    Tensor<T> out(s);
    std::int64_t r = 0;
    std::vector<std::int64_t> offsets;
    for (VarId p : parts) {
      const Tensor<T>& vp = val(p);
      offsets.push_back(r);
      std::copy(vp.data(), vp.data() + vp.numel(), out.data() + r * n);
      r += vp.dim(0);
    }
    VarId id = push(std::move(out), ng);
    attach(id, [id, parts, offsets, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!t.needs_grad(parts[i])) continue;
        Tensor<T>& gp = t.grad_ref(parts[i]);
        const T* src = g.data() + offsets[i] * n;
        for (std::int64_t j = 0; j < gp.numel(); ++j) gp[j] += src[j];
      }
    });
    return id;
  }

  VarId concat_cols(const std::vector<VarId>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const std::int64_t m = val(parts[0]).dim(0);
    std::int64_t n = 0;
    bool ng = false;
    for (VarId p : parts) {
      if (val(p).dim(0) != m) throw ShapeError("concat_cols height mismatch");
      n += val(p).dim(1);
      ng = ng || needs_grad(p);
    }
    Tensor<T> out({m, n});
    std::int64_t c = 0;
    std::vector<std::int64_t> offsets;
    for (VarId p : parts) {
      const Tensor<T>& vp = val(p);
      const std::int64_t w = vp.dim(1);
      offsets.push_back(c);
      for (std::int64_t r = 0; r < m; ++r)
        std::copy(vp.data() + r * w, vp.data() + (r + 1) * w, out.data() + r * n + c);
      c += w;
    }
    VarId id = push(std::move(out), ng);
    attach(id, [id, parts, offsets, m, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!t.needs_grad(parts[i])) continue;
        Tensor<T>& gp = t.grad_ref(parts[i]);
        const std::int64_t w = gp.dim(1);
        for (std::int64_t r = 0; r < m; ++r) {
          const T* src = g.data() + r * n + offsets[i];
          T* dst = gp.data() + r * w;
          for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
        }
      }
    });
    return id;
  }

  // ---- normalization -----------------------------------------------------

  VarId layernorm_rows(VarId x, VarId gamma, VarId beta, double eps = 1e-5) {
    const Tensor<T>& vx = val(x);
    const std::int64_t m = vx.dim(0), n = vx.numel() / m;
    if (val(gamma).numel() != n || val(beta).numel() != n)
      throw ShapeError("layernorm affine size");
    Tensor<T> out(vx.shape());
    Tensor<T> stats({m, 2});  // mean, rstd per row
    const Tensor<T>& vg = val(gamma);
    const Tensor<T>& vb = val(beta);
    for (std::int64_t r = 0; r < m; ++r) {
      const T* row = vx.data() + r * n;
      T mean = 0;
      for (std::int64_t j = 0; j < n; ++j) mean += row[j];
      mean /= static_cast<T>(n);
      T var = 0;
      for (std::int64_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= static_cast<T>(n);
      const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
      stats.at2(r, 0) = mean;
      stats.at2(r, 1) = rstd;
      T* orow = out.data() + r * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] = (row[j] - mean) * rstd * vg[j] + vb[j];
    }
    VarId id = push(std::move(out), needs_grad(x) || needs_grad(gamma) || needs_grad(beta));
    attach(id, [id, x, gamma, beta, stats, m, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      const Tensor<T>& vx2 = t.val(x);
      const Tensor<T>& vg2 = t.val(gamma);
      for (std::int64_t r = 0; r < m; ++r) {
        const T mean = stats.at2(r, 0), rstd = stats.at2(r, 1);
        const T* row = vx2.data() + r * n;
        const T* grow = g.data() + r * n;
        if (t.needs_grad(gamma)) {
          Tensor<T>& gg = t.grad_ref(gamma);
          for (std::int64_t j = 0; j < n; ++j) gg[j] += grow[j] * (row[j] - mean) * rstd;
        }
        if (t.needs_grad(beta)) {
          Tensor<T>& gb = t.grad_ref(beta);
          for (std::int64_t j = 0; j < n; ++j) gb[j] += grow[j];
        }
        if (t.needs_grad(x)) {
          // dL/dx = rstd * (dy*gamma - mean(dy*gamma) - xhat * mean(dy*gamma*xhat))
          T s1 = 0, s2 = 0;
          for (std::int64_t j = 0; j < n; ++j) {
            const T dy = grow[j] * vg2[j];
            const T xhat = (row[j] - mean) * rstd;
            s1 += dy;
            s2 += dy * xhat;
          }
          s1 /= static_cast<T>(n);
          s2 /= static_cast<T>(n);
          Tensor<T>& gx = t.grad_ref(x);
          T* gxrow = gx.data() + r * n;
          for (std::int64_t j = 0; j < n; ++j) {
            const T dy = grow[j] * vg2[j];
            const T xhat = (row[j] - mean) * rstd;
            gxrow[j] += rstd * (dy - s1 - xhat * s2);
          }
        }
      }
    });
    return id;
  }

  // Normalizes over the channel axis at every spatial position of a [C,H,W]
  // map. Same math as layernorm_rows on the transposed layout, without the
  // transpose copies.
  VarId channel_norm(VarId x, VarId gamma, VarId beta, double eps = 1e-5) {
    const Tensor<T>& vx = val(x);
    if (vx.ndim() != 3) throw ShapeError("channel_norm expects [C,H,W]");
    const std::int64_t C = vx.dim(0), HW = vx.dim(1) * vx.dim(2);
    if (val(gamma).numel() != C || val(beta).numel() != C)
      throw ShapeError("channel_norm affine size");
    Tensor<T> out(vx.shape());
    Tensor<T> stats({HW, 2});
    const Tensor<T>& vg = val(gamma);
    const Tensor<T>& vb = val(beta);
    for (std::int64_t p = 0; p < HW; ++p) {
      T mean = 0;
      for (std::int64_t c = 0; c < C; ++c) mean += vx[c * HW + p];
      mean /= static_cast<T>(C);
      T var = 0;
      for (std::int64_t c = 0; c < C; ++c) {
        const T d = vx[c * HW + p] - mean;
        var += d * d;
      }
      var /= static_cast<T>(C);
      const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
      stats.at2(p, 0) = mean;
      stats.at2(p, 1) = rstd;
      for (std::int64_t c = 0; c < C; ++c)
        out[c * HW + p] = (vx[c * HW + p] - mean) * rstd * vg[c] + vb[c];
    }
    VarId id = push(std::move(out), needs_grad(x) || needs_grad(gamma) || needs_grad(beta));
    attach(id, [id, x, gamma, beta, stats, C, HW](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      const Tensor<T>& vx2 = t.val(x);
      const Tensor<T>& vg2 = t.val(gamma);
      for (std::int64_t p = 0; p < HW; ++p) {
        const T mean = stats.at2(p, 0), rstd = stats.at2(p, 1);
        if (t.needs_grad(gamma)) {
          Tensor<T>& gg = t.grad_ref(gamma);
          for (std::int64_t c = 0; c < C; ++c)
            gg[c] += g[c * HW + p] * (vx2[c * HW + p] - mean) * rstd;
        }
        if (t.needs_grad(beta)) {
          Tensor<T>& gb = t.grad_ref(beta);
          for (std::int64_t c = 0; c < C; ++c) gb[c] += g[c * HW + p];
        }
        if (t.needs_grad(x)) {
          T s1 = 0, s2 = 0;
          for (std::int64_t c = 0; c < C; ++c) {
            const T dy = g[c * HW + p] * vg2[c];
            const T xhat = (vx2[c * HW + p] - mean) * rstd;
            s1 += dy;
            s2 += dy * xhat;
          }
          s1 /= static_cast<T>(C);
          s2 /= static_cast<T>(C);
          Tensor<T>& gx = t.grad_ref(x);
          for (std::int64_t c = 0; c < C; ++c) {
            const T dy = g[c * HW + p] * vg2[c];
            const T xhat = (vx2[c * HW + p] - mean) * rstd;
            gx[c * HW + p] += rstd * (dy - s1 - xhat * s2);
          }
        }
      }
    });
    return id;
  }

  // ---- softmax / attention ------------------------------------------------

  // Row softmax with an optional additive constant bias (0 or -inf entries for
  // attention masking). Rows where some entries are -inf get exact zeros there.
  VarId softmax_rows(VarId x, const Tensor<T>* bias = nullptr) {
    const Tensor<T>& vx = val(x);
    const std::int64_t m = vx.dim(0), n = vx.numel() / m;
    if (bias && bias->numel() != vx.numel()) throw ShapeError("softmax bias shape");
    Tensor<T> out(vx.shape());
    for (std::int64_t r = 0; r < m; ++r) {
      const T* row = vx.data() + r * n;
      const T* brow = bias ? bias->data() + r * n : nullptr;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < n; ++j) {
        const T v = row[j] + (brow ? brow[j] : T(0));
        if (v > mx) mx = v;
      }
      T sum = 0;
      T* orow = out.data() + r * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const T v = row[j] + (brow ? brow[j] : T(0));
        orow[j] = std::exp(v - mx);
        sum += orow[j];
      }
      for (std::int64_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    VarId id = push(std::move(out), needs_grad(x));
    attach(id, [id, x, m, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      const Tensor<T>& s = t.val(id);
      Tensor<T>& gx = t.grad_ref(x);
      for (std::int64_t r = 0; r < m; ++r) {
        const T* grow = g.data() + r * n;
        const T* srow = s.data() + r * n;
        T dot = 0;
        for (std::int64_t j = 0; j < n; ++j) dot += grow[j] * srow[j];
        T* gxrow = gx.data() + r * n;
        for (std::int64_t j = 0; j < n; ++j) gxrow[j] += srow[j] * (grow[j] - dot);
      }
    });
    return id;
  }

  VarId log_softmax_rows(VarId x) {
    const Tensor<T>& vx = val(x);
    const std::int64_t m = vx.dim(0), n = vx.numel() / m;
    Tensor<T> out(vx.shape());
    for (std::int64_t r = 0; r < m; ++r) {
      const T* row = vx.data() + r * n;
      T mx = row[0];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T sum = 0;
      for (std::int64_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
      const T lse = mx + std::log(sum);
      T* orow = out.data() + r * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] = row[j] - lse;
    }
    VarId id = push(std::move(out), needs_grad(x));
    attach(id, [id, x, m, n](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      const Tensor<T>& lp = t.val(id);
      Tensor<T>& gx = t.grad_ref(x);
      for (std::int64_t r = 0; r < m; ++r) {
        const T* grow = g.data() + r * n;
        const T* lprow = lp.data() + r * n;
        T gsum = 0;
        for (std::int64_t j = 0; j < n; ++j) gsum += grow[j];
        T* gxrow = gx.data() + r * n;
        for (std::int64_t j = 0; j < n; ++j) gxrow[j] += grow[j] - std::exp(lprow[j]) * gsum;
      }
    });
    return id;
  }

  // Scaled dot-product attention for one head.
  //   out = softmax(q k^T * scale + bias) v
  // bias is a constant [nq,nk] additive mask (0 / -inf). weights_out, when
  // given, receives the post-softmax attention matrix.
  VarId attention(VarId q, VarId k, VarId v, const Tensor<T>* bias, double att_scale,
                  Tensor<T>* weights_out = nullptr) {
    const Tensor<T>& vq = val(q);
    const Tensor<T>& vk = val(k);
    const Tensor<T>& vv = val(v);
    const std::int64_t nq = vq.dim(0), d = vq.dim(1), nk = vk.dim(0);
    if (vk.dim(1) != d || vv.dim(0) != nk) throw ShapeError("attention shapes");
    if (bias && (bias->dim(0) != nq || bias->dim(1) != nk)) throw ShapeError("attention bias");
    Tensor<T> scores({nq, nk});
    scores.mat(nq, nk).noalias() =
        vq.mat(nq, d) * vk.mat(nk, d).transpose() * static_cast<T>(att_scale);
    if (bias)
      for (std::int64_t i = 0; i < scores.numel(); ++i) scores[i] += (*bias)[i];
    // row softmax in place
    for (std::int64_t r = 0; r < nq; ++r) {
      T* row = scores.data() + r * nk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < nk; ++j) mx = std::max(mx, row[j]);
      T sum = 0;
      for (std::int64_t j = 0; j < nk; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (std::int64_t j = 0; j < nk; ++j) row[j] /= sum;
    }
    if (weights_out) *weights_out = scores;
    Tensor<T> out({nq, d});
    out.mat(nq, d).noalias() = scores.mat(nq, nk) * vv.mat(nk, d);
    const bool ng = needs_grad(q) || needs_grad(k) || needs_grad(v);
    VarId id = push(std::move(out), ng);
    if (ng && grad_enabled_) {
      Tensor<T> w = std::move(scores);  // keep for backward
      attach(id, [id, q, k, v, w, att_scale, nq, nk, d](Tape& t) {
        const Tensor<T>& g = t.grad(id);
        auto gm = g.mat(nq, d);
        auto wm = w.mat(nq, nk);
        if (t.needs_grad(v))
          t.grad_ref(v).mat(nk, d).noalias() += wm.transpose() * gm;
        if (t.needs_grad(q) || t.needs_grad(k)) {
          Tensor<T> dw({nq, nk});
          dw.mat(nq, nk).noalias() = gm * t.val(v).mat(nk, d).transpose();
          // softmax backward per row: ds = w .* (dw - rowdot(dw, w))
          Tensor<T> ds({nq, nk});
          for (std::int64_t r = 0; r < nq; ++r) {
            T dot = 0;
            for (std::int64_t j = 0; j < nk; ++j) dot += dw.at2(r, j) * w.at2(r, j);
            for (std::int64_t j = 0; j < nk; ++j)
              ds.at2(r, j) = w.at2(r, j) * (dw.at2(r, j) - dot);
          }
          const T sc = static_cast<T>(att_scale);
          if (t.needs_grad(q))
            t.grad_ref(q).mat(nq, d).noalias() += ds.mat(nq, nk) * t.val(k).mat(nk, d) * sc;
          if (t.needs_grad(k))
            t.grad_ref(k).mat(nk, d).noalias() +=
                ds.mat(nq, nk).transpose() * t.val(q).mat(nq, d) * sc;
        }
      });
    }
    return id;
  }

  // ---- convolution / resampling -------------------------------------------

  // 2-d convolution on [Cin,H,W] with weights [Cout,Cin,kh,kw], zero padding.
  VarId conv2d(VarId x, VarId w, VarId b, int stride, int pad) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    if (vx.ndim() != 3 || vw.ndim() != 4 || vw.dim(1) != vx.dim(0))
      throw ShapeError("conv2d shapes " + shape_str(vx.shape()) + " w " + shape_str(vw.shape()));
    const std::int64_t Cin = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    const std::int64_t Cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    if (val(b).numel() != Cout) throw ShapeError("conv2d bias size");
    const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d output would be empty");

    Tensor<T> cols = im2col(vx, kh, kw, stride, pad, Ho, Wo);
    Tensor<T> out({Cout, Ho, Wo});
    out.mat(Cout, Ho * Wo).noalias() =
        vw.mat(Cout, Cin * kh * kw) * cols.mat(Cin * kh * kw, Ho * Wo);
    const Tensor<T>& vb = val(b);
    for (std::int64_t c = 0; c < Cout; ++c) {
      T* plane = out.data() + c * Ho * Wo;
      for (std::int64_t i = 0; i < Ho * Wo; ++i) plane[i] += vb[c];
    }
    VarId id = push(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b));
    // cols are recomputed in backward from the saved input value.
    attach(id, [id, x, w, b, stride, pad, Cin, H, W, Cout, kh, kw, Ho, Wo](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      auto gmat = g.mat(Cout, Ho * Wo);
      if (t.needs_grad(b)) {
        Tensor<T>& gb = t.grad_ref(b);
        for (std::int64_t c = 0; c < Cout; ++c) gb[c] += gmat.row(c).sum();
      }
      if (t.needs_grad(w)) {
        Tensor<T> cols2 = im2col(t.val(x), kh, kw, stride, pad, Ho, Wo);
        t.grad_ref(w).mat(Cout, Cin * kh * kw).noalias() +=
            gmat * cols2.mat(Cin * kh * kw, Ho * Wo).transpose();
      }
      if (t.needs_grad(x)) {
        Tensor<T> dcols({Cin * kh * kw, Ho * Wo});
        dcols.mat(Cin * kh * kw, Ho * Wo).noalias() =
            t.val(w).mat(Cout, Cin * kh * kw).transpose() * gmat;
        col2im_accum(dcols, t.grad_ref(x), kh, kw, stride, pad, Ho, Wo);
      }
    });
    return id;
  }

  // Bilinear resize of [C,H,W] to [C,Ho,Wo], align_corners=false convention:
  // source coordinate of output pixel o is (o + 0.5) * size_in / size_out - 0.5,
  // clamped to the valid range.
  VarId resize_bilinear(VarId x, std::int64_t Ho, std::int64_t Wo) {
    const Tensor<T>& vx = val(x);
    if (vx.ndim() != 3) throw ShapeError("resize_bilinear expects [C,H,W]");
    const std::int64_t C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    Tensor<T> out({C, Ho, Wo});
    resample_bilinear(vx.data(), C, H, W, out.data(), Ho, Wo, /*accumulate=*/false);
    VarId id = push(std::move(out), needs_grad(x));
    attach(id, [id, x, C, H, W, Ho, Wo](Tape& t) {
      // transpose of the interpolation: scatter output grads into the 4 taps
      const Tensor<T>& g = t.grad(id);
      Tensor<T>& gx = t.grad_ref(x);
      for (std::int64_t oy = 0; oy < Ho; ++oy) {
        const auto [y0, y1, fy] = tap(oy, H, Ho);
        for (std::int64_t ox = 0; ox < Wo; ++ox) {
          const auto [x0, x1, fx] = tap(ox, W, Wo);
          const T w00 = (T(1) - fy) * (T(1) - fx), w01 = (T(1) - fy) * fx;
          const T w10 = fy * (T(1) - fx), w11 = fy * fx;
          for (std::int64_t c = 0; c < C; ++c) {
            const T gv = g[(c * Ho + oy) * Wo + ox];
            gx[(c * H + y0) * W + x0] += gv * w00;
            gx[(c * H + y0) * W + x1] += gv * w01;
            gx[(c * H + y1) * W + x0] += gv * w10;
            gx[(c * H + y1) * W + x1] += gv * w11;
          }
        }
      }
    });
    return id;
  }

  VarId crop2d(VarId x, std::int64_t h, std::int64_t w) {
    const Tensor<T>& vx = val(x);
    if (vx.ndim() != 3) throw ShapeError("crop2d expects [C,H,W]");
    const std::int64_t C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
    if (h > H || w > W) throw ShapeError("crop2d larger than input");
    Tensor<T> out({C, h, w});
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = 0; y < h; ++y)
        std::copy(vx.data() + (c * H + y) * W, vx.data() + (c * H + y) * W + w,
                  out.data() + (c * h + y) * w);
    VarId id = push(std::move(out), needs_grad(x));
    attach(id, [id, x, C, H, W, h, w](Tape& t) {
      const Tensor<T>& g = t.grad(id);
      Tensor<T>& gx = t.grad_ref(x);
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < h; ++y) {
          const T* src = g.data() + (c * h + y) * w;
          T* dst = gx.data() + (c * H + y) * W;
          for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
    return id;
  }

  // ---- reductions / losses -------------------------------------------------

  VarId sum(VarId x) {
    const Tensor<T>& vx = val(x);
    T s = 0;
    for (std::int64_t i = 0; i < vx.numel(); ++i) s += vx[i];
    VarId id = push(Tensor<T>::scalar(s), needs_grad(x));
    attach(id, [id, x](Tape& t) {
      const T g = t.grad(id)[0];
      Tensor<T>& gx = t.grad_ref(x);
      for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
    });
    return id;
  }

  VarId mean(VarId x) { return scale(sum(x), 1.0 / static_cast<double>(val(x).numel())); }

  // sum(x .* w) with constant weights
  VarId weighted_sum_const(VarId x, const Tensor<T>& wts) {
    check_shape(x, wts.shape(), "weighted_sum_const");
    const Tensor<T>& vx = val(x);
    T s = 0;
    for (std::int64_t i = 0; i < vx.numel(); ++i) s += vx[i] * wts[i];
    VarId id = push(Tensor<T>::scalar(s), needs_grad(x));
    attach(id, [id, x, wts](Tape& t) {
      const T g = t.grad(id)[0];
      Tensor<T>& gx = t.grad_ref(x);
      for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g * wts[i];
    });
    return id;
  }

  VarId s_div(VarId a, VarId b) {
    if (val(a).numel() != 1 || val(b).numel() != 1) throw ShapeError("s_div expects scalars");
    const T av = val(a)[0], bv = val(b)[0];
    VarId id = push(Tensor<T>::scalar(av / bv), needs_grad(a) || needs_grad(b));
    attach(id, [id, a, b](Tape& t) {
      const T g = t.grad(id)[0];
      const T av2 = t.val(a)[0], bv2 = t.val(b)[0];
      if (t.needs_grad(a)) t.grad_ref(a)[0] += g / bv2;
      if (t.needs_grad(b)) t.grad_ref(b)[0] -= g * av2 / (bv2 * bv2);
    });
    return id;
  }

  VarId weighted_sum_scalars(const std::vector<VarId>& xs, const std::vector<double>& ws) {
    if (xs.size() != ws.size()) throw ShapeError("weighted_sum_scalars size mismatch");
    T s = 0;
    bool ng = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (val(xs[i]).numel() != 1) throw ShapeError("weighted_sum_scalars expects scalars");
      s += static_cast<T>(ws[i]) * val(xs[i])[0];
      ng = ng || needs_grad(xs[i]);
    }
    VarId id = push(Tensor<T>::scalar(s), ng);
    attach(id, [id, xs, ws](Tape& t) {
      const T g = t.grad(id)[0];
      for (std::size_t i = 0; i < xs.size(); ++i)
        if (t.needs_grad(xs[i])) t.grad_ref(xs[i])[0] += g * static_cast<T>(ws[i]);
    });
    return id;
  }

  // Mean binary cross-entropy on logits, the numerically stable form of
  // -[t log(sigmoid(x)) + (1-t) log(1-sigmoid(x))].
  VarId bce_with_logits_mean(VarId logits, const Tensor<T>& targets) {
    check_shape(logits, targets.shape(), "bce targets");
    const Tensor<T>& vx = val(logits);
    const std::int64_t n = vx.numel();
    T s = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T x = vx[i], t = targets[i];
      s += std::max(x, T(0)) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    VarId id = push(Tensor<T>::scalar(s / static_cast<T>(n)), needs_grad(logits));
    attach(id, [id, logits, targets, n](Tape& t) {
      const T g = t.grad(id)[0] / static_cast<T>(n);
      const Tensor<T>& vx2 = t.val(logits);
      Tensor<T>& gx = t.grad_ref(logits);
      for (std::int64_t i = 0; i < n; ++i) {
        const T x = vx2[i];
        const T sig = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        gx[i] += g * (sig - targets[i]);
      }
    });
    return id;
  }

  // sum_r weight[r] * (-logp[r, target[r]])
  VarId nll_rows(VarId logp, const std::vector<int>& targets, const std::vector<double>& weights) {
    const Tensor<T>& vx = val(logp);
    const std::int64_t m = vx.dim(0), n = vx.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != m ||
        static_cast<std::int64_t>(weights.size()) != m)
      throw ShapeError("nll_rows target count");
    T s = 0;
    for (std::int64_t r = 0; r < m; ++r)
      s -= static_cast<T>(weights[static_cast<std::size_t>(r)]) *
           vx.at2(r, targets[static_cast<std::size_t>(r)]);
    VarId id = push(Tensor<T>::scalar(s), needs_grad(logp));
    attach(id, [id, logp, targets, weights, m, n](Tape& t) {
      const T g = t.grad(id)[0];
      Tensor<T>& gx = t.grad_ref(logp);
      for (std::int64_t r = 0; r < m; ++r)
        gx.at2(r, targets[static_cast<std::size_t>(r)]) -=
            g * static_cast<T>(weights[static_cast<std::size_t>(r)]);
    });
    return id;
  }

  // ---- shared helpers ------------------------------------------------------

  static Tensor<T> im2col(const Tensor<T>& x, std::int64_t kh, std::int64_t kw, int stride,
                          int pad, std::int64_t Ho, std::int64_t Wo) {
    const std::int64_t Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor<T> cols({Cin * kh * kw, Ho * Wo});
    T* cd = cols.data();
    for (std::int64_t c = 0; c < Cin; ++c)
      for (std::int64_t dy = 0; dy < kh; ++dy)
        for (std::int64_t dx = 0; dx < kw; ++dx) {
          T* dst = cd + ((c * kh + dy) * kw + dx) * Ho * Wo;
          for (std::int64_t oy = 0; oy < Ho; ++oy) {
            const std::int64_t iy = oy * stride - pad + dy;
            if (iy < 0 || iy >= H) {
              std::fill(dst + oy * Wo, dst + (oy + 1) * Wo, T(0));
              continue;
            }
            const T* src = x.data() + (c * H + iy) * W;
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
              const std::int64_t ix = ox * stride - pad + dx;
              dst[oy * Wo + ox] = (ix < 0 || ix >= W) ? T(0) : src[ix];
            }
          }
        }
    return cols;
  }

  static void col2im_accum(const Tensor<T>& cols, Tensor<T>& gx, std::int64_t kh, std::int64_t kw,
                           int stride, int pad, std::int64_t Ho, std::int64_t Wo) {
    const std::int64_t Cin = gx.dim(0), H = gx.dim(1), W = gx.dim(2);
    const T* cd = cols.data();
    for (std::int64_t c = 0; c < Cin; ++c)
      for (std::int64_t dy = 0; dy < kh; ++dy)
        for (std::int64_t dx = 0; dx < kw; ++dx) {
          const T* src = cd + ((c * kh + dy) * kw + dx) * Ho * Wo;
          for (std::int64_t oy = 0; oy < Ho; ++oy) {
            const std::int64_t iy = oy * stride - pad + dy;
            if (iy < 0 || iy >= H) continue;
            T* dst = gx.data() + (c * H + iy) * W;
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
              const std::int64_t ix = ox * stride - pad + dx;
              if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
            }
          }
        }
  }

  // (low index, high index, fractional weight of the high tap)
  static std::tuple<std::int64_t, std::int64_t, T> tap(std::int64_t o, std::int64_t in,
                                                       std::int64_t out) {
    const T src = (static_cast<T>(o) + T(0.5)) * static_cast<T>(in) / static_cast<T>(out) - T(0.5);
    const T clamped = std::min(std::max(src, T(0)), static_cast<T>(in - 1));
    const std::int64_t lo = static_cast<std::int64_t>(std::floor(clamped));
    const std::int64_t hi = std::min(lo + 1, in - 1);
    return {lo, hi, clamped - static_cast<T>(lo)};
  }

  static void resample_bilinear(const T* src, std::int64_t C, std::int64_t H, std::int64_t W,
                                T* dst, std::int64_t Ho, std::int64_t Wo, bool accumulate) {
    for (std::int64_t oy = 0; oy < Ho; ++oy) {
      const auto [y0, y1, fy] = tap(oy, H, Ho);
      for (std::int64_t ox = 0; ox < Wo; ++ox) {
        const auto [x0, x1, fx] = tap(ox, W, Wo);
        for (std::int64_t c = 0; c < C; ++c) {
          const T v = (T(1) - fy) * ((T(1) - fx) * src[(c * H + y0) * W + x0] +
                                     fx * src[(c * H + y0) * W + x1]) +
                      fy * ((T(1) - fx) * src[(c * H + y1) * W + x0] +
                            fx * src[(c * H + y1) * W + x1]);
          T& o = dst[(c * Ho + oy) * Wo + ox];
          o = accumulate ? o + v : v;
        }
      }
    }
  }

  Tensor<T>& grad_ref(VarId id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

private:
  Node& node(VarId id) { return nodes_[static_cast<std::size_t>(id.idx)]; }

  VarId push(Tensor<T> value, bool needs) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs && grad_enabled_;
    nodes_.push_back(std::move(n));
    return VarId{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  template <typename F>
  void attach(VarId id, F&& bw) {
    Node& n = node(id);
    if (n.needs_grad && grad_enabled_) n.backward = std::forward<F>(bw);
  }

  void accum(VarId id, const Tensor<T>& g) {
    if (!needs_grad(id)) return;
    Tensor<T>& dst = grad_ref(id);
    for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  }

  void check_same(VarId a, VarId b, const char* op) const {
    if (!val(a).same_shape(val(b)))
      throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(val(a).shape()) + " vs " +
                       shape_str(val(b).shape()));
  }
  void check_shape(VarId a, const Shape& s, const char* op) const {
    if (val(a).shape() != s)
      throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(val(a).shape()) + " vs " +
                       shape_str(s));
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// RAII guard disabling gradient bookkeeping (inference passes).
template <typename T>
struct NoGradGuard {
  explicit NoGradGuard(Tape<T>& t) : tape(t), prev(t.grad_enabled()) { t.set_grad_enabled(false); }
  ~NoGradGuard() { tape.set_grad_enabled(prev); }
  Tape<T>& tape;
  bool prev;
};

}  // namespace sf
