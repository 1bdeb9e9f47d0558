#include "a3net/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace a3net {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op, const Shape& full_a,
                       const Shape& full_b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast shapes " + shape_str(full_a) +
                           " and " + shape_str(full_b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Maps flat indices of a broadcast output onto flat indices of one operand.
class BroadcastIndex {
 public:
  BroadcastIndex(const Shape& out, const Shape& in) {
    const std::size_t in_n = shape_numel(in);
    std::size_t lead = 0;
    while (lead < in.size() && in[lead] == 1 && in.size() - lead > 0) ++lead;
    const Shape core(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end());
    if (in == out) {
      kind_ = Kind::Identity;
    } else if (in_n == 1) {
      kind_ = Kind::Scalar;
    } else if (core.size() <= out.size() &&
               std::equal(core.begin(), core.end(), out.end() - static_cast<std::ptrdiff_t>(core.size()))) {
      kind_ = Kind::Modulo;
      mod_ = in_n;
    } else {
      kind_ = Kind::General;
      const std::size_t r = out.size();
      std::vector<std::size_t> stride(r, 0);
      std::size_t s = 1;
      for (std::size_t i = in.size(); i-- > 0;) {
        const std::size_t axis = i + (r - in.size());
        stride[axis] = in[i] == 1 ? 0 : s;
        s *= in[i];
      }
      const std::size_t n = shape_numel(out);
      map_.resize(n);
      std::vector<std::size_t> idx(r, 0);
      std::size_t flat_in = 0;
      for (std::size_t o = 0; o < n; ++o) {
        map_[o] = flat_in;
        for (std::size_t ax = r; ax-- > 0;) {
          ++idx[ax];
          flat_in += stride[ax];
          if (idx[ax] < out[ax]) break;
          flat_in -= stride[ax] * idx[ax];
          idx[ax] = 0;
        }
      }
    }
  }

  std::size_t operator()(std::size_t o) const {
    switch (kind_) {
      case Kind::Identity: return o;
      case Kind::Scalar: return 0;
      case Kind::Modulo: return o % mod_;
      default: return map_[o];
    }
  }

 private:
  enum class Kind { Identity, Scalar, Modulo, General };
  Kind kind_ = Kind::Identity;
  std::size_t mod_ = 1;
  std::vector<std::size_t> map_;
};

template <typename Fwd, typename Da, typename Db>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), name, a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  auto ia = std::make_shared<BroadcastIndex>(out_shape, a.shape());
  auto ib = std::make_shared<BroadcastIndex>(out_shape, b.shape());
  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[(*ia)(i)], bv[(*ib)(i)]);
  return make_op(name, out_shape, std::move(out), {a, b},
                 [a, b, ia, ib, da, db, n](const detail::TensorImpl& o) {
                   const auto av = a.data();
                   const auto bv = b.data();
                   if (auto* ga = grad_sink(a)) {
                     for (std::size_t i = 0; i < n; ++i) {
                       const auto j = (*ia)(i);
                       const auto k = (*ib)(i);
                       (*ga)[j] += o.grad[i] * da(av[j], bv[k]);
                     }
                   }
                   if (auto* gb = grad_sink(b)) {
                     for (std::size_t i = 0; i < n; ++i) {
                       const auto j = (*ia)(i);
                       const auto k = (*ib)(i);
                       (*gb)[k] += o.grad[i] * db(av[j], bv[k]);
                     }
                   }
                 });
}

std::size_t norm_axis(const Tensor& x, int axis) {
  const auto r = static_cast<int>(x.rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const Shape ba(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);
  const Shape bo = broadcast_shapes(ba, bb, "matmul", a.shape(), b.shape());
  const std::size_t batches = shape_numel(bo);
  Shape out_shape = bo;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batches * m * n);

  // A rank-2 right operand folds every batch into one product.
  const bool flat = bb.empty();
  auto ia = std::make_shared<BroadcastIndex>(bo, ba);
  auto ib = std::make_shared<BroadcastIndex>(bo, bb);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  if (flat) {
    MutMap(out.data(), static_cast<Eigen::Index>(batches * m), static_cast<Eigen::Index>(n)).noalias() =
        ConstMap(ad, static_cast<Eigen::Index>(batches * m), static_cast<Eigen::Index>(k)) *
        ConstMap(bd, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  } else {
    for (std::size_t o = 0; o < batches; ++o) {
      MutMap(out.data() + o * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
          ConstMap(ad + (*ia)(o) * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
          ConstMap(bd + (*ib)(o) * k * n, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    }
  }
  return make_op("matmul", out_shape, std::move(out), {a, b},
                 [a, b, ia, ib, flat, batches, m, k, n](const detail::TensorImpl& o) {
                   const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
                              N = static_cast<Eigen::Index>(n);
                   const double* ad = a.data().data();
                   const double* bd = b.data().data();
                   const double* gd = o.grad.data();
                   auto* ga = grad_sink(a);
                   auto* gb = grad_sink(b);
                   if (flat) {
                     const auto BM = static_cast<Eigen::Index>(batches * m);
                     if (ga) MutMap(ga->data(), BM, K).noalias() += ConstMap(gd, BM, N) * ConstMap(bd, K, N).transpose();
                     if (gb) MutMap(gb->data(), K, N).noalias() += ConstMap(ad, BM, K).transpose() * ConstMap(gd, BM, N);
                     return;
                   }
                   for (std::size_t i = 0; i < batches; ++i) {
                     const double* g = gd + i * m * n;
                     const std::size_t ja = (*ia)(i), jb = (*ib)(i);
                     if (ga) {
                       MutMap(ga->data() + ja * m * k, M, K).noalias() +=
                           ConstMap(g, M, N) * ConstMap(bd + jb * k * n, K, N).transpose();
                     }
                     if (gb) {
                       MutMap(gb->data() + jb * k * n, K, N).noalias() +=
                           ConstMap(ad + ja * m * k, M, K).transpose() * ConstMap(g, M, N);
                     }
                   }
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_op("scale", x.shape(), std::move(out), {x}, [x, factor](const detail::TensorImpl& o) {
    auto* g = grad_sink(x);
    for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += factor * o.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  const auto in = x.data();
  if (auto* probe = ActivationProbe::active()) probe->mix(in);
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  return make_op("relu", x.shape(), std::move(out), {x}, [x](const detail::TensorImpl& o) {
    auto* g = grad_sink(x);
    const auto in = x.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in[i] > 0.0) (*g)[i] += o.grad[i];
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("softmax_rows: scalar input");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = n ? x.numel() / n : 0;
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * n;
    double* dst = out.data() + r * n;
    const double mx = *std::max_element(src, src + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (dst[j] = std::exp(src[j] - mx));
    for (std::size_t j = 0; j < n; ++j) dst[j] /= total;
  }
  return make_op("softmax_rows", x.shape(), std::move(out), {x}, [x, rows, n](const detail::TensorImpl& o) {
    auto* g = grad_sink(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * n;
      const double* dy = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax_rows: scalar input");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = n ? x.numel() / n : 0;
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * n;
    double* dst = out.data() + r * n;
    const double mx = *std::max_element(src, src + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(src[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) dst[j] = src[j] - lse;
  }
  return make_op("log_softmax_rows", x.shape(), std::move(out), {x}, [x, rows, n](const detail::TensorImpl& o) {
    auto* g = grad_sink(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * n;
      const double* dy = o.grad.data() + r * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += dy[j];
      for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += dy[j] - std::exp(y[j]) * total;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.dim(-1);
  if (d == 0 || gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gamma " +
                         shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto in = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (src[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat, rstd, rows, d](const detail::TensorImpl& o) {
                   auto* gx = grad_sink(x);
                   auto* gg = grad_sink(gamma);
                   auto* gb = grad_sink(beta);
                   const auto gv = gamma.data();
                   std::vector<double> dxhat(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* dy = o.grad.data() + r * d;
                     const double* h = xhat->data() + r * d;
                     for (std::size_t j = 0; j < d; ++j) {
                       if (gg) (*gg)[j] += dy[j] * h[j];
                       if (gb) (*gb)[j] += dy[j];
                     }
                     if (!gx) continue;
                     double mean_d = 0.0, mean_dh = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                       dxhat[j] = dy[j] * gv[j];
                       mean_d += dxhat[j];
                       mean_dh += dxhat[j] * h[j];
                     }
                     mean_d /= static_cast<double>(d);
                     mean_dh /= static_cast<double>(d);
                     const double rs = (*rstd)[r];
                     for (std::size_t j = 0; j < d; ++j) {
                       (*gx)[r * d + j] += rs * (dxhat[j] - mean_d - h[j] * mean_dh);
                     }
                   }
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {x}, [x](const detail::TensorImpl& o) {
    auto* g = grad_sink(x);
    for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
  });
}

namespace {

// out[pre, B, mid, A, post] = in[pre, A, mid, B, post] for axes a < b.
void swap_axes_copy(const double* src, double* dst, const Shape& s, std::size_t a, std::size_t b, bool accumulate) {
  std::size_t pre = 1, mid = 1, post = 1;
  for (std::size_t i = 0; i < a; ++i) pre *= s[i];
  for (std::size_t i = a + 1; i < b; ++i) mid *= s[i];
  for (std::size_t i = b + 1; i < s.size(); ++i) post *= s[i];
  const std::size_t A = s[a], B = s[b];
  for (std::size_t p = 0; p < pre; ++p)
    for (std::size_t ia = 0; ia < A; ++ia)
      for (std::size_t m = 0; m < mid; ++m)
        for (std::size_t ib = 0; ib < B; ++ib) {
          const double* from = src + ((((p * A + ia) * mid + m) * B + ib) * post);
          double* to = dst + ((((p * B + ib) * mid + m) * A + ia) * post);
          if (accumulate) {
            for (std::size_t q = 0; q < post; ++q) to[q] += from[q];
          } else {
            std::copy(from, from + post, to);
          }
        }
}

}  // namespace

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
  std::size_t a = norm_axis(x, axis_a), b = norm_axis(x, axis_b);
  if (a == b) return reshape(x, x.shape());
  if (a > b) std::swap(a, b);
  Shape out_shape = x.shape();
  std::swap(out_shape[a], out_shape[b]);
  std::vector<double> out(x.numel());
  swap_axes_copy(x.data().data(), out.data(), x.shape(), a, b, false);
  return make_op("transpose", out_shape, std::move(out), {x}, [x, a, b, out_shape](const detail::TensorImpl& o) {
    swap_axes_copy(o.grad.data(), grad_sink(x)->data(), out_shape, a, b, true);
  });
}

Tensor transpose_last_two(const Tensor& x) { return transpose(x, -2, -1); }

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const std::size_t ax = norm_axis(parts[0], axis);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) {
      throw DimensionError("concat: rank mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    for (std::size_t i = 0; i < p.rank(); ++i) {
      if (i != ax && p.shape()[i] != parts[0].shape()[i]) {
        throw DimensionError("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()) +
                             " differ off the concat axis");
      }
    }
    out_shape[ax] += p.shape()[ax];
  }
  const auto split = split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[ax];
    const auto pd = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pd.data() + o * len * split.inner, len * split.inner,
                  out.data() + (o * split.extent + offset) * split.inner);
    }
    offsets.push_back(offset);
    offset += len;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op("concat", out_shape, std::move(out), inputs,
                 [inputs, offsets, split, ax](const detail::TensorImpl& o) {
                   for (std::size_t k = 0; k < inputs.size(); ++k) {
                     auto* g = grad_sink(inputs[k]);
                     if (!g) continue;
                     const std::size_t len = inputs[k].shape()[ax];
                     for (std::size_t q = 0; q < split.outer; ++q) {
                       const double* src = o.grad.data() + (q * split.extent + offsets[k]) * split.inner;
                       double* dst = g->data() + q * len * split.inner;
                       for (std::size_t i = 0; i < len * split.inner; ++i) dst[i] += src[i];
                     }
                   }
                 });
}

Tensor concat_last_axis(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat(parts, -1);
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(x, axis);
  if (start + length > x.shape()[ax]) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for axis " + std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  const auto split = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<double> out(shape_numel(out_shape));
  const auto xd = x.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xd.data() + (o * split.extent + start) * split.inner, length * split.inner,
                out.data() + o * length * split.inner);
  }
  return make_op("slice", out_shape, std::move(out), {x}, [x, split, start, length](const detail::TensorImpl& o) {
    auto* g = grad_sink(x);
    for (std::size_t q = 0; q < split.outer; ++q) {
      const double* src = o.grad.data() + q * length * split.inner;
      double* dst = g->data() + (q * split.extent + start) * split.inner;
      for (std::size_t i = 0; i < length * split.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  const Shape out = broadcast_shapes(x.shape(), shape, "broadcast_to", x.shape(), shape);
  if (out != shape) {
    throw DimensionError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto idx = std::make_shared<BroadcastIndex>(shape, x.shape());
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) values[i] = xd[(*idx)(i)];
  return make_op("broadcast_to", shape, std::move(values), {x}, [x, idx, n](const detail::TensorImpl& o) {
    auto* g = grad_sink(x);
    for (std::size_t i = 0; i < n; ++i) (*g)[(*idx)(i)] += o.grad[i];
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be [V,d], got " + shape_str(table.shape()));
  if (shape_numel(ids_shape) != ids.size()) {
    throw DimensionError("embedding_lookup: ids shape " + shape_str(ids_shape) + " does not match " +
                         std::to_string(ids.size()) + " ids");
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  std::vector<double> out(rows.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= vocab) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(rows[i]) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
    std::copy_n(td.data() + rows[i] * d, d, out.data() + i * d);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  return make_op("embedding_lookup", out_shape, std::move(out), {table},
                 [table, rows = std::move(rows), d](const detail::TensorImpl& o) {
                   auto* g = grad_sink(table);
                   for (std::size_t i = 0; i < rows.size(); ++i) {
                     for (std::size_t j = 0; j < d; ++j) (*g)[rows[i] * d + j] += o.grad[i * d + j];
                   }
                 });
}

Tensor gather_last(const Tensor& x, std::span<const std::size_t> ids) {
  if (x.rank() == 0) throw DimensionError("gather_last: scalar input");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = n ? x.numel() / n : 0;
  if (ids.size() != rows) {
    throw DimensionError("gather_last: " + std::to_string(ids.size()) + " ids for input " + shape_str(x.shape()));
  }
  std::vector<std::size_t> picks(ids.begin(), ids.end());
  std::vector<double> out(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (picks[r] >= n) throw std::out_of_range("gather_last: index " + std::to_string(picks[r]) + " >= " + std::to_string(n));
    out[r] = xd[r * n + picks[r]];
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  return make_op("gather_last", out_shape, std::move(out), {x}, [x, picks = std::move(picks), n](const detail::TensorImpl& o) {
    auto* g = grad_sink(x);
    for (std::size_t r = 0; r < picks.size(); ++r) (*g)[r * n + picks[r]] += o.grad[r];
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_op("sum", {}, {total}, {x}, [x](const detail::TensorImpl& o) {
    auto* g = grad_sink(x);
    for (auto& v : *g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor causal_mask(const Tensor& scores) {
  if (scores.rank() < 2) throw DimensionError("causal_mask: need [..., q, k], got " + shape_str(scores.shape()));
  const std::size_t q = scores.dim(-2), k = scores.dim(-1);
  if (k < q) throw DimensionError("causal_mask: fewer keys than queries in " + shape_str(scores.shape()));
  const std::size_t offset = k - q;
  const std::size_t mats = scores.numel() / (q * k);
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t m = 0; m < mats; ++m)
    for (std::size_t i = 0; i < q; ++i)
      for (std::size_t j = i + offset + 1; j < k; ++j) out[(m * q + i) * k + j] = kMaskedLogit;
  return make_op("causal_mask", scores.shape(), std::move(out), {scores},
                 [scores, mats, q, k, offset](const detail::TensorImpl& o) {
                   auto* g = grad_sink(scores);
                   for (std::size_t m = 0; m < mats; ++m)
                     for (std::size_t i = 0; i < q; ++i)
                       for (std::size_t j = 0; j <= i + offset; ++j) (*g)[(m * q + i) * k + j] += o.grad[(m * q + i) * k + j];
                 });
}

Tensor im2col(const Tensor& images, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (images.rank() != 4) throw DimensionError("im2col: expected [B,H,W,C], got " + shape_str(images.shape()));
  if (kernel == 0 || stride == 0) throw ContractError("im2col: kernel and stride must be positive");
  const std::size_t B = images.dim(0), H = images.dim(1), W = images.dim(2), C = images.dim(3);
  if (H + 2 * pad < kernel || W + 2 * pad < kernel) {
    throw DimensionError("im2col: kernel larger than padded image " + shape_str(images.shape()));
  }
  const std::size_t Ho = (H + 2 * pad - kernel) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kernel) / stride + 1;
  const std::size_t cols = kernel * kernel * C;
  // Source offset per output element; SIZE_MAX marks padding.
  auto src = std::make_shared<std::vector<std::size_t>>(B * Ho * Wo * cols);
  std::vector<double> out(src->size(), 0.0);
  const auto xd = images.data();
  std::size_t e = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx)
            for (std::size_t c = 0; c < C; ++c, ++e) {
              const auto y = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              const auto x = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(H) || x >= static_cast<std::ptrdiff_t>(W)) {
                (*src)[e] = std::numeric_limits<std::size_t>::max();
                continue;
              }
              const std::size_t at = ((b * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)) * C + c;
              (*src)[e] = at;
              out[e] = xd[at];
            }
  return make_op("im2col", {B, Ho * Wo, cols}, std::move(out), {images}, [images, src](const detail::TensorImpl& o) {
    auto* g = grad_sink(images);
    for (std::size_t e = 0; e < src->size(); ++e) {
      if ((*src)[e] != std::numeric_limits<std::size_t>::max()) (*g)[(*src)[e]] += o.grad[e];
    }
  });
}

}  // namespace a3net
