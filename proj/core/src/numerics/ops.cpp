#include "vqmir/numerics/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "vqmir/error.hpp"

namespace vqmir::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(const Tensor& t, std::size_t r, std::size_t c) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MutMap mmap(Tensor& t, std::size_t r, std::size_t c) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

const Tensor& val(Tape& t, std::size_t id) { return t.value(Var{&t, id}); }

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error(std::string(op) + ": operands live on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

std::size_t count_selected(const RowMask& mask, std::size_t rows, const char* op) {
  if (mask.empty()) return rows;
  if (mask.size() != rows) {
    throw ShapeError(std::string(op) + ": mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(rows) + " rows");
  }
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

bool selected(const RowMask& mask, std::size_t r) { return mask.empty() || mask[r] != 0; }

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  if (bv.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n});
  mmap(out, m, n).noalias() = cmap(av, m, k) * cmap(bv, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      mmap(t.grad_buffer(ia), m, k).noalias() += cmap(g, m, n) * cmap(val(t, ib), k, n).transpose();
    }
    if (t.requires_grad(ib)) {
      mmap(t.grad_buffer(ib), k, n).noalias() += cmap(val(t, ia), m, k).transpose() * cmap(g, m, n);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b, "matmul_nt");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[0];
  if (bv.shape()[1] != k) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()) + "^T");
  }
  Tensor out(Shape{m, n});
  mmap(out, m, n).noalias() = cmap(av, m, k) * cmap(bv, n, k).transpose();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul_nt", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      mmap(t.grad_buffer(ia), m, k).noalias() += cmap(g, m, n) * cmap(val(t, ib), n, k);
    }
    if (t.requires_grad(ib)) {
      mmap(t.grad_buffer(ib), n, k).noalias() += cmap(g, m, n).transpose() * cmap(val(t, ia), m, k);
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_matrix(av, "transpose");
  const std::size_t m = av.shape()[0], n = av.shape()[1];
  Tensor out(Shape{n, m});
  mmap(out, n, m) = cmap(av, m, n).transpose();
  const std::size_t ia = a.id;
  return a.tape->record("transpose", std::move(out), {ia}, [ia, m, n](Tape& t, const Tensor& g) {
    mmap(t.grad_buffer(ia), m, n) += cmap(g, n, m).transpose();
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out += b.value();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g;
    if (t.requires_grad(ib)) t.grad_buffer(ib) += g;
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const auto bd = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bd[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("sub", std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) t.grad_buffer(ia) += g;
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto bd = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bd[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& ga = t.grad_buffer(ia);
      const Tensor& bv = val(t, ib);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      const Tensor& av = val(t, ia);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  out *= s;
  const std::size_t ia = a.id;
  return a.tape->record("scale", std::move(out), {ia}, [ia, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += s * g[i];
  });
}

Var add_bias(Var x, Var bias) {
  require_same_tape(x, bias, "add_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  const std::size_t cols = xv.cols();
  if (bv.numel() != cols) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) + " does not match rows of " + shape_str(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t rows = xv.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  }
  const std::size_t ix = x.id, ib = bias.id;
  return x.tape->record("add_bias", std::move(out), {ix, ib}, [ix, ib, rows, cols](Tape& t, const Tensor& g) {
    if (t.requires_grad(ix)) t.grad_buffer(ix) += g;
    if (t.requires_grad(ib)) {
      Tensor& gb = t.grad_buffer(ib);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    }
  });
}

Var add_constant(Var x, const Tensor& c) {
  require_same_shape(x.value(), c, "add_constant");
  Tensor out = x.value();
  out += c;
  const std::size_t ix = x.id;
  return x.tape->record("add_constant", std::move(out), {ix},
                        [ix](Tape& t, const Tensor& g) { t.grad_buffer(ix) += g; });
}

Var linear(Var x, Var weight, Var bias) { return add_bias(matmul(x, weight), bias); }

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id;
  return x.tape->record("sum", Tensor::scalar(s), {ix}, [ix](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    const double gs = g[0];
    for (double& v : gx.data()) v += gs;
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var gelu(Var x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  const std::size_t ix = x.id;
  return x.tape->record("gelu", std::move(out), {ix}, [ix](Tape& t, const Tensor& g) {
    const Tensor& xv = val(t, ix);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
      gx[i] += g[i] * d;
    }
  });
}

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  KinkRecord kink{"relu", std::vector<double>(xv.numel()), std::vector<int>(xv.numel()), 0.0};
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    kink.distance[i] = xv[i];
    kink.state[i] = xv[i] > 0.0 ? 1 : 0;
  }
  x.tape->record_kink(std::move(kink));
  const std::size_t ix = x.id;
  return x.tape->record("relu", std::move(out), {ix}, [ix](Tape& t, const Tensor& g) {
    const Tensor& xv = val(t, ix);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  const auto rank = static_cast<int>(xv.rank());
  if (rank == 0) throw ShapeError("softmax of a scalar");
  const int ax = axis < 0 ? rank + axis : axis;
  if (ax < 0 || ax >= rank) throw ShapeError("softmax: axis out of range for " + shape_str(xv.shape()));
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= xv.shape()[d];
  for (int d = ax + 1; d < rank; ++d) inner *= xv.shape()[d];
  const std::size_t n = xv.shape()[ax];

  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  const std::size_t ix = x.id;
  const std::size_t iy = x.tape->size();
  return x.tape->record("softmax", std::move(out), {ix}, [ix, iy, outer, inner, n](Tape& t, const Tensor& g) {
    const Tensor& y = val(t, iy);
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t p = base + j * inner;
          gx[p] += y[p] * (g[p] - dot);
        }
      }
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, bias, "layer_norm");
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  const std::size_t rows = xv.rows();
  if (d == 0) throw ShapeError("layer_norm: feature dimension must be at least 1");
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " elements");
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * rstd[r];
      xhat[r * d + c] = h;
      out[r * d + c] = gv[c] * h + bv[c];
    }
  }
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->record(
      "layer_norm", std::move(out), {ix, ig, ib},
      [ix, ig, ib, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, const Tensor& g) {
        if (t.requires_grad(ig)) {
          Tensor& gg = t.grad_buffer(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xhat[r * d + c];
        }
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
        }
        if (t.requires_grad(ix)) {
          const Tensor& gv = val(t, ig);
          Tensor& gx = t.grad_buffer(ix);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = g[r * d + c] * gv[c];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + c];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = g[r * d + c] * gv[c];
              gx[r * d + c] += rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
            }
          }
        }
      });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_cols");
  const std::size_t rows = xv.shape()[0], cols = xv.shape()[1];
  if (start + count > cols) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") exceed " + shape_str(xv.shape()));
  }
  Tensor out(Shape{rows, count});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data().data() + r * cols + start, count, out.data().data() + r * count);
  const std::size_t ix = x.id;
  return x.tape->record("slice_cols", std::move(out), {ix}, [ix, rows, cols, start, count](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * cols + start + c] += g[r * count + c];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  Tape* tape = parts.front().tape;
  const std::size_t rows = parts.front().value().shape().at(0);
  std::vector<std::size_t> ids, widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p, "concat_cols");
    const Tensor& v = p.value();
    require_matrix(v, "concat_cols");
    if (v.shape()[0] != rows) throw ShapeError("concat_cols: row counts differ");
    ids.push_back(p.id);
    widths.push_back(v.shape()[1]);
    total += v.shape()[1];
  }
  Tensor out(Shape{rows, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data().data() + r * widths[k], widths[k], out.data().data() + r * total + off);
    off += widths[k];
  }
  return tape->record("concat_cols", std::move(out), ids, [ids, widths, rows, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& gp = t.grad_buffer(ids[k]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += g[r * total + off + c];
      }
      off += widths[k];
    }
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "gather_rows");
  const std::size_t n_rows = tv.shape()[0], d = tv.shape()[1];
  Tensor out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n_rows) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(n_rows) +
                       " rows");
    }
    std::copy_n(tv.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data().data() + i * d);
  }
  const std::size_t it = table.id;
  std::vector<int> saved(ids.begin(), ids.end());
  return table.tape->record("gather_rows", std::move(out), {it}, [it, d, saved = std::move(saved)](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_buffer(it);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      const std::size_t base = static_cast<std::size_t>(saved[i]) * d;
      for (std::size_t c = 0; c < d; ++c) gt[base + c] += g[i * d + c];
    }
  });
}

Var mean_rows(Var x, const RowMask& keep) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), d = xv.cols();
  const std::size_t n = count_selected(keep, rows, "mean_rows");
  if (n == 0) throw ShapeError("mean_rows: no rows selected");
  Tensor out(Shape{1, d});
  for (std::size_t r = 0; r < rows; ++r) {
    if (!selected(keep, r)) continue;
    for (std::size_t c = 0; c < d; ++c) out[c] += xv[r * d + c];
  }
  const double inv = 1.0 / static_cast<double>(n);
  out *= inv;
  const std::size_t ix = x.id;
  return x.tape->record("mean_rows", std::move(out), {ix}, [ix, rows, d, inv, keep](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!selected(keep, r)) continue;
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[c] * inv;
    }
  });
}

Var stop_gradient(Var x) { return x.tape->constant(x.value()); }

Var straight_through(Var latent, const Tensor& quantized) {
  require_same_shape(latent.value(), quantized, "straight_through");
  const std::size_t il = latent.id;
  return latent.tape->record("straight_through", quantized, {il},
                             [il](Tape& t, const Tensor& g) { t.grad_buffer(il) += g; });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const Tensor& xv = x.value();
  std::bernoulli_distribution keep(1.0 - rate);
  const double s = 1.0 / (1.0 - rate);
  std::vector<double> factor(xv.numel());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    factor[i] = keep(rng) ? s : 0.0;
    out[i] = xv[i] * factor[i];
  }
  const std::size_t ix = x.id;
  return x.tape->record("dropout", std::move(out), {ix}, [ix, factor = std::move(factor)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < factor.size(); ++i) gx[i] += g[i] * factor[i];
  });
}

namespace {

struct ConvDims {
  std::size_t length, in_ch, out_ch, kernel, stride, padding, out_length;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t padding,
                   bool transposed, const char* op) {
  require_matrix(x, op);
  if (w.rank() != 3) throw ShapeError(std::string(op) + ": weight must be [kernel x in x out], got " + shape_str(w.shape()));
  ConvDims d{x.shape()[0], x.shape()[1], w.shape()[2], w.shape()[0], stride, padding, 0};
  if (w.shape()[1] != d.in_ch) {
    throw ShapeError(std::string(op) + ": input has " + std::to_string(d.in_ch) + " channels, weight expects " +
                     std::to_string(w.shape()[1]));
  }
  if (b.numel() != d.out_ch) throw ShapeError(std::string(op) + ": bias size does not match output channels");
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  if (transposed) {
    const long long len = (static_cast<long long>(d.length) - 1) * static_cast<long long>(stride) -
                          2 * static_cast<long long>(padding) + static_cast<long long>(d.kernel);
    if (len <= 0) throw ShapeError(std::string(op) + ": output would be empty");
    d.out_length = static_cast<std::size_t>(len);
  } else {
    if (d.length + 2 * padding < d.kernel) throw ShapeError(std::string(op) + ": input shorter than kernel");
    d.out_length = (d.length + 2 * padding - d.kernel) / stride + 1;
  }
  return d;
}

// Input row feeding output `o` through tap `k`, or -1 when it falls in padding.
long long conv_src(const ConvDims& d, std::size_t o, std::size_t k) {
  const long long i = static_cast<long long>(o * d.stride + k) - static_cast<long long>(d.padding);
  return (i < 0 || i >= static_cast<long long>(d.length)) ? -1 : i;
}

// Output row reached from input `i` through tap `k` of a transposed conv, or -1.
long long tconv_dst(const ConvDims& d, std::size_t i, std::size_t k) {
  const long long o = static_cast<long long>(i * d.stride + k) - static_cast<long long>(d.padding);
  return (o < 0 || o >= static_cast<long long>(d.out_length)) ? -1 : o;
}

}  // namespace

Var conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding) {
  require_same_tape(x, weight, "conv1d");
  require_same_tape(x, bias, "conv1d");
  const ConvDims d = conv_dims(x.value(), weight.value(), bias.value(), stride, padding, false, "conv1d");
  const std::size_t kc = d.kernel * d.in_ch;

  auto im2col = [d, kc](const Tensor& xv) {
    RowMat cols = RowMat::Zero(static_cast<Eigen::Index>(d.out_length), static_cast<Eigen::Index>(kc));
    for (std::size_t o = 0; o < d.out_length; ++o) {
      for (std::size_t k = 0; k < d.kernel; ++k) {
        const long long i = conv_src(d, o, k);
        if (i < 0) continue;
        for (std::size_t c = 0; c < d.in_ch; ++c) cols(o, k * d.in_ch + c) = xv[static_cast<std::size_t>(i) * d.in_ch + c];
      }
    }
    return cols;
  };

  Tensor out(Shape{d.out_length, d.out_ch});
  {
    const RowMat cols = im2col(x.value());
    auto y = mmap(out, d.out_length, d.out_ch);
    y.noalias() = cols * cmap(weight.value(), kc, d.out_ch);
    const auto bv = cmap(bias.value(), 1, d.out_ch);
    y.rowwise() += bv.row(0);
  }
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
  return x.tape->record("conv1d", std::move(out), {ix, iw, ib}, [ix, iw, ib, d, kc, im2col](Tape& t, const Tensor& g) {
    const auto gy = cmap(g, d.out_length, d.out_ch);
    if (t.requires_grad(ib)) {
      mmap(t.grad_buffer(ib), 1, d.out_ch) += gy.colwise().sum();
    }
    if (t.requires_grad(iw)) {
      const RowMat cols = im2col(val(t, ix));
      mmap(t.grad_buffer(iw), kc, d.out_ch).noalias() += cols.transpose() * gy;
    }
    if (t.requires_grad(ix)) {
      const RowMat gcols = gy * cmap(val(t, iw), kc, d.out_ch).transpose();
      Tensor& gx = t.grad_buffer(ix);
      for (std::size_t o = 0; o < d.out_length; ++o) {
        for (std::size_t k = 0; k < d.kernel; ++k) {
          const long long i = conv_src(d, o, k);
          if (i < 0) continue;
          for (std::size_t c = 0; c < d.in_ch; ++c) gx[static_cast<std::size_t>(i) * d.in_ch + c] += gcols(o, k * d.in_ch + c);
        }
      }
    }
  });
}

Var conv_transpose1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding) {
  require_same_tape(x, weight, "conv_transpose1d");
  require_same_tape(x, bias, "conv_transpose1d");
  const ConvDims d = conv_dims(x.value(), weight.value(), bias.value(), stride, padding, true, "conv_transpose1d");
  const std::size_t kc = d.kernel * d.out_ch;

  // Weight rearranged to [in x (kernel*out)] so one GEMM yields every tap.
  auto rearrange = [d, kc](const Tensor& w) {
    RowMat wr(static_cast<Eigen::Index>(d.in_ch), static_cast<Eigen::Index>(kc));
    for (std::size_t k = 0; k < d.kernel; ++k)
      for (std::size_t ci = 0; ci < d.in_ch; ++ci)
        for (std::size_t co = 0; co < d.out_ch; ++co)
          wr(ci, k * d.out_ch + co) = w[(k * d.in_ch + ci) * d.out_ch + co];
    return wr;
  };

  Tensor out(Shape{d.out_length, d.out_ch});
  {
    const RowMat z = cmap(x.value(), d.length, d.in_ch) * rearrange(weight.value());
    for (std::size_t i = 0; i < d.length; ++i) {
      for (std::size_t k = 0; k < d.kernel; ++k) {
        const long long o = tconv_dst(d, i, k);
        if (o < 0) continue;
        for (std::size_t co = 0; co < d.out_ch; ++co) out[static_cast<std::size_t>(o) * d.out_ch + co] += z(i, k * d.out_ch + co);
      }
    }
    const Tensor& bv = bias.value();
    for (std::size_t o = 0; o < d.out_length; ++o)
      for (std::size_t co = 0; co < d.out_ch; ++co) out[o * d.out_ch + co] += bv[co];
  }
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
  return x.tape->record("conv_transpose1d", std::move(out), {ix, iw, ib},
                        [ix, iw, ib, d, kc, rearrange](Tape& t, const Tensor& g) {
                          if (t.requires_grad(ib)) {
                            mmap(t.grad_buffer(ib), 1, d.out_ch) += cmap(g, d.out_length, d.out_ch).colwise().sum();
                          }
                          RowMat gz = RowMat::Zero(static_cast<Eigen::Index>(d.length), static_cast<Eigen::Index>(kc));
                          for (std::size_t i = 0; i < d.length; ++i) {
                            for (std::size_t k = 0; k < d.kernel; ++k) {
                              const long long o = tconv_dst(d, i, k);
                              if (o < 0) continue;
                              for (std::size_t co = 0; co < d.out_ch; ++co)
                                gz(i, k * d.out_ch + co) = g[static_cast<std::size_t>(o) * d.out_ch + co];
                            }
                          }
                          if (t.requires_grad(ix)) {
                            mmap(t.grad_buffer(ix), d.length, d.in_ch).noalias() +=
                                gz * rearrange(val(t, iw)).transpose();
                          }
                          if (t.requires_grad(iw)) {
                            const RowMat gwr = cmap(val(t, ix), d.length, d.in_ch).transpose() * gz;
                            Tensor& gw = t.grad_buffer(iw);
                            for (std::size_t k = 0; k < d.kernel; ++k)
                              for (std::size_t ci = 0; ci < d.in_ch; ++ci)
                                for (std::size_t co = 0; co < d.out_ch; ++co)
                                  gw[(k * d.in_ch + ci) * d.out_ch + co] += gwr(ci, k * d.out_ch + co);
                          }
                        });
}

Var cross_entropy(Var logits, std::span<const int> targets, const RowMask& mask, std::span<const double> class_weights) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  const std::size_t rows = lv.shape()[0], v = lv.shape()[1];
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " rows");
  }
  if (!class_weights.empty() && class_weights.size() != v) {
    throw ShapeError("cross_entropy: class weight count does not match the number of classes");
  }
  const std::size_t n = count_selected(mask, rows, "cross_entropy");
  if (n == 0) throw Error("cross_entropy: no supervised positions");

  std::vector<double> probs(rows * v, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!selected(mask, r)) continue;
    const int tgt = targets[r];
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) {
      throw Error("cross_entropy: target " + std::to_string(tgt) + " outside [0, " + std::to_string(v) + ")");
    }
    const double* row = lv.data().data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] = std::exp(row[c] - lse);
    const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(tgt)];
    total += w * (lse - row[tgt]);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> cw(class_weights.begin(), class_weights.end());
  const std::size_t il = logits.id;
  return logits.tape->record(
      "cross_entropy", Tensor::scalar(total * inv_n), {il},
      [il, rows, v, inv_n, mask, tg = std::move(tg), cw = std::move(cw), probs = std::move(probs)](Tape& t,
                                                                                                   const Tensor& g) {
        Tensor& gl = t.grad_buffer(il);
        const double gs = g[0] * inv_n;
        for (std::size_t r = 0; r < rows; ++r) {
          if (!selected(mask, r)) continue;
          const double w = cw.empty() ? 1.0 : cw[static_cast<std::size_t>(tg[r])];
          for (std::size_t c = 0; c < v; ++c) gl[r * v + c] += gs * w * probs[r * v + c];
          gl[r * v + static_cast<std::size_t>(tg[r])] -= gs * w;
        }
      });
}

Var huber(Var pred, Var target, double delta, const RowMask& mask) {
  require_same_tape(pred, target, "huber");
  require_same_shape(pred.value(), target.value(), "huber");
  if (!(delta > 0.0)) throw ConfigError("huber: delta must be positive");
  const Tensor& pv = pred.value();
  const Tensor& tv = target.value();
  const std::size_t rows = pv.rows(), cols = pv.cols();
  const std::size_t n_rows = count_selected(mask, rows, "huber");
  if (n_rows == 0 || cols == 0) throw Error("huber: no supervised positions");
  const double inv_n = 1.0 / static_cast<double>(n_rows * cols);

  double total = 0.0;
  KinkRecord kink{"huber", {}, {}, kHuberKinkBand};
  for (std::size_t r = 0; r < rows; ++r) {
    if (!selected(mask, r)) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const double res = pv[r * cols + c] - tv[r * cols + c];
      const double a = std::abs(res);
      total += a <= delta ? 0.5 * res * res : delta * (a - 0.5 * delta);
      kink.distance.push_back(a - delta);
      kink.state.push_back(a > delta ? 1 : 0);
    }
  }
  pred.tape->record_kink(std::move(kink));
  const std::size_t ip = pred.id, it = target.id;
  return pred.tape->record("huber", Tensor::scalar(total * inv_n), {ip, it},
                           [ip, it, rows, cols, delta, inv_n, mask](Tape& t, const Tensor& g) {
                             const Tensor& pv = val(t, ip);
                             const Tensor& tv = val(t, it);
                             const double gs = g[0] * inv_n;
                             Tensor* gp = t.requires_grad(ip) ? &t.grad_buffer(ip) : nullptr;
                             Tensor* gt = t.requires_grad(it) ? &t.grad_buffer(it) : nullptr;
                             for (std::size_t r = 0; r < rows; ++r) {
                               if (!selected(mask, r)) continue;
                               for (std::size_t c = 0; c < cols; ++c) {
                                 const std::size_t i = r * cols + c;
                                 const double res = pv[i] - tv[i];
                                 const double d = std::abs(res) <= delta ? res : (res > 0 ? delta : -delta);
                                 if (gp) (*gp)[i] += gs * d;
                                 if (gt) (*gt)[i] -= gs * d;
                               }
                             }
                           });
}

Var mse(Var a, Var b) {
  require_same_tape(a, b, "mse");
  require_same_shape(a.value(), b.value(), "mse");
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("mse of empty tensors");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = a.value()[i] - b.value()[i];
    total += r * r;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("mse", Tensor::scalar(total * inv_n), {ia, ib}, [ia, ib, n, inv_n](Tape& t, const Tensor& g) {
    const Tensor& av = val(t, ia);
    const Tensor& bv = val(t, ib);
    const double gs = 2.0 * g[0] * inv_n;
    Tensor* ga = t.requires_grad(ia) ? &t.grad_buffer(ia) : nullptr;
    Tensor* gb = t.requires_grad(ib) ? &t.grad_buffer(ib) : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = gs * (av[i] - bv[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

}  // namespace vqmir::ops
