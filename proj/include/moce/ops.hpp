#pragma once

#include "moce/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace moce {

/// Row ranges of a packed ragged batch: sequence i occupies rows
/// [offsets[i], offsets[i+1]). Convolution windows and attention never cross
/// a segment boundary.
struct Segments {
  std::vector<Index> offsets{0};

  static Segments single(Index length) { return Segments{{0, length}}; }
  static Segments from_lengths(std::span<const Index> lengths) {
    Segments s;
    for (Index l : lengths) s.offsets.push_back(s.offsets.back() + l);
    return s;
  }

  Index count() const { return static_cast<Index>(offsets.size()) - 1; }
  Index begin(Index i) const { return offsets[static_cast<std::size_t>(i)]; }
  Index length(Index i) const { return offsets[static_cast<std::size_t>(i) + 1] - begin(i); }
  Index total() const { return offsets.back(); }
};

namespace detail {

template <typename Scalar>
void same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape() != b.tape()) throw Error("operands recorded on different tapes");
}

inline std::string shape_str(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

template <typename Scalar>
void same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                shape_str(b.rows(), b.cols()));
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  const auto ia = a.id(), ib = b.id();
  auto* t = a.tape();
  return t->push(
      a.value() + b.value(),
      [ia, ib, self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        tp.accumulate(ia, g);
        tp.accumulate(ib, g);
      },
      a, b);
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  const auto ia = a.id(), ib = b.id();
  auto* t = a.tape();
  return t->push(
      a.value() - b.value(),
      [ia, ib, self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        tp.accumulate(ia, g);
        tp.accumulate(ib, -g);
      },
      a, b);
}

/// Element-wise product.
template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "hadamard");
  const auto ia = a.id(), ib = b.id();
  auto* t = a.tape();
  return t->push(
      a.value().cwiseProduct(b.value()),
      [ia, ib, self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
      },
      a, b);
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  const auto ia = a.id();
  auto* t = a.tape();
  return t->push(
      a.value() * s, [ia, s, self = t->size()](Tape<Scalar>& tp) { tp.accumulate(ia, tp.grad(self) * s); }, a);
}

/// a + 1 * row, broadcasting a 1 x C row over every row of a.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  detail::same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: row must be 1x" + std::to_string(a.cols()));
  const auto ia = a.id(), ir = row.id();
  auto* t = a.tape();
  Matrix<Scalar> out = a.value();
  out.rowwise() += row.value().row(0);
  return t->push(
      std::move(out),
      [ia, ir, self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        tp.accumulate(ia, g);
        if (tp.requires_grad(ir)) tp.accumulate(ir, g.colwise().sum());
      },
      a, row);
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  if (a.cols() != b.rows())
    throw Error("matmul: inner extents differ (" + detail::shape_str(a.rows(), a.cols()) + " * " +
                detail::shape_str(b.rows(), b.cols()) + ")");
  const auto ia = a.id(), ib = b.id();
  auto* t = a.tape();
  Matrix<Scalar> out = a.value() * b.value();
  return t->push(
      std::move(out),
      [ia, ib, self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
        if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
      },
      a, b);
}

/// a * b^T.
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  if (a.cols() != b.cols())
    throw Error("matmul_nt: inner extents differ (" + detail::shape_str(a.rows(), a.cols()) + " * (" +
                detail::shape_str(b.rows(), b.cols()) + ")^T)");
  const auto ia = a.id(), ib = b.id();
  auto* t = a.tape();
  Matrix<Scalar> out = a.value() * b.value().transpose();
  return t->push(
      std::move(out),
      [ia, ib, self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
      },
      a, b);
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  const auto ia = a.id();
  auto* t = a.tape();
  if (t->track_kinks()) {
    std::size_t h = 0;
    for (Index i = 0; i < a.value().size(); ++i) h = h * 31 + (a.value().data()[i] > Scalar(0) ? 1 : 0);
    t->note_decision(h);
  }
  return t->push(
      a.value().cwiseMax(Scalar(0)),
      [ia, self = t->size()](Tape<Scalar>& tp) {
        const auto& x = tp.value(ia);
        tp.accumulate(ia, (x.array() > Scalar(0)).select(tp.grad(self), Scalar(0)));
      },
      a);
}

/// Sum of all entries, as a 1x1 tensor.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  const auto ia = a.id();
  auto* t = a.tape();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const Index r = a.rows(), c = a.cols();
  return t->push(
      std::move(out),
      [ia, r, c, self = t->size()](Tape<Scalar>& tp) {
        tp.accumulate(ia, Matrix<Scalar>::Constant(r, c, tp.grad(self)(0, 0)));
      },
      a);
}

/// Column means, 1 x C.
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& a) {
  const auto ia = a.id();
  auto* t = a.tape();
  const Index r = a.rows();
  Matrix<Scalar> out = a.value().colwise().mean();
  return t->push(
      std::move(out),
      [ia, r, self = t->size()](Tape<Scalar>& tp) {
        Matrix<Scalar> g = tp.grad(self).replicate(r, 1) / Scalar(r);
        tp.accumulate(ia, g);
      },
      a);
}

namespace detail {

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x) {
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    if (m == neg_inf<Scalar>()) throw Error("softmax: every entry of a row is -inf");
    y.row(i) = (x.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> softmax_rows_backward(const Matrix<Scalar>& y, const Matrix<Scalar>& g) {
  Matrix<Scalar> dx(y.rows(), y.cols());
  for (Index i = 0; i < y.rows(); ++i) {
    const Scalar dot = y.row(i).dot(g.row(i));
    dx.row(i) = y.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
  }
  return dx;
}

}  // namespace detail

/// Softmax along `axis` (1: within each row, 0: within each column).
/// Entries equal to -inf receive exactly zero probability.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a, int axis = 1) {
  if (axis != 0 && axis != 1) throw Error("softmax: axis must be 0 or 1");
  const auto ia = a.id();
  auto* t = a.tape();
  Matrix<Scalar> y = axis == 1 ? detail::softmax_rows<Scalar>(a.value())
                               : Matrix<Scalar>(detail::softmax_rows<Scalar>(a.value().transpose()).transpose());
  return t->push(
      std::move(y),
      [ia, axis, self = t->size()](Tape<Scalar>& tp) {
        const auto& y = tp.value(self);
        const auto& g = tp.grad(self);
        if (axis == 1) {
          tp.accumulate(ia, detail::softmax_rows_backward<Scalar>(y, g));
        } else {
          Matrix<Scalar> yt = y.transpose(), gt = g.transpose();
          tp.accumulate(ia, detail::softmax_rows_backward<Scalar>(yt, gt).transpose());
        }
      },
      a);
}

/// Per-row normalization over the feature axis followed by gamma/beta affine.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5)) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Index n = x.rows(), c = x.cols();
  if (c == 0) throw Error("layer_norm: empty feature axis");
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c)
    throw Error("layer_norm: gamma/beta must be 1x" + std::to_string(c));
  Matrix<Scalar> xhat(n, c);
  RowVector<Scalar> inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const Scalar mu = x.value().row(i).mean();
    const auto centered = (x.value().row(i).array() - mu).matrix();
    const Scalar var = centered.squaredNorm() / Scalar(c);
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  Matrix<Scalar> y = xhat;
  y.array().rowwise() *= gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
  auto* t = x.tape();
  return t->push(
      std::move(y),
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(ig)) tp.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
        if (tp.requires_grad(ix)) {
          const auto& gm = tp.value(ig);
          Matrix<Scalar> dxhat = g;
          dxhat.array().rowwise() *= gm.row(0).array();
          Matrix<Scalar> dx(dxhat.rows(), dxhat.cols());
          const Scalar c = Scalar(dxhat.cols());
          for (Index i = 0; i < dxhat.rows(); ++i) {
            const Scalar m1 = dxhat.row(i).sum() / c;
            const Scalar m2 = dxhat.row(i).dot(xhat.row(i)) / c;
            dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
          }
          tp.accumulate(ix, dx);
        }
      },
      x, gamma, beta);
}

/// Length-preserving 1-D convolution with a centered odd window and zero
/// padding at every segment boundary:
///   out[j] = b + sum_{t=-(k-1)/2}^{(k-1)/2} x[j+t] * W_t
/// `w` holds the k taps stacked as (k*C_in) x C_out, tap t = -(k-1)/2 first.
template <typename Scalar>
Var<Scalar> conv1d_same(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b,
                        const Segments& segments) {
  detail::same_tape(x, w);
  detail::same_tape(x, b);
  const Index n = x.rows(), cin = x.cols(), cout = w.cols();
  if (cin == 0 || w.rows() % cin != 0) throw Error("conv1d_same: kernel rows must be a multiple of input channels");
  const Index k = w.rows() / cin;
  if (k % 2 == 0) throw Error("conv1d_same: kernel size must be odd, got " + std::to_string(k));
  if (b.rows() != 1 || b.cols() != cout) throw Error("conv1d_same: bias must be 1x" + std::to_string(cout));
  if (segments.total() != n) throw Error("conv1d_same: segments do not cover the input rows");
  const Index half = (k - 1) / 2;

  Matrix<Scalar> cols = Matrix<Scalar>::Zero(n, k * cin);
  for (Index s = 0; s < segments.count(); ++s) {
    const Index lo = segments.begin(s), len = segments.length(s);
    for (Index j = 0; j < len; ++j) {
      for (Index tap = 0; tap < k; ++tap) {
        const Index src = j + tap - half;
        if (src < 0 || src >= len) continue;
        cols.block(lo + j, tap * cin, 1, cin) = x.value().row(lo + src);
      }
    }
  }
  Matrix<Scalar> y = cols * w.value();
  y.rowwise() += b.value().row(0);

  const auto ix = x.id(), iw = w.id(), ib = b.id();
  auto* t = x.tape();
  return t->push(
      std::move(y),
      [ix, iw, ib, k, half, cin, segments, cols = std::move(cols), self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        if (tp.requires_grad(iw)) tp.accumulate(iw, cols.transpose() * g);
        if (tp.requires_grad(ib)) tp.accumulate(ib, g.colwise().sum());
        if (tp.requires_grad(ix)) {
          Matrix<Scalar> dcols = g * tp.value(iw).transpose();
          Matrix<Scalar>& dx = tp.grad_buffer(ix);
          for (Index s = 0; s < segments.count(); ++s) {
            const Index lo = segments.begin(s), len = segments.length(s);
            for (Index j = 0; j < len; ++j) {
              for (Index tap = 0; tap < k; ++tap) {
                const Index src = j + tap - half;
                if (src < 0 || src >= len) continue;
                dx.row(lo + src) += dcols.block(lo + j, tap * cin, 1, cin);
              }
            }
          }
        }
      },
      x, w, b);
}

template <typename Scalar>
Var<Scalar> conv1d_same(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  return conv1d_same(x, w, b, Segments::single(x.rows()));
}

/// Label-smoothed cross entropy, averaged over rows whose target is not
/// `ignore_id`. The smoothed target puts (1 - smoothing) on the gold id and
/// spreads `smoothing` uniformly over the whole vocabulary.
template <typename Scalar>
Var<Scalar> cross_entropy_ls(const Var<Scalar>& logits, std::span<const int> targets, Scalar smoothing,
                             int ignore_id = -1) {
  const Index n = logits.rows(), v = logits.cols();
  if (static_cast<Index>(targets.size()) != n) throw Error("cross_entropy_ls: one target per logit row required");
  if (smoothing < Scalar(0) || smoothing >= Scalar(1)) throw Error("cross_entropy_ls: smoothing must be in [0,1)");
  Matrix<Scalar> probs(n, v);
  Scalar total = 0;
  Index counted = 0;
  for (Index i = 0; i < n; ++i) {
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (tgt == ignore_id) continue;
    if (tgt < 0 || tgt >= v)
      throw Error("cross_entropy_ls: target id " + std::to_string(tgt) + " out of range [0," + std::to_string(v) + ")");
    const auto row = logits.value().row(i);
    const Scalar m = row.maxCoeff();
    const Scalar lse = m + std::log((row.array() - m).exp().sum());
    probs.row(i) = (row.array() - lse).exp();
    const Scalar nll = lse - row(tgt);
    const Scalar mean_nll = lse - row.mean();
    total += (Scalar(1) - smoothing) * nll + smoothing * mean_nll;
    ++counted;
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = counted > 0 ? total / Scalar(counted) : Scalar(0);
  std::vector<int> tg(targets.begin(), targets.end());
  const auto il = logits.id();
  auto* t = logits.tape();
  return t->push(
      std::move(out),
      [il, tg = std::move(tg), probs = std::move(probs), smoothing, ignore_id, counted, v,
       self = t->size()](Tape<Scalar>& tp) {
        if (counted == 0) return;
        const Scalar g = tp.grad(self)(0, 0) / Scalar(counted);
        Matrix<Scalar> d = Matrix<Scalar>::Zero(probs.rows(), probs.cols());
        for (Index i = 0; i < probs.rows(); ++i) {
          const int tgt = tg[static_cast<std::size_t>(i)];
          if (tgt == ignore_id) continue;
          d.row(i) = (probs.row(i).array() - smoothing / Scalar(v)).matrix() * g;
          d(i, tgt) -= (Scalar(1) - smoothing) * g;
        }
        tp.accumulate(il, d);
      },
      logits);
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index start, Index width) {
  if (start < 0 || width < 0 || start + width > a.cols()) throw Error("slice_cols: range out of bounds");
  const auto ia = a.id();
  auto* t = a.tape();
  return t->push(
      a.value().middleCols(start, width),
      [ia, start, width, self = t->size()](Tape<Scalar>& tp) {
        if (!tp.requires_grad(ia)) return;
        tp.grad_buffer(ia).middleCols(start, width) += tp.grad(self);
      },
      a);
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw Error("concat_cols: nothing to concatenate");
  const Index r = parts.front().rows();
  Index c = 0;
  bool any = false;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p);
    if (p.rows() != r) throw Error("concat_cols: row counts differ");
    c += p.cols();
    any = any || p.tape()->requires_grad(p.id());
  }
  Matrix<Scalar> out(r, c);
  std::vector<std::pair<std::size_t, Index>> ids;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    ids.emplace_back(p.id(), p.cols());
    at += p.cols();
  }
  auto* t = parts.front().tape();
  return t->push_many(
      std::move(out),
      [ids = std::move(ids), self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        Index at = 0;
        for (const auto& [id, w] : ids) {
          tp.accumulate(id, g.middleCols(at, w));
          at += w;
        }
      },
      any);
}

template <typename Scalar>
Var<Scalar> concat_cols(std::initializer_list<Var<Scalar>> parts) {
  return concat_cols(std::span<const Var<Scalar>>(parts.begin(), parts.size()));
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw Error("slice_rows: range out of bounds");
  const auto ia = a.id();
  auto* t = a.tape();
  return t->push(
      a.value().middleRows(start, count),
      [ia, start, count, self = t->size()](Tape<Scalar>& tp) {
        if (!tp.requires_grad(ia)) return;
        tp.grad_buffer(ia).middleRows(start, count) += tp.grad(self);
      },
      a);
}

/// out[i] = table[ids[i]]; gradients scatter-add back into the table rows.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& table, std::span<const int> ids) {
  const Index n = static_cast<Index>(ids.size());
  Matrix<Scalar> out(n, table.cols());
  for (Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= table.rows()) throw Error("gather_rows: row id " + std::to_string(id) + " out of range");
    out.row(i) = table.value().row(id);
  }
  std::vector<int> rows(ids.begin(), ids.end());
  const auto it = table.id();
  auto* t = table.tape();
  return t->push(
      std::move(out),
      [it, rows = std::move(rows), self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        auto& dt = tp.grad_buffer(it);
        for (std::size_t i = 0; i < rows.size(); ++i) dt.row(rows[i]) += g.row(static_cast<Index>(i));
      },
      table);
}

/// Multiplies row i by keep[i] (0 or 1); used to zero padded positions.
template <typename Scalar>
Var<Scalar> mask_rows(const Var<Scalar>& a, std::span<const std::uint8_t> keep) {
  if (static_cast<Index>(keep.size()) != a.rows()) throw Error("mask_rows: one flag per row required");
  Matrix<Scalar> out = a.value();
  std::vector<std::uint8_t> k(keep.begin(), keep.end());
  for (Index i = 0; i < out.rows(); ++i)
    if (!k[static_cast<std::size_t>(i)]) out.row(i).setZero();
  const auto ia = a.id();
  auto* t = a.tape();
  return t->push(
      std::move(out),
      [ia, k = std::move(k), self = t->size()](Tape<Scalar>& tp) {
        Matrix<Scalar> g = tp.grad(self);
        for (Index i = 0; i < g.rows(); ++i)
          if (!k[static_cast<std::size_t>(i)]) g.row(i).setZero();
        tp.accumulate(ia, g);
      },
      a);
}

/// Inverted dropout: keeps each entry with probability 1-p and rescales.
template <typename Scalar, typename Rng>
Var<Scalar> dropout(const Var<Scalar>& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw Error("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const Scalar s = Scalar(1.0 / (1.0 - p));
  Matrix<Scalar> mask(a.rows(), a.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : Scalar(0);
  auto* t = a.tape();
  return hadamard(a, t->constant(std::move(mask)));
}

}  // namespace moce
