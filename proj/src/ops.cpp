#include <nvs/ops.hpp>

#include <nvs/errors.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace nvs {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? ", " : "") << shape[i];
  out << ']';
  return out.str();
}

namespace {

void require(bool condition, const std::string& message) {
  if (!condition) throw ArgumentError(message);
}

template <typename S>
void require_same_size(const Var<S>& a, const Var<S>& b, const char* op) {
  require(a.size() == b.size(), std::string(op) + ": size mismatch " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
}

template <typename S>
void require_rank(const Var<S>& x, Index rank, const char* op) {
  require(x.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_string(x.shape()));
}

bool is_valid(const Mask& mask, Index i) { return mask.empty() || mask[static_cast<std::size_t>(i)] != 0; }

}  // namespace

template <typename S>
Var<S> make_op(ArrayX<S> value, Shape shape, const std::vector<Var<S>>& inputs,
               std::function<void(const ArrayX<S>&)> backward) {
  Var<S> out = Var<S>::constant(std::move(value), std::move(shape));
  if (!grad_enabled()) return out;
  auto* node = out.node();
  for (const auto& input : inputs) {
    if (input.defined() && input.requires_grad()) node->parents.push_back(input.node_ptr());
  }
  if (node->parents.empty()) return out;
  node->requires_grad = true;
  node->backward = std::move(backward);
  return out;
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_size(a, b, "add");
  return make_op<S>(a.value() + b.value(), a.shape(), {a, b}, [a, b](const ArrayX<S>& g) {
    accumulate_grad(a, g);
    accumulate_grad(b, g);
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_size(a, b, "sub");
  return make_op<S>(a.value() - b.value(), a.shape(), {a, b}, [a, b](const ArrayX<S>& g) {
    accumulate_grad(a, g);
    accumulate_grad(b, -g);
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_size(a, b, "mul");
  return make_op<S>(a.value() * b.value(), a.shape(), {a, b}, [a, b](const ArrayX<S>& g) {
    accumulate_grad(a, g * b.value());
    accumulate_grad(b, g * a.value());
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  return make_op<S>(a.value() * factor, a.shape(), {a}, [a, factor](const ArrayX<S>& g) { accumulate_grad(a, g * factor); });
}

template <typename S>
Var<S> scale_rows(const Var<S>& x, const ArrayX<S>& factors) {
  const auto [rows, cols] = x.matrix_dims();
  require(factors.size() == rows, "scale_rows: factor count mismatch");
  RowMatrix<S> out = factors.matrix().asDiagonal() * x.mat();
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), x.shape(), {x},
                    [x, factors, rows = rows, cols = cols](const ArrayX<S>& g) {
                      if (!x.requires_grad()) return;
                      RowMatrix<S> d = factors.matrix().asDiagonal() * ConstMatrixMap<S>(g.data(), rows, cols);
                      accumulate_grad(x, Eigen::Map<const ArrayX<S>>(d.data(), d.size()));
                    });
}

template <typename S>
Var<S> add_row_bias(const Var<S>& x, const Var<S>& bias) {
  require_rank(x, 2, "add_row_bias");
  require(bias.size() == x.dim(1), "add_row_bias: bias size mismatch");
  const Index rows = x.dim(0), cols = x.dim(1);
  RowMatrix<S> out = x.mat();
  out.rowwise() += bias.value().matrix().transpose();
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), x.shape(), {x, bias},
                    [x, bias, rows, cols](const ArrayX<S>& g) {
                      accumulate_grad(x, g);
                      if (bias.requires_grad()) {
                        ConstMatrixMap<S> gm(g.data(), rows, cols);
                        accumulate_grad(bias, gm.colwise().sum().transpose().array());
                      }
                    });
}

template <typename S>
Var<S> add_channel_bias(const Var<S>& x, const Var<S>& bias) {
  require(x.rank() >= 1 && bias.size() == x.dim(0), "add_channel_bias: bias size mismatch");
  const auto [rows, cols] = x.matrix_dims();
  RowMatrix<S> out = x.mat();
  out.colwise() += bias.value().matrix();
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), x.shape(), {x, bias},
                    [x, bias, rows = rows, cols = cols](const ArrayX<S>& g) {
                      accumulate_grad(x, g);
                      if (bias.requires_grad()) {
                        ConstMatrixMap<S> gm(g.data(), rows, cols);
                        accumulate_grad(bias, gm.rowwise().sum().array());
                      }
                    });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require(a.dim(1) == b.dim(0), "matmul: inner dimension mismatch " + shape_string(a.shape()) + " x " +
                                    shape_string(b.shape()));
  const Index n = a.dim(0), m = b.dim(1);
  RowMatrix<S> out = a.mat() * b.mat();
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), Shape{n, m}, {a, b},
                    [a, b, n, m](const ArrayX<S>& g) {
                      ConstMatrixMap<S> gm(g.data(), n, m);
                      if (a.requires_grad()) {
                        RowMatrix<S> da = gm * b.mat().transpose();
                        accumulate_grad(a, Eigen::Map<const ArrayX<S>>(da.data(), da.size()));
                      }
                      if (b.requires_grad()) {
                        RowMatrix<S> db = a.mat().transpose() * gm;
                        accumulate_grad(b, Eigen::Map<const ArrayX<S>>(db.data(), db.size()));
                      }
                    });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  require(x.dim(1) == weight.dim(0), "linear: input width " + std::to_string(x.dim(1)) + " does not match weight " +
                                         shape_string(weight.shape()));
  const Index n = x.dim(0), out_dim = weight.dim(1);
  RowMatrix<S> out(n, out_dim);
  out.noalias() = x.mat() * weight.mat();
  if (bias.defined()) out.rowwise() += bias.value().matrix().transpose();
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), Shape{n, out_dim}, {x, weight, bias},
                    [x, weight, bias, n, out_dim](const ArrayX<S>& g) {
                      ConstMatrixMap<S> gm(g.data(), n, out_dim);
                      if (x.requires_grad()) {
                        RowMatrix<S> dx = gm * weight.mat().transpose();
                        accumulate_grad(x, Eigen::Map<const ArrayX<S>>(dx.data(), dx.size()));
                      }
                      if (weight.requires_grad()) {
                        RowMatrix<S> dw = x.mat().transpose() * gm;
                        accumulate_grad(weight, Eigen::Map<const ArrayX<S>>(dw.data(), dw.size()));
                      }
                      if (bias.defined() && bias.requires_grad()) {
                        accumulate_grad(bias, gm.colwise().sum().transpose().array());
                      }
                    });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
  static constexpr S kAlpha = static_cast<S>(0.7978845608028654);  // sqrt(2 / pi)
  static constexpr S kBeta = static_cast<S>(0.044715);
  const ArrayX<S>& v = x.value();
  ArrayX<S> t = (kAlpha * (v + kBeta * v.cube())).tanh();
  ArrayX<S> out = S(0.5) * v * (S(1) + t);
  return make_op<S>(std::move(out), x.shape(), {x}, [x, t](const ArrayX<S>& g) {
    const ArrayX<S>& v = x.value();
    ArrayX<S> d = S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t.square()) * kAlpha * (S(1) + S(3) * kBeta * v.square());
    accumulate_grad(x, g * d);
  });
}

template <typename S>
Var<S> silu(const Var<S>& x) {
  ArrayX<S> sig = S(1) / (S(1) + (-x.value()).exp());
  ArrayX<S> out = x.value() * sig;
  return make_op<S>(std::move(out), x.shape(), {x}, [x, sig](const ArrayX<S>& g) {
    accumulate_grad(x, g * sig * (S(1) + x.value() * (S(1) - sig)));
  });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& shift, S eps) {
  require_rank(x, 2, "layer_norm");
  const Index n = x.dim(0), d = x.dim(1);
  require(gain.size() == d && shift.size() == d, "layer_norm: parameter size mismatch");
  ConstMatrixMap<S> xm = x.mat();
  RowMatrix<S> xhat(n, d);
  ArrayX<S> inv_std(n);
  for (Index i = 0; i < n; ++i) {
    const S mu = xm.row(i).mean();
    const S var = (xm.row(i).array() - mu).square().mean();
    inv_std[i] = S(1) / std::sqrt(var + eps);
    xhat.row(i) = (xm.row(i).array() - mu) * inv_std[i];
  }
  RowMatrix<S> out = xhat;
  out.array().rowwise() *= gain.value().transpose();
  out.array().rowwise() += shift.value().transpose();
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), x.shape(), {x, gain, shift},
                    [x, gain, shift, xhat, inv_std, n, d](const ArrayX<S>& g) {
                      ConstMatrixMap<S> gm(g.data(), n, d);
                      if (gain.requires_grad()) accumulate_grad(gain, (gm.array() * xhat.array()).colwise().sum().transpose());
                      if (shift.requires_grad()) accumulate_grad(shift, gm.colwise().sum().transpose().array());
                      if (!x.requires_grad()) return;
                      RowMatrix<S> dxhat = gm;
                      dxhat.array().rowwise() *= gain.value().transpose();
                      RowMatrix<S> dx(n, d);
                      for (Index i = 0; i < n; ++i) {
                        const S mean_d = dxhat.row(i).mean();
                        const S mean_dx = dxhat.row(i).dot(xhat.row(i)) / S(d);
                        dx.row(i) = inv_std[i] * (dxhat.row(i).array() - mean_d - xhat.row(i).array() * mean_dx);
                      }
                      accumulate_grad(x, Eigen::Map<const ArrayX<S>>(dx.data(), dx.size()));
                    });
}

template <typename S>
Var<S> group_norm(const Var<S>& x, Index groups, const Var<S>& gain, const Var<S>& shift, S eps) {
  require_rank(x, 3, "group_norm");
  const Index c = x.dim(0), hw = x.dim(1) * x.dim(2);
  require(groups > 0 && c % groups == 0, "group_norm: channels not divisible by groups");
  require(gain.size() == c && shift.size() == c, "group_norm: parameter size mismatch");
  const Index group_len = (c / groups) * hw;
  ArrayX<S> xhat(x.size());
  ArrayX<S> inv_std(groups);
  for (Index gi = 0; gi < groups; ++gi) {
    auto seg = x.value().segment(gi * group_len, group_len);
    const S mu = seg.mean();
    const S var = (seg - mu).square().mean();
    inv_std[gi] = S(1) / std::sqrt(var + eps);
    xhat.segment(gi * group_len, group_len) = (seg - mu) * inv_std[gi];
  }
  ArrayX<S> out(x.size());
  for (Index ch = 0; ch < c; ++ch) {
    out.segment(ch * hw, hw) = xhat.segment(ch * hw, hw) * gain.value()[ch] + shift.value()[ch];
  }
  return make_op<S>(std::move(out), x.shape(), {x, gain, shift},
                    [x, gain, shift, xhat, inv_std, c, hw, groups, group_len](const ArrayX<S>& g) {
                      if (gain.requires_grad() || shift.requires_grad()) {
                        ArrayX<S> dgain(c), dshift(c);
                        for (Index ch = 0; ch < c; ++ch) {
                          dgain[ch] = (g.segment(ch * hw, hw) * xhat.segment(ch * hw, hw)).sum();
                          dshift[ch] = g.segment(ch * hw, hw).sum();
                        }
                        accumulate_grad(gain, dgain);
                        accumulate_grad(shift, dshift);
                      }
                      if (!x.requires_grad()) return;
                      ArrayX<S> dxhat(g.size());
                      for (Index ch = 0; ch < c; ++ch) dxhat.segment(ch * hw, hw) = g.segment(ch * hw, hw) * gain.value()[ch];
                      ArrayX<S> dx(g.size());
                      for (Index gi = 0; gi < groups; ++gi) {
                        auto dseg = dxhat.segment(gi * group_len, group_len);
                        auto xseg = xhat.segment(gi * group_len, group_len);
                        const S mean_d = dseg.mean();
                        const S mean_dx = (dseg * xseg).mean();
                        dx.segment(gi * group_len, group_len) = inv_std[gi] * (dseg - mean_d - xseg * mean_dx);
                      }
                      accumulate_grad(x, dx);
                    });
}

namespace {

template <typename S>
RowMatrix<S> im2col(const S* x, Index cin, Index h, Index w, Index k, Index stride, Index pad, Index ho, Index wo) {
  RowMatrix<S> cols = RowMatrix<S>::Zero(cin * k * k, ho * wo);
  for (Index ci = 0; ci < cin; ++ci) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        S* row = cols.row((ci * k + ky) * k + kx).data();
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const S* src = x + (ci * h + iy) * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) row[oy * wo + ox] = src[ix];
          }
        }
      }
    }
  }
  return cols;
}

template <typename S>
void col2im(const RowMatrix<S>& cols, S* dx, Index cin, Index h, Index w, Index k, Index stride, Index pad, Index ho,
            Index wo) {
  for (Index ci = 0; ci < cin; ++ci) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const S* row = cols.row((ci * k + ky) * k + kx).data();
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          S* dst = dx + (ci * h + iy) * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Index stride, Index padding) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const Index cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index cout = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == cin && weight.dim(3) == k,
          "conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " + shape_string(x.shape()));
  require(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
  const Index ho = (h + 2 * padding - k) / stride + 1;
  const Index wo = (w + 2 * padding - k) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d: input too small for kernel");
  const bool pointwise = k == 1 && stride == 1 && padding == 0;

  ConstMatrixMap<S> wm(weight.value().data(), cout, cin * k * k);
  RowMatrix<S> cols;
  RowMatrix<S> out(cout, ho * wo);
  if (pointwise) {
    out.noalias() = wm * ConstMatrixMap<S>(x.value().data(), cin, h * w);
  } else {
    cols = im2col(x.value().data(), cin, h, w, k, stride, padding, ho, wo);
    out.noalias() = wm * cols;
  }
  if (bias.defined()) out.colwise() += bias.value().matrix();

  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), Shape{cout, ho, wo}, {x, weight, bias},
                    [=](const ArrayX<S>& g) {
                      ConstMatrixMap<S> gm(g.data(), cout, ho * wo);
                      ConstMatrixMap<S> wmat(weight.value().data(), cout, cin * k * k);
                      if (weight.requires_grad()) {
                        RowMatrix<S> dw = pointwise ? RowMatrix<S>(gm * ConstMatrixMap<S>(x.value().data(), cin, h * w).transpose())
                                                    : RowMatrix<S>(gm * cols.transpose());
                        accumulate_grad(weight, Eigen::Map<const ArrayX<S>>(dw.data(), dw.size()));
                      }
                      if (bias.defined() && bias.requires_grad()) accumulate_grad(bias, gm.rowwise().sum().array());
                      if (x.requires_grad()) {
                        RowMatrix<S> dcols = wmat.transpose() * gm;
                        if (pointwise) {
                          accumulate_grad(x, Eigen::Map<const ArrayX<S>>(dcols.data(), dcols.size()));
                        } else {
                          ArrayX<S> dx = ArrayX<S>::Zero(x.size());
                          col2im(dcols, dx.data(), cin, h, w, k, stride, padding, ho, wo);
                          accumulate_grad(x, dx);
                        }
                      }
                    });
}

template <typename S>
Var<S> upsample_nearest2x(const Var<S>& x) {
  require_rank(x, 3, "upsample_nearest2x");
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  ArrayX<S> out(c * 4 * h * w);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < 2 * h; ++y)
      for (Index xx = 0; xx < 2 * w; ++xx) out[(ch * 2 * h + y) * 2 * w + xx] = x.value()[(ch * h + y / 2) * w + xx / 2];
  return make_op<S>(std::move(out), Shape{c, 2 * h, 2 * w}, {x}, [x, c, h, w](const ArrayX<S>& g) {
    ArrayX<S> dx = ArrayX<S>::Zero(x.size());
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y < 2 * h; ++y)
        for (Index xx = 0; xx < 2 * w; ++xx) dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
    accumulate_grad(x, dx);
  });
}

namespace {

// Dense [out, in] interpolation matrix for corner-aligned linear resampling.
template <typename S>
RowMatrix<S> interpolation_matrix(Index in, Index out) {
  RowMatrix<S> m = RowMatrix<S>::Zero(out, in);
  for (Index i = 0; i < out; ++i) {
    const double src = out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    Index i0 = static_cast<Index>(std::floor(src));
    i0 = std::clamp<Index>(i0, 0, std::max<Index>(in - 2, 0));
    const double frac = in > 1 ? src - static_cast<double>(i0) : 0.0;
    m(i, i0) += static_cast<S>(1.0 - frac);
    if (in > 1) m(i, i0 + 1) += static_cast<S>(frac);
  }
  return m;
}

}  // namespace

template <typename S>
Var<S> resize_bilinear(const Var<S>& x, Index height, Index width) {
  require_rank(x, 3, "resize_bilinear");
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(height >= 1 && width >= 1, "resize_bilinear: empty target");
  RowMatrix<S> ry = interpolation_matrix<S>(h, height);
  RowMatrix<S> rx = interpolation_matrix<S>(w, width);
  ArrayX<S> out(c * height * width);
  for (Index ch = 0; ch < c; ++ch) {
    ConstMatrixMap<S> src(x.value().data() + ch * h * w, h, w);
    MatrixMap<S> dst(out.data() + ch * height * width, height, width);
    dst.noalias() = ry * src * rx.transpose();
  }
  return make_op<S>(std::move(out), Shape{c, height, width}, {x}, [=](const ArrayX<S>& g) {
    ArrayX<S> dx(x.size());
    for (Index ch = 0; ch < c; ++ch) {
      ConstMatrixMap<S> gm(g.data() + ch * height * width, height, width);
      MatrixMap<S> dst(dx.data() + ch * h * w, h, w);
      dst.noalias() = ry.transpose() * gm * rx;
    }
    accumulate_grad(x, dx);
  });
}

template <typename S>
Var<S> avg_pool(const Var<S>& x, Index factor) {
  require_rank(x, 3, "avg_pool");
  const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(factor >= 1 && h % factor == 0 && w % factor == 0, "avg_pool: size not divisible by factor");
  const Index ho = h / factor, wo = w / factor;
  const S norm = S(1) / static_cast<S>(factor * factor);
  ArrayX<S> out = ArrayX<S>::Zero(c * ho * wo);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < w; ++xx) out[(ch * ho + y / factor) * wo + xx / factor] += x.value()[(ch * h + y) * w + xx] * norm;
  return make_op<S>(std::move(out), Shape{c, ho, wo}, {x}, [=](const ArrayX<S>& g) {
    ArrayX<S> dx(x.size());
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y < h; ++y)
        for (Index xx = 0; xx < w; ++xx) dx[(ch * h + y) * w + xx] = g[(ch * ho + y / factor) * wo + xx / factor] * norm;
    accumulate_grad(x, dx);
  });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), "concat: no inputs");
  Shape shape = parts.front().shape();
  require(!shape.empty(), "concat: scalar input");
  Index total = 0, rows = 0;
  for (const auto& p : parts) {
    require(p.rank() == static_cast<Index>(shape.size()) &&
                std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1),
            "concat: trailing shape mismatch " + shape_string(shape) + " vs " + shape_string(p.shape()));
    total += p.size();
    rows += p.dim(0);
  }
  shape[0] = rows;
  ArrayX<S> out(total);
  Index offset = 0;
  for (const auto& p : parts) {
    out.segment(offset, p.size()) = p.value();
    offset += p.size();
  }
  return make_op<S>(std::move(out), std::move(shape), parts, [parts](const ArrayX<S>& g) {
    Index off = 0;
    for (const auto& p : parts) {
      accumulate_grad(p, g.segment(off, p.size()));
      off += p.size();
    }
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Index n = parts.front().dim(0);
  Index width = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    require(p.dim(0) == n, "concat_cols: row count mismatch");
    width += p.dim(1);
  }
  RowMatrix<S> out(n, width);
  Index col = 0;
  for (const auto& p : parts) {
    out.middleCols(col, p.dim(1)) = p.mat();
    col += p.dim(1);
  }
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), Shape{n, width}, parts,
                    [parts, n, width](const ArrayX<S>& g) {
                      ConstMatrixMap<S> gm(g.data(), n, width);
                      Index c0 = 0;
                      for (const auto& p : parts) {
                        if (p.requires_grad()) {
                          RowMatrix<S> d = gm.middleCols(c0, p.dim(1));
                          accumulate_grad(p, Eigen::Map<const ArrayX<S>>(d.data(), d.size()));
                        }
                        c0 += p.dim(1);
                      }
                    });
}

template <typename S>
Var<S> slice(const Var<S>& x, Index start, Index count) {
  require(x.rank() >= 1 && start >= 0 && count >= 0 && start + count <= x.dim(0), "slice: range out of bounds");
  const Index stride = x.dim(0) ? x.size() / x.dim(0) : 0;
  Shape shape = x.shape();
  shape[0] = count;
  return make_op<S>(x.value().segment(start * stride, count * stride), std::move(shape), {x},
                    [x, start, count, stride](const ArrayX<S>& g) {
                      if (!x.requires_grad()) return;
                      const_cast<Var<S>&>(x).grad_mutable().segment(start * stride, count * stride) += g;
                    });
}

template <typename S>
Var<S> slice_cols(const Var<S>& x, Index start, Index count) {
  require_rank(x, 2, "slice_cols");
  require(start >= 0 && count >= 0 && start + count <= x.dim(1), "slice_cols: range out of bounds");
  const Index n = x.dim(0), w = x.dim(1);
  RowMatrix<S> out = x.mat().middleCols(start, count);
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), Shape{n, count}, {x},
                    [x, start, count, n, w](const ArrayX<S>& g) {
                      if (!x.requires_grad()) return;
                      MatrixMap<S> dx(const_cast<Var<S>&>(x).grad_mutable().data(), n, w);
                      dx.middleCols(start, count) += ConstMatrixMap<S>(g.data(), n, count);
                    });
}

template <typename S>
Var<S> gather_rows(const Var<S>& x, const std::vector<Index>& rows) {
  require(x.rank() >= 1, "gather_rows: scalar input");
  const Index stride = x.size() / x.dim(0);
  ArrayX<S> out(static_cast<Index>(rows.size()) * stride);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < x.dim(0), "gather_rows: index out of range");
    out.segment(static_cast<Index>(i) * stride, stride) = x.value().segment(rows[i] * stride, stride);
  }
  Shape shape = x.shape();
  shape[0] = static_cast<Index>(rows.size());
  return make_op<S>(std::move(out), std::move(shape), {x}, [x, rows, stride](const ArrayX<S>& g) {
    if (!x.requires_grad()) return;
    auto& dx = const_cast<Var<S>&>(x).grad_mutable();
    for (std::size_t i = 0; i < rows.size(); ++i) dx.segment(rows[i] * stride, stride) += g.segment(static_cast<Index>(i) * stride, stride);
  });
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  return make_op<S>(x.value(), std::move(shape), {x}, [x](const ArrayX<S>& g) { accumulate_grad(x, g); });
}

template <typename S>
Var<S> transpose(const Var<S>& x) {
  require_rank(x, 2, "transpose");
  const Index n = x.dim(0), m = x.dim(1);
  RowMatrix<S> out = x.mat().transpose();
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), Shape{m, n}, {x}, [x, n, m](const ArrayX<S>& g) {
    if (!x.requires_grad()) return;
    RowMatrix<S> d = ConstMatrixMap<S>(g.data(), m, n).transpose();
    accumulate_grad(x, Eigen::Map<const ArrayX<S>>(d.data(), d.size()));
  });
}

template <typename S>
Var<S> grouped_attention(const Var<S>& qkv, Index group, Index heads, const Mask& key_valid) {
  require_rank(qkv, 2, "grouped_attention");
  const Index n = qkv.dim(0), d = qkv.dim(1) / 3;
  require(qkv.dim(1) == 3 * d && d % heads == 0, "grouped_attention: width not divisible into heads");
  require(group >= 1 && n % group == 0, "grouped_attention: rows not divisible by group");
  require(key_valid.empty() || static_cast<Index>(key_valid.size()) == n, "grouped_attention: mask size mismatch");
  const Index groups = n / group, dh = d / heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  ConstMatrixMap<S> m = qkv.mat();

  // probs holds the attention matrix of every (group, head) pair back to back.
  auto probs = std::make_shared<ArrayX<S>>(groups * heads * group * group);
  RowMatrix<S> out(n, d);
  RowMatrix<S> scores(group, group);
  for (Index gi = 0; gi < groups; ++gi) {
    const Index r0 = gi * group;
    bool any_valid = false;
    for (Index k = 0; k < group; ++k) any_valid |= is_valid(key_valid, r0 + k);
    for (Index h = 0; h < heads; ++h) {
      auto q = m.block(r0, h * dh, group, dh);
      auto k = m.block(r0, d + h * dh, group, dh);
      auto v = m.block(r0, 2 * d + h * dh, group, dh);
      scores.noalias() = q * k.transpose();
      scores *= inv_sqrt;
      for (Index j = 0; j < group; ++j) {
        if (any_valid && !is_valid(key_valid, r0 + j)) scores.col(j).setConstant(-std::numeric_limits<S>::infinity());
      }
      for (Index i = 0; i < group; ++i) {
        const S mx = scores.row(i).maxCoeff();
        scores.row(i) = (scores.row(i).array() - mx).exp();
        scores.row(i) /= scores.row(i).sum();
      }
      MatrixMap<S>(probs->data() + (gi * heads + h) * group * group, group, group) = scores;
      out.block(r0, h * dh, group, dh).noalias() = scores * v;
    }
  }
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), Shape{n, d}, {qkv},
                    [qkv, probs, group, heads, groups, d, dh, n, inv_sqrt](const ArrayX<S>& g) {
                      ConstMatrixMap<S> gm(g.data(), n, d);
                      ConstMatrixMap<S> m = qkv.mat();
                      RowMatrix<S> dqkv = RowMatrix<S>::Zero(n, 3 * d);
                      RowMatrix<S> dp(group, group), ds(group, group);
                      for (Index gi = 0; gi < groups; ++gi) {
                        const Index r0 = gi * group;
                        for (Index h = 0; h < heads; ++h) {
                          ConstMatrixMap<S> p(probs->data() + (gi * heads + h) * group * group, group, group);
                          auto q = m.block(r0, h * dh, group, dh);
                          auto k = m.block(r0, d + h * dh, group, dh);
                          auto v = m.block(r0, 2 * d + h * dh, group, dh);
                          auto go = gm.block(r0, h * dh, group, dh);
                          dp.noalias() = go * v.transpose();
                          dqkv.block(r0, 2 * d + h * dh, group, dh).noalias() += p.transpose() * go;
                          for (Index i = 0; i < group; ++i) {
                            const S dot = p.row(i).dot(dp.row(i));
                            ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
                          }
                          ds *= inv_sqrt;
                          dqkv.block(r0, h * dh, group, dh).noalias() += ds * k;
                          dqkv.block(r0, d + h * dh, group, dh).noalias() += ds.transpose() * q;
                        }
                      }
                      accumulate_grad(qkv, Eigen::Map<const ArrayX<S>>(dqkv.data(), dqkv.size()));
                    });
}

template <typename S>
Var<S> group_softmax(const Var<S>& logits, Index group, const Mask& valid) {
  const Index n = logits.size();
  require(group >= 1 && n % group == 0, "group_softmax: size not divisible by group");
  require(valid.empty() || static_cast<Index>(valid.size()) == n, "group_softmax: mask size mismatch");
  const ArrayX<S>& z = logits.value();
  ArrayX<S> w = ArrayX<S>::Zero(n);
  // Fully invalid groups produce constants and must not pass gradient.
  std::vector<std::uint8_t> live(static_cast<std::size_t>(n / group), 0);
  for (Index gi = 0; gi < n / group; ++gi) {
    const Index r0 = gi * group;
    S mx = -std::numeric_limits<S>::infinity();
    for (Index k = 0; k < group; ++k)
      if (is_valid(valid, r0 + k)) mx = std::max(mx, z[r0 + k]);
    if (mx == -std::numeric_limits<S>::infinity()) {
      w.segment(r0, group).setConstant(S(1) / static_cast<S>(group));
      continue;
    }
    live[static_cast<std::size_t>(gi)] = 1;
    S total = 0;
    for (Index k = 0; k < group; ++k) {
      if (is_valid(valid, r0 + k)) {
        w[r0 + k] = std::exp(z[r0 + k] - mx);
        total += w[r0 + k];
      }
    }
    w.segment(r0, group) /= total;
  }
  ArrayX<S> weights = w;
  return make_op<S>(std::move(w), logits.shape(), {logits}, [logits, weights, live, group](const ArrayX<S>& g) {
    ArrayX<S> dz = ArrayX<S>::Zero(weights.size());
    for (Index gi = 0; gi < weights.size() / group; ++gi) {
      if (!live[static_cast<std::size_t>(gi)]) continue;
      const Index r0 = gi * group;
      const S dot = (weights.segment(r0, group) * g.segment(r0, group)).sum();
      dz.segment(r0, group) = weights.segment(r0, group) * (g.segment(r0, group) - dot);
    }
    accumulate_grad(logits, dz);
  });
}

template <typename S>
Var<S> group_weighted_sum(const Var<S>& weights, const Var<S>& values, Index group) {
  require(values.rank() == 2, "group_weighted_sum: values must be rank 2");
  const Index n = values.dim(0), d = values.dim(1);
  require(weights.size() == n, "group_weighted_sum: weight count mismatch");
  require(group >= 1 && n % group == 0, "group_weighted_sum: rows not divisible by group");
  const Index groups = n / group;
  ConstMatrixMap<S> v = values.mat();
  RowMatrix<S> out(groups, d);
  for (Index gi = 0; gi < groups; ++gi) {
    out.row(gi).noalias() = weights.value().segment(gi * group, group).matrix().transpose() * v.middleRows(gi * group, group);
  }
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), Shape{groups, d}, {weights, values},
                    [weights, values, group, groups, n, d](const ArrayX<S>& g) {
                      ConstMatrixMap<S> gm(g.data(), groups, d);
                      ConstMatrixMap<S> v = values.mat();
                      if (weights.requires_grad()) {
                        ArrayX<S> dw(n);
                        for (Index gi = 0; gi < groups; ++gi)
                          dw.segment(gi * group, group) = (v.middleRows(gi * group, group) * gm.row(gi).transpose()).array();
                        accumulate_grad(weights, dw);
                      }
                      if (values.requires_grad()) {
                        RowMatrix<S> dv(n, d);
                        for (Index gi = 0; gi < groups; ++gi)
                          dv.middleRows(gi * group, group).noalias() =
                              weights.value().segment(gi * group, group).matrix() * gm.row(gi);
                        accumulate_grad(values, Eigen::Map<const ArrayX<S>>(dv.data(), dv.size()));
                      }
                    });
}

namespace {

struct Corner {
  Index i0, i1;
  double frac;
};

Corner corner(double coord, Index extent) {
  if (extent == 1) return {0, 0, 0.0};
  const double c = std::clamp(coord, 0.0, static_cast<double>(extent - 1));
  Index i0 = std::min<Index>(static_cast<Index>(std::floor(c)), extent - 2);
  return {i0, i0 + 1, c - static_cast<double>(i0)};
}

}  // namespace

template <typename S>
Var<S> trilinear_sample(const Var<S>& volume, const Eigen::MatrixX3d& coords, const Mask& valid) {
  require_rank(volume, 4, "trilinear_sample");
  const Index c = volume.dim(0), depth = volume.dim(1), h = volume.dim(2), w = volume.dim(3);
  const Index n = coords.rows();
  require(valid.empty() || static_cast<Index>(valid.size()) == n, "trilinear_sample: mask size mismatch");

  // For each valid point keep 8 flat voxel offsets (feature 0) and weights.
  struct Stencil {
    Index offset[8];
    S weight[8];
  };
  auto stencils = std::make_shared<std::vector<Stencil>>(static_cast<std::size_t>(n));
  const Index feature_stride = depth * h * w;
  RowMatrix<S> out = RowMatrix<S>::Zero(n, c);
  const S* vol = volume.value().data();
  for (Index i = 0; i < n; ++i) {
    Stencil& st = (*stencils)[static_cast<std::size_t>(i)];
    if (!is_valid(valid, i)) {
      std::fill(std::begin(st.weight), std::end(st.weight), S(0));
      std::fill(std::begin(st.offset), std::end(st.offset), Index{0});
      continue;
    }
    const Corner cx = corner(coords(i, 0), w), cy = corner(coords(i, 1), h), cz = corner(coords(i, 2), depth);
    int idx = 0;
    for (int dz = 0; dz < 2; ++dz) {
      const Index z = dz ? cz.i1 : cz.i0;
      const double wz = dz ? cz.frac : 1.0 - cz.frac;
      for (int dy = 0; dy < 2; ++dy) {
        const Index y = dy ? cy.i1 : cy.i0;
        const double wy = dy ? cy.frac : 1.0 - cy.frac;
        for (int dx = 0; dx < 2; ++dx, ++idx) {
          const Index x = dx ? cx.i1 : cx.i0;
          const double wx = dx ? cx.frac : 1.0 - cx.frac;
          st.offset[idx] = (z * h + y) * w + x;
          st.weight[idx] = static_cast<S>(wz * wy * wx);
        }
      }
    }
    for (Index f = 0; f < c; ++f) {
      const S* base = vol + f * feature_stride;
      S acc = 0;
      for (int k = 0; k < 8; ++k) acc += st.weight[k] * base[st.offset[k]];
      out(i, f) = acc;
    }
  }
  return make_op<S>(Eigen::Map<ArrayX<S>>(out.data(), out.size()), Shape{n, c}, {volume},
                    [volume, stencils, n, c, feature_stride](const ArrayX<S>& g) {
                      if (!volume.requires_grad()) return;
                      S* dv = const_cast<Var<S>&>(volume).grad_mutable().data();
                      for (Index i = 0; i < n; ++i) {
                        const Stencil& st = (*stencils)[static_cast<std::size_t>(i)];
                        for (Index f = 0; f < c; ++f) {
                          const S gi = g[i * c + f];
                          if (gi == S(0)) continue;
                          S* base = dv + f * feature_stride;
                          for (int k = 0; k < 8; ++k) base[st.offset[k]] += st.weight[k] * gi;
                        }
                      }
                    });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
  return make_op<S>(ArrayX<S>::Constant(1, x.value().sum()), Shape{}, {x},
                    [x](const ArrayX<S>& g) { accumulate_grad(x, ArrayX<S>::Constant(x.size(), g[0])); });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  const S inv = S(1) / static_cast<S>(x.size());
  return make_op<S>(ArrayX<S>::Constant(1, x.value().mean()), Shape{}, {x},
                    [x, inv](const ArrayX<S>& g) { accumulate_grad(x, ArrayX<S>::Constant(x.size(), g[0] * inv)); });
}

template <typename S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
  require_same_size(a, b, "mse");
  ArrayX<S> diff = a.value() - b.value();
  const S inv = S(1) / static_cast<S>(diff.size());
  const S loss = diff.square().sum() * inv;
  return make_op<S>(ArrayX<S>::Constant(1, loss), Shape{}, {a, b}, [a, b, diff, inv](const ArrayX<S>& g) {
    const S k = S(2) * inv * g[0];
    accumulate_grad(a, diff * k);
    accumulate_grad(b, -diff * k);
  });
}

#define NVS_INSTANTIATE_OPS(S)                                                                                 \
  template Var<S> make_op<S>(ArrayX<S>, Shape, const std::vector<Var<S>>&,                                     \
                             std::function<void(const ArrayX<S>&)>);                                           \
  template Var<S> add<S>(const Var<S>&, const Var<S>&);                                                        \
  template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                                        \
  template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                                        \
  template Var<S> scale<S>(const Var<S>&, S);                                                                  \
  template Var<S> scale_rows<S>(const Var<S>&, const ArrayX<S>&);                                              \
  template Var<S> add_row_bias<S>(const Var<S>&, const Var<S>&);                                               \
  template Var<S> add_channel_bias<S>(const Var<S>&, const Var<S>&);                                           \
  template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> linear<S>(const Var<S>&, const Var<S>&, const Var<S>&);                                      \
  template Var<S> gelu<S>(const Var<S>&);                                                                      \
  template Var<S> silu<S>(const Var<S>&);                                                                      \
  template Var<S> layer_norm<S>(const Var<S>&, const Var<S>&, const Var<S>&, S);                               \
  template Var<S> group_norm<S>(const Var<S>&, Index, const Var<S>&, const Var<S>&, S);                        \
  template Var<S> conv2d<S>(const Var<S>&, const Var<S>&, const Var<S>&, Index, Index);                        \
  template Var<S> upsample_nearest2x<S>(const Var<S>&);                                                        \
  template Var<S> resize_bilinear<S>(const Var<S>&, Index, Index);                                             \
  template Var<S> avg_pool<S>(const Var<S>&, Index);                                                           \
  template Var<S> concat<S>(const std::vector<Var<S>>&);                                                       \
  template Var<S> concat_cols<S>(const std::vector<Var<S>>&);                                                  \
  template Var<S> slice<S>(const Var<S>&, Index, Index);                                                       \
  template Var<S> slice_cols<S>(const Var<S>&, Index, Index);                                                  \
  template Var<S> gather_rows<S>(const Var<S>&, const std::vector<Index>&);                                    \
  template Var<S> reshape<S>(const Var<S>&, Shape);                                                            \
  template Var<S> transpose<S>(const Var<S>&);                                                                 \
  template Var<S> grouped_attention<S>(const Var<S>&, Index, Index, const Mask&);                              \
  template Var<S> group_softmax<S>(const Var<S>&, Index, const Mask&);                                         \
  template Var<S> group_weighted_sum<S>(const Var<S>&, const Var<S>&, Index);                                  \
  template Var<S> trilinear_sample<S>(const Var<S>&, const Eigen::MatrixX3d&, const Mask&);                    \
  template Var<S> sum<S>(const Var<S>&);                                                                       \
  template Var<S> mean<S>(const Var<S>&);                                                                      \
  template Var<S> mse<S>(const Var<S>&, const Var<S>&);

NVS_INSTANTIATE_OPS(float)
NVS_INSTANTIATE_OPS(double)

}  // namespace nvs
