#include "occstep/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace occstep {

namespace {

thread_local Tape* g_active_tape = nullptr;

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

std::shared_ptr<TensorNode> new_node(const char* op, Shape shape) {
  auto n = std::make_shared<TensorNode>();
  n->op = op;
  n->shape = std::move(shape);
  n->value.resize(shape_numel(n->shape));
  return n;
}

// Wires gradient flow and records on the active tape. Backward lambdas must
// not capture the output tensor (cycle); the node is passed to them instead.
Tensor finish(std::shared_ptr<TensorNode> n, std::initializer_list<Tensor> ins,
              std::function<void(TensorNode&)> bw) {
  bool rg = false;
  for (const Tensor& t : ins) rg = rg || t.requires_grad();
  Tape* tape = Tape::active();
  if (tape && rg) {
    n->requires_grad = true;
    for (const Tensor& t : ins) n->inputs.push_back(t.node());
    n->backward = std::move(bw);
    tape->record(n);
  }
#ifndef NDEBUG
  if (!n->value.allFinite())
    throw NumericError(std::string("non-finite values from op ") + n->op);
#endif
  return Tensor(std::move(n));
}

Eigen::ArrayXf& grad_of(const Tensor& t) {
  t.node()->ensure_grad();
  return t.node()->grad;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

std::int64_t trailing(const Shape& s) {
  std::int64_t n = 1;
  for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) {
    if (e < 0) throw ShapeError("negative extent");
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = new_node("leaf", std::move(shape));
  n->value.setZero();
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, const std::vector<float>& data, bool requires_grad) {
  auto n = new_node("leaf", std::move(shape));
  if (std::int64_t(data.size()) != n->value.size())
    throw ShapeError("data length does not match shape");
  std::copy(data.begin(), data.end(), n->value.data());
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v, bool requires_grad) {
  auto n = new_node("leaf", Shape{});
  n->value.resize(1);
  n->value[0] = v;
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

float Tensor::item() const {
  if (size() != 1) throw ArgumentError("item() on non-scalar tensor");
  return n_->value[0];
}

std::vector<float> Tensor::to_vector() const {
  return {n_->value.data(), n_->value.data() + n_->value.size()};
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }
Tape::~Tape() { g_active_tape = prev_; }
Tape* Tape::active() { return g_active_tape; }

void backward(Tape& tape, const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ArgumentError("backward needs a scalar loss");
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0f;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    TensorNode& n = **it;
    if (!n.backward || n.grad.size() != n.value.size()) continue;
    n.backward(n);
  }
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto n = new_node("add", a.shape());
  n->value = a.values() + b.values();
  return finish(std::move(n), {a, b}, [a, b](TensorNode& self) {
    if (a.requires_grad()) grad_of(a) += self.grad;
    if (b.requires_grad()) grad_of(b) += self.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto n = new_node("mul", a.shape());
  n->value = a.values() * b.values();
  return finish(std::move(n), {a, b}, [a, b](TensorNode& self) {
    if (a.requires_grad()) grad_of(a) += self.grad * b.values();
    if (b.requires_grad()) grad_of(b) += self.grad * a.values();
  });
}

Tensor neg(const Tensor& x) { return affine(x, -1.0f, 0.0f); }

Tensor affine(const Tensor& x, float scale, float shift) {
  auto n = new_node("affine", x.shape());
  n->value = x.values() * scale + shift;
  return finish(std::move(n), {x}, [x, scale](TensorNode& self) {
    if (x.requires_grad()) grad_of(x) += self.grad * scale;
  });
}

Tensor sigmoid(const Tensor& x) {
  auto n = new_node("sigmoid", x.shape());
  n->value = (x.values() * 0.5f).tanh() * 0.5f + 0.5f;
  return finish(std::move(n), {x}, [x](TensorNode& self) {
    if (x.requires_grad())
      grad_of(x) += self.grad * self.value * (1.0f - self.value);
  });
}

Tensor softplus(const Tensor& x) {
  auto n = new_node("softplus", x.shape());
  n->value = x.values().max(0.0f) + (-x.values().abs()).exp().log1p();
  return finish(std::move(n), {x}, [x](TensorNode& self) {
    if (x.requires_grad()) {
      Eigen::ArrayXf s = (x.values() * 0.5f).tanh() * 0.5f + 0.5f;
      grad_of(x) += self.grad * s;
    }
  });
}

Tensor exp(const Tensor& x) {
  auto n = new_node("exp", x.shape());
  n->value = x.values().exp();
  return finish(std::move(n), {x}, [x](TensorNode& self) {
    if (x.requires_grad()) grad_of(x) += self.grad * self.value;
  });
}

Tensor silu(const Tensor& x) {
  auto n = new_node("silu", x.shape());
  Eigen::ArrayXf s = (x.values() * 0.5f).tanh() * 0.5f + 0.5f;
  n->value = x.values() * s;
  return finish(std::move(n), {x}, [x](TensorNode& self) {
    if (x.requires_grad()) {
      Eigen::ArrayXf s = (x.values() * 0.5f).tanh() * 0.5f + 0.5f;
      grad_of(x) += self.grad * s * (1.0f + x.values() * (1.0f - s));
    }
  });
}

// ---- linear / conv ---------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape().empty() || w.shape().size() != 2)
    throw ShapeError("linear: x must be (C_in, ...), w (C_out, C_in)");
  const int cin = x.shape()[0];
  const int cout = w.shape()[0];
  if (w.shape()[1] != cin) throw ShapeError("linear: C_in mismatch");
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != cout))
    throw ShapeError("linear: bias must be (C_out)");
  const std::int64_t nn = trailing(x.shape());

  Shape out_shape = x.shape();
  out_shape[0] = cout;
  auto n = new_node("linear", std::move(out_shape));

  CMapRM X(x.values().data(), cin, nn);
  CMapRM W(w.values().data(), cout, cin);
  MapRM Y(n->value.data(), cout, nn);
  Y.noalias() = W * X;
  if (b.defined())
    Y.colwise() += Eigen::Map<const Eigen::VectorXf>(b.values().data(), cout);

  return finish(std::move(n), {x, w, b.defined() ? b : x},
                [x, w, b, cin, cout, nn](TensorNode& self) {
    CMapRM G(self.grad.data(), cout, nn);
    if (w.requires_grad()) {
      CMapRM X(x.values().data(), cin, nn);
      MapRM GW(grad_of(w).data(), cout, cin);
      GW.noalias() += G * X.transpose();
    }
    if (x.requires_grad()) {
      CMapRM W(w.values().data(), cout, cin);
      MapRM GX(grad_of(x).data(), cin, nn);
      GX.noalias() += W.transpose() * G;
    }
    if (b.defined() && b.requires_grad()) {
      Eigen::Map<Eigen::VectorXf> GB(grad_of(b).data(), cout);
      GB.noalias() += G.rowwise().sum();
    }
  });
}

namespace {

struct ConvDims {
  int cin, cout, d, h, w, ho, wo, sh;
  std::int64_t in_plane() const { return std::int64_t(d) * h * w; }
  std::int64_t out_positions() const { return std::int64_t(d) * ho * wo; }
};

// Column layout row index: ((ci*3 + kd)*3 + kh)*3 + kw, matching the
// row-major flattening of a (C_in,3,3,3) kernel slice.
void im2col(const float* xv, const ConvDims& c, std::int64_t p0, int m,
            Eigen::MatrixXf& col) {
  col.setZero();
  for (int j = 0; j < m; ++j) {
    const std::int64_t p = p0 + j;
    const int ow = int(p % c.wo);
    const int oh = int((p / c.wo) % c.ho);
    const int od = int(p / (std::int64_t(c.wo) * c.ho));
    float* dst = col.col(j).data();
    for (int ci = 0; ci < c.cin; ++ci) {
      const float* xc = xv + std::int64_t(ci) * c.in_plane();
      for (int kd = 0; kd < 3; ++kd) {
        const int id = od - 1 + kd;
        if (id < 0 || id >= c.d) continue;
        for (int kh = 0; kh < 3; ++kh) {
          const int ih = oh * c.sh - 1 + kh;
          if (ih < 0 || ih >= c.h) continue;
          const std::int64_t row_base = (std::int64_t(id) * c.h + ih) * c.w;
          for (int kw = 0; kw < 3; ++kw) {
            const int iw = ow * c.sh - 1 + kw;
            if (iw < 0 || iw >= c.w) continue;
            dst[(ci * 3 + kd) * 9 + kh * 3 + kw] = xc[row_base + iw];
          }
        }
      }
    }
  }
}

void col2im_add(float* gx, const ConvDims& c, std::int64_t p0, int m,
                const Eigen::MatrixXf& dcol) {
  for (int j = 0; j < m; ++j) {
    const std::int64_t p = p0 + j;
    const int ow = int(p % c.wo);
    const int oh = int((p / c.wo) % c.ho);
    const int od = int(p / (std::int64_t(c.wo) * c.ho));
    const float* src = dcol.col(j).data();
    for (int ci = 0; ci < c.cin; ++ci) {
      float* xc = gx + std::int64_t(ci) * c.in_plane();
      for (int kd = 0; kd < 3; ++kd) {
        const int id = od - 1 + kd;
        if (id < 0 || id >= c.d) continue;
        for (int kh = 0; kh < 3; ++kh) {
          const int ih = oh * c.sh - 1 + kh;
          if (ih < 0 || ih >= c.h) continue;
          const std::int64_t row_base = (std::int64_t(id) * c.h + ih) * c.w;
          for (int kw = 0; kw < 3; ++kw) {
            const int iw = ow * c.sh - 1 + kw;
            if (iw < 0 || iw >= c.w) continue;
            xc[row_base + iw] += src[(ci * 3 + kd) * 9 + kh * 3 + kw];
          }
        }
      }
    }
  }
}

constexpr int kConvChunk = 2048;

}  // namespace

Tensor conv3(const Tensor& x, const Tensor& k, const Tensor& b,
             bool planar_stride) {
  if (x.shape().size() != 4) throw ShapeError("conv3: x must be (C,D,H,W)");
  if (k.shape().size() != 5 || k.shape()[2] != 3 || k.shape()[3] != 3 ||
      k.shape()[4] != 3)
    throw ShapeError("conv3: kernel must be (C_out, C_in, 3, 3, 3)");
  if (k.shape()[1] != x.shape()[0]) throw ShapeError("conv3: C_in mismatch");

  ConvDims c;
  c.cin = x.shape()[0];
  c.cout = k.shape()[0];
  c.d = x.shape()[1];
  c.h = x.shape()[2];
  c.w = x.shape()[3];
  c.sh = planar_stride ? 2 : 1;
  c.ho = (c.h - 1) / c.sh + 1;
  c.wo = (c.w - 1) / c.sh + 1;
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != c.cout))
    throw ShapeError("conv3: bias must be (C_out)");

  auto n = new_node("conv3", Shape{c.cout, c.d, c.ho, c.wo});
  const int krows = c.cin * 27;
  CMapRM K(k.values().data(), c.cout, krows);
  MapRM Y(n->value.data(), c.cout, c.out_positions());
  Eigen::MatrixXf col(krows, std::min<std::int64_t>(kConvChunk, c.out_positions()));
  for (std::int64_t p0 = 0; p0 < c.out_positions(); p0 += kConvChunk) {
    const int m = int(std::min<std::int64_t>(kConvChunk, c.out_positions() - p0));
    im2col(x.values().data(), c, p0, m, col);
    Y.middleCols(p0, m).noalias() = K * col.leftCols(m);
  }
  if (b.defined())
    Y.colwise() += Eigen::Map<const Eigen::VectorXf>(b.values().data(), c.cout);

  return finish(std::move(n), {x, k, b.defined() ? b : x},
                [x, k, b, c, krows](TensorNode& self) {
    CMapRM G(self.grad.data(), c.cout, c.out_positions());
    Eigen::MatrixXf col(krows, std::min<std::int64_t>(kConvChunk, c.out_positions()));
    for (std::int64_t p0 = 0; p0 < c.out_positions(); p0 += kConvChunk) {
      const int m = int(std::min<std::int64_t>(kConvChunk, c.out_positions() - p0));
      if (k.requires_grad()) {
        im2col(x.values().data(), c, p0, m, col);
        MapRM GK(grad_of(k).data(), c.cout, krows);
        GK.noalias() += G.middleCols(p0, m) * col.leftCols(m).transpose();
      }
      if (x.requires_grad()) {
        CMapRM K(k.values().data(), c.cout, krows);
        Eigen::MatrixXf dcol = K.transpose() * G.middleCols(p0, m);
        col2im_add(grad_of(x).data(), c, p0, m, dcol);
      }
    }
    if (b.defined() && b.requires_grad()) {
      Eigen::Map<Eigen::VectorXf> GB(grad_of(b).data(), c.cout);
      GB.noalias() += G.rowwise().sum();
    }
  });
}

// ---- structure ops ----------------------------------------------------------

Tensor softmax_channel(const Tensor& x) {
  if (x.shape().empty()) throw ShapeError("softmax_channel: rank >= 1 required");
  const int kk = x.shape()[0];
  const std::int64_t nn = trailing(x.shape());
  auto n = new_node("softmax_channel", x.shape());
  CMapRM X(x.values().data(), kk, nn);
  MapRM Y(n->value.data(), kk, nn);
  Eigen::RowVectorXf mx = X.colwise().maxCoeff();
  Y = ((X.rowwise() - mx).array().exp()).matrix();
  Eigen::RowVectorXf s = Y.colwise().sum();
  Y.array().rowwise() /= s.array();
  return finish(std::move(n), {x}, [x, kk, nn](TensorNode& self) {
    if (!x.requires_grad()) return;
    CMapRM Y(self.value.data(), kk, nn);
    CMapRM G(self.grad.data(), kk, nn);
    Eigen::RowVectorXf dot = (G.array() * Y.array()).colwise().sum();
    MapRM GX(grad_of(x).data(), kk, nn);
    GX.array() += Y.array() * (G.array().rowwise() - dot.array());
  });
}

Tensor concat_channel(const Tensor& a, const Tensor& b) {
  if (a.shape().empty() || b.shape().empty() ||
      a.shape().size() != b.shape().size())
    throw ShapeError("concat_channel: rank mismatch");
  for (std::size_t i = 1; i < a.shape().size(); ++i)
    if (a.shape()[i] != b.shape()[i])
      throw ShapeError("concat_channel: trailing dims differ");
  Shape out = a.shape();
  out[0] += b.shape()[0];
  auto n = new_node("concat_channel", std::move(out));
  n->value.head(a.size()) = a.values();
  n->value.tail(b.size()) = b.values();
  return finish(std::move(n), {a, b}, [a, b](TensorNode& self) {
    if (a.requires_grad()) grad_of(a) += self.grad.head(a.size());
    if (b.requires_grad()) grad_of(b) += self.grad.tail(b.size());
  });
}

Tensor gather_positions(const Tensor& x, const std::vector<std::int32_t>& idx) {
  if (x.shape().size() < 2) throw ShapeError("gather_positions: x must be (C, N)");
  const int cc = x.shape()[0];
  const std::int64_t nn = trailing(x.shape());
  for (std::int32_t i : idx)
    if (i < 0 || i >= nn) throw IndexError("gather index out of range");
  const std::int64_t mm = std::int64_t(idx.size());
  auto n = new_node("gather_positions", Shape{cc, int(mm)});
  for (int c = 0; c < cc; ++c) {
    const float* src = x.values().data() + c * nn;
    float* dst = n->value.data() + c * mm;
    for (std::int64_t m = 0; m < mm; ++m) dst[m] = src[idx[m]];
  }
  return finish(std::move(n), {x}, [x, idx, cc, nn, mm](TensorNode& self) {
    if (!x.requires_grad()) return;
    float* gx = grad_of(x).data();
    for (int c = 0; c < cc; ++c) {
      const float* g = self.grad.data() + c * mm;
      float* dst = gx + c * nn;
      for (std::int64_t m = 0; m < mm; ++m) dst[idx[m]] += g[m];
    }
  });
}

namespace {

struct TriCorner {
  std::int32_t idx[8];
  float w[8];
};

}  // namespace

Tensor trilinear_sample(const Tensor& field,
                        const Eigen::Matrix<double, 3, Eigen::Dynamic>& coords,
                        const std::array<int, 3>& dims) {
  if (field.shape().size() != 4) throw ShapeError("trilinear_sample: field must be (C,D,H,W)");
  if (field.shape()[1] != dims[0] || field.shape()[2] != dims[1] ||
      field.shape()[3] != dims[2])
    throw ShapeError("trilinear_sample: dims mismatch");
  const int cc = field.shape()[0];
  const int dd = dims[0], hh = dims[1], ww = dims[2];
  const std::int64_t plane = std::int64_t(dd) * hh * ww;
  const std::int64_t nn = coords.cols();

  // Snap near-integer coordinates so integer-translation warps stay exact
  // and boundary-coincident samples count as inside.
  auto snap = [](double f) {
    const double r = std::round(f);
    return std::abs(f - r) < 1e-9 ? r : f;
  };

  std::vector<TriCorner> corners(nn);
  for (std::int64_t s = 0; s < nn; ++s) {
    const double fd = snap(coords(0, s));
    const double fh = snap(coords(1, s));
    const double fw = snap(coords(2, s));
    const int bd = int(std::floor(fd)), bh = int(std::floor(fh)),
              bw = int(std::floor(fw));
    const double td = fd - bd, th = fh - bh, tw = fw - bw;
    TriCorner& tc = corners[s];
    int o = 0;
    for (int cd = 0; cd < 2; ++cd)
      for (int ch = 0; ch < 2; ++ch)
        for (int cw = 0; cw < 2; ++cw, ++o) {
          const int id = bd + cd, ih = bh + ch, iw = bw + cw;
          const double weight = (cd ? td : 1 - td) * (ch ? th : 1 - th) *
                                (cw ? tw : 1 - tw);
          if (id < 0 || id >= dd || ih < 0 || ih >= hh || iw < 0 || iw >= ww ||
              weight == 0.0) {
            tc.idx[o] = -1;
            tc.w[o] = 0.0f;
          } else {
            tc.idx[o] = std::int32_t((std::int64_t(id) * hh + ih) * ww + iw);
            tc.w[o] = float(weight);
          }
        }
  }

  auto n = new_node("trilinear_sample", Shape{cc, int(nn)});
  n->value.setZero();
  for (std::int64_t s = 0; s < nn; ++s) {
    const TriCorner& tc = corners[s];
    for (int o = 0; o < 8; ++o) {
      if (tc.idx[o] < 0) continue;
      const float* src = field.values().data() + tc.idx[o];
      float* dst = n->value.data() + s;
      for (int c = 0; c < cc; ++c) dst[c * nn] += tc.w[o] * src[c * plane];
    }
  }
  return finish(std::move(n), {field},
                [field, corners = std::move(corners), cc, nn, plane](TensorNode& self) {
    if (!field.requires_grad()) return;
    float* gf = grad_of(field).data();
    for (std::int64_t s = 0; s < nn; ++s) {
      const TriCorner& tc = corners[s];
      for (int o = 0; o < 8; ++o) {
        if (tc.idx[o] < 0) continue;
        const float* g = self.grad.data() + s;
        float* dst = gf + tc.idx[o];
        for (int c = 0; c < cc; ++c) dst[c * plane] += tc.w[o] * g[c * nn];
      }
    }
  });
}

Tensor scan(const Tensor& decay, const Tensor& drive) {
  check_same_shape(decay, drive, "scan");
  if (decay.shape().size() != 2) throw ShapeError("scan: inputs must be (C, L)");
  const int cc = decay.shape()[0];
  const std::int64_t ll = decay.shape()[1];
  auto n = new_node("scan", decay.shape());
  for (int c = 0; c < cc; ++c) {
    const float* a = decay.values().data() + c * ll;
    const float* d = drive.values().data() + c * ll;
    float* h = n->value.data() + c * ll;
    float acc = 0.0f;
    for (std::int64_t i = 0; i < ll; ++i) {
      acc = a[i] * acc + d[i];
      h[i] = acc;
    }
  }
  return finish(std::move(n), {decay, drive}, [decay, drive, cc, ll](TensorNode& self) {
    const bool need_a = decay.requires_grad();
    const bool need_d = drive.requires_grad();
    if (!need_a && !need_d) return;
    float* ga = need_a ? grad_of(decay).data() : nullptr;
    float* gd = need_d ? grad_of(drive).data() : nullptr;
    for (int c = 0; c < cc; ++c) {
      const float* a = decay.values().data() + c * ll;
      const float* h = self.value.data() + c * ll;
      const float* gh = self.grad.data() + c * ll;
      float carry = 0.0f;
      for (std::int64_t i = ll - 1; i >= 0; --i) {
        const float g = gh[i] + carry;
        if (need_a) ga[c * ll + i] += g * (i > 0 ? h[i - 1] : 0.0f);
        if (need_d) gd[c * ll + i] += g;
        carry = a[i] * g;
      }
    }
  });
}

Tensor channel_scale(const Tensor& x, const Tensor& v) {
  if (x.shape().empty() || v.shape().size() != 1 || v.shape()[0] != x.shape()[0])
    throw ShapeError("channel_scale: v must be (C) matching x channels");
  const int cc = x.shape()[0];
  const std::int64_t nn = trailing(x.shape());
  auto n = new_node("channel_scale", x.shape());
  for (int c = 0; c < cc; ++c)
    n->value.segment(c * nn, nn) = x.values().segment(c * nn, nn) * v.values()[c];
  return finish(std::move(n), {x, v}, [x, v, cc, nn](TensorNode& self) {
    if (x.requires_grad()) {
      Eigen::ArrayXf& gx = grad_of(x);
      for (int c = 0; c < cc; ++c)
        gx.segment(c * nn, nn) += self.grad.segment(c * nn, nn) * v.values()[c];
    }
    if (v.requires_grad()) {
      Eigen::ArrayXf& gv = grad_of(v);
      for (int c = 0; c < cc; ++c) {
        const double s = (self.grad.segment(c * nn, nn).cast<double>() *
                          x.values().segment(c * nn, nn).cast<double>())
                             .sum();
        gv[c] += float(s);
      }
    }
  });
}

Tensor repeat_rows(const Tensor& x, int k) {
  if (x.shape().size() != 2 || k < 1) throw ShapeError("repeat_rows: x must be (R, L)");
  const int rr = x.shape()[0];
  const std::int64_t ll = x.shape()[1];
  auto n = new_node("repeat_rows", Shape{rr * k, int(ll)});
  for (int r = 0; r < rr; ++r)
    for (int j = 0; j < k; ++j)
      n->value.segment((std::int64_t(r) * k + j) * ll, ll) =
          x.values().segment(r * ll, ll);
  return finish(std::move(n), {x}, [x, k, rr, ll](TensorNode& self) {
    if (!x.requires_grad()) return;
    Eigen::ArrayXf& gx = grad_of(x);
    for (int r = 0; r < rr; ++r)
      for (int j = 0; j < k; ++j)
        gx.segment(r * ll, ll) += self.grad.segment((std::int64_t(r) * k + j) * ll, ll);
  });
}

Tensor upsample_planar2(const Tensor& x) {
  if (x.shape().size() != 4) throw ShapeError("upsample_planar2: x must be (C,D,H,W)");
  const int cc = x.shape()[0], dd = x.shape()[1], hh = x.shape()[2], ww = x.shape()[3];
  auto n = new_node("upsample_planar2", Shape{cc, dd, hh * 2, ww * 2});
  const float* src = x.values().data();
  float* dst = n->value.data();
  for (std::int64_t cd = 0; cd < std::int64_t(cc) * dd; ++cd) {
    const float* sp = src + cd * hh * ww;
    float* dp = dst + cd * hh * ww * 4;
    for (int h = 0; h < 2 * hh; ++h)
      for (int w = 0; w < 2 * ww; ++w)
        dp[std::int64_t(h) * 2 * ww + w] = sp[std::int64_t(h / 2) * ww + w / 2];
  }
  return finish(std::move(n), {x}, [x, cc, dd, hh, ww](TensorNode& self) {
    if (!x.requires_grad()) return;
    float* gx = grad_of(x).data();
    const float* g = self.grad.data();
    for (std::int64_t cd = 0; cd < std::int64_t(cc) * dd; ++cd) {
      float* dp = gx + cd * hh * ww;
      const float* sp = g + cd * hh * ww * 4;
      for (int h = 0; h < 2 * hh; ++h)
        for (int w = 0; w < 2 * ww; ++w)
          dp[std::int64_t(h / 2) * ww + w / 2] += sp[std::int64_t(h) * 2 * ww + w];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) throw ShapeError("reshape: element count mismatch");
  auto n = new_node("reshape", std::move(shape));
  n->value = x.values();
  return finish(std::move(n), {x}, [x](TensorNode& self) {
    if (x.requires_grad()) grad_of(x) += self.grad;
  });
}

Tensor slice_flat(const Tensor& x, std::int64_t offset, std::int64_t len) {
  if (offset < 0 || len < 0 || offset + len > x.size())
    throw IndexError("slice_flat out of range");
  auto n = new_node("slice_flat", Shape{int(len)});
  n->value = x.values().segment(offset, len);
  return finish(std::move(n), {x}, [x, offset, len](TensorNode& self) {
    if (x.requires_grad()) grad_of(x).segment(offset, len) += self.grad;
  });
}

Tensor sum(const Tensor& x) {
  auto n = new_node("sum", Shape{});
  n->value.resize(1);
  n->value[0] = float(x.values().cast<double>().sum());
  return finish(std::move(n), {x}, [x](TensorNode& self) {
    if (x.requires_grad()) grad_of(x) += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  auto n = new_node("mean", Shape{});
  n->value.resize(1);
  n->value[0] = float(x.values().cast<double>().sum() / double(x.size()));
  const double inv = 1.0 / double(x.size());
  return finish(std::move(n), {x}, [x, inv](TensorNode& self) {
    if (x.requires_grad()) grad_of(x) += self.grad[0] * float(inv);
  });
}

Tensor spatial_mean(const Tensor& x) {
  if (x.shape().size() < 2) throw ShapeError("spatial_mean: x must be (C, N...)");
  const int cc = x.shape()[0];
  const std::int64_t nn = trailing(x.shape());
  auto n = new_node("spatial_mean", Shape{cc});
  for (int c = 0; c < cc; ++c)
    n->value[c] = float(x.values().segment(c * nn, nn).cast<double>().sum() / double(nn));
  return finish(std::move(n), {x}, [x, cc, nn](TensorNode& self) {
    if (!x.requires_grad()) return;
    Eigen::ArrayXf& gx = grad_of(x);
    for (int c = 0; c < cc; ++c)
      gx.segment(c * nn, nn) += self.grad[c] / float(nn);
  });
}

Tensor detach(const Tensor& x) {
  auto n = new_node("leaf", x.shape());
  n->value = x.values();
  return Tensor(std::move(n));
}

Tensor embed_lookup(const std::vector<std::int8_t>& labels, const Tensor& table) {
  if (table.shape().size() != 2) throw ShapeError("embed_lookup: table must be (K, C_e)");
  const int kk = table.shape()[0];
  const int ce = table.shape()[1];
  const std::int64_t nn = std::int64_t(labels.size());
  for (std::int8_t l : labels)
    if (l < -1 || l >= kk) throw DataError("label outside {-1, 0..K-1}");
  auto n = new_node("embed_lookup", Shape{ce, int(nn)});
  for (std::int64_t i = 0; i < nn; ++i) {
    const int row = labels[i] < 0 ? 0 : labels[i];
    const float* src = table.values().data() + std::int64_t(row) * ce;
    float* dst = n->value.data() + i;
    for (int e = 0; e < ce; ++e) dst[e * nn] = src[e];
  }
  return finish(std::move(n), {table}, [table, labels, ce, nn](TensorNode& self) {
    if (!table.requires_grad()) return;
    float* gt = grad_of(table).data();
    for (std::int64_t i = 0; i < nn; ++i) {
      const int row = labels[i] < 0 ? 0 : labels[i];
      const float* g = self.grad.data() + i;
      float* dst = gt + std::int64_t(row) * ce;
      for (int e = 0; e < ce; ++e) dst[e] += g[e * nn];
    }
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int8_t>& labels,
                     std::int64_t* valid_out) {
  if (logits.shape().size() < 2) throw ShapeError("cross_entropy: logits must be (K, N)");
  const int kk = logits.shape()[0];
  const std::int64_t nn = trailing(logits.shape());
  if (std::int64_t(labels.size()) != nn)
    throw ShapeError("cross_entropy: label count mismatch");
  for (std::int8_t l : labels)
    if (l < -1 || l >= kk) throw DataError("label outside {-1, 0..K-1}");

  std::int64_t valid = 0;
  double total = 0.0;
  const float* lv = logits.values().data();
  for (std::int64_t i = 0; i < nn; ++i) {
    if (labels[i] < 0) continue;
    ++valid;
    double mx = lv[i];
    for (int c = 1; c < kk; ++c) mx = std::max(mx, double(lv[c * nn + i]));
    double se = 0.0;
    for (int c = 0; c < kk; ++c) se += std::exp(double(lv[c * nn + i]) - mx);
    total += mx + std::log(se) - double(lv[std::int64_t(labels[i]) * nn + i]);
  }
  if (valid_out) *valid_out = valid;

  auto n = new_node("cross_entropy", Shape{});
  n->value.resize(1);
  n->value[0] = valid ? float(total / double(valid)) : 0.0f;
  return finish(std::move(n), {logits}, [logits, labels, kk, nn, valid](TensorNode& self) {
    if (!logits.requires_grad() || valid == 0) return;
    const float g = self.grad[0] / float(valid);
    const float* lv = logits.values().data();
    float* gl = grad_of(logits).data();
    for (std::int64_t i = 0; i < nn; ++i) {
      if (labels[i] < 0) continue;
      double mx = lv[i];
      for (int c = 1; c < kk; ++c) mx = std::max(mx, double(lv[c * nn + i]));
      double se = 0.0;
      for (int c = 0; c < kk; ++c) se += std::exp(double(lv[c * nn + i]) - mx);
      for (int c = 0; c < kk; ++c) {
        const float p = float(std::exp(double(lv[c * nn + i]) - mx) / se);
        gl[c * nn + i] += g * (p - (c == labels[i] ? 1.0f : 0.0f));
      }
    }
  });
}

Tensor smooth_l1(const Tensor& pred, const std::vector<float>& target) {
  if (std::int64_t(target.size()) != pred.size())
    throw ShapeError("smooth_l1: length mismatch");
  const std::int64_t mm = pred.size();
  double total = 0.0;
  for (std::int64_t i = 0; i < mm; ++i) {
    const double e = double(pred.values()[i]) - target[i];
    total += std::abs(e) < 1.0 ? 0.5 * e * e : std::abs(e) - 0.5;
  }
  auto n = new_node("smooth_l1", Shape{});
  n->value.resize(1);
  n->value[0] = float(total / double(mm));
  return finish(std::move(n), {pred}, [pred, target, mm](TensorNode& self) {
    if (!pred.requires_grad()) return;
    Eigen::ArrayXf& gp = grad_of(pred);
    const float g = self.grad[0] / float(mm);
    for (std::int64_t i = 0; i < mm; ++i) {
      const float e = pred.values()[i] - target[i];
      gp[i] += g * (std::abs(e) < 1.0f ? e : (e > 0 ? 1.0f : -1.0f));
    }
  });
}

namespace {
double wrap_pi(double a) {
  double r = std::fmod(a + M_PI, 2.0 * M_PI);
  if (r <= 0) r += 2.0 * M_PI;
  return r - M_PI;
}
}  // namespace

Tensor yaw_abs_error(const Tensor& pred1, double target) {
  if (pred1.size() != 1) throw ShapeError("yaw_abs_error: pred must have one element");
  const double e = wrap_pi(double(pred1.values()[0])) - wrap_pi(target);
  auto n = new_node("yaw_abs_error", Shape{});
  n->value.resize(1);
  n->value[0] = float(std::abs(e));
  const float sgn = e > 0 ? 1.0f : (e < 0 ? -1.0f : 0.0f);
  return finish(std::move(n), {pred1}, [pred1, sgn](TensorNode& self) {
    if (pred1.requires_grad()) grad_of(pred1)[0] += self.grad[0] * sgn;
  });
}

// ---- optimizer -----------------------------------------------------------

AdamW::AdamW(std::vector<Tensor> params, double lr_in, double weight_decay)
    : lr(lr_in), params_(std::move(params)), wd_(weight_decay) {
  for (const Tensor& p : params_) {
    m_.emplace_back(Eigen::ArrayXf::Zero(p.size()));
    v_.emplace_back(Eigen::ArrayXf::Zero(p.size()));
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_)
    if (p.has_grad()) p.grad().setZero();
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(0.9, double(t_));
  const double bc2 = 1.0 - std::pow(0.999, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const Eigen::ArrayXf& g = p.node()->grad;
    m_[i] = 0.9f * m_[i] + 0.1f * g;
    v_[i] = 0.999f * v_[i] + 0.001f * g * g;
    Eigen::ArrayXf mhat = m_[i] / float(bc1);
    Eigen::ArrayXf vhat = v_[i] / float(bc2);
    p.values() -= float(lr) * (mhat / (vhat.sqrt() + 1e-8f));
    if (wd_ > 0 && p.shape().size() >= 2)
      p.values() -= float(lr * wd_) * p.values();
  }
}

// ---- gradient checking ------------------------------------------------------

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  std::vector<Tensor> inputs, std::uint64_t seed, double eps,
                  int max_probes_per_input) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Tensor out;
  std::vector<float> proj;
  std::vector<Eigen::ArrayXf> analytic(inputs.size());
  {
    Tape tape;
    out = fn(inputs);
    proj.resize(out.size());
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (float& r : proj) r = u(rng);
    Tensor r = Tensor::from(out.shape(), proj);
    Tensor loss = sum(mul(out, r));
    backward(tape, loss);
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (inputs[i].requires_grad() && inputs[i].has_grad())
        analytic[i] = inputs[i].node()->grad;
  }

  auto eval = [&]() {
    Tensor o = fn(inputs);
    double dot = 0.0;
    for (std::int64_t i = 0; i < o.size(); ++i)
      dot += double(o.values()[i]) * double(proj[i]);
    return dot;
  };

  double max_rel = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    const std::int64_t n = inputs[i].size();
    std::vector<std::int64_t> probes;
    if (max_probes_per_input > 0 && n > max_probes_per_input) {
      std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
      while (std::int64_t(probes.size()) < max_probes_per_input) {
        const std::int64_t e = pick(rng);
        if (std::find(probes.begin(), probes.end(), e) == probes.end())
          probes.push_back(e);
      }
    } else {
      probes.resize(n);
      for (std::int64_t e = 0; e < n; ++e) probes[e] = e;
    }
    // Relative errors are measured against the larger of the two estimates,
    // floored at one percent of the strongest gradient component of this
    // input so that float32 evaluation noise on near-zero components does
    // not register as disagreement.
    const double scale =
        analytic[i].size() ? double(analytic[i].abs().maxCoeff()) : 0.0;
    for (std::int64_t e : probes) {
      float& slot = inputs[i].values()[e];
      const float old = slot;
      const double step = eps * std::max(1.0, std::abs(double(old)));
      // Central difference over the step that survives float32 rounding,
      // Richardson-extrapolated to cancel the leading curvature term.
      auto central = [&](double h) {
        const float hi = float(double(old) + h);
        const float lo = float(double(old) - h);
        slot = hi;
        const double f1 = eval();
        slot = lo;
        const double f2 = eval();
        slot = old;
        return (f1 - f2) / (double(hi) - double(lo));
      };
      const double coarse = central(step);
      const double fine = central(0.5 * step);
      const double numeric = (4.0 * fine - coarse) / 3.0;
      const double a = analytic[i].size() ? double(analytic[i][e]) : 0.0;
      const double denom = std::max(
          {1e-8, 0.01 * scale, std::abs(a), std::abs(numeric)});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }
  return max_rel;
}

double grad_check_directional(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    std::vector<Tensor> inputs, std::uint64_t seed, double eps,
    int num_directions) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Eigen::ArrayXf> analytic(inputs.size());
  std::vector<float> proj;
  {
    Tape tape;
    Tensor out = fn(inputs);
    proj.resize(out.size());
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (float& r : proj) r = u(rng);
    Tensor r = Tensor::from(out.shape(), proj);
    Tensor loss = sum(mul(out, r));
    backward(tape, loss);
    for (std::size_t i = 0; i < inputs.size(); ++i)
      if (inputs[i].requires_grad() && inputs[i].has_grad())
        analytic[i] = inputs[i].node()->grad;
  }

  std::vector<Eigen::ArrayXf> base(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) base[i] = inputs[i].values();

  // A random +-1 direction v has std(grad . v) = |grad|_2, so directions
  // whose derivative cancels far below that scale are ill-conditioned for a
  // relative comparison; floor the denominator at a tenth of it. Deviations
  // above 1e-4 of the total gradient mass still register.
  double gnorm2 = 0.0;
  for (const auto& a : analytic)
    if (a.size()) gnorm2 += double((a.cast<double>() * a.cast<double>()).sum());
  const double gnorm = std::sqrt(gnorm2);

  auto eval = [&]() {
    Tensor o = fn(inputs);
    double dot = 0.0;
    for (std::int64_t i = 0; i < o.size(); ++i)
      dot += double(o.values()[i]) * double(proj[i]);
    return dot;
  };

  double max_rel = 0.0;
  std::bernoulli_distribution coin(0.5);
  for (int d = 0; d < num_directions; ++d) {
    std::vector<Eigen::ArrayXf> dir(inputs.size());
    double a_dir = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      dir[i].resize(base[i].size());
      for (std::int64_t e = 0; e < dir[i].size(); ++e)
        dir[i][e] = coin(rng) ? 1.0f : -1.0f;
      if (!inputs[i].requires_grad()) {
        dir[i].setZero();
        continue;
      }
      if (analytic[i].size())
        for (std::int64_t e = 0; e < dir[i].size(); ++e)
          a_dir += double(analytic[i][e]) * double(dir[i][e]);
    }
    auto along = [&](double h) {
      for (std::size_t i = 0; i < inputs.size(); ++i)
        inputs[i].values() = base[i] + float(h) * dir[i];
      const double f1 = eval();
      for (std::size_t i = 0; i < inputs.size(); ++i)
        inputs[i].values() = base[i] - float(h) * dir[i];
      const double f2 = eval();
      return (f1 - f2) / (2.0 * h);
    };
    // Two Richardson levels: the directional restriction of a deep model has
    // large high-order derivatives, so cancel both the h^2 and h^4 terms.
    const double d0 = along(eps);
    const double d1 = along(0.5 * eps);
    const double d2 = along(0.25 * eps);
    for (std::size_t i = 0; i < inputs.size(); ++i)
      inputs[i].values() = base[i];
    const double r1 = (4.0 * d1 - d0) / 3.0;
    const double r2 = (4.0 * d2 - d1) / 3.0;
    const double numeric = (16.0 * r2 - r1) / 15.0;
    const double denom =
        std::max({1e-8, 0.1 * gnorm, std::abs(a_dir), std::abs(numeric)});
    max_rel = std::max(max_rel, std::abs(a_dir - numeric) / denom);
  }
  return max_rel;
}

namespace {

std::vector<float> rand_vec(std::int64_t n, std::mt19937_64& rng, float lo = -1.0f,
                            float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(n);
  for (float& x : v) x = u(rng);
  return v;
}

Tensor rand_tensor(Shape s, std::mt19937_64& rng, bool rg = true, float lo = -1.0f,
                   float hi = 1.0f) {
  return Tensor::from(s, rand_vec(shape_numel(s), rng, lo, hi), rg);
}

}  // namespace

std::vector<OpGradCase> standard_op_grad_cases() {
  std::vector<OpGradCase> cases;
  auto push = [&](std::string name, std::function<double(std::uint64_t)> run) {
    cases.push_back({std::move(name), std::move(run)});
  };

  push("add", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return add(in[0], in[1]); },
                      {a, b}, s, 0.25);
  });
  push("mul", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return mul(in[0], in[1]); },
                      {a, b}, s, 0.25);
  });
  push("neg", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({5}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return neg(in[0]); }, {a}, s, 0.25);
  });
  push("affine", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({5}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return affine(in[0], -1.0f, 1.0f); }, {a}, s, 0.25);
  });
  push("sigmoid", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({6}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return sigmoid(in[0]); }, {a}, s, 0.1);
  });
  push("softplus", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({6}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return softplus(in[0]); }, {a}, s, 0.1);
  });
  push("exp", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({6}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return exp(in[0]); }, {a}, s, 0.1);
  });
  push("silu", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({6}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return silu(in[0]); }, {a}, s, 0.1);
  });
  push("linear", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({3, 2}, rng), w = rand_tensor({4, 3}, rng),
         b = rand_tensor({4}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return linear(in[0], in[1], in[2]); },
        {x, w, b}, s, 0.25);
  });
  push("conv3", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({1, 4, 4, 4}, rng), k = rand_tensor({2, 1, 3, 3, 3}, rng),
         b = rand_tensor({2}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return conv3(in[0], in[1], in[2], false); },
        {x, k, b}, s, 0.25);
  });
  push("conv3_planar", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({2, 2, 4, 4}, rng), k = rand_tensor({2, 2, 3, 3, 3}, rng),
         b = rand_tensor({2}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return conv3(in[0], in[1], in[2], true); },
        {x, k, b}, s, 0.25);
  });
  push("softmax_channel", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({4, 6}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return softmax_channel(in[0]); }, {x}, s, 0.1);
  });
  push("concat_channel", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({2, 5}, rng), b = rand_tensor({3, 5}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return concat_channel(in[0], in[1]); },
        {a, b}, s, 0.25);
  });
  push("gather_positions", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({3, 6}, rng);
    std::vector<std::int32_t> idx{5, 0, 3, 3, 1, 2};
    return grad_check(
        [idx](const std::vector<Tensor>& in) { return gather_positions(in[0], idx); },
        {x}, s, 0.25);
  });
  push("trilinear_sample", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto f = rand_tensor({2, 4, 4, 4}, rng);
    Eigen::Matrix<double, 3, Eigen::Dynamic> coords(3, 5);
    std::uniform_real_distribution<double> u(-0.6, 3.6);
    for (int i = 0; i < coords.size(); ++i) coords(i) = u(rng);
    return grad_check(
        [coords](const std::vector<Tensor>& in) {
          return trilinear_sample(in[0], coords, {4, 4, 4});
        },
        {f}, s, 0.25);
  });
  push("scan", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto a = rand_tensor({2, 8}, rng, true, 0.1f, 0.9f);
    auto d = rand_tensor({2, 8}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return scan(in[0], in[1]); },
                      {a, d}, s, 0.05);
  });
  push("channel_scale", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({3, 7}, rng), v = rand_tensor({3}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return channel_scale(in[0], in[1]); },
        {x, v}, s, 0.25);
  });
  push("repeat_rows", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({2, 5}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return repeat_rows(in[0], 3); }, {x}, s, 0.25);
  });
  push("upsample_planar2", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({2, 2, 3, 3}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return upsample_planar2(in[0]); }, {x}, s, 0.25);
  });
  push("reshape", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({2, 6}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return reshape(in[0], {3, 4}); }, {x}, s, 0.25);
  });
  push("slice_flat", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({8}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return slice_flat(in[0], 2, 4); }, {x}, s, 0.25);
  });
  push("sum", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({7}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return sum(in[0]); }, {x}, s, 0.25);
  });
  push("mean", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({7}, rng);
    return grad_check([](const std::vector<Tensor>& in) { return mean(in[0]); }, {x}, s, 0.25);
  });
  push("spatial_mean", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto x = rand_tensor({3, 9}, rng);
    return grad_check(
        [](const std::vector<Tensor>& in) { return spatial_mean(in[0]); }, {x}, s, 0.25);
  });
  push("embed_lookup", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto t = rand_tensor({4, 3}, rng);
    std::vector<std::int8_t> labels{0, 2, -1, 3, 1, 1};
    return grad_check(
        [labels](const std::vector<Tensor>& in) { return embed_lookup(labels, in[0]); },
        {t}, s, 0.25);
  });
  push("cross_entropy", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto l = rand_tensor({4, 9}, rng);
    std::vector<std::int8_t> labels{0, 1, -1, 2, 3, 0, -1, 1, 2};
    return grad_check(
        [labels](const std::vector<Tensor>& in) { return cross_entropy(in[0], labels); },
        {l}, s, 0.1);
  });
  push("smooth_l1", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto p = rand_tensor({4}, rng, true, -0.5f, 0.5f);
    std::vector<float> t = rand_vec(4, rng, -0.3f, 0.3f);
    return grad_check(
        [t](const std::vector<Tensor>& in) { return smooth_l1(in[0], t); }, {p}, s, 0.05);
  });
  push("yaw_abs_error", [](std::uint64_t s) {
    std::mt19937_64 rng(s);
    auto p = rand_tensor({1}, rng, true, -1.0f, -0.1f);
    return grad_check(
        [](const std::vector<Tensor>& in) { return yaw_abs_error(in[0], 0.37); }, {p}, s, 0.05);
  });
  return cases;
}

}  // namespace occstep
