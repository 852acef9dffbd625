#include "haccn/layers.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

namespace haccn::layers {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void check_conv(const Tensor& in, const ConvShape& s, std::size_t wsize, std::size_t bsize) {
  if (in.channels != s.cin) {
    throw ShapeError("conv expects " + std::to_string(s.cin) + " input channels, got " + std::to_string(in.channels));
  }
  if (s.kernel % 2 == 0) throw ShapeError("conv kernel size must be odd");
  if (wsize != static_cast<std::size_t>(s.cout) * s.cin * s.kernel * s.kernel || bsize != static_cast<std::size_t>(s.cout)) {
    throw ShapeError("conv parameter size mismatch");
  }
}

// Column matrix of shape (cin*k*k, h*w) with zero padding k/2.
RowMat im2col(const Tensor& in, int k) {
  const int pad = k / 2;
  const int h = in.height, w = in.width;
  RowMat col(static_cast<Eigen::Index>(in.channels) * k * k, static_cast<Eigen::Index>(h) * w);
  col.setZero();
  for (int c = 0; c < in.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col.row((static_cast<Eigen::Index>(c) * k + ky) * k + kx).data();
        const int dy = ky - pad, dx = kx - pad;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
          const double* src = &in.data[(static_cast<std::size_t>(c) * h + sy) * w];
          double* dst = row + static_cast<std::size_t>(y) * w;
          for (int x = x_lo; x < x_hi; ++x) dst[x] = src[x + dx];
        }
      }
    }
  }
  return col;
}

void col2im(const RowMat& col, int k, Tensor& out) {
  const int pad = k / 2;
  const int h = out.height, w = out.width;
  for (int c = 0; c < out.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col.row((static_cast<Eigen::Index>(c) * k + ky) * k + kx).data();
        const int dy = ky - pad, dx = kx - pad;
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
          double* dst = &out.data[(static_cast<std::size_t>(c) * h + sy) * w];
          const double* src = row + static_cast<std::size_t>(y) * w;
          for (int x = x_lo; x < x_hi; ++x) dst[x + dx] += src[x];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& in, const ConvShape& s, std::span<const double> weight, std::span<const double> bias) {
  check_conv(in, s, weight.size(), bias.size());
  Tensor out(s.cout, in.height, in.width);
  const Eigen::Index kk = static_cast<Eigen::Index>(s.cin) * s.kernel * s.kernel;
  const Eigen::Index hw = static_cast<Eigen::Index>(in.height) * in.width;
  ConstMapMat wmat(weight.data(), s.cout, kk);
  MapMat omat(out.data.data(), s.cout, hw);
  if (s.kernel == 1) {
    omat.noalias() = wmat * ConstMapMat(in.data.data(), kk, hw);
  } else {
    omat.noalias() = wmat * im2col(in, s.kernel);
  }
  for (int c = 0; c < s.cout; ++c) omat.row(c).array() += bias[c];
  return out;
}

Tensor conv2d_backward(const Tensor& in, const Tensor& dout, const ConvShape& s, std::span<const double> weight,
                       std::span<double> dweight, std::span<double> dbias, bool want_input_grad) {
  const bool param_grads = !dweight.empty();
  check_conv(in, s, weight.size(), static_cast<std::size_t>(s.cout));
  if (param_grads && (dweight.size() != weight.size() || dbias.size() != static_cast<std::size_t>(s.cout))) {
    throw ShapeError("conv parameter gradient size mismatch");
  }
  if (dout.channels != s.cout || dout.height != in.height || dout.width != in.width) {
    throw ShapeError("conv output gradient shape mismatch");
  }
  const Eigen::Index kk = static_cast<Eigen::Index>(s.cin) * s.kernel * s.kernel;
  const Eigen::Index hw = static_cast<Eigen::Index>(in.height) * in.width;
  ConstMapMat dmat(dout.data.data(), s.cout, hw);
  ConstMapMat wmat(weight.data(), s.cout, kk);

  if (s.kernel == 1) {
    if (param_grads) {
      for (int c = 0; c < s.cout; ++c) dbias[c] += dmat.row(c).sum();
      MapMat(dweight.data(), s.cout, kk).noalias() += dmat * ConstMapMat(in.data.data(), kk, hw).transpose();
    }
    if (!want_input_grad) return {};
    Tensor din(in.channels, in.height, in.width);
    MapMat(din.data.data(), kk, hw).noalias() = wmat.transpose() * dmat;
    return din;
  }
  if (param_grads) {
    for (int c = 0; c < s.cout; ++c) dbias[c] += dmat.row(c).sum();
    MapMat(dweight.data(), s.cout, kk).noalias() += dmat * im2col(in, s.kernel).transpose();
  }
  if (!want_input_grad) return {};
  const RowMat dcol = wmat.transpose() * dmat;
  Tensor din(in.channels, in.height, in.width);
  col2im(dcol, s.kernel, din);
  return din;
}

void relu_inplace(Tensor& t) {
  for (double& v : t.data) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(Tensor& dout, const Tensor& out) {
  if (!dout.same_shape(out)) throw ShapeError("relu gradient shape mismatch");
  for (std::size_t i = 0; i < dout.data.size(); ++i) {
    if (!(out.data[i] > 0.0)) dout.data[i] = 0.0;
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

PoolResult maxpool2(const Tensor& in) {
  const int oh = in.height / 2, ow = in.width / 2;
  PoolResult r{Tensor(in.channels, oh, ow), std::vector<int>(static_cast<std::size_t>(in.channels) * oh * ow)};
  std::size_t o = 0;
  for (int c = 0; c < in.channels; ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x, ++o) {
        int best = -1;
        double best_v = 0.0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = (c * in.height + 2 * y + dy) * in.width + 2 * x + dx;
            const double v = in.data[static_cast<std::size_t>(idx)];
            if (best < 0 || v > best_v) {
              best = idx;
              best_v = v;
            }
          }
        }
        r.out.data[o] = best_v;
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

Tensor maxpool2_backward(const Tensor& dout, const std::vector<int>& argmax, int in_h, int in_w) {
  if (argmax.size() != dout.size()) throw ShapeError("maxpool gradient shape mismatch");
  Tensor din(dout.channels, in_h, in_w);
  for (std::size_t i = 0; i < argmax.size(); ++i) din.data[static_cast<std::size_t>(argmax[i])] += dout.data[i];
  return din;
}

namespace {

struct Tap {
  int lo;
  int hi;
  double frac;  // weight of `hi`
};

std::vector<Tap> bilinear_taps(int in, int factor) {
  std::vector<Tap> taps(static_cast<std::size_t>(in) * factor);
  for (int o = 0; o < in * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    lo = std::min(lo, in - 1);
    const int hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& in, int factor) {
  if (factor < 1) throw ShapeError("upsampling factor must be >= 1");
  if (factor == 1) return in;
  const auto ty = bilinear_taps(in.height, factor);
  const auto tx = bilinear_taps(in.width, factor);
  Tensor out(in.channels, in.height * factor, in.width * factor);
  for (int c = 0; c < in.channels; ++c) {
    for (int y = 0; y < out.height; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out.width; ++x) {
        const auto& b = tx[static_cast<std::size_t>(x)];
        const double top = (1.0 - b.frac) * in(c, a.lo, b.lo) + b.frac * in(c, a.lo, b.hi);
        const double bot = (1.0 - b.frac) * in(c, a.hi, b.lo) + b.frac * in(c, a.hi, b.hi);
        out(c, y, x) = (1.0 - a.frac) * top + a.frac * bot;
      }
    }
  }
  return out;
}

Tensor upsample_bilinear_backward(const Tensor& dout, int factor, int in_h, int in_w) {
  if (dout.height != in_h * factor || dout.width != in_w * factor) throw ShapeError("upsampling gradient shape mismatch");
  if (factor == 1) return dout;
  const auto ty = bilinear_taps(in_h, factor);
  const auto tx = bilinear_taps(in_w, factor);
  Tensor din(dout.channels, in_h, in_w);
  for (int c = 0; c < dout.channels; ++c) {
    for (int y = 0; y < dout.height; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < dout.width; ++x) {
        const auto& b = tx[static_cast<std::size_t>(x)];
        const double g = dout(c, y, x);
        din(c, a.lo, b.lo) += g * (1.0 - a.frac) * (1.0 - b.frac);
        din(c, a.lo, b.hi) += g * (1.0 - a.frac) * b.frac;
        din(c, a.hi, b.lo) += g * a.frac * (1.0 - b.frac);
        din(c, a.hi, b.hi) += g * a.frac * b.frac;
      }
    }
  }
  return din;
}

std::vector<double> linear(std::span<const double> x, int out, std::span<const double> weight,
                           std::span<const double> bias) {
  const std::size_t in = x.size();
  if (weight.size() != in * static_cast<std::size_t>(out) || bias.size() != static_cast<std::size_t>(out)) {
    throw ShapeError("linear layer expects " + std::to_string(weight.size() / std::max<std::size_t>(out, 1)) +
                     " inputs, got " + std::to_string(in));
  }
  std::vector<double> y(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    double acc = bias[o];
    const double* w = weight.data() + static_cast<std::size_t>(o) * in;
    for (std::size_t i = 0; i < in; ++i) acc += w[i] * x[i];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

std::vector<double> linear_backward(std::span<const double> x, std::span<const double> dy,
                                    std::span<const double> weight, std::span<double> dweight,
                                    std::span<double> dbias) {
  const std::size_t in = x.size(), out = dy.size();
  if (weight.size() != in * out || dweight.size() != in * out || dbias.size() != out) {
    throw ShapeError("linear gradient shape mismatch");
  }
  std::vector<double> dx(in, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    const double g = dy[o];
    dbias[o] += g;
    const double* w = weight.data() + o * in;
    double* dw = dweight.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) {
      dw[i] += g * x[i];
      dx[i] += g * w[i];
    }
  }
  return dx;
}

Tensor concat_channels(std::span<const Tensor* const> parts) {
  if (parts.empty()) return {};
  int channels = 0;
  for (const Tensor* p : parts) {
    if (p->height != parts[0]->height || p->width != parts[0]->width) {
      throw ShapeError("cannot concatenate feature maps with different spatial sizes");
    }
    channels += p->channels;
  }
  Tensor out(channels, parts[0]->height, parts[0]->width);
  auto it = out.data.begin();
  for (const Tensor* p : parts) it = std::copy(p->data.begin(), p->data.end(), it);
  return out;
}

}  // namespace haccn::layers
