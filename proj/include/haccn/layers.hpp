#pragma once

#include <span>
#include <vector>

#include "haccn/tensor.hpp"

// Forward/backward kernels for the handful of layer types the counting
// network needs. Weights are flat spans in PyTorch layout:
// conv (cout, cin, k, k), linear (out, in).
namespace haccn::layers {

struct ConvShape {
  int cin = 0;
  int cout = 0;
  int kernel = 1;  // odd; padding is kernel / 2 so spatial size is preserved
};

Tensor conv2d(const Tensor& in, const ConvShape& s, std::span<const double> weight, std::span<const double> bias);

// Accumulates into dweight/dbias (both empty: parameter gradients skipped).
// Returns the input gradient when `want_input_grad`, otherwise an empty tensor.
Tensor conv2d_backward(const Tensor& in, const Tensor& dout, const ConvShape& s, std::span<const double> weight,
                       std::span<double> dweight, std::span<double> dbias, bool want_input_grad);

void relu_inplace(Tensor& t);
// dout *= (out > 0)
void relu_backward_inplace(Tensor& dout, const Tensor& out);

double sigmoid(double x);

struct PoolResult {
  Tensor out;
  std::vector<int> argmax;  // flat input index per output element
};

// 2x2 max pooling, stride 2. Odd trailing rows/columns are dropped.
PoolResult maxpool2(const Tensor& in);
Tensor maxpool2_backward(const Tensor& dout, const std::vector<int>& argmax, int in_h, int in_w);

// Bilinear upsampling by an integer factor with half-pixel centres
// (src = (dst + 0.5) / f - 0.5, clamped at the edges).
Tensor upsample_bilinear(const Tensor& in, int factor);
Tensor upsample_bilinear_backward(const Tensor& dout, int factor, int in_h, int in_w);

std::vector<double> linear(std::span<const double> x, int out, std::span<const double> weight,
                           std::span<const double> bias);
// Accumulates parameter gradients; returns dx.
std::vector<double> linear_backward(std::span<const double> x, std::span<const double> dy,
                                    std::span<const double> weight, std::span<double> dweight,
                                    std::span<double> dbias);

// Channel-wise concatenation of equally sized tensors.
Tensor concat_channels(std::span<const Tensor* const> parts);

}  // namespace haccn::layers
