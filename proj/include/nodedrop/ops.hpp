#pragma once

#include <cstdint>
#include <vector>

#include "nodedrop/tensor.hpp"

namespace nodedrop {

// All kernels accumulate each output element in a fixed order (left to right
// over the reduction index, starting from +0), so results are reproducible
// and removing exact-zero terms leaves the remaining sum bit-identical.

// c[i,j] = sum_k a[i,k] * b[k,j].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
struct Conv2dCache {
  Tensor<T> input;
  Tensor<T> kernels;
  Shape out_shape;
};

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;  // empty when not requested
  Tensor<T> kernels;
  Tensor<T> bias;
};

// 3x3 cross-correlation with zero same-padding plus per-channel bias.
// input N x Cin x H x W, kernels Cout x Cin x 3 x 3, bias Cout.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 Conv2dCache<T>* cache = nullptr);

template <typename T>
Conv2dGrads<T> conv2d_grads(const Conv2dCache<T>& cache, const Tensor<T>& grad_out,
                            bool want_input_grad = true);

template <typename T>
struct MaxPoolResult {
  Tensor<T> output;
  // Position of the max inside each 2x2 window, row-major (0..3).
  std::vector<std::uint8_t> argmax;
};

// 2x2 non-overlapping max pooling; ties go to the first element in row-major order.
template <typename T>
MaxPoolResult<T> maxpool2d(const Tensor<T>& input);

template <typename T>
Tensor<T> maxpool2d_grad(const Shape& input_shape, const std::vector<std::uint8_t>& argmax,
                         const Tensor<T>& grad_out);

}  // namespace nodedrop
