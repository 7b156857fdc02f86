#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "sinewich/random.hpp"
#include "sinewich/tensor.hpp"

namespace sinewich {

// Convolution here is cross-correlation (no kernel flip) with symmetric zero
// "same" padding: out[o,y,x] = sum_{c,u,v} k[o,c,u,v] * in[c, y+u-kH/2, x+v-kW/2].

/// [C_in,H,W] * [C_out,C_in,kH,kW] -> [C_out,H,W]. Only stride 1 is supported.
Tensor conv2d(const Tensor& input, const ConvKernel& kernel, std::size_t stride = 1);

/// Adjoint of conv2d with respect to its input.
Tensor conv2d_backward_input(const Tensor& grad_output, const ConvKernel& kernel);

/// Gradient of conv2d with respect to the kernel, accumulated into `grad_kernel`.
void conv2d_accumulate_kernel_grad(const Tensor& input, const Tensor& grad_output, Tensor& grad_kernel);

/// Singular values of a 2-D tensor in descending order (length min(m,n)).
std::vector<double> singular_values(const Tensor& matrix);

/// Sampled isotropic Gaussian on a K x K grid centred at zero, renormalized to sum to one.
Tensor gaussian_kernel(int size, double sigma);

/// Nearest-neighbour upsampling of [C,h,w] to [C,H,W]; H and W must be integer multiples.
Tensor upsample_nearest(const Tensor& input, std::size_t height, std::size_t width);
/// Adjoint of upsample_nearest: sums each replicated block back into its source pixel.
/// `height` and `width` give the source (pre-upsampling) size.
Tensor upsample_nearest_backward(const Tensor& grad_output, std::size_t height, std::size_t width);

/// 2x2 average pooling of [C,H,W] with even H and W.
Tensor avg_pool2(const Tensor& input);
Tensor avg_pool2_backward(const Tensor& grad_output);

/// I.i.d. N(0, sigma^2) entries drawn from `stream` in row-major order.
Tensor sample_gaussian(RandomStream& stream, const Shape& shape, double sigma);

/// Worker count from SINEWICH_THREADS, falling back to hardware concurrency (min 1).
std::size_t default_thread_count();

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index runs exactly
/// once; callers write results into per-index slots and reduce in index order.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace sinewich
