#include "sinewich/numerics.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>

namespace sinewich {

namespace {

void require_chw(const Tensor& t, const char* what) {
    if (t.rank() != 3) {
        throw ContractViolation(std::string(what) + ": expected [C,H,W], got " + shape_to_string(t.shape()));
    }
}

// Valid output range [lo, hi) for a tap offset `shift` over an axis of length n.
inline void valid_range(std::ptrdiff_t shift, std::size_t n, std::size_t& lo, std::size_t& hi) {
    const auto len = static_cast<std::ptrdiff_t>(n);
    lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -shift));
    hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(len - shift, 0, len));
}

}  // namespace

Tensor conv2d(const Tensor& input, const ConvKernel& kernel, std::size_t stride) {
    require_chw(input, "conv2d");
    if (stride != 1) throw ContractViolation("conv2d: only stride 1 is supported, got " + std::to_string(stride));
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (kernel.in_channels() != cin) {
        throw ContractViolation("conv2d: input has " + std::to_string(cin) + " channels but kernel expects " +
                                std::to_string(kernel.in_channels()));
    }
    const std::size_t cout = kernel.out_channels(), kh = kernel.kh(), kw = kernel.kw();
    const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);

    Tensor out({cout, h, w});
    const double* in = input.raw();
    double* dst = out.raw();
    for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t u = 0; u < kh; ++u) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(u) - ph;
                std::size_t y0, y1;
                valid_range(dy, h, y0, y1);
                for (std::size_t v = 0; v < kw; ++v) {
                    const double k = kernel(o, c, u, v);
                    if (k == 0.0) continue;
                    const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(v) - pw;
                    std::size_t x0, x1;
                    valid_range(dx, w, x0, x1);
                    for (std::size_t y = y0; y < y1; ++y) {
                        const double* src = in + (c * h + (y + dy)) * w;
                        double* row = dst + (o * h + y) * w;
                        for (std::size_t x = x0; x < x1; ++x) row[x] += k * src[x + dx];
                    }
                }
            }
        }
    }
    return out;
}

Tensor conv2d_backward_input(const Tensor& grad_output, const ConvKernel& kernel) {
    require_chw(grad_output, "conv2d_backward_input");
    if (grad_output.dim(0) != kernel.out_channels()) {
        throw ContractViolation("conv2d_backward_input: gradient has " + std::to_string(grad_output.dim(0)) +
                                " channels but kernel produces " + std::to_string(kernel.out_channels()));
    }
    const std::size_t cout = kernel.out_channels(), cin = kernel.in_channels();
    const std::size_t h = grad_output.dim(1), w = grad_output.dim(2), kh = kernel.kh(), kw = kernel.kw();
    const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);

    Tensor grad_input({cin, h, w});
    const double* g = grad_output.raw();
    double* dst = grad_input.raw();
    for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t u = 0; u < kh; ++u) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(u) - ph;
                std::size_t y0, y1;
                valid_range(dy, h, y0, y1);
                for (std::size_t v = 0; v < kw; ++v) {
                    const double k = kernel(o, c, u, v);
                    if (k == 0.0) continue;
                    const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(v) - pw;
                    std::size_t x0, x1;
                    valid_range(dx, w, x0, x1);
                    for (std::size_t y = y0; y < y1; ++y) {
                        const double* row = g + (o * h + y) * w;
                        double* tgt = dst + (c * h + (y + dy)) * w;
                        for (std::size_t x = x0; x < x1; ++x) tgt[x + dx] += k * row[x];
                    }
                }
            }
        }
    }
    return grad_input;
}

void conv2d_accumulate_kernel_grad(const Tensor& input, const Tensor& grad_output, Tensor& grad_kernel) {
    require_chw(input, "conv2d_accumulate_kernel_grad");
    require_chw(grad_output, "conv2d_accumulate_kernel_grad");
    if (grad_kernel.rank() != 4 || grad_kernel.dim(0) != grad_output.dim(0) || grad_kernel.dim(1) != input.dim(0) ||
        input.dim(1) != grad_output.dim(1) || input.dim(2) != grad_output.dim(2)) {
        throw ContractViolation("conv2d_accumulate_kernel_grad: inconsistent shapes input " +
                                shape_to_string(input.shape()) + ", grad " + shape_to_string(grad_output.shape()) +
                                ", kernel " + shape_to_string(grad_kernel.shape()));
    }
    const std::size_t cout = grad_kernel.dim(0), cin = grad_kernel.dim(1), kh = grad_kernel.dim(2),
                      kw = grad_kernel.dim(3);
    const std::size_t h = input.dim(1), w = input.dim(2);
    const auto ph = static_cast<std::ptrdiff_t>(kh / 2), pw = static_cast<std::ptrdiff_t>(kw / 2);
    const double* in = input.raw();
    const double* g = grad_output.raw();
    for (std::size_t o = 0; o < cout; ++o) {
        for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t u = 0; u < kh; ++u) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(u) - ph;
                std::size_t y0, y1;
                valid_range(dy, h, y0, y1);
                for (std::size_t v = 0; v < kw; ++v) {
                    const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(v) - pw;
                    std::size_t x0, x1;
                    valid_range(dx, w, x0, x1);
                    double acc = 0.0;
                    for (std::size_t y = y0; y < y1; ++y) {
                        const double* src = in + (c * h + (y + dy)) * w;
                        const double* row = g + (o * h + y) * w;
                        for (std::size_t x = x0; x < x1; ++x) acc += row[x] * src[x + dx];
                    }
                    grad_kernel(o, c, u, v) += acc;
                }
            }
        }
    }
}

std::vector<double> singular_values(const Tensor& matrix) {
    if (matrix.rank() != 2) {
        throw ContractViolation("singular_values: expected a 2-D tensor, got " + shape_to_string(matrix.shape()));
    }
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const RowMajor> m(matrix.raw(), static_cast<Eigen::Index>(matrix.dim(0)),
                                       static_cast<Eigen::Index>(matrix.dim(1)));
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto& s = svd.singularValues();
    std::vector<double> values(s.data(), s.data() + s.size());
    std::sort(values.begin(), values.end(), std::greater<>());
    return values;
}

Tensor gaussian_kernel(int size, double sigma) {
    if (size < 1 || size % 2 == 0) {
        throw ContractViolation("gaussian_kernel: size must be a positive odd integer, got " + std::to_string(size));
    }
    if (!(sigma > 0.0)) throw ContractViolation("gaussian_kernel: sigma must be positive");
    const auto k = static_cast<std::size_t>(size);
    const int half = size / 2;
    Tensor g({k, k});
    // The continuous normalizer 1/(2*pi*sigma^2) cancels in the renormalization below.
    for (int u = -half; u <= half; ++u)
        for (int v = -half; v <= half; ++v)
            g(static_cast<std::size_t>(u + half), static_cast<std::size_t>(v + half)) =
                std::exp(-static_cast<double>(u * u + v * v) / (2.0 * sigma * sigma));
    g *= 1.0 / g.sum();
    return g;
}

Tensor upsample_nearest(const Tensor& input, std::size_t height, std::size_t width) {
    require_chw(input, "upsample_nearest");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (height < h || width < w || height % h != 0 || width % w != 0) {
        throw ContractViolation("upsample_nearest: target " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not an integer multiple of " + std::to_string(h) + "x" + std::to_string(w));
    }
    const std::size_t fy = height / h, fx = width / w;
    Tensor out({c, height, width});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) out(ch, y, x) = input(ch, y / fy, x / fx);
    return out;
}

Tensor upsample_nearest_backward(const Tensor& grad_output, std::size_t height, std::size_t width) {
    require_chw(grad_output, "upsample_nearest_backward");
    const std::size_t c = grad_output.dim(0), big_h = grad_output.dim(1), big_w = grad_output.dim(2);
    if (height == 0 || width == 0 || big_h % height != 0 || big_w % width != 0) {
        throw ContractViolation("upsample_nearest_backward: source size does not divide gradient size");
    }
    const std::size_t fy = big_h / height, fx = big_w / width;
    Tensor out({c, height, width});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < big_h; ++y)
            for (std::size_t x = 0; x < big_w; ++x) out(ch, y / fy, x / fx) += grad_output(ch, y, x);
    return out;
}

Tensor avg_pool2(const Tensor& input) {
    require_chw(input, "avg_pool2");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ContractViolation("avg_pool2: spatial size must be even, got " + shape_to_string(input.shape()));
    }
    Tensor out({c, h / 2, w / 2});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h / 2; ++y)
            for (std::size_t x = 0; x < w / 2; ++x)
                out(ch, y, x) = 0.25 * (input(ch, 2 * y, 2 * x) + input(ch, 2 * y, 2 * x + 1) +
                                        input(ch, 2 * y + 1, 2 * x) + input(ch, 2 * y + 1, 2 * x + 1));
    return out;
}

Tensor avg_pool2_backward(const Tensor& grad_output) {
    require_chw(grad_output, "avg_pool2_backward");
    const std::size_t c = grad_output.dim(0), h = grad_output.dim(1), w = grad_output.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t x = 0; x < 2 * w; ++x) out(ch, y, x) = 0.25 * grad_output(ch, y / 2, x / 2);
    return out;
}

Tensor sample_gaussian(RandomStream& stream, const Shape& shape, double sigma) {
    if (!(sigma > 0.0)) throw ContractViolation("sample_gaussian: sigma must be positive");
    Tensor t(shape);
    for (double& v : t.data()) v = sigma * stream.normal();
    return t;
}

std::size_t default_thread_count() {
    if (const char* env = std::getenv("SINEWICH_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end != env && n > 0) return static_cast<std::size_t>(n);
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                const std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
    work();
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace sinewich
