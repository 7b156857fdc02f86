#include "sinewich/adapter.hpp"

#include <cmath>
#include <string>

#include "sinewich/numerics.hpp"

namespace sinewich {

namespace {

ConvKernel filter_kernel(int size, double sigma) {
    const auto k = static_cast<std::size_t>(size);
    return ConvKernel(gaussian_kernel(size, sigma).reshaped({1, 1, k, k}));
}

Tensor as_image(const Tensor& matrix) { return matrix.reshaped({1, matrix.dim(0), matrix.dim(1)}); }

}  // namespace

LowRankFactors::LowRankFactors(Tensor a, Tensor b) : A(std::move(a)), B(std::move(b)) {
    if (A.rank() != 2 || B.rank() != 2) {
        throw ContractViolation("low-rank factors must be matrices, got A " + shape_to_string(A.shape()) + ", B " +
                                shape_to_string(B.shape()));
    }
    if (A.dim(1) != B.dim(1)) {
        throw ContractViolation("low-rank factors disagree on rank: A " + shape_to_string(A.shape()) + ", B " +
                                shape_to_string(B.shape()));
    }
    if (r() > std::min(m(), n())) {
        throw ContractViolation("rank " + std::to_string(r()) + " exceeds min(m,n) = " +
                                std::to_string(std::min(m(), n())));
    }
}

MidKernel::MidKernel(ConvKernel w) : W(std::move(w)) {
    if (W.out_channels() != W.in_channels() || W.kh() != W.kw()) {
        throw ContractViolation("mid kernel must be [r,r,K,K], got " + shape_to_string(W.weights().shape()));
    }
}

ClockNetParams::ClockNetParams(Tensor wq, double scale, double offset) : Wq(std::move(wq)), s(scale), c(offset) {
    if (Wq.rank() != 2 || Wq.dim(0) != 1) {
        throw ContractViolation("clock net W_q must be [1,C], got " + shape_to_string(Wq.shape()));
    }
    if (s == 0.0) throw ContractViolation("clock net scale s must be nonzero");
}

Tensor to_matrix_view(const ConvKernel& kernel) {
    const std::size_t n = kernel.out_channels(), m = kernel.in_channels(), k = kernel.kh();
    if (kernel.kw() != k) throw ContractViolation("matrix view requires square kernels");
    Tensor view({m, n * k * k});
    for (std::size_t o = 0; o < n; ++o)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) view(i, (o * k + u) * k + v) = kernel(o, i, u, v);
    return view;
}

ConvKernel from_matrix_view(const Tensor& view, std::size_t out_channels, std::size_t kernel_size) {
    const std::size_t k = kernel_size;
    if (view.rank() != 2 || view.dim(1) != out_channels * k * k) {
        throw ContractViolation("matrix view " + shape_to_string(view.shape()) + " does not match " +
                                std::to_string(out_channels) + " outputs with kernel size " + std::to_string(k));
    }
    const std::size_t m = view.dim(0);
    ConvKernel kernel(out_channels, m, k, k);
    for (std::size_t o = 0; o < out_channels; ++o)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) kernel(o, i, u, v) = view(i, (o * k + u) * k + v);
    return kernel;
}

FusedKernel fuse_awb(const LowRankFactors& f, const MidKernel& mid) {
    if (mid.rank() != f.r()) {
        throw ContractViolation("fuse_awb: mid kernel rank " + std::to_string(mid.rank()) +
                                " does not match factor rank " + std::to_string(f.r()));
    }
    const std::size_t m = f.m(), n = f.n(), r = f.r(), k = mid.size();
    ConvKernel fused(n, m, k, k);
    Tensor bw({n, r});
    for (std::size_t u = 0; u < k; ++u) {
        for (std::size_t v = 0; v < k; ++v) {
            // bw = B * W_uv
            bw.fill(0.0);
            for (std::size_t o = 0; o < n; ++o)
                for (std::size_t j = 0; j < r; ++j)
                    for (std::size_t l = 0; l < r; ++l) bw(o, l) += f.B(o, j) * mid.W(j, l, u, v);
            for (std::size_t o = 0; o < n; ++o)
                for (std::size_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (std::size_t l = 0; l < r; ++l) acc += bw(o, l) * f.A(i, l);
                    fused(o, i, u, v) = acc;
                }
        }
    }
    return FusedKernel{std::move(fused)};
}

Tensor pipeline_apply(const LowRankFactors& f, const MidKernel& mid, const Tensor& x) {
    if (x.rank() != 3 || x.dim(0) != f.m()) {
        throw ContractViolation("pipeline_apply: expected input with " + std::to_string(f.m()) + " channels, got " +
                                shape_to_string(x.shape()));
    }
    if (mid.rank() != f.r()) throw ContractViolation("pipeline_apply: mid kernel rank does not match factors");
    // A^T and B as 1x1 convolutions.
    ConvKernel reduce(f.r(), f.m(), 1, 1);
    for (std::size_t j = 0; j < f.r(); ++j)
        for (std::size_t i = 0; i < f.m(); ++i) reduce(j, i, 0, 0) = f.A(i, j);
    ConvKernel expand(f.n(), f.r(), 1, 1);
    for (std::size_t o = 0; o < f.n(); ++o)
        for (std::size_t j = 0; j < f.r(); ++j) expand(o, j, 0, 0) = f.B(o, j);
    return conv2d(conv2d(conv2d(x, reduce), mid.W), expand);
}

ModulatedKernel sine_modulate(const FusedKernel& base, double omega) {
    ModulatedKernel out{base.kernel4d, omega, std::nullopt};
    for (double& v : out.kernel.weights().data()) v = std::sin(omega * v);
    return out;
}

ModulatedKernel linear_scale(const FusedKernel& base, double omega) {
    ModulatedKernel out{base.kernel4d, omega, std::nullopt};
    out.kernel.weights() *= omega;
    return out;
}

ModulatedKernel lowpass_filter(const ModulatedKernel& mk, int size, double sigma) {
    const ConvKernel g = filter_kernel(size, sigma);
    const std::size_t n = mk.kernel.out_channels(), k = mk.kernel.kh();
    const Tensor view = to_matrix_view(mk.kernel);
    const Tensor filtered = conv2d(as_image(view), g);
    return ModulatedKernel{from_matrix_view(filtered.reshaped(view.shape()), n, k), mk.omega,
                           FilterSpec{size, sigma}};
}

Tensor lowpass_backward(const Tensor& grad_filtered, int size, double sigma) {
    if (grad_filtered.rank() != 4) {
        throw ContractViolation("lowpass_backward: expected a 4-D kernel gradient, got " +
                                shape_to_string(grad_filtered.shape()));
    }
    const ConvKernel g = filter_kernel(size, sigma);
    const ConvKernel as_kernel(grad_filtered);
    const std::size_t n = as_kernel.out_channels(), k = as_kernel.kh();
    const Tensor view = to_matrix_view(as_kernel);
    const Tensor back = conv2d_backward_input(as_image(view), g);
    return from_matrix_view(back.reshaped(view.shape()), n, k).weights();
}

double clocknet_forward(const ClockNetParams& p, const TaskToken& token) {
    if (token.p.size() != p.width()) {
        throw ContractViolation("clocknet_forward: token width " + std::to_string(token.p.size()) +
                                " does not match W_q width " + std::to_string(p.width()));
    }
    double pre = 0.0;
    for (std::size_t i = 0; i < p.width(); ++i) pre += p.Wq(0, i) * std::max(0.0, token.p[i]);
    return p.s * (std::tanh(pre) + p.c);
}

SineGradients sine_backward(const FusedKernel& base, double omega, const Tensor& upstream) {
    const Tensor& m = base.kernel4d.weights();
    require_same_shape(m, upstream, "sine_backward");
    SineGradients g{Tensor::zeros_like(m), 0.0};
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double cosine = std::cos(omega * m[i]);
        g.base[i] = upstream[i] * omega * cosine;
        g.omega += upstream[i] * m[i] * cosine;
    }
    return g;
}

SineGradients linear_scale_backward(const FusedKernel& base, double omega, const Tensor& upstream) {
    const Tensor& m = base.kernel4d.weights();
    require_same_shape(m, upstream, "linear_scale_backward");
    SineGradients g{omega * upstream, 0.0};
    for (std::size_t i = 0; i < m.size(); ++i) g.omega += upstream[i] * m[i];
    return g;
}

ClockNetGradients clocknet_backward(const ClockNetParams& p, const TaskToken& token, double grad_omega) {
    if (token.p.size() != p.width()) {
        throw ContractViolation("clocknet_backward: token width does not match W_q");
    }
    double pre = 0.0;
    for (std::size_t i = 0; i < p.width(); ++i) pre += p.Wq(0, i) * std::max(0.0, token.p[i]);
    const double t = std::tanh(pre);
    const double grad_pre = grad_omega * p.s * (1.0 - t * t);

    ClockNetGradients g{Tensor::zeros_like(p.Wq), grad_omega * (t + p.c), grad_omega * p.s,
                        Tensor::zeros_like(token.p)};
    for (std::size_t i = 0; i < p.width(); ++i) {
        const bool active = token.p[i] > 0.0;
        g.Wq(0, i) = active ? grad_pre * token.p[i] : 0.0;
        g.p[i] = active ? grad_pre * p.Wq(0, i) : 0.0;
    }
    return g;
}

FuseGradients fuse_backward(const LowRankFactors& f, const MidKernel& mid, const Tensor& grad_fused) {
    const std::size_t m = f.m(), n = f.n(), r = f.r(), k = mid.size();
    if (mid.rank() != r || grad_fused.shape() != Shape{n, m, k, k}) {
        throw ContractViolation("fuse_backward: gradient " + shape_to_string(grad_fused.shape()) +
                                " inconsistent with factors m=" + std::to_string(m) + " n=" + std::to_string(n) +
                                " r=" + std::to_string(r) + " K=" + std::to_string(k));
    }
    FuseGradients g{Tensor::zeros_like(f.A), Tensor::zeros_like(f.B), Tensor::zeros_like(mid.W.weights())};
    Tensor ga({n, r});   // G * A
    Tensor gtb({m, r});  // G^T * B
    for (std::size_t u = 0; u < k; ++u) {
        for (std::size_t v = 0; v < k; ++v) {
            ga.fill(0.0);
            gtb.fill(0.0);
            for (std::size_t o = 0; o < n; ++o)
                for (std::size_t i = 0; i < m; ++i) {
                    const double gv = grad_fused(o, i, u, v);
                    for (std::size_t l = 0; l < r; ++l) {
                        ga(o, l) += gv * f.A(i, l);
                        gtb(i, l) += gv * f.B(o, l);
                    }
                }
            // dB += (G A) W_uv^T ; dW_uv = B^T (G A) ; dA += (G^T B) W_uv
            for (std::size_t o = 0; o < n; ++o)
                for (std::size_t j = 0; j < r; ++j)
                    for (std::size_t l = 0; l < r; ++l) g.B(o, j) += ga(o, l) * mid.W(j, l, u, v);
            for (std::size_t j = 0; j < r; ++j)
                for (std::size_t l = 0; l < r; ++l) {
                    double acc = 0.0;
                    for (std::size_t o = 0; o < n; ++o) acc += f.B(o, j) * ga(o, l);
                    g.W(j, l, u, v) = acc;
                }
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t l = 0; l < r; ++l)
                    for (std::size_t j = 0; j < r; ++j) g.A(i, l) += gtb(i, j) * mid.W(j, l, u, v);
        }
    }
    return g;
}

std::size_t fused_parameter_count(std::size_t m, std::size_t n, std::size_t r, std::size_t kernel_size) {
    return m * r + n * r + r * r * kernel_size * kernel_size;
}

}  // namespace sinewich
