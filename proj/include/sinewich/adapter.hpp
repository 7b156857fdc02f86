#pragma once

#include <cstddef>
#include <optional>

#include "sinewich/tensor.hpp"

namespace sinewich {

/// LoRA factors A [m,r] (input side) and B [n,r] (output side), r <= min(m,n).
struct LowRankFactors {
    Tensor A;
    Tensor B;

    LowRankFactors() = default;
    LowRankFactors(Tensor a, Tensor b);

    std::size_t m() const { return A.dim(0); }
    std::size_t n() const { return B.dim(0); }
    std::size_t r() const { return A.dim(1); }
};

/// Spatial kernel [r,r,Kw,Kw] acting on the rank channels between A and B.
struct MidKernel {
    ConvKernel W;

    MidKernel() = default;
    explicit MidKernel(ConvKernel w);

    std::size_t rank() const { return W.out_channels(); }
    std::size_t size() const { return W.kh(); }
};

/// Reshape helpers for [n,m,Kw,Kw] kernels and their [m, n*Kw*Kw] matrix view.
/// The view places input channel i on row i and output channel o, tap (u,v)
/// on column (o*Kw + u)*Kw + v.
Tensor to_matrix_view(const ConvKernel& kernel);
ConvKernel from_matrix_view(const Tensor& view, std::size_t out_channels, std::size_t kernel_size);

/// The shared base M_AWB: a single convolution from m input to n output channels.
struct FusedKernel {
    ConvKernel kernel4d;

    Tensor matrix_view() const { return to_matrix_view(kernel4d); }
};

struct FilterSpec {
    int size = 7;
    double sigma = 1.0;

    friend bool operator==(const FilterSpec&, const FilterSpec&) = default;
};

/// A task-specific kernel derived from a FusedKernel, with the frequency and
/// filter that produced it.
struct ModulatedKernel {
    ConvKernel kernel;
    double omega = 0.0;
    std::optional<FilterSpec> filter;
};

/// Clock Net weights: a single-output linear map W_q [1,C], scale s and offset c.
struct ClockNetParams {
    Tensor Wq;
    double s = 1.0;
    double c = 1.0;

    ClockNetParams(Tensor wq, double scale, double offset);

    std::size_t width() const { return Wq.dim(1); }
};

struct TaskToken {
    Tensor p;  // [C]
    std::size_t task_id = 0;
};

/// Per tap (u,v): kernel4d[:,:,u,v] = B * W[:,:,u,v] * A^T.
FusedKernel fuse_awb(const LowRankFactors& factors, const MidKernel& mid);

/// Reference three-stage path: per-pixel projection by A^T, spatial conv by W,
/// per-pixel expansion by B. x is [m,H,W]; the result is [n,H,W].
Tensor pipeline_apply(const LowRankFactors& factors, const MidKernel& mid, const Tensor& x);

ModulatedKernel sine_modulate(const FusedKernel& base, double omega);
ModulatedKernel linear_scale(const FusedKernel& base, double omega);

/// Gaussian smoothing of the kernel's matrix view with zero "same" padding.
ModulatedKernel lowpass_filter(const ModulatedKernel& mk, int size, double sigma);
/// Adjoint of the low-pass filter applied to a gradient with the kernel's shape.
Tensor lowpass_backward(const Tensor& grad_filtered, int size, double sigma);

/// omega = s * (tanh(W_q relu(p)) + c)
double clocknet_forward(const ClockNetParams& params, const TaskToken& token);

struct SineGradients {
    Tensor base;
    double omega = 0.0;
};

/// Gradients of sum(upstream * sin(omega * base)).
SineGradients sine_backward(const FusedKernel& base, double omega, const Tensor& upstream);
/// Gradients of sum(upstream * omega * base).
SineGradients linear_scale_backward(const FusedKernel& base, double omega, const Tensor& upstream);

struct ClockNetGradients {
    Tensor Wq;
    double s = 0.0;
    double c = 0.0;
    Tensor p;
};

ClockNetGradients clocknet_backward(const ClockNetParams& params, const TaskToken& token, double grad_omega);

struct FuseGradients {
    Tensor A;
    Tensor B;
    Tensor W;
};

FuseGradients fuse_backward(const LowRankFactors& factors, const MidKernel& mid, const Tensor& grad_fused);

/// Trainable parameter count behind one fused kernel: mr + nr + r^2 Kw^2.
std::size_t fused_parameter_count(std::size_t m, std::size_t n, std::size_t r, std::size_t kernel_size);

}  // namespace sinewich
