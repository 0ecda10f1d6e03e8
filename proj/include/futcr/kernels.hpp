#pragma once

#include <span>

// Dense kernels behind the segmenter. The default namespace holds the
// OpenMP-parallel versions; `reference` holds plain serial loops kept for
// testing. Both accumulate every output element in the same order, so their
// results agree bit for bit.
namespace futcr::kernels {

struct Conv2dShape {
  int in_channels = 0;
  int in_height = 0;
  int in_width = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  int weight_size() const { return out_channels * in_channels * kernel * kernel; }
  int input_size() const { return in_channels * in_height * in_width; }
  int output_size() const { return out_channels * out_height() * out_width(); }
};

/// out[oc] = bias[oc] + Σ_{ic,ky,kx} w[oc,ic,ky,kx] · in[ic, y·s+ky−p, x·s+kx−p]
void conv2d_forward(const Conv2dShape& s, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);

/// Accumulates into grad_weight / grad_bias; overwrites grad_input unless it is empty.
void conv2d_backward(const Conv2dShape& s, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);

/// C (m×n) = A (m×k) · B (k×n)
void matmul_ab(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n);
/// C (m×n) = A (m×k) · Bᵀ, B stored n×k
void matmul_abt(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n);
/// C (m×n) = Aᵀ · B, A stored k×m, B stored k×n
void matmul_atb(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n);

/// Half-pixel-centred bilinear resize (edge clamped), per channel.
void bilinear_resize(std::span<const double> input, int channels, int in_h, int in_w, std::span<double> output,
                     int out_h, int out_w);
/// Adjoint of bilinear_resize; overwrites grad_input.
void bilinear_resize_backward(std::span<const double> grad_output, int channels, int in_h, int in_w,
                              std::span<double> grad_input, int out_h, int out_w);

/// Block-average downsampling by an integer factor, per channel.
void area_downsample(std::span<const double> input, int channels, int in_h, int in_w, int factor,
                     std::span<double> output);

namespace reference {

void conv2d_forward(const Conv2dShape& s, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output);
void conv2d_backward(const Conv2dShape& s, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias);
void matmul_ab(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n);
void matmul_abt(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n);
void matmul_atb(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n);
void bilinear_resize(std::span<const double> input, int channels, int in_h, int in_w, std::span<double> output,
                     int out_h, int out_w);
void bilinear_resize_backward(std::span<const double> grad_output, int channels, int in_h, int in_w,
                              std::span<double> grad_input, int out_h, int out_w);
void area_downsample(std::span<const double> input, int channels, int in_h, int in_w, int factor,
                     std::span<double> output);

}  // namespace reference

/// Source taps for one output coordinate of bilinear_resize.
struct BilinearTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;  // weight of `hi`
};
BilinearTap bilinear_tap(int out_index, int in_size, int out_size);

}  // namespace futcr::kernels
