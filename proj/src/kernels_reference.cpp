#include <algorithm>
#include <cmath>

#include "futcr/kernels.hpp"

namespace futcr::kernels {

BilinearTap bilinear_tap(int out_index, int in_size, int out_size) {
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  double src = (out_index + 0.5) * scale - 0.5;
  if (src < 0.0) src = 0.0;
  BilinearTap t;
  t.lo = std::min(static_cast<int>(std::floor(src)), in_size - 1);
  t.hi = std::min(t.lo + 1, in_size - 1);
  t.frac = src - t.lo;
  return t;
}

namespace reference {

void conv2d_forward(const Conv2dShape& s, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  const int oh = s.out_height(), ow = s.out_width(), k = s.kernel;
  for (int oc = 0; oc < s.out_channels; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias[static_cast<std::size_t>(oc)];
        for (int ic = 0; ic < s.in_channels; ++ic)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * s.stride + ky - s.pad, ix = ox * s.stride + kx - s.pad;
              if (iy < 0 || iy >= s.in_height || ix < 0 || ix >= s.in_width) continue;
              acc += weight[static_cast<std::size_t>(((oc * s.in_channels + ic) * k + ky) * k + kx)] *
                     input[static_cast<std::size_t>((ic * s.in_height + iy) * s.in_width + ix)];
            }
        output[static_cast<std::size_t>((oc * oh + oy) * ow + ox)] = acc;
      }
}

void conv2d_backward(const Conv2dShape& s, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  const int oh = s.out_height(), ow = s.out_width(), k = s.kernel;
  for (int oc = 0; oc < s.out_channels; ++oc) {
    double gb = grad_bias[static_cast<std::size_t>(oc)];
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) gb += grad_output[static_cast<std::size_t>((oc * oh + oy) * ow + ox)];
    grad_bias[static_cast<std::size_t>(oc)] = gb;
    for (int ic = 0; ic < s.in_channels; ++ic)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double gw = grad_weight[static_cast<std::size_t>(((oc * s.in_channels + ic) * k + ky) * k + kx)];
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * s.stride + ky - s.pad;
            if (iy < 0 || iy >= s.in_height) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * s.stride + kx - s.pad;
              if (ix < 0 || ix >= s.in_width) continue;
              gw += grad_output[static_cast<std::size_t>((oc * oh + oy) * ow + ox)] *
                    input[static_cast<std::size_t>((ic * s.in_height + iy) * s.in_width + ix)];
            }
          }
          grad_weight[static_cast<std::size_t>(((oc * s.in_channels + ic) * k + ky) * k + kx)] = gw;
        }
  }
  if (grad_input.empty()) return;
  for (int ic = 0; ic < s.in_channels; ++ic)
    for (int iy = 0; iy < s.in_height; ++iy)
      for (int ix = 0; ix < s.in_width; ++ix) {
        // per tap, the sum over output channels is formed first
        double acc = 0.0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int ty = iy + s.pad - ky, tx = ix + s.pad - kx;
            if (ty < 0 || tx < 0 || ty % s.stride != 0 || tx % s.stride != 0) continue;
            const int oy = ty / s.stride, ox = tx / s.stride;
            if (oy >= oh || ox >= ow) continue;
            double tap = 0.0;
            for (int oc = 0; oc < s.out_channels; ++oc)
              tap += weight[static_cast<std::size_t>(((oc * s.in_channels + ic) * k + ky) * k + kx)] *
                     grad_output[static_cast<std::size_t>((oc * oh + oy) * ow + ox)];
            acc += tap;
          }
        grad_input[static_cast<std::size_t>((ic * s.in_height + iy) * s.in_width + ix)] = acc;
      }
}

void matmul_ab(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(i * k + p)] * b[static_cast<std::size_t>(p * n + j)];
      c[static_cast<std::size_t>(i * n + j)] = acc;
    }
}

void matmul_abt(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(i * k + p)] * b[static_cast<std::size_t>(j * k + p)];
      c[static_cast<std::size_t>(i * n + j)] = acc;
    }
}

void matmul_atb(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a[static_cast<std::size_t>(p * m + i)] * b[static_cast<std::size_t>(p * n + j)];
      c[static_cast<std::size_t>(i * n + j)] = acc;
    }
}

void bilinear_resize(std::span<const double> input, int channels, int in_h, int in_w, std::span<double> output,
                     int out_h, int out_w) {
  for (int ch = 0; ch < channels; ++ch)
    for (int y = 0; y < out_h; ++y) {
      const auto ty = bilinear_tap(y, in_h, out_h);
      for (int x = 0; x < out_w; ++x) {
        const auto tx = bilinear_tap(x, in_w, out_w);
        const double* plane = input.data() + static_cast<std::size_t>(ch * in_h * in_w);
        const double top = (1.0 - tx.frac) * plane[ty.lo * in_w + tx.lo] + tx.frac * plane[ty.lo * in_w + tx.hi];
        const double bot = (1.0 - tx.frac) * plane[ty.hi * in_w + tx.lo] + tx.frac * plane[ty.hi * in_w + tx.hi];
        output[static_cast<std::size_t>((ch * out_h + y) * out_w + x)] = (1.0 - ty.frac) * top + ty.frac * bot;
      }
    }
}

void bilinear_resize_backward(std::span<const double> grad_output, int channels, int in_h, int in_w,
                              std::span<double> grad_input, int out_h, int out_w) {
  std::fill(grad_input.begin(), grad_input.begin() + static_cast<std::ptrdiff_t>(channels * in_h * in_w), 0.0);
  for (int ch = 0; ch < channels; ++ch)
    for (int y = 0; y < out_h; ++y) {
      const auto ty = bilinear_tap(y, in_h, out_h);
      for (int x = 0; x < out_w; ++x) {
        const auto tx = bilinear_tap(x, in_w, out_w);
        double* plane = grad_input.data() + static_cast<std::size_t>(ch * in_h * in_w);
        const double g = grad_output[static_cast<std::size_t>((ch * out_h + y) * out_w + x)];
        const double gt = (1.0 - ty.frac) * g, gb = ty.frac * g;
        plane[ty.lo * in_w + tx.lo] += (1.0 - tx.frac) * gt;
        plane[ty.lo * in_w + tx.hi] += tx.frac * gt;
        plane[ty.hi * in_w + tx.lo] += (1.0 - tx.frac) * gb;
        plane[ty.hi * in_w + tx.hi] += tx.frac * gb;
      }
    }
}

void area_downsample(std::span<const double> input, int channels, int in_h, int in_w, int factor,
                     std::span<double> output) {
  const int oh = in_h / factor, ow = in_w / factor;
  const double inv = 1.0 / (factor * factor);
  for (int ch = 0; ch < channels; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx)
            acc += input[static_cast<std::size_t>((ch * in_h + y * factor + dy) * in_w + x * factor + dx)];
        output[static_cast<std::size_t>((ch * oh + y) * ow + x)] = acc * inv;
      }
}

}  // namespace reference
}  // namespace futcr::kernels
