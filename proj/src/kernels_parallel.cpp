#include <algorithm>
#include <vector>

#include "futcr/kernels.hpp"

namespace futcr::kernels {

namespace {

// col[r][p] with r = (ic, ky, kx) and p = (oy, ox); zero where the tap falls in the padding.
std::vector<double> im2col(const Conv2dShape& s, std::span<const double> input, bool transposed) {
  const int oh = s.out_height(), ow = s.out_width(), k = s.kernel;
  const int R = s.in_channels * k * k, P = oh * ow;
  std::vector<double> col(static_cast<std::size_t>(R) * static_cast<std::size_t>(P), 0.0);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < R; ++r) {
    const int ic = r / (k * k), ky = (r / k) % k, kx = r % k;
    const double* in = input.data() + static_cast<std::size_t>(ic * s.in_height * s.in_width);
    for (int oy = 0; oy < oh; ++oy) {
      const int iy = oy * s.stride + ky - s.pad;
      if (iy < 0 || iy >= s.in_height) continue;
      for (int ox = 0; ox < ow; ++ox) {
        const int ix = ox * s.stride + kx - s.pad;
        if (ix < 0 || ix >= s.in_width) continue;
        const int p = oy * ow + ox;
        const auto at = transposed ? static_cast<std::size_t>(p) * static_cast<std::size_t>(R) + static_cast<std::size_t>(r)
                                   : static_cast<std::size_t>(r) * static_cast<std::size_t>(P) + static_cast<std::size_t>(p);
        col[at] = in[iy * s.in_width + ix];
      }
    }
  }
  return col;
}

}  // namespace

void conv2d_forward(const Conv2dShape& s, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  const int R = s.in_channels * s.kernel * s.kernel, P = s.out_height() * s.out_width();
  const auto col = im2col(s, input, false);
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < s.out_channels; ++oc) {
    double* out = output.data() + static_cast<std::size_t>(oc) * static_cast<std::size_t>(P);
    std::fill(out, out + P, bias[static_cast<std::size_t>(oc)]);
    for (int r = 0; r < R; ++r) {
      const double w = weight[static_cast<std::size_t>(oc * R + r)];
      const double* c = col.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(P);
      for (int p = 0; p < P; ++p) out[p] += w * c[p];
    }
  }
}

void conv2d_backward(const Conv2dShape& s, std::span<const double> input, std::span<const double> weight,
                     std::span<const double> grad_output, std::span<double> grad_input,
                     std::span<double> grad_weight, std::span<double> grad_bias) {
  const int oh = s.out_height(), ow = s.out_width(), k = s.kernel;
  const int R = s.in_channels * k * k, P = oh * ow;
  const auto colT = im2col(s, input, true);
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < s.out_channels; ++oc) {
    const double* g = grad_output.data() + static_cast<std::size_t>(oc) * static_cast<std::size_t>(P);
    double gb = grad_bias[static_cast<std::size_t>(oc)];
    for (int p = 0; p < P; ++p) gb += g[p];
    grad_bias[static_cast<std::size_t>(oc)] = gb;
    double* gw = grad_weight.data() + static_cast<std::size_t>(oc * R);
    for (int p = 0; p < P; ++p) {
      const double gv = g[p];
      const double* c = colT.data() + static_cast<std::size_t>(p) * static_cast<std::size_t>(R);
      for (int r = 0; r < R; ++r) gw[r] += gv * c[r];
    }
  }
  if (grad_input.empty()) return;
  std::vector<double> gcol(static_cast<std::size_t>(R) * static_cast<std::size_t>(P), 0.0);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < R; ++r) {
    double* gc = gcol.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(P);
    for (int oc = 0; oc < s.out_channels; ++oc) {
      const double w = weight[static_cast<std::size_t>(oc * R + r)];
      const double* g = grad_output.data() + static_cast<std::size_t>(oc) * static_cast<std::size_t>(P);
      for (int p = 0; p < P; ++p) gc[p] += w * g[p];
    }
  }
#pragma omp parallel for schedule(static)
  for (int ic = 0; ic < s.in_channels; ++ic) {
    double* gin = grad_input.data() + static_cast<std::size_t>(ic * s.in_height * s.in_width);
    std::fill(gin, gin + s.in_height * s.in_width, 0.0);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* gc = gcol.data() + static_cast<std::size_t>((ic * k + ky) * k + kx) * static_cast<std::size_t>(P);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride + ky - s.pad;
          if (iy < 0 || iy >= s.in_height) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride + kx - s.pad;
            if (ix < 0 || ix >= s.in_width) continue;
            gin[iy * s.in_width + ix] += gc[oy * ow + ox];
          }
        }
      }
  }
}

void matmul_ab(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* ci = c.data() + static_cast<std::size_t>(i * n);
    std::fill(ci, ci + n, 0.0);
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<std::size_t>(i * k + p)];
      const double* bp = b.data() + static_cast<std::size_t>(p * n);
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_abt(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    const double* ai = a.data() + static_cast<std::size_t>(i * k);
    for (int j = 0; j < n; ++j) {
      const double* bj = b.data() + static_cast<std::size_t>(j * k);
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[static_cast<std::size_t>(i * n + j)] = acc;
    }
  }
}

void matmul_atb(std::span<const double> a, std::span<const double> b, std::span<double> c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < m; ++i) {
    double* ci = c.data() + static_cast<std::size_t>(i * n);
    std::fill(ci, ci + n, 0.0);
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<std::size_t>(p * m + i)];
      const double* bp = b.data() + static_cast<std::size_t>(p * n);
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void bilinear_resize(std::span<const double> input, int channels, int in_h, int in_w, std::span<double> output,
                     int out_h, int out_w) {
  std::vector<BilinearTap> tx(static_cast<std::size_t>(out_w));
  for (int x = 0; x < out_w; ++x) tx[static_cast<std::size_t>(x)] = bilinear_tap(x, in_w, out_w);
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < channels; ++ch) {
    const double* plane = input.data() + static_cast<std::size_t>(ch * in_h * in_w);
    for (int y = 0; y < out_h; ++y) {
      const auto ty = bilinear_tap(y, in_h, out_h);
      double* orow = output.data() + static_cast<std::size_t>((ch * out_h + y) * out_w);
      for (int x = 0; x < out_w; ++x) {
        const auto& t = tx[static_cast<std::size_t>(x)];
        const double top = (1.0 - t.frac) * plane[ty.lo * in_w + t.lo] + t.frac * plane[ty.lo * in_w + t.hi];
        const double bot = (1.0 - t.frac) * plane[ty.hi * in_w + t.lo] + t.frac * plane[ty.hi * in_w + t.hi];
        orow[x] = (1.0 - ty.frac) * top + ty.frac * bot;
      }
    }
  }
}

void bilinear_resize_backward(std::span<const double> grad_output, int channels, int in_h, int in_w,
                              std::span<double> grad_input, int out_h, int out_w) {
  std::vector<BilinearTap> tx(static_cast<std::size_t>(out_w));
  for (int x = 0; x < out_w; ++x) tx[static_cast<std::size_t>(x)] = bilinear_tap(x, in_w, out_w);
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < channels; ++ch) {
    double* plane = grad_input.data() + static_cast<std::size_t>(ch * in_h * in_w);
    std::fill(plane, plane + in_h * in_w, 0.0);
    for (int y = 0; y < out_h; ++y) {
      const auto ty = bilinear_tap(y, in_h, out_h);
      const double* grow = grad_output.data() + static_cast<std::size_t>((ch * out_h + y) * out_w);
      for (int x = 0; x < out_w; ++x) {
        const auto& t = tx[static_cast<std::size_t>(x)];
        const double g = grow[x];
        const double gt = (1.0 - ty.frac) * g, gb = ty.frac * g;
        plane[ty.lo * in_w + t.lo] += (1.0 - t.frac) * gt;
        plane[ty.lo * in_w + t.hi] += t.frac * gt;
        plane[ty.hi * in_w + t.lo] += (1.0 - t.frac) * gb;
        plane[ty.hi * in_w + t.hi] += t.frac * gb;
      }
    }
  }
}

void area_downsample(std::span<const double> input, int channels, int in_h, int in_w, int factor,
                     std::span<double> output) {
  const int oh = in_h / factor, ow = in_w / factor;
  const double inv = 1.0 / (factor * factor);
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < channels; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy) {
          const double* row = input.data() + static_cast<std::size_t>((ch * in_h + y * factor + dy) * in_w + x * factor);
          for (int dx = 0; dx < factor; ++dx) acc += row[dx];
        }
        output[static_cast<std::size_t>((ch * oh + y) * ow + x)] = acc * inv;
      }
}

}  // namespace futcr::kernels
