#pragma once

// Single-sample forward/backward over a NetworkSpec with reusable buffers.
// Not thread-safe; give each thread its own Engine.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "civiclens/model.hpp"

namespace civiclens::model::detail {

template <typename T>
class Engine {
 public:
  explicit Engine(const NetworkSpec& spec) : spec_(spec), shapes_{spec.input_shape()} {
    for (const auto& s : spec.propagate()) shapes_.push_back(s);
    const std::size_t n = spec.layers.size();
    act_.resize(n + 1);
    col_.resize(n);
    arg_.resize(n);
    std::size_t widest = 0;
    for (std::size_t i = 0; i <= n; ++i) {
      act_[i].assign(shapes_[i].size(), T(0));
      widest = std::max(widest, shapes_[i].size());
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (const auto* c = std::get_if<ConvLayer>(&spec.layers[i])) {
        const std::size_t k = static_cast<std::size_t>(shapes_[i].c) * c->kernel * c->kernel;
        const std::size_t p = static_cast<std::size_t>(shapes_[i + 1].h) * shapes_[i + 1].w;
        col_[i].assign(k * p, T(0));
        dcol_size_ = std::max(dcol_size_, k * p);
      } else if (std::holds_alternative<MaxPoolLayer>(spec.layers[i])) {
        arg_[i].assign(shapes_[i + 1].size(), 0);
      }
    }
    g_a_.assign(widest, T(0));
    g_b_.assign(widest, T(0));
    dcol_.assign(dcol_size_, T(0));
  }

  const std::vector<Shape>& shapes() const noexcept { return shapes_; }
  std::span<const T> output() const noexcept { return act_.back(); }
  std::span<const T> activation(std::size_t i) const noexcept { return act_[i]; }

  /// Returns the softmax output (size 3).
  std::span<const T> run(const Parameters<T>& params, std::span<const T> input) {
    std::copy(input.begin(), input.end(), act_[0].begin());
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      const Shape& in = shapes_[i];
      const Shape& out = shapes_[i + 1];
      const T* x = act_[i].data();
      T* y = act_[i + 1].data();
      const LayerSpec& layer = spec_.layers[i];
      if (const auto* c = std::get_if<ConvLayer>(&layer)) {
        conv_forward(*c, in, out, params.layers[i], x, col_[i].data(), y);
      } else if (const auto* mp = std::get_if<MaxPoolLayer>(&layer)) {
        pool_forward(*mp, in, out, x, arg_[i].data(), y);
      } else if (std::holds_alternative<FlattenLayer>(layer)) {
        std::copy(x, x + in.size(), y);
      } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
        dense_forward(*d, in.size(), params.layers[i], x, y);
      } else {
        softmax(x, y, out.size());
      }
    }
    return act_.back();
  }

  /// Cross-entropy of the last run against label, from the logits via
  /// log-sum-exp in double: finite for any finite logits, so only a real
  /// blow-up (inf/NaN weights) reads as divergence.
  double loss(int label) const noexcept {
    const auto& z = act_[act_.size() - 2];
    double m = z[0];
    for (std::size_t k = 1; k < z.size(); ++k) m = std::max(m, static_cast<double>(z[k]));
    double sum = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) sum += std::exp(static_cast<double>(z[k]) - m);
    return m + std::log(sum) - static_cast<double>(z[static_cast<std::size_t>(label)]);
  }

  /// Adds d(loss)/d(params) for the last run into grads.
  void backward(const Parameters<T>& params, int label, Parameters<T>& grads) {
    const std::size_t n = spec_.layers.size();
    // Softmax + cross-entropy: gradient w.r.t. logits is p - onehot.
    std::size_t last = n - 1;
    T* g = g_a_.data();
    T* g_next = g_b_.data();
    {
      const auto& p = act_[n];
      for (std::size_t k = 0; k < p.size(); ++k) g[k] = p[k] - (static_cast<int>(k) == label ? T(1) : T(0));
    }
    for (std::size_t ii = last; ii-- > 0;) {
      const Shape& in = shapes_[ii];
      const Shape& out = shapes_[ii + 1];
      const LayerSpec& layer = spec_.layers[ii];
      const bool need_input_grad = ii > 0;
      if (const auto* c = std::get_if<ConvLayer>(&layer)) {
        if (c->relu) relu_mask(g, act_[ii + 1].data(), out.size());
        conv_backward(*c, in, out, params.layers[ii], grads.layers[ii], col_[ii].data(), g,
                      need_input_grad ? g_next : nullptr);
      } else if (std::holds_alternative<MaxPoolLayer>(layer)) {
        if (need_input_grad) {
          std::fill(g_next, g_next + in.size(), T(0));
          const auto* arg = arg_[ii].data();
          for (std::size_t j = 0; j < out.size(); ++j) g_next[arg[j]] += g[j];
        }
      } else if (std::holds_alternative<FlattenLayer>(layer)) {
        if (need_input_grad) std::copy(g, g + in.size(), g_next);
      } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
        if (d->relu) relu_mask(g, act_[ii + 1].data(), out.size());
        dense_backward(*d, in.size(), params.layers[ii], grads.layers[ii], act_[ii].data(), g,
                       need_input_grad ? g_next : nullptr);
      }
      std::swap(g, g_next);
    }
  }

 private:
  static void relu_mask(T* g, const T* y, std::size_t n) noexcept {
    for (std::size_t k = 0; k < n; ++k) g[k] = y[k] > T(0) ? g[k] : T(0);
  }

  static void softmax(const T* z, T* p, std::size_t n) noexcept {
    T m = z[0];
    for (std::size_t k = 1; k < n; ++k) m = std::max(m, z[k]);
    T sum = 0;
    for (std::size_t k = 0; k < n; ++k) {
      p[k] = std::exp(z[k] - m);
      sum += p[k];
    }
    for (std::size_t k = 0; k < n; ++k) p[k] /= sum;
  }

  // Output columns [lo, hi) whose input column ox*stride - pad + kx is in range.
  static std::pair<int, int> valid_range(int kx, int pad, int stride, int in_w, int out_w) noexcept {
    int lo = 0;
    while (lo < out_w && lo * stride - pad + kx < 0) ++lo;
    int hi = out_w;
    while (hi > lo && (hi - 1) * stride - pad + kx >= in_w) --hi;
    return {lo, hi};
  }

  static void im2col(const ConvLayer& c, const Shape& in, const Shape& out, const T* x, T* col) noexcept {
    const int k = c.kernel;
    const std::size_t plane = static_cast<std::size_t>(out.h) * out.w;
    for (int ch = 0; ch < in.c; ++ch) {
      const T* src = x + static_cast<std::size_t>(ch) * in.h * in.w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          T* row = col + ((static_cast<std::size_t>(ch) * k + ky) * k + kx) * plane;
          const auto [lo, hi] = valid_range(kx, c.padding, c.stride, in.w, out.w);
          for (int oy = 0; oy < out.h; ++oy) {
            const int iy = oy * c.stride - c.padding + ky;
            T* dst = row + static_cast<std::size_t>(oy) * out.w;
            if (iy < 0 || iy >= in.h || lo >= hi) {
              std::fill(dst, dst + out.w, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(iy) * in.w - c.padding + kx;
            std::fill(dst, dst + lo, T(0));
            if (c.stride == 1) {
              std::copy(srow + lo, srow + hi, dst + lo);
            } else {
              for (int ox = lo; ox < hi; ++ox) dst[ox] = srow[ox * c.stride];
            }
            std::fill(dst + hi, dst + out.w, T(0));
          }
        }
      }
    }
  }

  static void col2im_add(const ConvLayer& c, const Shape& in, const Shape& out, const T* col, T* dx) noexcept {
    const int k = c.kernel;
    const std::size_t plane = static_cast<std::size_t>(out.h) * out.w;
    std::fill(dx, dx + in.size(), T(0));
    for (int ch = 0; ch < in.c; ++ch) {
      T* dst = dx + static_cast<std::size_t>(ch) * in.h * in.w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const T* row = col + ((static_cast<std::size_t>(ch) * k + ky) * k + kx) * plane;
          const auto [lo, hi] = valid_range(kx, c.padding, c.stride, in.w, out.w);
          for (int oy = 0; oy < out.h; ++oy) {
            const int iy = oy * c.stride - c.padding + ky;
            if (iy < 0 || iy >= in.h) continue;
            T* __restrict drow = dst + static_cast<std::size_t>(iy) * in.w - c.padding + kx;
            const T* __restrict srow = row + static_cast<std::size_t>(oy) * out.w;
            if (c.stride == 1) {
              for (int ox = lo; ox < hi; ++ox) drow[ox] += srow[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) drow[ox * c.stride] += srow[ox];
            }
          }
        }
      }
    }
  }

  template <typename M>
  using RowMap = Eigen::Map<M, Eigen::Unaligned>;
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

  static void conv_forward(const ConvLayer& c, const Shape& in, const Shape& out, const LayerParams<T>& p, const T* x,
                           T* col, T* y) {
    im2col(c, in, out, x, col);
    const Eigen::Index kk = static_cast<Eigen::Index>(in.c) * c.kernel * c.kernel;
    const Eigen::Index plane = static_cast<Eigen::Index>(out.h) * out.w;
    RowMap<const Mat> w(p.weights.data(), out.c, kk);
    RowMap<const Mat> cols(col, kk, plane);
    RowMap<Mat> dst(y, out.c, plane);
    dst.noalias() = w * cols;
    for (Eigen::Index oc = 0; oc < out.c; ++oc) {
      dst.row(oc).array() += p.bias[oc];
      if (c.relu) dst.row(oc) = dst.row(oc).cwiseMax(T(0));
    }
  }

  void conv_backward(const ConvLayer& c, const Shape& in, const Shape& out, const LayerParams<T>& p,
                     LayerParams<T>& gp, const T* col, const T* gy, T* gx) {
    const Eigen::Index kk = static_cast<Eigen::Index>(in.c) * c.kernel * c.kernel;
    const Eigen::Index plane = static_cast<Eigen::Index>(out.h) * out.w;
    RowMap<const Mat> g(gy, out.c, plane);
    RowMap<const Mat> cols(col, kk, plane);
    RowMap<Mat> gw(gp.weights.data(), out.c, kk);
    RowMap<Vec> gb(gp.bias.data(), out.c);
    gw.noalias() += g * cols.transpose();
    gb += g.rowwise().sum();
    if (gx == nullptr) return;
    RowMap<const Mat> w(p.weights.data(), out.c, kk);
    RowMap<Mat> dcol(dcol_.data(), kk, plane);
    dcol.noalias() = w.transpose() * g;
    col2im_add(c, in, out, dcol_.data(), gx);
  }

  static void pool_forward(const MaxPoolLayer& mp, const Shape& in, const Shape& out, const T* x,
                           std::uint32_t* arg, T* y) noexcept {
    if (mp.window == 2 && mp.stride == 2) {
      pool2_forward(in, out, x, arg, y);
      return;
    }
    for (int ch = 0; ch < in.c; ++ch) {
      const std::size_t base = static_cast<std::size_t>(ch) * in.h * in.w;
      for (int oy = 0; oy < out.h; ++oy) {
        const std::size_t o_row = (static_cast<std::size_t>(ch) * out.h + oy) * out.w;
        for (int ox = 0; ox < out.w; ++ox) {
          const std::size_t corner = base + static_cast<std::size_t>(oy * mp.stride) * in.w + ox * mp.stride;
          std::size_t best = corner;
          T m = x[best];
          for (int dy = 0; dy < mp.window; ++dy) {
            const std::size_t r = corner + static_cast<std::size_t>(dy) * in.w;
            for (int dx = 0; dx < mp.window; ++dx) {
              if (x[r + dx] > m) {
                m = x[r + dx];
                best = r + dx;
              }
            }
          }
          y[o_row + ox] = m;
          arg[o_row + ox] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }

  // Same tie rule as the generic path (first maximum in row-major order), but
  // branch-free so it vectorizes.
  static void pool2_forward(const Shape& in, const Shape& out, const T* x, std::uint32_t* arg, T* y) noexcept {
    for (int ch = 0; ch < in.c; ++ch) {
      const std::size_t base = static_cast<std::size_t>(ch) * in.h * in.w;
      for (int oy = 0; oy < out.h; ++oy) {
        const std::size_t top = base + static_cast<std::size_t>(2 * oy) * in.w;
        const T* r0 = x + top;
        const T* r1 = r0 + in.w;
        T* yo = y + (static_cast<std::size_t>(ch) * out.h + oy) * out.w;
        std::uint32_t* ao = arg + (static_cast<std::size_t>(ch) * out.h + oy) * out.w;
        const auto t0 = static_cast<std::uint32_t>(top);
        const auto t1 = static_cast<std::uint32_t>(top + in.w);
        for (int ox = 0; ox < out.w; ++ox) {
          const T a = r0[2 * ox], b = r0[2 * ox + 1], c = r1[2 * ox], d = r1[2 * ox + 1];
          const bool pb = b > a;
          const T ab = pb ? b : a;
          const std::uint32_t iab = t0 + 2 * ox + (pb ? 1u : 0u);
          const bool pd = d > c;
          const T cd = pd ? d : c;
          const std::uint32_t icd = t1 + 2 * ox + (pd ? 1u : 0u);
          const bool low = cd > ab;
          yo[ox] = low ? cd : ab;
          ao[ox] = low ? icd : iab;
        }
      }
    }
  }

  static void dense_forward(const DenseLayer& d, std::size_t n, const LayerParams<T>& p, const T* x, T* y) {
    const auto cols = static_cast<Eigen::Index>(n);
    RowMap<const Mat> w(p.weights.data(), d.units, cols);
    RowMap<const Vec> xv(x, cols);
    RowMap<const Vec> b(p.bias.data(), d.units);
    RowMap<Vec> yv(y, d.units);
    yv.noalias() = w * xv;
    yv += b;
    if (d.relu) yv = yv.cwiseMax(T(0));
  }

  static void dense_backward(const DenseLayer& d, std::size_t n, const LayerParams<T>& p, LayerParams<T>& gp,
                             const T* x, const T* gy, T* gx) {
    const auto cols = static_cast<Eigen::Index>(n);
    RowMap<const Vec> g(gy, d.units);
    RowMap<const Vec> xv(x, cols);
    RowMap<Mat> gw(gp.weights.data(), d.units, cols);
    RowMap<Vec> gb(gp.bias.data(), d.units);
    gw.noalias() += g * xv.transpose();
    gb += g;
    if (gx == nullptr) return;
    RowMap<const Mat> w(p.weights.data(), d.units, cols);
    RowMap<Vec> gxv(gx, cols);
    gxv.noalias() = w.transpose() * g;
  }

  const NetworkSpec& spec_;
  std::vector<Shape> shapes_;
  std::vector<std::vector<T>> act_;
  std::vector<std::vector<T>> col_;
  std::vector<std::vector<std::uint32_t>> arg_;
  std::vector<T> g_a_, g_b_, dcol_;
  std::size_t dcol_size_ = 0;
};

}  // namespace civiclens::model::detail
