#pragma once

#include <cmath>
#include <string>

#include "ctphase/common/rng.hpp"
#include "ctphase/nn/feature_map.hpp"

namespace ctphase {

// Layers follow an explicit forward/backward discipline: forward fills a
// per-call Ctx with whatever backward needs, backward ACCUMULATES parameter
// gradients (so a weight-shared second pass adds up) and returns the input
// gradient.  Everything is templated on the scalar so gradient checks can run
// the exact same code in double.

// ---------------------------------------------------------------------------
// SiLU (x * sigmoid(x)), the activation used throughout.

template <typename S>
struct Silu {
  template <typename M>
  static M forward(const M& x) {
    return (x.array() * ((-x.array()).exp() + S(1)).inverse()).matrix();
  }
  // d/dx = sig * (1 + x * (1 - sig))
  template <typename M>
  static M backward(const M& dy, const M& x_saved) {
    auto sig = ((-x_saved.array()).exp() + S(1)).inverse();
    return (dy.array() * sig * (S(1) + x_saved.array() * (S(1) - sig)))
        .matrix();
  }
};

// ---------------------------------------------------------------------------
// Same-size 2D convolution (odd kernel, stride 1) via im2col + GEMM.

template <typename S>
class Conv2D {
 public:
  Conv2D(int in_ch, int out_ch, int ksize)
      : in_ch_(in_ch),
        out_ch_(out_ch),
        k_(ksize),
        pad_((ksize - 1) / 2),
        W(MatX<S>::Zero(out_ch, in_ch * ksize * ksize)),
        b(VecX<S>::Zero(out_ch)),
        gW(MatX<S>::Zero(out_ch, in_ch * ksize * ksize)),
        gb(VecX<S>::Zero(out_ch)) {
    if (ksize % 2 == 0 || ksize < 1) {
      throw ConfigError("conv kernel size must be odd and positive");
    }
  }

  void init_he(Rng& rng) {
    const double stddev = std::sqrt(2.0 / (in_ch_ * k_ * k_));
    for (Eigen::Index i = 0; i < W.size(); ++i) {
      W.data()[i] = static_cast<S>(rng.normal(0.0, stddev));
    }
    b.setZero();
  }

  struct Ctx {
    typename FeatureMap<S>::Mat cols;
    int h = 0, w = 0;
  };

  FeatureMap<S> forward(const FeatureMap<S>& x, Ctx& ctx) const {
    if (x.channels() != in_ch_) {
      throw ShapeError("Conv2D: expected " + std::to_string(in_ch_) +
                       " input channels, got " + std::to_string(x.channels()));
    }
    ctx.h = x.h;
    ctx.w = x.w;
    im2col(x, ctx.cols);
    FeatureMap<S> y;
    y.h = x.h;
    y.w = x.w;
    y.m.noalias() = W * ctx.cols;
    y.m.colwise() += b;
    return y;
  }

  FeatureMap<S> backward(const FeatureMap<S>& dy, const Ctx& ctx) {
    gW.noalias() += dy.m * ctx.cols.transpose();
    gb += dy.m.rowwise().sum();
    typename FeatureMap<S>::Mat dcols = W.transpose() * dy.m;
    FeatureMap<S> dx(in_ch_, ctx.h, ctx.w);
    col2im(dcols, dx);
    return dx;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".W", W.data(), gW.data(), W.size());
    f(prefix + ".b", b.data(), gb.data(), b.size());
  }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }

  MatX<S> W;
  VecX<S> b;
  MatX<S> gW;
  VecX<S> gb;

 private:
  void im2col(const FeatureMap<S>& x, typename FeatureMap<S>::Mat& cols) const {
    const int H = x.h, Wd = x.w;
    cols.setZero(in_ch_ * k_ * k_, H * Wd);
    for (int c = 0; c < in_ch_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const int r = (c * k_ + ky) * k_ + kx;
          // Valid output-x range for this kernel column.
          const int x0 = std::max(0, pad_ - kx);
          const int x1 = std::min(Wd, Wd + pad_ - kx);
          if (x1 <= x0) continue;
          const int len = x1 - x0;
          for (int yy = 0; yy < H; ++yy) {
            const int sy = yy + ky - pad_;
            if (sy < 0 || sy >= H) continue;
            const int sx0 = x0 + kx - pad_;
            cols.row(r).segment(yy * Wd + x0, len) =
                x.m.row(c).segment(sy * Wd + sx0, len);
          }
        }
      }
    }
  }

  void col2im(const typename FeatureMap<S>::Mat& dcols,
              FeatureMap<S>& dx) const {
    const int H = dx.h, Wd = dx.w;
    dx.m.setZero();
    for (int c = 0; c < in_ch_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const int r = (c * k_ + ky) * k_ + kx;
          const int x0 = std::max(0, pad_ - kx);
          const int x1 = std::min(Wd, Wd + pad_ - kx);
          if (x1 <= x0) continue;
          const int len = x1 - x0;
          for (int yy = 0; yy < H; ++yy) {
            const int sy = yy + ky - pad_;
            if (sy < 0 || sy >= H) continue;
            const int sx0 = x0 + kx - pad_;
            dx.m.row(c).segment(sy * Wd + sx0, len) +=
                dcols.row(r).segment(yy * Wd + x0, len);
          }
        }
      }
    }
  }

  int in_ch_, out_ch_, k_, pad_;
};

// ---------------------------------------------------------------------------
// Fully connected layer on vectors.

template <typename S>
class Linear {
 public:
  Linear(int in_dim, int out_dim)
      : W(MatX<S>::Zero(out_dim, in_dim)),
        b(VecX<S>::Zero(out_dim)),
        gW(MatX<S>::Zero(out_dim, in_dim)),
        gb(VecX<S>::Zero(out_dim)) {}

  void init_he(Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(W.cols()));
    for (Eigen::Index i = 0; i < W.size(); ++i) {
      W.data()[i] = static_cast<S>(rng.normal(0.0, stddev));
    }
    b.setZero();
  }

  struct Ctx {
    VecX<S> x;
  };

  VecX<S> forward(const VecX<S>& x, Ctx& ctx) const {
    if (x.size() != W.cols()) {
      throw ShapeError("Linear: input size mismatch");
    }
    ctx.x = x;
    return W * x + b;
  }

  VecX<S> backward(const VecX<S>& dy, const Ctx& ctx) {
    gW.noalias() += dy * ctx.x.transpose();
    gb += dy;
    return W.transpose() * dy;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".W", W.data(), gW.data(), W.size());
    f(prefix + ".b", b.data(), gb.data(), b.size());
  }

  MatX<S> W;
  VecX<S> b;
  MatX<S> gW;
  VecX<S> gb;
};

// ---------------------------------------------------------------------------
// Learned lookup table (phase embeddings).

template <typename S>
class Embedding {
 public:
  Embedding(int n_items, int dim)
      : W(MatX<S>::Zero(n_items, dim)), gW(MatX<S>::Zero(n_items, dim)) {}

  void init_normal(Rng& rng, double stddev) {
    for (Eigen::Index i = 0; i < W.size(); ++i) {
      W.data()[i] = static_cast<S>(rng.normal(0.0, stddev));
    }
  }

  VecX<S> forward(int index) const {
    if (index < 0 || index >= W.rows()) {
      throw LookupError("embedding index out of range");
    }
    return W.row(index).transpose();
  }

  void backward(int index, const VecX<S>& d) {
    gW.row(index) += d.transpose();
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".W", W.data(), gW.data(), W.size());
  }

  MatX<S> W;
  MatX<S> gW;
};

// ---------------------------------------------------------------------------
// 2x2 average pooling (halves both spatial dims; input dims must be even).

template <typename S>
struct AvgPool2x2 {
  static FeatureMap<S> forward(const FeatureMap<S>& x) {
    if (x.h % 2 != 0 || x.w % 2 != 0) {
      throw ShapeError("AvgPool2x2: dims must be even");
    }
    FeatureMap<S> y(x.channels(), x.h / 2, x.w / 2);
    for (int c = 0; c < x.channels(); ++c) {
      for (int oy = 0; oy < y.h; ++oy) {
        for (int ox = 0; ox < y.w; ++ox) {
          const int p0 = (2 * oy) * x.w + 2 * ox;
          const int p1 = (2 * oy + 1) * x.w + 2 * ox;
          y.m(c, oy * y.w + ox) =
              static_cast<S>(0.25) *
              (x.m(c, p0) + x.m(c, p0 + 1) + x.m(c, p1) + x.m(c, p1 + 1));
        }
      }
    }
    return y;
  }

  static FeatureMap<S> backward(const FeatureMap<S>& dy, int in_h, int in_w) {
    FeatureMap<S> dx(dy.channels(), in_h, in_w);
    for (int c = 0; c < dy.channels(); ++c) {
      for (int oy = 0; oy < dy.h; ++oy) {
        for (int ox = 0; ox < dy.w; ++ox) {
          const S g = static_cast<S>(0.25) * dy.m(c, oy * dy.w + ox);
          const int p0 = (2 * oy) * in_w + 2 * ox;
          const int p1 = (2 * oy + 1) * in_w + 2 * ox;
          dx.m(c, p0) += g;
          dx.m(c, p0 + 1) += g;
          dx.m(c, p1) += g;
          dx.m(c, p1 + 1) += g;
        }
      }
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsampling.

template <typename S>
struct Upsample2x {
  static FeatureMap<S> forward(const FeatureMap<S>& x) {
    FeatureMap<S> y(x.channels(), x.h * 2, x.w * 2);
    for (int c = 0; c < x.channels(); ++c) {
      for (int oy = 0; oy < y.h; ++oy) {
        for (int ox = 0; ox < y.w; ++ox) {
          y.m(c, oy * y.w + ox) = x.m(c, (oy / 2) * x.w + ox / 2);
        }
      }
    }
    return y;
  }

  static FeatureMap<S> backward(const FeatureMap<S>& dy) {
    FeatureMap<S> dx(dy.channels(), dy.h / 2, dy.w / 2);
    for (int c = 0; c < dy.channels(); ++c) {
      for (int oy = 0; oy < dy.h; ++oy) {
        for (int ox = 0; ox < dy.w; ++ox) {
          dx.m(c, (oy / 2) * dx.w + ox / 2) += dy.m(c, oy * dy.w + ox);
        }
      }
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// 4x4 average pooling, used by the slice-level phase classifier.

template <typename S>
struct AvgPool4x4 {
  static FeatureMap<S> forward(const FeatureMap<S>& x) {
    if (x.h % 4 != 0 || x.w % 4 != 0) {
      throw ShapeError("AvgPool4x4: dims must be divisible by 4");
    }
    FeatureMap<S> y(x.channels(), x.h / 4, x.w / 4);
    for (int c = 0; c < x.channels(); ++c) {
      for (int oy = 0; oy < y.h; ++oy) {
        for (int ox = 0; ox < y.w; ++ox) {
          S sum = 0;
          for (int dy = 0; dy < 4; ++dy) {
            for (int dx = 0; dx < 4; ++dx) {
              sum += x.m(c, (4 * oy + dy) * x.w + 4 * ox + dx);
            }
          }
          y.m(c, oy * y.w + ox) = sum / static_cast<S>(16);
        }
      }
    }
    return y;
  }

  static FeatureMap<S> backward(const FeatureMap<S>& dy, int in_h, int in_w) {
    FeatureMap<S> dx(dy.channels(), in_h, in_w);
    for (int c = 0; c < dy.channels(); ++c) {
      for (int oy = 0; oy < dy.h; ++oy) {
        for (int ox = 0; ox < dy.w; ++ox) {
          const S g = dy.m(c, oy * dy.w + ox) / static_cast<S>(16);
          for (int dyy = 0; dyy < 4; ++dyy) {
            for (int dxx = 0; dxx < 4; ++dxx) {
              dx.m(c, (4 * oy + dyy) * in_w + 4 * ox + dxx) += g;
            }
          }
        }
      }
    }
    return dx;
  }
};

}  // namespace ctphase
