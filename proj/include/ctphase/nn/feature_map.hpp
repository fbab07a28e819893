#pragma once

#include <Eigen/Core>

#include "ctphase/common/errors.hpp"

namespace ctphase {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;

// 2D feature map: one row per channel, one column per pixel (row-major pixel
// index y*w + x).  Row-major storage keeps each channel's pixels contiguous,
// which im2col and the pooling layers exploit.
template <typename S>
struct FeatureMap {
  using Mat =
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat m;
  int h = 0, w = 0;

  FeatureMap() = default;
  FeatureMap(int channels, int height, int width)
      : m(Mat::Zero(channels, height * width)), h(height), w(width) {}

  int channels() const { return static_cast<int>(m.rows()); }
  Eigen::Index pixels() const { return m.cols(); }

  void require_shape(int channels_, int h_, int w_, const char* who) const {
    if (channels() != channels_ || h != h_ || w != w_) {
      throw ShapeError(std::string(who) + ": feature map shape mismatch");
    }
  }
};

// Stacks b's channels under a's.
template <typename S>
FeatureMap<S> concat_channels(const FeatureMap<S>& a, const FeatureMap<S>& b) {
  if (a.h != b.h || a.w != b.w) {
    throw ShapeError("concat_channels: spatial dims differ");
  }
  FeatureMap<S> y(a.channels() + b.channels(), a.h, a.w);
  y.m.topRows(a.channels()) = a.m;
  y.m.bottomRows(b.channels()) = b.m;
  return y;
}

template <typename S>
void split_channels(const FeatureMap<S>& y, int top_channels,
                    FeatureMap<S>& a, FeatureMap<S>& b) {
  a.h = y.h;
  a.w = y.w;
  b.h = y.h;
  b.w = y.w;
  a.m = y.m.topRows(top_channels);
  b.m = y.m.bottomRows(y.channels() - top_channels);
}

}  // namespace ctphase
