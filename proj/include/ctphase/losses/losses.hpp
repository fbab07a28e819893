#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "ctphase/auxnets/auxnets.hpp"
#include "ctphase/core/stats.hpp"
#include "ctphase/nn/feature_map.hpp"

namespace ctphase {

// The five anatomy-aware losses plus the denoising loss, their analytic
// gradients, the staged activation schedule, and the learnable-uncertainty
// combiner.  All loss values are accumulated in double regardless of the
// tensor scalar type.

// ---------------------------------------------------------------------------
// Loss identities.

enum class LossName { diff, cyc, cls, seg, hu, ab };

inline constexpr std::array<LossName, 5> kAuxLosses = {
    LossName::cyc, LossName::cls, LossName::seg, LossName::hu, LossName::ab};

std::string loss_name_to_string(LossName n);
LossName loss_name_from_string(const std::string& s);

// Probabilities are floored here before entering any logarithm.
inline constexpr double kProbFloor = 1e-8;

// ---------------------------------------------------------------------------
// Fixed weights (the values quoted for the pre-learnable stages).

struct LossWeights {
  double lambda_diff = 1.0;
  double lambda_cls = 1e-3;
  double lambda_cyc = 10.0;
  double lambda_seg = 1e-3;
  double lambda_hu = 1e-2;
  double lambda_ab = 1.0;
  double lambda_cdiff = 1.0;  // cycle-internal noise-consistency weight

  double weight(LossName n) const;
  void validate() const;  // all nonnegative
};

// ---------------------------------------------------------------------------
// Staged activation: {diff} → +{cyc, cls} → all six → learnable weights.

struct StageThresholds {
  int64_t add_cyc_cls = 2000;
  int64_t add_all = 20000;
  int64_t learnable = 80000;

  static StageThresholds paper() { return {2000, 20000, 80000}; }
  static StageThresholds desk() { return {200, 2000, 8000}; }
  // Documented variant: the running-text schedule that starts cycle+phase
  // at 10k instead of 2k.
  static StageThresholds paper_alt_10k() { return {10000, 20000, 80000}; }
  // Thresholds at the paper's fractions (2%, 20%, 80%) of a new total.
  static StageThresholds scaled(int64_t total_steps);

  void validate() const;  // strictly increasing, positive
};

std::set<LossName> active_losses(int64_t step, const StageThresholds& cfg);

// ---------------------------------------------------------------------------
// Learnable per-loss uncertainty scalars (stage 4): effective weight
// exp(−s_i) plus additive regularizer s_i.

struct UncertaintyParams {
  std::array<double, kAuxLosses.size()> s{};  // order of kAuxLosses

  double& at(LossName n);
  double at(LossName n) const;
  double effective_weight(LossName n) const { return std::exp(-at(n)); }

  static UncertaintyParams zeros() { return {}; }
  // Continuity handoff: s_i = −ln λ_i so exp(−s_i) equals the prior fixed
  // weight at the moment weights become learnable.
  static UncertaintyParams from_weights(const LossWeights& w);
};

// ∂total/∂s_i of the stage-4 objective: −exp(−s_i)·L_i + 1.
inline double uncertainty_grad(double s_i, double loss_i) {
  return -std::exp(-s_i) * loss_i + 1.0;
}

// ---------------------------------------------------------------------------
// Per-step record.

struct LossBundle {
  std::map<std::string, double> values;
  std::set<std::string> active;
  double total = 0.0;
  int64_t step = 0;
};

// Total prescribed for `step`: fixed weights before the learnable threshold,
// the uncertainty form at and after it.  Missing active values are data
// errors.
double combine(const std::map<std::string, double>& values, int64_t step,
               const LossWeights& weights, const UncertaintyParams& u,
               const StageThresholds& cfg);

// ---------------------------------------------------------------------------
// L_seg: mean cross-entropy of segmenter probabilities against the source
// mask's classes (one class index per pixel).

template <typename S>
double loss_seg(const FeatureMap<S>& probs,
                const Eigen::Array<int, Eigen::Dynamic, 1>& gt_class) {
  if (gt_class.size() != probs.m.cols()) {
    throw ShapeError("loss_seg: class map size does not match probabilities");
  }
  double acc = 0.0;
  for (Eigen::Index i = 0; i < gt_class.size(); ++i) {
    const int g = gt_class[i];
    if (g < 0 || g >= probs.channels()) {
      throw LookupError("loss_seg: class index " + std::to_string(g) +
                        " out of range");
    }
    acc -= std::log(std::max(static_cast<double>(probs.m(g, i)), kProbFloor));
  }
  return acc / static_cast<double>(gt_class.size());
}

// d loss_seg / d probs: −1/(N·p) at the true class, 0 elsewhere; pixels whose
// true-class probability sits at the floor get 0 (the floor is flat there).
template <typename S>
FeatureMap<S> loss_seg_grad(const FeatureMap<S>& probs,
                            const Eigen::Array<int, Eigen::Dynamic, 1>& gt_class) {
  if (gt_class.size() != probs.m.cols()) {
    throw ShapeError("loss_seg: class map size does not match probabilities");
  }
  FeatureMap<S> d(probs.channels(), probs.h, probs.w);
  d.m.setZero();
  const double n = static_cast<double>(gt_class.size());
  for (Eigen::Index i = 0; i < gt_class.size(); ++i) {
    const int g = gt_class[i];
    const double p = static_cast<double>(probs.m(g, i));
    if (p > kProbFloor) {
      d.m(g, i) = static_cast<S>(-1.0 / (n * p));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// L_cyc: mean absolute reconstruction error of the cycle plus the
// cycle-path-only noise-consistency term.

template <typename S>
double loss_cyc(const FeatureMap<S>& x_src, const FeatureMap<S>& x_cyc,
                const FeatureMap<S>& eps_cycle,
                const FeatureMap<S>& eps_hat_cycle, double lambda_cdiff) {
  x_src.require_shape(x_cyc.channels(), x_cyc.h, x_cyc.w, "loss_cyc");
  eps_cycle.require_shape(eps_hat_cycle.channels(), eps_hat_cycle.h,
                          eps_hat_cycle.w, "loss_cyc noise");
  const double rec =
      (x_cyc.m - x_src.m).template cast<double>().cwiseAbs().mean();
  const double noise = (eps_cycle.m - eps_hat_cycle.m)
                           .template cast<double>()
                           .cwiseAbs()
                           .mean();
  return rec + lambda_cdiff * noise;
}

// d loss_cyc / d x_cyc = sign(x_cyc − x_src)/N.
template <typename S>
FeatureMap<S> loss_cyc_grad_xcyc(const FeatureMap<S>& x_src,
                                 const FeatureMap<S>& x_cyc) {
  x_src.require_shape(x_cyc.channels(), x_cyc.h, x_cyc.w, "loss_cyc");
  FeatureMap<S> d = x_cyc;
  const S inv_n = static_cast<S>(1.0 / static_cast<double>(x_cyc.m.size()));
  d.m = (x_cyc.m - x_src.m).unaryExpr([inv_n](S v) {
    return v > S(0) ? inv_n : (v < S(0) ? -inv_n : S(0));
  });
  return d;
}

// d loss_cyc / d eps_hat_cycle = −λ_cdiff · sign(eps − eps_hat)/N.
template <typename S>
FeatureMap<S> loss_cyc_grad_eps_hat(const FeatureMap<S>& eps_cycle,
                                    const FeatureMap<S>& eps_hat_cycle,
                                    double lambda_cdiff) {
  FeatureMap<S> d = eps_hat_cycle;
  const S scale =
      static_cast<S>(lambda_cdiff / static_cast<double>(eps_hat_cycle.m.size()));
  d.m = (eps_cycle.m - eps_hat_cycle.m).unaryExpr([scale](S v) {
    return v > S(0) ? -scale : (v < S(0) ? scale : S(0));
  });
  return d;
}

// ---------------------------------------------------------------------------
// L_cls: negative log-probability of the intended target phase.

template <typename S>
double loss_cls(const std::array<S, kNumPhases>& probs, Phase target) {
  return -std::log(std::max(
      static_cast<double>(probs[static_cast<size_t>(target)]), kProbFloor));
}

template <typename S>
std::array<S, kNumPhases> loss_cls_grad(const std::array<S, kNumPhases>& probs,
                                        Phase target) {
  std::array<S, kNumPhases> d{};
  const double p =
      static_cast<double>(probs[static_cast<size_t>(target)]);
  if (p > kProbFloor) {
    d[static_cast<size_t>(target)] = static_cast<S>(-1.0 / p);
  }
  return d;
}

// ---------------------------------------------------------------------------
// L_HU: mean normalized squared error between per-organ mean HU of the
// generated image and alignment-free target-phase means.  Organs whose
// ground-truth mean is within hu_floor of water are evaluated on the
// +1024-offset scale to keep the denominator away from 0.

inline constexpr double kHuLossFloor = 20.0;
inline constexpr double kHuOffset = 1024.0;

double loss_hu(const OrganStats& pred, const OrganStats& gt,
               double hu_floor = kHuLossFloor);

// d loss_hu / d (pred mean of organ id), for the organs common to both.
std::map<int, double> loss_hu_grad(const OrganStats& pred,
                                   const OrganStats& gt,
                                   double hu_floor = kHuLossFloor);

// ---------------------------------------------------------------------------
// L_AB: mean squared HU difference inside the source's air/bone region
// (analytic-detector mode).  Empty regions contribute 0.

template <typename S>
double loss_ab(const FeatureMap<S>& pred_hu, const FeatureMap<S>& src_hu,
               const BoolMap& region) {
  pred_hu.require_shape(src_hu.channels(), src_hu.h, src_hu.w, "loss_ab");
  if (region.size() != pred_hu.m.cols()) {
    throw ShapeError("loss_ab: region size does not match slices");
  }
  double acc = 0.0;
  int64_t n = 0;
  for (Eigen::Index i = 0; i < region.size(); ++i) {
    if (!region[i]) continue;
    const double d = static_cast<double>(pred_hu.m(0, i)) - src_hu.m(0, i);
    acc += d * d;
    ++n;
  }
  return n > 0 ? acc / static_cast<double>(n) : 0.0;
}

// d loss_ab / d pred_hu = 2(pred − src)/|region| inside the region.
template <typename S>
FeatureMap<S> loss_ab_grad(const FeatureMap<S>& pred_hu,
                           const FeatureMap<S>& src_hu,
                           const BoolMap& region) {
  pred_hu.require_shape(src_hu.channels(), src_hu.h, src_hu.w, "loss_ab");
  if (region.size() != pred_hu.m.cols()) {
    throw ShapeError("loss_ab: region size does not match slices");
  }
  FeatureMap<S> d(1, pred_hu.h, pred_hu.w);
  d.m.setZero();
  const Eigen::Index n = (region == true).count();
  if (n == 0) return d;
  const S scale = static_cast<S>(2.0 / static_cast<double>(n));
  for (Eigen::Index i = 0; i < region.size(); ++i) {
    if (region[i]) d.m(0, i) = scale * (pred_hu.m(0, i) - src_hu.m(0, i));
  }
  return d;
}

// Volume-level convenience used by tests and reports.
template <typename S>
double loss_ab(const VolumeT<S>& pred, const VolumeT<S>& src,
               const BoolMap& region) {
  if (!congruent(pred.dims, pred.spacing_mm, src.dims, src.spacing_mm)) {
    throw ShapeError("loss_ab: volume grids are not congruent");
  }
  if (region.size() != pred.data.size()) {
    throw ShapeError("loss_ab: region size does not match volumes");
  }
  double acc = 0.0;
  int64_t n = 0;
  for (Eigen::Index i = 0; i < region.size(); ++i) {
    if (!region[i]) continue;
    const double d = static_cast<double>(pred.data[i]) - src.data[i];
    acc += d * d;
    ++n;
  }
  return n > 0 ? acc / static_cast<double>(n) : 0.0;
}

}  // namespace ctphase
