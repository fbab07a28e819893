#pragma once

#include <cmath>
#include <filesystem>
#include <vector>

#include "ctphase/common/jsonio.hpp"
#include "ctphase/core/volume.hpp"
#include "ctphase/nn/unet.hpp"

namespace ctphase {

// ---------------------------------------------------------------------------
// Noise schedule.

struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bar;  // cumulative product of (1 - beta)

  // Linear beta ramp.  Defaults give alpha_bar[0] ~ 0.9995 and
  // alpha_bar[T-1] ~ 4e-5: nearly clean at t=0, nearly pure noise at t=T-1.
  static NoiseSchedule linear(int T, double beta_start = 5e-4,
                              double beta_end = 0.1);

  void validate() const;

  double sqrt_ab(int t) const { return std::sqrt(alpha_bar.at(t)); }
  double sqrt_1mab(int t) const { return std::sqrt(1.0 - alpha_bar.at(t)); }

  void require_t(int t) const {
    if (t < 0 || t >= T) {
      throw LookupError("timestep " + std::to_string(t) +
                        " outside [0, " + std::to_string(T) + ")");
    }
  }
};

// ---------------------------------------------------------------------------
// Intensity normalization: linear HU <-> model-space map around the
// soft-tissue window (center 100 HU, half-width 300 HU).  The map is not
// clamped, so HU -> model -> HU is the identity over the full CT range; the
// model-space CLAMP BOUNDS below are the images of the HU clamp range and are
// applied to generated images, not to inputs.

struct HuWindow {
  double center = 100.0;
  double half_width = 300.0;

  double to_model(double hu) const { return (hu - center) / half_width; }
  double to_hu(double m) const { return m * half_width + center; }
  double model_min() const { return to_model(kHuMin); }
  double model_max() const { return to_model(kHuMax); }
};

template <typename S>
FeatureMap<S> normalize_slice(const FeatureMap<S>& hu, const HuWindow& win) {
  FeatureMap<S> out = hu;
  out.m.array() = (hu.m.array() - static_cast<S>(win.center)) /
                  static_cast<S>(win.half_width);
  return out;
}

template <typename S>
FeatureMap<S> denormalize_slice(const FeatureMap<S>& m, const HuWindow& win) {
  FeatureMap<S> out = m;
  out.m.array() =
      m.m.array() * static_cast<S>(win.half_width) + static_cast<S>(win.center);
  return out;
}

// ---------------------------------------------------------------------------
// Forward diffusion: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

template <typename S>
FeatureMap<S> forward_diffuse(const FeatureMap<S>& x0, int t,
                              const FeatureMap<S>& eps,
                              const NoiseSchedule& sched) {
  sched.require_t(t);
  if (x0.channels() != eps.channels() || x0.h != eps.h || x0.w != eps.w) {
    throw ShapeError("forward_diffuse: x0 and eps shapes differ");
  }
  FeatureMap<S> xt = x0;
  xt.m = static_cast<S>(sched.sqrt_ab(t)) * x0.m +
         static_cast<S>(sched.sqrt_1mab(t)) * eps.m;
  return xt;
}

// ---------------------------------------------------------------------------
// Denoising loss: plain MSE between drawn and predicted noise.

template <typename S>
double loss_diff(const FeatureMap<S>& eps, const FeatureMap<S>& eps_hat) {
  if (eps.channels() != eps_hat.channels() || eps.h != eps_hat.h ||
      eps.w != eps_hat.w) {
    throw ShapeError("loss_diff: shape mismatch");
  }
  return (eps.m - eps_hat.m).template cast<double>().array().square().mean();
}

// Gradient of loss_diff w.r.t. eps_hat: 2 (eps_hat - eps) / N.
template <typename S>
FeatureMap<S> loss_diff_grad(const FeatureMap<S>& eps,
                             const FeatureMap<S>& eps_hat) {
  FeatureMap<S> g = eps_hat;
  g.m = (eps_hat.m - eps.m) * static_cast<S>(2.0 / eps.m.size());
  return g;
}

// ---------------------------------------------------------------------------
// Conditioning bundle for one translation.

template <typename S>
struct Condition {
  FeatureMap<S> source_image;  // normalized source-phase slice
  Phase source_phase = Phase::N;
  Phase target_phase = Phase::V;
};

template <typename S>
struct DenoiserOutput {
  FeatureMap<S> eps_hat;
  FeatureMap<S> x0_hat;  // (x_t - sqrt(1-ab_t) eps_hat) / sqrt(ab_t)
};

// ---------------------------------------------------------------------------
// Conditional denoiser: U-Net over [x_t, source] with phase/time conditioning.

template <typename S>
class Denoiser {
 public:
  Denoiser(const UNetConfig& cfg, const NoiseSchedule& sched,
           const HuWindow& win)
      : net(cfg), schedule(sched), window(win) {
    sched.validate();
  }

  using Ctx = typename UNet<S>::Ctx;

  DenoiserOutput<S> predict(const FeatureMap<S>& x_t, int t,
                            const Condition<S>& cond, Ctx& ctx) const {
    schedule.require_t(t);
    if (x_t.channels() != 1 || cond.source_image.channels() != 1 ||
        x_t.h != cond.source_image.h || x_t.w != cond.source_image.w) {
      throw ShapeError("predict: x_t and conditioning slice must be congruent "
                       "1-channel maps");
    }
    FeatureMap<S> input = concat_channels(x_t, cond.source_image);
    DenoiserOutput<S> out;
    out.eps_hat =
        net.forward(input, t, cond.source_phase, cond.target_phase, ctx);
    out.x0_hat = out.eps_hat;
    out.x0_hat.m = (x_t.m - static_cast<S>(schedule.sqrt_1mab(t)) *
                                out.eps_hat.m) /
                   static_cast<S>(schedule.sqrt_ab(t));
    return out;
  }

  UNet<S> net;
  NoiseSchedule schedule;
  HuWindow window;
};

// ---------------------------------------------------------------------------
// Deterministic (eta = 0) coarse-to-fine sampler.

struct SamplerConfig {
  int steps = 50;
};

// Evenly spaced descending timestep subsequence ending at 0.
std::vector<int> sampler_timesteps(int T, int steps);

// Core sampling loop, templated on the noise predictor so tests can force a
// known eps_hat.  predictor(x_t, t) -> eps_hat.  x_init is the model-space
// starting point (pure noise for generation).  The one-step clean estimate is
// clamped to the model-space image of the HU range each iteration.
template <typename S, typename Predictor>
FeatureMap<S> ddim_sample_from(FeatureMap<S> x, Predictor&& predictor,
                               const NoiseSchedule& sched, const HuWindow& win,
                               const SamplerConfig& cfg) {
  const auto taus = sampler_timesteps(sched.T, cfg.steps);
  const S lo = static_cast<S>(win.model_min());
  const S hi = static_cast<S>(win.model_max());
  for (size_t k = 0; k < taus.size(); ++k) {
    const int t = taus[k];
    FeatureMap<S> eps_hat = predictor(x, t);
    FeatureMap<S> x0 = x;
    x0.m = (x.m - static_cast<S>(sched.sqrt_1mab(t)) * eps_hat.m) /
           static_cast<S>(sched.sqrt_ab(t));
    x0.m = x0.m.cwiseMax(lo).cwiseMin(hi);
    if (k + 1 == taus.size()) {
      x = x0;
    } else {
      const int tn = taus[k + 1];
      x.m = static_cast<S>(sched.sqrt_ab(tn)) * x0.m +
            static_cast<S>(sched.sqrt_1mab(tn)) * eps_hat.m;
    }
  }
  return x;
}

// Full slice enhancement: draw the initial noise from rng, run the sampler
// with the trained denoiser, return the slice in HU (clamped to CT range).
template <typename S>
FeatureMap<S> sample_slice(const Denoiser<S>& den, const Condition<S>& cond,
                           const SamplerConfig& cfg, Rng& rng) {
  if (cond.source_phase == cond.target_phase) {
    throw ConfigError("enhancement requires source phase != target phase");
  }
  FeatureMap<S> x(1, cond.source_image.h, cond.source_image.w);
  for (Eigen::Index i = 0; i < x.m.size(); ++i) {
    x.m.data()[i] = static_cast<S>(rng.normal());
  }
  auto predictor = [&](const FeatureMap<S>& xt, int t) {
    typename Denoiser<S>::Ctx ctx;
    return den.predict(xt, t, cond, ctx).eps_hat;
  };
  FeatureMap<S> out =
      ddim_sample_from(x, predictor, den.schedule, den.window, cfg);
  out = denormalize_slice(out, den.window);
  out.m = out.m.cwiseMax(static_cast<S>(kHuMin)).cwiseMin(static_cast<S>(kHuMax));
  return out;
}

// Contiguous 1-channel HU slice view of volume plane z.
FeatureMap<float> hu_slice(const Volume& volume, Eigen::Index z);

// Whole-volume enhancement: slices processed independently with shared
// conditioning; deterministic per seed.
Volume enhance_volume(const Denoiser<float>& den, const Volume& source,
                      Phase target_phase, const SamplerConfig& cfg,
                      uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoint plumbing (schedule + window + net config + params).

class TensorStore;
void save_denoiser(const Denoiser<float>& den, const std::filesystem::path& path,
                   const json& extra_meta = json::object());
Denoiser<float> load_denoiser(const std::filesystem::path& path);

}  // namespace ctphase
