#include "ctphase/backbone/diffusion.hpp"

#include <cstring>

#include "ctphase/nn/tensor_store.hpp"

namespace ctphase {

NoiseSchedule NoiseSchedule::linear(int T, double beta_start,
                                    double beta_end) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    const double beta =
        T == 1 ? beta_start
               : beta_start + (beta_end - beta_start) * t / (T - 1);
    s.betas[t] = beta;
    prod *= 1.0 - beta;
    s.alpha_bar[t] = prod;
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (T < 1 || static_cast<int>(betas.size()) != T ||
      static_cast<int>(alpha_bar.size()) != T) {
    throw ConfigError("schedule arrays do not match T");
  }
  double prev = 1.0;
  for (int t = 0; t < T; ++t) {
    if (!(betas[t] > 0.0 && betas[t] < 1.0)) {
      throw ConfigError("beta out of (0,1) at t=" + std::to_string(t));
    }
    if (!(alpha_bar[t] < prev)) {
      throw ConfigError("alpha_bar not strictly decreasing at t=" +
                        std::to_string(t));
    }
    prev = alpha_bar[t];
  }
  if (alpha_bar[0] < 0.99) {
    throw ConfigError("alpha_bar[0] must be close to 1");
  }
}

std::vector<int> sampler_timesteps(int T, int steps) {
  if (steps < 1) throw ConfigError("sampler needs at least 1 step");
  steps = std::min(steps, T);
  std::vector<int> taus(steps);
  if (steps == 1) {
    taus[0] = T - 1;
    // A single step must land on t with the strongest denoising leverage;
    // for T == 1 this is simply t = 0.
    if (T == 1) taus[0] = 0;
    return taus;
  }
  for (int i = 0; i < steps; ++i) {
    // Descending from T-1 to exactly 0.
    taus[i] = static_cast<int>(std::llround(
        static_cast<double>(T - 1) *
        (1.0 - static_cast<double>(i) / (steps - 1))));
  }
  return taus;
}

FeatureMap<float> hu_slice(const Volume& volume, Eigen::Index z) {
  if (z < 0 || z >= volume.dims.z) {
    throw LookupError("slice index " + std::to_string(z) + " outside volume");
  }
  const Eigen::Index px = volume.dims.y * volume.dims.x;
  FeatureMap<float> s(1, static_cast<int>(volume.dims.y),
                      static_cast<int>(volume.dims.x));
  std::memcpy(s.m.data(), volume.data.data() + z * px,
              static_cast<size_t>(px) * sizeof(float));
  return s;
}

Volume enhance_volume(const Denoiser<float>& den, const Volume& source,
                      Phase target_phase, const SamplerConfig& cfg,
                      uint64_t seed) {
  source.validate();
  Volume out = source;
  out.phase = target_phase;
  Rng rng = stream_rng(seed, "sampler/" + source.patient_id + "/" +
                                 phase_to_string(source.phase) + ">" +
                                 phase_to_string(target_phase));
  const int h = static_cast<int>(source.dims.y);
  const int w = static_cast<int>(source.dims.x);
  const Eigen::Index slice_px = source.dims.y * source.dims.x;
  for (Eigen::Index z = 0; z < source.dims.z; ++z) {
    Condition<float> cond;
    cond.source_phase = source.phase;
    cond.target_phase = target_phase;
    cond.source_image = FeatureMap<float>(1, h, w);
    for (Eigen::Index i = 0; i < slice_px; ++i) {
      cond.source_image.m(0, i) = static_cast<float>(
          den.window.to_model(source.data[z * slice_px + i]));
    }
    FeatureMap<float> hu = sample_slice(den, cond, cfg, rng);
    for (Eigen::Index i = 0; i < slice_px; ++i) {
      out.data[z * slice_px + i] = hu.m(0, i);
    }
  }
  return out;
}

void save_denoiser(const Denoiser<float>& den,
                   const std::filesystem::path& path, const json& extra_meta) {
  TensorStore store;
  store.meta = extra_meta;
  store.meta["format"] = "denoiser";
  store.meta["version"] = 1;
  store.meta["schedule"] = {{"T", den.schedule.T},
                            {"betas", den.schedule.betas}};
  store.meta["window"] = {{"center", den.window.center},
                          {"half_width", den.window.half_width}};
  const auto& c = den.net.config();
  store.meta["unet"] = {{"in_channels", c.in_channels},
                        {"base_channels", c.base_channels},
                        {"levels", c.levels},
                        {"cond_dim", c.cond_dim},
                        {"time_dim", c.time_dim},
                        {"phase_dim", c.phase_dim}};
  // visit() needs a mutable model; parameters are only read.
  store.put_params(const_cast<Denoiser<float>&>(den).net, "unet");
  store.save(path);
}

Denoiser<float> load_denoiser(const std::filesystem::path& path) {
  TensorStore store = TensorStore::load(path);
  const std::string where = path.string();
  if (require_field(store.meta, "format", where) != "denoiser") {
    throw FormatError(where + ": not a denoiser checkpoint");
  }
  const auto& jsched = require_field(store.meta, "schedule", where);
  NoiseSchedule sched;
  sched.T = require_field(jsched, "T", where).get<int>();
  sched.betas = require_field(jsched, "betas", where).get<std::vector<double>>();
  sched.alpha_bar.resize(sched.T);
  double prod = 1.0;
  for (int t = 0; t < sched.T; ++t) {
    prod *= 1.0 - sched.betas.at(t);
    sched.alpha_bar[t] = prod;
  }
  sched.validate();

  const auto& jwin = require_field(store.meta, "window", where);
  HuWindow win;
  win.center = require_field(jwin, "center", where).get<double>();
  win.half_width = require_field(jwin, "half_width", where).get<double>();

  const auto& junet = require_field(store.meta, "unet", where);
  UNetConfig cfg;
  cfg.in_channels = require_field(junet, "in_channels", where).get<int>();
  cfg.base_channels = require_field(junet, "base_channels", where).get<int>();
  cfg.levels = require_field(junet, "levels", where).get<int>();
  cfg.cond_dim = require_field(junet, "cond_dim", where).get<int>();
  cfg.time_dim = require_field(junet, "time_dim", where).get<int>();
  cfg.phase_dim = require_field(junet, "phase_dim", where).get<int>();

  Denoiser<float> den(cfg, sched, win);
  store.fill_params(den.net, "unet");
  return den;
}

}  // namespace ctphase
