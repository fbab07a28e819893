#include "ctphase/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "ctphase/common/log.hpp"
#include "ctphase/nn/tensor_store.hpp"

namespace ctphase {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration.

void TrainConfig::validate() const {
  thresholds.validate();
  if (total_steps <= 0) {
    throw ConfigError("total_steps must be positive");
  }
  if (batch <= 0) {
    throw ConfigError("batch size must be positive");
  }
  if (!(lr >= 0.0)) {
    throw ConfigError("learning rate must be nonnegative");
  }
  if (cycle_every <= 0) {
    throw ConfigError("cycle_every must be positive");
  }
  if (checkpoint_every <= 0) {
    throw ConfigError("checkpoint_every must be positive");
  }
  if (schedule_T <= 0) {
    throw ConfigError("schedule_T must be positive");
  }
  if (uncertainty_init != "continuity" && uncertainty_init != "unit") {
    throw ConfigError("uncertainty_init must be \"continuity\" or \"unit\"");
  }
  weights.validate();
}

namespace {

LossWeights weights_from_json(const json& j) {
  LossWeights w;
  for (const auto& [key, value] : j.items()) {
    if (key == "lambda_diff") w.lambda_diff = value.get<double>();
    else if (key == "lambda_cls") w.lambda_cls = value.get<double>();
    else if (key == "lambda_cyc") w.lambda_cyc = value.get<double>();
    else if (key == "lambda_seg") w.lambda_seg = value.get<double>();
    else if (key == "lambda_hu") w.lambda_hu = value.get<double>();
    else if (key == "lambda_ab") w.lambda_ab = value.get<double>();
    else if (key == "lambda_cdiff") w.lambda_cdiff = value.get<double>();
    else throw ConfigError("unknown weights key \"" + key + "\"");
  }
  return w;
}

json weights_to_json(const LossWeights& w) {
  return json{{"lambda_diff", w.lambda_diff}, {"lambda_cls", w.lambda_cls},
              {"lambda_cyc", w.lambda_cyc},   {"lambda_seg", w.lambda_seg},
              {"lambda_hu", w.lambda_hu},     {"lambda_ab", w.lambda_ab},
              {"lambda_cdiff", w.lambda_cdiff}};
}

UNetConfig unet_from_json(const json& j) {
  UNetConfig u;
  for (const auto& [key, value] : j.items()) {
    if (key == "in_channels") u.in_channels = value.get<int>();
    else if (key == "base_channels") u.base_channels = value.get<int>();
    else if (key == "levels") u.levels = value.get<int>();
    else if (key == "cond_dim") u.cond_dim = value.get<int>();
    else if (key == "time_dim") u.time_dim = value.get<int>();
    else if (key == "phase_dim") u.phase_dim = value.get<int>();
    else throw ConfigError("unknown unet key \"" + key + "\"");
  }
  return u;
}

json unet_to_json(const UNetConfig& u) {
  return json{{"in_channels", u.in_channels},
              {"base_channels", u.base_channels},
              {"levels", u.levels},
              {"cond_dim", u.cond_dim},
              {"time_dim", u.time_dim},
              {"phase_dim", u.phase_dim}};
}

StageThresholds thresholds_from_json(const json& value) {
  if (value.is_string()) {
    const auto name = value.get<std::string>();
    if (name == "paper") return StageThresholds::paper();
    if (name == "desk") return StageThresholds::desk();
    if (name == "paper_alt_10k") return StageThresholds::paper_alt_10k();
    throw ConfigError("unknown thresholds preset \"" + name + "\"");
  }
  if (!value.is_array() || value.size() != 3) {
    throw ConfigError(
        "thresholds must be a preset name or a 3-element array");
  }
  return {value[0].get<int64_t>(), value[1].get<int64_t>(),
          value[2].get<int64_t>()};
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "total_steps") c.total_steps = value.get<int64_t>();
    else if (key == "thresholds") c.thresholds = thresholds_from_json(value);
    else if (key == "batch") c.batch = value.get<int>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "seed") c.seed = value.get<uint64_t>();
    else if (key == "weights") c.weights = weights_from_json(value);
    else if (key == "cycle_every") c.cycle_every = value.get<int64_t>();
    else if (key == "checkpoint_every") c.checkpoint_every = value.get<int64_t>();
    else if (key == "manifest") c.manifest_path = value.get<std::string>();
    else if (key == "segmenter") c.segmenter_path = value.get<std::string>();
    else if (key == "classifier") c.classifier_path = value.get<std::string>();
    else if (key == "uncertainty_init") c.uncertainty_init = value.get<std::string>();
    else if (key == "unet") c.unet = unet_from_json(value);
    else if (key == "schedule_T") c.schedule_T = value.get<int>();
    else if (key == "window") {
      for (const auto& [wkey, wvalue] : value.items()) {
        if (wkey == "center") c.window.center = wvalue.get<double>();
        else if (wkey == "half_width") c.window.half_width = wvalue.get<double>();
        else throw ConfigError("unknown window key \"" + wkey + "\"");
      }
    } else {
      throw ConfigError("unknown train key \"" + key + "\"");
    }
  }
  c.validate();
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return json{
      {"total_steps", c.total_steps},
      {"thresholds", json::array({c.thresholds.add_cyc_cls, c.thresholds.add_all,
                                  c.thresholds.learnable})},
      {"batch", c.batch},
      {"lr", c.lr},
      {"seed", c.seed},
      {"weights", weights_to_json(c.weights)},
      {"cycle_every", c.cycle_every},
      {"checkpoint_every", c.checkpoint_every},
      {"manifest", c.manifest_path.generic_string()},
      {"segmenter", c.segmenter_path.generic_string()},
      {"classifier", c.classifier_path.generic_string()},
      {"uncertainty_init", c.uncertainty_init},
      {"unet", unet_to_json(c.unet)},
      {"schedule_T", c.schedule_T},
      {"window",
       json{{"center", c.window.center}, {"half_width", c.window.half_width}}}};
}

// ---------------------------------------------------------------------------
// Pairs and data loading.

std::vector<TrainPair> make_pairs(const Manifest& manifest) {
  std::vector<TrainPair> pairs;
  for (const auto& [patient, phases] : manifest) {
    if (phases.size() < 2) {
      log::warn("patient %s has %zu phase(s), need 2+ for pairs; skipped",
                patient.c_str(), phases.size());
      continue;
    }
    for (const auto& [src, src_dir] : phases) {
      for (const auto& [tgt, tgt_dir] : phases) {
        if (src != tgt) pairs.push_back({patient, src, tgt});
      }
    }
  }
  return pairs;
}

TrainData load_train_data(const fs::path& manifest_path) {
  const Manifest manifest = load_manifest(manifest_path);
  TrainData data;
  const Volume* first = nullptr;
  for (const auto& [patient, phases] : manifest) {
    for (const auto& [phase, dir] : phases) {
      LoadedBundle b = load_bundle(dir);
      if (!b.mask) {
        throw DataError("training bundle " + dir.string() +
                        " has no segmentation mask");
      }
      PhaseData pd;
      pd.volume = std::move(b.volume);
      pd.mask = std::move(*b.mask);
      pd.stats = load_organ_stats(dir / "organ_stats.json");
      if (first &&
          !congruent(first->dims, first->spacing_mm, pd.volume.dims,
                     pd.volume.spacing_mm)) {
        throw DataError("training volumes are not on a uniform grid (" +
                        dir.string() + " differs)");
      }
      auto& slot = data.patients[patient][phase];
      slot = std::move(pd);
      if (!first) first = &slot.volume;
    }
  }
  data.pairs = make_pairs(manifest);
  return data;
}

// ---------------------------------------------------------------------------
// Trainer.

namespace {

TrainConfig validated(TrainConfig cfg) {
  cfg.validate();
  return cfg;
}

size_t aux_slot(LossName n) {
  for (size_t i = 0; i < kAuxLosses.size(); ++i) {
    if (kAuxLosses[i] == n) return i;
  }
  throw LookupError("\"" + loss_name_to_string(n) +
                    "\" has no uncertainty slot");
}

void require_window_match(const HuWindow& a, const HuWindow& b,
                          const char* who) {
  if (std::abs(a.center - b.center) > 1e-9 ||
      std::abs(a.half_width - b.half_width) > 1e-9) {
    throw ConfigError(std::string(who) +
                      " was trained with a different intensity window");
  }
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(validated(cfg)),
      data_(load_train_data(cfg_.manifest_path)),
      seg_(load_segmenter(cfg_.segmenter_path)),
      cls_(load_classifier(cfg_.classifier_path)),
      den_(cfg_.unet, NoiseSchedule::linear(cfg_.schedule_T), cfg_.window),
      adam_(cfg_.lr),
      rng_(stream_rng(cfg_.seed, "train/steps")) {
  if (data_.pairs.empty()) {
    throw DataError("training manifest yields no usable phase pairs");
  }
  require_window_match(seg_.window, cfg_.window, "segmenter");
  require_window_match(cls_.window, cfg_.window, "classifier");

  const GridDims dims = data_.patients.begin()->second.begin()->second.volume.dims;
  const int stride = 1 << (cfg_.unet.levels - 1);
  if (dims.y % stride != 0 || dims.x % stride != 0) {
    throw ConfigError("slice dims must be divisible by the UNet stride " +
                      std::to_string(stride));
  }
  if (cls_.height() != static_cast<int>(dims.y) ||
      cls_.width() != static_cast<int>(dims.x)) {
    throw ConfigError("classifier was trained on a different slice geometry");
  }

  den_.net.init(cfg_.seed);
  if (cfg_.uncertainty_init == "continuity") {
    const UncertaintyParams u = UncertaintyParams::from_weights(cfg_.weights);
    for (size_t i = 0; i < s_.size(); ++i) {
      s_[i] = static_cast<float>(u.s[i]);
    }
  } else {
    s_.fill(0.0f);
  }

  refs_ = collect_params<UNet<float>, float>(den_.net, "denoiser");
  refs_.push_back({"uncertainty.s", s_.data(), s_grad_.data(),
                   static_cast<Eigen::Index>(s_.size())});
  adam_.attach(refs_);
}

UncertaintyParams Trainer::uncertainty() const {
  UncertaintyParams u;
  for (size_t i = 0; i < s_.size(); ++i) {
    u.s[i] = static_cast<double>(s_[i]);
  }
  return u;
}

double Trainer::loss_weight(LossName n, int64_t step,
                            bool /*cycle_computed*/) const {
  const bool learn = step >= cfg_.thresholds.learnable;
  if (n == LossName::diff) {
    return learn ? 1.0 : cfg_.weights.lambda_diff;
  }
  if (learn) {
    return std::exp(-static_cast<double>(s_[aux_slot(n)]));
  }
  return cfg_.weights.weight(n);
}

void Trainer::require_finite(double value, LossName n) const {
  if (!std::isfinite(value)) {
    throw DataError("loss \"" + loss_name_to_string(n) +
                    "\" is non-finite at step " + std::to_string(step_) +
                    "; aborting");
  }
}

std::map<std::string, double> Trainer::effective_weights(int64_t step) const {
  const auto active = active_losses(step, cfg_.thresholds);
  std::map<std::string, double> w;
  for (LossName n : {LossName::diff, LossName::cyc, LossName::cls,
                     LossName::seg, LossName::hu, LossName::ab}) {
    w[loss_name_to_string(n)] =
        active.count(n) ? loss_weight(n, step, true) : 0.0;
  }
  return w;
}

LossBundle Trainer::train_step() {
  const int64_t step = step_;
  const auto active = active_losses(step, cfg_.thresholds);
  const bool learnable = step >= cfg_.thresholds.learnable;
  const bool cycle_now =
      active.count(LossName::cyc) > 0 && (step % cfg_.cycle_every == 0);
  last_weights_ = effective_weights(step);

  zero_grads(refs_);

  const NoiseSchedule& sched = den_.schedule;
  const HuWindow& win = cfg_.window;
  const GridDims dims =
      data_.patients.begin()->second.begin()->second.volume.dims;
  const int h = static_cast<int>(dims.y);
  const int w = static_cast<int>(dims.x);
  const Eigen::Index px = dims.y * dims.x;
  const float lo = static_cast<float>(win.model_min());
  const float hi = static_cast<float>(win.model_max());

  std::map<std::string, double> sums = {{"diff", 0.0}, {"cyc", 0.0},
                                        {"cls", 0.0},  {"seg", 0.0},
                                        {"hu", 0.0},   {"ab", 0.0}};
  int hu_defined = 0;

  // Gradient scale for one batch item: effective weight over batch size.
  auto gscale = [&](LossName n) {
    return static_cast<float>(loss_weight(n, step, cycle_now) / cfg_.batch);
  };
  auto draw_noise = [&]() {
    FeatureMap<float> e(1, h, w);
    for (Eigen::Index i = 0; i < e.m.size(); ++i) {
      e.m.data()[i] = static_cast<float>(rng_.normal());
    }
    return e;
  };

  for (int b = 0; b < cfg_.batch; ++b) {
    const TrainPair& pair =
        data_.pairs[rng_.uniform_index(data_.pairs.size())];
    const PhaseData& src = data_.patients.at(pair.patient).at(pair.src);
    const PhaseData& tgt = data_.patients.at(pair.patient).at(pair.tgt);
    const Eigen::Index z =
        static_cast<Eigen::Index>(rng_.uniform_index(dims.z));

    const FeatureMap<float> xs_hu = hu_slice(src.volume, z);
    const FeatureMap<float> xs = normalize_slice(xs_hu, win);
    const FeatureMap<float> xt0 =
        normalize_slice(hu_slice(tgt.volume, z), win);

    // Main path: denoise the (unregistered) target-phase sample conditioned
    // on the source slice.
    const int t = static_cast<int>(rng_.uniform_index(sched.T));
    const FeatureMap<float> eps = draw_noise();
    const FeatureMap<float> x_t = forward_diffuse(xt0, t, eps, sched);
    const Condition<float> cond{xs, pair.src, pair.tgt};
    typename Denoiser<float>::Ctx ctx_main;
    const DenoiserOutput<float> out = den_.predict(x_t, t, cond, ctx_main);

    const double l_diff = loss_diff(eps, out.eps_hat);
    require_finite(l_diff, LossName::diff);
    sums["diff"] += l_diff;
    FeatureMap<float> d_eps = loss_diff_grad(eps, out.eps_hat);
    d_eps.m *= gscale(LossName::diff);

    // Clamped one-step clean estimate; auxiliary supervision applies to it.
    FeatureMap<float> x0c = out.x0_hat;
    x0c.m = x0c.m.cwiseMax(lo).cwiseMin(hi);
    FeatureMap<float> keep(1, h, w);  // 1 where the clamp passed through
    keep.m = (x0c.m.array() == out.x0_hat.m.array()).cast<float>().matrix();

    FeatureMap<float> dx0(1, h, w);  // dTotal / d x0c, weight-scaled
    const uint16_t* labels = src.mask.labels.data() + z * px;

    if (active.count(LossName::seg) != 0) {
      Eigen::Array<int, Eigen::Dynamic, 1> gt(px);
      for (Eigen::Index i = 0; i < px; ++i) {
        gt[i] = seg_.class_of(static_cast<int>(labels[i]));
      }
      typename SegmenterNet<float>::Ctx sctx;
      const FeatureMap<float> probs = seg_.forward(
          x0c, static_cast<float>(z_fraction(z, dims.z)), sctx);
      const double l = loss_seg(probs, gt);
      require_finite(l, LossName::seg);
      sums["seg"] += l;
      FeatureMap<float> dprobs = loss_seg_grad(probs, gt);
      dprobs.m *= gscale(LossName::seg);
      dx0.m += seg_.backward(dprobs, sctx).m;
    }

    if (active.count(LossName::cls) != 0) {
      typename PhaseClassifierNet<float>::Ctx cctx;
      const std::array<float, kNumPhases> p4 = cls_.forward(x0c, cctx);
      const double l = loss_cls(p4, pair.tgt);
      require_finite(l, LossName::cls);
      sums["cls"] += l;
      std::array<float, kNumPhases> dp4 = loss_cls_grad(p4, pair.tgt);
      for (float& v : dp4) v *= gscale(LossName::cls);
      dx0.m += cls_.backward(dp4, cctx).m;
    }

    if (active.count(LossName::hu) != 0) {
      // Slice-level per-organ means of the estimate under the source mask,
      // compared against the precomputed target-phase sidecar means.
      std::map<int, std::pair<double, int64_t>> acc;
      for (Eigen::Index i = 0; i < px; ++i) {
        auto& [sum, count] = acc[static_cast<int>(labels[i])];
        sum += static_cast<double>(x0c.m(0, i));
        ++count;
      }
      OrganStats pred;
      for (const auto& [id, sc] : acc) {
        OrganRecord rec;
        rec.organ_id = id;
        rec.mean_hu = win.to_hu(sc.first / static_cast<double>(sc.second));
        rec.voxel_count = sc.second;
        pred.records.push_back(rec);
      }
      pred.n_org = static_cast<int>(pred.records.size());
      bool defined = true;
      double l = 0.0;
      std::map<int, double> ghu;
      try {
        l = loss_hu(pred, tgt.stats);
        ghu = loss_hu_grad(pred, tgt.stats);
      } catch (const DataError&) {
        defined = false;
        if (!warned_undefined_hu_) {
          log::warn("HU loss undefined at step %lld (no organs common to "
                    "slice and target stats); skipping such slices",
                    static_cast<long long>(step_));
          warned_undefined_hu_ = true;
        }
      }
      if (defined) {
        require_finite(l, LossName::hu);
        sums["hu"] += l;
        ++hu_defined;
        // d mean_HU / d model voxel = half_width / organ voxel count.
        std::map<int, float> coef;
        for (const auto& [id, g] : ghu) {
          coef[id] = static_cast<float>(g * win.half_width /
                                        static_cast<double>(acc[id].second)) *
                     gscale(LossName::hu);
        }
        for (Eigen::Index i = 0; i < px; ++i) {
          auto it = coef.find(static_cast<int>(labels[i]));
          if (it != coef.end()) dx0.m(0, i) += it->second;
        }
      }
    }

    if (active.count(LossName::ab) != 0) {
      const BoolMap region = detect_air_bone_slice(xs_hu);
      const FeatureMap<float> pred_hu = denormalize_slice(x0c, win);
      const double l = loss_ab(pred_hu, xs_hu, region);
      require_finite(l, LossName::ab);
      sums["ab"] += l;
      const FeatureMap<float> dph = loss_ab_grad(pred_hu, xs_hu, region);
      dx0.m += dph.m * (gscale(LossName::ab) *
                        static_cast<float>(win.half_width));
    }

    if (cycle_now) {
      // Cycle path: denoise the source sample conditioned on the generated
      // target estimate with the phases swapped.  Its gradient reaches the
      // main path through the conditioning channel.
      const int tc = static_cast<int>(rng_.uniform_index(sched.T));
      const FeatureMap<float> eps_c = draw_noise();
      const FeatureMap<float> x_tc = forward_diffuse(xs, tc, eps_c, sched);
      const Condition<float> cond_c{x0c, pair.tgt, pair.src};
      typename Denoiser<float>::Ctx ctx_cyc;
      const DenoiserOutput<float> out_c = den_.predict(x_tc, tc, cond_c, ctx_cyc);

      FeatureMap<float> xc = out_c.x0_hat;
      xc.m = xc.m.cwiseMax(lo).cwiseMin(hi);
      FeatureMap<float> keep_c(1, h, w);
      keep_c.m = (xc.m.array() == out_c.x0_hat.m.array()).cast<float>().matrix();

      const double l =
          loss_cyc(xs, xc, eps_c, out_c.eps_hat, cfg_.weights.lambda_cdiff);
      require_finite(l, LossName::cyc);
      sums["cyc"] += l;

      FeatureMap<float> d_eps_c =
          loss_cyc_grad_eps_hat(eps_c, out_c.eps_hat, cfg_.weights.lambda_cdiff);
      const FeatureMap<float> dxc = loss_cyc_grad_xcyc(xs, xc);
      const float chain_c =
          -static_cast<float>(sched.sqrt_1mab(tc) / sched.sqrt_ab(tc));
      d_eps_c.m += (dxc.m.array() * keep_c.m.array()).matrix() * chain_c;
      d_eps_c.m *= gscale(LossName::cyc);

      const FeatureMap<float> din = den_.net.backward(d_eps_c, ctx_cyc);
      dx0.m += din.m.row(1);
    }

    // Chain every x0-level gradient into the main noise prediction:
    // x0_hat = (x_t - sqrt(1-ab) eps_hat) / sqrt(ab).
    const float chain =
        -static_cast<float>(sched.sqrt_1mab(t) / sched.sqrt_ab(t));
    d_eps.m += (dx0.m.array() * keep.m.array()).matrix() * chain;
    den_.net.backward(d_eps, ctx_main);
  }

  LossBundle bundle;
  bundle.step = step;
  for (LossName n : active) bundle.active.insert(loss_name_to_string(n));
  bundle.values["diff"] = sums["diff"] / cfg_.batch;
  if (active.count(LossName::cyc) != 0) {
    bundle.values["cyc"] = cycle_now ? sums["cyc"] / cfg_.batch : 0.0;
  }
  if (active.count(LossName::cls) != 0) {
    bundle.values["cls"] = sums["cls"] / cfg_.batch;
  }
  if (active.count(LossName::seg) != 0) {
    bundle.values["seg"] = sums["seg"] / cfg_.batch;
  }
  if (active.count(LossName::hu) != 0) {
    bundle.values["hu"] = hu_defined > 0 ? sums["hu"] / hu_defined : 0.0;
  }
  if (active.count(LossName::ab) != 0) {
    bundle.values["ab"] = sums["ab"] / cfg_.batch;
  }
  bundle.total =
      combine(bundle.values, step, cfg_.weights, uncertainty(), cfg_.thresholds);

  // Learnable uncertainty scalars: d total / d s_i = -exp(-s_i) L_i + 1.
  if (learnable) {
    for (size_t i = 0; i < kAuxLosses.size(); ++i) {
      const LossName n = kAuxLosses[i];
      if (active.count(n) == 0) continue;
      if (n == LossName::cyc && !cycle_now) continue;
      s_grad_[i] = static_cast<float>(uncertainty_grad(
          s_[i], bundle.values.at(loss_name_to_string(n))));
    }
  }

  adam_.step(refs_);
  ++step_;
  return bundle;
}

json Trainer::log_line(const LossBundle& bundle) const {
  const std::map<std::string, double> w =
      (bundle.step + 1 == step_ && !last_weights_.empty())
          ? last_weights_
          : effective_weights(bundle.step);
  json j;
  j["step"] = bundle.step;
  for (LossName n : {LossName::diff, LossName::cyc, LossName::cls,
                     LossName::seg, LossName::hu, LossName::ab}) {
    const std::string name = loss_name_to_string(n);
    auto it = bundle.values.find(name);
    j[name] = it != bundle.values.end() ? it->second : 0.0;
    j["w_" + name] = w.at(name);
  }
  j["total"] = bundle.total;
  return j;
}

void Trainer::run(const fs::path& out_dir) {
  fs::create_directories(out_dir / "checkpoints");
  std::ofstream log_file(out_dir / "log.jsonl", std::ios::app);
  if (!log_file) {
    throw DataError("cannot open training log at " +
                    (out_dir / "log.jsonl").string());
  }
  log::info("training: steps %lld..%lld, %zu pairs, batch %d",
            static_cast<long long>(step_),
            static_cast<long long>(cfg_.total_steps), data_.pairs.size(),
            cfg_.batch);
  while (step_ < cfg_.total_steps) {
    const LossBundle bundle = train_step();
    log_file << log_line(bundle).dump() << "\n";
    log_file.flush();
    if (step_ % 500 == 0 || step_ == cfg_.total_steps) {
      log::info("step %lld: total %.5f (diff %.5f)",
                static_cast<long long>(step_), bundle.total,
                bundle.values.at("diff"));
    }
    if (step_ % cfg_.checkpoint_every == 0 || step_ == cfg_.total_steps) {
      char tag[32];
      std::snprintf(tag, sizeof(tag), "step-%08lld.ckpt",
                    static_cast<long long>(step_));
      save_checkpoint(out_dir / "checkpoints" / tag);
      save_checkpoint(out_dir / "checkpoints" / "latest.ckpt");
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

constexpr const char* kCheckpointFormat = "ctphase-train-checkpoint";
constexpr int kCheckpointVersion = 1;

void require_same(bool ok, const char* field) {
  if (!ok) {
    throw ConfigError(std::string("checkpoint is incompatible: \"") + field +
                      "\" differs from the current configuration");
  }
}

void require_checkpoint_compatible(const TrainConfig& a, const TrainConfig& b) {
  require_same(a.unet.in_channels == b.unet.in_channels &&
                   a.unet.base_channels == b.unet.base_channels &&
                   a.unet.levels == b.unet.levels &&
                   a.unet.cond_dim == b.unet.cond_dim &&
                   a.unet.time_dim == b.unet.time_dim &&
                   a.unet.phase_dim == b.unet.phase_dim,
               "unet");
  require_same(a.schedule_T == b.schedule_T, "schedule_T");
  require_same(a.window.center == b.window.center &&
                   a.window.half_width == b.window.half_width,
               "window");
  require_same(a.thresholds.add_cyc_cls == b.thresholds.add_cyc_cls &&
                   a.thresholds.add_all == b.thresholds.add_all &&
                   a.thresholds.learnable == b.thresholds.learnable,
               "thresholds");
  require_same(a.batch == b.batch, "batch");
  require_same(a.lr == b.lr, "lr");
  require_same(a.seed == b.seed, "seed");
  require_same(a.cycle_every == b.cycle_every, "cycle_every");
  require_same(a.uncertainty_init == b.uncertainty_init, "uncertainty_init");
  const LossWeights& wa = a.weights;
  const LossWeights& wb = b.weights;
  require_same(wa.lambda_diff == wb.lambda_diff &&
                   wa.lambda_cls == wb.lambda_cls &&
                   wa.lambda_cyc == wb.lambda_cyc &&
                   wa.lambda_seg == wb.lambda_seg &&
                   wa.lambda_hu == wb.lambda_hu && wa.lambda_ab == wb.lambda_ab &&
                   wa.lambda_cdiff == wb.lambda_cdiff,
               "weights");
}

}  // namespace

void Trainer::save_checkpoint(const fs::path& file) {
  TensorStore ts;
  ts.meta["format"] = kCheckpointFormat;
  ts.meta["version"] = kCheckpointVersion;
  ts.meta["step"] = step_;
  ts.meta["adam_steps"] = adam_.steps_taken();
  ts.meta["rng"] = rng_.serialize();
  ts.meta["config"] = train_config_to_json(cfg_);
  for (const auto& r : refs_) {
    ts.tensors[r.name].assign(r.w, r.w + r.size);
  }
  adam_.visit_state(refs_, [&](const std::string& name, float* data,
                               Eigen::Index size) {
    ts.tensors[name].assign(data, data + size);
  });
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  ts.save(file);
}

void Trainer::load_checkpoint(const fs::path& file) {
  const TensorStore ts = TensorStore::load(file);
  const std::string format =
      require_field(ts.meta, "format", "checkpoint").get<std::string>();
  if (format != kCheckpointFormat) {
    throw FormatError("not a training checkpoint: " + file.string());
  }
  const int version =
      require_field(ts.meta, "version", "checkpoint").get<int>();
  if (version != kCheckpointVersion) {
    throw FormatError("incompatible checkpoint version " +
                      std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const TrainConfig stored =
      train_config_from_json(require_field(ts.meta, "config", "checkpoint"));
  require_checkpoint_compatible(stored, cfg_);
  const int64_t step =
      require_field(ts.meta, "step", "checkpoint").get<int64_t>();
  const int64_t adam_steps =
      require_field(ts.meta, "adam_steps", "checkpoint").get<int64_t>();
  const std::string rng_state =
      require_field(ts.meta, "rng", "checkpoint").get<std::string>();

  // Verify every tensor before mutating anything, so a bad checkpoint
  // cannot leave partial state behind.
  auto check = [&](const std::string& name, Eigen::Index size) {
    if (!ts.has(name)) {
      throw IntegrityError("checkpoint is missing tensor " + name);
    }
    if (static_cast<Eigen::Index>(ts.get(name).size()) != size) {
      throw IntegrityError("checkpoint tensor " + name + " has wrong size");
    }
  };
  for (const auto& r : refs_) {
    check(r.name, r.size);
    check(r.name + ".adam_m", r.size);
    check(r.name + ".adam_v", r.size);
  }

  for (auto& r : refs_) {
    const auto& src = ts.get(r.name);
    std::copy(src.begin(), src.end(), r.w);
  }
  adam_.attach(refs_);
  adam_.visit_state(refs_, [&](const std::string& name, float* data,
                               Eigen::Index size) {
    const auto& src = ts.get(name);
    std::copy(src.begin(), src.begin() + size, data);
  });
  adam_.set_steps_taken(adam_steps);
  rng_.deserialize(rng_state);
  step_ = step;
  log::info("resumed from %s at step %lld", file.string().c_str(),
            static_cast<long long>(step_));
}

}  // namespace ctphase
