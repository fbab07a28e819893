#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctphase/backbone/diffusion.hpp"
#include "ctphase/common/hash.hpp"
#include "ctphase/core/bundle.hpp"
#include "ctphase/nn/adam.hpp"
#include "ctphase/nn/layers.hpp"

namespace ctphase {

// The three frozen supervision providers: a per-pixel organ segmenter, a
// slice-level contrast-phase classifier, and an air/bone detector.  The
// networks are trained once on the phantom dataset, checkpointed, and never
// updated afterwards; gradients still flow THROUGH them into whatever image
// they are applied to.

// ---------------------------------------------------------------------------
// Channel-wise softmax (one probability simplex per pixel).

template <typename S>
FeatureMap<S> softmax_channels(const FeatureMap<S>& logits) {
  FeatureMap<S> p = logits;
  for (Eigen::Index j = 0; j < p.m.cols(); ++j) {
    auto col = p.m.col(j).array();
    col -= col.maxCoeff();
    col = col.exp();
    col /= col.sum();
  }
  return p;
}

// dz_k = p_k * (dp_k − Σ_j p_j dp_j), per pixel.
template <typename S>
FeatureMap<S> softmax_channels_backward(const FeatureMap<S>& dp,
                                        const FeatureMap<S>& p) {
  p.require_shape(dp.channels(), dp.h, dp.w, "softmax backward");
  FeatureMap<S> dz = p;
  for (Eigen::Index j = 0; j < p.m.cols(); ++j) {
    const S dot = p.m.col(j).dot(dp.m.col(j));
    dz.m.col(j).array() = p.m.col(j).array() * (dp.m.col(j).array() - dot);
  }
  return dz;
}

// ---------------------------------------------------------------------------
// Air/bone detector.  Analytic mode is the default: a voxel belongs to the
// intensity-stable region iff its HU is at or below air_max_hu or at or above
// bone_min_hu.  The thresholds separate the phantom's tissue categories with
// wide margins.

struct AirBoneThresholds {
  double air_max_hu = -300.0;
  double bone_min_hu = 200.0;
};

inline bool is_air_bone(double hu, const AirBoneThresholds& t = {}) {
  return hu <= t.air_max_hu || hu >= t.bone_min_hu;
}

using BoolMap = Eigen::Array<bool, Eigen::Dynamic, 1>;

template <typename S>
BoolMap detect_air_bone(const VolumeT<S>& v, const AirBoneThresholds& t = {}) {
  BoolMap flags(v.data.size());
  for (Eigen::Index i = 0; i < v.data.size(); ++i) {
    flags[i] = is_air_bone(static_cast<double>(v.data[i]), t);
  }
  return flags;
}

// Slice variant over a HU-valued feature map (one channel).
template <typename S>
BoolMap detect_air_bone_slice(const FeatureMap<S>& hu,
                              const AirBoneThresholds& t = {}) {
  hu.require_shape(1, hu.h, hu.w, "air/bone detector");
  BoolMap flags(hu.m.cols());
  for (Eigen::Index i = 0; i < hu.m.cols(); ++i) {
    flags[i] = is_air_bone(static_cast<double>(hu.m(0, i)), t);
  }
  return flags;
}

// Network-mode detector: a smooth two-sided gate over HU, differentiable in
// its input so it can sit inside a gradient path.  Initialized at the
// analytic thresholds; value ≈ 1 deep inside air or bone, ≈ 0 for soft
// tissue.
template <typename S>
struct SoftAirBone {
  S air_max_hu = static_cast<S>(-300);
  S bone_min_hu = static_cast<S>(200);
  S sharpness_hu = static_cast<S>(25);

  S value(S hu) const {
    return sigmoid((air_max_hu - hu) / sharpness_hu) +
           sigmoid((hu - bone_min_hu) / sharpness_hu);
  }
  S grad(S hu) const {
    const S a = sigmoid((air_max_hu - hu) / sharpness_hu);
    const S b = sigmoid((hu - bone_min_hu) / sharpness_hu);
    return (-a * (S(1) - a) + b * (S(1) - b)) / sharpness_hu;
  }

 private:
  static S sigmoid(S x) { return S(1) / (S(1) + std::exp(-x)); }
};

// ---------------------------------------------------------------------------
// Per-pixel organ segmenter.  Input is one model-normalized slice plus three
// coordinate channels (y, x, z in [−1, 1]); the coordinates carry the spatial
// prior that makes a three-layer net sufficient at this grid size.  Output is
// one probability vector per pixel over the organ classes.

template <typename S>
class SegmenterNet {
 public:
  static constexpr int kInputChannels = 4;

  SegmenterNet(std::map<int, OrganInfo> organ_table, int hidden)
      : window{},
        conv1(kInputChannels, hidden, 3),
        conv2(hidden, hidden, 3),
        conv3(hidden, hidden, 3),
        head(hidden, static_cast<int>(organ_table.size()), 1),
        organ_table_(std::move(organ_table)),
        hidden_(hidden) {
    if (organ_table_.size() < 2) {
      throw ConfigError("segmenter needs at least two organ classes");
    }
    for (const auto& [id, info] : organ_table_) {
      class_of_[id] = static_cast<int>(class_ids_.size());
      class_ids_.push_back(id);
    }
  }

  void init(uint64_t root_seed) {
    Rng rng = stream_rng(root_seed, "segmenter-init");
    conv1.init_he(rng);
    conv2.init_he(rng);
    conv3.init_he(rng);
    head.init_he(rng);
  }

  int num_classes() const { return static_cast<int>(class_ids_.size()); }
  int hidden() const { return hidden_; }
  const std::map<int, OrganInfo>& organ_table() const { return organ_table_; }
  const std::vector<int>& class_ids() const { return class_ids_; }

  // Class index carrying a given organ id.
  int class_of(int organ_id) const {
    auto it = class_of_.find(organ_id);
    if (it == class_of_.end()) {
      throw ConfigError("segmenter has no class for organ id " +
                        std::to_string(organ_id));
    }
    return it->second;
  }

  struct Ctx {
    typename Conv2D<S>::Ctx c1, c2, c3, ch;
    FeatureMap<S> a1, a2, a3;  // pre-activations
    FeatureMap<S> probs;
  };

  // model_slice: 1-channel model-normalized image; z_frac in [−1, 1].
  FeatureMap<S> forward(const FeatureMap<S>& model_slice, S z_frac,
                        Ctx& ctx) const {
    model_slice.require_shape(1, model_slice.h, model_slice.w, "segmenter");
    const FeatureMap<S> input = make_input(model_slice, z_frac);
    ctx.a1 = conv1.forward(input, ctx.c1);
    FeatureMap<S> h1 = ctx.a1;
    h1.m = Silu<S>::forward(ctx.a1.m);
    ctx.a2 = conv2.forward(h1, ctx.c2);
    FeatureMap<S> h2 = ctx.a2;
    h2.m = Silu<S>::forward(ctx.a2.m);
    ctx.a3 = conv3.forward(h2, ctx.c3);
    FeatureMap<S> h3 = ctx.a3;
    h3.m = Silu<S>::forward(ctx.a3.m);
    FeatureMap<S> logits = head.forward(h3, ctx.ch);
    ctx.probs = softmax_channels(logits);
    return ctx.probs;
  }

  // Returns the gradient w.r.t. the image channel only (coordinate channels
  // are constants).  Accumulates parameter gradients.
  FeatureMap<S> backward(const FeatureMap<S>& dprobs, const Ctx& ctx) {
    return backward_logits(softmax_channels_backward(dprobs, ctx.probs), ctx);
  }

  // Same chain entered below the softmax; lets cross-entropy training use the
  // fused (probs − onehot) gradient, which stays finite when a true-class
  // probability underflows.
  FeatureMap<S> backward_logits(const FeatureMap<S>& dlogits, const Ctx& ctx) {
    FeatureMap<S> dh3 = head.backward(dlogits, ctx.ch);
    dh3.m = Silu<S>::backward(dh3.m, ctx.a3.m);
    FeatureMap<S> dh2 = conv3.backward(dh3, ctx.c3);
    dh2.m = Silu<S>::backward(dh2.m, ctx.a2.m);
    FeatureMap<S> dh1 = conv2.backward(dh2, ctx.c2);
    dh1.m = Silu<S>::backward(dh1.m, ctx.a1.m);
    FeatureMap<S> dinput = conv1.backward(dh1, ctx.c1);
    FeatureMap<S> dimage(1, dinput.h, dinput.w);
    dimage.m.row(0) = dinput.m.row(0);
    return dimage;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    conv1.visit(prefix + ".conv1", f);
    conv2.visit(prefix + ".conv2", f);
    conv3.visit(prefix + ".conv3", f);
    head.visit(prefix + ".head", f);
  }

  HuWindow window;
  Conv2D<S> conv1, conv2, conv3, head;

 private:
  FeatureMap<S> make_input(const FeatureMap<S>& image, S z_frac) const {
    FeatureMap<S> input(kInputChannels, image.h, image.w);
    input.m.row(0) = image.m.row(0);
    for (int yy = 0; yy < image.h; ++yy) {
      const S yc = image.h > 1
                       ? static_cast<S>(2.0 * yy / (image.h - 1) - 1.0)
                       : S(0);
      for (int xx = 0; xx < image.w; ++xx) {
        const S xc = image.w > 1
                         ? static_cast<S>(2.0 * xx / (image.w - 1) - 1.0)
                         : S(0);
        input.m(1, yy * image.w + xx) = yc;
        input.m(2, yy * image.w + xx) = xc;
      }
    }
    input.m.row(3).setConstant(z_frac);
    return input;
  }

  std::map<int, OrganInfo> organ_table_;
  std::vector<int> class_ids_;
  std::map<int, int> class_of_;
  int hidden_;
};

// Fraction of the z-axis mapped to [−1, 1] for the coordinate channel.
inline double z_fraction(Eigen::Index z, Eigen::Index depth) {
  return depth > 1 ? 2.0 * static_cast<double>(z) / (depth - 1) - 1.0 : 0.0;
}

// Argmax segmentation of a whole volume.
SegmentationMask segment_volume(const SegmenterNet<float>& net,
                                const Volume& volume);

// Analytic phantom-aware segmenter: one-hot probabilities read straight off a
// ground-truth mask slice, in class_ids order.  This is the oracle that
// trained segmenters are measured against.
FeatureMap<float> oracle_segmenter_probs(const SegmentationMask& mask,
                                         Eigen::Index z,
                                         const std::vector<int>& class_ids);

// ---------------------------------------------------------------------------
// Slice-level contrast-phase classifier: two conv/pool stages and a linear
// head over the pooled features.  The head is zero-initialized so the
// untrained classifier reports the uniform distribution.

template <typename S>
class PhaseClassifierNet {
 public:
  PhaseClassifierNet(int c1, int c2)
      : window{}, conv1(1, c1, 3), conv2(c1, c2, 3), fc(0, 0), c1_(c1), c2_(c2) {}

  // The linear head's size depends on the slice geometry; bind it once.
  void bind_geometry(int h, int w) {
    if (h % 16 != 0 || w % 16 != 0) {
      throw ShapeError("phase classifier needs slice dims divisible by 16");
    }
    h_ = h;
    w_ = w;
    fc = Linear<S>(c2_ * (h / 16) * (w / 16), kNumPhases);
  }

  void init(uint64_t root_seed) {
    Rng rng = stream_rng(root_seed, "classifier-init");
    conv1.init_he(rng);
    conv2.init_he(rng);
    // Zero head: uniform probabilities before training.
    fc.W.setZero();
    fc.b.setZero();
  }

  int feature_channels1() const { return c1_; }
  int feature_channels2() const { return c2_; }
  int height() const { return h_; }
  int width() const { return w_; }

  struct Ctx {
    typename Conv2D<S>::Ctx c1, c2;
    typename Linear<S>::Ctx lin;
    FeatureMap<S> a1, a2;              // pre-activations
    int p1h = 0, p1w = 0;              // dims entering the second pool
    std::array<S, kNumPhases> probs{};
  };

  std::array<S, kNumPhases> forward(const FeatureMap<S>& model_slice,
                                    Ctx& ctx) const {
    model_slice.require_shape(1, h_, w_, "phase classifier");
    ctx.a1 = conv1.forward(model_slice, ctx.c1);
    FeatureMap<S> h1 = ctx.a1;
    h1.m = Silu<S>::forward(ctx.a1.m);
    FeatureMap<S> p1 = AvgPool4x4<S>::forward(h1);
    ctx.p1h = p1.h;
    ctx.p1w = p1.w;
    ctx.a2 = conv2.forward(p1, ctx.c2);
    FeatureMap<S> h2 = ctx.a2;
    h2.m = Silu<S>::forward(ctx.a2.m);
    FeatureMap<S> p2 = AvgPool4x4<S>::forward(h2);
    VecX<S> flat = Eigen::Map<const VecX<S>>(p2.m.data(), p2.m.size());
    VecX<S> logits = fc.forward(flat, ctx.lin);
    const S mx = logits.maxCoeff();
    VecX<S> e = (logits.array() - mx).exp().matrix();
    e /= e.sum();
    for (int k = 0; k < kNumPhases; ++k) ctx.probs[k] = e[k];
    return ctx.probs;
  }

  // Gradient w.r.t. the input slice; accumulates parameter gradients.
  FeatureMap<S> backward(const std::array<S, kNumPhases>& dprobs,
                         const Ctx& ctx) {
    // Softmax backward on the 4-vector.
    S dot = 0;
    for (int k = 0; k < kNumPhases; ++k) dot += ctx.probs[k] * dprobs[k];
    VecX<S> dlogits(kNumPhases);
    for (int k = 0; k < kNumPhases; ++k) {
      dlogits[k] = ctx.probs[k] * (dprobs[k] - dot);
    }
    VecX<S> dflat = fc.backward(dlogits, ctx.lin);
    FeatureMap<S> dp2(c2_, ctx.p1h / 4, ctx.p1w / 4);
    Eigen::Map<VecX<S>>(dp2.m.data(), dp2.m.size()) = dflat;
    FeatureMap<S> dh2 = AvgPool4x4<S>::backward(dp2, ctx.p1h, ctx.p1w);
    dh2.m = Silu<S>::backward(dh2.m, ctx.a2.m);
    FeatureMap<S> dp1 = conv2.backward(dh2, ctx.c2);
    FeatureMap<S> dh1 = AvgPool4x4<S>::backward(dp1, h_, w_);
    dh1.m = Silu<S>::backward(dh1.m, ctx.a1.m);
    return conv1.backward(dh1, ctx.c1);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    conv1.visit(prefix + ".conv1", f);
    conv2.visit(prefix + ".conv2", f);
    fc.visit(prefix + ".fc", f);
  }

  HuWindow window;
  Conv2D<S> conv1, conv2;
  Linear<S> fc;

 private:
  int c1_, c2_;
  int h_ = 0, w_ = 0;
};

// Mean per-slice probabilities over a volume; the volume-level prediction is
// the argmax of this average.
std::array<double, kNumPhases> classify_volume(
    const PhaseClassifierNet<float>& net, const Volume& volume);

Phase phase_argmax(const std::array<double, kNumPhases>& probs);

// ---------------------------------------------------------------------------
// Training and evaluation.

struct AuxTrainConfig {
  int seg_steps = 1400;
  int cls_steps = 1600;
  int batch = 4;
  double lr = 5e-3;
  int hidden = 16;          // segmenter feature width
  int cls_channels1 = 8;    // classifier widths
  int cls_channels2 = 16;
  int holdout_patients = 4; // taken from the end of the sorted patient list
  uint64_t seed = 0;
};

struct SegmenterMetrics {
  std::map<int, double> dice;  // organ id -> aggregate Dice over the holdout
  double mean_dice = 0.0;
  double min_organ_dice = 0.0;  // worst non-background, non-lesion class
};

struct ClassifierMetrics {
  double volume_accuracy = 0.0;
  double slice_accuracy = 0.0;
  std::array<std::array<int, kNumPhases>, kNumPhases> confusion{};  // [true][pred]
};

std::pair<SegmenterNet<float>, SegmenterMetrics> train_segmenter(
    const Manifest& manifest, const AuxTrainConfig& cfg);

std::pair<PhaseClassifierNet<float>, ClassifierMetrics> train_classifier(
    const Manifest& manifest, const AuxTrainConfig& cfg);

// Aggregate per-organ Dice of the net against ground-truth masks.
std::map<int, double> dice_per_organ(const SegmenterNet<float>& net,
                                     const std::vector<LoadedBundle>& bundles);

void save_segmenter(const SegmenterNet<float>& net,
                    const std::filesystem::path& path);
SegmenterNet<float> load_segmenter(const std::filesystem::path& path);

void save_classifier(const PhaseClassifierNet<float>& net,
                     const std::filesystem::path& path);
PhaseClassifierNet<float> load_classifier(const std::filesystem::path& path);

// Fingerprint of every parameter byte, for verifying frozen-ness.
template <typename Model>
uint64_t param_hash(const Model& model, const std::string& prefix) {
  uint64_t h = fnv1a64(prefix);
  const_cast<Model&>(model).visit(
      prefix, [&](const std::string& name, float* w, float* /*g*/,
                  Eigen::Index size) {
        h = fnv1a64(name, h);
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(w),
                                     static_cast<size_t>(size) * sizeof(float)),
                    h);
      });
  return h;
}

}  // namespace ctphase
