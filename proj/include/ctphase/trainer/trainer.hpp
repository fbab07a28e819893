#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ctphase/auxnets/auxnets.hpp"
#include "ctphase/backbone/diffusion.hpp"
#include "ctphase/core/bundle.hpp"
#include "ctphase/losses/losses.hpp"
#include "ctphase/nn/adam.hpp"

namespace ctphase {

// Training orchestration: batches intra-patient phase pairs, runs the staged
// loss schedule, backpropagates every active loss through the shared
// denoiser, steps the optimizer (including the learnable uncertainty
// scalars), and handles checkpoint/resume.

// ---------------------------------------------------------------------------
// Configuration.

struct TrainConfig {
  int64_t total_steps = 8000;
  StageThresholds thresholds = StageThresholds::desk();
  int batch = 2;
  double lr = 1e-4;
  uint64_t seed = 0;
  LossWeights weights;
  int64_t cycle_every = 1;        // compute the cycle path every k-th step
  int64_t checkpoint_every = 1000;
  std::filesystem::path manifest_path;
  std::filesystem::path segmenter_path;
  std::filesystem::path classifier_path;
  // Uncertainty handoff at the learnable threshold: "continuity" starts each
  // s_i at -ln(lambda_i) so the effective weight is unchanged, "unit" starts
  // at 0 (weight 1).
  std::string uncertainty_init = "continuity";
  UNetConfig unet;
  int schedule_T = 200;
  HuWindow window;

  void validate() const;
};

// Parses TrainConfig from a JSON object; unknown keys are config errors.
// "thresholds" accepts either a 3-element array or a preset name
// ("paper", "desk", "paper_alt_10k").
TrainConfig train_config_from_json(const json& j);
json train_config_to_json(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Pair enumeration.

struct TrainPair {
  std::string patient;
  Phase src = Phase::N;
  Phase tgt = Phase::V;

  bool operator==(const TrainPair&) const = default;
};

// All ordered (source, target) phase pairs per patient, source != target;
// 12 directions for a complete four-phase patient.  Patients with fewer than
// two phases are skipped with a warning.
std::vector<TrainPair> make_pairs(const Manifest& manifest);

// ---------------------------------------------------------------------------
// In-memory training set.

struct PhaseData {
  Volume volume;          // HU
  SegmentationMask mask;  // source-side supervision
  OrganStats stats;       // precomputed sidecar; the only target-side signal
};

struct TrainData {
  std::map<std::string, std::map<Phase, PhaseData>> patients;
  std::vector<TrainPair> pairs;
};

// Loads every bundle the manifest names, requiring a mask and an
// organ_stats.json sidecar on each, and enumerates training pairs.
TrainData load_train_data(const std::filesystem::path& manifest_path);

// ---------------------------------------------------------------------------
// Trainer.

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  // One optimization step: sample a batch, compute the active losses, apply
  // one Adam update.  Non-finite loss values abort with a diagnostic naming
  // the loss.
  LossBundle train_step();

  // Runs to total_steps, appending one JSON line per step to
  // out_dir/log.jsonl and checkpointing under out_dir/checkpoints/
  // ("latest.ckpt" plus step-tagged files) every checkpoint_every steps.
  void run(const std::filesystem::path& out_dir);

  // Full state round trip: backbone params, optimizer moments, uncertainty
  // scalars, random stream, and step counter.  Loading verifies the format
  // version and the structural/determinism-relevant config before touching
  // any state.
  void save_checkpoint(const std::filesystem::path& file);
  void load_checkpoint(const std::filesystem::path& file);

  // Log record for one step: step, every loss value, every effective weight,
  // and the combined total.
  json log_line(const LossBundle& bundle) const;

  // Effective weight of every loss at `step`: the fixed lambda before the
  // learnable threshold, exp(-s_i) after, 0 while inactive.
  std::map<std::string, double> effective_weights(int64_t step) const;

  int64_t step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const TrainData& data() const { return data_; }
  Denoiser<float>& denoiser() { return den_; }
  const SegmenterNet<float>& segmenter() const { return seg_; }
  const PhaseClassifierNet<float>& classifier() const { return cls_; }
  UncertaintyParams uncertainty() const;

  // refs_ points into den_ and s_, so the trainer must stay put.
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

 private:
  double loss_weight(LossName n, int64_t step, bool cycle_computed) const;
  void require_finite(double value, LossName n) const;

  TrainConfig cfg_;
  TrainData data_;
  SegmenterNet<float> seg_;
  PhaseClassifierNet<float> cls_;
  Denoiser<float> den_;
  std::vector<ParamRef<float>> refs_;       // denoiser params + uncertainty s
  Adam<float> adam_;
  std::array<float, kAuxLosses.size()> s_{};
  std::array<float, kAuxLosses.size()> s_grad_{};
  Rng rng_;
  int64_t step_ = 0;
  bool warned_undefined_hu_ = false;
  std::map<std::string, double> last_weights_;  // weights used at step_-1
};

}  // namespace ctphase
