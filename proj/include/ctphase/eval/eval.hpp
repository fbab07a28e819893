#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ctphase/auxnets/auxnets.hpp"
#include "ctphase/backbone/diffusion.hpp"
#include "ctphase/core/bundle.hpp"
#include "ctphase/core/stats.hpp"

namespace ctphase {

// Metric suite and report assembly: structural similarity, peak SNR, a
// distributional feature distance, per-organ HU/size correlation, and phase
// confusion, rolled up per enhancement direction.

// ---------------------------------------------------------------------------
// Image similarity.

// PSNR values at or above the cap (including the MSE = 0 case) are reported
// as the cap itself.
inline constexpr double kPsnrCap = 99.0;

// Single-scale SSIM with a Gaussian window (sigma 1.5), averaged over the
// positions where the window lies fully inside the slice.  `dynamic_range`
// sets the stabilizers C1 = (0.01 L)^2 and C2 = (0.03 L)^2.
double ssim(const FeatureMap<float>& a, const FeatureMap<float>& b, int window,
            double dynamic_range);

// Mean slice SSIM over congruent volumes.
double ssim_volume(const Volume& a, const Volume& b, int window,
                   double dynamic_range);

// 10 log10(L^2 / MSE), capped at kPsnrCap.
double psnr(const FeatureMap<float>& a, const FeatureMap<float>& b,
            double dynamic_range);
double psnr_volume(const Volume& a, const Volume& b, double dynamic_range);

// ---------------------------------------------------------------------------
// Distributional feature distance.

using FeatureVec = Eigen::VectorXd;

// Fixed seeded projection features: f = b + tanh(W x / sqrt(n)).  The bias is
// drawn before the weights, so a zero slice maps to the bias vector for any
// slice size.  Values are internally comparable for a fixed (seed, dim) but
// carry no meaning against externally published feature distances.
class FeatureProjector {
 public:
  FeatureProjector(uint64_t seed, int dim, Eigen::Index input_size);

  FeatureVec operator()(const FeatureMap<float>& slice) const;

  int dim() const { return static_cast<int>(bias_.size()); }
  Eigen::Index input_size() const { return weights_.cols(); }

 private:
  Eigen::MatrixXd weights_;  // dim x input_size, pre-scaled by 1/sqrt(n)
  Eigen::VectorXd bias_;
};

// One-shot convenience over a throwaway projector.
FeatureVec extract_features(const FeatureMap<float>& slice, uint64_t seed,
                            int dim = 64);

// Frechet distance between Gaussian fits of the two feature sets:
// ||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2}), with the matrix
// square root taken via symmetric eigendecomposition and negative eigenvalues
// clipped at zero (a warning, not an error).  Each set needs at least dim + 1
// vectors for a full-rank sample covariance.
double fid(const std::vector<FeatureVec>& real,
           const std::vector<FeatureVec>& gen);

// ---------------------------------------------------------------------------
// Organ-level fidelity.

// Pearson correlation coefficient; sizes must match, n >= 2.  A degenerate
// (zero-variance) side yields 0 with a warning rather than an error.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

struct CorrelationResult {
  double hu = 0.0;
  double size = 0.0;
  int n_points = 0;  // pooled (patient, organ) samples behind both r values
};

// Pools per-organ (mean HU, volume) pairs over index-aligned stats records
// (one per patient) and correlates prediction against ground truth.  Organs
// present on only one side of a pair are skipped; fewer than 3 pooled points
// is a data error.
CorrelationResult hu_size_correlation(const std::vector<OrganStats>& pred,
                                      const std::vector<OrganStats>& gt);

// ---------------------------------------------------------------------------
// Phase confusion.

struct ConfusionResult {
  // counts[intended][predicted]
  std::array<std::array<int, kNumPhases>, kNumPhases> counts{};
  std::array<double, kNumPhases> precision{};  // 0 where nothing was predicted
  std::array<double, kNumPhases> recall{};     // 0 where nothing was intended
};

ConfusionResult confusion_from_pairs(
    const std::vector<std::pair<Phase, Phase>>& intended_predicted);

// Classifies each volume and tallies it against its intended phase.
ConfusionResult phase_confusion(
    const PhaseClassifierNet<float>& cls,
    const std::vector<std::pair<Volume, Phase>>& samples);

// ---------------------------------------------------------------------------
// Direction-level evaluation and reports.

struct DirectionMetrics {
  double ssim = 0.0;
  double psnr = 0.0;
  double fid = 0.0;
  double hu_correlation = 0.0;
  double size_correlation = 0.0;
};

struct EvalConfig {
  SamplerConfig sampler;      // enhancement sampler settings
  int ssim_window = 11;
  uint64_t seed = 0;          // enhancement noise root
  uint64_t feature_seed = 113;
  int feature_dim = 64;
  HuWindow window;            // evaluation window: clamp + dynamic range
};

struct MetricReport {
  std::map<std::string, DirectionMetrics> directions;  // key "N->V"
  std::array<std::array<int, kNumPhases>, kNumPhases> confusion{};
  std::array<double, kNumPhases> precision{};
  std::array<double, kNumPhases> recall{};
  json metadata;
};

std::string direction_key(Phase src, Phase tgt);

// Copy of `v` with intensities clamped to the window's HU range.
Volume clamp_to_window(const Volume& v, const HuWindow& win);

// Full protocol over every ordered phase direction: enhance each patient's
// source volume toward the target phase, then score SSIM/PSNR against the
// clamped ground truth, feature distance over pooled slices, HU/size
// correlation from segmenter-derived organ stats, and the pooled phase
// confusion of all enhanced volumes.  Patients missing any phase or mask are
// skipped with a warning; an empty usable set is a data error.
MetricReport evaluate_directions(const Denoiser<float>& den,
                                 const SegmenterNet<float>& seg,
                                 const PhaseClassifierNet<float>& cls,
                                 const Manifest& manifest,
                                 const EvalConfig& cfg);

json report_to_json(const MetricReport& report);

// Writes report.json plus a flat report.csv (one row per direction, raw and
// x100 similarity columns) under `dir`.  Byte-deterministic.
void write_report(const MetricReport& report, const std::filesystem::path& dir);

}  // namespace ctphase
