#include "ctphase/eval/eval.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "ctphase/common/jsonio.hpp"
#include "ctphase/common/log.hpp"

namespace ctphase {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Image similarity.

namespace {

std::vector<double> gaussian_kernel(int window, double sigma) {
  std::vector<double> k(static_cast<size_t>(window) * window);
  const double c = (window - 1) / 2.0;
  double sum = 0.0;
  for (int y = 0; y < window; ++y) {
    for (int x = 0; x < window; ++x) {
      const double d2 = (y - c) * (y - c) + (x - c) * (x - c);
      k[static_cast<size_t>(y) * window + x] = std::exp(-d2 / (2 * sigma * sigma));
      sum += k[static_cast<size_t>(y) * window + x];
    }
  }
  for (double& v : k) v /= sum;
  return k;
}

void require_slice_pair(const FeatureMap<float>& a, const FeatureMap<float>& b,
                        const char* who) {
  a.require_shape(1, a.h, a.w, who);
  b.require_shape(1, a.h, a.w, who);
}

}  // namespace

double ssim(const FeatureMap<float>& a, const FeatureMap<float>& b, int window,
            double dynamic_range) {
  require_slice_pair(a, b, "ssim");
  if (window < 3 || window % 2 == 0) {
    throw ConfigError("ssim window must be odd and >= 3");
  }
  if (a.h < window || a.w < window) {
    throw ShapeError("ssim: slice smaller than the window");
  }
  const std::vector<double> k = gaussian_kernel(window, 1.5);
  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);

  double total = 0.0;
  const int ny = a.h - window + 1;
  const int nx = a.w - window + 1;
  for (int y0 = 0; y0 < ny; ++y0) {
    for (int x0 = 0; x0 < nx; ++x0) {
      double ma = 0.0, mb = 0.0, aa = 0.0, bb = 0.0, ab = 0.0;
      for (int dy = 0; dy < window; ++dy) {
        for (int dx = 0; dx < window; ++dx) {
          const double w = k[static_cast<size_t>(dy) * window + dx];
          const double va = a.m(0, static_cast<Eigen::Index>(y0 + dy) * a.w + x0 + dx);
          const double vb = b.m(0, static_cast<Eigen::Index>(y0 + dy) * a.w + x0 + dx);
          ma += w * va;
          mb += w * vb;
          aa += w * va * va;
          bb += w * vb * vb;
          ab += w * va * vb;
        }
      }
      const double sa = aa - ma * ma;
      const double sb = bb - mb * mb;
      const double sab = ab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * sab + c2)) /
               ((ma * ma + mb * mb + c1) * (sa + sb + c2));
    }
  }
  return total / (static_cast<double>(ny) * nx);
}

double ssim_volume(const Volume& a, const Volume& b, int window,
                   double dynamic_range) {
  if (!congruent(a.dims, a.spacing_mm, b.dims, b.spacing_mm)) {
    throw ShapeError("ssim_volume: volumes are not congruent");
  }
  double total = 0.0;
  for (Eigen::Index z = 0; z < a.dims.z; ++z) {
    total += ssim(hu_slice(a, z), hu_slice(b, z), window, dynamic_range);
  }
  return total / static_cast<double>(a.dims.z);
}

namespace {

double psnr_from_mse(double mse, double dynamic_range) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap,
                  10.0 * std::log10(dynamic_range * dynamic_range / mse));
}

}  // namespace

double psnr(const FeatureMap<float>& a, const FeatureMap<float>& b,
            double dynamic_range) {
  require_slice_pair(a, b, "psnr");
  const double mse =
      (a.m - b.m).template cast<double>().array().square().mean();
  return psnr_from_mse(mse, dynamic_range);
}

double psnr_volume(const Volume& a, const Volume& b, double dynamic_range) {
  if (!congruent(a.dims, a.spacing_mm, b.dims, b.spacing_mm)) {
    throw ShapeError("psnr_volume: volumes are not congruent");
  }
  const double mse =
      (a.data - b.data).template cast<double>().square().mean();
  return psnr_from_mse(mse, dynamic_range);
}

// ---------------------------------------------------------------------------
// Feature projection and distributional distance.

FeatureProjector::FeatureProjector(uint64_t seed, int dim,
                                   Eigen::Index input_size) {
  if (dim <= 0 || input_size <= 0) {
    throw ConfigError("feature projector needs a positive dim and input size");
  }
  Rng rng = stream_rng(seed, "eval/features");
  bias_.resize(dim);
  for (int i = 0; i < dim; ++i) {
    bias_[i] = rng.normal();
  }
  weights_.resize(dim, input_size);
  const double scale = 1.0 / std::sqrt(static_cast<double>(input_size));
  for (int i = 0; i < dim; ++i) {
    for (Eigen::Index j = 0; j < input_size; ++j) {
      weights_(i, j) = rng.normal() * scale;
    }
  }
}

FeatureVec FeatureProjector::operator()(const FeatureMap<float>& slice) const {
  slice.require_shape(1, slice.h, slice.w, "feature projector");
  if (slice.pixels() != weights_.cols()) {
    throw ShapeError("feature projector was built for a different slice size");
  }
  const Eigen::VectorXd x = slice.m.row(0).transpose().cast<double>();
  return bias_ + (weights_ * x).array().tanh().matrix();
}

FeatureVec extract_features(const FeatureMap<float>& slice, uint64_t seed,
                            int dim) {
  return FeatureProjector(seed, dim, slice.pixels())(slice);
}

namespace {

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

GaussianFit fit_gaussian(const std::vector<FeatureVec>& set, Eigen::Index d) {
  const Eigen::Index n = static_cast<Eigen::Index>(set.size());
  GaussianFit g;
  g.mean = Eigen::VectorXd::Zero(d);
  for (const auto& v : set) {
    if (v.size() != d) throw ShapeError("fid: feature dimensions differ");
    g.mean += v;
  }
  g.mean /= static_cast<double>(n);
  g.cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& v : set) {
    const Eigen::VectorXd c = v - g.mean;
    g.cov.noalias() += c * c.transpose();
  }
  g.cov /= static_cast<double>(n - 1);
  return g;
}

// Eigenvalues of a symmetric matrix clipped at zero; warns when clipping
// exceeds rounding scale.
Eigen::VectorXd clipped_eigenvalues(
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>& es, const char* who) {
  Eigen::VectorXd ev = es.eigenvalues();
  const double tol = 1e-9 * std::max(1.0, std::abs(ev.maxCoeff()));
  bool degenerate = false;
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < 0.0) {
      if (ev[i] < -tol) degenerate = true;
      ev[i] = 0.0;
    }
  }
  if (degenerate) {
    log::warn("%s: clipped negative covariance eigenvalues beyond tolerance",
              who);
  }
  return ev;
}

}  // namespace

double fid(const std::vector<FeatureVec>& real,
           const std::vector<FeatureVec>& gen) {
  if (real.empty() || gen.empty()) {
    throw DataError("fid requires two non-empty feature sets");
  }
  const Eigen::Index d = real[0].size();
  if (static_cast<Eigen::Index>(real.size()) < d + 1 ||
      static_cast<Eigen::Index>(gen.size()) < d + 1) {
    throw DataError("fid requires at least dim + 1 vectors per set");
  }
  const GaussianFit r = fit_gaussian(real, d);
  const GaussianFit g = fit_gaussian(gen, d);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_r(r.cov);
  const Eigen::VectorXd ev_r = clipped_eigenvalues(es_r, "fid");
  const Eigen::MatrixXd sqrt_r = es_r.eigenvectors() *
                                 ev_r.cwiseSqrt().asDiagonal() *
                                 es_r.eigenvectors().transpose();

  Eigen::MatrixXd m = sqrt_r * g.cov * sqrt_r;
  m = 0.5 * (m + m.transpose());  // symmetrize rounding drift
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(m);
  const double trace_sqrt =
      clipped_eigenvalues(es_m, "fid").cwiseSqrt().sum();

  return (r.mean - g.mean).squaredNorm() + r.cov.trace() + g.cov.trace() -
         2.0 * trace_sqrt;
}

// ---------------------------------------------------------------------------
// Organ-level fidelity.

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw ShapeError("pearson: sample sizes differ");
  }
  const size_t n = x.size();
  if (n < 2) {
    throw DataError("pearson requires at least 2 samples");
  }
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) {
    log::warn("pearson: zero variance in one sample; reporting 0");
    return 0.0;
  }
  return sxy / std::sqrt(sxx * syy);
}

CorrelationResult hu_size_correlation(const std::vector<OrganStats>& pred,
                                      const std::vector<OrganStats>& gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("hu_size_correlation: patient counts differ");
  }
  std::vector<double> hu_p, hu_g, size_p, size_g;
  for (size_t i = 0; i < pred.size(); ++i) {
    for (const OrganRecord& rp : pred[i].records) {
      const OrganRecord* rg = gt[i].find(rp.organ_id);
      if (!rg) continue;
      hu_p.push_back(rp.mean_hu);
      hu_g.push_back(rg->mean_hu);
      size_p.push_back(rp.volume_mm3);
      size_g.push_back(rg->volume_mm3);
    }
  }
  if (hu_p.size() < 3) {
    throw DataError("hu_size_correlation requires at least 3 pooled organ "
                    "samples, got " + std::to_string(hu_p.size()));
  }
  CorrelationResult r;
  r.hu = pearson(hu_p, hu_g);
  r.size = pearson(size_p, size_g);
  r.n_points = static_cast<int>(hu_p.size());
  return r;
}

// ---------------------------------------------------------------------------
// Phase confusion.

ConfusionResult confusion_from_pairs(
    const std::vector<std::pair<Phase, Phase>>& intended_predicted) {
  ConfusionResult r;
  for (const auto& [intended, predicted] : intended_predicted) {
    ++r.counts[static_cast<size_t>(intended)][static_cast<size_t>(predicted)];
  }
  for (int c = 0; c < kNumPhases; ++c) {
    int col = 0, row = 0;
    for (int k = 0; k < kNumPhases; ++k) {
      col += r.counts[static_cast<size_t>(k)][static_cast<size_t>(c)];
      row += r.counts[static_cast<size_t>(c)][static_cast<size_t>(k)];
    }
    const int diag = r.counts[static_cast<size_t>(c)][static_cast<size_t>(c)];
    r.precision[static_cast<size_t>(c)] = col > 0 ? static_cast<double>(diag) / col : 0.0;
    r.recall[static_cast<size_t>(c)] = row > 0 ? static_cast<double>(diag) / row : 0.0;
  }
  return r;
}

ConfusionResult phase_confusion(
    const PhaseClassifierNet<float>& cls,
    const std::vector<std::pair<Volume, Phase>>& samples) {
  std::vector<std::pair<Phase, Phase>> pairs;
  pairs.reserve(samples.size());
  for (const auto& [volume, intended] : samples) {
    pairs.push_back({intended, phase_argmax(classify_volume(cls, volume))});
  }
  return confusion_from_pairs(pairs);
}

// ---------------------------------------------------------------------------
// Direction-level evaluation.

std::string direction_key(Phase src, Phase tgt) {
  return phase_to_string(src) + "->" + phase_to_string(tgt);
}

Volume clamp_to_window(const Volume& v, const HuWindow& win) {
  Volume out = v;
  out.data = v.data.max(static_cast<float>(win.center - win.half_width))
                 .min(static_cast<float>(win.center + win.half_width));
  return out;
}

namespace {

struct EvalPhase {
  Volume volume;           // HU, as loaded
  Volume clamped;          // window-clamped copy for similarity metrics
  SegmentationMask mask;   // ground-truth labels
};

}  // namespace

MetricReport evaluate_directions(const Denoiser<float>& den,
                                 const SegmenterNet<float>& seg,
                                 const PhaseClassifierNet<float>& cls,
                                 const Manifest& manifest,
                                 const EvalConfig& cfg) {
  std::map<std::string, std::map<Phase, EvalPhase>> patients;
  for (const auto& [pid, phases] : manifest) {
    if (phases.size() < static_cast<size_t>(kNumPhases)) {
      log::warn("patient %s lacks all %d phases; skipped from evaluation",
                pid.c_str(), kNumPhases);
      continue;
    }
    std::map<Phase, EvalPhase> loaded;
    bool usable = true;
    for (const auto& [phase, dir] : phases) {
      LoadedBundle b = load_bundle(dir);
      if (!b.mask) {
        log::warn("patient %s phase %s has no mask; patient skipped",
                  pid.c_str(), phase_to_string(phase).c_str());
        usable = false;
        break;
      }
      EvalPhase ep;
      ep.volume = std::move(b.volume);
      ep.clamped = clamp_to_window(ep.volume, cfg.window);
      ep.mask = std::move(*b.mask);
      loaded[phase] = std::move(ep);
    }
    if (usable) patients[pid] = std::move(loaded);
  }
  if (patients.empty()) {
    throw DataError("evaluation manifest has no usable 4-phase patients");
  }

  const double dynamic_range = 2.0 * cfg.window.half_width;
  const auto& first =
      patients.begin()->second.begin()->second.volume;
  const FeatureProjector project(cfg.feature_seed, cfg.feature_dim,
                                 first.dims.y * first.dims.x);
  auto volume_features = [&](const Volume& clamped) {
    std::vector<FeatureVec> f;
    f.reserve(static_cast<size_t>(clamped.dims.z));
    for (Eigen::Index z = 0; z < clamped.dims.z; ++z) {
      f.push_back(project(normalize_slice(hu_slice(clamped, z), cfg.window)));
    }
    return f;
  };

  // Ground-truth feature sets and organ stats, shared by every direction
  // with the same target phase.
  std::map<Phase, std::vector<FeatureVec>> real_features;
  std::map<Phase, std::vector<OrganStats>> gt_stats;
  for (const auto& [pid, phases] : patients) {
    for (const auto& [phase, ep] : phases) {
      auto f = volume_features(ep.clamped);
      auto& pool = real_features[phase];
      pool.insert(pool.end(), f.begin(), f.end());
      gt_stats[phase].push_back(compute_organ_stats(ep.volume, ep.mask));
    }
  }

  MetricReport report;
  std::vector<std::pair<Phase, Phase>> confusion_pairs;
  for (Phase src : kAllPhases) {
    for (Phase tgt : kAllPhases) {
      if (src == tgt) continue;
      double ssim_sum = 0.0;
      double psnr_sum = 0.0;
      std::vector<FeatureVec> gen_features;
      std::vector<OrganStats> pred_stats;
      for (const auto& [pid, phases] : patients) {
        const Volume enhanced = enhance_volume(den, phases.at(src).volume,
                                               tgt, cfg.sampler, cfg.seed);
        const Volume ec = clamp_to_window(enhanced, cfg.window);
        const Volume& tc = phases.at(tgt).clamped;
        ssim_sum += ssim_volume(ec, tc, cfg.ssim_window, dynamic_range);
        psnr_sum += psnr_volume(ec, tc, dynamic_range);
        auto f = volume_features(ec);
        gen_features.insert(gen_features.end(), f.begin(), f.end());
        pred_stats.push_back(
            compute_organ_stats(enhanced, segment_volume(seg, enhanced)));
        confusion_pairs.push_back(
            {tgt, phase_argmax(classify_volume(cls, enhanced))});
      }
      const double n = static_cast<double>(patients.size());
      const CorrelationResult corr =
          hu_size_correlation(pred_stats, gt_stats.at(tgt));
      DirectionMetrics m;
      m.ssim = ssim_sum / n;
      m.psnr = psnr_sum / n;
      m.fid = fid(real_features.at(tgt), gen_features);
      m.hu_correlation = corr.hu;
      m.size_correlation = corr.size;
      report.directions[direction_key(src, tgt)] = m;
      log::info("evaluated %s: ssim %.4f psnr %.2f fid %.3f r_hu %.3f "
                "r_size %.3f",
                direction_key(src, tgt).c_str(), m.ssim, m.psnr, m.fid,
                m.hu_correlation, m.size_correlation);
    }
  }

  const ConfusionResult conf = confusion_from_pairs(confusion_pairs);
  report.confusion = conf.counts;
  report.precision = conf.precision;
  report.recall = conf.recall;
  report.metadata = json{{"n_patients", patients.size()},
                         {"seed", cfg.seed},
                         {"sampler_steps", cfg.sampler.steps},
                         {"ssim_window", cfg.ssim_window},
                         {"dynamic_range", dynamic_range},
                         {"feature_seed", cfg.feature_seed},
                         {"feature_dim", cfg.feature_dim},
                         {"feature_space", "seeded-projection-tanh"}};
  return report;
}

// ---------------------------------------------------------------------------
// Reports.

json report_to_json(const MetricReport& report) {
  json dirs = json::object();
  for (const auto& [key, m] : report.directions) {
    dirs[key] = json{{"ssim", m.ssim},
                     {"ssim_x100", 100.0 * m.ssim},
                     {"psnr", m.psnr},
                     {"psnr_x100", 100.0 * m.psnr},
                     {"fid", m.fid},
                     {"hu_correlation", m.hu_correlation},
                     {"size_correlation", m.size_correlation}};
  }
  json conf = json::array();
  for (const auto& row : report.confusion) {
    conf.push_back(row);
  }
  return json{{"directions", dirs},
              {"confusion", conf},
              {"precision", report.precision},
              {"recall", report.recall},
              {"metadata", report.metadata}};
}

void write_report(const MetricReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  write_json_file(report_to_json(report), dir / "report.json");

  std::ofstream csv(dir / "report.csv", std::ios::binary);
  if (!csv) {
    throw DataError("cannot write report.csv under " + dir.string());
  }
  csv << "source,target,ssim,ssim_x100,psnr,psnr_x100,fid,"
         "hu_correlation,size_correlation\n";
  for (const auto& [key, m] : report.directions) {
    char line[256];
    std::snprintf(line, sizeof(line),
                  "%c,%c,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", key.front(),
                  key.back(), m.ssim, 100.0 * m.ssim, m.psnr, 100.0 * m.psnr,
                  m.fid, m.hu_correlation, m.size_correlation);
    csv << line;
  }
}

}  // namespace ctphase
