#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ctphase/eval/eval.hpp"
#include "ctphase/phantom/dataset.hpp"

using namespace ctphase;
namespace fs = std::filesystem;

namespace {

FeatureMap<float> random_slice(Rng& rng, int h, int w, float amp = 1.0f) {
  FeatureMap<float> s(1, h, w);
  for (Eigen::Index i = 0; i < s.pixels(); ++i) {
    s.m(0, i) = amp * static_cast<float>(rng.uniform() * 2.0 - 1.0);
  }
  return s;
}

// Independent SSIM oracle: kernel built as the outer product of a 1-D
// Gaussian, windows taken as Eigen blocks, weighted moments via array ops.
double ssim_oracle(const FeatureMap<float>& a, const FeatureMap<float>& b,
                   int win, double range) {
  Eigen::VectorXd g(win);
  const double c = (win - 1) / 2.0;
  for (int i = 0; i < win; ++i) {
    g[i] = std::exp(-(i - c) * (i - c) / (2.0 * 1.5 * 1.5));
  }
  Eigen::MatrixXd k = g * g.transpose();
  k /= k.sum();

  Eigen::MatrixXd A(a.h, a.w), B(b.h, b.w);
  for (int y = 0; y < a.h; ++y) {
    for (int x = 0; x < a.w; ++x) {
      A(y, x) = a.m(0, static_cast<Eigen::Index>(y) * a.w + x);
      B(y, x) = b.m(0, static_cast<Eigen::Index>(y) * a.w + x);
    }
  }
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  double total = 0.0;
  int n = 0;
  for (int y = 0; y + win <= a.h; ++y) {
    for (int x = 0; x + win <= a.w; ++x) {
      const Eigen::ArrayXXd wa = A.block(y, x, win, win).array();
      const Eigen::ArrayXXd wb = B.block(y, x, win, win).array();
      const double ma = (k.array() * wa).sum();
      const double mb = (k.array() * wb).sum();
      const double va = (k.array() * wa.square()).sum() - ma * ma;
      const double vb = (k.array() * wb.square()).sum() - mb * mb;
      const double cov = (k.array() * (wa * wb)).sum() - ma * mb;
      total += (2 * ma * mb + c1) * (2 * cov + c2) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++n;
    }
  }
  return total / n;
}

OrganStats stats_of(std::vector<OrganRecord> records) {
  OrganStats s;
  s.records = std::move(records);
  s.n_org = static_cast<int>(s.records.size());
  return s;
}

// Alignment-perfect dataset plus quickly trained aux nets for the
// direction-level driver; quality is irrelevant, only shapes must line up.
struct EvalEnv {
  fs::path root;
  Manifest manifest;
  SegmenterNet<float> seg;
  PhaseClassifierNet<float> cls;
};

const EvalEnv& env() {
  static const EvalEnv e = [] {
    const fs::path root = fs::temp_directory_path() / "ctphase_test_eval";
    fs::remove_all(root);

    DatasetParams p;
    p.seed = 41;
    p.n_patients = 2;
    p.misalign.enabled = false;
    write_dataset(p, root / "data");
    Manifest manifest = load_manifest(root / "data" / "manifest.json");

    AuxTrainConfig ac;
    ac.seg_steps = 60;
    ac.cls_steps = 60;
    ac.batch = 2;
    ac.hidden = 8;
    ac.cls_channels1 = 4;
    ac.cls_channels2 = 8;
    ac.holdout_patients = 1;
    ac.seed = 5;
    return EvalEnv{root, manifest, train_segmenter(manifest, ac).first,
                   train_classifier(manifest, ac).first};
  }();
  return e;
}

}  // namespace

TEST_CASE("ssim is 1 on identical slices and drops under distortion") {
  Rng rng = stream_rng(3, "test/ssim");
  const FeatureMap<float> a = random_slice(rng, 12, 12);
  CHECK(ssim(a, a, 5, 2.0) == doctest::Approx(1.0).epsilon(1e-12));

  FeatureMap<float> noisy = a;
  for (Eigen::Index i = 0; i < noisy.pixels(); ++i) {
    noisy.m(0, i) += 0.3f * static_cast<float>(rng.normal());
  }
  CHECK(ssim(a, noisy, 5, 2.0) < 0.999);

  // An unrelated slice scores well below a noisy copy.
  const FeatureMap<float> other = random_slice(rng, 12, 12);
  CHECK(ssim(a, other, 5, 2.0) < ssim(a, noisy, 5, 2.0));
}

TEST_CASE("ssim matches an independent windowed oracle") {
  Rng rng = stream_rng(4, "test/ssim-oracle");
  for (int trial = 0; trial < 2; ++trial) {
    const FeatureMap<float> a = random_slice(rng, 8, 8);
    FeatureMap<float> b = random_slice(rng, 8, 8);
    b.m = 0.5f * a.m + 0.5f * b.m;  // partially correlated pair
    for (int win : {5, 7}) {
      CHECK(ssim(a, b, win, 2.0) ==
            doctest::Approx(ssim_oracle(a, b, win, 2.0)).epsilon(1e-9));
    }
  }
}

TEST_CASE("ssim is symmetric and validates its inputs") {
  Rng rng = stream_rng(5, "test/ssim-sym");
  const FeatureMap<float> a = random_slice(rng, 9, 11);
  const FeatureMap<float> b = random_slice(rng, 9, 11);
  CHECK(ssim(a, b, 5, 2.0) == doctest::Approx(ssim(b, a, 5, 2.0)).epsilon(1e-12));

  CHECK_THROWS_AS(ssim(a, b, 4, 2.0), ConfigError);
  CHECK_THROWS_AS(ssim(a, b, 1, 2.0), ConfigError);
  const FeatureMap<float> tiny = random_slice(rng, 4, 4);
  CHECK_THROWS_AS(ssim(tiny, tiny, 5, 2.0), ShapeError);
  CHECK_THROWS_AS(ssim(a, tiny, 5, 2.0), ShapeError);
}

TEST_CASE("psnr caps at 99 and matches the closed form") {
  FeatureMap<float> zero(1, 6, 6);
  CHECK(psnr(zero, zero, 255.0) == kPsnrCap);

  FeatureMap<float> offset(1, 6, 6);
  offset.m.setConstant(16.0f);
  const double expected = 10.0 * std::log10(255.0 * 255.0 / 256.0);
  CHECK(psnr(zero, offset, 255.0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(psnr(zero, offset, 255.0) == doctest::Approx(24.0484).epsilon(1e-4));
  CHECK(psnr(offset, zero, 255.0) == psnr(zero, offset, 255.0));

  Rng rng = stream_rng(6, "test/psnr");
  const FeatureMap<float> a = random_slice(rng, 7, 5);
  const FeatureMap<float> b = random_slice(rng, 7, 5);
  const double mse =
      (a.m - b.m).cast<double>().array().square().mean();
  CHECK(psnr(a, b, 2.0) ==
        doctest::Approx(10.0 * std::log10(4.0 / mse)).epsilon(1e-12));
}

TEST_CASE("volume similarity averages slices and checks congruence") {
  Rng rng = stream_rng(7, "test/vol-sim");
  Volume a;
  a.dims = {3, 8, 8};
  a.spacing_mm = {2.0, 1.0, 1.0};
  a.data.resize(a.dims.count());
  for (Eigen::Index i = 0; i < a.data.size(); ++i) {
    a.data[i] = static_cast<float>(rng.uniform() * 600.0 - 200.0);
  }
  Volume b = a;
  CHECK(ssim_volume(a, b, 5, 600.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(psnr_volume(a, b, 600.0) == kPsnrCap);

  // Perturb one slice: the volume score is the mean of per-slice scores.
  for (Eigen::Index i = 0; i < 64; ++i) {
    b.data[64 + i] += static_cast<float>(50.0 * rng.normal());
  }
  double per_slice = 0.0;
  for (Eigen::Index z = 0; z < 3; ++z) {
    per_slice += ssim(hu_slice(a, z), hu_slice(b, z), 5, 600.0);
  }
  CHECK(ssim_volume(a, b, 5, 600.0) ==
        doctest::Approx(per_slice / 3.0).epsilon(1e-12));
  CHECK(ssim_volume(a, b, 5, 600.0) < 1.0);
  CHECK(psnr_volume(a, b, 600.0) < kPsnrCap);

  Volume c = a;
  c.dims = {3, 8, 7};
  c.data.resize(c.dims.count());
  CHECK_THROWS_AS(ssim_volume(a, c, 5, 600.0), ShapeError);
  Volume d = a;
  d.spacing_mm.x = 2.0;
  CHECK_THROWS_AS(psnr_volume(a, d, 600.0), ShapeError);
}

TEST_CASE("feature projection is seeded, biased at zero, and bounded") {
  const FeatureMap<float> zero_small(1, 4, 4);
  const FeatureMap<float> zero_large(1, 6, 6);

  // The bias is drawn before the weights, so the zero-slice feature is the
  // same vector no matter the slice size.
  const FeatureVec f0a = extract_features(zero_small, 9, 5);
  const FeatureVec f0b = extract_features(zero_large, 9, 5);
  REQUIRE(f0a.size() == 5);
  CHECK((f0a - f0b).cwiseAbs().maxCoeff() == 0.0);

  Rng rng = stream_rng(8, "test/features");
  const FeatureMap<float> x = random_slice(rng, 4, 4, 100.0f);
  const FeatureVec fx = extract_features(x, 9, 5);
  CHECK((fx - f0a).cwiseAbs().maxCoeff() <= 1.0);  // tanh deviation bound
  CHECK((fx - f0a).cwiseAbs().maxCoeff() > 0.0);

  // Deterministic per seed, different across seeds.
  CHECK((extract_features(x, 9, 5) - fx).cwiseAbs().maxCoeff() == 0.0);
  CHECK((extract_features(x, 10, 5) - fx).cwiseAbs().maxCoeff() > 0.0);

  const FeatureProjector proj(9, 5, zero_small.pixels());
  CHECK(proj.dim() == 5);
  CHECK(proj.input_size() == 16);
  CHECK_THROWS_AS(proj(zero_large), ShapeError);
  CHECK_THROWS_AS(FeatureProjector(9, 0, 16), ConfigError);
}

TEST_CASE("fid matches hand-computed Gaussian distances") {
  auto vec1 = [](double v) { return (FeatureVec(1) << v).finished(); };

  // Unit-variance 1-D sets three apart: 3^2 + 1 + 1 - 2 = 9.
  const std::vector<FeatureVec> r1 = {vec1(-1), vec1(0), vec1(1)};
  const std::vector<FeatureVec> g1 = {vec1(2), vec1(3), vec1(4)};
  CHECK(fid(r1, g1) == doctest::Approx(9.0).epsilon(1e-12));
  CHECK(fid(g1, r1) == doctest::Approx(9.0).epsilon(1e-12));

  // Diagonal 2-D case: means (0,0) vs (3,0), covariances diag(0.5, 2) and
  // diag(2, 0.5); cross term is tr sqrt(diag(1,1)) = 2, so
  // 9 + 2.5 + 2.5 - 2*2 = 10.
  auto vec2 = [](double x, double y) {
    return (FeatureVec(2) << x, y).finished();
  };
  const std::vector<FeatureVec> r2 = {vec2(1, 0), vec2(-1, 0), vec2(0, 2),
                                      vec2(0, -2), vec2(0, 0)};
  const std::vector<FeatureVec> g2 = {vec2(5, 0), vec2(1, 0), vec2(3, 1),
                                      vec2(3, -1), vec2(3, 0)};
  CHECK(fid(r2, g2) == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(fid(g2, r2) == doctest::Approx(fid(r2, g2)).epsilon(1e-9));

  // Identical sets are at distance zero, even with a rank-deficient fit.
  Rng rng = stream_rng(12, "test/fid");
  std::vector<FeatureVec> same;
  for (int i = 0; i < 5; ++i) {
    same.push_back(vec2(rng.normal(), i < 3 ? rng.normal() : 0.0));
  }
  CHECK(fid(same, same) == doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_AS(fid({}, g1), DataError);
  CHECK_THROWS_AS(fid({vec2(0, 0), vec2(1, 1)}, r2), DataError);
  const std::vector<FeatureVec> mixed = {vec2(0, 0), vec2(1, 1), vec1(0),
                                         vec2(2, 2), vec2(3, 3)};
  CHECK_THROWS_AS(fid(r2, mixed), ShapeError);
}

TEST_CASE("pearson is exact on affine data and guards degeneracy") {
  const std::vector<double> x = {1.0, 2.0, 4.0};
  const std::vector<double> y = {3.0, 5.0, 9.0};  // y = 2x + 1
  CHECK(pearson(x, y) == doctest::Approx(1.0).epsilon(1e-12));

  const std::vector<double> neg = {9.0, 7.0, 3.0};  // y = -2x + 11
  CHECK(pearson(x, neg) == doctest::Approx(-1.0).epsilon(1e-12));

  std::vector<double> shifted(x.size());
  for (size_t i = 0; i < x.size(); ++i) shifted[i] = 3.0 * x[i] + 7.0;
  CHECK(pearson(shifted, y) == doctest::Approx(pearson(x, y)).epsilon(1e-12));

  CHECK(pearson({2.0, 2.0, 2.0}, y) == 0.0);
  CHECK_THROWS_AS(pearson({1.0}, {2.0}), DataError);
  CHECK_THROWS_AS(pearson(x, {1.0, 2.0}), ShapeError);
}

TEST_CASE("hu_size_correlation pools organs shared by each pair") {
  const OrganStats gt1 = stats_of({{1, 10.0, 100, 100.0}, {2, 20.0, 200, 200.0}});
  const OrganStats gt2 = stats_of({{1, 30.0, 300, 300.0}});
  // Organ 3 exists only in the prediction and must be ignored.
  const OrganStats pr1 = stats_of({{1, 10.0, 100, 100.0}, {2, 20.0, 200, 200.0}});
  const OrganStats pr2 =
      stats_of({{1, 30.0, 300, 300.0}, {3, 99.0, 50, 50.0}});

  const CorrelationResult r = hu_size_correlation({pr1, pr2}, {gt1, gt2});
  CHECK(r.n_points == 3);
  CHECK(r.hu == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.size == doctest::Approx(1.0).epsilon(1e-12));

  // Two pooled points are not enough.
  CHECK_THROWS_AS(hu_size_correlation({pr1}, {gt1}), DataError);
  CHECK_THROWS_AS(hu_size_correlation({pr1, pr2}, {gt1}), ShapeError);
}

TEST_CASE("confusion counts, precision, and recall") {
  std::vector<std::pair<Phase, Phase>> perfect;
  for (Phase p : kAllPhases) {
    perfect.push_back({p, p});
    perfect.push_back({p, p});
  }
  const ConfusionResult good = confusion_from_pairs(perfect);
  for (int c = 0; c < kNumPhases; ++c) {
    CHECK(good.counts[c][c] == 2);
    CHECK(good.precision[c] == 1.0);
    CHECK(good.recall[c] == 1.0);
  }

  // Everything predicted as N: N has recall 1 and precision 1/4, the other
  // classes have recall 0 and (empty column) precision 0.
  std::vector<std::pair<Phase, Phase>> collapsed;
  for (Phase p : kAllPhases) collapsed.push_back({p, Phase::N});
  const ConfusionResult bad = confusion_from_pairs(collapsed);
  CHECK(bad.recall[static_cast<size_t>(Phase::N)] == 1.0);
  CHECK(bad.precision[static_cast<size_t>(Phase::N)] == doctest::Approx(0.25));
  for (Phase p : {Phase::A, Phase::V, Phase::D}) {
    CHECK(bad.recall[static_cast<size_t>(p)] == 0.0);
    CHECK(bad.precision[static_cast<size_t>(p)] == 0.0);
  }
}

TEST_CASE("phase_confusion tallies one prediction per volume") {
  std::vector<std::pair<Volume, Phase>> samples;
  for (const auto& [phase, dir] : env().manifest.begin()->second) {
    samples.push_back({load_bundle(dir).volume, phase});
  }
  const ConfusionResult r = phase_confusion(env().cls, samples);
  int total = 0;
  for (int i = 0; i < kNumPhases; ++i) {
    int row = 0;
    for (int j = 0; j < kNumPhases; ++j) row += r.counts[i][j];
    CHECK(row == 1);  // each intended phase appears exactly once
    total += row;
  }
  CHECK(total == 4);
}

TEST_CASE("clamp_to_window bounds intensities and keeps the interior") {
  Volume v;
  v.dims = {1, 2, 3};
  v.spacing_mm = {1.0, 1.0, 1.0};
  v.data.resize(6);
  v.data << -2000.0f, -200.0f, 0.0f, 399.0f, 400.0f, 3000.0f;
  const Volume c = clamp_to_window(v, HuWindow{100.0, 300.0});
  CHECK(c.data.minCoeff() == -200.0f);
  CHECK(c.data.maxCoeff() == 400.0f);
  CHECK(c.data[1] == -200.0f);
  CHECK(c.data[2] == 0.0f);
  CHECK(c.data[3] == 399.0f);
  CHECK(c.dims == v.dims);
}

TEST_CASE("direction keys name ordered phase pairs") {
  CHECK(direction_key(Phase::N, Phase::V) == "N->V");
  CHECK(direction_key(Phase::D, Phase::A) == "D->A");
}

TEST_CASE("report files are byte-deterministic") {
  MetricReport rep;
  rep.directions["A->N"] = {0.5, 20.0, 3.25, 0.9, 0.8};
  rep.directions["N->V"] = {0.75, 30.5, 1.125, 0.95, 0.85};
  rep.confusion[0][0] = 3;
  rep.confusion[1][2] = 1;
  rep.precision[0] = 1.0;
  rep.recall[0] = 0.75;
  rep.metadata = json{{"n_patients", 2}, {"seed", 7}};

  const fs::path dir1 = fs::temp_directory_path() / "ctphase_test_eval_rep1";
  const fs::path dir2 = fs::temp_directory_path() / "ctphase_test_eval_rep2";
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  write_report(rep, dir1);
  write_report(rep, dir2);

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  CHECK(slurp(dir1 / "report.json") == slurp(dir2 / "report.json"));
  CHECK(slurp(dir1 / "report.csv") == slurp(dir2 / "report.csv"));

  // CSV: header plus one row per direction, x100 columns scaled exactly.
  std::ifstream csv(dir1 / "report.csv");
  std::string header, row1, row2, extra;
  REQUIRE(std::getline(csv, header));
  REQUIRE(std::getline(csv, row1));
  REQUIRE(std::getline(csv, row2));
  CHECK_FALSE(std::getline(csv, extra));
  CHECK(header ==
        "source,target,ssim,ssim_x100,psnr,psnr_x100,fid,"
        "hu_correlation,size_correlation");
  char s = 0, t = 0;
  double ss = 0, ss100 = 0, ps = 0, ps100 = 0, fd = 0, rh = 0, rs = 0;
  REQUIRE(std::sscanf(row1.c_str(), "%c,%c,%lf,%lf,%lf,%lf,%lf,%lf,%lf", &s,
                      &t, &ss, &ss100, &ps, &ps100, &fd, &rh, &rs) == 9);
  CHECK(s == 'A');
  CHECK(t == 'N');
  CHECK(ss100 == doctest::Approx(100.0 * ss).epsilon(1e-9));
  CHECK(ps100 == doctest::Approx(100.0 * ps).epsilon(1e-9));
  CHECK(fd == doctest::Approx(3.25));

  const json j = report_to_json(rep);
  CHECK(j["directions"]["N->V"]["ssim_x100"].get<double>() ==
        doctest::Approx(75.0));
  CHECK(j["confusion"][1][2].get<int>() == 1);
  CHECK(j["metadata"]["n_patients"].get<int>() == 2);
}

TEST_CASE("evaluate_directions covers all 12 ordered pairs deterministically") {
  UNetConfig uc;
  uc.base_channels = 4;
  uc.levels = 3;
  uc.cond_dim = 16;
  uc.time_dim = 8;
  uc.phase_dim = 4;
  Denoiser<float> den(uc, NoiseSchedule::linear(50), HuWindow{});
  den.net.init(21);

  EvalConfig cfg;
  cfg.sampler.steps = 5;
  cfg.seed = 17;
  cfg.feature_dim = 8;  // 2 patients x 16 slices = 32 >= dim + 1
  cfg.ssim_window = 11;

  const MetricReport rep =
      evaluate_directions(den, env().seg, env().cls, env().manifest, cfg);

  REQUIRE(rep.directions.size() == 12);
  for (Phase src : kAllPhases) {
    for (Phase tgt : kAllPhases) {
      if (src == tgt) continue;
      REQUIRE(rep.directions.count(direction_key(src, tgt)) == 1);
      const DirectionMetrics& m = rep.directions.at(direction_key(src, tgt));
      CHECK(m.ssim >= -1.0);
      CHECK(m.ssim <= 1.0);
      CHECK(m.psnr <= kPsnrCap);
      CHECK(std::isfinite(m.fid));
      CHECK(m.fid >= -1e-6);
      CHECK(std::abs(m.hu_correlation) <= 1.0 + 1e-12);
      CHECK(std::abs(m.size_correlation) <= 1.0 + 1e-12);
    }
  }

  // Every target phase receives 3 directions x 2 patients = 6 tallies.
  for (int i = 0; i < kNumPhases; ++i) {
    int row = 0;
    for (int j = 0; j < kNumPhases; ++j) row += rep.confusion[i][j];
    CHECK(row == 6);
  }
  CHECK(rep.metadata["n_patients"].get<int>() == 2);
  CHECK(rep.metadata["feature_dim"].get<int>() == 8);
  CHECK(rep.metadata["dynamic_range"].get<double>() == doctest::Approx(600.0));

  // Same inputs, same report - including the enhancement sampler draws.
  const MetricReport again =
      evaluate_directions(den, env().seg, env().cls, env().manifest, cfg);
  CHECK(report_to_json(again).dump() == report_to_json(rep).dump());

  // A patient missing one phase is skipped with a warning, not an error.
  Manifest partial = env().manifest;
  partial.begin()->second.erase(Phase::N);
  const MetricReport one =
      evaluate_directions(den, env().seg, env().cls, partial, cfg);
  CHECK(one.metadata["n_patients"].get<int>() == 1);

  Manifest unusable;
  unusable["p1"][Phase::N] = env().manifest.begin()->second.at(Phase::A);
  CHECK_THROWS_AS(
      evaluate_directions(den, env().seg, env().cls, unusable, cfg),
      DataError);
}
