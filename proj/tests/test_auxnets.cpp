#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ctphase/auxnets/auxnets.hpp"
#include "ctphase/phantom/dataset.hpp"
#include "ctphase/phantom/phantom.hpp"

using namespace ctphase;
namespace fs = std::filesystem;

namespace {

FeatureMap<float> model_slice(const Volume& v, Eigen::Index z,
                              const HuWindow& win) {
  const Eigen::Index px = v.dims.y * v.dims.x;
  FeatureMap<float> s(1, static_cast<int>(v.dims.y),
                      static_cast<int>(v.dims.x));
  for (Eigen::Index i = 0; i < px; ++i) {
    s.m(0, i) = static_cast<float>(win.to_model(v.data[z * px + i]));
  }
  return s;
}

std::map<int, OrganInfo> tiny_table(int k) {
  std::map<int, OrganInfo> t;
  t[0] = {"background", OrganCategory::background};
  for (int i = 1; i < k; ++i) {
    t[i] = {"organ" + std::to_string(i), OrganCategory::organ};
  }
  return t;
}

// Shared small dataset for the training tests (flat fixture, built once).
const fs::path& aux_dataset_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "ctphase_test_auxds";
    fs::remove_all(d);
    DatasetParams p;
    p.seed = 23;
    p.n_patients = 8;
    write_dataset(p, d);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("analytic detector thresholds and monotonicity") {
  AirBoneThresholds t;
  CHECK(is_air_bone(-1000.0, t));
  CHECK(is_air_bone(-300.0, t));      // boundary inclusive
  CHECK(!is_air_bone(-299.99, t));
  CHECK(!is_air_bone(0.0, t));        // water
  CHECK(!is_air_bone(199.99, t));
  CHECK(is_air_bone(200.0, t));
  CHECK(is_air_bone(3000.0, t));

  // Monotone on each side: deeper into air/bone stays flagged.
  for (double hu = -300.0; hu >= -1024.0; hu -= 37.0) CHECK(is_air_bone(hu, t));
  for (double hu = 200.0; hu <= 3071.0; hu += 57.0) CHECK(is_air_bone(hu, t));

  // Deterministic re-application (idempotent region extraction).
  Volume v;
  v.dims = {8, 8, 8};
  v.spacing_mm = {1, 1, 1};
  v.data.resize(v.dims.count());
  Rng rng(1);
  for (Eigen::Index i = 0; i < v.data.size(); ++i) {
    v.data[i] = static_cast<float>(rng.uniform(-1024.0, 3071.0));
  }
  const auto f1 = detect_air_bone(v);
  const auto f2 = detect_air_bone(v);
  CHECK((f1 == f2).all());
}

TEST_CASE("detector agrees with phantom air/bone masks at noise 10") {
  PhantomSpec spec = default_phantom_spec(31, "pdet");
  spec.misalign.enabled = false;  // keep labels exact; noise margin is ~30 sigma
  const PhantomResult res = generate_phantom(spec);
  for (Phase ph : kAllPhases) {
    const auto& vol = res.volumes.at(ph);
    const auto& mask = res.masks.at(ph);
    const auto flags = detect_air_bone(vol);
    Eigen::Index disagree = 0;
    for (Eigen::Index i = 0; i < flags.size(); ++i) {
      const auto cat = mask.organ_table.at(mask.labels[i]).category;
      const bool gt = cat == OrganCategory::air || cat == OrganCategory::bone ||
                      cat == OrganCategory::background;
      if (gt != flags[i]) ++disagree;
    }
    CHECK(static_cast<double>(disagree) / static_cast<double>(flags.size()) <
          0.01);
  }
}

TEST_CASE("soft detector gate matches its analytic shape") {
  SoftAirBone<double> d;
  CHECK(d.value(-1000.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(d.value(1000.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(d.value(0.0) < 0.01);
  CHECK(d.value(-300.0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(d.value(200.0) == doctest::Approx(0.5).epsilon(1e-6));

  for (double hu : {-600.0, -310.0, -50.0, 150.0, 230.0, 800.0}) {
    const double h = 1e-5;
    const double fd = (d.value(hu + h) - d.value(hu - h)) / (2 * h);
    CHECK(d.grad(hu) == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("segmenter outputs probability simplices and knows its classes") {
  SegmenterNet<float> net(tiny_table(5), 8);
  net.init(3);
  CHECK(net.num_classes() == 5);
  CHECK(net.class_of(0) == 0);
  CHECK(net.class_of(4) == 4);
  CHECK_THROWS_AS((void)net.class_of(99), ConfigError);

  FeatureMap<float> slice(1, 8, 8);
  Rng rng(4);
  for (Eigen::Index i = 0; i < slice.m.size(); ++i) {
    slice.m.data()[i] = static_cast<float>(rng.normal());
  }
  typename SegmenterNet<float>::Ctx ctx;
  const auto probs = net.forward(slice, 0.25f, ctx);
  CHECK(probs.channels() == 5);
  for (Eigen::Index i = 0; i < probs.m.cols(); ++i) {
    CHECK(probs.m.col(i).sum() == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(probs.m.col(i).minCoeff() >= 0.0f);
  }
}

TEST_CASE("oracle segmenter equals the ground-truth mask") {
  PhantomSpec spec = default_phantom_spec(41, "porc");
  spec.noise_std = 0.0;
  spec.misalign.enabled = false;
  const PhantomResult res = generate_phantom(spec);
  const auto& mask = res.masks.at(Phase::V);
  std::vector<int> ids;
  for (const auto& [id, info] : mask.organ_table) ids.push_back(id);
  const Eigen::Index px = mask.dims.y * mask.dims.x;
  for (Eigen::Index z = 0; z < mask.dims.z; ++z) {
    const auto probs = oracle_segmenter_probs(mask, z, ids);
    for (Eigen::Index i = 0; i < px; ++i) {
      CHECK(probs.m.col(i).sum() == 1.0f);
      Eigen::Index best = 0;
      probs.m.col(i).maxCoeff(&best);
      CHECK(ids[static_cast<size_t>(best)] ==
            static_cast<int>(mask.labels[z * px + i]));
    }
  }
}

TEST_CASE("segmenter input gradient matches finite differences") {
  SegmenterNet<double> net(tiny_table(4), 6);
  net.init(5);
  // Nudge the head off zero-ish symmetric starts.
  Rng wrng(6);
  auto refs = collect_params<SegmenterNet<double>, double>(net, "seg");
  for (auto& r : refs) {
    for (Eigen::Index i = 0; i < r.size; ++i) r.w[i] += 0.2 * wrng.normal();
  }
  FeatureMap<double> slice(1, 8, 8);
  for (Eigen::Index i = 0; i < 64; ++i) slice.m.data()[i] = wrng.normal();

  // Random linear functional of the probabilities.
  FeatureMap<double> c(4, 8, 8);
  for (Eigen::Index i = 0; i < c.m.size(); ++i) c.m.data()[i] = wrng.normal();
  auto f = [&]() {
    typename SegmenterNet<double>::Ctx ctx;
    return (net.forward(slice, 0.5, ctx).m.array() * c.m.array()).sum();
  };

  typename SegmenterNet<double>::Ctx ctx;
  (void)net.forward(slice, 0.5, ctx);
  zero_grads(refs);
  const auto dimage = net.backward(c, ctx);

  Rng pick(7);
  for (int probe = 0; probe < 10; ++probe) {
    const Eigen::Index i =
        static_cast<Eigen::Index>(pick.uniform_index(64));
    const double saved = slice.m(0, i);
    const double h = 1e-6;
    slice.m(0, i) = saved + h;
    const double fp = f();
    slice.m(0, i) = saved - h;
    const double fm = f();
    slice.m(0, i) = saved;
    const double fd = (fp - fm) / (2 * h);
    CHECK(std::abs(dimage.m(0, i) - fd) <=
          1e-4 * (std::abs(fd) + std::abs(dimage.m(0, i))) + 1e-9);
  }
}

TEST_CASE("untrained classifier is uniform; input gradient passes FD") {
  PhaseClassifierNet<double> net(4, 6);
  net.bind_geometry(16, 16);
  net.init(8);

  FeatureMap<double> slice(1, 16, 16);
  Rng rng(9);
  for (Eigen::Index i = 0; i < slice.m.size(); ++i) {
    slice.m.data()[i] = rng.normal();
  }
  typename PhaseClassifierNet<double>::Ctx ctx;
  auto probs = net.forward(slice, ctx);
  for (int k = 0; k < kNumPhases; ++k) {
    CHECK(probs[static_cast<size_t>(k)] == doctest::Approx(0.25).epsilon(1e-12));
  }

  // Off-zero head for a nontrivial gradient.
  auto refs = collect_params<PhaseClassifierNet<double>, double>(net, "cls");
  for (auto& r : refs) {
    for (Eigen::Index i = 0; i < r.size; ++i) r.w[i] += 0.2 * rng.normal();
  }
  std::array<double, kNumPhases> c{0.7, -1.3, 0.4, 0.9};
  auto f = [&]() {
    typename PhaseClassifierNet<double>::Ctx fctx;
    const auto p = net.forward(slice, fctx);
    double acc = 0;
    for (int k = 0; k < kNumPhases; ++k) acc += c[static_cast<size_t>(k)] * p[static_cast<size_t>(k)];
    return acc;
  };
  (void)net.forward(slice, ctx);
  zero_grads(refs);
  const auto dimage = net.backward(c, ctx);
  Rng pick(10);
  for (int probe = 0; probe < 10; ++probe) {
    const Eigen::Index i =
        static_cast<Eigen::Index>(pick.uniform_index(256));
    const double saved = slice.m(0, i);
    const double h = 1e-6;
    slice.m(0, i) = saved + h;
    const double fp = f();
    slice.m(0, i) = saved - h;
    const double fm = f();
    slice.m(0, i) = saved;
    const double fd = (fp - fm) / (2 * h);
    CHECK(std::abs(dimage.m(0, i) - fd) <=
          1e-4 * (std::abs(fd) + std::abs(dimage.m(0, i))) + 1e-10);
  }
}

TEST_CASE("trained segmenter clears 0.90 Dice on held-out patients") {
  const auto manifest = load_manifest(aux_dataset_dir() / "manifest.json");
  AuxTrainConfig cfg;
  cfg.seed = 5;
  cfg.holdout_patients = 2;
  auto [net, metrics] = train_segmenter(manifest, cfg);
  CAPTURE(metrics.mean_dice);
  for (const auto& [id, d] : metrics.dice) {
    CAPTURE(id);
    CAPTURE(d);
    const auto& info = net.organ_table().at(id);
    if (id != 0 && info.category != OrganCategory::lesion) {
      CHECK(d >= 0.90);
    }
  }

  // Round trip preserves every parameter bit and the class table.
  const fs::path path = fs::temp_directory_path() / "ctphase_test_seg.ckpt";
  save_segmenter(net, path);
  auto back = load_segmenter(path);
  CHECK(param_hash(back, "segmenter") == param_hash(net, "segmenter"));
  CHECK(back.organ_table() == net.organ_table());
  fs::remove(path);
}

TEST_CASE("trained classifier identifies held-out phases") {
  const auto manifest = load_manifest(aux_dataset_dir() / "manifest.json");
  AuxTrainConfig cfg;
  cfg.seed = 5;
  cfg.holdout_patients = 2;
  auto [net, metrics] = train_classifier(manifest, cfg);
  CAPTURE(metrics.slice_accuracy);
  CHECK(metrics.volume_accuracy >= 0.95);

  // Confusion rows sum to the per-class holdout counts (2 volumes each).
  for (int g = 0; g < kNumPhases; ++g) {
    int row = 0;
    for (int p = 0; p < kNumPhases; ++p) row += metrics.confusion[static_cast<size_t>(g)][static_cast<size_t>(p)];
    CHECK(row == 2);
  }

  const fs::path path = fs::temp_directory_path() / "ctphase_test_cls.ckpt";
  save_classifier(net, path);
  auto back = load_classifier(path);
  CHECK(param_hash(back, "classifier") == param_hash(net, "classifier"));
  fs::remove(path);

  // param_hash is sensitive to any single weight change.
  const uint64_t before = param_hash(net, "classifier");
  net.conv1.W(0, 0) += 1e-3f;
  CHECK(param_hash(net, "classifier") != before);
}

TEST_CASE("aux training rejects insufficient data") {
  Manifest tiny;
  tiny["p000"][Phase::N] = "/nonexistent";
  AuxTrainConfig cfg;
  CHECK_THROWS_AS((void)train_segmenter(tiny, cfg), DataError);
}
