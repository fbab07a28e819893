#include "ctphase/auxnets/auxnets.hpp"

#include <algorithm>
#include <cmath>

#include "ctphase/common/log.hpp"
#include "ctphase/nn/tensor_store.hpp"

namespace ctphase {

namespace {

// Pulls one model-normalized slice out of a volume.
FeatureMap<float> model_slice_of(const Volume& v, Eigen::Index z,
                                 const HuWindow& win) {
  const Eigen::Index px = v.dims.y * v.dims.x;
  FeatureMap<float> s(1, static_cast<int>(v.dims.y),
                      static_cast<int>(v.dims.x));
  for (Eigen::Index i = 0; i < px; ++i) {
    s.m(0, i) = static_cast<float>(win.to_model(v.data[z * px + i]));
  }
  return s;
}

struct LoadedSplit {
  std::vector<LoadedBundle> train;
  std::vector<LoadedBundle> holdout;
};

// Deterministic split: patients sorted by id, the last `holdout_patients`
// held out, every phase of a patient staying on its side of the split.
LoadedSplit load_split(const Manifest& manifest, int holdout_patients,
                       bool need_masks) {
  std::vector<std::string> patients;
  for (const auto& [pid, phases] : manifest) patients.push_back(pid);
  if (static_cast<int>(patients.size()) <= holdout_patients ||
      holdout_patients < 1) {
    throw DataError("aux training needs more patients than the holdout (" +
                    std::to_string(patients.size()) + " total, " +
                    std::to_string(holdout_patients) + " held out)");
  }
  const size_t n_train = patients.size() - holdout_patients;
  LoadedSplit split;
  for (size_t i = 0; i < patients.size(); ++i) {
    for (const auto& [phase, dir] : manifest.at(patients[i])) {
      LoadedBundle b = load_bundle(dir);
      if (need_masks && !b.mask) {
        throw DataError("bundle " + dir.string() +
                        " has no mask; segmenter training needs one");
      }
      (i < n_train ? split.train : split.holdout).push_back(std::move(b));
    }
  }
  if (split.train.empty() || split.holdout.empty()) {
    throw DataError("aux training split produced an empty side");
  }
  const GridDims dims = split.train.front().volume.dims;
  for (const auto& side : {&split.train, &split.holdout}) {
    for (const auto& b : *side) {
      if (!(b.volume.dims == dims)) {
        throw DataError("aux training requires uniform grids across bundles");
      }
    }
  }
  return split;
}

}  // namespace

// ---------------------------------------------------------------------------
// Inference over whole volumes.

SegmentationMask segment_volume(const SegmenterNet<float>& net,
                                const Volume& volume) {
  SegmentationMask mask;
  mask.dims = volume.dims;
  mask.spacing_mm = volume.spacing_mm;
  mask.organ_table = net.organ_table();
  mask.labels.resize(volume.dims.count());
  const Eigen::Index px = volume.dims.y * volume.dims.x;
  typename SegmenterNet<float>::Ctx ctx;
  for (Eigen::Index z = 0; z < volume.dims.z; ++z) {
    const auto slice = model_slice_of(volume, z, net.window);
    const auto probs = net.forward(
        slice, static_cast<float>(z_fraction(z, volume.dims.z)), ctx);
    for (Eigen::Index i = 0; i < px; ++i) {
      Eigen::Index best = 0;
      probs.m.col(i).maxCoeff(&best);
      mask.labels[z * px + i] =
          static_cast<uint16_t>(net.class_ids()[static_cast<size_t>(best)]);
    }
  }
  return mask;
}

FeatureMap<float> oracle_segmenter_probs(const SegmentationMask& mask,
                                         Eigen::Index z,
                                         const std::vector<int>& class_ids) {
  std::map<int, int> class_of;
  for (size_t k = 0; k < class_ids.size(); ++k) {
    class_of[class_ids[k]] = static_cast<int>(k);
  }
  const Eigen::Index px = mask.dims.y * mask.dims.x;
  FeatureMap<float> probs(static_cast<int>(class_ids.size()),
                          static_cast<int>(mask.dims.y),
                          static_cast<int>(mask.dims.x));
  probs.m.setZero();
  for (Eigen::Index i = 0; i < px; ++i) {
    auto it = class_of.find(mask.labels[z * px + i]);
    if (it == class_of.end()) {
      throw LookupError("mask label " + std::to_string(mask.labels[z * px + i]) +
                        " has no oracle class");
    }
    probs.m(it->second, i) = 1.0f;
  }
  return probs;
}

std::array<double, kNumPhases> classify_volume(
    const PhaseClassifierNet<float>& net, const Volume& volume) {
  std::array<double, kNumPhases> acc{};
  typename PhaseClassifierNet<float>::Ctx ctx;
  for (Eigen::Index z = 0; z < volume.dims.z; ++z) {
    const auto slice = model_slice_of(volume, z, net.window);
    const auto probs = net.forward(slice, ctx);
    for (int k = 0; k < kNumPhases; ++k) acc[k] += probs[k];
  }
  for (auto& a : acc) a /= static_cast<double>(volume.dims.z);
  return acc;
}

Phase phase_argmax(const std::array<double, kNumPhases>& probs) {
  int best = 0;
  for (int k = 1; k < kNumPhases; ++k) {
    if (probs[k] > probs[best]) best = k;
  }
  return static_cast<Phase>(best);
}

// ---------------------------------------------------------------------------
// Segmenter training.

std::map<int, double> dice_per_organ(
    const SegmenterNet<float>& net, const std::vector<LoadedBundle>& bundles) {
  std::map<int, std::array<int64_t, 3>> acc;  // id -> {intersection, pred, gt}
  for (const auto& b : bundles) {
    if (!b.mask) throw DataError("Dice evaluation needs ground-truth masks");
    const SegmentationMask pred = segment_volume(net, b.volume);
    const auto n = pred.labels.size();
    for (Eigen::Index i = 0; i < n; ++i) {
      const int p = pred.labels[i];
      const int g = b.mask->labels[i];
      if (p == g) acc[p][0]++;
      acc[p][1]++;
      acc[g][2]++;
    }
  }
  std::map<int, double> dice;
  for (const auto& [id, a] : acc) {
    const int64_t denom = a[1] + a[2];
    if (denom > 0) dice[id] = 2.0 * static_cast<double>(a[0]) / denom;
  }
  return dice;
}

std::pair<SegmenterNet<float>, SegmenterMetrics> train_segmenter(
    const Manifest& manifest, const AuxTrainConfig& cfg) {
  const LoadedSplit split = load_split(manifest, cfg.holdout_patients, true);

  // Class set: union of every organ table in the training masks.
  std::map<int, OrganInfo> table;
  for (const auto& b : split.train) {
    for (const auto& [id, info] : b.mask->organ_table) table[id] = info;
  }
  SegmenterNet<float> net(table, cfg.hidden);
  net.init(cfg.seed);

  // Inverse-frequency class weights (√ tempered) so centimeter-scale organs
  // are not drowned out by the body and background.
  const int K = net.num_classes();
  std::vector<int64_t> counts(static_cast<size_t>(K), 0);
  int64_t total = 0;
  for (const auto& b : split.train) {
    for (Eigen::Index i = 0; i < b.mask->labels.size(); ++i) {
      counts[static_cast<size_t>(net.class_of(b.mask->labels[i]))]++;
      ++total;
    }
  }
  std::vector<float> class_weight(static_cast<size_t>(K), 0.0f);
  for (int k = 0; k < K; ++k) {
    if (counts[static_cast<size_t>(k)] > 0) {
      class_weight[static_cast<size_t>(k)] = static_cast<float>(std::sqrt(
          static_cast<double>(total) /
          (static_cast<double>(K) * counts[static_cast<size_t>(k)])));
    }
  }

  auto refs = collect_params<SegmenterNet<float>, float>(net, "segmenter");
  Adam<float> opt(cfg.lr);
  opt.attach(refs);
  Rng rng = stream_rng(cfg.seed, "train-aux/segmenter");

  const Eigen::Index depth = split.train.front().volume.dims.z;
  const Eigen::Index px = split.train.front().volume.dims.y *
                          split.train.front().volume.dims.x;
  typename SegmenterNet<float>::Ctx ctx;
  for (int step = 0; step < cfg.seg_steps; ++step) {
    zero_grads(refs);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& bundle =
          split.train[rng.uniform_index(split.train.size())];
      const Eigen::Index z =
          static_cast<Eigen::Index>(rng.uniform_index(depth));
      const auto slice = model_slice_of(bundle.volume, z, net.window);
      const auto probs = net.forward(
          slice, static_cast<float>(z_fraction(z, depth)), ctx);

      // Weighted cross-entropy, fused with softmax for a stable gradient.
      FeatureMap<float> dlogits = probs;
      double wsum = 0.0;
      for (Eigen::Index i = 0; i < px; ++i) {
        const int g = net.class_of(bundle.mask->labels[z * px + i]);
        const float w = class_weight[static_cast<size_t>(g)];
        wsum += w;
        loss -= w * std::log(std::max(probs.m(g, i), 1e-8f));
        dlogits.m.col(i) *= w;
        dlogits.m(g, i) -= w;
      }
      dlogits.m /= static_cast<float>(wsum * cfg.batch);
      net.backward_logits(dlogits, ctx);
    }
    opt.step(refs);
    if (step % 100 == 0) {
      log::debug("segmenter step %d mean weighted CE %.4f", step,
                 loss / (cfg.batch * static_cast<double>(px)));
    }
  }

  SegmenterMetrics metrics;
  metrics.dice = dice_per_organ(net, split.holdout);
  double sum = 0.0;
  int n = 0;
  double min_organ = 1.0;
  for (const auto& [id, d] : metrics.dice) {
    if (id == 0) continue;
    sum += d;
    ++n;
    const auto& info = net.organ_table().at(id);
    if (info.category != OrganCategory::lesion) {
      min_organ = std::min(min_organ, d);
    }
  }
  metrics.mean_dice = n > 0 ? sum / n : 0.0;
  metrics.min_organ_dice = min_organ;
  log::info("segmenter holdout: mean Dice %.3f, worst organ Dice %.3f",
            metrics.mean_dice, metrics.min_organ_dice);
  return {std::move(net), metrics};
}

// ---------------------------------------------------------------------------
// Phase-classifier training.

std::pair<PhaseClassifierNet<float>, ClassifierMetrics> train_classifier(
    const Manifest& manifest, const AuxTrainConfig& cfg) {
  const LoadedSplit split = load_split(manifest, cfg.holdout_patients, false);
  const GridDims dims = split.train.front().volume.dims;

  PhaseClassifierNet<float> net(cfg.cls_channels1, cfg.cls_channels2);
  net.bind_geometry(static_cast<int>(dims.y), static_cast<int>(dims.x));
  net.init(cfg.seed);

  auto refs =
      collect_params<PhaseClassifierNet<float>, float>(net, "classifier");
  Adam<float> opt(cfg.lr);
  opt.attach(refs);
  Rng rng = stream_rng(cfg.seed, "train-aux/classifier");

  typename PhaseClassifierNet<float>::Ctx ctx;
  for (int step = 0; step < cfg.cls_steps; ++step) {
    zero_grads(refs);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& bundle =
          split.train[rng.uniform_index(split.train.size())];
      const Eigen::Index z = static_cast<Eigen::Index>(
          rng.uniform_index(static_cast<size_t>(dims.z)));
      const auto slice = model_slice_of(bundle.volume, z, net.window);
      const auto probs = net.forward(slice, ctx);
      const int g = static_cast<int>(bundle.volume.phase);
      loss -= std::log(std::max(probs[static_cast<size_t>(g)], 1e-8f));

      // Fused softmax + cross-entropy gradient, fed through the shared
      // softmax backward: dprobs = −onehot/p gives dlogits = p − onehot.
      std::array<float, kNumPhases> dprobs{};
      dprobs[static_cast<size_t>(g)] =
          -1.0f / (std::max(probs[static_cast<size_t>(g)], 1e-8f) *
                   static_cast<float>(cfg.batch));
      net.backward(dprobs, ctx);
    }
    opt.step(refs);
    if (step % 100 == 0) {
      log::debug("classifier step %d mean CE %.4f", step, loss / cfg.batch);
    }
  }

  ClassifierMetrics metrics;
  int vol_hits = 0;
  int64_t slice_hits = 0, slice_total = 0;
  for (const auto& b : split.holdout) {
    const int g = static_cast<int>(b.volume.phase);
    const auto vp = classify_volume(net, b.volume);
    const int pred = static_cast<int>(phase_argmax(vp));
    metrics.confusion[static_cast<size_t>(g)][static_cast<size_t>(pred)]++;
    if (pred == g) ++vol_hits;
    for (Eigen::Index z = 0; z < b.volume.dims.z; ++z) {
      const auto slice = model_slice_of(b.volume, z, net.window);
      const auto probs = net.forward(slice, ctx);
      int best = 0;
      for (int k = 1; k < kNumPhases; ++k) {
        if (probs[static_cast<size_t>(k)] > probs[static_cast<size_t>(best)]) {
          best = k;
        }
      }
      if (best == g) ++slice_hits;
      ++slice_total;
    }
  }
  metrics.volume_accuracy =
      static_cast<double>(vol_hits) / static_cast<double>(split.holdout.size());
  metrics.slice_accuracy =
      static_cast<double>(slice_hits) / static_cast<double>(slice_total);
  log::info("classifier holdout: volume accuracy %.3f, slice accuracy %.3f",
            metrics.volume_accuracy, metrics.slice_accuracy);
  return {std::move(net), metrics};
}

// ---------------------------------------------------------------------------
// Checkpoints.

void save_segmenter(const SegmenterNet<float>& net,
                    const std::filesystem::path& path) {
  TensorStore store;
  store.meta["format"] = "auxnet";
  store.meta["kind"] = "segmenter";
  store.meta["version"] = 1;
  store.meta["hidden"] = net.hidden();
  store.meta["window"] = {{"center", net.window.center},
                          {"half_width", net.window.half_width}};
  json classes = json::array();
  for (const auto& [id, info] : net.organ_table()) {
    classes.push_back({{"id", id},
                       {"name", info.name},
                       {"category", category_to_string(info.category)}});
  }
  store.meta["classes"] = classes;
  store.put_params(const_cast<SegmenterNet<float>&>(net), "segmenter");
  store.save(path);
}

SegmenterNet<float> load_segmenter(const std::filesystem::path& path) {
  TensorStore store = TensorStore::load(path);
  if (store.meta.value("format", "") != "auxnet" ||
      store.meta.value("kind", "") != "segmenter") {
    throw FormatError("not a segmenter checkpoint: " + path.string());
  }
  std::map<int, OrganInfo> table;
  for (const auto& c : require_field(store.meta, "classes", "segmenter")) {
    OrganInfo info;
    info.name = c.at("name").get<std::string>();
    info.category = category_from_string(c.at("category").get<std::string>());
    table[c.at("id").get<int>()] = info;
  }
  SegmenterNet<float> net(table, store.meta.at("hidden").get<int>());
  const auto& win = store.meta.at("window");
  net.window.center = win.at("center").get<double>();
  net.window.half_width = win.at("half_width").get<double>();
  store.fill_params(net, "segmenter");
  return net;
}

void save_classifier(const PhaseClassifierNet<float>& net,
                     const std::filesystem::path& path) {
  TensorStore store;
  store.meta["format"] = "auxnet";
  store.meta["kind"] = "classifier";
  store.meta["version"] = 1;
  store.meta["channels1"] = net.feature_channels1();
  store.meta["channels2"] = net.feature_channels2();
  store.meta["height"] = net.height();
  store.meta["width"] = net.width();
  store.meta["window"] = {{"center", net.window.center},
                          {"half_width", net.window.half_width}};
  store.put_params(const_cast<PhaseClassifierNet<float>&>(net), "classifier");
  store.save(path);
}

PhaseClassifierNet<float> load_classifier(const std::filesystem::path& path) {
  TensorStore store = TensorStore::load(path);
  if (store.meta.value("format", "") != "auxnet" ||
      store.meta.value("kind", "") != "classifier") {
    throw FormatError("not a classifier checkpoint: " + path.string());
  }
  PhaseClassifierNet<float> net(store.meta.at("channels1").get<int>(),
                                store.meta.at("channels2").get<int>());
  net.bind_geometry(store.meta.at("height").get<int>(),
                    store.meta.at("width").get<int>());
  const auto& win = store.meta.at("window");
  net.window.center = win.at("center").get<double>();
  net.window.half_width = win.at("half_width").get<double>();
  store.fill_params(net, "classifier");
  return net;
}

}  // namespace ctphase
