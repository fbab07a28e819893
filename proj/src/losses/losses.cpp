#include "ctphase/losses/losses.hpp"

#include <cmath>

namespace ctphase {

std::string loss_name_to_string(LossName n) {
  switch (n) {
    case LossName::diff: return "diff";
    case LossName::cyc: return "cyc";
    case LossName::cls: return "cls";
    case LossName::seg: return "seg";
    case LossName::hu: return "hu";
    case LossName::ab: return "ab";
  }
  throw LookupError("invalid loss name enum value");
}

LossName loss_name_from_string(const std::string& s) {
  if (s == "diff") return LossName::diff;
  if (s == "cyc") return LossName::cyc;
  if (s == "cls") return LossName::cls;
  if (s == "seg") return LossName::seg;
  if (s == "hu") return LossName::hu;
  if (s == "ab") return LossName::ab;
  throw LookupError("unknown loss name \"" + s + "\"");
}

double LossWeights::weight(LossName n) const {
  switch (n) {
    case LossName::diff: return lambda_diff;
    case LossName::cyc: return lambda_cyc;
    case LossName::cls: return lambda_cls;
    case LossName::seg: return lambda_seg;
    case LossName::hu: return lambda_hu;
    case LossName::ab: return lambda_ab;
  }
  throw LookupError("invalid loss name enum value");
}

void LossWeights::validate() const {
  for (LossName n : {LossName::diff, LossName::cyc, LossName::cls,
                     LossName::seg, LossName::hu, LossName::ab}) {
    if (!(weight(n) >= 0.0)) {
      throw ConfigError("loss weight for \"" + loss_name_to_string(n) +
                        "\" must be nonnegative");
    }
  }
  if (!(lambda_cdiff >= 0.0)) {
    throw ConfigError("lambda_cdiff must be nonnegative");
  }
}

StageThresholds StageThresholds::scaled(int64_t total_steps) {
  if (total_steps < 50) {
    throw ConfigError("schedule scaling needs at least 50 total steps");
  }
  StageThresholds t{total_steps * 2 / 100, total_steps * 20 / 100,
                    total_steps * 80 / 100};
  t.validate();
  return t;
}

void StageThresholds::validate() const {
  if (add_cyc_cls <= 0 || add_cyc_cls >= add_all || add_all >= learnable) {
    throw ConfigError("stage thresholds must be positive and strictly "
                      "increasing: " +
                      std::to_string(add_cyc_cls) + ", " +
                      std::to_string(add_all) + ", " +
                      std::to_string(learnable));
  }
}

std::set<LossName> active_losses(int64_t step, const StageThresholds& cfg) {
  cfg.validate();
  if (step < 0) {
    throw ConfigError("training step must be nonnegative");
  }
  std::set<LossName> active = {LossName::diff};
  if (step >= cfg.add_cyc_cls) {
    active.insert(LossName::cyc);
    active.insert(LossName::cls);
  }
  if (step >= cfg.add_all) {
    active.insert(LossName::seg);
    active.insert(LossName::hu);
    active.insert(LossName::ab);
  }
  return active;
}

namespace {

size_t aux_index(LossName n) {
  for (size_t i = 0; i < kAuxLosses.size(); ++i) {
    if (kAuxLosses[i] == n) return i;
  }
  throw LookupError("\"" + loss_name_to_string(n) +
                    "\" has no uncertainty parameter");
}

}  // namespace

double& UncertaintyParams::at(LossName n) { return s[aux_index(n)]; }
double UncertaintyParams::at(LossName n) const { return s[aux_index(n)]; }

UncertaintyParams UncertaintyParams::from_weights(const LossWeights& w) {
  w.validate();
  UncertaintyParams u;
  for (LossName n : kAuxLosses) {
    const double lambda = w.weight(n);
    if (lambda <= 0.0) {
      throw ConfigError("uncertainty handoff needs a positive weight for \"" +
                        loss_name_to_string(n) + "\"");
    }
    u.at(n) = -std::log(lambda);
  }
  return u;
}

namespace {

double value_of(const std::map<std::string, double>& values, LossName n) {
  const std::string key = loss_name_to_string(n);
  auto it = values.find(key);
  if (it == values.end()) {
    throw LookupError("combine: no value for active loss \"" + key + "\"");
  }
  return it->second;
}

}  // namespace

double combine(const std::map<std::string, double>& values, int64_t step,
               const LossWeights& weights, const UncertaintyParams& u,
               const StageThresholds& cfg) {
  const std::set<LossName> active = active_losses(step, cfg);
  if (step < cfg.learnable) {
    double total = 0.0;
    for (LossName n : active) {
      total += weights.weight(n) * value_of(values, n);
    }
    return total;
  }
  double total = value_of(values, LossName::diff);
  for (LossName n : active) {
    if (n == LossName::diff) continue;
    const double s_i = u.at(n);
    total += std::exp(-s_i) * value_of(values, n) + s_i;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Per-organ mean-HU fidelity.

namespace {

// Squared-error denominator for one organ: the gt mean itself, or the
// +1024-offset mean when the gt mean sits too close to water for Eq-style
// normalization to be stable.
double hu_denominator(double gt_mean, double hu_floor) {
  return std::abs(gt_mean) < hu_floor ? gt_mean + kHuOffset : gt_mean;
}

}  // namespace

double loss_hu(const OrganStats& pred, const OrganStats& gt, double hu_floor) {
  double acc = 0.0;
  int64_t n_common = 0;
  for (const auto& pr : pred.records) {
    const OrganRecord* gr = gt.find(pr.organ_id);
    if (!gr) continue;
    const double denom = hu_denominator(gr->mean_hu, hu_floor);
    const double diff = pr.mean_hu - gr->mean_hu;
    acc += (diff * diff) / (denom * denom);
    ++n_common;
  }
  if (n_common == 0) {
    throw DataError("loss_hu is undefined: no organs common to both stats");
  }
  return acc / static_cast<double>(n_common);
}

std::map<int, double> loss_hu_grad(const OrganStats& pred,
                                   const OrganStats& gt, double hu_floor) {
  std::map<int, double> grad;
  for (const auto& pr : pred.records) {
    const OrganRecord* gr = gt.find(pr.organ_id);
    if (!gr) continue;
    const double denom = hu_denominator(gr->mean_hu, hu_floor);
    grad[pr.organ_id] = 2.0 * (pr.mean_hu - gr->mean_hu) / (denom * denom);
  }
  if (grad.empty()) {
    throw DataError("loss_hu is undefined: no organs common to both stats");
  }
  const double inv_n = 1.0 / static_cast<double>(grad.size());
  for (auto& [id, g] : grad) g *= inv_n;
  return grad;
}

}  // namespace ctphase
