#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "ctphase/nn/feature_map.hpp"

namespace ctphase {

// Flat view of one named parameter tensor and its gradient, harvested from a
// model's visit().
template <typename S>
struct ParamRef {
  std::string name;
  S* w = nullptr;
  S* g = nullptr;
  Eigen::Index size = 0;
};

template <typename Model, typename S>
std::vector<ParamRef<S>> collect_params(Model& model,
                                        const std::string& prefix) {
  std::vector<ParamRef<S>> refs;
  model.visit(prefix, [&](const std::string& name, S* w, S* g,
                          Eigen::Index size) {
    refs.push_back({name, w, g, size});
  });
  return refs;
}

template <typename S>
void zero_grads(std::vector<ParamRef<S>>& refs) {
  for (auto& r : refs) {
    std::memset(r.g, 0, static_cast<size_t>(r.size) * sizeof(S));
  }
}

template <typename S>
Eigen::Index total_size(const std::vector<ParamRef<S>>& refs) {
  Eigen::Index n = 0;
  for (const auto& r : refs) n += r.size;
  return n;
}

// Adam with bias correction; first/second moments are kept per ParamRef in
// the order the refs were collected (stable across runs because visit order
// is structural).
template <typename S>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void attach(const std::vector<ParamRef<S>>& refs) {
    m_.clear();
    v_.clear();
    for (const auto& r : refs) {
      m_.push_back(ArrX<S>::Zero(r.size));
      v_.push_back(ArrX<S>::Zero(r.size));
    }
    t_ = 0;
  }

  void step(std::vector<ParamRef<S>>& refs) {
    if (m_.size() != refs.size()) {
      throw ShapeError("Adam: not attached to this parameter set");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const S alpha = static_cast<S>(lr_ * std::sqrt(bc2) / bc1);
    for (size_t i = 0; i < refs.size(); ++i) {
      Eigen::Map<ArrX<S>> w(refs[i].w, refs[i].size);
      Eigen::Map<const ArrX<S>> g(refs[i].g, refs[i].size);
      m_[i] = static_cast<S>(beta1_) * m_[i] + static_cast<S>(1 - beta1_) * g;
      v_[i] =
          static_cast<S>(beta2_) * v_[i] + static_cast<S>(1 - beta2_) * g * g;
      w -= alpha * m_[i] / (v_[i].sqrt() + static_cast<S>(eps_));
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t steps_taken() const { return t_; }

  // Checkpoint plumbing: moments exposed by index-aligned names.
  template <typename F>
  void visit_state(const std::vector<ParamRef<S>>& refs, F&& f) {
    for (size_t i = 0; i < refs.size(); ++i) {
      f(refs[i].name + ".adam_m", m_[i].data(), m_[i].size());
      f(refs[i].name + ".adam_v", v_[i].data(), v_[i].size());
    }
  }
  void set_steps_taken(int64_t t) { t_ = t; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<ArrX<S>> m_;
  std::vector<ArrX<S>> v_;
  int64_t t_ = 0;
};

}  // namespace ctphase
