#pragma once

#include <memory>
#include <vector>

#include "ctphase/core/phase.hpp"
#include "ctphase/nn/layers.hpp"

namespace ctphase {

// Sinusoidal timestep features: half sine, half cosine over log-spaced
// frequencies.  Fixed (not learned).
template <typename S>
VecX<S> time_features(int t, int dim) {
  VecX<S> e(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    e[2 * i] = static_cast<S>(std::sin(t * freq));
    e[2 * i + 1] = static_cast<S>(std::cos(t * freq));
  }
  return e;
}

// Conditioning vector from (timestep, source phase, target phase): learned
// phase embeddings concatenated with time features, mixed by a small MLP.
template <typename S>
class CondNet {
 public:
  CondNet(int time_dim, int phase_dim, int cond_dim)
      : time_dim_(time_dim),
        src_embed_(kNumPhases, phase_dim),
        tgt_embed_(kNumPhases, phase_dim),
        fc1_(time_dim + 2 * phase_dim, cond_dim),
        fc2_(cond_dim, cond_dim) {}

  void init(Rng& rng) {
    src_embed_.init_normal(rng, 0.5);
    tgt_embed_.init_normal(rng, 0.5);
    fc1_.init_he(rng);
    fc2_.init_he(rng);
  }

  struct Ctx {
    typename Linear<S>::Ctx c1, c2;
    VecX<S> a1;  // pre-activation of the hidden layer
    int src = 0, tgt = 0;
  };

  VecX<S> forward(int t, Phase src, Phase tgt, Ctx& ctx) const {
    ctx.src = static_cast<int>(src);
    ctx.tgt = static_cast<int>(tgt);
    VecX<S> in(time_dim_ + src_embed_.W.cols() + tgt_embed_.W.cols());
    in << time_features<S>(t, time_dim_), src_embed_.forward(ctx.src),
        tgt_embed_.forward(ctx.tgt);
    ctx.a1 = fc1_.forward(in, ctx.c1);
    VecX<S> h1 = Silu<S>::forward(ctx.a1);
    return fc2_.forward(h1, ctx.c2);
  }

  void backward(const VecX<S>& dcond, const Ctx& ctx) {
    VecX<S> dh1 = fc2_.backward(dcond, ctx.c2);
    VecX<S> da1 = Silu<S>::backward(dh1, ctx.a1);
    VecX<S> din = fc1_.backward(da1, ctx.c1);
    const int pd = static_cast<int>(src_embed_.W.cols());
    src_embed_.backward(ctx.src, din.segment(time_dim_, pd));
    tgt_embed_.backward(ctx.tgt, din.segment(time_dim_ + pd, pd));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    src_embed_.visit(prefix + ".src_embed", f);
    tgt_embed_.visit(prefix + ".tgt_embed", f);
    fc1_.visit(prefix + ".fc1", f);
    fc2_.visit(prefix + ".fc2", f);
  }

 private:
  int time_dim_;
  Embedding<S> src_embed_, tgt_embed_;
  Linear<S> fc1_, fc2_;
};

// conv3x3 -> +per-channel conditioning bias -> SiLU -> conv3x3 -> SiLU
template <typename S>
class ConvBlock {
 public:
  ConvBlock(int in_ch, int out_ch, int cond_dim)
      : conv1_(in_ch, out_ch, 3), conv2_(out_ch, out_ch, 3),
        film_(cond_dim, out_ch) {}

  void init(Rng& rng) {
    conv1_.init_he(rng);
    conv2_.init_he(rng);
    film_.init_he(rng);
  }

  struct Ctx {
    typename Conv2D<S>::Ctx c1, c2;
    typename Linear<S>::Ctx cf;
    typename FeatureMap<S>::Mat a1, a2;  // pre-activations
    int h = 0, w = 0;
  };

  FeatureMap<S> forward(const FeatureMap<S>& x, const VecX<S>& cond,
                        Ctx& ctx) const {
    ctx.h = x.h;
    ctx.w = x.w;
    FeatureMap<S> y = conv1_.forward(x, ctx.c1);
    VecX<S> bias = film_.forward(cond, ctx.cf);
    y.m.colwise() += bias;
    ctx.a1 = y.m;
    y.m = Silu<S>::forward(ctx.a1);
    FeatureMap<S> z = conv2_.forward(y, ctx.c2);
    ctx.a2 = z.m;
    z.m = Silu<S>::forward(ctx.a2);
    return z;
  }

  // dcond accumulates the conditioning gradient across all blocks.
  FeatureMap<S> backward(const FeatureMap<S>& dz, Ctx& ctx, VecX<S>& dcond) {
    FeatureMap<S> da2 = dz;
    da2.m = Silu<S>::backward(dz.m, ctx.a2);
    FeatureMap<S> dh1 = conv2_.backward(da2, ctx.c2);
    FeatureMap<S> da1 = dh1;
    da1.m = Silu<S>::backward(dh1.m, ctx.a1);
    VecX<S> dbias = da1.m.rowwise().sum();
    dcond += film_.backward(dbias, ctx.cf);
    return conv1_.backward(da1, ctx.c1);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    conv1_.visit(prefix + ".conv1", f);
    conv2_.visit(prefix + ".conv2", f);
    film_.visit(prefix + ".film", f);
  }

  int out_channels() const { return conv1_.out_channels(); }

 private:
  Conv2D<S> conv1_, conv2_;
  Linear<S> film_;
};

struct UNetConfig {
  int in_channels = 2;   // noisy target slice + source conditioning slice
  int base_channels = 8; // doubled at each level
  int levels = 4;
  int cond_dim = 64;
  int time_dim = 16;
  int phase_dim = 8;
};

// U-shaped conditional denoiser over 2D slices.  Input is the 2-channel map
// [x_t, source]; output is the 1-channel noise prediction.  The output head
// is zero-initialized so an untrained model predicts exactly zero noise.
template <typename S>
class UNet {
 public:
  explicit UNet(const UNetConfig& cfg)
      : cfg_(cfg), cond_(cfg.time_dim, cfg.phase_dim, cfg.cond_dim),
        out_conv_(cfg.base_channels, 1, 1) {
    const int L = cfg.levels;
    if (L < 2) throw ConfigError("UNet needs at least 2 levels");
    int ch_in = cfg.in_channels;
    for (int i = 0; i < L - 1; ++i) {
      const int ch_out = cfg.base_channels << i;
      enc_.push_back(
          std::make_unique<ConvBlock<S>>(ch_in, ch_out, cfg.cond_dim));
      ch_in = ch_out;
    }
    mid_ = std::make_unique<ConvBlock<S>>(ch_in, cfg.base_channels << (L - 1),
                                          cfg.cond_dim);
    int ch_up = cfg.base_channels << (L - 1);
    for (int i = L - 2; i >= 0; --i) {
      const int skip_ch = cfg.base_channels << i;
      dec_.push_back(std::make_unique<ConvBlock<S>>(ch_up + skip_ch, skip_ch,
                                                    cfg.cond_dim));
      ch_up = skip_ch;
    }
  }

  void init(uint64_t seed) {
    Rng rng = stream_rng(seed, "unet-init");
    cond_.init(rng);
    for (auto& block : enc_) block->init(rng);
    mid_->init(rng);
    for (auto& block : dec_) block->init(rng);
    // out_conv_ stays zero: eps_hat == 0 until trained.
  }

  struct Ctx {
    typename CondNet<S>::Ctx cond_ctx;
    VecX<S> cond;
    std::vector<typename ConvBlock<S>::Ctx> enc_ctx;
    std::vector<FeatureMap<S>> skips;
    std::vector<std::pair<int, int>> pool_dims;  // (h, w) of each pooled input
    typename ConvBlock<S>::Ctx mid_ctx;
    std::vector<typename ConvBlock<S>::Ctx> dec_ctx;
    std::vector<int> skip_channels;
    typename Conv2D<S>::Ctx out_ctx;
  };

  // x: (in_channels, h, w) with h, w divisible by 2^(levels-1).
  FeatureMap<S> forward(const FeatureMap<S>& x, int t, Phase src_phase,
                        Phase tgt_phase, Ctx& ctx) const {
    if (x.channels() != cfg_.in_channels) {
      throw ShapeError("UNet: wrong number of input channels");
    }
    const int stride = 1 << (cfg_.levels - 1);
    if (x.h % stride != 0 || x.w % stride != 0) {
      throw ShapeError("UNet: spatial dims must be divisible by " +
                       std::to_string(stride));
    }
    ctx.cond = cond_.forward(t, src_phase, tgt_phase, ctx.cond_ctx);
    ctx.enc_ctx.resize(enc_.size());
    ctx.skips.clear();
    ctx.pool_dims.clear();
    ctx.dec_ctx.resize(dec_.size());
    ctx.skip_channels.clear();

    FeatureMap<S> cur = x;
    for (size_t i = 0; i < enc_.size(); ++i) {
      FeatureMap<S> out = enc_[i]->forward(cur, ctx.cond, ctx.enc_ctx[i]);
      ctx.skips.push_back(out);
      ctx.pool_dims.emplace_back(out.h, out.w);
      cur = AvgPool2x2<S>::forward(out);
    }
    cur = mid_->forward(cur, ctx.cond, ctx.mid_ctx);
    for (size_t i = 0; i < dec_.size(); ++i) {
      FeatureMap<S> up = Upsample2x<S>::forward(cur);
      const FeatureMap<S>& skip = ctx.skips[enc_.size() - 1 - i];
      ctx.skip_channels.push_back(up.channels());
      FeatureMap<S> cat = concat_channels(up, skip);
      cur = dec_[i]->forward(cat, ctx.cond, ctx.dec_ctx[i]);
    }
    return out_conv_.forward(cur, ctx.out_ctx);
  }

  // Returns the gradient w.r.t. the full input map (both channels).
  FeatureMap<S> backward(const FeatureMap<S>& d_eps, Ctx& ctx) {
    VecX<S> dcond = VecX<S>::Zero(cfg_.cond_dim);
    FeatureMap<S> dcur = out_conv_.backward(d_eps, ctx.out_ctx);

    std::vector<FeatureMap<S>> dskips(enc_.size());
    for (int i = static_cast<int>(dec_.size()) - 1; i >= 0; --i) {
      FeatureMap<S> dcat = dec_[i]->backward(dcur, ctx.dec_ctx[i], dcond);
      FeatureMap<S> dup, dskip;
      split_channels(dcat, ctx.skip_channels[i], dup, dskip);
      const size_t skip_idx = enc_.size() - 1 - i;
      dskips[skip_idx] = dskip;
      dcur = Upsample2x<S>::backward(dup);
    }
    dcur = mid_->backward(dcur, ctx.mid_ctx, dcond);
    for (int i = static_cast<int>(enc_.size()) - 1; i >= 0; --i) {
      FeatureMap<S> dout = AvgPool2x2<S>::backward(
          dcur, ctx.pool_dims[i].first, ctx.pool_dims[i].second);
      dout.m += dskips[i].m;
      dcur = enc_[i]->backward(dout, ctx.enc_ctx[i], dcond);
    }
    cond_.backward(dcond, ctx.cond_ctx);
    return dcur;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    cond_.visit(prefix + ".cond", f);
    for (size_t i = 0; i < enc_.size(); ++i) {
      enc_[i]->visit(prefix + ".enc" + std::to_string(i), f);
    }
    mid_->visit(prefix + ".mid", f);
    for (size_t i = 0; i < dec_.size(); ++i) {
      dec_[i]->visit(prefix + ".dec" + std::to_string(i), f);
    }
    out_conv_.visit(prefix + ".out", f);
  }

  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  CondNet<S> cond_;
  std::vector<std::unique_ptr<ConvBlock<S>>> enc_;
  std::unique_ptr<ConvBlock<S>> mid_;
  std::vector<std::unique_ptr<ConvBlock<S>>> dec_;
  Conv2D<S> out_conv_;
};

}  // namespace ctphase
