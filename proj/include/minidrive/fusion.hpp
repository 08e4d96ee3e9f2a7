#pragma once
// Multi-modal fusion: cross-attention of vision/language features with the
// planning tokens, a Q-Former with learnable queries, and the autoregressive
// waypoint decoder that fills the frozen-decoder slot.

#include <vector>

#include "minidrive/geometry.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/tensor.hpp"

namespace md::fusion {

struct FusionConfig {
  int d = 64;          // token dim shared with encoder/planner/language
  int heads = 4;
  int n_queries = 16;  // learnable queries per branch
  int layers = 2;      // Q-Former depth
  int d_m = 128;       // fused feature dim
  int waypoints = 5;   // K
  int gru_hidden = 64;
};

// Single-layer multi-head cross-attention with residual + layer norm;
// queries come from `a`, keys/values from `b`.
class CrossFuse {
 public:
  CrossFuse() = default;
  CrossFuse(nn::ParamRegistry& reg, const std::string& name, int d, int heads, Rng& rng);
  Tensor forward(const Tensor& a, const Tensor& b) const;

  nn::MultiHeadAttention attn;
  nn::LayerNorm ln;
};

class QFormer {
 public:
  QFormer() = default;
  QFormer(nn::ParamRegistry& reg, const std::string& name, const FusionConfig& cfg, Rng& rng);

  // F_m from the perception and command token sets.
  Tensor forward(const Tensor& f_perception, const Tensor& f_command) const;

  struct Branch {
    std::vector<nn::MultiHeadAttention> self_attn, cross_attn;
    std::vector<nn::LayerNorm> ln_self, ln_cross, ln_ff;
    std::vector<nn::Linear> ff1, ff2;
  };
  Tensor queries_p, queries_c;  // [n_queries, d] each
  Branch branch_p, branch_c;
  nn::Linear mlp1, mlp2;

 private:
  FusionConfig cfg_;
  Tensor run_branch(const Branch& b, const Tensor& queries, const Tensor& memory) const;
};

// GRU-style autoregressive head emitting K ego-frame waypoints as deltas.
class WaypointDecoder {
 public:
  WaypointDecoder() = default;
  WaypointDecoder(nn::ParamRegistry& reg, const std::string& name, const FusionConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& f_m) const;  // [K, 2]
  std::vector<geo::Vec2> decode(const Tensor& f_m) const;

  nn::Linear init_state;
  nn::GruCell cell;
  nn::Linear delta_head;

 private:
  FusionConfig cfg_;
};

// The full trainable stage-4 head: cross-fusion, Q-Former, waypoint decoder.
class FusionModel {
 public:
  FusionModel() = default;
  FusionModel(nn::ParamRegistry& reg, const std::string& name, const FusionConfig& cfg, Rng& rng);

  Tensor fuse(const Tensor& q_s, const Tensor& lang_tokens, const Tensor& plan_tokens) const;
  Tensor predict_waypoints(const Tensor& q_s, const Tensor& lang_tokens,
                           const Tensor& plan_tokens) const;

  CrossFuse cross_perception, cross_command;
  QFormer qformer;
  WaypointDecoder decoder;
  FusionConfig config;
};

}  // namespace md::fusion
