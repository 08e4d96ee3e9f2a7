#pragma once
// Vision encoder: parallel image / pseudo-image conv backbones with joint
// transformer fusion after every block, temporal deformable self-attention
// over frames, spatial deformable cross-attention over camera views plus the
// point-cloud branch, and a BEV decoder head.

#include <string>
#include <vector>

#include "minidrive/geometry.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/sim.hpp"
#include "minidrive/tensor.hpp"

namespace md::enc {

struct EncoderConfig {
  int image_width = 32, image_height = 16;
  int num_views = 4;   // N
  int num_frames = 2;  // T
  int voxel_rows = 32, voxel_cols = 32;
  int d = 64;       // token/query dim
  int heads = 4;    // M
  int samples = 4;  // K_att per head
  int query_rows = 16, query_cols = 16;
  int bev_rows = 64, bev_cols = 64;
  int sem_classes = 7, road_classes = 3;
  int c1 = 16, c2 = 32, c3 = 64;  // backbone channels (c3 must equal d)
  double lift_height = 1.0;       // reference-point height for the view hit test
  bool deformable_offsets = true;  // false: fixed-grid ablation (offsets zeroed)
  bool temporal_embeddings = true;

  int bev_channels() const { return sem_classes + road_classes + 1; }
  int num_queries() const { return query_rows * query_cols; }
  int map_h() const { return image_height / 8; }
  int map_w() const { return image_width / 8; }
  int pseudo_h() const { return voxel_rows / 8; }
  int pseudo_w() const { return voxel_cols / 8; }
};

// One deformable-attention block: query-predicted offsets and per-(query,
// head) softmax weights over K sampled locations of a value-projected map.
class DeformAttention {
 public:
  DeformAttention() = default;
  DeformAttention(nn::ParamRegistry& reg, const std::string& name, int d, int heads, int samples,
                  Rng& rng, bool offsets_enabled);

  // queries [nq,d], ref_points [nq,2] in map (row,col) coords, fmap [d,h,w].
  // Pre-output-projection head mixture [nq,d].
  Tensor head_mix(const Tensor& queries, const Tensor& ref_points, const Tensor& fmap) const;
  Tensor forward(const Tensor& queries, const Tensor& ref_points, const Tensor& fmap) const;

  int heads_count() const { return heads_; }
  // Softmaxed sampling weights of the last call, [nq, K] per head.
  mutable std::vector<Tensor> last_weights;

  std::vector<nn::Linear> value_proj;  // per head, d -> d/heads
  nn::Linear offset_pred;              // d -> heads*samples*2
  nn::Linear weight_pred;              // d -> heads*samples
  nn::Linear out_proj;                 // d -> d

 private:
  int d_ = 0, heads_ = 0, samples_ = 0;
  bool offsets_enabled_ = true;
};

struct BackboneOutput {
  std::vector<std::vector<Tensor>> image_maps;  // [T][N], each [c3,h3,w3]
  std::vector<Tensor> pseudo_maps;              // [T], each [c3,hp,wp]
};

struct EncoderOutput {
  Tensor q_s;    // [H_q*W_q, d]
  Tensor b_hat;  // [C_s + C_d + 1, bev_rows, bev_cols], all channels in [0,1]
};

class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(nn::ParamRegistry& reg, const std::string& name, const EncoderConfig& cfg,
                const sim::SensorRig& nominal_rig, Rng& rng);

  const EncoderConfig& config() const { return cfg_; }

  // images [T,N,3,H,W]; pseudo: one [2,voxel_rows,voxel_cols] tensor per frame.
  EncoderOutput forward(const Tensor& images, const std::vector<Tensor>& pseudo) const;

  // Stages, exposed for tests and ablations.
  BackboneOutput backbone_fused(const Tensor& images, const std::vector<Tensor>& pseudo) const;
  Tensor temporal_self_attn(const BackboneOutput& maps) const;                    // Q_t
  Tensor temporal_head_sum(const BackboneOutput& maps) const;                     // pre-projection
  Tensor spatial_cross_attn(const Tensor& q_t, const BackboneOutput& maps) const; // Q_s
  Tensor bev_decode(const Tensor& q_s) const;

  // View-hit mask of query q for view v, from the nominal rig's frustum.
  bool view_hit(int query, int view) const { return hit_mask_[static_cast<std::size_t>(query) * cfg_.num_views + view]; }
  geo::Vec3 query_lift_point(int query) const;

  mutable Tensor last_view_term, last_lidar_term;  // spatial attention trace

  // Sub-modules (public: tests poke at projections and ablations).
  nn::Conv2d img_b1, img_b2, img_b3;
  nn::Conv2d pc_b1, pc_b2, pc_b3;
  nn::TransformerLayer fuse1, fuse2, fuse3;
  Tensor pos_img, pos_view, pos_pc;  // learned positional encodings
  Tensor query_emb;                  // [nq, d]
  Tensor temporal_emb;               // [T, d]
  DeformAttention temporal_da, view_da, lidar_da;
  nn::LayerNorm ln_t, ln_s;
  nn::ConvTranspose2d up1, up2;
  nn::Conv2d head;

 private:
  Tensor run_block(const nn::Conv2d& conv, const Tensor& x) const;
  void precompute_references(const sim::SensorRig& rig);

  EncoderConfig cfg_;
  // Constant reference-point tensors (not parameters).
  Tensor ref_wide_;                 // [nq,2] into the per-frame wide image map
  std::vector<Tensor> ref_views_;   // per view [nq,2] into a view map
  Tensor ref_pseudo_;               // [nq,2] into the pseudo map
  std::vector<char> hit_mask_;      // nq*N
  std::vector<Tensor> view_mask_;   // per view [nq,d]: rows 1/|V_hit| or 0
};

}  // namespace md::enc
