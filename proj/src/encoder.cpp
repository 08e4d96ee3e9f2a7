#include "minidrive/encoder.hpp"

#include <cmath>

namespace md::enc {

using namespace md::ops;

// ------------------------------------------------------------- deform attn

DeformAttention::DeformAttention(nn::ParamRegistry& reg, const std::string& name, int d, int heads,
                                 int samples, Rng& rng, bool offsets_enabled)
    : d_(d), heads_(heads), samples_(samples), offsets_enabled_(offsets_enabled) {
  if (d % heads != 0) throw ContractError("deform attention: d must divide by heads");
  for (int m = 0; m < heads; ++m)
    value_proj.emplace_back(reg, name + ".v" + std::to_string(m), d, d / heads, rng);
  offset_pred = nn::Linear(reg, name + ".offset", d, heads * samples * 2, rng);
  weight_pred = nn::Linear(reg, name + ".weight", d, heads * samples, rng);
  out_proj = nn::Linear(reg, name + ".out", d, d, rng);
}

Tensor DeformAttention::head_mix(const Tensor& queries, const Tensor& ref_points,
                                 const Tensor& fmap) const {
  const int nq = queries.dim(0);
  const int h = fmap.dim(1), w = fmap.dim(2);
  const int dh = d_ / heads_;
  last_weights.clear();

  // Tokens of the map once: [h*w, d].
  Tensor tokens = transpose2d(reshape(fmap, {fmap.dim(0), h * w}));

  Tensor offsets = offset_pred.forward(queries);  // [nq, M*K*2]
  if (!offsets_enabled_) offsets = scale(offsets, 0.0);
  Tensor logits = weight_pred.forward(queries);  // [nq, M*K]

  // Repeat each reference point K times (constant, no grad).
  Tensor ref_rep = Tensor::zeros({nq * samples_, 2});
  for (int q = 0; q < nq; ++q)
    for (int k = 0; k < samples_; ++k) {
      ref_rep.data()[(static_cast<std::size_t>(q) * samples_ + k) * 2] = ref_points.at({q, 0});
      ref_rep.data()[(static_cast<std::size_t>(q) * samples_ + k) * 2 + 1] = ref_points.at({q, 1});
    }

  std::vector<Tensor> per_head;
  per_head.reserve(static_cast<std::size_t>(heads_));
  for (int m = 0; m < heads_; ++m) {
    Tensor vmap = transpose2d(value_proj[static_cast<std::size_t>(m)].forward(tokens));  // [dh, h*w]
    vmap = reshape(vmap, {dh, h, w});
    Tensor off_m = reshape(slice_cols(offsets, m * samples_ * 2, (m + 1) * samples_ * 2),
                           {nq * samples_, 2});
    Tensor points = add(ref_rep, off_m);
    Tensor sampled = bilinear_sample(vmap, points);  // [nq*K, dh]
    Tensor wts = softmax(slice_cols(logits, m * samples_, (m + 1) * samples_), 1);  // [nq, K]
    last_weights.push_back(wts);
    per_head.push_back(weighted_sum_groups(sampled, wts));  // [nq, dh]
  }
  return concat(per_head, 1);
}

Tensor DeformAttention::forward(const Tensor& queries, const Tensor& ref_points,
                                const Tensor& fmap) const {
  return out_proj.forward(head_mix(queries, ref_points, fmap));
}

// ------------------------------------------------------------- constructor

VisionEncoder::VisionEncoder(nn::ParamRegistry& reg, const std::string& name,
                             const EncoderConfig& cfg, const sim::SensorRig& rig, Rng& rng)
    : cfg_(cfg) {
  if (cfg.c3 != cfg.d) throw ContractError("encoder: c3 must equal token dim d");
  // Each block halves the map: stride-1 conv (keeps the op's exact
  // output-size contract on even extents) followed by 2x average pooling.
  img_b1 = nn::Conv2d(reg, name + ".img1", 3, cfg.c1, 3, 1, 1, rng);
  img_b2 = nn::Conv2d(reg, name + ".img2", cfg.c1, cfg.c2, 3, 1, 1, rng);
  img_b3 = nn::Conv2d(reg, name + ".img3", cfg.c2, cfg.c3, 3, 1, 1, rng);
  pc_b1 = nn::Conv2d(reg, name + ".pc1", 2, cfg.c1, 3, 1, 1, rng);
  pc_b2 = nn::Conv2d(reg, name + ".pc2", cfg.c1, cfg.c2, 3, 1, 1, rng);
  pc_b3 = nn::Conv2d(reg, name + ".pc3", cfg.c2, cfg.c3, 3, 1, 1, rng);
  // Single-head fusion layers: per-head score matrices are token^2, so head
  // count multiplies the dominant cost at block-1 token counts.
  fuse1 = nn::TransformerLayer(reg, name + ".fuse1", cfg.c1, 1, rng, /*with_ffn=*/false);
  fuse2 = nn::TransformerLayer(reg, name + ".fuse2", cfg.c2, 1, rng, /*with_ffn=*/false);
  fuse3 = nn::TransformerLayer(reg, name + ".fuse3", cfg.c3, 1, rng, /*with_ffn=*/false);

  pos_img = reg.add(name + ".pos_img", nn::embed_init({cfg.map_h() * cfg.map_w(), cfg.d}, rng));
  pos_view = reg.add(name + ".pos_view", nn::embed_init({cfg.num_views, cfg.d}, rng));
  pos_pc = reg.add(name + ".pos_pc", nn::embed_init({cfg.pseudo_h() * cfg.pseudo_w(), cfg.d}, rng));
  query_emb = reg.add(name + ".queries", nn::embed_init({cfg.num_queries(), cfg.d}, rng));
  temporal_emb = reg.add(name + ".temporal", nn::embed_init({cfg.num_frames, cfg.d}, rng));

  temporal_da = DeformAttention(reg, name + ".da_t", cfg.d, cfg.heads, cfg.samples, rng,
                                cfg.deformable_offsets);
  view_da = DeformAttention(reg, name + ".da_view", cfg.d, cfg.heads, cfg.samples, rng,
                            cfg.deformable_offsets);
  lidar_da = DeformAttention(reg, name + ".da_lidar", cfg.d, cfg.heads, cfg.samples, rng,
                             cfg.deformable_offsets);
  ln_t = nn::LayerNorm(reg, name + ".ln_t", cfg.d);
  ln_s = nn::LayerNorm(reg, name + ".ln_s", cfg.d);

  up1 = nn::ConvTranspose2d(reg, name + ".up1", cfg.d, 32, 4, 2, 1, rng);
  up2 = nn::ConvTranspose2d(reg, name + ".up2", 32, 16, 4, 2, 1, rng);
  head = nn::Conv2d(reg, name + ".head", 16, cfg.bev_channels(), 1, 1, 0, rng);

  precompute_references(rig);
}

geo::Vec3 VisionEncoder::query_lift_point(int query) const {
  const geo::BevGrid bev = geo::default_bev_grid();
  const double extent_x = bev.rows * bev.resolution;
  const double extent_y = bev.cols * bev.resolution;
  const double res_x = extent_x / cfg_.query_rows;
  const double res_y = extent_y / cfg_.query_cols;
  const int r = query / cfg_.query_cols, c = query % cfg_.query_cols;
  const double x0 = bev.origin.x - bev.resolution / 2;
  const double y0 = bev.origin.y - bev.resolution / 2;
  return {x0 + (r + 0.5) * res_x, y0 + (c + 0.5) * res_y, cfg_.lift_height};
}

void VisionEncoder::precompute_references(const sim::SensorRig& rig) {
  const int nq = cfg_.num_queries();
  const int n = cfg_.num_views;
  if (static_cast<int>(rig.cameras.size()) != n) throw ContractError("encoder: rig size != num_views");

  ref_wide_ = Tensor::zeros({nq, 2});
  ref_pseudo_ = Tensor::zeros({nq, 2});
  hit_mask_.assign(static_cast<std::size_t>(nq) * n, 0);
  ref_views_.assign(static_cast<std::size_t>(n), Tensor());
  for (int v = 0; v < n; ++v) ref_views_[static_cast<std::size_t>(v)] = Tensor::zeros({nq, 2});

  const geo::BevGrid voxel = geo::default_voxel_grid();
  const int h3 = cfg_.map_h(), w3 = cfg_.map_w();
  const int hp = cfg_.pseudo_h(), wp = cfg_.pseudo_w();
  std::vector<int> hit_count(static_cast<std::size_t>(nq), 0);

  for (int q = 0; q < nq; ++q) {
    const geo::Vec3 lift = query_lift_point(q);
    const int r = q / cfg_.query_cols, c = q % cfg_.query_cols;
    const double v_norm = static_cast<double>(r) / (cfg_.query_rows - 1);
    const double u_norm = static_cast<double>(c) / (cfg_.query_cols - 1);
    ref_wide_.data()[2 * q] = v_norm * (h3 - 1);
    ref_wide_.data()[2 * q + 1] = u_norm * (n * w3 - 1);

    const double pr = (lift.x - voxel.origin.x) / voxel.resolution / (voxel.rows - 1) * (hp - 1);
    const double pc = (lift.y - voxel.origin.y) / voxel.resolution / (voxel.cols - 1) * (wp - 1);
    ref_pseudo_.data()[2 * q] = pr;
    ref_pseudo_.data()[2 * q + 1] = pc;

    for (int v = 0; v < n; ++v) {
      const auto& cam = rig.cameras[static_cast<std::size_t>(v)];
      auto px = geo::project(cam, lift);
      if (px) {
        hit_mask_[static_cast<std::size_t>(q) * n + v] = 1;
        ++hit_count[static_cast<std::size_t>(q)];
        ref_views_[static_cast<std::size_t>(v)].data()[2 * q] =
            px->v / (cam.height - 1) * (h3 - 1);
        ref_views_[static_cast<std::size_t>(v)].data()[2 * q + 1] =
            px->u / (cam.width - 1) * (w3 - 1);
      }
    }
  }
  view_mask_.assign(static_cast<std::size_t>(n), Tensor());
  for (int v = 0; v < n; ++v) {
    Tensor m = Tensor::zeros({nq, cfg_.d});
    for (int q = 0; q < nq; ++q) {
      if (!hit_mask_[static_cast<std::size_t>(q) * n + v]) continue;
      const double wgt = 1.0 / hit_count[static_cast<std::size_t>(q)];
      for (int i = 0; i < cfg_.d; ++i) m.data()[static_cast<std::size_t>(q) * cfg_.d + i] = wgt;
    }
    view_mask_[static_cast<std::size_t>(v)] = m;
  }
}

// ---------------------------------------------------------------- backbone

Tensor VisionEncoder::run_block(const nn::Conv2d& conv, const Tensor& x) const {
  return avg_pool2d(relu(conv.forward(x)), 2);
}

namespace {

Tensor map_to_tokens(const Tensor& map) {  // [c,h,w] -> [h*w, c]
  return transpose2d(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

Tensor tokens_to_map(const Tensor& tokens, int h, int w) {  // [h*w, c] -> [c,h,w]
  return reshape(transpose2d(tokens), {tokens.dim(1), h, w});
}

// Row-broadcast add of a [1,d] vector to an [n,d] matrix.
Tensor add_rowvec(const Tensor& x, const Tensor& row) {
  Tensor ones = Tensor::full({x.dim(0), 1}, 1.0);
  return add(x, matmul(ones, row));
}

}  // namespace

BackboneOutput VisionEncoder::backbone_fused(const Tensor& images,
                                             const std::vector<Tensor>& pseudo) const {
  const int t_frames = cfg_.num_frames, n_views = cfg_.num_views;
  if (images.rank() != 5 || images.dim(0) != t_frames || images.dim(1) != n_views)
    throw DimensionError("encoder: images must be [T,N,3,H,W]");
  if (static_cast<int>(pseudo.size()) != t_frames)
    throw DimensionError("encoder: one pseudo-image per frame expected");

  // Split the batch into per-(frame, view) planes; inputs carry no grad.
  std::vector<Tensor> img_maps;
  Tensor flat = reshape(images, {t_frames * n_views * 3, cfg_.image_height, cfg_.image_width});
  for (int i = 0; i < t_frames * n_views; ++i)
    img_maps.push_back(run_block(img_b1, slice0(flat, i * 3, i * 3 + 3)));
  std::vector<Tensor> pc_maps;
  for (int t = 0; t < t_frames; ++t) pc_maps.push_back(run_block(pc_b1, pseudo[static_cast<std::size_t>(t)]));

  const nn::Conv2d* img_blocks[2] = {&img_b2, &img_b3};
  const nn::Conv2d* pc_blocks[2] = {&pc_b2, &pc_b3};
  const nn::TransformerLayer* fusers[3] = {&fuse1, &fuse2, &fuse3};

  for (int stage = 0; stage < 3; ++stage) {
    // Joint token set across both modalities, one shared transformer layer.
    std::vector<Tensor> token_sets;
    std::vector<std::pair<int, int>> shapes;
    for (const Tensor& m : img_maps) {
      token_sets.push_back(map_to_tokens(m));
      shapes.emplace_back(m.dim(1), m.dim(2));
    }
    for (const Tensor& m : pc_maps) {
      token_sets.push_back(map_to_tokens(m));
      shapes.emplace_back(m.dim(1), m.dim(2));
    }
    Tensor fused = fusers[stage]->forward(concat(token_sets, 0));
    int row = 0;
    for (std::size_t i = 0; i < token_sets.size(); ++i) {
      const int rows = token_sets[i].dim(0);
      Tensor part = slice0(fused, row, row + rows);
      row += rows;
      Tensor m = tokens_to_map(part, shapes[i].first, shapes[i].second);
      if (i < img_maps.size()) img_maps[i] = m;
      else pc_maps[i - img_maps.size()] = m;
    }
    if (stage < 2) {
      for (Tensor& m : img_maps) m = run_block(*img_blocks[stage], m);
      for (Tensor& m : pc_maps) m = run_block(*pc_blocks[stage], m);
    }
  }

  // Positional encodings on the final token maps.
  BackboneOutput out;
  out.image_maps.resize(static_cast<std::size_t>(t_frames));
  const int h3 = cfg_.map_h(), w3 = cfg_.map_w();
  for (int t = 0; t < t_frames; ++t) {
    for (int v = 0; v < n_views; ++v) {
      Tensor tokens = map_to_tokens(img_maps[static_cast<std::size_t>(t * n_views + v)]);
      tokens = add(tokens, pos_img);
      tokens = add_rowvec(tokens, slice0(pos_view, v, v + 1));
      out.image_maps[static_cast<std::size_t>(t)].push_back(tokens_to_map(tokens, h3, w3));
    }
    Tensor ptokens = add(map_to_tokens(pc_maps[static_cast<std::size_t>(t)]), pos_pc);
    out.pseudo_maps.push_back(tokens_to_map(ptokens, cfg_.pseudo_h(), cfg_.pseudo_w()));
  }
  return out;
}

// ---------------------------------------------------------------- attention

Tensor VisionEncoder::temporal_head_sum(const BackboneOutput& maps) const {
  Tensor acc;
  for (int t = 0; t < cfg_.num_frames; ++t) {
    // One wide map per frame: views side by side along width.
    std::vector<Tensor> frame_maps = maps.image_maps[static_cast<std::size_t>(t)];
    Tensor wide = concat(frame_maps, 2);
    if (cfg_.temporal_embeddings) {
      Tensor tokens = map_to_tokens(wide);
      tokens = add_rowvec(tokens, slice0(temporal_emb, t, t + 1));
      wide = tokens_to_map(tokens, wide.dim(1), wide.dim(2));
    }
    Tensor mix = temporal_da.head_mix(query_emb, ref_wide_, wide);
    acc = acc.defined() ? add(acc, mix) : mix;
  }
  return acc;
}

Tensor VisionEncoder::temporal_self_attn(const BackboneOutput& maps) const {
  Tensor mixed = temporal_da.out_proj.forward(temporal_head_sum(maps));
  return ln_t.forward(add(query_emb, mixed));
}

Tensor VisionEncoder::spatial_cross_attn(const Tensor& q_t, const BackboneOutput& maps) const {
  const auto& newest = maps.image_maps.back();
  Tensor view_term;
  for (int v = 0; v < cfg_.num_views; ++v) {
    Tensor da_out = view_da.forward(q_t, ref_views_[static_cast<std::size_t>(v)],
                                    newest[static_cast<std::size_t>(v)]);
    Tensor masked = mul(da_out, view_mask_[static_cast<std::size_t>(v)]);
    view_term = view_term.defined() ? add(view_term, masked) : masked;
  }
  Tensor lidar_term = lidar_da.forward(q_t, ref_pseudo_, maps.pseudo_maps.back());
  last_view_term = view_term;
  last_lidar_term = lidar_term;
  return ln_s.forward(add(q_t, add(view_term, lidar_term)));
}

Tensor VisionEncoder::bev_decode(const Tensor& q_s) const {
  Tensor grid = reshape(transpose2d(q_s), {cfg_.d, cfg_.query_rows, cfg_.query_cols});
  Tensor x = relu(up1.forward(grid));
  x = relu(up2.forward(x));
  Tensor logits = head.forward(x);  // [C_s+C_d+1, bev, bev]
  Tensor sem = softmax(slice0(logits, 0, cfg_.sem_classes), 0);
  Tensor road = softmax(slice0(logits, cfg_.sem_classes, cfg_.sem_classes + cfg_.road_classes), 0);
  Tensor occ = sigmoid(slice0(logits, cfg_.sem_classes + cfg_.road_classes, cfg_.bev_channels()));
  return concat({sem, road, occ}, 0);
}

EncoderOutput VisionEncoder::forward(const Tensor& images, const std::vector<Tensor>& pseudo) const {
  BackboneOutput maps = backbone_fused(images, pseudo);
  Tensor q_t = temporal_self_attn(maps);
  Tensor q_s = spatial_cross_attn(q_t, maps);
  EncoderOutput out;
  out.q_s = q_s;
  out.b_hat = bev_decode(q_s);
  return out;
}

}  // namespace md::enc
