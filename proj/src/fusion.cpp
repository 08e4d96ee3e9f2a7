#include "minidrive/fusion.hpp"

namespace md::fusion {

using namespace md::ops;

CrossFuse::CrossFuse(nn::ParamRegistry& reg, const std::string& name, int d, int heads, Rng& rng) {
  attn = nn::MultiHeadAttention(reg, name + ".attn", d, heads, rng);
  ln = nn::LayerNorm(reg, name + ".ln", d);
}

Tensor CrossFuse::forward(const Tensor& a, const Tensor& b) const {
  if (a.dim(0) < 1 || b.dim(0) < 1) throw DimensionError("cross_fuse: empty token set");
  return ln.forward(add(a, attn.forward(a, b)));
}

QFormer::QFormer(nn::ParamRegistry& reg, const std::string& name, const FusionConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  queries_p = reg.add(name + ".queries_p", nn::embed_init({cfg.n_queries, cfg.d}, rng));
  queries_c = reg.add(name + ".queries_c", nn::embed_init({cfg.n_queries, cfg.d}, rng));
  auto build = [&](Branch& br, const std::string& bn) {
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string ln = bn + std::to_string(l);
      br.self_attn.emplace_back(reg, ln + ".self", cfg.d, cfg.heads, rng);
      br.cross_attn.emplace_back(reg, ln + ".cross", cfg.d, cfg.heads, rng);
      br.ln_self.emplace_back(reg, ln + ".ln_self", cfg.d);
      br.ln_cross.emplace_back(reg, ln + ".ln_cross", cfg.d);
      br.ln_ff.emplace_back(reg, ln + ".ln_ff", cfg.d);
      br.ff1.emplace_back(reg, ln + ".ff1", cfg.d, 2 * cfg.d, rng);
      br.ff2.emplace_back(reg, ln + ".ff2", 2 * cfg.d, cfg.d, rng);
    }
  };
  build(branch_p, name + ".p");
  build(branch_c, name + ".c");
  mlp1 = nn::Linear(reg, name + ".mlp1", 2 * cfg.n_queries * cfg.d, 2 * cfg.d_m, rng);
  mlp2 = nn::Linear(reg, name + ".mlp2", 2 * cfg.d_m, cfg.d_m, rng);
}

Tensor QFormer::run_branch(const Branch& b, const Tensor& queries, const Tensor& memory) const {
  Tensor x = queries;
  for (int l = 0; l < cfg_.layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    Tensor h = b.ln_self[li].forward(x);
    x = add(x, b.self_attn[li].forward(h, h));
    Tensor hc = b.ln_cross[li].forward(x);
    x = add(x, b.cross_attn[li].forward(hc, memory));
    Tensor hf = b.ln_ff[li].forward(x);
    x = add(x, b.ff2[li].forward(relu(b.ff1[li].forward(hf))));
  }
  return x;
}

Tensor QFormer::forward(const Tensor& f_perception, const Tensor& f_command) const {
  Tensor out_p = run_branch(branch_p, queries_p, f_perception);
  Tensor out_c = run_branch(branch_c, queries_c, f_command);
  Tensor flat = reshape(concat({out_p, out_c}, 0), {1, 2 * cfg_.n_queries * cfg_.d});
  return mlp2.forward(relu(mlp1.forward(flat)));  // [1, d_m]
}

WaypointDecoder::WaypointDecoder(nn::ParamRegistry& reg, const std::string& name,
                                 const FusionConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  init_state = nn::Linear(reg, name + ".init", cfg.d_m, cfg.gru_hidden, rng);
  cell = nn::GruCell(reg, name + ".gru", 2, cfg.gru_hidden, rng);
  delta_head = nn::Linear(reg, name + ".delta", cfg.gru_hidden, 2, rng);
}

Tensor WaypointDecoder::forward(const Tensor& f_m) const {
  Tensor h = tanh_op(init_state.forward(f_m));  // [1, hidden]
  Tensor prev_delta = Tensor::zeros({1, 2});
  Tensor pos = Tensor::zeros({1, 2});
  std::vector<Tensor> points;
  for (int k = 0; k < cfg_.waypoints; ++k) {
    h = cell.forward(h, prev_delta);
    Tensor delta = delta_head.forward(h);  // [1,2]
    pos = add(pos, delta);
    points.push_back(pos);
    prev_delta = delta;
  }
  return concat(points, 0);  // [K, 2]
}

std::vector<geo::Vec2> WaypointDecoder::decode(const Tensor& f_m) const {
  Tensor wp = forward(f_m);
  std::vector<geo::Vec2> out;
  for (int k = 0; k < wp.dim(0); ++k) out.push_back({wp.at({k, 0}), wp.at({k, 1})});
  return out;
}

FusionModel::FusionModel(nn::ParamRegistry& reg, const std::string& name, const FusionConfig& cfg,
                         Rng& rng)
    : config(cfg) {
  cross_perception = CrossFuse(reg, name + ".cross_p", cfg.d, cfg.heads, rng);
  cross_command = CrossFuse(reg, name + ".cross_c", cfg.d, cfg.heads, rng);
  qformer = QFormer(reg, name + ".qformer", cfg, rng);
  decoder = WaypointDecoder(reg, name + ".decoder", cfg, rng);
}

Tensor FusionModel::fuse(const Tensor& q_s, const Tensor& lang_tokens,
                         const Tensor& plan_tokens) const {
  Tensor f_perception = cross_perception.forward(q_s, plan_tokens);
  Tensor f_command = cross_command.forward(lang_tokens, plan_tokens);
  return qformer.forward(f_perception, f_command);
}

Tensor FusionModel::predict_waypoints(const Tensor& q_s, const Tensor& lang_tokens,
                                      const Tensor& plan_tokens) const {
  return decoder.forward(fuse(q_s, lang_tokens, plan_tokens));
}

}  // namespace md::fusion
