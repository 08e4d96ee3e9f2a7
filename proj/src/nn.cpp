#include "minidrive/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "minidrive/blob.hpp"

namespace md::nn {

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw ContractError("param registered twice: " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamRegistry::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown param: " + name);
  return items_[it->second].second;
}

void ParamRegistry::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& [name, t] : items_)
    if (name.rfind(prefix, 0) == 0) t.ptr()->requires_grad = trainable;
}

void ParamRegistry::zero_grads() {
  for (auto& [name, t] : items_) t.zero_grad();
}

std::uint64_t ParamRegistry::content_hash(const std::string& prefix) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : items_) {
    if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
    mix(name.data(), name.size());
    mix(t.data(), t.size() * sizeof(double));
  }
  return h;
}

void save_checkpoint(const ParamRegistry& reg, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("checkpoint: cannot open " + path);
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : reg.items()) {
    blob::write(os, t.shape(), t.data());
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += blob::byte_size(t.shape());
  }
  std::ofstream ms(path + ".json");
  if (!ms) throw ContractError("checkpoint: cannot open " + path + ".json");
  ms << manifest.dump(2) << "\n";
}

void load_checkpoint(ParamRegistry& reg, const std::string& path) {
  std::ifstream ms(path + ".json");
  if (!ms) throw ContractError("checkpoint: missing manifest for " + path);
  nlohmann::json manifest = nlohmann::json::parse(ms);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("checkpoint: cannot open " + path);

  std::unordered_map<std::string, std::uint64_t> offsets;
  for (const auto& e : manifest) offsets[e.at("name").get<std::string>()] = e.at("offset").get<std::uint64_t>();
  for (auto& [name, t] : const_cast<std::vector<std::pair<std::string, Tensor>>&>(reg.items())) {
    auto it = offsets.find(name);
    if (it == offsets.end()) throw ContractError("checkpoint: param missing: " + name);
    is.seekg(static_cast<std::streamoff>(it->second));
    blob::Blob b = blob::read(is);
    if (b.shape != t.shape()) throw DimensionError("checkpoint: shape mismatch for " + name);
    std::memcpy(t.data(), b.data.data(), sizeof(double) * t.size());
  }
}

Tensor xavier(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
  return t;
}

Tensor embed_init(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, 0.02);
  return t;
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng, bool bias) {
  w = reg.add(name + ".w", xavier({in, out}, in, out, rng));
  if (bias) b = reg.add(name + ".b", Tensor::zeros({out}, true));
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& name, int c_in, int c_out, int k, int stride_,
               int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  const int fan_in = c_in * k * k, fan_out = c_out * k * k;
  w = reg.add(name + ".w", xavier({c_out, c_in, k, k}, fan_in, fan_out, rng));
  b = reg.add(name + ".b", Tensor::zeros({c_out}, true));
}

ConvTranspose2d::ConvTranspose2d(ParamRegistry& reg, const std::string& name, int c_in, int c_out,
                                 int k, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  const int fan_in = c_in * k * k, fan_out = c_out * k * k;
  w = reg.add(name + ".w", xavier({c_in, c_out, k, k}, fan_in, fan_out, rng));
  b = reg.add(name + ".b", Tensor::zeros({c_out}, true));
}

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& name, int d) {
  gamma = reg.add(name + ".gamma", Tensor::full({d}, 1.0, true));
  beta = reg.add(name + ".beta", Tensor::zeros({d}, true));
}

MultiHeadAttention::MultiHeadAttention(ParamRegistry& reg, const std::string& name, int d_,
                                       int heads_, Rng& rng)
    : heads(heads_), d(d_) {
  if (d % heads != 0) throw ContractError("attention: d must divide by heads");
  wq = Linear(reg, name + ".wq", d, d, rng);
  wk = Linear(reg, name + ".wk", d, d, rng);
  wv = Linear(reg, name + ".wv", d, d, rng);
  wo = Linear(reg, name + ".wo", d, d, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& a, const Tensor& b) const {
  const int dh = d / heads;
  Tensor q = wq.forward(a);
  Tensor k = wk.forward(b);
  Tensor v = wv.forward(b);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  last_attn.clear();
  std::vector<Tensor> ctx;
  ctx.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = ops::slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = ops::slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = ops::slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = ops::scale(ops::matmul(qh, ops::transpose2d(kh)), inv_sqrt);
    Tensor probs = ops::softmax(scores, 1);
    last_attn.push_back(probs);
    ctx.push_back(ops::matmul(probs, vh));
  }
  return wo.forward(ops::concat(ctx, 1));
}

TransformerLayer::TransformerLayer(ParamRegistry& reg, const std::string& name, int d, int heads,
                                   Rng& rng, bool with_ffn_)
    : with_ffn(with_ffn_) {
  ln1 = LayerNorm(reg, name + ".ln1", d);
  attn = MultiHeadAttention(reg, name + ".attn", d, heads, rng);
  if (with_ffn) {
    ln2 = LayerNorm(reg, name + ".ln2", d);
    ff1 = Linear(reg, name + ".ff1", d, 2 * d, rng);
    ff2 = Linear(reg, name + ".ff2", 2 * d, d, rng);
  }
}

Tensor TransformerLayer::forward(const Tensor& x) const {
  Tensor h = ln1.forward(x);
  Tensor y = ops::add(x, attn.forward(h, h));
  if (with_ffn) {
    Tensor f = ff2.forward(ops::relu(ff1.forward(ln2.forward(y))));
    y = ops::add(y, f);
  }
  return y;
}

GruCell::GruCell(ParamRegistry& reg, const std::string& name, int dx, int dh_, Rng& rng) : dh(dh_) {
  gates = Linear(reg, name + ".gates", dh + dx, 2 * dh, rng);
  cand = Linear(reg, name + ".cand", dh + dx, dh, rng);
}

Tensor GruCell::forward(const Tensor& h, const Tensor& x) const {
  Tensor hx = ops::concat({h, x}, 1);
  Tensor zr = ops::sigmoid(gates.forward(hx));
  Tensor z = ops::slice_cols(zr, 0, dh);
  Tensor r = ops::slice_cols(zr, dh, 2 * dh);
  Tensor rh = ops::mul(r, h);
  Tensor cand_in = ops::concat({rh, x}, 1);
  Tensor hc = ops::tanh_op(cand.forward(cand_in));
  // h' = (1-z)*h + z*hc
  Tensor one_minus_z = ops::sub(Tensor::full(z.shape(), 1.0), z);
  return ops::add(ops::mul(one_minus_z, h), ops::mul(z, hc));
}

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(ParamRegistry& reg) {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, t_);
  const double bc2 = 1.0 - std::pow(b2_, t_);
  for (auto& [name, t] : const_cast<std::vector<std::pair<std::string, Tensor>>&>(reg.items())) {
    if (!t.requires_grad()) continue;
    TensorData* td = t.ptr().get();
    if (td->grad.empty()) continue;
    State& st = state_[td];
    if (st.m.size() != t.size()) {
      st.m.assign(t.size(), 0.0);
      st.v.assign(t.size(), 0.0);
    }
    double* p = t.data();
    double* g = td->grad.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      st.m[i] = b1_ * st.m[i] + (1.0 - b1_) * g[i];
      st.v[i] = b2_ * st.v[i] + (1.0 - b2_) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      p[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[i]);
      g[i] = 0.0;
    }
  }
}

}  // namespace md::nn
