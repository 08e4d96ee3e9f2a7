#pragma once
// Layers over the tensor ops, a parameter registry, AdamW, and the
// checkpoint format (concatenated tensor blobs + JSON manifest).

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "minidrive/rng.hpp"
#include "minidrive/tensor.hpp"

namespace md::nn {

// Ordered name -> tensor map. Registration order is the serialization order.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  Tensor find(const std::string& name) const;
  // requires_grad toggle for every param whose name starts with prefix.
  void set_trainable(const std::string& prefix, bool trainable);
  void zero_grads();
  // FNV-1a over raw bytes of every param whose name starts with prefix.
  std::uint64_t content_hash(const std::string& prefix = "") const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

void save_checkpoint(const ParamRegistry& reg, const std::string& path);
// Loads by name; every registered param must be present with matching shape.
void load_checkpoint(ParamRegistry& reg, const std::string& path);

// uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases, normal(0, 0.02)
// embeddings.
Tensor xavier(std::vector<int> shape, int fan_in, int fan_out, Rng& rng);
Tensor embed_init(std::vector<int> shape, Rng& rng);

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const { return ops::linear(x, w, b); }
};

struct Conv2d {
  Tensor w, b;
  int stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(ParamRegistry& reg, const std::string& name, int c_in, int c_out, int k, int stride,
         int pad, Rng& rng);
  Tensor forward(const Tensor& x) const { return ops::conv2d(x, w, b, stride, pad); }
};

struct ConvTranspose2d {
  Tensor w, b;
  int stride = 1, pad = 0;
  ConvTranspose2d() = default;
  ConvTranspose2d(ParamRegistry& reg, const std::string& name, int c_in, int c_out, int k,
                  int stride, int pad, Rng& rng);
  Tensor forward(const Tensor& x) const { return ops::conv_transpose2d(x, w, b, stride, pad); }
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& name, int d);
  Tensor forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }
};

// Multi-head attention: queries from `a`, keys/values from `b`.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 1, d = 0;
  // Softmax rows of the last forward, one tensor per head.
  mutable std::vector<Tensor> last_attn;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamRegistry& reg, const std::string& name, int d, int heads, Rng& rng);
  Tensor forward(const Tensor& a, const Tensor& b) const;
};

// Pre-norm residual block: x + MHA(LN(x)) and optionally + FFN(LN(x)).
struct TransformerLayer {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Linear ff1, ff2;
  bool with_ffn = true;

  TransformerLayer() = default;
  TransformerLayer(ParamRegistry& reg, const std::string& name, int d, int heads, Rng& rng,
                   bool with_ffn = true);
  Tensor forward(const Tensor& x) const;
};

struct GruCell {
  Linear gates;  // [h,x] -> 2*dh (update, reset)
  Linear cand;   // [r*h, x] -> dh
  int dh = 0;
  GruCell() = default;
  GruCell(ParamRegistry& reg, const std::string& name, int dx, int dh, Rng& rng);
  Tensor forward(const Tensor& h, const Tensor& x) const;
};

class AdamW {
 public:
  explicit AdamW(double lr, double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  // Applies grads of every trainable param in the registry, then zeroes them.
  void step(ParamRegistry& reg);

 private:
  struct State { std::vector<double> m, v; };
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
  std::unordered_map<TensorData*, State> state_;
};

}  // namespace md::nn
