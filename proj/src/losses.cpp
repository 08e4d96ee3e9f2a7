#include "minidrive/losses.hpp"

#include <cmath>

namespace md::losses {

namespace {
long g_clamp_events = 0;

double clamp_log_arg(double p) {
  if (p < kLogClamp) {
    ++g_clamp_events;
    return kLogClamp;
  }
  return p;
}

void check_grid(const Tensor& pred, std::size_t target_cells, const char* op) {
  if (pred.rank() != 3) throw DimensionError(std::string(op) + ": pred [C,H,W] expected");
  const std::size_t cells = static_cast<std::size_t>(pred.dim(1)) * pred.dim(2);
  if (cells != target_cells) throw DimensionError(std::string(op) + ": target cell count mismatch");
}
}  // namespace

long clamp_events() { return g_clamp_events; }

Tensor focal_class(const Tensor& pred, const std::vector<int>& target_class,
                   const std::vector<double>& alpha, const std::vector<double>& gamma) {
  check_grid(pred, target_class.size(), "focal_class");
  const int c = pred.dim(0);
  const std::size_t cells = target_class.size();
  if (static_cast<int>(alpha.size()) != c || static_cast<int>(gamma.size()) != c)
    throw DimensionError("focal_class: alpha/gamma size must equal C");
  for (int t : target_class)
    if (t < 0 || t >= c) throw ClassificationError("focal_class: target class out of range");

  double acc = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    const int tc = target_class[i];
    const double p = clamp_log_arg(pred.data()[static_cast<std::size_t>(tc) * cells + i]);
    acc += -alpha[tc] * std::pow(1.0 - p, gamma[tc]) * std::log(p);
  }
  const double inv_n = 1.0 / static_cast<double>(cells);
  bool rg = detail::grad_wanted({&pred});
  Tensor out = detail::make_out({1}, rg);
  out.data()[0] = acc * inv_n;
  if (rg) {
    auto pp = pred.ptr();
    auto po = out.ptr();
    auto tgt = std::make_shared<std::vector<int>>(target_class);
    auto al = std::make_shared<std::vector<double>>(alpha);
    auto ga = std::make_shared<std::vector<double>>(gamma);
    Tape::active()->record([pp, po, tgt, al, ga, cells, inv_n] {
      if (po->grad.empty()) return;
      if (!pp->requires_grad) return;
      pp->ensure_grad();
      const double g = po->grad[0] * inv_n;
      for (std::size_t i = 0; i < cells; ++i) {
        const int tc = (*tgt)[i];
        const std::size_t idx = static_cast<std::size_t>(tc) * cells + i;
        const double p = pp->data[idx];
        if (p < kLogClamp) continue;  // clamped region: zero slope
        const double q = 1.0 - p;
        const double gm = (*ga)[tc];
        // d/dp of -a (1-p)^g log p
        double d = -(*al)[tc] * (std::pow(q, gm) / p - (gm > 0.0 ? gm * std::pow(q, gm - 1.0) * std::log(p) : 0.0));
        pp->grad[idx] += g * d;
      }
    });
  }
  return out;
}

Tensor cross_entropy_grid(const Tensor& pred, const std::vector<int>& target_class) {
  check_grid(pred, target_class.size(), "cross_entropy_grid");
  const int c = pred.dim(0);
  const std::size_t cells = target_class.size();
  for (int t : target_class)
    if (t < 0 || t >= c) throw ClassificationError("cross_entropy_grid: target out of range");

  double acc = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    const double p = clamp_log_arg(pred.data()[static_cast<std::size_t>(target_class[i]) * cells + i]);
    acc -= std::log(p);
  }
  const double inv_n = 1.0 / static_cast<double>(cells);
  bool rg = detail::grad_wanted({&pred});
  Tensor out = detail::make_out({1}, rg);
  out.data()[0] = acc * inv_n;
  if (rg) {
    auto pp = pred.ptr();
    auto po = out.ptr();
    auto tgt = std::make_shared<std::vector<int>>(target_class);
    Tape::active()->record([pp, po, tgt, cells, inv_n] {
      if (po->grad.empty()) return;
      if (!pp->requires_grad) return;
      pp->ensure_grad();
      const double g = po->grad[0] * inv_n;
      for (std::size_t i = 0; i < cells; ++i) {
        const std::size_t idx = static_cast<std::size_t>((*tgt)[i]) * cells + i;
        const double p = pp->data[idx];
        if (p < kLogClamp) continue;
        pp->grad[idx] += g * (-1.0 / p);
      }
    });
  }
  return out;
}

Tensor binary_focal(const Tensor& pred, const Tensor& target, double alpha_t, double gamma) {
  if (pred.shape() != target.shape()) throw DimensionError("binary_focal: shape mismatch");
  const std::size_t n = pred.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool fg = target.data()[i] >= 0.5;
    const double pt = clamp_log_arg(fg ? pred.data()[i] : 1.0 - pred.data()[i]);
    acc += -alpha_t * std::pow(1.0 - pt, gamma) * std::log(pt);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  bool rg = detail::grad_wanted({&pred});
  Tensor out = detail::make_out({1}, rg);
  out.data()[0] = acc * inv_n;
  if (rg) {
    auto pp = pred.ptr();
    auto pt_ = target.ptr();
    auto po = out.ptr();
    Tape::active()->record([pp, pt_, po, n, alpha_t, gamma, inv_n] {
      if (po->grad.empty()) return;
      if (!pp->requires_grad) return;
      pp->ensure_grad();
      const double g = po->grad[0] * inv_n;
      for (std::size_t i = 0; i < n; ++i) {
        const bool fg = pt_->data[i] >= 0.5;
        const double pt = fg ? pp->data[i] : 1.0 - pp->data[i];
        if (pt < kLogClamp) continue;
        const double q = 1.0 - pt;
        double d = -alpha_t * (std::pow(q, gamma) / pt - (gamma > 0.0 ? gamma * std::pow(q, gamma - 1.0) * std::log(pt) : 0.0));
        pp->grad[i] += g * (fg ? d : -d);
      }
    });
  }
  return out;
}

Tensor sequence_nll(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw DimensionError("sequence_nll: logits [T,V] expected");
  const int t = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != t) throw DimensionError("sequence_nll: target length mismatch");
  for (int y : targets)
    if (y < 0 || y >= v) throw VocabularyError("sequence_nll: target id out of range");

  double acc = 0.0;
  std::vector<double> softmax_cache(logits.size());
  for (int r = 0; r < t; ++r) {
    const double* row = logits.data() + static_cast<std::size_t>(r) * v;
    double mx = row[0];
    for (int i = 1; i < v; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < v; ++i) z += std::exp(row[i] - mx);
    for (int i = 0; i < v; ++i) softmax_cache[static_cast<std::size_t>(r) * v + i] = std::exp(row[i] - mx) / z;
    acc += std::log(z) + mx - row[targets[static_cast<std::size_t>(r)]];
  }
  const double inv_t = 1.0 / static_cast<double>(t);
  bool rg = detail::grad_wanted({&logits});
  Tensor out = detail::make_out({1}, rg);
  out.data()[0] = acc * inv_t;
  if (rg) {
    auto pl = logits.ptr();
    auto po = out.ptr();
    auto tg = std::make_shared<std::vector<int>>(targets);
    auto sm = std::make_shared<std::vector<double>>(std::move(softmax_cache));
    Tape::active()->record([pl, po, tg, sm, t, v, inv_t] {
      if (po->grad.empty()) return;
      if (!pl->requires_grad) return;
      pl->ensure_grad();
      const double g = po->grad[0] * inv_t;
      for (int r = 0; r < t; ++r)
        for (int i = 0; i < v; ++i) {
          const std::size_t idx = static_cast<std::size_t>(r) * v + i;
          pl->grad[idx] += g * ((*sm)[idx] - (i == (*tg)[static_cast<std::size_t>(r)] ? 1.0 : 0.0));
        }
    });
  }
  return out;
}

Tensor trajectory_l1(const Tensor& pred, const Tensor& ground_truth) {
  if (pred.rank() != 2 || pred.dim(1) != 2) throw DimensionError("trajectory_l1: pred [K,2] expected");
  if (pred.shape() != ground_truth.shape())
    throw DimensionError("trajectory_l1: waypoint count mismatch");
  const int k = pred.dim(0);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred.data()[i] - ground_truth.data()[i]);
  const double inv_k = 1.0 / static_cast<double>(k);
  bool rg = detail::grad_wanted({&pred});
  Tensor out = detail::make_out({1}, rg);
  out.data()[0] = acc * inv_k;
  if (rg) {
    auto pp = pred.ptr();
    auto pg = ground_truth.ptr();
    auto po = out.ptr();
    Tape::active()->record([pp, pg, po, inv_k] {
      if (po->grad.empty()) return;
      if (!pp->requires_grad) return;
      pp->ensure_grad();
      const double g = po->grad[0] * inv_k;
      for (std::size_t i = 0; i < pp->data.size(); ++i) {
        const double d = pp->data[i] - pg->data[i];
        pp->grad[i] += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
      }
    });
  }
  return out;
}

}  // namespace md::losses
