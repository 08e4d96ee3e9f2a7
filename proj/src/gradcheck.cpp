#include "minidrive/gradcheck.hpp"

#include <cmath>

#include "minidrive/encoder.hpp"
#include "minidrive/fusion.hpp"
#include "minidrive/language.hpp"
#include "minidrive/losses.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/planner.hpp"

namespace md::gradcheck {

CheckResult check(const std::string& name, const std::function<Tensor()>& f,
                  const std::vector<Tensor>& leaves, int samples_per_leaf, Rng& rng, double tol,
                  double h) {
  CheckResult res;
  res.name = name;

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
    for (const Tensor& leaf : leaves) {
      leaf.ptr()->ensure_grad();
      analytic.push_back(leaf.ptr()->grad);
    }
  }
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    const int n = static_cast<int>(leaf.size());
    const int count = std::min(samples_per_leaf, n);
    for (int s = 0; s < count; ++s) {
      const int idx = count == n ? s : static_cast<int>(rng.next_u32(static_cast<std::uint32_t>(n)));
      const double x0 = leaf.data()[idx];
      leaf.data()[idx] = x0 + h;
      const double fp = f().value();
      leaf.data()[idx] = x0 - h;
      const double fm = f().value();
      leaf.data()[idx] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[li][static_cast<std::size_t>(idx)];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.samples;
    }
    leaf.zero_grad();
  }
  res.pass = res.max_rel_err <= tol;
  return res;
}

namespace {

Tensor rand_tensor(std::vector<int> shape, Rng& rng, bool rg = true, double lo = -2.0,
                   double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(shape), rg);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

Tensor prob_grid(std::vector<int> shape, Rng& rng) {
  // Values safely inside (0,1) with rows that need no normalization.
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(0.05, 0.95);
  return t;
}

}  // namespace

std::vector<CheckResult> run_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CheckResult> out;

  {
    Tensor a = rand_tensor({4, 5}, rng), b = rand_tensor({5, 3}, rng);
    out.push_back(check("matmul", [&] { return ops::sum(ops::matmul(a, b)); }, {a, b}, 12, rng));
  }
  {
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    out.push_back(check("add_mul_sub", [&] {
      return ops::sum(ops::mul(ops::add(a, b), ops::sub(a, ops::scale(b, 0.5))));
    }, {a, b}, 12, rng));
  }
  {
    // Keep relu inputs away from the kink.
    Tensor a = rand_tensor({4, 4}, rng);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (std::abs(a.data()[i]) < 0.05) a.data()[i] += 0.2;
    out.push_back(check("relu", [&] { return ops::sum(ops::relu(a)); }, {a}, 12, rng));
  }
  {
    Tensor a = rand_tensor({3, 5}, rng);
    out.push_back(check("sigmoid_tanh", [&] {
      return ops::sum(ops::mul(ops::sigmoid(a), ops::tanh_op(a)));
    }, {a}, 12, rng));
  }
  {
    Tensor a = rand_tensor({4, 6}, rng), w = rand_tensor({6, 1}, rng);
    out.push_back(check("softmax", [&] {
      return ops::sum(ops::matmul(ops::softmax(a, 1), w));
    }, {a}, 12, rng));
  }
  {
    Tensor x = rand_tensor({3, 8}, rng), g = rand_tensor({8}, rng), b = rand_tensor({8}, rng);
    Tensor w = rand_tensor({8, 1}, rng);
    out.push_back(check("layer_norm", [&] {
      return ops::sum(ops::matmul(ops::layer_norm(x, g, b), w));
    }, {x, g, b}, 10, rng));
  }
  {
    Tensor x = rand_tensor({3, 4}, rng), w = rand_tensor({4, 5}, rng), b = rand_tensor({5}, rng);
    out.push_back(check("linear", [&] {
      return ops::mean(ops::relu(ops::linear(x, w, b)));
    }, {x, w, b}, 10, rng));
  }
  {
    Tensor x = rand_tensor({2, 7, 9}, rng);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng);
    Tensor b = rand_tensor({3}, rng);
    out.push_back(check("conv2d", [&] {
      return ops::sum(ops::conv2d(x, w, b, 2, 1));
    }, {x, w, b}, 10, rng));
  }
  {
    Tensor x = rand_tensor({2, 3, 3}, rng);
    Tensor w = rand_tensor({2, 3, 4, 4}, rng);
    Tensor b = rand_tensor({3}, rng);
    out.push_back(check("conv_transpose2d", [&] {
      return ops::sum(ops::conv_transpose2d(x, w, b, 2, 1));
    }, {x, w, b}, 10, rng));
  }
  {
    Tensor f = rand_tensor({3, 5, 6}, rng);
    Tensor p = Tensor::zeros({7, 2}, true);
    for (int i = 0; i < 7; ++i) {
      p.data()[2 * i] = rng.uniform(0.3, 3.7);
      p.data()[2 * i + 1] = rng.uniform(0.3, 4.7);
    }
    out.push_back(check("bilinear_sample", [&] {
      return ops::sum(ops::bilinear_sample(f, p));
    }, {f, p}, 12, rng, 1e-4, 1e-6));
  }
  {
    Tensor table = rand_tensor({6, 4}, rng);
    std::vector<int> ids{0, 2, 2, 5, 1};
    out.push_back(check("embedding_lookup", [&] {
      return ops::sum(ops::embedding_lookup(table, ids));
    }, {table}, 12, rng));
  }
  {
    Tensor a = rand_tensor({2, 3}, rng), b = rand_tensor({4, 3}, rng);
    out.push_back(check("concat_slice", [&] {
      Tensor c = ops::concat({a, b}, 0);
      return ops::sum(ops::mul(ops::slice0(c, 1, 5), ops::slice0(c, 0, 4)));
    }, {a, b}, 10, rng));
  }
  {
    Tensor v = rand_tensor({6, 4}, rng), w = rand_tensor({2, 3}, rng);
    out.push_back(check("weighted_sum_groups", [&] {
      return ops::sum(ops::weighted_sum_groups(v, w));
    }, {v, w}, 10, rng));
  }
  {
    Tensor x = rand_tensor({2, 4, 4}, rng), y = rand_tensor({2, 2, 2}, rng);
    out.push_back(check("avg_pool2d", [&] {
      return ops::sum(ops::mul(ops::avg_pool2d(x, 2), y));
    }, {x}, 10, rng));
  }

  // Loss kernels.
  {
    Tensor pred = prob_grid({3, 4, 4}, rng);
    std::vector<int> target(16);
    for (auto& t : target) t = static_cast<int>(rng.next_u32(3));
    std::vector<double> alpha{1.0, 0.8, 1.2}, gamma{1.0, 2.0, 0.5};
    out.push_back(check("loss_focal_class", [&] {
      return losses::focal_class(pred, target, alpha, gamma);
    }, {pred}, 12, rng));
    out.push_back(check("loss_cross_entropy", [&] {
      return losses::cross_entropy_grid(pred, target);
    }, {pred}, 12, rng));
  }
  {
    Tensor pred = prob_grid({5, 5}, rng);
    Tensor target = Tensor::zeros({5, 5});
    for (std::size_t i = 0; i < target.size(); ++i) target.data()[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    out.push_back(check("loss_binary_focal", [&] {
      return losses::binary_focal(pred, target, 0.75, 2.0);
    }, {pred}, 12, rng));
  }
  {
    Tensor logits = rand_tensor({4, 7}, rng);
    std::vector<int> targets{1, 0, 6, 3};
    out.push_back(check("loss_sequence_nll", [&] {
      return losses::sequence_nll(logits, targets);
    }, {logits}, 12, rng));
  }
  {
    Tensor pred = rand_tensor({5, 2}, rng);
    Tensor gt = rand_tensor({5, 2}, rng, false);
    // keep coordinates away from the |.| kink
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (std::abs(pred.data()[i] - gt.data()[i]) < 0.05) pred.data()[i] += 0.2;
    out.push_back(check("loss_trajectory_l1", [&] {
      return losses::trajectory_l1(pred, gt);
    }, {pred}, 10, rng));
  }

  // A deformable attention block on a non-constant map.
  {
    Rng init = rng.fork(11);
    nn::ParamRegistry reg;
    enc::DeformAttention da(reg, "da", 8, 2, 3, init, true);
    Tensor queries = rand_tensor({5, 8}, rng);
    Tensor fmap = rand_tensor({8, 4, 5}, rng);
    Tensor refs = Tensor::zeros({5, 2});
    for (int i = 0; i < 5; ++i) {
      refs.data()[2 * i] = rng.uniform(0.5, 2.5);
      refs.data()[2 * i + 1] = rng.uniform(0.5, 3.5);
    }
    std::vector<Tensor> leaves{queries, fmap, da.offset_pred.w, da.weight_pred.w,
                               da.value_proj[0].w, da.out_proj.w};
    out.push_back(check("deform_attention", [&] {
      return ops::sum(da.forward(queries, refs, fmap));
    }, leaves, 6, rng, 1e-4, 1e-6));
  }

  // Tiny end-to-end pipeline: encoder -> corridor tokens -> fusion -> L1.
  {
    Rng init = rng.fork(21);
    enc::EncoderConfig ecfg;
    ecfg.image_width = 16;
    ecfg.image_height = 8;
    ecfg.num_frames = 1;
    ecfg.query_rows = 4;
    ecfg.query_cols = 4;
    ecfg.bev_rows = 16;
    ecfg.bev_cols = 16;
    plan::PlannerConfig pcfg;
    pcfg.d = 64;
    fusion::FusionConfig fcfg;
    fcfg.n_queries = 4;
    fcfg.layers = 1;
    fcfg.d_m = 32;

    nn::ParamRegistry reg;
    sim::SensorRig rig = sim::SensorRig::toy_default();
    for (auto& cam : rig.cameras) {
      cam.width = ecfg.image_width;
      cam.height = ecfg.image_height;
    }
    enc::VisionEncoder encoder(reg, "encoder", ecfg, rig, init);
    plan::CorridorTokenizer tokenizer(reg, "planner.tokenizer", pcfg, 32, init);
    lang::Vocabulary vocab = lang::Vocabulary::build_default();
    lang::InstructionEmbedding lang_embed(reg, "lang", vocab.size(), 64, init);
    fusion::FusionModel fus(reg, "fusion", fcfg, init);

    Tensor images = rand_tensor({1, 4, 3, 8, 16}, rng, false, 0.0, 1.0);
    std::vector<Tensor> pseudo{rand_tensor({2, 32, 32}, rng, false, 0.0, 2.0)};
    std::vector<plan::Corridor> corridors;
    for (int p = 0; p < pcfg.top_n; ++p) {
      plan::Corridor c;
      c.policy_id = p;
      c.occupancy = Tensor::zeros({pcfg.horizon, 32, 32});
      for (std::size_t i = 0; i < c.occupancy.size(); ++i)
        c.occupancy.data()[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
      corridors.push_back(std::move(c));
    }
    std::vector<int> ids = lang::tokenize({"turn left at next intersection", 40.0}, vocab);
    Tensor gt_wp = rand_tensor({fcfg.waypoints, 2}, rng, false);

    auto forward = [&] {
      enc::EncoderOutput eo = encoder.forward(images, pseudo);
      Tensor tp = tokenizer.forward(corridors);
      Tensor lt = lang_embed.forward(ids);
      Tensor wp = fus.predict_waypoints(eo.q_s, lt, tp);
      Tensor drive = losses::trajectory_l1(wp, gt_wp);
      // fold in the BEV heads so decoder params see gradient too
      Tensor occ = ops::slice0(eo.b_hat, 10, 11);
      return ops::add(drive, ops::scale(ops::mean(occ), 0.1));
    };

    // 25 randomly chosen parameters across the whole pipeline.
    std::vector<Tensor> leaves;
    const auto& items = reg.items();
    for (int i = 0; i < 25; ++i) {
      const auto& [name, t] = items[rng.next_u32(static_cast<std::uint32_t>(items.size()))];
      leaves.push_back(t);
    }
    out.push_back(check("pipeline_e2e", forward, leaves, 1, rng, 1e-4, 1e-6));
  }

  return out;
}

bool all_pass(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

}  // namespace md::gradcheck
