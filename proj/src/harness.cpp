#include "minidrive/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "minidrive/losses.hpp"

namespace md::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

std::string RunConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["encoder"] = {{"image_width", encoder.image_width},
                  {"image_height", encoder.image_height},
                  {"num_views", encoder.num_views},
                  {"num_frames", encoder.num_frames},
                  {"voxel_rows", encoder.voxel_rows},
                  {"voxel_cols", encoder.voxel_cols},
                  {"d", encoder.d},
                  {"heads", encoder.heads},
                  {"samples", encoder.samples},
                  {"query_rows", encoder.query_rows},
                  {"query_cols", encoder.query_cols},
                  {"bev_rows", encoder.bev_rows},
                  {"bev_cols", encoder.bev_cols},
                  {"lift_height", encoder.lift_height},
                  {"deformable_offsets", encoder.deformable_offsets},
                  {"temporal_embeddings", encoder.temporal_embeddings}};
  j["planner"] = {{"horizon", planner.horizon},
                  {"slice_dt", planner.slice_dt},
                  {"lane_width", planner.lane_width},
                  {"desired_speed", planner.desired_speed},
                  {"max_speed", planner.max_speed},
                  {"top_n", planner.top_n},
                  {"patch", planner.patch},
                  {"d", planner.d},
                  {"w_safety", planner.w_safety},
                  {"w_progress", planner.w_progress},
                  {"w_comfort", planner.w_comfort}};
  j["fusion"] = {{"d", fusion.d},
                 {"heads", fusion.heads},
                 {"n_queries", fusion.n_queries},
                 {"layers", fusion.layers},
                 {"d_m", fusion.d_m},
                 {"waypoints", fusion.waypoints},
                 {"gru_hidden", fusion.gru_hidden}};
  j["sim"] = {{"dt", sim.dt},
              {"wheelbase", sim.wheelbase},
              {"a_max", sim.a_max},
              {"b_max", sim.b_max},
              {"steer_limit", sim.steer_limit},
              {"steer_rate", sim.steer_rate},
              {"deviation_threshold", sim.deviation_threshold}};
  j["sample_hz"] = sample_hz;
  j["stage1"] = {{"lr", stage1.lr}, {"epochs", stage1.epochs}, {"batch", stage1.batch}};
  j["stage2"] = {{"lr", stage2.lr}, {"epochs", stage2.epochs}, {"batch", stage2.batch}};
  j["stage4"] = {{"lr", stage4.lr}, {"epochs", stage4.epochs}, {"batch", stage4.batch}};
  j["weight_decay"] = weight_decay;
  j["warmup_frac"] = warmup_frac;
  j["val_stride"] = val_stride;
  j["eval_routes"] = eval_routes;
  j["eval_reps"] = eval_reps;
  j["ablate_routes"] = ablate_routes;
  j["planner_from_bev"] = planner_from_bev;
  j["unfreeze_encoder"] = unfreeze_encoder;
  nlohmann::json pt;
  for (const auto& [kind, delta] : penalties.delta) pt[sim::infraction_name(kind)] = delta;
  j["penalties"] = {{"is0", penalties.is0}, {"delta", pt}};
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  RunConfig c;
  c.seed = j.value("seed", 42ULL);
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    c.encoder.image_width = e.value("image_width", c.encoder.image_width);
    c.encoder.image_height = e.value("image_height", c.encoder.image_height);
    c.encoder.num_views = e.value("num_views", c.encoder.num_views);
    c.encoder.num_frames = e.value("num_frames", c.encoder.num_frames);
    c.encoder.voxel_rows = e.value("voxel_rows", c.encoder.voxel_rows);
    c.encoder.voxel_cols = e.value("voxel_cols", c.encoder.voxel_cols);
    c.encoder.d = e.value("d", c.encoder.d);
    c.encoder.heads = e.value("heads", c.encoder.heads);
    c.encoder.samples = e.value("samples", c.encoder.samples);
    c.encoder.query_rows = e.value("query_rows", c.encoder.query_rows);
    c.encoder.query_cols = e.value("query_cols", c.encoder.query_cols);
    c.encoder.bev_rows = e.value("bev_rows", c.encoder.bev_rows);
    c.encoder.bev_cols = e.value("bev_cols", c.encoder.bev_cols);
    c.encoder.lift_height = e.value("lift_height", c.encoder.lift_height);
    c.encoder.deformable_offsets = e.value("deformable_offsets", true);
    c.encoder.temporal_embeddings = e.value("temporal_embeddings", true);
  }
  if (j.contains("planner")) {
    const auto& p = j["planner"];
    c.planner.horizon = p.value("horizon", c.planner.horizon);
    c.planner.slice_dt = p.value("slice_dt", c.planner.slice_dt);
    c.planner.lane_width = p.value("lane_width", c.planner.lane_width);
    c.planner.desired_speed = p.value("desired_speed", c.planner.desired_speed);
    c.planner.max_speed = p.value("max_speed", c.planner.max_speed);
    c.planner.top_n = p.value("top_n", c.planner.top_n);
    c.planner.patch = p.value("patch", c.planner.patch);
    c.planner.d = p.value("d", c.planner.d);
    c.planner.w_safety = p.value("w_safety", c.planner.w_safety);
    c.planner.w_progress = p.value("w_progress", c.planner.w_progress);
    c.planner.w_comfort = p.value("w_comfort", c.planner.w_comfort);
  }
  if (j.contains("fusion")) {
    const auto& f = j["fusion"];
    c.fusion.d = f.value("d", c.fusion.d);
    c.fusion.heads = f.value("heads", c.fusion.heads);
    c.fusion.n_queries = f.value("n_queries", c.fusion.n_queries);
    c.fusion.layers = f.value("layers", c.fusion.layers);
    c.fusion.d_m = f.value("d_m", c.fusion.d_m);
    c.fusion.waypoints = f.value("waypoints", c.fusion.waypoints);
    c.fusion.gru_hidden = f.value("gru_hidden", c.fusion.gru_hidden);
  }
  if (j.contains("sim")) {
    const auto& s = j["sim"];
    c.sim.dt = s.value("dt", c.sim.dt);
    c.sim.wheelbase = s.value("wheelbase", c.sim.wheelbase);
    c.sim.a_max = s.value("a_max", c.sim.a_max);
    c.sim.b_max = s.value("b_max", c.sim.b_max);
    c.sim.steer_limit = s.value("steer_limit", c.sim.steer_limit);
    c.sim.steer_rate = s.value("steer_rate", c.sim.steer_rate);
    c.sim.deviation_threshold = s.value("deviation_threshold", c.sim.deviation_threshold);
  }
  c.sample_hz = j.value("sample_hz", c.sample_hz);
  auto stage = [&](const char* key, StageConfig& sc) {
    if (!j.contains(key)) return;
    sc.lr = j[key].value("lr", sc.lr);
    sc.epochs = j[key].value("epochs", sc.epochs);
    sc.batch = j[key].value("batch", sc.batch);
  };
  stage("stage1", c.stage1);
  stage("stage2", c.stage2);
  stage("stage4", c.stage4);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  c.val_stride = j.value("val_stride", c.val_stride);
  c.eval_routes = j.value("eval_routes", c.eval_routes);
  c.eval_reps = j.value("eval_reps", c.eval_reps);
  c.ablate_routes = j.value("ablate_routes", c.ablate_routes);
  c.planner_from_bev = j.value("planner_from_bev", false);
  c.unfreeze_encoder = j.value("unfreeze_encoder", false);
  if (j.contains("penalties")) {
    c.penalties.is0 = j["penalties"].value("is0", 1.0);
    if (j["penalties"].contains("delta"))
      for (auto it = j["penalties"]["delta"].begin(); it != j["penalties"]["delta"].end(); ++it)
        c.penalties.delta[sim::infraction_from_name(it.key())] = it.value().get<double>();
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

void RunConfig::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw ContractError("config: cannot open " + path);
  os << to_json() << "\n";
}

std::uint64_t RunConfig::hash() const {
  const std::string s = to_json();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------- model

Model::Model(const RunConfig& cfg, const sim::SensorRig& rig) {
  Rng root(cfg.seed);
  vocab = lang::Vocabulary::build_default();
  Rng r_lang = root.fork(1);
  lang_embed = lang::InstructionEmbedding(reg, "lang", vocab.size(), cfg.encoder.d, r_lang);
  Rng r_enc = root.fork(2);
  encoder = enc::VisionEncoder(reg, "encoder", cfg.encoder, sim::SensorRig::toy_default(), r_enc);
  Rng r_plan = root.fork(3);
  tokenizer = plan::CorridorTokenizer(reg, "planner.tokenizer", cfg.planner, 32, r_plan);
  Rng r_head = root.fork(4);
  policy_head = plan::PolicyHead(reg, "planner.head", cfg.planner, 32, r_head);
  Rng r_fus = root.fork(5);
  fusion = fusion::FusionModel(reg, "fusion", cfg.fusion, r_fus);
  (void)rig;
}

// ---------------------------------------------------------------- training

namespace {

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
    std::swap(idx[static_cast<std::size_t>(i)], idx[rng.next_u32(static_cast<std::uint32_t>(i + 1))]);
}

Tensor gt_channels(const Sample& s) {
  // One-hot semantic classes, one-hot road classes, occupancy: [11,64,64].
  const int rows = s.bev_semantic.dim(1), cols = s.bev_semantic.dim(2);
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  Tensor gt = Tensor::zeros({11, rows, cols});
  const std::vector<int> sem = semantic_target_classes(s.bev_semantic);
  for (std::size_t i = 0; i < plane; ++i) gt.data()[static_cast<std::size_t>(sem[i]) * plane + i] = 1.0;
  const std::vector<int> road = road_target_classes(s.bev_road_drivable, s.bev_road_boundary);
  for (std::size_t i = 0; i < plane; ++i) gt.data()[(7 + static_cast<std::size_t>(road[i])) * plane + i] = 1.0;
  std::memcpy(gt.data() + 10 * plane, s.bev_occupancy.data(), sizeof(double) * plane);
  return gt;
}

std::vector<plan::Corridor> corridors_of(const Sample& s, const plan::PlannerConfig& pcfg) {
  std::vector<plan::Corridor> out;
  const int rows = s.corridors.dim(2), cols = s.corridors.dim(3);
  const std::size_t block = static_cast<std::size_t>(pcfg.horizon) * rows * cols;
  for (int p = 0; p < pcfg.top_n; ++p) {
    plan::Corridor c;
    c.policy_id = s.corridor_policy_ids[static_cast<std::size_t>(p)];
    c.occupancy = Tensor::zeros({pcfg.horizon, rows, cols});
    std::memcpy(c.occupancy.data(), s.corridors.data() + static_cast<std::size_t>(p) * block,
                sizeof(double) * block);
    out.push_back(std::move(c));
  }
  return out;
}

struct Stage1Losses {
  std::vector<double> alpha;
  std::vector<double> gamma;
};

Stage1Losses stage1_loss_params(const Dataset& data, const std::vector<int>& train_idx) {
  // Inverse-frequency alpha; gamma 2 for the hard classes, 1 otherwise.
  std::vector<double> counts(7, 0.0);
  double total = 0.0;
  for (int i : train_idx) {
    const std::vector<int> t = semantic_target_classes(data.samples[static_cast<std::size_t>(i)].bev_semantic);
    for (int c : t) counts[static_cast<std::size_t>(c)] += 1.0;
    total += static_cast<double>(t.size());
  }
  Stage1Losses out;
  out.alpha.resize(7);
  double sum = 0.0;
  for (int c = 0; c < 7; ++c) {
    const double freq = counts[static_cast<std::size_t>(c)] / total;
    out.alpha[static_cast<std::size_t>(c)] = std::min(1.0 / (freq + 1e-3), 20.0);
    sum += out.alpha[static_cast<std::size_t>(c)];
  }
  for (double& a : out.alpha) a *= 7.0 / sum;
  out.gamma = {1.0, 2.0, 1.0, 1.0, 2.0, 1.0, 1.0};  // pedestrian, lane marking hard
  return out;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw ContractError(std::string("training: non-finite ") + what);
}

}  // namespace

StageReport stage1_pretrain_bev(Model& model, const Dataset& data, const RunConfig& cfg,
                                const std::string& out_dir) {
  fs::create_directories(out_dir);
  StageReport rep;
  std::vector<int> train_idx = data.train_indices(cfg.val_stride);
  const std::vector<int> val_idx = data.val_indices(cfg.val_stride);
  const Stage1Losses lp = stage1_loss_params(data, train_idx);

  model.reg.set_trainable("", false);
  model.reg.set_trainable("encoder", true);
  rep.frozen_hash_before = model.reg.content_hash("fusion");

  nn::AdamW opt(cfg.stage1.lr, cfg.weight_decay);
  Rng shuffler(cfg.seed ^ 0x51a9e1ULL);
  const int batches_per_epoch =
      (static_cast<int>(train_idx.size()) + cfg.stage1.batch - 1) / cfg.stage1.batch;
  const int total_steps = std::max(1, cfg.stage1.epochs * batches_per_epoch);
  int step = 0;

  auto sample_loss = [&](const Sample& s) {
    enc::EncoderOutput out = model.encoder.forward(s.images, s.pseudo);
    Tensor sem = ops::slice0(out.b_hat, 0, 7);
    Tensor road = ops::slice0(out.b_hat, 7, 10);
    Tensor occ = ops::reshape(ops::slice0(out.b_hat, 10, 11), {64, 64});
    Tensor l_cls = losses::focal_class(sem, semantic_target_classes(s.bev_semantic), lp.alpha, lp.gamma);
    Tensor l_road = losses::cross_entropy_grid(road, road_target_classes(s.bev_road_drivable, s.bev_road_boundary));
    Tensor l_occ = losses::binary_focal(occ, s.bev_occupancy, 0.75, 2.0);
    return ops::add(ops::add(l_cls, l_road), l_occ);
  };

  for (int epoch = 0; epoch < cfg.stage1.epochs; ++epoch) {
    shuffle_indices(train_idx, shuffler);
    double epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int b0 = b * cfg.stage1.batch;
      const int b1 = std::min<int>(b0 + cfg.stage1.batch, static_cast<int>(train_idx.size()));
      for (int i = b0; i < b1; ++i) {
        Tape tape;
        Tensor loss = ops::scale(sample_loss(data.samples[static_cast<std::size_t>(train_idx[static_cast<std::size_t>(i)])]),
                                 1.0 / (b1 - b0));
        check_finite(loss.value(), "stage1 loss");
        tape.backward(loss);
        epoch_loss += loss.value() * (b1 - b0);
      }
      opt.set_lr(cfg.stage1.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * step / total_steps)));
      opt.step(model.reg);
      ++step;
    }
    epoch_loss /= static_cast<double>(train_idx.size());

    double val_loss = 0.0, val_mprec = 0.0;
    for (int i : val_idx) {
      const Sample& s = data.samples[static_cast<std::size_t>(i)];
      enc::EncoderOutput out = model.encoder.forward(s.images, s.pseudo);
      Tensor sem = ops::slice0(out.b_hat, 0, 7);
      Tensor road = ops::slice0(out.b_hat, 7, 10);
      Tensor occ = ops::reshape(ops::slice0(out.b_hat, 10, 11), {64, 64});
      val_loss += losses::focal_class(sem, semantic_target_classes(s.bev_semantic), lp.alpha, lp.gamma).value() +
                  losses::cross_entropy_grid(road, road_target_classes(s.bev_road_drivable, s.bev_road_boundary)).value() +
                  losses::binary_focal(occ, s.bev_occupancy, 0.75, 2.0).value();
      val_mprec += metrics::m_prec(out.b_hat, gt_channels(s), 0.5);
    }
    val_loss /= static_cast<double>(val_idx.size());
    val_mprec /= static_cast<double>(val_idx.size());
    rep.train_loss.push_back(epoch_loss);
    rep.val_loss.push_back(val_loss);
    rep.val_metric.push_back(val_mprec);
    std::printf("[stage1] epoch %2d train %.4f val %.4f m_prec %.4f\n", epoch, epoch_loss, val_loss,
                val_mprec);
    std::fflush(stdout);
  }
  rep.frozen_hash_after = model.reg.content_hash("fusion");
  rep.checkpoint_path = out_dir + "/stage1.ckpt";
  nn::save_checkpoint(model.reg, rep.checkpoint_path);
  return rep;
}

StageReport stage2_train_planner(Model& model, const Dataset& data, const RunConfig& cfg,
                                 const std::string& out_dir) {
  fs::create_directories(out_dir);
  StageReport rep;
  std::vector<int> train_idx = data.train_indices(cfg.val_stride);
  const std::vector<int> val_idx = data.val_indices(cfg.val_stride);

  model.reg.set_trainable("", false);
  model.reg.set_trainable("planner", true);
  rep.frozen_hash_before = model.reg.content_hash("encoder");

  nn::AdamW opt(cfg.stage2.lr, cfg.weight_decay);
  Rng shuffler(cfg.seed ^ 0x52a9e2ULL);
  const int batches_per_epoch =
      (static_cast<int>(train_idx.size()) + cfg.stage2.batch - 1) / cfg.stage2.batch;
  const int total_steps = std::max(1, cfg.stage2.epochs * batches_per_epoch);
  int step = 0;

  auto nll_of = [&](const Sample& s) {
    Tensor tokens = model.tokenizer.forward(corridors_of(s, cfg.planner));
    return model.policy_head.nll(scene_of(s), s.ego_speed, tokens, s.expert_policy);
  };
  auto correct = [&](const Sample& s) {
    Tensor logits = model.policy_head.logits(scene_of(s), s.ego_speed,
                                             model.tokenizer.forward(corridors_of(s, cfg.planner)));
    int best = 0;
    for (int i = 1; i < 9; ++i)
      if (logits.at({0, i}) > logits.at({0, best})) best = i;
    return best == s.expert_policy;
  };

  for (int epoch = 0; epoch < cfg.stage2.epochs; ++epoch) {
    shuffle_indices(train_idx, shuffler);
    double epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int b0 = b * cfg.stage2.batch;
      const int b1 = std::min<int>(b0 + cfg.stage2.batch, static_cast<int>(train_idx.size()));
      for (int i = b0; i < b1; ++i) {
        Tape tape;
        Tensor loss = ops::scale(nll_of(data.samples[static_cast<std::size_t>(train_idx[static_cast<std::size_t>(i)])]),
                                 1.0 / (b1 - b0));
        check_finite(loss.value(), "stage2 loss");
        tape.backward(loss);
        epoch_loss += loss.value() * (b1 - b0);
      }
      opt.set_lr(cfg.stage2.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * step / total_steps)));
      opt.step(model.reg);
      ++step;
    }
    epoch_loss /= static_cast<double>(train_idx.size());

    double val_loss = 0.0;
    int hits = 0;
    for (int i : val_idx) {
      const Sample& s = data.samples[static_cast<std::size_t>(i)];
      val_loss += nll_of(s).value();
      hits += correct(s) ? 1 : 0;
    }
    val_loss /= static_cast<double>(val_idx.size());
    const double acc = static_cast<double>(hits) / static_cast<double>(val_idx.size());
    rep.train_loss.push_back(epoch_loss);
    rep.val_loss.push_back(val_loss);
    rep.val_metric.push_back(acc);
    std::printf("[stage2] epoch %2d train %.4f val %.4f acc %.3f\n", epoch, epoch_loss, val_loss, acc);
    std::fflush(stdout);
  }
  rep.frozen_hash_after = model.reg.content_hash("encoder");
  rep.checkpoint_path = out_dir + "/stage2.ckpt";
  nn::save_checkpoint(model.reg, rep.checkpoint_path);
  return rep;
}

StageReport stage4_train_e2e(Model& model, const Dataset& data, const RunConfig& cfg,
                             const std::string& out_dir) {
  fs::create_directories(out_dir);
  StageReport rep;
  std::vector<int> train_idx = data.train_indices(cfg.val_stride);
  const std::vector<int> val_idx = data.val_indices(cfg.val_stride);

  model.reg.set_trainable("", false);
  model.reg.set_trainable("fusion", true);
  model.reg.set_trainable("lang", true);
  if (cfg.unfreeze_encoder) model.reg.set_trainable("encoder", true);
  rep.frozen_hash_before =
      model.reg.content_hash("encoder") ^ (model.reg.content_hash("planner") << 1);

  // Frozen encoder and tokenizer features are computed once.
  std::vector<Tensor> qs_cache(data.samples.size()), tp_cache(data.samples.size());
  if (!cfg.unfreeze_encoder) {
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
      const Sample& s = data.samples[i];
      qs_cache[i] = model.encoder.forward(s.images, s.pseudo).q_s;
      tp_cache[i] = model.tokenizer.forward(corridors_of(s, cfg.planner));
    }
  }

  nn::AdamW opt(cfg.stage4.lr, cfg.weight_decay);
  Rng shuffler(cfg.seed ^ 0x54a9e4ULL);
  const int batches_per_epoch =
      (static_cast<int>(train_idx.size()) + cfg.stage4.batch - 1) / cfg.stage4.batch;
  const int total_steps = std::max(1, cfg.stage4.epochs * batches_per_epoch);
  const int warmup = std::max(1, static_cast<int>(total_steps * cfg.warmup_frac));
  int step = 0;

  auto drive_loss = [&](int idx) {
    const Sample& s = data.samples[static_cast<std::size_t>(idx)];
    Tensor q_s = cfg.unfreeze_encoder ? model.encoder.forward(s.images, s.pseudo).q_s
                                      : qs_cache[static_cast<std::size_t>(idx)];
    Tensor tp = cfg.unfreeze_encoder ? model.tokenizer.forward(corridors_of(s, cfg.planner))
                                     : tp_cache[static_cast<std::size_t>(idx)];
    Tensor lt = model.lang_embed.forward(s.instruction_ids);
    Tensor wp = model.fusion.predict_waypoints(q_s, lt, tp);
    return losses::trajectory_l1(wp, s.expert_waypoints);
  };

  for (int epoch = 0; epoch < cfg.stage4.epochs; ++epoch) {
    shuffle_indices(train_idx, shuffler);
    double epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int b0 = b * cfg.stage4.batch;
      const int b1 = std::min<int>(b0 + cfg.stage4.batch, static_cast<int>(train_idx.size()));
      for (int i = b0; i < b1; ++i) {
        Tape tape;
        Tensor loss = ops::scale(drive_loss(train_idx[static_cast<std::size_t>(i)]), 1.0 / (b1 - b0));
        check_finite(loss.value(), "stage4 loss");
        tape.backward(loss);
        epoch_loss += loss.value() * (b1 - b0);
      }
      // Linear warmup over the first warmup steps, then linear decay.
      double lr = cfg.stage4.lr;
      if (step < warmup) lr *= static_cast<double>(step + 1) / warmup;
      else lr *= 1.0 - static_cast<double>(step - warmup) / std::max(1, total_steps - warmup);
      opt.set_lr(std::max(lr, 1e-7));
      opt.step(model.reg);
      ++step;
    }
    epoch_loss /= static_cast<double>(train_idx.size());

    double val_l1 = 0.0;
    for (int i : val_idx) val_l1 += drive_loss(i).value();
    val_l1 /= static_cast<double>(val_idx.size());
    rep.train_loss.push_back(epoch_loss);
    rep.val_loss.push_back(val_l1);
    rep.val_metric.push_back(val_l1);
    std::printf("[stage4] epoch %2d train %.4f val_l1 %.4f\n", epoch, epoch_loss, val_l1);
    std::fflush(stdout);
  }
  rep.frozen_hash_after =
      model.reg.content_hash("encoder") ^ (model.reg.content_hash("planner") << 1);
  rep.checkpoint_path = out_dir + "/stage4.ckpt";
  nn::save_checkpoint(model.reg, rep.checkpoint_path);
  return rep;
}

}  // namespace md::harness
