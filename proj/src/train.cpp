#include "westar/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "westar/error.hpp"
#include "westar/seed.hpp"

namespace westar {

NormMode parse_norm_mode(const std::string& name) {
  if (name == "global") return NormMode::Global;
  if (name == "hdn") return NormMode::Hdn;
  if (name == "sa_hdn") return NormMode::SaHdn;
  throw Error(ErrorKind::Config, "unknown norm_mode '" + name + "' (global, hdn, sa_hdn)");
}

std::string to_string(NormMode mode) {
  switch (mode) {
    case NormMode::Global: return "global";
    case NormMode::Hdn: return "hdn";
    case NormMode::SaHdn: return "sa_hdn";
  }
  return "unknown";
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

CropRect random_crop(std::size_t side, std::size_t H, std::size_t W, std::mt19937_64& rng) {
  if (side == 0) return {};
  if (side > H || side > W) throw Error(ErrorKind::Config, "crop larger than the image");
  const auto y = std::uniform_int_distribution<std::size_t>(0, H - side)(rng);
  const auto x = std::uniform_int_distribution<std::size_t>(0, W - side)(rng);
  return {y, x, side, side};
}

}  // namespace

// -------------------------------------------------------------- optimizer

void adamw_step(StudentNet& net, const std::map<std::string, Tensor>& grads, OptimizerState& state,
                const AdamWParams& p) {
  std::map<std::string, Tensor*> by_name;
  for (auto& ref : parameters(net)) by_name[ref.name] = ref.tensor;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(p.beta1, t), c2 = 1.0 - std::pow(p.beta2, t);
  for (const auto& [name, g] : grads) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error(ErrorKind::Config, "no parameter named " + name);
    Tensor& param = *it->second;
    if (g.shape() != param.shape()) {
      throw Error(ErrorKind::Shape, "gradient for " + name + " has shape " + shape_string(g.shape()) +
                                        ", parameter is " + shape_string(param.shape()));
    }
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(param.numel(), 0.0);
      v.assign(param.numel(), 0.0);
    }
    std::vector<double> w = param.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = p.beta1 * m[i] + (1 - p.beta1) * g[i];
      v[i] = p.beta2 * v[i] + (1 - p.beta2) * g[i] * g[i];
      w[i] *= 1.0 - p.lr * p.weight_decay;
      w[i] -= p.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + p.eps);
    }
    param = Tensor(param.shape(), std::move(w));
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t batch_size) {
  if (total_steps == 0 || step > total_steps) {
    throw Error(ErrorKind::Domain, "schedule step " + std::to_string(step) + " outside [0, " +
                                       std::to_string(total_steps) + "]");
  }
  const double lr0 = base_lr * static_cast<double>(batch_size) / 256.0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

// ------------------------------------------------------------- adaptation

std::size_t batches_per_epoch(std::size_t n, std::size_t bs) {
  if (bs == 0) throw Error(ErrorKind::Config, "batch_size must be positive");
  return (n + bs - 1) / bs;
}

ContextHierarchy build_contexts(NormMode mode, const Tensor& reference_pred, const InstanceMaskSet& masks,
                                const ValidMask& valid, const AdaptConfig& cfg) {
  const std::size_t H = reference_pred.shape()[0], W = reference_pred.shape()[1];
  switch (mode) {
    case NormMode::Global: return build_global_context(H, W, valid);
    case NormMode::Hdn: return build_hdn_contexts(reference_pred, cfg.hdn_levels, valid, cfg.hdn_scheme);
    case NormMode::SaHdn: return build_sa_hdn_contexts(masks, H, W, cfg.min_instance, valid);
  }
  throw Error(ErrorKind::Config, "unknown norm mode");
}

AdaptState start_adaptation(const StudentNet& base, const AdaptConfig& cfg) {
  AdaptState s;
  s.student = cfg.tune_scope == TuneScope::Lora
                  ? init_lora(base, cfg.lora_rank, cfg.lora_alpha, derive_seed({cfg.seed, 0x10aa}))
                  : base;
  s.teacher = clone_to_teacher(s.student, cfg.ema_alpha);
  return s;
}

EpochStats adapt_epoch(AdaptState& state, const Split& data, const AdaptConfig& cfg, std::size_t epoch,
                       std::size_t total_steps) {
  EpochStats stats;
  if (data.empty()) return stats;
  const bool lora = cfg.tune_scope == TuneScope::Lora;
  const bool use_reg = cfg.enable_wr && lora;
  const auto order = epoch_order(data.size(), derive_seed({cfg.seed, epoch, 1}));
  const std::size_t nb = batches_per_epoch(data.size(), cfg.batch_size);

  std::size_t n_st = 0, n_ws = 0;
  for (std::size_t b = 0; b < nb; ++b) {
    const double lr = cosine_lr(std::min(state.step, total_steps), total_steps, cfg.base_lr, cfg.batch_size);
    stats.lr += lr;
    Tape tape;
    const BoundNet bound = bind_trainable(state.student, tape, cfg.tune_scope);
    Tensor loss = Tensor::scalar(0.0);
    const std::size_t begin = b * cfg.batch_size, end = std::min(data.size(), begin + cfg.batch_size);
    const double inv_b = 1.0 / static_cast<double>(end - begin);

    for (std::size_t k = begin; k < end; ++k) {
      const std::size_t idx = order[k];
      const Sample& sample = data[idx];
      const Scene& scene = sample.scene;
      std::mt19937_64 rng(derive_seed({cfg.seed, epoch, idx, 2}));
      const bool hflip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
      const CropRect crop = random_crop(cfg.crop, scene.height(), scene.width(), rng);
      const AugmentedView weak = augment(scene.rgb, {hflip, crop, Strength::Weak, rng()});
      const ValidMask valid = warp_valid(scene.valid, weak);

      if (cfg.enable_st) {
        const AugmentedView strong = augment(scene.rgb, {hflip, crop, Strength::Strong, rng()});
        const Tensor pseudo = student_forward(state.teacher.net, weak.image);
        if (pseudo.requires_grad()) throw Error(ErrorKind::State, "teacher prediction is on the tape");
        const Tensor pred = student_forward(bound.net, strong.image);
        const ContextHierarchy h = build_contexts(cfg.norm_mode, pseudo, warp_masks(scene.masks, weak), valid, cfg);
        const Tensor l_st = self_training_loss(pred, pseudo, h, cfg.epsilon, cfg.detach_student_stats);
        stats.loss_st += l_st.item();
        ++n_st;
        loss = add(loss, scale(l_st, cfg.weights.lambda_st * inv_b));
      }
      if (cfg.enable_ws && !sample.weak.empty()) {
        const auto labels = warp_labels(sample.weak, weak, scene.depth.numel());
        if (!labels.empty()) {
          const Tensor pred_w = student_forward(bound.net, weak.image);
          const ContextHierarchy g = build_global_context(weak.height, weak.width, valid);
          const Tensor phi = normalize_phi(pred_w, robust_stats(pred_w, g.contexts[0], cfg.epsilon));
          const Tensor l_w = weak_loss(phi, labels, cfg.weights.margin_delta);
          stats.loss_weak += l_w.item();
          ++n_ws;
          loss = add(loss, scale(l_w, cfg.weights.lambda_w * inv_b));
        }
      }
    }
    if (use_reg) {
      const Tensor l_reg = lora_reg_loss(lora_layers(bound.net), cfg.weights.reg_alpha);
      stats.loss_reg += l_reg.item();
      loss = add(loss, scale(l_reg, cfg.weights.lambda_r));
    }

    if (loss.requires_grad()) {
      const Gradients grads = tape.backward(loss);
      std::map<std::string, Tensor> by_name;
      for (const auto& [name, leaf] : bound.trainable) by_name.emplace(name, grads.at(leaf));
      adamw_step(state.student, by_name, state.opt,
                 {lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps});
      if (cfg.ema_per_step) state.teacher = ema_update(state.teacher, state.student);
    }
    ++state.step;
  }
  if (!cfg.ema_per_step) state.teacher = ema_update(state.teacher, state.student);

  stats.lr /= static_cast<double>(nb);
  if (n_st) stats.loss_st /= static_cast<double>(n_st);
  if (n_ws) stats.loss_weak /= static_cast<double>(n_ws);
  if (use_reg) stats.loss_reg /= static_cast<double>(nb);
  return stats;
}

MetricsReport evaluate(const StudentNet& net, const Split& data) {
  std::vector<MetricsReport> per_image;
  per_image.reserve(data.size());
  for (const auto& s : data) {
    per_image.push_back(compute_metrics(student_forward(net, s.scene.rgb), s.scene.depth, s.scene.valid));
  }
  return average_reports(per_image);
}

AdaptResult run_adaptation(const StudentNet& base, const Split& train, const Split& val, const AdaptConfig& cfg,
                           const EpochCallback& on_epoch) {
  std::set<std::string> ids;
  for (const auto& s : train) ids.insert(s.id);
  for (const auto& s : val) {
    if (ids.count(s.id)) throw Error(ErrorKind::Data, "sample " + s.id + " is in both the train and val splits");
  }
  if (train.empty() || val.empty()) throw Error(ErrorKind::Data, "adaptation needs non-empty train and val splits");

  AdaptState state = start_adaptation(base, cfg);
  AdaptResult result;
  result.initial_val = evaluate(state.student, val);
  result.best_val = result.initial_val;
  result.best = {state.student, state.teacher};

  const std::size_t total_steps = cfg.epochs_max * batches_per_epoch(train.size(), cfg.batch_size);
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
    const EpochStats st = adapt_epoch(state, train, cfg, epoch, total_steps);
    const MetricsReport m = evaluate(state.student, val);
    if (!std::isfinite(st.loss_st) || !std::isfinite(st.loss_weak) || !std::isfinite(st.loss_reg)) {
      throw Error(ErrorKind::Numeric, "non-finite loss in epoch " + std::to_string(epoch));
    }
    const TrajectoryRow row{epoch, st.lr, st.loss_st, st.loss_weak, st.loss_reg, m.delta1, m.absrel};
    result.trajectory.push_back(row);
    if (on_epoch) on_epoch(row);
    if (m.delta1 > result.best_val.delta1) {
      result.best_val = m;
      result.best = {state.student, state.teacher};
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best > cfg.patience) {
      break;
    }
  }
  return result;
}

void write_trajectory(const std::vector<TrajectoryRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot write trajectory " + path.string());
  os << "epoch,lr,loss_st,loss_weak,loss_reg,val_delta1,val_absrel\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.lr, r.loss_st,
                  r.loss_weak, r.loss_reg, r.val_delta1, r.val_absrel);
    os << buf;
  }
}

// ------------------------------------------------------------ pretraining

StudentNet pretrain_toy(const Split& data, const PretrainConfig& cfg, const EpochCallback& on_epoch) {
  if (data.empty()) throw Error(ErrorKind::Data, "pretraining needs scenes");
  StudentNet net = make_student(cfg.shape, derive_seed({cfg.seed, 0x9e7}));
  OptimizerState opt;
  const std::size_t nb = batches_per_epoch(data.size(), cfg.batch_size);
  const std::size_t total = cfg.epochs * nb;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), derive_seed({cfg.seed, epoch, 3}));
    TrajectoryRow row{epoch, 0, 0, 0, 0, 0, 0};
    for (std::size_t b = 0; b < nb; ++b) {
      // Same half-cosine shape as adaptation, without the batch scaling.
      const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                                       static_cast<double>(total)));
      row.lr += lr / static_cast<double>(nb);
      Tape tape;
      const BoundNet bound = bind_trainable(net, tape, TuneScope::All);
      Tensor loss = Tensor::scalar(0.0);
      const std::size_t begin = b * cfg.batch_size, end = std::min(data.size(), begin + cfg.batch_size);
      for (std::size_t k = begin; k < end; ++k) {
        const Scene& scene = data[order[k]].scene;
        std::mt19937_64 rng(derive_seed({cfg.seed, epoch, order[k], 4}));
        const bool hflip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
        const AugmentedView view = augment(scene.rgb, {hflip, {}, Strength::Weak, rng()});
        std::vector<double> disp(scene.depth.numel());
        for (std::size_t p = 0; p < disp.size(); ++p) disp[p] = 1.0 / scene.depth[view.source[p]];
        const Tensor target({view.height, view.width}, std::move(disp));
        const Tensor pred = student_forward(bound.net, view.image);
        const Tensor l = self_training_loss(pred, target, build_global_context(view.height, view.width,
                                                                                warp_valid(scene.valid, view)));
        row.loss_st += l.item() / static_cast<double>(data.size());
        loss = add(loss, scale(l, 1.0 / static_cast<double>(end - begin)));
      }
      const Gradients grads = tape.backward(loss);
      std::map<std::string, Tensor> by_name;
      for (const auto& [name, leaf] : bound.trainable) by_name.emplace(name, grads.at(leaf));
      adamw_step(net, by_name, opt, {lr, cfg.weight_decay, 0.9, 0.999, 1e-8});
      ++step;
    }
    if (!std::isfinite(row.loss_st)) throw Error(ErrorKind::Numeric, "pretraining diverged");
    if (on_epoch) on_epoch(row);
  }
  return net;
}

}  // namespace westar
