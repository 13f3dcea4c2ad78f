#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "westar/eval_report.hpp"
#include "westar/losses.hpp"
#include "westar/model.hpp"
#include "westar/normalize.hpp"
#include "westar/synth.hpp"

namespace westar {

/// One image of a split. `scene.rgb` is what the model sees (possibly
/// corrupted); `scene.depth` is ground truth and only read by evaluation,
/// pretraining and the weak-label sampler.
struct Sample {
  std::string id;
  Scene scene;
  std::vector<WeakLabel> weak;
};

using Split = std::vector<Sample>;

enum class NormMode { Global, Hdn, SaHdn };

NormMode parse_norm_mode(const std::string& name);
std::string to_string(NormMode mode);

struct AdaptConfig {
  std::size_t batch_size = 4;
  double base_lr = 0.1;  // at batch 256
  std::size_t epochs_max = 100;
  std::size_t patience = 30;
  double ema_alpha = 0.996;
  bool ema_per_step = true;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  double epsilon = 1e-6;
  NormMode norm_mode = NormMode::SaHdn;
  std::vector<std::size_t> hdn_levels{1, 2, 4};
  HdnScheme hdn_scheme = HdnScheme::DepthBins;
  std::size_t min_instance = 16;
  bool detach_student_stats = false;
  bool enable_st = true;
  bool enable_ws = true;
  bool enable_wr = true;
  TuneScope tune_scope = TuneScope::Lora;
  std::size_t crop = 0;  // square crop side; 0 keeps the full frame
  std::uint64_t seed = 0;
};

struct OptimizerState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::size_t step = 0;
};

struct AdamWParams {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled AdamW on the parameters of `net` named in `grads`; every other
/// parameter is left untouched.
void adamw_step(StudentNet& net, const std::map<std::string, Tensor>& grads, OptimizerState& state,
                const AdamWParams& p);

/// lr0 = base_lr * batch_size / 256, annealed by half a cosine to 0.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t batch_size);

struct AdaptState {
  StudentNet student;
  TeacherNet teacher;
  OptimizerState opt;
  std::size_t step = 0;  // schedule position, counts every batch
};

struct EpochStats {
  double lr = 0.0;
  double loss_st = 0.0;
  double loss_weak = 0.0;
  double loss_reg = 0.0;
};

std::size_t batches_per_epoch(std::size_t n_samples, std::size_t batch_size);

/// One pass over `data`. `epoch` seeds the augmentations; `total_steps`
/// fixes the cosine horizon. Throws State if a teacher prediction ever
/// lands on the tape.
EpochStats adapt_epoch(AdaptState& state, const Split& data, const AdaptConfig& cfg, std::size_t epoch,
                       std::size_t total_steps);

/// Student prediction on every sample, scored against ground truth and
/// averaged per image.
MetricsReport evaluate(const StudentNet& net, const Split& data);

struct TrajectoryRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_st = 0.0;
  double loss_weak = 0.0;
  double loss_reg = 0.0;
  double val_delta1 = 0.0;
  double val_absrel = 0.0;
};

struct AdaptResult {
  Checkpoint best;
  std::size_t best_epoch = 0;  // 0 = the unadapted starting point
  MetricsReport initial_val;
  MetricsReport best_val;
  std::vector<TrajectoryRow> trajectory;
};

/// Prepares the starting state: LoRA factors in Lora scope, teacher clone.
AdaptState start_adaptation(const StudentNet& base, const AdaptConfig& cfg);

using EpochCallback = std::function<void(const TrajectoryRow&)>;

/// Epoch loop with validation-delta1 early stopping: training stops once
/// the number of epochs since the last improvement exceeds `patience`.
AdaptResult run_adaptation(const StudentNet& base, const Split& train, const Split& val, const AdaptConfig& cfg,
                           const EpochCallback& on_epoch = {});

void write_trajectory(const std::vector<TrajectoryRow>& rows, const std::filesystem::path& path);

struct PretrainConfig {
  ModelShape shape;
  std::size_t epochs = 120;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

/// Supervised pretraining of the base network: the self-training loss with
/// ground-truth disparity standing in for the teacher, global context only.
StudentNet pretrain_toy(const Split& data, const PretrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Builds the normalization hierarchy for one view.
ContextHierarchy build_contexts(NormMode mode, const Tensor& reference_pred, const InstanceMaskSet& masks,
                                const ValidMask& valid, const AdaptConfig& cfg);

}  // namespace westar
