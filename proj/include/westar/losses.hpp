#pragma once

#include <span>
#include <vector>

#include "westar/model.hpp"
#include "westar/normalize.hpp"
#include "westar/tensor.hpp"

namespace westar {

/// Ordinal relation between two pixels in the disparity convention:
/// l = +1 asks pred[p_plus] to exceed pred[p_minus] by the margin (p_plus
/// nearer), l = -1 the reverse (p_plus farther), l = 0 asks for equality.
struct WeakLabel {
  std::size_t p_plus = 0;
  std::size_t p_minus = 0;
  int l = 0;

  bool operator==(const WeakLabel&) const = default;
};

struct LossWeights {
  double lambda_st = 1.0;
  double lambda_w = 0.001;
  double lambda_r = 1.0;
  double margin_delta = 0.05;
  double reg_alpha = 16.0;
};

/// Context-averaged absolute difference between the teacher's and the
/// student's median/MAD-normalized maps, averaged over valid pixels. The
/// teacher branch is always detached.
Tensor self_training_loss(const Tensor& student_pred, const Tensor& teacher_pred,
                          const ContextHierarchy& hierarchy, double epsilon = 1e-6,
                          bool detach_student_stats = false);

/// 1(l != 0) max(0, -l (d+ - d-) + delta) + 1(l == 0) |d+ - d-|
Tensor pairwise_rank_loss(const Tensor& d_plus, const Tensor& d_minus, int l, double margin_delta);

/// Mean pairwise ranking loss over `labels`; zero when there are none.
Tensor weak_loss(const Tensor& pred, std::span<const WeakLabel> labels, double margin_delta);

/// Sum over layers of || (reg_alpha / rank) U V ||_F^2.
Tensor lora_reg_loss(std::span<const LoraLinear* const> layers, double reg_alpha);

Tensor total_loss(const Tensor& l_st, const Tensor& l_weak, const Tensor& l_reg, const LossWeights& w);

}  // namespace westar
