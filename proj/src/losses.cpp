#include "westar/losses.hpp"

#include "westar/error.hpp"

namespace westar {

Tensor self_training_loss(const Tensor& student_pred, const Tensor& teacher_pred,
                          const ContextHierarchy& hierarchy, double epsilon, bool detach_student_stats) {
  const Shape expected{hierarchy.height, hierarchy.width};
  if (student_pred.shape() != expected || teacher_pred.shape() != expected) {
    throw Error(ErrorKind::Shape, "self_training_loss: predictions " + shape_string(student_pred.shape()) +
                                      " / " + shape_string(teacher_pred.shape()) + " do not match hierarchy " +
                                      shape_string(expected));
  }
  const Tensor teacher = stop_gradient(teacher_pred);

  std::size_t n_pixels = 0;
  for (const auto& ctxs : hierarchy.per_pixel)
    if (!ctxs.empty()) ++n_pixels;
  if (n_pixels == 0) throw Error(ErrorKind::Data, "hierarchy has no valid pixel");

  Tensor total = Tensor::scalar(0.0);
  for (const auto& ctx : hierarchy.contexts) {
    NormStats student_stats = robust_stats(student_pred, ctx, epsilon);
    if (detach_student_stats) {
      student_stats.t = stop_gradient(student_stats.t);
      student_stats.s = stop_gradient(student_stats.s);
    }
    const NormStats teacher_stats = robust_stats(teacher, ctx, epsilon);

    const Tensor phi_student = normalize_phi(gather(student_pred, ctx.pixels), student_stats);
    const Tensor phi_teacher = normalize_phi(gather(teacher, ctx.pixels), teacher_stats);

    std::vector<double> weights(ctx.pixels.size());
    for (std::size_t k = 0; k < ctx.pixels.size(); ++k)
      weights[k] = 1.0 / static_cast<double>(hierarchy.per_pixel[ctx.pixels[k]].size());
    const std::size_t n_ctx = weights.size();
    const Tensor w({n_ctx}, std::move(weights));

    total = add(total, sum(mul(abs_op(sub(phi_teacher, phi_student)), w)));
  }
  return scale(total, 1.0 / static_cast<double>(n_pixels));
}

namespace {

void check_label(int l) {
  if (l < -1 || l > 1) throw Error(ErrorKind::Domain, "weak label must be -1, 0 or 1, got " + std::to_string(l));
}

}  // namespace

Tensor pairwise_rank_loss(const Tensor& d_plus, const Tensor& d_minus, int l, double margin_delta) {
  check_label(l);
  if (margin_delta < 0.0) throw Error(ErrorKind::Domain, "margin must be non-negative");
  const Tensor delta = sub(d_plus, d_minus);
  if (l == 0) return abs_op(delta);
  return hinge(add(scale(delta, -static_cast<double>(l)), Tensor::scalar(margin_delta)));
}

Tensor weak_loss(const Tensor& pred, std::span<const WeakLabel> labels, double margin_delta) {
  if (labels.empty()) return Tensor::scalar(0.0);
  if (margin_delta < 0.0) throw Error(ErrorKind::Domain, "margin must be non-negative");

  std::vector<std::size_t> ord_plus, ord_minus, eq_plus, eq_minus;
  std::vector<double> signs;
  for (const auto& w : labels) {
    check_label(w.l);
    if (w.p_plus >= pred.numel() || w.p_minus >= pred.numel()) {
      throw Error(ErrorKind::Index, "weak label pixel (" + std::to_string(w.p_plus) + ", " +
                                        std::to_string(w.p_minus) + ") outside a map of " +
                                        std::to_string(pred.numel()) + " pixels");
    }
    if (w.l == 0) {
      eq_plus.push_back(w.p_plus);
      eq_minus.push_back(w.p_minus);
    } else {
      if (w.p_plus == w.p_minus) throw Error(ErrorKind::Data, "ordinal label compares a pixel with itself");
      ord_plus.push_back(w.p_plus);
      ord_minus.push_back(w.p_minus);
      signs.push_back(-static_cast<double>(w.l));
    }
  }

  Tensor total = Tensor::scalar(0.0);
  if (!ord_plus.empty()) {
    const Tensor delta = sub(gather(pred, ord_plus), gather(pred, ord_minus));
    const std::size_t n_ord = signs.size();
    const Tensor s({n_ord}, std::move(signs));
    total = add(total, sum(hinge(add(mul(delta, s), Tensor::scalar(margin_delta)))));
  }
  if (!eq_plus.empty()) {
    total = add(total, sum(abs_op(sub(gather(pred, eq_plus), gather(pred, eq_minus)))));
  }
  return scale(total, 1.0 / static_cast<double>(labels.size()));
}

Tensor lora_reg_loss(std::span<const LoraLinear* const> layers, double reg_alpha) {
  Tensor total = Tensor::scalar(0.0);
  for (const LoraLinear* l : layers) {
    if (l->rank == 0) continue;
    const double c = reg_alpha / static_cast<double>(l->rank);
    total = add(total, sum(square(scale(matmul(l->u, l->v), c))));
  }
  return total;
}

Tensor total_loss(const Tensor& l_st, const Tensor& l_weak, const Tensor& l_reg, const LossWeights& w) {
  return add(add(scale(l_st, w.lambda_st), scale(l_weak, w.lambda_w)), scale(l_reg, w.lambda_r));
}

}  // namespace westar
