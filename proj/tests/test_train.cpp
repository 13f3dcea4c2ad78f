#include <array>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "doctest.h"
#include "westar/dataset.hpp"
#include "westar/error.hpp"
#include "westar/train.hpp"

using namespace westar;

namespace {

ModelShape tiny_shape() { return {8, 16, 1, 32, 64, true}; }

DatasetConfig tiny_data() {
  DatasetConfig d;
  d.height = 32;
  d.width = 32;
  d.seed = 5;
  return d;
}

AdaptConfig tiny_adapt() {
  AdaptConfig c;
  c.batch_size = 2;
  c.epochs_max = 3;
  c.lora_rank = 4;
  c.seed = 3;
  return c;
}

const Split& adapt_split() {
  static const Split s = corrupt_split(make_clean_split("adapt", 6, tiny_data()), "adapt_c", tiny_data(), true);
  return s;
}

const Split& val_split() {
  static const Split s = corrupt_split(make_clean_split("val", 4, tiny_data()), "val_c", tiny_data(), false);
  return s;
}

bool same_params(const StudentNet& a, const StudentNet& b, ParamGroup group) {
  const auto pa = parameters(a), pb = parameters(b);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].group != group) continue;
    if (pa[i].tensor->shape() != pb[i].tensor->shape() || !pa[i].tensor->same_values(*pb[i].tensor)) return false;
  }
  return true;
}

double lora_product_norm(const StudentNet& net) {
  double total = 0.0;
  for (const auto* l : lora_layers(net)) {
    const Tensor uv = matmul(l->u, l->v);
    for (double x : uv.values()) total += x * x;
  }
  return std::sqrt(total);
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 0.1, 4) == 0.0015625);
  CHECK(cosine_lr(100, 100, 0.1, 4) == 0.0);
  CHECK(cosine_lr(50, 100, 0.1, 4) == doctest::Approx(0.0015625 / 2).epsilon(1e-14));
  CHECK(cosine_lr(0, 10, 0.1, 256) == 0.1);
  CHECK_THROWS_AS(cosine_lr(11, 10, 0.1, 4), Error);
  CHECK_THROWS_AS(cosine_lr(0, 0, 0.1, 4), Error);
}

TEST_CASE("adamw") {
  StudentNet net = make_student(tiny_shape(), 1);
  const StudentNet before = net;
  const std::string name = "decoder.out.bias";
  Tensor* bias = nullptr;
  for (auto& p : parameters(net))
    if (p.name == name) bias = p.tensor;
  REQUIRE(bias);

  SUBCASE("zero gradient, zero decay is a fixed point") {
    OptimizerState st;
    adamw_step(net, {{name, Tensor::zeros(bias->shape())}}, st, {0.1, 0.0});
    CHECK(same_params(net, before, ParamGroup::DecoderBase));
  }
  SUBCASE("first step moves by about lr") {
    OptimizerState st;
    const Tensor old = *bias;
    adamw_step(net, {{name, Tensor::full(bias->shape(), 1.0)}}, st, {0.01, 0.0});
    for (std::size_t i = 0; i < old.numel(); ++i) CHECK((old[i] - (*bias)[i]) == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(same_params(net, before, ParamGroup::EncoderBase));
  }
  SUBCASE("decoupled decay shrinks geometrically") {
    OptimizerState st;
    *bias = Tensor::full(bias->shape(), 2.0);
    for (int k = 0; k < 5; ++k) adamw_step(net, {{name, Tensor::zeros(bias->shape())}}, st, {0.1, 0.5});
    double expect = 2.0;
    for (int k = 0; k < 5; ++k) expect *= 1.0 - 0.1 * 0.5;
    for (double x : bias->values()) CHECK(x == expect);
  }
  SUBCASE("errors") {
    OptimizerState st;
    CHECK_THROWS_AS(adamw_step(net, {{"nope", Tensor::zeros({1})}}, st, {}), Error);
    CHECK_THROWS_AS(adamw_step(net, {{name, Tensor::zeros({3})}}, st, {}), Error);
  }
}

TEST_CASE("contexts follow the norm mode") {
  const auto& s = adapt_split()[0].scene;
  const AdaptConfig cfg;
  const Tensor pred = s.depth;
  CHECK(build_contexts(NormMode::Global, pred, s.masks, s.valid, cfg).contexts.size() == 1);
  CHECK(build_contexts(NormMode::Hdn, pred, s.masks, s.valid, cfg).contexts.size() == 7);
  const auto sa = build_contexts(NormMode::SaHdn, pred, s.masks, s.valid, cfg);
  CHECK(sa == build_sa_hdn_contexts(s.masks, 32, 32, 16, s.valid));
  CHECK(parse_norm_mode("sa_hdn") == NormMode::SaHdn);
  CHECK_THROWS_AS(parse_norm_mode("grid"), Error);
}

TEST_CASE("an epoch with every loss disabled changes nothing") {
  AdaptConfig cfg = tiny_adapt();
  cfg.enable_st = cfg.enable_ws = cfg.enable_wr = false;
  const StudentNet base = make_student(tiny_shape(), 2);
  AdaptState state = start_adaptation(base, cfg);
  const AdaptState before = state;
  adapt_epoch(state, adapt_split(), cfg, 1, 10);
  for (auto g : {ParamGroup::EncoderBase, ParamGroup::DecoderBase, ParamGroup::Lora}) {
    CHECK(same_params(state.student, before.student, g));
    CHECK(same_params(state.teacher.net, before.teacher.net, g));
  }
}

TEST_CASE("lora adaptation leaves base weights untouched") {
  const StudentNet base = make_student(tiny_shape(), 4);
  AdaptConfig cfg = tiny_adapt();
  cfg.weights.lambda_w = 1.0;
  const auto result = run_adaptation(base, adapt_split(), val_split(), cfg);
  AdaptState state = start_adaptation(base, cfg);
  adapt_epoch(state, adapt_split(), cfg, 1, 10);
  for (const StudentNet* net : std::array<const StudentNet*, 3>{&state.student, &state.teacher.net, &result.best.student}) {
    CHECK(same_params(*net, base, ParamGroup::EncoderBase));
    CHECK(same_params(*net, base, ParamGroup::DecoderBase));
  }
  CHECK(lora_product_norm(state.student) > 0);
  CHECK_FALSE(same_params(state.teacher.net, state.student, ParamGroup::Lora));
}

TEST_CASE("tuning scopes touch only their group") {
  const StudentNet base = make_student(tiny_shape(), 6);
  for (auto [scope, moved] : {std::pair{TuneScope::Encoder, ParamGroup::EncoderBase},
                              {TuneScope::Decoder, ParamGroup::DecoderBase}}) {
    AdaptConfig cfg = tiny_adapt();
    cfg.tune_scope = scope;
    AdaptState state = start_adaptation(base, cfg);
    CHECK(lora_parameter_count(state.student) == 0);
    adapt_epoch(state, adapt_split(), cfg, 1, 10);
    for (auto g : {ParamGroup::EncoderBase, ParamGroup::DecoderBase}) {
      CHECK(same_params(state.student, base, g) == (g != moved));
    }
  }
  CHECK(parse_tune_scope("decoder") == TuneScope::Decoder);
}

TEST_CASE("weak supervision alone reduces the ranking loss") {
  const StudentNet base = make_student(tiny_shape(), 7);
  AdaptConfig cfg = tiny_adapt();
  cfg.enable_st = cfg.enable_wr = false;
  cfg.base_lr = 0.5;
  const Split batch(adapt_split().begin(), adapt_split().begin() + 2);
  const auto fixed_loss = [&](const StudentNet& net) {
    double total = 0.0;
    for (const auto& s : batch) {
      const Tensor pred = student_forward(net, s.scene.rgb);
      const auto g = build_global_context(32, 32, s.scene.valid);
      total += weak_loss(normalize_phi(pred, robust_stats(pred, g.contexts[0])), s.weak, 0.05).item();
    }
    return total;
  };
  AdaptState state = start_adaptation(base, cfg);
  std::vector<double> losses{fixed_loss(state.student)};
  for (std::size_t e = 1; e <= 5; ++e) {
    adapt_epoch(state, batch, cfg, e, 100);
    losses.push_back(fixed_loss(state.student));
  }
  INFO(losses[0], " ", losses[1], " ", losses[2], " ", losses[3], " ", losses[4], " ", losses[5]);
  CHECK(losses[0] > 0);
  for (std::size_t k = 1; k < losses.size(); ++k) CHECK(losses[k] < losses[k - 1]);
}

TEST_CASE("regularization alone shrinks the low-rank update") {
  const StudentNet base = make_student(tiny_shape(), 8);
  AdaptConfig cfg = tiny_adapt();
  cfg.enable_st = cfg.enable_wr = false;
  cfg.weights.lambda_w = 1.0;
  cfg.base_lr = 2.0;
  AdaptState state = start_adaptation(base, cfg);
  for (std::size_t e = 1; e <= 2; ++e) adapt_epoch(state, adapt_split(), cfg, e, 100);
  double norm = lora_product_norm(state.student);
  REQUIRE(norm > 0);
  cfg.enable_ws = false;
  cfg.enable_wr = true;
  cfg.base_lr = 0.1;
  for (std::size_t e = 3; e <= 8; ++e) {
    adapt_epoch(state, adapt_split(), cfg, e, 100);
    const double next = lora_product_norm(state.student);
    CHECK(next <= norm);
    norm = next;
  }
}

TEST_CASE("run_adaptation contracts") {
  const StudentNet base = make_student(tiny_shape(), 9);
  AdaptConfig cfg = tiny_adapt();
  cfg.epochs_max = 4;
  std::size_t calls = 0;
  const auto a = run_adaptation(base, adapt_split(), val_split(), cfg, [&](const TrajectoryRow&) { ++calls; });
  const auto b = run_adaptation(base, adapt_split(), val_split(), cfg);
  REQUIRE(a.trajectory.size() == b.trajectory.size());
  CHECK(calls == a.trajectory.size());
  for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
    CHECK(a.trajectory[i].epoch == i + 1);
    CHECK(a.trajectory[i].val_delta1 == b.trajectory[i].val_delta1);
    CHECK(a.trajectory[i].loss_st == b.trajectory[i].loss_st);
    CHECK(a.best_val.delta1 >= a.trajectory[i].val_delta1);
  }
  CHECK(a.best_val.delta1 >= a.initial_val.delta1);
  CHECK(evaluate(a.best.student, val_split()).delta1 == a.best_val.delta1);

  SUBCASE("patience 0 stops at the first non-improving epoch") {
    AdaptConfig p = cfg;
    p.patience = 0;
    p.epochs_max = 8;
    const auto r = run_adaptation(base, adapt_split(), val_split(), p);
    double best = r.initial_val.delta1;
    std::size_t first_miss = 0;
    for (const auto& row : r.trajectory) {
      if (row.val_delta1 > best) {
        best = row.val_delta1;
      } else {
        first_miss = row.epoch;
        break;
      }
    }
    if (first_miss) CHECK(r.trajectory.size() == first_miss);
    else CHECK(r.trajectory.size() == 8);
  }

  SUBCASE("overlapping splits are rejected") {
    CHECK_THROWS_AS(run_adaptation(base, adapt_split(), adapt_split(), cfg), Error);
  }

  SUBCASE("trajectory file") {
    const auto path = std::filesystem::temp_directory_path() / "westar_test_traj.csv";
    write_trajectory(a.trajectory, path);
    std::ifstream is(path);
    std::string header;
    std::getline(is, header);
    CHECK(header == "epoch,lr,loss_st,loss_weak,loss_reg,val_delta1,val_absrel");
    std::size_t rows = 0;
    for (std::string line; std::getline(is, line);) ++rows;
    CHECK(rows == a.trajectory.size());
    std::filesystem::remove(path);
  }
}

TEST_CASE("pretraining is deterministic") {
  const Split data = make_clean_split("train", 4, tiny_data());
  PretrainConfig pc;
  pc.shape = tiny_shape();
  pc.epochs = 2;
  pc.batch_size = 2;
  pc.seed = 1;
  const auto a = pretrain_toy(data, pc), b = pretrain_toy(data, pc);
  for (auto g : {ParamGroup::EncoderBase, ParamGroup::DecoderBase}) CHECK(same_params(a, b, g));
  CHECK_FALSE(same_params(a, make_student(tiny_shape(), 0), ParamGroup::DecoderBase));
}

TEST_CASE("dataset splits") {
  const auto d = tiny_data();
  const auto clean = make_clean_split("test", 7, d);
  const auto again = make_clean_split("test", 7, d);
  const auto other = make_clean_split("val", 7, d);
  CHECK(clean[3].scene.rgb.same_values(again[3].scene.rgb));
  CHECK_FALSE(clean[3].scene.depth.same_values(other[3].scene.depth));
  const auto corrupted = corrupt_split(clean, "test_c", d, true);
  REQUIRE(corrupted.size() == clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    CHECK(corrupted[i].scene.depth.same_values(clean[i].scene.depth));
    CHECK(corrupted[i].scene.masks.label_map() == clean[i].scene.masks.label_map());
    CHECK(corrupted[i].weak.size() == 10);
  }
  CHECK(corruption_for(6) == corruption_for(0));
  CHECK(corruption_for(4) == CorruptionKind::Fog);

  const auto dir = std::filesystem::temp_directory_path() / "westar_test_split";
  std::filesystem::remove_all(dir);
  write_split(corrupted, dir);
  const auto back = read_split(dir, "test_c");
  REQUIRE(back.size() == corrupted.size());
  CHECK(back[2].id == "test_c/0002");
  CHECK(back[2].weak == corrupted[2].weak);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(read_split(dir, "x"), Error);
}
