#include <random>

#include "doctest.h"
#include "loss_sweep.hpp"
#include "westar/error.hpp"
#include "westar/losses.hpp"

using namespace westar;
using westar::testing::gradient_error;
using westar::testing::map2d;
using westar::testing::two_boxes;
using westar::testing::uniform_values;

TEST_CASE("self-training loss worked example") {
  const auto h = build_global_context(2, 2, all_valid(2, 2));
  const auto teacher = map2d(2, 2, {1, 2, 3, 4});
  const auto student = map2d(2, 2, {1, 2, 3, 5});
  CHECK(self_training_loss(student, teacher, h, 0.0).item() == 0.25);
  CHECK(westar::testing::ref_self_training(student.values(), teacher.values(), h, 0.0) == 0.25);
  CHECK(self_training_loss(teacher, teacher, h, 1e-6).item() == 0.0);
  CHECK_THROWS_AS(self_training_loss(map2d(1, 4, {1, 2, 3, 4}), teacher, h), Error);
}

TEST_CASE("self-training loss matches the brute-force reference") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t H = 8, W = 12;
    const auto s = uniform_values(rng, H * W, 0.2, 3.0);
    const auto t = uniform_values(rng, H * W, 0.2, 3.0);
    ValidMask valid(H * W, 1);
    valid[trial % (H * W)] = 0;
    for (const auto& h : {build_global_context(H, W, valid), build_hdn_contexts(map2d(H, W, t), {1, 2, 4}, valid),
                          build_sa_hdn_contexts(two_boxes(H, W), H, W, 16, valid)}) {
      const double got = self_training_loss(map2d(H, W, s), map2d(H, W, t), h, 1e-6).item();
      CHECK(got == doctest::Approx(westar::testing::ref_self_training(s, t, h, 1e-6)).epsilon(1e-12));
    }
  }
}

TEST_CASE("self-training loss is affine invariant") {
  std::mt19937_64 rng(5);
  const std::size_t H = 8, W = 8;
  const auto s = uniform_values(rng, H * W, 0.2, 3.0);
  const auto t = uniform_values(rng, H * W, 0.2, 3.0);
  const auto h = build_sa_hdn_contexts(two_boxes(H, W), H, W, 16);
  const double base0 = self_training_loss(map2d(H, W, s), map2d(H, W, t), h, 0.0).item();
  const double base = self_training_loss(map2d(H, W, s), map2d(H, W, t), h, 1e-6).item();
  for (auto [a, b] : {std::pair{2.0, 0.0}, {4.0, -1.0}, {0.37, 5.2}, {13.0, 0.1}}) {
    std::vector<double> moved_s, moved_t;
    for (double x : s) moved_s.push_back(a * x + b);
    for (double x : t) moved_t.push_back(a * x + b);
    CHECK(self_training_loss(map2d(H, W, moved_s), map2d(H, W, t), h, 0.0).item() ==
          doctest::Approx(base0).epsilon(1e-12));
    CHECK(self_training_loss(map2d(H, W, s), map2d(H, W, moved_t), h, 0.0).item() ==
          doctest::Approx(base0).epsilon(1e-12));
    CHECK(std::abs(self_training_loss(map2d(H, W, moved_s), map2d(H, W, t), h, 1e-6).item() - base) <= 1e-3 * base);
  }
  // Dyadic scale and shift are exact.
  std::vector<double> d;
  for (double x : s) d.push_back(2.0 * x + 0.25);
  CHECK(self_training_loss(map2d(H, W, d), map2d(H, W, t), h, 0.0).item() == base0);
}

TEST_CASE("full cover instance equals global") {
  std::mt19937_64 rng(8);
  const std::size_t H = 6, W = 6;
  const auto s = uniform_values(rng, H * W, 0.2, 3.0);
  const auto t = uniform_values(rng, H * W, 0.2, 3.0);
  InstanceMaskSet all{H, W, {{1, {}}}};
  for (std::size_t p = 0; p < H * W; ++p) all.masks[0].pixels.push_back(p);
  const double g = self_training_loss(map2d(H, W, s), map2d(H, W, t), build_global_context(H, W, {}), 1e-6).item();
  const double f = self_training_loss(map2d(H, W, s), map2d(H, W, t), build_sa_hdn_contexts(all, H, W), 1e-6).item();
  CHECK(f == doctest::Approx(g).epsilon(1e-12));
}

TEST_CASE("teacher receives no gradient") {
  const auto h = build_global_context(2, 3, {});
  Tape tape;
  const Tensor s = tape.watch(map2d(2, 3, {0.3, 1.1, 2.0, 0.7, 1.6, 2.9}));
  const Tensor t = tape.watch(map2d(2, 3, {0.2, 1.4, 2.2, 0.5, 1.9, 2.6}));
  const auto g = tape.backward(self_training_loss(s, t, h));
  CHECK(g.at(s).values() != std::vector<double>(6, 0.0));
  CHECK(g.at(t).values() == std::vector<double>(6, 0.0));
}

TEST_CASE("detached student stats change the gradient but not the value") {
  const auto h = build_global_context(2, 3, {});
  const auto sv = map2d(2, 3, {0.3, 1.1, 2.0, 0.7, 1.6, 2.9});
  const auto tv = map2d(2, 3, {0.2, 1.4, 2.2, 0.5, 1.9, 2.6});
  Tape a, b;
  const Tensor sa = a.watch(sv), sb = b.watch(sv);
  const auto la = self_training_loss(sa, tv, h, 1e-6, false);
  const auto lb = self_training_loss(sb, tv, h, 1e-6, true);
  CHECK(la.item() == lb.item());
  const auto ga = a.backward(la).at(sa), gb = b.backward(lb).at(sb);
  CHECK_FALSE(ga.same_values(gb));
}

TEST_CASE("pairwise rank loss truth table") {
  const auto rank = [](double dp, double dm, int l, double delta) {
    return pairwise_rank_loss(Tensor::scalar(dp), Tensor::scalar(dm), l, delta).item();
  };
  CHECK(rank(0.5, 0.0, 1, 0.1) == 0.0);
  CHECK(rank(0.0, 0.0, 1, 0.1) == 0.1);
  CHECK(rank(0.3, 0.0, 0, 0.1) == 0.3);
  CHECK(rank(-0.2, 0.0, 1, 0.1) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(rank(-0.5, 0.0, -1, 0.1) == 0.0);
  CHECK(rank(0.2, 0.0, -1, 0.1) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK_THROWS_AS(rank(0, 0, 2, 0.1), Error);
  CHECK_THROWS_AS(rank(0, 0, 1, -0.1), Error);
  // Translation invariance holds for every branch.
  for (int l : {-1, 0, 1})
    for (double dp : {-0.4, 0.0, 0.03, 0.7})
      CHECK(rank(dp + 4.0, 4.0, l, 0.05) == doctest::Approx(rank(dp, 0.0, l, 0.05)).epsilon(1e-12));
}

TEST_CASE("weak loss") {
  const auto pred = map2d(1, 4, {0.5, 0.0, -0.2, 0.1});
  CHECK(weak_loss(pred, {}, 0.1).item() == 0.0);
  const std::vector<WeakLabel> two{{0, 1, 1}, {2, 1, 1}};
  CHECK(weak_loss(pred, two, 0.1).item() == doctest::Approx(0.15).epsilon(1e-15));

  const std::vector<WeakLabel> mixed{{0, 1, 1}, {3, 1, 0}, {2, 0, -1}, {1, 2, 1}};
  double expect = 0.0;
  for (const auto& w : mixed)
    expect += pairwise_rank_loss(Tensor::scalar(pred[w.p_plus]), Tensor::scalar(pred[w.p_minus]), w.l, 0.1).item();
  CHECK(weak_loss(pred, mixed, 0.1).item() == doctest::Approx(expect / 4).epsilon(1e-15));

  const std::vector<WeakLabel> bad_index{{0, 9, 1}};
  CHECK_THROWS_AS(weak_loss(pred, bad_index, 0.1), Error);
  const std::vector<WeakLabel> self_pair{{2, 2, 1}};
  CHECK_THROWS_AS(weak_loss(pred, self_pair, 0.1), Error);

  SUBCASE("satisfied labels give zero loss and zero gradient") {
    Tape tape;
    const Tensor p = tape.watch(pred);
    const std::vector<WeakLabel> ok{{0, 1, 1}, {2, 3, -1}, {0, 2, 1}};
    const Tensor l = weak_loss(p, ok, 0.05);
    CHECK(l.item() == 0.0);
    const auto g = tape.backward(l).at(p);
    for (double x : g.values()) CHECK(x == 0.0);
  }
}

TEST_CASE("lora regularizer") {
  LoraLinear l;
  l.base_weight = Tensor({1, 1}, {1});
  l.base_bias = Tensor({1}, {0});
  l.u = Tensor({1, 1}, {2});
  l.v = Tensor({1, 1}, {3});
  l.rank = 8;
  l.lora_alpha = 16;
  const LoraLinear* one[] = {&l};
  CHECK(lora_reg_loss(one, 16.0).item() == 144.0);

  LoraLinear doubled = l;
  doubled.u = Tensor({1, 1}, {6});
  const LoraLinear* three[] = {&doubled};
  CHECK(lora_reg_loss(three, 16.0).item() == 9.0 * 144.0);

  const auto net = init_lora(make_student(ModelShape{}, 3), 8, 16, 4);
  const auto layers = lora_layers(net);
  CHECK(lora_reg_loss(layers, 16.0).item() == 0.0);
}

TEST_CASE("total loss") {
  const LossWeights w;
  const auto total = total_loss(Tensor::scalar(0.25), Tensor::scalar(0.15), Tensor::scalar(144), w);
  CHECK(total.item() == doctest::Approx(144.25015).epsilon(1e-14));
  const LossWeights zero{0, 0, 0, 0.05, 16};
  CHECK(total_loss(Tensor::scalar(0.25), Tensor::scalar(0.15), Tensor::scalar(144), zero).item() == 0.0);
}

TEST_CASE("zero fixed point") {
  const auto net = init_lora(make_student(ModelShape{}, 11), 8, 16, 12);
  std::mt19937_64 rng(13);
  const Tensor image({32, 32, 3}, uniform_values(rng, 32 * 32 * 3, 0, 1));
  const Tensor teacher = student_forward(net, image).detached();

  Tape tape;
  const auto bound = bind_trainable(net, tape, TuneScope::Lora);
  const Tensor pred = student_forward(bound.net, image);
  const auto h = build_global_context(32, 32, {});
  std::vector<WeakLabel> labels;
  for (std::size_t a = 0; a < 50; ++a) {
    const std::size_t b = (a * 37 + 11) % 1024;
    if (teacher[a] > teacher[b] + 0.05) labels.push_back({a, b, 1});
    else if (teacher[b] > teacher[a] + 0.05) labels.push_back({a, b, -1});
  }
  REQUIRE(labels.size() > 10);
  const auto layers = lora_layers(bound.net);
  const Tensor loss = total_loss(self_training_loss(pred, teacher, h), weak_loss(pred, labels, 0.05),
                                 lora_reg_loss(layers, 16.0), LossWeights{});
  CHECK(loss.item() == 0.0);
  const auto grads = tape.backward(loss);
  for (const auto& [name, leaf] : bound.trainable) {
    if (!grads.contains(leaf)) continue;
    for (double x : grads.at(leaf).values()) REQUIRE(x == 0.0);
  }
}

TEST_CASE("loss gradients match central differences over 100 seeds") {
  const auto r = westar::testing::gradient_sweep(100);
  CHECK(r.max_st < 1e-4);
  CHECK(r.max_st_detached < 1e-4);
  CHECK(r.max_weak < 1e-4);
  CHECK(r.max_reg < 1e-4);
  CHECK(r.max_total < 1e-4);
  CHECK(r.checked >= 40);
}
