#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "westar/error.hpp"
#include "westar/model.hpp"

using namespace westar;

namespace {

Tensor random_image(std::uint64_t seed, std::size_t h = 16, std::size_t w = 16) {
  std::mt19937_64 rng(seed);
  return westar::testing::random_tensor(rng, {h, w, 3}, 0.0, 1.0);
}

ModelShape small_shape() {
  ModelShape s;
  s.patch = 4;
  s.width = 16;
  s.blocks = 1;
  s.mlp_hidden = 32;
  s.decoder_hidden = 32;
  return s;
}

Tensor hflip_image(const Tensor& img) {
  const auto H = img.shape()[0], W = img.shape()[1];
  std::vector<double> v(img.numel());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) v[(y * W + x) * 3 + c] = img[(y * W + (W - 1 - x)) * 3 + c];
  return Tensor(img.shape(), std::move(v));
}

Tensor hflip_map(const Tensor& m) {
  const auto H = m.shape()[0], W = m.shape()[1];
  std::vector<double> v(m.numel());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) v[y * W + x] = m[y * W + (W - 1 - x)];
  return Tensor(m.shape(), std::move(v));
}

LoraLinear scalar_layer() {
  LoraLinear l;
  l.base_weight = Tensor({1, 1}, {0.0});
  l.base_bias = Tensor({1}, {0.0});
  l.u = Tensor({1, 1}, {2.0});
  l.v = Tensor({1, 1}, {3.0});
  l.rank = 8;
  l.lora_alpha = 16;
  return l;
}

}  // namespace

TEST_CASE("lora_forward scalar arithmetic") {
  const auto l = scalar_layer();
  CHECK(lora_forward(l, Tensor({1, 1}, {1.0})).item() == 12.0);
  CHECK_THROWS_AS(lora_forward(l, Tensor({1, 2}, {1.0, 2.0})), Error);
}

TEST_CASE("lora gradient reaches only the low-rank factors") {
  auto net = init_lora(make_student(small_shape(), 1), 2, 16, 2);
  Tape tape;
  auto bound = bind_trainable(net, tape, TuneScope::Lora);
  auto loss = sum(square(student_forward(bound.net, random_image(3))));
  auto grads = tape.backward(loss);
  CHECK_FALSE(grads.contains(bound.net.patch_embed.base_weight));
  CHECK(grads.contains(bound.net.patch_embed.u));
  CHECK(grads.contains(bound.net.blocks[0].qkv.v));
  for (const auto& [name, leaf] : bound.trainable) CHECK(name.find("lora_") != std::string::npos);
}

TEST_CASE("init_lora keeps the base function bit-identical") {
  const auto base = make_student(ModelShape{}, 4);
  const auto img = random_image(5, 32, 32);
  const auto before = student_forward(base, img);
  const auto adapted = init_lora(base, 8, 16, 9);
  CHECK(student_forward(adapted, img).same_values(before));

  const auto again = init_lora(base, 8, 16, 9);
  CHECK(again.blocks[1].mlp_in.u.same_values(adapted.blocks[1].mlp_in.u));
  CHECK(adapted.patch_embed.rank == 8);
  CHECK(adapted.patch_embed.lora_alpha == 16);
  CHECK_THROWS_AS(static_cast<void>(init_lora(base, 33, 16, 1)), Error);
  CHECK_THROWS_AS(static_cast<void>(init_lora(base, 0, 16, 1)), Error);
}

TEST_CASE("student_forward contract") {
  const auto net = make_student(ModelShape{}, 11);
  std::mt19937_64 rng(1);
  const auto img = westar::testing::random_tensor(rng, {64, 64, 3}, 0.0, 1.0);
  const auto out = student_forward(net, img);
  CHECK(out.shape() == Shape{64, 64});
  for (double v : out.values()) CHECK(v > 0.0);
  CHECK(student_forward(net, img).same_values(out));
  CHECK_THROWS_AS(student_forward(net, westar::testing::random_tensor(rng, {60, 64, 3})), Error);
}

TEST_CASE("trainable parameters stay under ten percent of the default architecture") {
  const auto net = init_lora(make_student(ModelShape{}, 0), 8, 16, 0);
  std::size_t expected = 0;
  for (const auto* l : lora_layers(net)) expected += 8 * (l->in_features() + l->out_features());
  CHECK(lora_parameter_count(net) == expected);
  CHECK(static_cast<double>(lora_parameter_count(net)) < 0.1 * static_cast<double>(parameter_count(net)));
}

TEST_CASE("ema_update") {
  auto student = make_student(small_shape(), 1);
  auto teacher = clone_to_teacher(student, 0.996);
  auto ones = student;
  auto zeros = student;
  for (auto& p : parameters(ones)) *p.tensor = Tensor::full(p.tensor->shape(), 1.0);
  for (auto& p : parameters(zeros)) *p.tensor = Tensor::zeros(p.tensor->shape());

  TeacherNet t{ones, 0.996};
  auto updated = ema_update(t, zeros);
  CHECK(updated.net.decoder_out.weight[0] == doctest::Approx(0.996).epsilon(1e-15));

  t.ema_alpha = 1.0;
  CHECK(ema_update(t, zeros).net.decoder_out.weight.same_values(ones.decoder_out.weight));
  t.ema_alpha = 0.0;
  CHECK(ema_update(t, zeros).net.decoder_out.weight.same_values(zeros.decoder_out.weight));

  auto other = make_student(ModelShape{}, 1);
  CHECK_THROWS_AS(static_cast<void>(ema_update(teacher, other)), Error);
}

TEST_CASE("ema decays the teacher-student gap geometrically") {
  const auto student = make_student(small_shape(), 2);
  auto teacher = clone_to_teacher(make_student(small_shape(), 3), 0.9);
  auto gap = [&](const TeacherNet& t) {
    double g = 0.0;
    const auto tp = parameters(t.net);
    const auto sp = parameters(student);
    for (std::size_t i = 0; i < tp.size(); ++i)
      for (std::size_t k = 0; k < tp[i].tensor->numel(); ++k)
        g = std::max(g, std::abs((*tp[i].tensor)[k] - (*sp[i].tensor)[k]));
    return g;
  };
  const double g0 = gap(teacher);
  for (int step = 1; step <= 10; ++step) {
    teacher = ema_update(teacher, student);
    CHECK(gap(teacher) == doctest::Approx(std::pow(0.9, step) * g0).epsilon(1e-12));
  }
}

TEST_CASE("clone_to_teacher is a detached deep copy") {
  auto student = init_lora(make_student(small_shape(), 5), 2, 16, 1);
  const auto img = random_image(8);
  const auto teacher = clone_to_teacher(student);
  CHECK(student_forward(teacher.net, img).same_values(student_forward(student, img)));

  student.decoder_out.bias = Tensor::full(student.decoder_out.bias.shape(), 5.0);
  CHECK_FALSE(student_forward(teacher.net, img).same_values(student_forward(student, img)));
  for (const auto& p : parameters(teacher.net)) CHECK_FALSE(p.tensor->requires_grad());
}

TEST_CASE("flip equivariance without positional term") {
  auto shape = small_shape();
  shape.positional = false;
  auto net = make_student(shape, 7);
  const std::size_t P = shape.patch;

  // Make the in-patch maps mirror-symmetric so a horizontal flip only permutes tokens.
  auto sym_rows = [&](const Tensor& w) {
    std::vector<double> v = w.values();
    const auto cols = w.cols();
    for (std::size_t py = 0; py < P; ++py)
      for (std::size_t px = 0; px < P; ++px)
        for (std::size_t c = 0; c < 3; ++c) {
          const auto r = (py * P + px) * 3 + c, m = (py * P + (P - 1 - px)) * 3 + c;
          for (std::size_t k = 0; k < cols; ++k) v[r * cols + k] = 0.5 * (w[r * cols + k] + w[m * cols + k]);
        }
    return Tensor(w.shape(), std::move(v));
  };
  auto sym_cols = [&](const Tensor& w) {
    std::vector<double> v = w.values();
    const auto rows = w.rows(), cols = w.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t py = 0; py < P; ++py)
        for (std::size_t px = 0; px < P; ++px)
          v[r * cols + py * P + px] = 0.5 * (w[r * cols + py * P + px] + w[r * cols + py * P + P - 1 - px]);
    return Tensor(w.shape(), std::move(v));
  };
  net.patch_embed.base_weight = sym_rows(net.patch_embed.base_weight);
  net.decoder_out.weight = sym_cols(net.decoder_out.weight);

  const auto img = random_image(12);
  const auto a = student_forward(net, hflip_image(img));
  const auto b = hflip_map(student_forward(net, img));
  double err = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) err = std::max(err, std::abs(a[i] - b[i]));
  CHECK(err < 1e-12);
}

TEST_CASE("student gradient matches finite differences") {
  auto net = init_lora(make_student(small_shape(), 13), 2, 16, 3);
  std::mt19937_64 rng(4);
  net.patch_embed.v = westar::testing::random_tensor(rng, net.patch_embed.v.shape(), -0.1, 0.1);
  const auto img = random_image(14);
  auto f = [&](const Tensor& v) {
    auto n = net;
    n.patch_embed.v = v;
    return sum(square(student_forward(n, img)));
  };
  CHECK(westar::testing::gradient_error(f, net.patch_embed.v) < 1e-6);
}

TEST_CASE("checkpoint round trip") {
  const auto student = init_lora(make_student(small_shape(), 21), 2, 16, 5);
  auto teacher = clone_to_teacher(student, 0.99);
  teacher.net.decoder_out.bias = Tensor::full(teacher.net.decoder_out.bias.shape(), 0.25);
  const auto path = std::filesystem::temp_directory_path() / "westar_ckpt_test.bin";
  save_checkpoint({student, teacher}, path);

  const auto loaded = load_checkpoint(path);
  const auto a = parameters(student);
  const auto b = parameters(loaded.student);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor->same_values(*b[i].tensor));
  CHECK(loaded.teacher.ema_alpha == 0.99);
  CHECK(loaded.teacher.net.decoder_out.bias[0] == 0.25);
  CHECK(loaded.student.patch_embed.rank == 2);

  std::ifstream is(path, std::ios::binary);
  char magic[5];
  is.read(magic, 5);
  CHECK(std::string(magic, 5) == "WSTR1");
  std::filesystem::remove(path);

  const auto bad = std::filesystem::temp_directory_path() / "westar_bad_ckpt.bin";
  std::ofstream(bad) << "NOPE";
  CHECK_THROWS_AS(load_checkpoint(bad), Error);
  std::filesystem::remove(bad);
}
