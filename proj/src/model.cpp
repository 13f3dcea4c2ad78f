#include "westar/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "westar/error.hpp"

namespace westar {

namespace {

Tensor normal_tensor(std::mt19937_64& rng, Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

LoraLinear make_lora_linear(std::mt19937_64& rng, std::size_t d_in, std::size_t d_out) {
  LoraLinear l;
  l.base_weight = normal_tensor(rng, {d_in, d_out}, 1.0 / std::sqrt(static_cast<double>(d_in)));
  l.base_bias = Tensor::zeros({d_out});
  l.u = Tensor::zeros({d_in, 0});
  l.v = Tensor::zeros({0, d_out});
  return l;
}

Linear make_linear(std::mt19937_64& rng, std::size_t d_in, std::size_t d_out) {
  return {normal_tensor(rng, {d_in, d_out}, 1.0 / std::sqrt(static_cast<double>(d_in))),
          Tensor::zeros({d_out})};
}

template <class Net, class Ref, class Lora, class Lin>
std::vector<Ref> collect(Net& net) {
  std::vector<Ref> out;
  auto add_lora = [&](const std::string& prefix, Lora& l) {
    out.push_back({prefix + ".weight", &l.base_weight, ParamGroup::EncoderBase});
    out.push_back({prefix + ".bias", &l.base_bias, ParamGroup::EncoderBase});
    out.push_back({prefix + ".lora_u", &l.u, ParamGroup::Lora});
    out.push_back({prefix + ".lora_v", &l.v, ParamGroup::Lora});
  };
  auto add_linear = [&](const std::string& prefix, Lin& l) {
    out.push_back({prefix + ".weight", &l.weight, ParamGroup::DecoderBase});
    out.push_back({prefix + ".bias", &l.bias, ParamGroup::DecoderBase});
  };
  add_lora("patch_embed", net.patch_embed);
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const std::string p = "blocks." + std::to_string(b);
    add_lora(p + ".qkv", net.blocks[b].qkv);
    add_lora(p + ".proj", net.blocks[b].proj);
    add_lora(p + ".mlp_in", net.blocks[b].mlp_in);
    add_lora(p + ".mlp_out", net.blocks[b].mlp_out);
  }
  add_linear("decoder.hidden", net.decoder_hidden);
  add_linear("decoder.out", net.decoder_out);
  return out;
}

// Fixed 2-D sinusoidal token positions: first half of the channels encode
// the token row, second half the token column.
Tensor positional_table(std::size_t rows, std::size_t cols, std::size_t width) {
  std::vector<double> v(rows * cols * width);
  const std::size_t half = width / 2;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::pow(100.0, -static_cast<double>(k / 2 * 2) / static_cast<double>(half));
        const double pr = static_cast<double>(r) * freq;
        const double pc = static_cast<double>(c) * freq;
        const std::size_t t = (r * cols + c) * width;
        v[t + k] = (k % 2 == 0) ? std::sin(pr) : std::cos(pr);
        v[t + half + k] = (k % 2 == 0) ? std::sin(pc) : std::cos(pc);
      }
  return Tensor({rows * cols, width}, std::move(v));
}

}  // namespace

bool is_trainable(ParamGroup group, TuneScope scope) {
  switch (scope) {
    case TuneScope::All: return group != ParamGroup::Lora;
    case TuneScope::Encoder: return group == ParamGroup::EncoderBase;
    case TuneScope::Decoder: return group == ParamGroup::DecoderBase;
    case TuneScope::Lora: return group == ParamGroup::Lora;
  }
  return false;
}

TuneScope parse_tune_scope(const std::string& name) {
  if (name == "all") return TuneScope::All;
  if (name == "encoder") return TuneScope::Encoder;
  if (name == "decoder") return TuneScope::Decoder;
  if (name == "lora") return TuneScope::Lora;
  throw Error(ErrorKind::Config, "unknown tuning scope '" + name + "'");
}

std::string to_string(TuneScope scope) {
  switch (scope) {
    case TuneScope::All: return "all";
    case TuneScope::Encoder: return "encoder";
    case TuneScope::Decoder: return "decoder";
    case TuneScope::Lora: return "lora";
  }
  return "?";
}

std::vector<ParamRef> parameters(StudentNet& net) {
  return collect<StudentNet, ParamRef, LoraLinear, Linear>(net);
}

std::vector<ConstParamRef> parameters(const StudentNet& net) {
  return collect<const StudentNet, ConstParamRef, const LoraLinear, const Linear>(net);
}

std::vector<const LoraLinear*> lora_layers(const StudentNet& net) {
  std::vector<const LoraLinear*> out{&net.patch_embed};
  for (const auto& b : net.blocks) {
    out.push_back(&b.qkv);
    out.push_back(&b.proj);
    out.push_back(&b.mlp_in);
    out.push_back(&b.mlp_out);
  }
  return out;
}

std::size_t parameter_count(const StudentNet& net) {
  std::size_t n = 0;
  for (const auto& p : parameters(net)) n += p.tensor->numel();
  return n;
}

std::size_t lora_parameter_count(const StudentNet& net) {
  std::size_t n = 0;
  for (const auto& p : parameters(net))
    if (p.group == ParamGroup::Lora) n += p.tensor->numel();
  return n;
}

Tensor lora_forward(const LoraLinear& layer, const Tensor& x) {
  if (x.dim() != 2 || x.cols() != layer.in_features()) {
    throw Error(ErrorKind::Shape, "lora_forward: input " + shape_string(x.shape()) +
                                      " does not match layer input extent " +
                                      std::to_string(layer.in_features()));
  }
  if (layer.rank == 0) return add_rows(matmul(x, layer.base_weight), layer.base_bias);
  const Tensor delta = scale(matmul(layer.u, layer.v), layer.scaling());
  return add_rows(matmul(x, add(layer.base_weight, delta)), layer.base_bias);
}

Tensor linear_forward(const Linear& layer, const Tensor& x) {
  return add_rows(matmul(x, layer.weight), layer.bias);
}

StudentNet make_student(const ModelShape& shape, std::uint64_t seed) {
  if (shape.patch == 0 || shape.width % 4 != 0) {
    throw Error(ErrorKind::Config, "patch must be positive and width divisible by 4");
  }
  std::mt19937_64 rng(seed);
  StudentNet net;
  net.shape = shape;
  const std::size_t w = shape.width;
  net.patch_embed = make_lora_linear(rng, 3 * shape.patch * shape.patch, w);
  for (std::size_t b = 0; b < shape.blocks; ++b) {
    AttentionBlock blk;
    blk.qkv = make_lora_linear(rng, w, 3 * w);
    blk.proj = make_lora_linear(rng, w, w);
    blk.mlp_in = make_lora_linear(rng, w, shape.mlp_hidden);
    blk.mlp_out = make_lora_linear(rng, shape.mlp_hidden, w);
    net.blocks.push_back(std::move(blk));
  }
  net.decoder_hidden = make_linear(rng, w, shape.decoder_hidden);
  net.decoder_out = make_linear(rng, shape.decoder_hidden, shape.patch * shape.patch);
  return net;
}

StudentNet init_lora(const StudentNet& net, std::size_t rank, double lora_alpha, std::uint64_t seed) {
  if (rank == 0) throw Error(ErrorKind::Config, "LoRA rank must be at least 1");
  StudentNet out = net;
  std::mt19937_64 rng(seed);
  auto attach = [&](LoraLinear& l) {
    const std::size_t limit = std::min(l.in_features(), l.out_features()) / 2;
    if (rank > limit) {
      throw Error(ErrorKind::Config, "LoRA rank " + std::to_string(rank) + " exceeds " +
                                         std::to_string(limit) + " for a " +
                                         std::to_string(l.in_features()) + "x" +
                                         std::to_string(l.out_features()) + " layer");
    }
    l.rank = rank;
    l.lora_alpha = lora_alpha;
    l.u = normal_tensor(rng, {l.in_features(), rank}, 0.02);
    l.v = Tensor::zeros({rank, l.out_features()});
  };
  attach(out.patch_embed);
  for (auto& b : out.blocks) {
    attach(b.qkv);
    attach(b.proj);
    attach(b.mlp_in);
    attach(b.mlp_out);
  }
  return out;
}

Tensor student_forward(const StudentNet& net, const Tensor& image) {
  const auto& s = net.shape;
  if (image.dim() != 3 || image.shape()[2] != 3) {
    throw Error(ErrorKind::Shape, "expected an H x W x 3 image, got " + shape_string(image.shape()));
  }
  const std::size_t H = image.shape()[0], W = image.shape()[1], P = s.patch;
  if (H % P != 0 || W % P != 0) {
    throw Error(ErrorKind::Shape, "image " + std::to_string(H) + "x" + std::to_string(W) +
                                      " is not divisible by patch size " + std::to_string(P));
  }
  const std::size_t th = H / P, tw = W / P, n_tokens = th * tw;

  std::vector<std::size_t> patch_idx;
  patch_idx.reserve(H * W * 3);
  for (std::size_t ty = 0; ty < th; ++ty)
    for (std::size_t tx = 0; tx < tw; ++tx)
      for (std::size_t py = 0; py < P; ++py)
        for (std::size_t px = 0; px < P; ++px)
          for (std::size_t c = 0; c < 3; ++c)
            patch_idx.push_back(((ty * P + py) * W + tx * P + px) * 3 + c);
  const Tensor patches = reshape(gather(image, patch_idx), {n_tokens, 3 * P * P});

  Tensor x = lora_forward(net.patch_embed, patches);
  if (s.positional) x = add(x, positional_table(th, tw, s.width));

  const double inv_sqrt_w = 1.0 / std::sqrt(static_cast<double>(s.width));
  for (const auto& blk : net.blocks) {
    const Tensor qkv = lora_forward(blk.qkv, layer_norm_rows(x));
    const Tensor q = slice_cols(qkv, 0, s.width);
    const Tensor k = slice_cols(qkv, s.width, s.width);
    const Tensor v = slice_cols(qkv, 2 * s.width, s.width);
    const Tensor attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_w));
    x = add(x, lora_forward(blk.proj, matmul(attn, v)));
    const Tensor hidden = gelu(lora_forward(blk.mlp_in, layer_norm_rows(x)));
    x = add(x, lora_forward(blk.mlp_out, hidden));
  }

  const Tensor h = gelu(linear_forward(net.decoder_hidden, layer_norm_rows(x)));
  const Tensor patch_out = softplus(linear_forward(net.decoder_out, h));  // n_tokens x P*P

  std::vector<std::size_t> pixel_idx(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx) {
      const std::size_t token = (y / P) * tw + xx / P;
      pixel_idx[y * W + xx] = token * P * P + (y % P) * P + xx % P;
    }
  return reshape(gather(patch_out, pixel_idx), {H, W});
}

TeacherNet clone_to_teacher(const StudentNet& student, double ema_alpha) {
  TeacherNet t{student, ema_alpha};
  for (auto& p : parameters(t.net)) *p.tensor = p.tensor->detached();
  return t;
}

TeacherNet ema_update(const TeacherNet& teacher, const StudentNet& student) {
  TeacherNet out = teacher;
  auto tp = parameters(out.net);
  const auto sp = parameters(student);
  if (tp.size() != sp.size()) throw Error(ErrorKind::Shape, "teacher/student parameter count differs");
  const double a = teacher.ema_alpha;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i].name != sp[i].name || tp[i].tensor->shape() != sp[i].tensor->shape()) {
      throw Error(ErrorKind::Shape, "teacher/student structure differs at " + tp[i].name);
    }
    const auto& tv = tp[i].tensor->values();
    const auto& sv = sp[i].tensor->values();
    std::vector<double> nv(tv.size());
    for (std::size_t k = 0; k < tv.size(); ++k) nv[k] = a * tv[k] + (1.0 - a) * sv[k];
    *tp[i].tensor = Tensor(tp[i].tensor->shape(), std::move(nv));
  }
  return out;
}

BoundNet bind_trainable(const StudentNet& net, Tape& tape, TuneScope scope) {
  BoundNet bound{net, {}};
  for (auto& p : parameters(bound.net)) {
    if (!is_trainable(p.group, scope) || p.tensor->numel() == 0) continue;
    *p.tensor = tape.watch(*p.tensor);
    bound.trainable.emplace_back(p.name, *p.tensor);
  }
  return bound;
}

// ------------------------------------------------------------ checkpoints

namespace {

constexpr char kMagic[] = "WSTR1";

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw Error(ErrorKind::Data, "truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

using Entries = std::vector<std::pair<std::string, Tensor>>;

void append_net(Entries& out, const std::string& prefix, const StudentNet& net) {
  const auto& s = net.shape;
  out.emplace_back(prefix + "meta.shape",
                   Tensor({6}, {double(s.patch), double(s.width), double(s.blocks), double(s.mlp_hidden),
                                double(s.decoder_hidden), s.positional ? 1.0 : 0.0}));
  out.emplace_back(prefix + "meta.lora",
                   Tensor({2}, {double(net.patch_embed.rank), net.patch_embed.lora_alpha}));
  for (const auto& p : parameters(net)) out.emplace_back(prefix + p.name, *p.tensor);
}

StudentNet restore_net(const std::map<std::string, Tensor>& entries, const std::string& prefix) {
  auto get = [&](const std::string& name) -> const Tensor& {
    auto it = entries.find(prefix + name);
    if (it == entries.end()) throw Error(ErrorKind::Data, "checkpoint lacks entry " + prefix + name);
    return it->second;
  };
  const Tensor& meta = get("meta.shape");
  const Tensor& lora = get("meta.lora");
  if (meta.numel() != 6 || lora.numel() != 2) throw Error(ErrorKind::Data, "malformed checkpoint metadata");
  ModelShape shape{static_cast<std::size_t>(meta[0]), static_cast<std::size_t>(meta[1]),
                   static_cast<std::size_t>(meta[2]), static_cast<std::size_t>(meta[3]),
                   static_cast<std::size_t>(meta[4]), meta[5] != 0.0};
  StudentNet net = make_student(shape, 0);
  for (auto& p : parameters(net)) *p.tensor = get(p.name);
  const auto rank = static_cast<std::size_t>(lora[0]);
  auto set_lora = [&](LoraLinear& l) {
    l.rank = rank;
    l.lora_alpha = lora[1];
  };
  set_lora(net.patch_embed);
  for (auto& b : net.blocks) {
    set_lora(b.qkv);
    set_lora(b.proj);
    set_lora(b.mlp_in);
    set_lora(b.mlp_out);
  }
  // Shape validation against the declared architecture.
  const StudentNet reference = rank ? init_lora(make_student(shape, 0), rank, lora[1], 0) : make_student(shape, 0);
  const auto got = parameters(net);
  const auto want = parameters(reference);
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (got[i].tensor->shape() != want[i].tensor->shape()) {
      throw Error(ErrorKind::Data, "checkpoint entry " + prefix + got[i].name + " has shape " +
                                       shape_string(got[i].tensor->shape()) + ", expected " +
                                       shape_string(want[i].tensor->shape()));
    }
  }
  return net;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Entries entries;
  append_net(entries, "student.", ckpt.student);
  append_net(entries, "teacher.", ckpt.teacher.net);
  entries.emplace_back("teacher.meta.ema_alpha", Tensor({1}, {ckpt.teacher.ema_alpha}));

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot write checkpoint " + path.string());
  os.write(kMagic, 5);
  put_u64(os, entries.size());
  for (const auto& [name, t] : entries) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.dim()));
    for (auto e : t.shape()) put_u64(os, e);
    for (double x : t.values()) put_u64(os, std::bit_cast<std::uint64_t>(x));
  }
  if (!os) throw Error(ErrorKind::Io, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open checkpoint " + path.string());
  char magic[5];
  is.read(magic, 5);
  if (!is || std::string(magic, 5) != kMagic) throw Error(ErrorKind::Data, "not a WSTR1 checkpoint");
  const auto count = get_uint(is, 8);
  std::map<std::string, Tensor> entries;
  for (std::uint64_t e = 0; e < count; ++e) {
    std::string name(get_uint(is, 4), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rank = get_uint(is, 4);
    if (rank > 8) throw Error(ErrorKind::Data, "implausible tensor rank in checkpoint");
    Shape shape(rank);
    for (auto& d : shape) d = get_uint(is, 8);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = std::bit_cast<double>(get_uint(is, 8));
    entries.emplace(std::move(name), Tensor(std::move(shape), std::move(v)));
  }
  Checkpoint ckpt;
  ckpt.student = restore_net(entries, "student.");
  ckpt.teacher.net = restore_net(entries, "teacher.");
  auto it = entries.find("teacher.meta.ema_alpha");
  if (it == entries.end()) throw Error(ErrorKind::Data, "checkpoint lacks teacher.meta.ema_alpha");
  ckpt.teacher.ema_alpha = it->second[0];
  return ckpt;
}

}  // namespace westar
