#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "westar/tensor.hpp"

namespace westar {

/// Frozen base projection plus a trainable low-rank update:
///   y = x (W + (alpha / r) U V) + b
struct LoraLinear {
  Tensor base_weight;  // d_in x d_out
  Tensor base_bias;    // d_out
  Tensor u;            // d_in x r
  Tensor v;            // r x d_out
  std::size_t rank = 0;
  double lora_alpha = 0.0;

  std::size_t in_features() const { return base_weight.shape()[0]; }
  std::size_t out_features() const { return base_weight.shape()[1]; }
  double scaling() const { return rank == 0 ? 0.0 : lora_alpha / static_cast<double>(rank); }
};

struct Linear {
  Tensor weight;  // d_in x d_out
  Tensor bias;    // d_out
};

struct AttentionBlock {
  LoraLinear qkv;
  LoraLinear proj;
  LoraLinear mlp_in;
  LoraLinear mlp_out;
};

struct ModelShape {
  std::size_t patch = 8;
  std::size_t width = 64;
  std::size_t blocks = 2;
  std::size_t mlp_hidden = 256;
  std::size_t decoder_hidden = 512;
  bool positional = true;
};

/// Patch-token depth network: patch embedding, pre-norm single-head
/// attention blocks, and a per-token two-layer decoder emitting one P x P
/// disparity patch per token through softplus.
struct StudentNet {
  ModelShape shape;
  LoraLinear patch_embed;
  std::vector<AttentionBlock> blocks;
  Linear decoder_hidden;
  Linear decoder_out;
};

struct TeacherNet {
  StudentNet net;
  double ema_alpha = 0.996;
};

enum class ParamGroup { EncoderBase, DecoderBase, Lora };

enum class TuneScope { All, Encoder, Decoder, Lora };

bool is_trainable(ParamGroup group, TuneScope scope);
TuneScope parse_tune_scope(const std::string& name);
std::string to_string(TuneScope scope);

struct ParamRef {
  std::string name;
  Tensor* tensor;
  ParamGroup group;
};

struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
  ParamGroup group;
};

std::vector<ParamRef> parameters(StudentNet& net);
std::vector<ConstParamRef> parameters(const StudentNet& net);
std::vector<const LoraLinear*> lora_layers(const StudentNet& net);

std::size_t parameter_count(const StudentNet& net);
std::size_t lora_parameter_count(const StudentNet& net);

Tensor lora_forward(const LoraLinear& layer, const Tensor& x);
Tensor linear_forward(const Linear& layer, const Tensor& x);

/// Randomly initialised base network without LoRA factors (rank 0).
StudentNet make_student(const ModelShape& shape, std::uint64_t seed);

/// Attaches fresh LoRA factors to every encoder projection: U ~ N(0, 0.02),
/// V = 0. Throws if rank exceeds half the smaller layer extent.
[[nodiscard]] StudentNet init_lora(const StudentNet& net, std::size_t rank, double lora_alpha, std::uint64_t seed);

/// image: H x W x 3, returns H x W strictly positive disparity.
Tensor student_forward(const StudentNet& net, const Tensor& image);

TeacherNet clone_to_teacher(const StudentNet& student, double ema_alpha = 0.996);

/// teacher <- alpha * teacher + (1 - alpha) * student, parameter-wise.
[[nodiscard]] TeacherNet ema_update(const TeacherNet& teacher, const StudentNet& student);

/// Binds the trainable parameters of `net` as leaves of `tape`. The returned
/// network shares frozen tensors with `net`.
struct BoundNet {
  StudentNet net;
  std::vector<std::pair<std::string, Tensor>> trainable;  // name -> tape leaf
};
BoundNet bind_trainable(const StudentNet& net, Tape& tape, TuneScope scope);

// ------------------------------------------------------------ checkpoints

struct Checkpoint {
  StudentNet student;
  TeacherNet teacher;
};

/// WSTR1 layout: magic "WSTR1", u64 entry count, then per entry
/// u32 name length, name bytes, u32 rank, u64 extents, little-endian f64 values.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace westar
