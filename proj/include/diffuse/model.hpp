#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffuse/checkpoint.hpp"
#include "diffuse/tensor.hpp"
#include "diffuse/trajectory.hpp"

namespace diffuse {

enum class Task { Regression, Classification };

std::string_view task_name(Task t);  // "alpha" | "model"
Task parse_task(std::string_view text);

enum class PositionalEncoding { Off, Sinusoidal };

inline constexpr std::size_t kMinInputLength = 10;

struct ModelConfig {
  std::size_t conv1_out = 20;
  std::size_t conv2_out = 64;  // model width
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pool_kernel = 2;
  std::size_t heads = 16;
  std::size_t encoder_blocks = 2;
  std::size_t ffn_hidden = 256;
  double cnn_dropout = 0.05;
  double trans_dropout = 0.0;
  std::size_t head_out = 1;
  PositionalEncoding positional_encoding = PositionalEncoding::Off;

  static ModelConfig for_task(Task t);
  Task task() const { return head_out == 1 ? Task::Regression : Task::Classification; }
  /// Throws ConfigError on any unsupported combination.
  void validate() const;
  std::string to_json() const;
  /// Unknown keys are rejected.
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

/// Returns `config` with sinusoidal position encodings switched on or off.
ModelConfig positional_encoding_ablation(ModelConfig config, bool on = true);

struct BlockParams {
  Tensor wq, wk, wv, wo;
  Tensor norm1_gamma, norm1_beta;
  Tensor ffn1_weight, ffn1_bias;
  Tensor ffn2_weight, ffn2_bias;
  Tensor norm2_gamma, norm2_beta;
};

struct ModelParams {
  ModelConfig config;
  std::uint64_t init_seed = 0;
  Tensor conv1_weight, conv1_bias;
  Tensor conv2_weight, conv2_bias;
  std::vector<BlockParams> blocks;
  Tensor head_weight, head_bias;

  /// Stable order; names like "block0.attn.wq".
  std::vector<NamedTensor> named() const;
  std::vector<Tensor> tensors() const;
  std::size_t parameter_count() const;
  /// Deep copy, fresh leaves.
  ModelParams clone() const;
  /// FNV-1a over every value in named() order.
  std::uint64_t fingerprint() const;
  void zero_grad();
  /// Copies values from `other` (same config) into this object's leaves.
  void assign(const ModelParams& other);
};

inline constexpr const char* kInitScheme = "uniform(-1/sqrt(fan_in),1/sqrt(fan_in));layernorm(1,0)";

/// Uniform(+-1/sqrt(fan_in)) weights and biases, unit/zero layer norms, rounded
/// to float32-representable values.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Rounds every parameter to the nearest float32 value so checkpoints round-trip exactly.
void quantize_params(ModelParams& params);

Checkpoint to_checkpoint(const ModelParams& params);
ModelParams from_checkpoint(const Checkpoint& ckpt, const ModelConfig& config);

/// Sinusoidal encodings [S,D]: even columns sin(p/10000^(2i/D)), odd columns cos.
Tensor sinusoidal_encoding(std::size_t seq_len, std::size_t width);

/// Packs equal-length position series into [B,1,L].
Tensor make_batch(const std::vector<std::span<const double>>& series);

/// conv -> relu -> dropout (x2) -> pool -> sequence-major. [B,1,L] -> [B,floor(L/2),width].
Tensor conv_stage(const ModelParams& params, const Tensor& batch, bool training, std::uint64_t seed);
/// Optional position encoding, encoder blocks, column max, head. [B,S,width] -> [B,head_out].
Tensor encoder_stage(const ModelParams& params, const Tensor& seq, bool training, std::uint64_t seed);
/// y = Drop(LN1(x + MHA(x))); z = Drop(FFN2(relu(FFN1(y)))); out = LN2(y + z).
Tensor encoder_block(const Tensor& x, const BlockParams& block, const ModelConfig& config,
                     bool training, std::uint64_t seed);
/// Full network. [B,1,L] -> [B,head_out]. L < 10 throws DomainError.
Tensor forward(const ModelParams& params, const Tensor& batch, bool training, std::uint64_t seed);

/// Raw regression output, not clipped.
double predict_alpha(const ModelParams& params, std::span<const double> positions);

struct ModelPrediction {
  DiffusionModel label = DiffusionModel::ATTM;
  std::array<double, kNumModels> probabilities{};
};
ModelPrediction predict_model(const ModelParams& params, std::span<const double> positions);

/// Batched inference over many series of mixed length. Series are grouped by
/// length and scored in chunks of `batch_size`; output order matches input.
std::vector<double> predict_alpha_many(const ModelParams& params,
                                       const std::vector<std::vector<double>>& series,
                                       std::size_t batch_size = 64);
std::vector<ModelPrediction> predict_model_many(const ModelParams& params,
                                                const std::vector<std::vector<double>>& series,
                                                std::size_t batch_size = 64);

/// Companion text written next to a checkpoint as `<ckpt>.card.json`.
struct ModelCard {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::string manifest_hash;
  std::optional<std::pair<std::size_t, std::size_t>> length_bin;
  std::string optimizer = "adam(beta1=0.9,beta2=0.999,eps=1e-8)";
  std::string init_scheme = kInitScheme;
  std::size_t parameter_count = 0;
};

std::filesystem::path card_path(const std::filesystem::path& checkpoint);
void save_model(const std::filesystem::path& checkpoint, const ModelParams& params, const ModelCard& card);
struct LoadedModel {
  ModelParams params;
  ModelCard card;
};
/// Reads the checkpoint and its card; the card supplies the config.
LoadedModel load_model(const std::filesystem::path& checkpoint);

}  // namespace diffuse
