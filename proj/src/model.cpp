#include "diffuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "diffuse/error.hpp"
#include "diffuse/parallel.hpp"
#include "diffuse/rng.hpp"

namespace diffuse {

using nlohmann::json;

std::string_view task_name(Task t) { return t == Task::Regression ? "alpha" : "model"; }

Task parse_task(std::string_view text) {
  if (text == "alpha" || text == "regression" || text == "1") return Task::Regression;
  if (text == "model" || text == "classification" || text == "2") return Task::Classification;
  throw ConfigError("unknown task '" + std::string(text) + "' (expected alpha or model)");
}

// ---- config ----

ModelConfig ModelConfig::for_task(Task t) {
  ModelConfig c;
  c.head_out = t == Task::Regression ? 1 : kNumModels;
  return c;
}

void ModelConfig::validate() const {
  if (conv1_out == 0 || conv2_out == 0 || ffn_hidden == 0 || encoder_blocks == 0)
    throw ConfigError("layer widths and block count must be positive");
  if (kernel != 3 || stride != 1) throw ConfigError("only kernel 3, stride 1 convolutions are supported");
  if (pool_kernel != 2) throw ConfigError("only pool kernel 2 is supported");
  if (heads == 0 || conv2_out % heads != 0)
    throw ConfigError("model width " + std::to_string(conv2_out) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  if (head_out != 1 && head_out != kNumModels) throw ConfigError("head_out must be 1 or 5");
  for (double p : {cnn_dropout, trans_dropout})
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probabilities must lie in [0, 1)");
  if (positional_encoding == PositionalEncoding::Sinusoidal && conv2_out % 2 != 0)
    throw ConfigError("sinusoidal encoding needs an even model width");
}

std::string ModelConfig::to_json() const {
  json j = {{"conv1_out", conv1_out},
            {"conv2_out", conv2_out},
            {"kernel", kernel},
            {"stride", stride},
            {"pool_kernel", pool_kernel},
            {"heads", heads},
            {"encoder_blocks", encoder_blocks},
            {"ffn_hidden", ffn_hidden},
            {"cnn_dropout", cnn_dropout},
            {"trans_dropout", trans_dropout},
            {"head_out", head_out},
            {"positional_encoding",
             positional_encoding == PositionalEncoding::Off ? "off" : "sinusoidal"}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("model config must be a JSON object");
  ModelConfig c;
  try {
    for (auto& [key, v] : j.items()) {
      if (key == "conv1_out") c.conv1_out = v.get<std::size_t>();
      else if (key == "conv2_out") c.conv2_out = v.get<std::size_t>();
      else if (key == "kernel") c.kernel = v.get<std::size_t>();
      else if (key == "stride") c.stride = v.get<std::size_t>();
      else if (key == "pool_kernel") c.pool_kernel = v.get<std::size_t>();
      else if (key == "heads") c.heads = v.get<std::size_t>();
      else if (key == "encoder_blocks") c.encoder_blocks = v.get<std::size_t>();
      else if (key == "ffn_hidden") c.ffn_hidden = v.get<std::size_t>();
      else if (key == "cnn_dropout") c.cnn_dropout = v.get<double>();
      else if (key == "trans_dropout") c.trans_dropout = v.get<double>();
      else if (key == "head_out") c.head_out = v.get<std::size_t>();
      else if (key == "positional_encoding") {
        const auto s = v.get<std::string>();
        if (s == "off") c.positional_encoding = PositionalEncoding::Off;
        else if (s == "sinusoidal") c.positional_encoding = PositionalEncoding::Sinusoidal;
        else throw ConfigError("positional_encoding must be off or sinusoidal");
      } else {
        throw ConfigError("unknown model config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig positional_encoding_ablation(ModelConfig config, bool on) {
  config.positional_encoding = on ? PositionalEncoding::Sinusoidal : PositionalEncoding::Off;
  return config;
}

// ---- parameters ----

std::vector<NamedTensor> ModelParams::named() const {
  std::vector<NamedTensor> out{{"conv1.weight", conv1_weight},
                               {"conv1.bias", conv1_bias},
                               {"conv2.weight", conv2_weight},
                               {"conv2.bias", conv2_bias}};
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockParams& b = blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "attn.wq", b.wq});
    out.push_back({p + "attn.wk", b.wk});
    out.push_back({p + "attn.wv", b.wv});
    out.push_back({p + "attn.wo", b.wo});
    out.push_back({p + "norm1.gamma", b.norm1_gamma});
    out.push_back({p + "norm1.beta", b.norm1_beta});
    out.push_back({p + "ffn1.weight", b.ffn1_weight});
    out.push_back({p + "ffn1.bias", b.ffn1_bias});
    out.push_back({p + "ffn2.weight", b.ffn2_weight});
    out.push_back({p + "ffn2.bias", b.ffn2_bias});
    out.push_back({p + "norm2.gamma", b.norm2_gamma});
    out.push_back({p + "norm2.beta", b.norm2_beta});
  }
  out.push_back({"head.weight", head_weight});
  out.push_back({"head.bias", head_bias});
  return out;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& nt : named()) out.push_back(nt.value);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors()) n += t.size();
  return n;
}

namespace {

Tensor copy_leaf(const Tensor& t) {
  return Tensor::from_data(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
}

struct Initializer {
  Rng rng;
  Tensor uniform(Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(numel(shape));
    for (double& x : v) x = to_float32(bound * (2.0 * rng.uniform() - 1.0));
    return Tensor::from_data(std::move(shape), std::move(v), true);
  }
};

std::vector<Tensor*> slots(ModelParams& p) {
  std::vector<Tensor*> s{&p.conv1_weight, &p.conv1_bias, &p.conv2_weight, &p.conv2_bias};
  for (BlockParams& b : p.blocks)
    for (Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.norm1_gamma, &b.norm1_beta, &b.ffn1_weight,
                      &b.ffn1_bias, &b.ffn2_weight, &b.ffn2_bias, &b.norm2_gamma, &b.norm2_beta})
      s.push_back(t);
  s.push_back(&p.head_weight);
  s.push_back(&p.head_bias);
  return s;
}

}  // namespace

ModelParams ModelParams::clone() const {
  ModelParams c = *this;
  for (Tensor* t : slots(c)) *t = copy_leaf(*t);
  return c;
}

std::uint64_t ModelParams::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& nt : named()) {
    h = fnv1a(std::as_bytes(std::span(nt.name)), h);
    h = fnv1a(std::as_bytes(nt.value.data()), h);
  }
  return h;
}

void ModelParams::zero_grad() {
  for (Tensor& t : tensors()) t.zero_grad();
}

void ModelParams::assign(const ModelParams& other) {
  auto dst = tensors();
  auto src = other.tensors();
  if (dst.size() != src.size()) throw ConfigError("assign: parameter sets differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].shape() != src[i].shape()) throw ShapeError("assign: parameter shapes differ");
    auto d = dst[i].mutable_data();
    std::copy(src[i].data().begin(), src[i].data().end(), d.begin());
  }
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  p.init_seed = seed;
  Initializer init{Rng(derive_seed(seed, "init"))};
  const std::size_t W = config.conv2_out, K = config.kernel, H = config.ffn_hidden;
  p.conv1_weight = init.uniform({config.conv1_out, 1, K}, K);
  p.conv1_bias = init.uniform({config.conv1_out}, K);
  p.conv2_weight = init.uniform({W, config.conv1_out, K}, config.conv1_out * K);
  p.conv2_bias = init.uniform({W}, config.conv1_out * K);
  for (std::size_t i = 0; i < config.encoder_blocks; ++i) {
    BlockParams b;
    b.wq = init.uniform({W, W}, W);
    b.wk = init.uniform({W, W}, W);
    b.wv = init.uniform({W, W}, W);
    b.wo = init.uniform({W, W}, W);
    b.norm1_gamma = Tensor::full({W}, 1.0, true);
    b.norm1_beta = Tensor::zeros({W}, true);
    b.ffn1_weight = init.uniform({H, W}, W);
    b.ffn1_bias = init.uniform({H}, W);
    b.ffn2_weight = init.uniform({W, H}, H);
    b.ffn2_bias = init.uniform({W}, H);
    b.norm2_gamma = Tensor::full({W}, 1.0, true);
    b.norm2_beta = Tensor::zeros({W}, true);
    p.blocks.push_back(std::move(b));
  }
  p.head_weight = init.uniform({config.head_out, W}, W);
  p.head_bias = init.uniform({config.head_out}, W);
  return p;
}

void quantize_params(ModelParams& params) {
  for (Tensor& t : params.tensors())
    for (double& v : t.mutable_data()) v = to_float32(v);
}

Checkpoint to_checkpoint(const ModelParams& params) {
  Checkpoint ck;
  ck.header.init_scheme = kInitScheme;
  ck.header.seed = params.init_seed;
  ck.params = params.named();
  return ck;
}

ModelParams from_checkpoint(const Checkpoint& ckpt, const ModelConfig& config) {
  ModelParams p = init_params(config, ckpt.header.seed);
  std::map<std::string, const Tensor*> byname;
  for (const auto& nt : ckpt.params) byname[nt.name] = &nt.value;
  auto want = p.named();
  if (byname.size() != want.size() || ckpt.params.size() != want.size())
    throw FormatError("checkpoint has " + std::to_string(ckpt.params.size()) +
                      " parameters, config expects " + std::to_string(want.size()));
  for (auto& nt : want) {
    auto it = byname.find(nt.name);
    if (it == byname.end()) throw FormatError("checkpoint is missing parameter " + nt.name);
    if (it->second->shape() != nt.value.shape())
      throw FormatError("parameter " + nt.name + " has shape " + to_string(it->second->shape()) +
                        ", config expects " + to_string(nt.value.shape()));
    auto d = nt.value.mutable_data();
    std::copy(it->second->data().begin(), it->second->data().end(), d.begin());
  }
  return p;
}

// ---- forward ----

Tensor sinusoidal_encoding(std::size_t seq_len, std::size_t width) {
  std::vector<double> v(seq_len * width);
  for (std::size_t pos = 0; pos < seq_len; ++pos)
    for (std::size_t i = 0; i < width; i += 2) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(i) / static_cast<double>(width));
      v[pos * width + i] = std::sin(angle);
      if (i + 1 < width) v[pos * width + i + 1] = std::cos(angle);
    }
  return Tensor::from_data({seq_len, width}, std::move(v));
}

Tensor make_batch(const std::vector<std::span<const double>>& series) {
  if (series.empty()) throw ShapeError("make_batch: no series");
  const std::size_t L = series.front().size();
  std::vector<double> v;
  v.reserve(series.size() * L);
  for (auto s : series) {
    if (s.size() != L) throw ShapeError("make_batch: series lengths differ");
    v.insert(v.end(), s.begin(), s.end());
  }
  return Tensor::from_data({series.size(), 1, L}, std::move(v));
}

namespace {

enum DropoutSite : std::uint64_t { kConv1Drop = 1, kConv2Drop = 2, kBlockDrop = 16 };

// Runs one layer, re-labelling numeric failures with the layer name.
template <typename F>
Tensor layer(const char* name, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(std::string("layer ") + name + ": " + e.what());
  }
}

Tensor add_broadcast_rows(const Tensor& x, const Tensor& rows) {
  // x [B,S,D] + rows [S,D]
  const std::size_t B = x.dim(0);
  std::vector<double> tiled;
  tiled.reserve(x.size());
  for (std::size_t b = 0; b < B; ++b) tiled.insert(tiled.end(), rows.data().begin(), rows.data().end());
  return add(x, Tensor::from_data(x.shape(), std::move(tiled)));
}

}  // namespace

Tensor conv_stage(const ModelParams& params, const Tensor& batch, bool training, std::uint64_t seed) {
  const ModelConfig& c = params.config;
  if (batch.rank() != 3 || batch.dim(1) != 1)
    throw ShapeError("model input must be [B,1,L], got " + to_string(batch.shape()));
  if (batch.dim(2) < kMinInputLength)
    throw DomainError("input too short: length " + std::to_string(batch.dim(2)) + " < " +
                      std::to_string(kMinInputLength));
  Tensor h = layer("conv1", [&] {
    return dropout(relu(conv1d(batch, params.conv1_weight, params.conv1_bias, 1)), c.cnn_dropout,
                   training, derive_seed(seed, kConv1Drop));
  });
  h = layer("conv2", [&] {
    return dropout(relu(conv1d(h, params.conv2_weight, params.conv2_bias, 1)), c.cnn_dropout,
                   training, derive_seed(seed, kConv2Drop));
  });
  h = layer("pool", [&] { return maxpool1d(h, c.pool_kernel, c.pool_kernel); });
  return swap_last_axes(h);
}

Tensor encoder_block(const Tensor& x, const BlockParams& b, const ModelConfig& c, bool training,
                     std::uint64_t seed) {
  if (x.rank() != 3 || x.dim(2) != c.conv2_out)
    throw ShapeError("encoder block expects [B,S," + std::to_string(c.conv2_out) + "], got " +
                     to_string(x.shape()));
  if (x.dim(1) == 0) throw ShapeError("encoder block: empty sequence");
  Tensor attn = multi_head_attention(x, b.wq, b.wk, b.wv, b.wo, c.heads);
  Tensor y = dropout(layer_norm(add(x, attn), b.norm1_gamma, b.norm1_beta), c.trans_dropout, training,
                     derive_seed(seed, 0));
  Tensor z = dropout(linear(relu(linear(y, b.ffn1_weight, b.ffn1_bias)), b.ffn2_weight, b.ffn2_bias),
                     c.trans_dropout, training, derive_seed(seed, 1));
  return layer_norm(add(y, z), b.norm2_gamma, b.norm2_beta);
}

Tensor encoder_stage(const ModelParams& params, const Tensor& seq, bool training, std::uint64_t seed) {
  const ModelConfig& c = params.config;
  Tensor h = seq;
  if (c.positional_encoding == PositionalEncoding::Sinusoidal)
    h = add_broadcast_rows(h, sinusoidal_encoding(h.dim(1), h.dim(2)));
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    const std::string name = "block" + std::to_string(i);
    h = layer(name.c_str(), [&] {
      return encoder_block(h, params.blocks[i], c, training, derive_seed(seed, kBlockDrop + i));
    });
  }
  h = layer("readout", [&] { return max_over_axis(h, 1); });
  return layer("head", [&] { return linear(h, params.head_weight, params.head_bias); });
}

Tensor forward(const ModelParams& params, const Tensor& batch, bool training, std::uint64_t seed) {
  return encoder_stage(params, conv_stage(params, batch, training, seed), training, seed);
}

// ---- inference ----

namespace {

void require_task(const ModelParams& p, Task t) {
  if (p.config.task() != t)
    throw ConfigError(std::string("this call needs a ") +
                      (t == Task::Regression ? "regression" : "classification") +
                      " model, checkpoint has head size " + std::to_string(p.config.head_out));
}

ModelPrediction from_logits(std::span<const double> logits) {
  ModelPrediction mp;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t c = 0; c < kNumModels; ++c) z += std::exp(logits[c] - m);
  std::size_t best = 0;
  for (std::size_t c = 0; c < kNumModels; ++c) {
    mp.probabilities[c] = std::exp(logits[c] - m) / z;
    if (logits[c] > logits[best]) best = c;
  }
  mp.label = model_from_code(static_cast<int>(best));
  return mp;
}

// Scores series grouped by length; calls emit(index, row-of-outputs).
template <typename Emit>
void batched_forward(const ModelParams& params, const std::vector<std::vector<double>>& series,
                     std::size_t batch_size, Emit&& emit) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < series.size(); ++i) by_length[series[i].size()].push_back(i);
  std::vector<std::vector<std::size_t>> chunks;
  for (auto& [len, ids] : by_length)
    for (std::size_t s = 0; s < ids.size(); s += batch_size)
      chunks.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(s),
                          ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), s + batch_size)));
  const std::size_t out = params.config.head_out;
  parallel_for(chunks.size(), [&](std::size_t k) {
    NoGradGuard ng;
    std::vector<std::span<const double>> views;
    for (std::size_t i : chunks[k]) views.emplace_back(series[i]);
    Tensor y = forward(params, make_batch(views), false, 0);
    for (std::size_t r = 0; r < chunks[k].size(); ++r)
      emit(chunks[k][r], y.data().subspan(r * out, out));
  });
}

}  // namespace

double predict_alpha(const ModelParams& params, std::span<const double> positions) {
  require_task(params, Task::Regression);
  NoGradGuard ng;
  return forward(params, make_batch({positions}), false, 0).item();
}

ModelPrediction predict_model(const ModelParams& params, std::span<const double> positions) {
  require_task(params, Task::Classification);
  NoGradGuard ng;
  Tensor y = forward(params, make_batch({positions}), false, 0);
  return from_logits(y.data());
}

std::vector<double> predict_alpha_many(const ModelParams& params,
                                       const std::vector<std::vector<double>>& series,
                                       std::size_t batch_size) {
  require_task(params, Task::Regression);
  std::vector<double> out(series.size());
  batched_forward(params, series, batch_size,
                  [&](std::size_t i, std::span<const double> row) { out[i] = row[0]; });
  return out;
}

std::vector<ModelPrediction> predict_model_many(const ModelParams& params,
                                                const std::vector<std::vector<double>>& series,
                                                std::size_t batch_size) {
  require_task(params, Task::Classification);
  std::vector<ModelPrediction> out(series.size());
  batched_forward(params, series, batch_size,
                  [&](std::size_t i, std::span<const double> row) { out[i] = from_logits(row); });
  return out;
}

// ---- persistence ----

std::filesystem::path card_path(const std::filesystem::path& checkpoint) {
  return checkpoint.string() + ".card.json";
}

void save_model(const std::filesystem::path& checkpoint, const ModelParams& params, const ModelCard& card) {
  save_checkpoint(checkpoint, to_checkpoint(params));
  json j = {{"format", "diffuse-model-card/1"},
            {"config", json::parse(card.config.to_json())},
            {"task", std::string(task_name(card.config.task()))},
            {"seed", card.seed},
            {"init_seed", params.init_seed},
            {"init_scheme", card.init_scheme},
            {"optimizer", card.optimizer},
            {"manifest_hash", card.manifest_hash},
            {"parameter_count", params.parameter_count()},
            {"length_bin", card.length_bin ? json::array({card.length_bin->first, card.length_bin->second})
                                           : json(nullptr)}};
  std::ofstream out(card_path(checkpoint));
  if (!out) throw IoError("cannot write " + card_path(checkpoint).string());
  out << j.dump(2) << "\n";
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  std::ifstream in(card_path(checkpoint));
  if (!in) throw IoError("missing model card " + card_path(checkpoint).string());
  std::stringstream ss;
  ss << in.rdbuf();
  LoadedModel lm;
  try {
    json j = json::parse(ss.str());
    lm.card.config = ModelConfig::from_json(j.at("config").dump());
    lm.card.seed = j.at("seed").get<std::uint64_t>();
    lm.card.init_scheme = j.at("init_scheme").get<std::string>();
    lm.card.optimizer = j.at("optimizer").get<std::string>();
    lm.card.manifest_hash = j.at("manifest_hash").get<std::string>();
    lm.card.parameter_count = j.at("parameter_count").get<std::size_t>();
    if (!j.at("length_bin").is_null())
      lm.card.length_bin = std::make_pair(j["length_bin"][0].get<std::size_t>(),
                                          j["length_bin"][1].get<std::size_t>());
  } catch (const json::exception& e) {
    throw FormatError("model card " + card_path(checkpoint).string() + ": " + e.what());
  }
  lm.params = from_checkpoint(load_checkpoint(checkpoint), lm.card.config);
  return lm;
}

}  // namespace diffuse
