#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "reto/attention.hpp"
#include "reto/error.hpp"
#include "reto/geometry_encoding.hpp"
#include "reto/linalg.hpp"
#include "reto/random.hpp"
#include "reto/rope.hpp"

namespace reto {

// Ablation variants: full model, v1 (no RoPE), v2 (no sin-cos), v3 (neither).
enum class Variant : std::uint8_t { Full = 0, NoRope = 1, NoSincos = 2, Neither = 3 };

inline bool uses_rope(Variant v) { return v == Variant::Full || v == Variant::NoSincos; }
inline bool uses_sincos(Variant v) { return v == Variant::Full || v == Variant::NoRope; }

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoRope: return "no_rope";
    case Variant::NoSincos: return "no_sincos";
    case Variant::Neither: return "neither";
  }
  return "unknown";
}

inline Variant parse_variant(std::string_view name) {
  if (name == "full") return Variant::Full;
  if (name == "no_rope" || name == "v1") return Variant::NoRope;
  if (name == "no_sincos" || name == "v2") return Variant::NoSincos;
  if (name == "neither" || name == "v3") return Variant::Neither;
  fail(ErrorCode::Configuration, "unknown variant '" + std::string(name) + "'");
}

struct ModelConfig {
  int num_blocks = 5;
  int num_heads = 8;
  int latent_dim = 256;
  int per_axis_dim = 84;  // 3m = 252 spectral features feed the encoder MLP
  double ffn_hidden_ratio = 2.0;
  int out_channels = 3;
  int encoder_hidden = 512;  // also the decoder hidden width
  double wavelength_base = 10000.0;
  double rope_base = 100.0;
  Variant variant = Variant::Full;

  int head_dim() const { return latent_dim / num_heads; }
  int ffn_hidden() const { return static_cast<int>(std::lround(ffn_hidden_ratio * latent_dim)); }
  int encoder_input() const { return uses_sincos(variant) ? 3 * per_axis_dim : 3; }

  void validate() const {
    require(num_blocks >= 1, ErrorCode::Configuration, "num_blocks must be >= 1");
    require(num_heads >= 1, ErrorCode::Configuration, "num_heads must be >= 1");
    require(latent_dim % num_heads == 0, ErrorCode::Configuration,
            "latent_dim " + std::to_string(latent_dim) + " not divisible by num_heads " +
                std::to_string(num_heads));
    require(head_dim() % 2 == 0, ErrorCode::Configuration, "latent_dim / num_heads must be even");
    require(out_channels >= 1, ErrorCode::Configuration, "out_channels must be >= 1");
    require(encoder_hidden >= 1, ErrorCode::Configuration, "encoder_hidden must be >= 1");
    require(ffn_hidden() >= 1, ErrorCode::Configuration, "ffn_hidden_ratio too small");
    require(per_axis_dim >= 2 && per_axis_dim % 2 == 0, ErrorCode::InvalidDimension,
            "per_axis_dim must be even and >= 2");
    require(wavelength_base > 1.0 && rope_base > 1.0, ErrorCode::InvalidBase, "frequency bases must exceed 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <std::floating_point T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;  // same shape as value

  Eigen::Index size() const { return value.size(); }
};

// Ordered, uniquely named parameters with a parallel gradient slot each.
template <std::floating_point T>
class ParameterStore {
 public:
  Parameter<T>& add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    require(!index_.contains(name), ErrorCode::Configuration, "duplicate parameter " + name);
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), Matrix<T>::Zero(rows, cols), Matrix<T>::Zero(rows, cols)});
    return params_.back();
  }

  Parameter<T>& at(std::string_view name) { return params_[lookup(name)]; }
  const Parameter<T>& at(std::string_view name) const { return params_[lookup(name)]; }
  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  const Matrix<T>& value(std::string_view name) const { return at(name).value; }
  Matrix<T>& grad(std::string_view name) { return at(name).grad; }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  std::size_t size() const { return params_.size(); }
  Eigen::Index scalar_count() const {
    Eigen::Index total = 0;
    for (const auto& p : params_) total += p.size();
    return total;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

  bool all_finite() const {
    for (const auto& p : params_) {
      if (!p.value.allFinite()) return false;
    }
    return true;
  }

  template <std::floating_point U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) {
      auto& q = out.add(p.name, p.value.rows(), p.value.cols());
      q.value = p.value.template cast<U>();
    }
    return out;
  }

 private:
  std::size_t lookup(std::string_view name) const {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) fail(ErrorCode::Configuration, "no parameter named " + std::string(name));
    return it->second;
  }

  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

namespace names {
inline std::string block(int t, std::string_view leaf) { return "block" + std::to_string(t) + "." + std::string(leaf); }
inline std::string head(int t, int h, std::string_view leaf) {
  return "block" + std::to_string(t) + ".head" + std::to_string(h) + "." + std::string(leaf);
}
}  // namespace names

// Shapes and names only; values are zero.
template <std::floating_point T>
ParameterStore<T> make_parameter_layout(const ModelConfig& config) {
  config.validate();
  const int d = config.latent_dim;
  const int hidden = config.encoder_hidden;
  ParameterStore<T> store;
  store.add("encoder.w1", config.encoder_input(), hidden);
  store.add("encoder.b1", 1, hidden);
  store.add("encoder.w2", hidden, d);
  store.add("encoder.b2", 1, d);
  for (int t = 0; t < config.num_blocks; ++t) {
    store.add(names::block(t, "ln1.gain"), 1, d);
    store.add(names::block(t, "ln1.bias"), 1, d);
    for (int h = 0; h < config.num_heads; ++h) {
      store.add(names::head(t, h, "wq"), d, config.head_dim());
      store.add(names::head(t, h, "wk"), d, config.head_dim());
      store.add(names::head(t, h, "wv"), d, config.head_dim());
    }
    store.add(names::block(t, "wo"), d, d);
    store.add(names::block(t, "ln2.gain"), 1, d);
    store.add(names::block(t, "ln2.bias"), 1, d);
    store.add(names::block(t, "ffn.w1"), d, config.ffn_hidden());
    store.add(names::block(t, "ffn.b1"), 1, config.ffn_hidden());
    store.add(names::block(t, "ffn.w2"), config.ffn_hidden(), d);
    store.add(names::block(t, "ffn.b2"), 1, d);
  }
  store.add("decoder.w1", d, hidden);
  store.add("decoder.b1", 1, hidden);
  store.add("decoder.w2", hidden, config.out_channels);
  store.add("decoder.b2", 1, config.out_channels);
  return store;
}

inline bool is_layer_norm_gain(std::string_view name) { return name.ends_with(".gain"); }
inline bool is_bias(std::string_view name) {
  return name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2");
}

// Weights ~ U[-sqrt(1/fan_in), +sqrt(1/fan_in)] with fan_in = rows; biases 0; gains 1.
template <std::floating_point T>
ParameterStore<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  auto store = make_parameter_layout<T>(config);
  Rng rng(seed);
  for (auto& p : store) {
    if (is_layer_norm_gain(p.name)) {
      p.value.setOnes();
    } else if (is_bias(p.name)) {
      p.value.setZero();
    } else {
      const double bound = std::sqrt(1.0 / static_cast<double>(p.value.rows()));
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        p.value.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
      }
    }
  }
  return store;
}

// Immutable derived tables for one configuration.
struct Architecture {
  ModelConfig config;
  FrequencyTable frequencies;
  RotaryConfig rotary;

  explicit Architecture(const ModelConfig& c)
      : config((c.validate(), c)),
        frequencies(build_frequency_table(c.per_axis_dim, c.wavelength_base)),
        rotary(build_rotary_config(c.head_dim(), c.rope_base)) {}
};

template <std::floating_point T>
struct EncoderCache {
  Matrix<T> input, pre, act;
};

template <std::floating_point T>
struct BlockCache {
  Matrix<T> input;
  LayerNormCache<T> ln1;
  Matrix<T> normed1;
  MhaCache<T> mha;
  Matrix<T> mid;
  LayerNormCache<T> ln2;
  Matrix<T> normed2;
  Matrix<T> ffn_pre, ffn_act;
};

template <std::floating_point T>
struct DecoderCache {
  Matrix<T> input, pre, act;
};

// Everything backward() needs from one forward pass.
template <std::floating_point T>
struct ForwardCache {
  bool recorded = false;
  std::optional<PhaseTable> phases;
  EncoderCache<T> encoder;
  std::vector<BlockCache<T>> blocks;
  DecoderCache<T> decoder;
};

// (block, head, first row, rows x N) for every attention row computed.
template <std::floating_point T>
using AttentionObserver =
    std::function<void(int block, int head, Eigen::Index first_row, const Matrix<T>& rows)>;

inline constexpr double kSuspiciousCoordinate = 10.0;

// Pointwise MLP: spectral (or raw) features -> encoder_hidden -> latent_dim.
template <std::floating_point T>
Matrix<T> encoder_forward(const Matrix<T>& coords, const ParameterStore<T>& params, const Architecture& arch,
                          std::type_identity_t<EncoderCache<T>>* cache = nullptr) {
  require(coords.cols() == 3, ErrorCode::Shape, "encoder expects N x 3 coordinates");
  if (coords.size() > 0 && coords.cwiseAbs().maxCoeff() > static_cast<T>(kSuspiciousCoordinate)) {
    warn("encoder input has |coordinate| > 10; coordinates are expected to be normalized");
  }
  Matrix<T> input = uses_sincos(arch.config.variant) ? encode_points(coords, arch.frequencies) : coords;
  Matrix<T> pre = affine(input, params.value("encoder.w1"), params.value("encoder.b1"));
  Matrix<T> act = gelu(pre);
  Matrix<T> latent = affine(act, params.value("encoder.w2"), params.value("encoder.b2"));
  if (cache != nullptr) *cache = {std::move(input), std::move(pre), std::move(act)};
  return latent;
}

template <std::floating_point T>
MhaWeights<T> mha_weights(const ParameterStore<T>& params, const ModelConfig& config, int block) {
  MhaWeights<T> w;
  for (int h = 0; h < config.num_heads; ++h) {
    w.wq.push_back(&params.value(names::head(block, h, "wq")));
    w.wk.push_back(&params.value(names::head(block, h, "wk")));
    w.wv.push_back(&params.value(names::head(block, h, "wv")));
  }
  w.wo = &params.value(names::block(block, "wo"));
  return w;
}

// Pre-norm residual block:
//   mid = x + MHA(LN1(x))     (RoPE on Q/K when the variant enables it)
//   out = mid + FFN(LN2(mid)) with FFN = GELU two-layer MLP.
template <std::floating_point T>
Matrix<T> physics_block_forward(const Matrix<T>& latent, const PhaseTable* phases, const ParameterStore<T>& params,
                                const Architecture& arch, int block, std::type_identity_t<BlockCache<T>>* cache = nullptr,
                                const AttentionObserver<T>& observer = {}) {
  require(block >= 0 && block < arch.config.num_blocks, ErrorCode::Bounds, "block index out of range");
  const PhaseTable* rope = uses_rope(arch.config.variant) ? phases : nullptr;
  LayerNormCache<T> ln1;
  Matrix<T> normed1 = layer_norm(latent, params.value(names::block(block, "ln1.gain")),
                                 params.value(names::block(block, "ln1.bias")), cache ? &ln1 : nullptr);
  AttentionRowSink<T> sink;
  if (observer) {
    sink = [&](int head, Eigen::Index first, const Matrix<T>& rows) { observer(block, head, first, rows); };
  }
  MhaCache<T> mha_cache;
  Matrix<T> mid = latent + multi_head_attention(normed1, mha_weights(params, arch.config, block), rope,
                                                cache ? &mha_cache : nullptr, sink);
  LayerNormCache<T> ln2;
  Matrix<T> normed2 = layer_norm(mid, params.value(names::block(block, "ln2.gain")),
                                 params.value(names::block(block, "ln2.bias")), cache ? &ln2 : nullptr);
  Matrix<T> ffn_pre = affine(normed2, params.value(names::block(block, "ffn.w1")),
                             params.value(names::block(block, "ffn.b1")));
  Matrix<T> ffn_act = gelu(ffn_pre);
  Matrix<T> out = mid + affine(ffn_act, params.value(names::block(block, "ffn.w2")),
                               params.value(names::block(block, "ffn.b2")));
  if (cache != nullptr) {
    cache->input = latent;
    cache->ln1 = std::move(ln1);
    cache->normed1 = std::move(normed1);
    cache->mha = std::move(mha_cache);
    cache->mid = std::move(mid);
    cache->ln2 = std::move(ln2);
    cache->normed2 = std::move(normed2);
    cache->ffn_pre = std::move(ffn_pre);
    cache->ffn_act = std::move(ffn_act);
  }
  return out;
}

// Convenience overload deriving the phase table from (normalized) coordinates.
template <std::floating_point T>
Matrix<T> physics_block_forward(const Matrix<T>& latent, const Matrix<T>& coords, const ParameterStore<T>& params,
                                const Architecture& arch, int block) {
  const PhaseTable phases = compute_phases(coords, arch.rotary);
  return physics_block_forward(latent, &phases, params, arch, block);
}

// Pointwise MLP latent_dim -> hidden -> out_channels, linear output.
template <std::floating_point T>
Matrix<T> decoder_forward(const Matrix<T>& latent, const ParameterStore<T>& params, const Architecture& arch,
                          std::type_identity_t<DecoderCache<T>>* cache = nullptr) {
  (void)arch;
  Matrix<T> pre = affine(latent, params.value("decoder.w1"), params.value("decoder.b1"));
  Matrix<T> act = gelu(pre);
  Matrix<T> out = affine(act, params.value("decoder.w2"), params.value("decoder.b2"));
  if (cache != nullptr) *cache = {latent, std::move(pre), std::move(act)};
  return out;
}

// Encoder -> T physics blocks -> decoder on already-normalized coordinates.
template <std::floating_point T>
Matrix<T> forward_normalized(const Matrix<T>& coords, const ParameterStore<T>& params, const Architecture& arch,
                             std::type_identity_t<ForwardCache<T>>* cache = nullptr, const AttentionObserver<T>& observer = {}) {
  require(coords.rows() >= 1, ErrorCode::EmptyDataset, "model forward needs at least one point");
  std::optional<PhaseTable> phases;
  if (uses_rope(arch.config.variant)) phases = compute_phases(coords, arch.rotary);
  const PhaseTable* phase_ptr = phases ? &*phases : nullptr;

  Matrix<T> x = encoder_forward(coords, params, arch, cache ? &cache->encoder : nullptr);
  if (cache != nullptr) cache->blocks.assign(static_cast<std::size_t>(arch.config.num_blocks), {});
  for (int t = 0; t < arch.config.num_blocks; ++t) {
    x = physics_block_forward(x, phase_ptr, params, arch, t,
                              cache ? &cache->blocks[static_cast<std::size_t>(t)] : nullptr, observer);
  }
  Matrix<T> out = decoder_forward(x, params, arch, cache ? &cache->decoder : nullptr);
  if (cache != nullptr) {
    cache->phases = std::move(phases);
    cache->recorded = true;
  }
  return out;
}

// Raw coordinates in, Z-scored field prediction out.
template <std::floating_point T>
Matrix<T> model_forward(const Matrix<T>& raw_coords, const ParameterStore<T>& params, const Architecture& arch,
                        const CoordinateNormalizer& normalizer, const AttentionObserver<T>& observer = {}) {
  require(raw_coords.rows() >= 1, ErrorCode::EmptyDataset, "model forward needs at least one point");
  return forward_normalized(normalizer.apply(raw_coords), params, arch, nullptr, observer);
}

// Collects full N x N attention matrices per (block, head). Analysis mode only.
template <std::floating_point T>
struct AttentionCapture {
  std::vector<std::vector<Matrix<T>>> weights;  // [block][head]

  AttentionObserver<T> observer(const ModelConfig& config, Eigen::Index points) {
    weights.assign(static_cast<std::size_t>(config.num_blocks),
                   std::vector<Matrix<T>>(static_cast<std::size_t>(config.num_heads), Matrix<T>(points, points)));
    return [this](int block, int head, Eigen::Index first, const Matrix<T>& rows) {
      weights[static_cast<std::size_t>(block)][static_cast<std::size_t>(head)].middleRows(first, rows.rows()) = rows;
    };
  }
};

// ---------------------------------------------------------------------------
// Reverse mode. Each *_backward consumes the matching cache, accumulates into
// the parameter gradients and returns the gradient w.r.t. its input.

template <std::floating_point T>
Matrix<T> affine_backward(const Matrix<T>& input, const Matrix<T>& weight, const Matrix<T>& upstream,
                          Matrix<T>& grad_weight, Matrix<T>& grad_bias) {
  grad_weight.noalias() += input.transpose() * upstream;
  grad_bias.row(0) += upstream.colwise().sum();
  Matrix<T> dx;
  dx.noalias() = upstream * weight.transpose();
  return dx;
}

template <std::floating_point T>
Matrix<T> decoder_backward(const DecoderCache<T>& cache, ParameterStore<T>& params, const Matrix<T>& upstream) {
  Matrix<T> d_act = affine_backward(cache.act, params.value("decoder.w2"), upstream, params.grad("decoder.w2"),
                                    params.grad("decoder.b2"));
  Matrix<T> d_pre = gelu_backward(cache.pre, d_act);
  return affine_backward(cache.input, params.value("decoder.w1"), d_pre, params.grad("decoder.w1"),
                         params.grad("decoder.b1"));
}

template <std::floating_point T>
Matrix<T> physics_block_backward(const BlockCache<T>& cache, const PhaseTable* phases, ParameterStore<T>& params,
                                 const Architecture& arch, int block, const Matrix<T>& upstream) {
  const PhaseTable* rope = uses_rope(arch.config.variant) ? phases : nullptr;
  // out = mid + FFN(LN2(mid))
  Matrix<T> d_act = affine_backward(cache.ffn_act, params.value(names::block(block, "ffn.w2")), upstream,
                                    params.grad(names::block(block, "ffn.w2")),
                                    params.grad(names::block(block, "ffn.b2")));
  Matrix<T> d_pre = gelu_backward(cache.ffn_pre, d_act);
  Matrix<T> d_normed2 = affine_backward(cache.normed2, params.value(names::block(block, "ffn.w1")), d_pre,
                                        params.grad(names::block(block, "ffn.w1")),
                                        params.grad(names::block(block, "ffn.b1")));
  Matrix<T> d_mid = upstream + layer_norm_backward(cache.ln2, params.value(names::block(block, "ln2.gain")),
                                                   d_normed2, params.grad(names::block(block, "ln2.gain")),
                                                   params.grad(names::block(block, "ln2.bias")));
  // mid = x + MHA(LN1(x))
  MhaGrads<T> grads;
  for (int h = 0; h < arch.config.num_heads; ++h) {
    grads.wq.push_back(&params.grad(names::head(block, h, "wq")));
    grads.wk.push_back(&params.grad(names::head(block, h, "wk")));
    grads.wv.push_back(&params.grad(names::head(block, h, "wv")));
  }
  grads.wo = &params.grad(names::block(block, "wo"));
  Matrix<T> d_normed1 = multi_head_attention_backward(cache.normed1, mha_weights(params, arch.config, block), rope,
                                                      cache.mha, d_mid, grads);
  return d_mid + layer_norm_backward(cache.ln1, params.value(names::block(block, "ln1.gain")), d_normed1,
                                     params.grad(names::block(block, "ln1.gain")),
                                     params.grad(names::block(block, "ln1.bias")));
}

template <std::floating_point T>
void encoder_backward(const EncoderCache<T>& cache, ParameterStore<T>& params, const Matrix<T>& upstream) {
  Matrix<T> d_act = affine_backward(cache.act, params.value("encoder.w2"), upstream, params.grad("encoder.w2"),
                                    params.grad("encoder.b2"));
  Matrix<T> d_pre = gelu_backward(cache.pre, d_act);
  params.grad("encoder.w1").noalias() += cache.input.transpose() * d_pre;
  params.grad("encoder.b1").row(0) += d_pre.colwise().sum();
}

// Accumulates dL/dtheta for every parameter given dL/dprediction.
template <std::floating_point T>
void backward(const ForwardCache<T>& cache, ParameterStore<T>& params, const Architecture& arch,
              const Matrix<T>& d_prediction) {
  require(cache.recorded, ErrorCode::Usage, "backward called without a recorded forward pass");
  const PhaseTable* phases = cache.phases ? &*cache.phases : nullptr;
  Matrix<T> grad = decoder_backward(cache.decoder, params, d_prediction);
  for (int t = arch.config.num_blocks - 1; t >= 0; --t) {
    grad = physics_block_backward(cache.blocks[static_cast<std::size_t>(t)], phases, params, arch, t, grad);
  }
  encoder_backward(cache.encoder, params, grad);
}

}  // namespace reto
