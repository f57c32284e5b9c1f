#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "reto/binary_io.hpp"
#include "reto/data.hpp"
#include "reto/error.hpp"
#include "reto/geometry_encoding.hpp"
#include "reto/model.hpp"
#include "reto/optimizer.hpp"

namespace reto {

// Where an interrupted run stands; optional in the file.
struct TrainingState {
  int epoch = -1;  // last completed epoch
  double best_val = 0;
  int best_epoch = -1;
  OptimizerState<double> optimizer;
};

// A model plus everything needed to map raw inputs to physical outputs.
template <std::floating_point T>
struct TrainedModel {
  Architecture arch;
  ParameterStore<T> params;
  CoordinateNormalizer normalizer;
  ZScoreStats zscore;  // channel names are the prediction targets, in order

  const ModelConfig& config() const { return arch.config; }
};

// "RETO" | u32 version | config | u32 P | P x (str name, u64 rows, u64 cols, rows*cols f64) |
// 3 f64 centre, f64 scale | u32 C | C x (str, f64 mean, f64 std) |
// u8 has_state [i32 epoch, f64 best_val, i32 best_epoch, u64 t, P x (m, v as f64)] | u32 crc32
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_config(ByteWriter& w, const ModelConfig& c) {
  w.i32(c.num_blocks);
  w.i32(c.num_heads);
  w.i32(c.latent_dim);
  w.i32(c.per_axis_dim);
  w.f64(c.ffn_hidden_ratio);
  w.i32(c.out_channels);
  w.i32(c.encoder_hidden);
  w.f64(c.wavelength_base);
  w.f64(c.rope_base);
  w.u8(static_cast<std::uint8_t>(c.variant));
}

inline ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  c.num_blocks = r.i32();
  c.num_heads = r.i32();
  c.latent_dim = r.i32();
  c.per_axis_dim = r.i32();
  c.ffn_hidden_ratio = r.f64();
  c.out_channels = r.i32();
  c.encoder_hidden = r.i32();
  c.wavelength_base = r.f64();
  c.rope_base = r.f64();
  const auto at = r.offset();
  const auto v = r.u8();
  if (v > 3) r.corrupt(at, "unknown model variant " + std::to_string(v));
  c.variant = static_cast<Variant>(v);
  return c;
}

template <typename Derived>
void write_matrix(ByteWriter& w, const Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(static_cast<double>(m(i, j)));
  }
}

template <std::floating_point T>
void read_matrix(ByteReader& r, Matrix<T>& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<T>(r.f64());
  }
}

}  // namespace detail

template <std::floating_point T>
std::vector<std::uint8_t> encode_checkpoint(const TrainedModel<T>& model, const TrainingState* state = nullptr) {
  ByteWriter w;
  w.raw("RETO");
  w.u32(kCheckpointVersion);
  detail::write_config(w, model.config());
  w.u32(static_cast<std::uint32_t>(model.params.size()));
  for (const auto& p : model.params) {
    w.str(p.name);
    w.u64(static_cast<std::uint64_t>(p.value.rows()));
    w.u64(static_cast<std::uint64_t>(p.value.cols()));
    detail::write_matrix(w, p.value);
  }
  for (int i = 0; i < 3; ++i) w.f64(model.normalizer.center[i]);
  w.f64(model.normalizer.scale);
  w.u32(static_cast<std::uint32_t>(model.zscore.size()));
  for (std::size_t c = 0; c < model.zscore.size(); ++c) {
    w.str(model.zscore.channels[c]);
    w.f64(model.zscore.mean[c]);
    w.f64(model.zscore.stddev[c]);
  }
  w.u8(state != nullptr ? 1 : 0);
  if (state != nullptr) {
    require(state->optimizer.first_moment.size() == model.params.size(), ErrorCode::Shape,
            "optimizer state does not match the parameters");
    w.i32(state->epoch);
    w.f64(state->best_val);
    w.i32(state->best_epoch);
    w.u64(state->optimizer.step);
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      detail::write_matrix(w, state->optimizer.first_moment[i]);
      detail::write_matrix(w, state->optimizer.second_moment[i]);
    }
  }
  w.seal();
  return w.bytes();
}

template <std::floating_point T>
struct LoadedCheckpoint {
  TrainedModel<T> model;
  std::optional<TrainingState> state;
};

// Every stored parameter must match the layout the stored config implies.
template <std::floating_point T>
LoadedCheckpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes, std::string_view source = "checkpoint") {
  ByteReader r(bytes, source);
  if (bytes.size() < 8) r.corrupt(0, "file too short for header");
  if (r.raw(4) != "RETO") r.corrupt(0, "bad magic (expected RETO)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorCode::Version, std::string(source) + ": checkpoint version " + std::to_string(version) +
                                 ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  r.verify_trailing_checksum();
  const auto config_at = r.offset();
  const ModelConfig config = detail::read_config(r);
  try {
    config.validate();
  } catch (const Error& e) {
    r.corrupt(config_at, std::string("invalid model config: ") + e.what());
  }
  ParameterStore<T> params = make_parameter_layout<T>(config);
  const auto count = r.u32();
  if (count != params.size()) {
    fail(ErrorCode::CheckpointMismatch, std::string(source) + ": " + std::to_string(count) +
                                            " parameters stored, config implies " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto name = r.str();
    const auto rows = r.u64();
    const auto cols = r.u64();
    if (name != p.name || rows != static_cast<std::uint64_t>(p.value.rows()) ||
        cols != static_cast<std::uint64_t>(p.value.cols())) {
      fail(ErrorCode::CheckpointMismatch, std::string(source) + ": parameter '" + name + "' " + std::to_string(rows) +
                                              "x" + std::to_string(cols) + " does not match expected '" + p.name +
                                              "' " + std::to_string(p.value.rows()) + "x" +
                                              std::to_string(p.value.cols()));
    }
    detail::read_matrix(r, p.value);
  }
  CoordinateNormalizer normalizer;
  for (int i = 0; i < 3; ++i) normalizer.center[i] = r.f64();
  normalizer.scale = r.f64();
  ZScoreStats z;
  const auto channels = r.u32();
  for (std::uint32_t c = 0; c < channels; ++c) {
    z.channels.push_back(r.str());
    z.mean.push_back(r.f64());
    z.stddev.push_back(r.f64());
  }
  if (static_cast<int>(channels) != config.out_channels) {
    fail(ErrorCode::CheckpointMismatch, std::string(source) + ": " + std::to_string(channels) +
                                            " target statistics for " + std::to_string(config.out_channels) +
                                            " output channels");
  }
  LoadedCheckpoint<T> out{{Architecture(config), std::move(params), normalizer, std::move(z)}, std::nullopt};
  if (r.u8() != 0) {
    TrainingState s;
    s.epoch = r.i32();
    s.best_val = r.f64();
    s.best_epoch = r.i32();
    s.optimizer = OptimizerState<double>::for_parameters(out.model.params.template cast<double>());
    s.optimizer.step = r.u64();
    for (std::size_t i = 0; i < out.model.params.size(); ++i) {
      detail::read_matrix(r, s.optimizer.first_moment[i]);
      detail::read_matrix(r, s.optimizer.second_moment[i]);
    }
    out.state = std::move(s);
  }
  r.expect_end();
  require(out.model.params.all_finite(), ErrorCode::Format, std::string(source) + ": non-finite parameter values");
  return out;
}

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& path, const TrainedModel<T>& model,
                     const TrainingState* state = nullptr) {
  write_file_atomic(path, encode_checkpoint(model, state));
}

template <std::floating_point T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file_bytes(path), path.string());
}

// A checkpoint can only serve a run whose model config matches it exactly.
inline void require_matching_config(const ModelConfig& stored, const ModelConfig& requested, std::string_view what) {
  if (stored == requested) return;
  auto describe = [](const ModelConfig& c) {
    return "T=" + std::to_string(c.num_blocks) + " H=" + std::to_string(c.num_heads) +
           " D=" + std::to_string(c.latent_dim) + " m=" + std::to_string(c.per_axis_dim) +
           " hidden=" + std::to_string(c.encoder_hidden) + " out=" + std::to_string(c.out_channels) +
           " variant=" + std::string(to_string(c.variant));
  };
  fail(ErrorCode::CheckpointMismatch,
       std::string(what) + ": checkpoint has " + describe(stored) + ", config requests " + describe(requested));
}

}  // namespace reto
