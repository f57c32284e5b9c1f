#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "reto/error.hpp"
#include "reto/model.hpp"
#include "reto/training.hpp"

namespace reto {

// Everything a command needs. Defaults match the library defaults.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string targets = "u,v,w";  // comma-separated channel names; sets out_channels

  // dataset generation
  int samples = 100;
  Eigen::Index points = 512;
  double radius_min = 0.6;
  double radius_max = 1.4;
  double outer_radius = 2.5;
  double free_stream = 1.0;
  std::string region = "shell";
  double train_ratio = 0.8;
  double val_ratio = 0.1;
  double test_ratio = 0.1;

  // paths
  std::string data_dir = "data";
  std::string out_dir = "runs/reto";
  std::string checkpoint;  // empty: <out_dir>/best.ckpt
  std::string resume;      // checkpoint carrying training state
  std::string input;
  std::string output;
  std::string split = "test";

  // evaluation / analysis
  int pdf_bins = 64;
  std::string entropy_resolutions;  // comma-separated point counts; empty: the sample's own size
  Eigen::Index entropy_cap = 10000;
  std::string entropy_blocks;       // comma-separated block indices; empty: last block
  bool pool_heads = true;
  int entropy_bins = 64;
  int analysis_sample = 0;          // index into the split
  Eigen::Index query_index = -1;    // export one attention row when >= 0

  int threads = 1;

  std::vector<std::string> target_channels() const;
  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(out_dir) / "best.ckpt" : std::filesystem::path(checkpoint);
  }
  std::filesystem::path manifest_path() const { return std::filesystem::path(data_dir) / "manifest.txt"; }
  void validate() const;
};

namespace detail {

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in{std::string(s)};
  while (std::getline(in, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    fail(ErrorCode::Configuration, "config key '" + std::string(key) + "': cannot parse '" + std::string(text) + "'");
  }
  return v;
}

}  // namespace detail

inline std::vector<std::string> RunConfig::target_channels() const { return detail::split_list(targets); }

// One schema row per key: typed accessor plus a one-line description.
struct ConfigKey {
  using Ref = std::variant<int*, Eigen::Index*, std::uint64_t*, double*, bool*, std::string*>;
  std::string name;
  std::string doc;
  std::function<Ref(RunConfig&)> ref;
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto add = [&](std::string name, std::string doc, auto member) {
      k.push_back({std::move(name), std::move(doc), [member](RunConfig& c) { return ConfigKey::Ref(member(c)); }});
    };
    add("num_blocks", "physics blocks T", [](RunConfig& c) { return &c.model.num_blocks; });
    add("num_heads", "attention heads H", [](RunConfig& c) { return &c.model.num_heads; });
    add("latent_dim", "latent width D", [](RunConfig& c) { return &c.model.latent_dim; });
    add("per_axis_dim", "spectral features per axis m (even)", [](RunConfig& c) { return &c.model.per_axis_dim; });
    add("ffn_hidden_ratio", "FFN hidden width / D", [](RunConfig& c) { return &c.model.ffn_hidden_ratio; });
    add("encoder_hidden", "encoder and decoder MLP hidden width", [](RunConfig& c) { return &c.model.encoder_hidden; });
    add("wavelength_base", "spectral encoder wavelength base", [](RunConfig& c) { return &c.model.wavelength_base; });
    add("rope_base", "rotary frequency base", [](RunConfig& c) { return &c.model.rope_base; });
    add("targets", "predicted channels, comma-separated (p,u,v,w)", [](RunConfig& c) { return &c.targets; });
    add("epochs", "training epochs", [](RunConfig& c) { return &c.train.epochs; });
    add("batch_size", "samples per optimizer step", [](RunConfig& c) { return &c.train.batch_size; });
    add("initial_lr", "Adam learning rate before decay", [](RunConfig& c) { return &c.train.initial_lr; });
    add("lr_decay_factor", "StepLR factor", [](RunConfig& c) { return &c.train.lr_decay_factor; });
    add("lr_step_epochs", "StepLR period in epochs", [](RunConfig& c) { return &c.train.lr_step_epochs; });
    add("adam_beta1", "Adam beta1", [](RunConfig& c) { return &c.train.adam_beta1; });
    add("adam_beta2", "Adam beta2", [](RunConfig& c) { return &c.train.adam_beta2; });
    add("adam_eps", "Adam epsilon", [](RunConfig& c) { return &c.train.adam_eps; });
    add("points_per_sample", "points drawn per sample per epoch", [](RunConfig& c) { return &c.train.points_per_sample; });
    add("eval_points", "evaluation subsample cap per sample", [](RunConfig& c) { return &c.train.eval_points; });
    add("resample_eval", "redraw the validation subsample every epoch", [](RunConfig& c) { return &c.train.resample_eval; });
    add("stop_below", "stop once validation L2 falls below this (0: never)", [](RunConfig& c) { return &c.train.stop_below; });
    add("seed", "top-level seed", [](RunConfig& c) { return &c.train.seed; });
    add("samples", "samples to generate", [](RunConfig& c) { return &c.samples; });
    add("points", "points per generated sample", [](RunConfig& c) { return &c.points; });
    add("radius_min", "smallest sphere radius", [](RunConfig& c) { return &c.radius_min; });
    add("radius_max", "largest sphere radius", [](RunConfig& c) { return &c.radius_max; });
    add("outer_radius", "outer radius of the sampled shell", [](RunConfig& c) { return &c.outer_radius; });
    add("free_stream", "free-stream speed", [](RunConfig& c) { return &c.free_stream; });
    add("region", "shell or surface", [](RunConfig& c) { return &c.region; });
    add("train_ratio", "train split fraction", [](RunConfig& c) { return &c.train_ratio; });
    add("val_ratio", "validation split fraction", [](RunConfig& c) { return &c.val_ratio; });
    add("test_ratio", "test split fraction", [](RunConfig& c) { return &c.test_ratio; });
    add("data_dir", "dataset directory (holds manifest.txt)", [](RunConfig& c) { return &c.data_dir; });
    add("out_dir", "output directory", [](RunConfig& c) { return &c.out_dir; });
    add("checkpoint", "checkpoint to read (default <out_dir>/best.ckpt)", [](RunConfig& c) { return &c.checkpoint; });
    add("resume", "checkpoint with training state to continue from", [](RunConfig& c) { return &c.resume; });
    add("input", "input sample file (predict, analyze-attention)", [](RunConfig& c) { return &c.input; });
    add("output", "output sample file (predict)", [](RunConfig& c) { return &c.output; });
    add("split", "split to evaluate: train, val or test", [](RunConfig& c) { return &c.split; });
    add("pdf_bins", "bins of the absolute-error PDF", [](RunConfig& c) { return &c.pdf_bins; });
    add("entropy_resolutions", "point counts for entropy analysis, comma-separated", [](RunConfig& c) { return &c.entropy_resolutions; });
    add("entropy_cap", "largest resolution allowed without --force", [](RunConfig& c) { return &c.entropy_cap; });
    add("entropy_blocks", "blocks to analyse, comma-separated (default: last)", [](RunConfig& c) { return &c.entropy_blocks; });
    add("pool_heads", "one entropy histogram per block instead of per head", [](RunConfig& c) { return &c.pool_heads; });
    add("entropy_bins", "bins of the entropy histogram", [](RunConfig& c) { return &c.entropy_bins; });
    add("analysis_sample", "sample index within the split for analysis", [](RunConfig& c) { return &c.analysis_sample; });
    add("query_index", "export the attention row of this point (-1: off)", [](RunConfig& c) { return &c.query_index; });
    add("threads", "worker threads (1 is bit-reproducible)", [](RunConfig& c) { return &c.threads; });
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_config_key(std::string_view name) {
  for (const auto& k : config_schema()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

inline const std::set<std::string>& model_config_keys() {
  static const std::set<std::string> keys{"num_blocks",     "num_heads",       "latent_dim", "per_axis_dim",
                                          "ffn_hidden_ratio", "encoder_hidden", "wavelength_base",
                                          "rope_base",      "targets",         "variant"};
  return keys;
}

// Tracks which keys the user set, so a checkpoint is only checked against explicit choices.
class ConfigBuilder {
 public:
  ConfigBuilder() = default;

  void set_json(std::string_view key, const nlohmann::json& value, std::string_view source) {
    if (key == "variant") {
      require(value.is_string(), ErrorCode::Configuration, where(source, key) + "expects a string");
      set_variant(value.get<std::string>());
      return;
    }
    const ConfigKey* k = lookup(key, source);
    std::visit(
        [&](auto* field) {
          using F = std::remove_pointer_t<decltype(field)>;
          if constexpr (std::is_same_v<F, std::string>) {
            require(value.is_string(), ErrorCode::Configuration, where(source, key) + "expects a string");
            *field = value.get<std::string>();
          } else if constexpr (std::is_same_v<F, bool>) {
            require(value.is_boolean(), ErrorCode::Configuration, where(source, key) + "expects true or false");
            *field = value.get<bool>();
          } else if constexpr (std::is_same_v<F, double>) {
            require(value.is_number(), ErrorCode::Configuration, where(source, key) + "expects a number");
            *field = value.get<double>();
          } else {
            require(value.is_number_integer(), ErrorCode::Configuration, where(source, key) + "expects an integer");
            if constexpr (std::is_same_v<F, std::uint64_t>) {
              require(value.is_number_unsigned() || value.get<std::int64_t>() >= 0, ErrorCode::Configuration,
                      where(source, key) + "expects a non-negative integer");
            }
            *field = value.get<F>();
          }
        },
        k->ref(config_));
    explicit_.insert(std::string(key));
  }

  // "key=value" from the command line; the value is read with the key's type.
  void set_text(std::string_view assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string_view::npos && eq > 0, ErrorCode::Configuration,
            "--set expects key=value, got '" + std::string(assignment) + "'");
    const auto key = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    if (key == "variant") {
      set_variant(std::string(text));
      return;
    }
    const ConfigKey* k = lookup(key, "--set");
    std::visit(
        [&](auto* field) {
          using F = std::remove_pointer_t<decltype(field)>;
          if constexpr (std::is_same_v<F, std::string>) {
            *field = std::string(text);
          } else if constexpr (std::is_same_v<F, bool>) {
            if (text == "true" || text == "1") {
              *field = true;
            } else if (text == "false" || text == "0") {
              *field = false;
            } else {
              fail(ErrorCode::Configuration, "--set " + std::string(key) + ": expected true or false");
            }
          } else {
            *field = detail::parse_number<F>(key, text);
          }
        },
        k->ref(config_));
    explicit_.insert(std::string(key));
  }

  void set_variant(const std::string& name) {
    config_.model.variant = parse_variant(name);
    explicit_.insert("variant");
  }

  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot open config file " + path.string());
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in, nullptr, true, true);  // comments allowed
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorCode::Configuration, path.string() + ": " + e.what());
    }
    require(doc.is_object(), ErrorCode::Configuration, path.string() + ": top level must be a flat object");
    for (const auto& [key, value] : doc.items()) {
      require(!value.is_object() && !value.is_array(), ErrorCode::Configuration,
              path.string() + ": key '" + key + "' must hold a scalar (the config is flat)");
      set_json(key, value, path.string());
    }
  }

  bool is_explicit(std::string_view key) const { return explicit_.contains(std::string(key)); }
  bool any_model_key_explicit() const {
    for (const auto& k : model_config_keys()) {
      if (explicit_.contains(k)) return true;
    }
    return false;
  }

  RunConfig build() const {
    RunConfig c = config_;
    c.model.out_channels = static_cast<int>(c.target_channels().size());
    c.validate();
    return c;
  }

 private:
  static std::string where(std::string_view source, std::string_view key) {
    return std::string(source) + ": key '" + std::string(key) + "' ";
  }

  static const ConfigKey* lookup(std::string_view key, std::string_view source) {
    const ConfigKey* k = find_config_key(key);
    if (k == nullptr) fail(ErrorCode::Configuration, std::string(source) + ": unknown config key '" + std::string(key) + "'");
    return k;
  }

  RunConfig config_;
  std::set<std::string> explicit_;
};

inline void RunConfig::validate() const {
  model.validate();
  train.validate();
  const auto ch = target_channels();
  require(!ch.empty(), ErrorCode::Configuration, "targets must name at least one channel");
  require(samples >= 1, ErrorCode::Configuration, "samples must be >= 1");
  require(points >= 1, ErrorCode::Configuration, "points must be >= 1");
  require(radius_min > 0 && radius_min <= radius_max, ErrorCode::Configuration, "need 0 < radius_min <= radius_max");
  require(outer_radius > radius_max, ErrorCode::Configuration, "outer_radius must exceed radius_max");
  require(free_stream > 0, ErrorCode::Configuration, "free_stream must be positive");
  parse_region(region);
  parse_split(split);
  require(pdf_bins >= 1 && entropy_bins >= 1, ErrorCode::Configuration, "bin counts must be >= 1");
  require(entropy_cap >= 2, ErrorCode::Configuration, "entropy_cap must be >= 2");
  require(threads >= 1, ErrorCode::Configuration, "threads must be >= 1");
  require(analysis_sample >= 0, ErrorCode::Configuration, "analysis_sample must be >= 0");
}

// The effective configuration, one key per line in schema order.
inline std::string format_config(const RunConfig& config) {
  RunConfig c = config;
  nlohmann::ordered_json out;
  out["variant"] = std::string(to_string(c.model.variant));
  for (const auto& k : config_schema()) {
    std::visit([&](auto* field) { out[k.name] = *field; }, k.ref(c));
  }
  return out.dump(2) + "\n";
}

inline std::string config_help() {
  RunConfig c;
  std::ostringstream os;
  os << "  variant = full  (full, no_rope, no_sincos, neither)\n";
  for (const auto& k : config_schema()) {
    std::visit([&](auto* field) { os << "  " << k.name << " = " << nlohmann::json(*field).dump(); }, k.ref(c));
    os << "  (" << k.doc << ")\n";
  }
  return os.str();
}

}  // namespace reto
