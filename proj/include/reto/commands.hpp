#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "reto/checkpoint.hpp"
#include "reto/config.hpp"
#include "reto/data.hpp"
#include "reto/metrics.hpp"
#include "reto/parallel.hpp"
#include "reto/training.hpp"

namespace reto {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitInput = 2,
  kExitNumerical = 3,
  kExitMismatch = 4,
  kExitResource = 5,
};

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::NonFiniteGradient: return kExitNumerical;
    case ErrorCode::CheckpointMismatch: return kExitMismatch;
    case ErrorCode::ResourceGuard: return kExitResource;
    default: return kExitInput;
  }
}

// Settings of one invocation: merged config plus the command-line switches.
struct CommandOptions {
  RunConfig config;
  ConfigBuilder keys;  // remembers which keys were set explicitly
  bool force = false;
  bool per_channel = false;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

// Training runs in single precision; gradient checks use double.
using Real = float;

namespace detail {

namespace fs = std::filesystem;

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail(ErrorCode::Io, "cannot create directory " + dir.string());
}

inline void echo_config(const fs::path& dir, const RunConfig& c) {
  write_text_atomic(dir / "run_config.json", format_config(c));
}

inline std::string sample_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04d", i);
  return buf;
}

// Explicitly requested model settings must agree with what the checkpoint holds.
inline void check_checkpoint(const TrainedModel<Real>& model, const CommandOptions& o, std::string_view what) {
  const ModelConfig& stored = model.config();
  ModelConfig requested = stored;
  const ModelConfig& c = o.config.model;
  const auto& k = o.keys;
  if (k.is_explicit("num_blocks")) requested.num_blocks = c.num_blocks;
  if (k.is_explicit("num_heads")) requested.num_heads = c.num_heads;
  if (k.is_explicit("latent_dim")) requested.latent_dim = c.latent_dim;
  if (k.is_explicit("per_axis_dim")) requested.per_axis_dim = c.per_axis_dim;
  if (k.is_explicit("ffn_hidden_ratio")) requested.ffn_hidden_ratio = c.ffn_hidden_ratio;
  if (k.is_explicit("encoder_hidden")) requested.encoder_hidden = c.encoder_hidden;
  if (k.is_explicit("wavelength_base")) requested.wavelength_base = c.wavelength_base;
  if (k.is_explicit("rope_base")) requested.rope_base = c.rope_base;
  if (k.is_explicit("variant")) requested.variant = c.variant;
  if (k.is_explicit("targets")) requested.out_channels = c.out_channels;
  require_matching_config(stored, requested, what);
  if (k.is_explicit("targets") && o.config.target_channels() != model.zscore.channels) {
    std::string have;
    for (const auto& ch : model.zscore.channels) have += (have.empty() ? "" : ",") + ch;
    fail(ErrorCode::CheckpointMismatch, std::string(what) + ": checkpoint predicts " + have + ", config requests " +
                                            o.config.targets);
  }
}

inline TrainedModel<Real> load_model(const fs::path& path, const CommandOptions& o, std::string_view what) {
  require(fs::exists(path), ErrorCode::Io, std::string(what) + ": checkpoint " + path.string() + " not found");
  auto loaded = load_checkpoint<Real>(path);
  check_checkpoint(loaded.model, o, what);
  return std::move(loaded.model);
}

inline std::pair<DatasetManifest, fs::path> open_dataset(const RunConfig& c) {
  const auto path = c.manifest_path();
  require(fs::exists(path), ErrorCode::Io, "no dataset manifest at " + path.string() + " (run gen-data first)");
  return {read_manifest(path), path};
}

inline std::string join(const std::vector<std::string>& v, const char* sep = ",") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

struct TrainOutcome {
  TrainedModel<Real> best;  // best-validation parameters
  FitResult<Real> fit;
};

// Shared by train and ablate. Writes best.ckpt, last.ckpt, train_log.tsv and run_config.json into `dir`.
inline TrainOutcome train_into(const fs::path& dir, const RunConfig& c, const CommandOptions& o) {
  const auto [manifest, manifest_path] = open_dataset(c);
  const auto train = load_split(manifest_path, manifest, Split::Train);
  const auto val = load_split(manifest_path, manifest, Split::Val);
  require(!train.empty(), ErrorCode::EmptyDataset, "dataset has no training samples");
  require(!val.empty(), ErrorCode::EmptyDataset, "dataset has no validation samples");
  ensure_dir(dir);
  echo_config(dir, c);

  std::optional<LoadedCheckpoint<Real>> resumed;
  if (!c.resume.empty()) {
    require(fs::exists(c.resume), ErrorCode::Io, "resume checkpoint " + c.resume + " not found");
    resumed = load_checkpoint<Real>(c.resume);
    check_checkpoint(resumed->model, o, "resume");
    require(resumed->state.has_value(), ErrorCode::Usage, c.resume + " carries no training state (use last.ckpt)");
  }
  TrainedModel<Real> model = resumed ? std::move(resumed->model)
                                     : prepare_model<Real>(c.model, train, c.target_channels(), c.train.seed);
  const TrainingState* state = resumed ? &*resumed->state : nullptr;
  const fs::path log_path = dir / "train_log.tsv";
  // a resumed run continues the existing log
  const auto mode = state ? std::ios::out | std::ios::app : std::ios::out | std::ios::trunc;

  std::ofstream log(log_path, mode);
  require(static_cast<bool>(log), ErrorCode::Io, "cannot write " + log_path.string());
  if (!state) log << log_header(model.zscore.channels);
  log.flush();

  auto& out = *o.out;
  TrainedModel<Real> best = model;
  FitHooks<Real> hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    log << format_log_row(r);
    log.flush();
    out << "epoch " << r.epoch << "  lr " << format_number(r.lr) << "  train_mse " << format_number(r.train_mse)
        << "  val_l2 " << format_number(r.val_overall) << "  (" << std::fixed << std::setprecision(1) << r.seconds
        << std::defaultfloat << " s)\n";
    out.flush();
  };
  hooks.on_best = [&](const TrainedModel<Real>& m, int, double) {
    best.params = m.params;
    save_checkpoint(dir / "best.ckpt", best);
  };
  hooks.on_state = [&](const TrainedModel<Real>& m, const TrainingState& s) { save_checkpoint(dir / "last.ckpt", m, &s); };

  auto result = fit(model, train, val, c.train, hooks, state);
  if (!result.best_params && !fs::exists(dir / "best.ckpt")) save_checkpoint(dir / "best.ckpt", best);
  if (!result.best_params && fs::exists(dir / "best.ckpt")) best = load_checkpoint<Real>(dir / "best.ckpt").model;
  out << "best validation L2 " << format_number(result.best_val) << " at epoch " << result.best_epoch
      << (result.stopped_early ? " (stopped early)" : "") << "\n";
  return {std::move(best), std::move(result)};
}

// Per-sample relative L2 on physical fields, PDF of |error| on Z-scored fields, quartiles.
struct EvalReport {
  EvaluationResult result;
  std::string report;       // metrics.txt
  std::string samples_csv;  // sample_errors.csv
  std::string pdf_csv;      // error_pdf.csv
  std::string channels_csv; // per_channel.csv
};

inline EvalReport evaluate_split(const TrainedModel<Real>& model, const RunConfig& c, Split split) {
  const auto [manifest, manifest_path] = open_dataset(c);
  const auto recs = load_split(manifest_path, manifest, split);
  require(!recs.empty(), ErrorCode::EmptyDataset, std::string("split '") + std::string(to_string(split)) + "' is empty");
  const auto prepared = prepare_samples<Real>(recs, model);
  EvalReport r;
  r.result = evaluate<Real>(model, prepared, c.train.eval_points, derive_seed(c.train.seed, "evaluation"), true);
  const auto& e = r.result;

  std::vector<SampleError> errs;
  std::vector<double> abs_all;
  for (const auto& s : e.samples) {
    errs.push_back({s.sample_id, s.overall});
    abs_all.insert(abs_all.end(), s.abs_errors.begin(), s.abs_errors.end());
  }
  const auto dist = per_sample_error_distribution(errs);

  std::ostringstream os;
  os << "# reto evaluation report\n";
  os << "split\t" << to_string(split) << "\n";
  os << "samples\t" << e.samples.size() << "\n";
  os << "eval_points\t" << c.train.eval_points << "\n";
  os << "\n# mean relative L2 per channel\n";
  for (std::size_t i = 0; i < e.channels.size(); ++i) os << e.channels[i] << "\t" << format_number(e.mean_per_channel[i]) << "\n";
  os << "\n# mean relative L2 per channel group\n";
  for (std::size_t i = 0; i < e.groups.size(); ++i) os << e.groups[i].name << "\t" << format_number(e.mean_per_group[i]) << "\n";
  os << "\n# mean relative L2 over all target channels\noverall\t" << format_number(e.mean_overall) << "\n";
  const auto& q = dist.summary;
  os << "\n# per-sample relative L2 quartiles\n";
  os << "min\t" << format_number(q.min) << "\nq1\t" << format_number(q.q1) << "\nmedian\t" << format_number(q.median)
     << "\nq3\t" << format_number(q.q3) << "\nmax\t" << format_number(q.max) << "\n";
  os << "\n# best and worst samples\n";
  os << "best\t" << join(dist.best(3)) << "\nworst\t" << join(dist.worst(3)) << "\n";
  r.report = os.str();
  r.samples_csv = sample_errors_csv(dist.ranked);
  r.pdf_csv = histogram_csv(abs_error_pdf(abs_all, static_cast<std::size_t>(c.pdf_bins)));

  std::ostringstream ch;
  ch << "sample_id";
  for (const auto& name : e.channels) ch << "," << name;
  for (const auto& g : e.groups) ch << "," << g.name;
  ch << "\n";
  for (const auto& s : e.samples) {
    ch << s.sample_id;
    for (double v : s.per_channel) ch << "," << format_number(v);
    for (double v : s.per_group) ch << "," << format_number(v);
    ch << "\n";
  }
  r.channels_csv = ch.str();
  return r;
}

inline void write_eval(const fs::path& dir, const EvalReport& r) {
  ensure_dir(dir);
  write_text_atomic(dir / "metrics.txt", r.report);
  write_text_atomic(dir / "sample_errors.csv", r.samples_csv);
  write_text_atomic(dir / "error_pdf.csv", r.pdf_csv);
  write_text_atomic(dir / "per_channel.csv", r.channels_csv);
}

inline double group_value(const EvaluationResult& e, std::string_view name) {
  for (std::size_t i = 0; i < e.groups.size(); ++i) {
    if (e.groups[i].name == name) return e.mean_per_group[i];
  }
  return std::numeric_limits<double>::quiet_NaN();
}

inline std::vector<Eigen::Index> parse_index_list(const std::string& text, std::string_view key) {
  std::vector<Eigen::Index> out;
  for (const auto& item : split_list(text)) out.push_back(parse_number<Eigen::Index>(key, item));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline void cmd_gen_data(const CommandOptions& o) {
  const auto& c = o.config;
  const std::filesystem::path dir(c.data_dir);
  detail::ensure_dir(dir);
  Rng radii(derive_seed(c.train.seed, "data"));
  std::vector<std::string> ids;
  for (int i = 0; i < c.samples; ++i) {
    FlowSampleSpec spec;
    spec.radius = radii.uniform(c.radius_min, c.radius_max);
    spec.points = c.points;
    spec.region = parse_region(c.region);
    spec.outer_radius = c.outer_radius;
    spec.free_stream = c.free_stream;
    const auto id = detail::sample_name(i);
    save_sample(dir / (id + ".rsmp"),
                gen_potential_flow_sphere(spec, derive_seed(c.train.seed, "data", static_cast<std::uint64_t>(i)), id));
    ids.push_back(id);
  }
  const auto manifest = make_splits(ids, {c.train_ratio, c.val_ratio, c.test_ratio}, derive_seed(c.train.seed, "split"));
  write_manifest(c.manifest_path(), manifest);
  detail::echo_config(dir, c);
  *o.out << "generated " << ids.size() << " samples in " << dir.string() << ": " << manifest.count(Split::Train)
         << " train / " << manifest.count(Split::Val) << " val / " << manifest.count(Split::Test) << " test\n";
}

inline void cmd_train(const CommandOptions& o) {
  *o.out << "training variant " << to_string(o.config.model.variant) << " -> " << o.config.out_dir << "\n";
  detail::train_into(o.config.out_dir, o.config, o);
}

inline void cmd_eval(const CommandOptions& o) {
  const auto& c = o.config;
  const auto model = detail::load_model(c.checkpoint_path(), o, "eval");
  const auto r = detail::evaluate_split(model, c, parse_split(c.split));
  detail::write_eval(c.out_dir, r);
  auto& out = *o.out;
  out << "evaluated " << r.result.samples.size() << " " << c.split << " samples: overall relative L2 "
      << format_number(r.result.mean_overall) << "\n";
  if (o.per_channel) {
    out << "group\trelative_l2\n";
    for (std::size_t i = 0; i < r.result.groups.size(); ++i) {
      out << r.result.groups[i].name << "\t" << format_number(r.result.mean_per_group[i]) << "\n";
    }
    out << "channel\trelative_l2\n";
    for (std::size_t i = 0; i < r.result.channels.size(); ++i) {
      out << r.result.channels[i] << "\t" << format_number(r.result.mean_per_channel[i]) << "\n";
    }
  }
  out << "report written to " << (std::filesystem::path(c.out_dir) / "metrics.txt").string() << "\n";
}

inline void cmd_predict(const CommandOptions& o) {
  const auto& c = o.config;
  require(!c.input.empty(), ErrorCode::Configuration, "predict needs an input sample (input=...)");
  const auto model = detail::load_model(c.checkpoint_path(), o, "predict");
  const auto rec = load_sample(c.input);
  require(rec.points() >= 1, ErrorCode::EmptyDataset, c.input + " has no coordinates");
  const Matrix<Real> coords = model.normalizer.apply(Matrix<Real>(rec.coords.cast<Real>()));
  const Matrix<double> pred = predict_physical(model, coords);
  SampleRecord out_rec;
  out_rec.sample_id = rec.sample_id;
  out_rec.coords = rec.coords;
  out_rec.fields = pred.cast<float>();
  out_rec.channels = model.zscore.channels;
  out_rec.metadata = rec.metadata;
  out_rec.metadata["predicted_by"] = c.checkpoint_path().filename().string();
  const std::filesystem::path path =
      c.output.empty() ? std::filesystem::path(c.out_dir) / (rec.sample_id + "_pred.rsmp") : std::filesystem::path(c.output);
  if (path.has_parent_path()) detail::ensure_dir(path.parent_path());
  save_sample(path, out_rec);
  *o.out << "predicted " << out_rec.points() << " points x " << out_rec.channel_count() << " channels -> "
         << path.string() << "\n";
}

struct AblationRow {
  Variant variant = Variant::Full;
  std::string label;
  bool ok = false;
  double pressure = std::numeric_limits<double>::quiet_NaN();
  double velocity = std::numeric_limits<double>::quiet_NaN();
  double overall = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = -1;
  std::string message;
};

inline std::string format_ablation(const std::vector<AblationRow>& rows) {
  auto num = [](double v) { return std::isnan(v) ? std::string("-") : format_number(v); };
  std::ostringstream os;
  os << "variant\trow\tpressure_l2\tvelocity_l2\toverall_l2\tbest_epoch\tstatus\n";
  for (const auto& r : rows) {
    os << to_string(r.variant) << "\t" << r.label << "\t" << num(r.pressure) << "\t" << num(r.velocity) << "\t"
       << num(r.overall) << "\t" << r.best_epoch << "\t" << (r.ok ? "ok" : "failed: " + r.message) << "\n";
  }
  return os.str();
}

// All four variants, same seed and budget; one failing variant does not stop the sweep.
inline std::vector<AblationRow> cmd_ablate(const CommandOptions& o) {
  const std::array<std::pair<Variant, const char*>, 4> variants{
      {{Variant::Full, "RETO"}, {Variant::NoRope, "v1"}, {Variant::NoSincos, "v2"}, {Variant::Neither, "v3"}}};
  const std::filesystem::path root(o.config.out_dir);
  detail::ensure_dir(root);
  std::vector<AblationRow> rows;
  for (const auto& [variant, label] : variants) {
    AblationRow row;
    row.variant = variant;
    row.label = label;
    RunConfig c = o.config;
    c.model.variant = variant;
    c.resume.clear();
    const auto dir = root / std::string(to_string(variant));
    *o.out << "== " << to_string(variant) << " (" << label << ")\n";
    try {
      const auto trained = detail::train_into(dir, c, o);
      const auto r = detail::evaluate_split(trained.best, c, parse_split(c.split));
      detail::write_eval(dir, r);
      row.ok = true;
      row.pressure = detail::group_value(r.result, "pressure");
      row.velocity = detail::group_value(r.result, "velocity");
      row.overall = r.result.mean_overall;
      row.best_epoch = trained.fit.best_epoch;
    } catch (const Error& e) {
      row.message = e.what();
      *o.err << "variant " << to_string(variant) << " failed: " << e.what() << "\n";
    }
    rows.push_back(row);
    write_text_atomic(root / "ablation.tsv", format_ablation(rows));
  }
  *o.out << format_ablation(rows);
  return rows;
}

// Entropy tables per (block, head, resolution); larger resolutions regenerate the
// sample from its generator metadata.
inline void cmd_analyze_attention(const CommandOptions& o) {
  const auto& c = o.config;
  auto resolutions = detail::parse_index_list(c.entropy_resolutions, "entropy_resolutions");
  for (auto n : resolutions) require(n >= 2, ErrorCode::Configuration, "entropy resolutions must be >= 2");
  for (auto n : resolutions) {
    if (n > c.entropy_cap && !o.force) {
      const double full_gib = static_cast<double>(n) * static_cast<double>(n) * sizeof(Real) / (1024.0 * 1024 * 1024);
      const double stream_mib = 256.0 * static_cast<double>(n) * sizeof(Real) / (1024.0 * 1024);
      std::ostringstream msg;
      msg << "resolution " << n << " exceeds the desk cap of " << c.entropy_cap << " points: one full attention map is "
          << std::fixed << std::setprecision(2) << full_gib << " GiB per head (streamed: " << stream_mib
          << " MiB per chunk, O(N^2) time); pass --force to run anyway";
      fail(ErrorCode::ResourceGuard, msg.str());
    }
  }
  const auto model = detail::load_model(c.checkpoint_path(), o, "analyze-attention");
  SampleRecord sample;
  if (!c.input.empty()) {
    sample = load_sample(c.input);
  } else {
    const auto [manifest, manifest_path] = detail::open_dataset(c);
    const auto entries = manifest.split(parse_split(c.split));
    require(c.analysis_sample < static_cast<int>(entries.size()), ErrorCode::Bounds,
            "analysis_sample " + std::to_string(c.analysis_sample) + " outside split of " +
                std::to_string(entries.size()));
    sample = load_sample(manifest_path.parent_path() / entries[static_cast<std::size_t>(c.analysis_sample)].path);
  }
  if (resolutions.empty()) resolutions.push_back(sample.points());

  EntropySelector sel;
  sel.pool_heads = c.pool_heads;
  sel.bins = static_cast<std::size_t>(c.entropy_bins);
  for (auto b : detail::parse_index_list(c.entropy_blocks, "entropy_blocks")) sel.blocks.push_back(static_cast<int>(b));

  const std::filesystem::path dir(c.out_dir);
  detail::ensure_dir(dir);
  std::ostringstream summary;
  summary << "block\thead\tresolution\tmedian\tq1\tq3\tpeak\n";
  for (const auto n : resolutions) {
    SampleRecord at;
    const auto seed = derive_seed(c.train.seed, "entropy", static_cast<std::uint64_t>(n));
    if (n <= sample.points()) {
      at = random_subsample(sample, n, seed);
    } else {
      FlowSampleSpec spec = flow_spec_from_metadata(sample);
      spec.points = n;
      at = gen_potential_flow_sphere(spec, seed, sample.sample_id);
    }
    const Matrix<Real> coords = model.normalizer.apply(Matrix<Real>(at.coords.cast<Real>()));
    const auto tables = entropy_profile(coords, model.params, model.arch, sel);
    for (const auto& t : tables) {
      const std::string head = t.head < 0 ? "pooled" : "h" + std::to_string(t.head);
      write_text_atomic(dir / ("entropy_b" + std::to_string(t.block) + "_" + head + "_n" + std::to_string(n) + ".csv"),
                        histogram_csv(t.histogram));
      const auto q = quartiles(t.values);
      std::size_t peak = 0;
      for (std::size_t i = 1; i < t.histogram.bins(); ++i) {
        if (t.histogram.densities[i] > t.histogram.densities[peak]) peak = i;
      }
      summary << t.block << "\t" << head << "\t" << n << "\t" << format_number(q.median) << "\t" << format_number(q.q1)
              << "\t" << format_number(q.q3) << "\t" << format_number(t.histogram.center(peak)) << "\n";
    }
    if (c.query_index >= 0) {
      require(c.query_index < n, ErrorCode::Bounds, "query_index outside the analysed point set");
      const int block = sel.blocks.empty() ? model.config().num_blocks - 1 : sel.blocks.front();
      std::vector<Matrix<Real>> rows(static_cast<std::size_t>(model.config().num_heads));
      AttentionObserver<Real> observer = [&](int b, int h, Eigen::Index first, const Matrix<Real>& chunk) {
        if (b == block && c.query_index >= first && c.query_index < first + chunk.rows()) {
          rows[static_cast<std::size_t>(h)] = chunk.row(c.query_index - first);
        }
      };
      forward_normalized<Real>(coords, model.params, model.arch, nullptr, observer);
      for (std::size_t h = 0; h < rows.size(); ++h) {
        std::ostringstream csv;
        csv << "x,y,z,weight\n";
        for (Eigen::Index j = 0; j < at.points(); ++j) {
          csv << format_number(at.coords(j, 0)) << "," << format_number(at.coords(j, 1)) << ","
              << format_number(at.coords(j, 2)) << "," << format_number(rows[h](0, j)) << "\n";
        }
        write_text_atomic(dir / ("attention_row_b" + std::to_string(block) + "_h" + std::to_string(h) + "_q" +
                                 std::to_string(c.query_index) + "_n" + std::to_string(n) + ".csv"),
                          csv.str());
      }
    }
  }
  write_text_atomic(dir / "entropy_summary.tsv", summary.str());
  detail::echo_config(dir, c);
  *o.out << summary.str();
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"gen-data", "train", "eval", "predict", "ablate", "analyze-attention"};
  return names;
}

// Runs one command and maps failures to exit codes.
inline int run_command(std::string_view name, CommandOptions& o) {
  try {
    set_thread_count(o.config.threads);
    if (name == "gen-data") {
      cmd_gen_data(o);
    } else if (name == "train") {
      cmd_train(o);
    } else if (name == "eval") {
      cmd_eval(o);
    } else if (name == "predict") {
      cmd_predict(o);
    } else if (name == "ablate") {
      cmd_ablate(o);  // failed variants are marked in the table, the sweep itself succeeds
    } else if (name == "analyze-attention") {
      cmd_analyze_attention(o);
    } else {
      fail(ErrorCode::Usage, "unknown command '" + std::string(name) + "'");
    }
    return kExitOk;
  } catch (const Error& e) {
    *o.err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    *o.err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace reto
