#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "reto/checkpoint.hpp"
#include "reto/data.hpp"
#include "reto/error.hpp"
#include "reto/metrics.hpp"
#include "reto/model.hpp"
#include "reto/optimizer.hpp"
#include "reto/random.hpp"

namespace reto {

struct TrainConfig {
  int epochs = 150;
  int batch_size = 1;
  double initial_lr = 1e-3;
  double lr_decay_factor = 0.5;
  int lr_step_epochs = 50;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Eigen::Index points_per_sample = 512;
  Eigen::Index eval_points = 10000;  // validation / evaluation subsample cap
  bool resample_eval = false;        // new validation subsample every epoch instead of a fixed one
  double stop_below = 0.0;           // stop once validation L2 drops below this; 0 disables
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, ErrorCode::Configuration, "epochs must be >= 1");
    require(batch_size >= 1, ErrorCode::Configuration, "batch_size must be >= 1");
    require(initial_lr > 0, ErrorCode::Configuration, "initial_lr must be positive");
    require(lr_decay_factor > 0 && lr_decay_factor <= 1, ErrorCode::Configuration, "lr_decay_factor must be in (0, 1]");
    require(lr_step_epochs >= 1, ErrorCode::Configuration, "lr_step_epochs must be >= 1");
    require(adam_beta1 > 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1, ErrorCode::Configuration,
            "adam betas must be in (0, 1)");
    require(adam_eps > 0, ErrorCode::Configuration, "adam_eps must be positive");
    require(points_per_sample >= 1 && eval_points >= 1, ErrorCode::Configuration, "point counts must be >= 1");
    require(stop_below >= 0, ErrorCode::Configuration, "stop_below must be >= 0");
  }

  AdamConfig adam() const { return {adam_beta1, adam_beta2, adam_eps}; }
  double lr(int epoch) const { return steplr(epoch, initial_lr, lr_decay_factor, lr_step_epochs); }
};

// Mean over all N*C entries; optional gradient d(mse)/d(pred) = 2 (pred - target) / (N C).
template <std::floating_point T>
double mse_loss(const Matrix<T>& pred, const Matrix<T>& target, Matrix<T>* grad = nullptr) {
  require_same_shape(pred.rows(), pred.cols(), target.rows(), target.cols(), "mse_loss");
  require(pred.size() > 0, ErrorCode::Shape, "mse_loss of an empty field");
  const Matrix<T> diff = pred - target;
  const auto count = static_cast<double>(diff.size());
  double sum = 0;
  for (Eigen::Index i = 0; i < diff.size(); ++i) sum += static_cast<double>(diff.data()[i]) * diff.data()[i];
  if (grad != nullptr) *grad = diff * static_cast<T>(2.0 / count);
  return sum / count;
}

// Forward + backward on normalized inputs; gradients (times `scale`) are added
// to params.grad. Returns the unscaled loss.
template <std::floating_point T>
double accumulate_gradient(ParameterStore<T>& params, const Architecture& arch, const Matrix<T>& coords,
                           const Matrix<T>& target, double scale = 1.0) {
  ForwardCache<T> cache;
  const Matrix<T> pred = forward_normalized(coords, params, arch, &cache);
  Matrix<T> d_pred;
  const double loss = mse_loss(pred, target, &d_pred);
  if (!std::isfinite(loss)) return loss;
  if (scale != 1.0) d_pred *= static_cast<T>(scale);
  backward(cache, params, arch, d_pred);
  return loss;
}

// ---------------------------------------------------------------------------
// Finite-difference verification (64-bit).

struct GradcheckOptions {
  double step = 1e-5;
  std::size_t count = 200;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  double max_rel_error = 0;
  std::string worst_parameter;
  Eigen::Index worst_index = -1;
  double worst_analytic = 0, worst_numeric = 0;
  std::size_t checked = 0;
};

// Compares params.grad (already filled by the caller) with central differences
// of `loss` on randomly chosen scalars. `loss` must read the current params.
inline GradcheckReport finite_difference_gradcheck(ParameterStore<double>& params, const std::function<double()>& loss,
                                                   const GradcheckOptions& options = {}) {
  const auto total = static_cast<std::size_t>(params.scalar_count());
  const auto order = random_permutation(total, options.seed);
  const std::size_t count = std::min(options.count, total);
  std::vector<std::pair<std::size_t, Eigen::Index>> picks;
  for (std::size_t k = 0; k < count; ++k) {
    auto flat = order[k];
    std::size_t p = 0;
    while (flat >= static_cast<std::size_t>(params[p].size())) flat -= static_cast<std::size_t>(params[p++].size());
    picks.emplace_back(p, static_cast<Eigen::Index>(flat));
  }
  std::sort(picks.begin(), picks.end());
  GradcheckReport report;
  for (const auto& [p, i] : picks) {
    auto& param = params[p];
    double& slot = param.value.data()[i];
    const double saved = slot;
    slot = saved + options.step;
    const double up = loss();
    slot = saved - options.step;
    const double down = loss();
    slot = saved;
    const double numeric = (up - down) / (2 * options.step);
    const double analytic = param.grad.data()[i];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    ++report.checked;
    if (rel > report.max_rel_error || report.worst_index < 0) {
      report.max_rel_error = rel;
      report.worst_parameter = param.name;
      report.worst_index = i;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

// Gradient check of the whole model under the MSE loss.
inline GradcheckReport gradcheck_model(ParameterStore<double>& params, const Architecture& arch,
                                       const Matrix<double>& coords, const Matrix<double>& target,
                                       const GradcheckOptions& options = {}) {
  params.zero_grad();
  accumulate_gradient(params, arch, coords, target);
  return finite_difference_gradcheck(
      params, [&] { return mse_loss(forward_normalized(coords, params, arch), target); }, options);
}

// ---------------------------------------------------------------------------
// Evaluation.

// A sample with inputs mapped into model space, kept next to its physical truth.
template <std::floating_point T>
struct PreparedSample {
  std::string sample_id;
  Matrix<T> coords;        // normalized
  Matrix<T> target;        // Z-scored
  Matrix<double> truth;    // physical units, target channels only
};

template <std::floating_point T>
PreparedSample<T> prepare_sample(const SampleRecord& rec, const CoordinateNormalizer& normalizer,
                                 const ZScoreStats& zscore) {
  rec.validate();
  const Matrix<float> selected = select_channels(rec, zscore.channels);
  return {rec.sample_id, normalizer.apply(Matrix<T>(rec.coords.template cast<T>())),
          apply_zscore<T, float>(selected, zscore), selected.cast<double>()};
}

template <std::floating_point T>
std::vector<PreparedSample<T>> prepare_samples(std::span<const SampleRecord> recs, const TrainedModel<T>& model) {
  std::vector<PreparedSample<T>> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(prepare_sample<T>(r, model.normalizer, model.zscore));
  return out;
}

template <std::floating_point T>
PreparedSample<T> subsample_rows(const PreparedSample<T>& s, Eigen::Index n, std::uint64_t seed) {
  const Eigen::Index total = s.coords.rows();
  if (n >= total) return s;
  const auto perm = random_permutation(static_cast<std::size_t>(total), seed);
  PreparedSample<T> out{s.sample_id, Matrix<T>(n, 3), Matrix<T>(n, s.target.cols()),
                        Matrix<double>(n, s.truth.cols())};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto src = static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]);
    out.coords.row(i) = s.coords.row(src);
    out.target.row(i) = s.target.row(src);
    out.truth.row(i) = s.truth.row(src);
  }
  return out;
}

// Physical-unit prediction for normalized inputs.
template <std::floating_point T>
Matrix<double> predict_physical(const TrainedModel<T>& model, const Matrix<T>& normalized_coords) {
  return invert_zscore<double, T>(forward_normalized(normalized_coords, model.params, model.arch), model.zscore);
}

struct SampleEvaluation {
  std::string sample_id;
  std::vector<double> per_channel;  // relative L2 per target channel
  std::vector<double> per_group;    // relative L2 per channel group (pressure / velocity / ...)
  double overall = 0;               // all target channels stacked
  std::vector<double> abs_errors;   // |pred - truth| on Z-scored fields
};

struct EvaluationResult {
  std::vector<std::string> channels;
  std::vector<ChannelGroup> groups;
  std::vector<SampleEvaluation> samples;
  std::vector<double> mean_per_channel;
  std::vector<double> mean_per_group;
  double mean_overall = 0;
};

// Relative L2 on physical fields per sample, averaged in sample order.
// Samples with more than max_points are evaluated on a seeded fixed subsample.
template <std::floating_point T>
EvaluationResult evaluate(const TrainedModel<T>& model, std::span<const PreparedSample<T>> samples,
                          Eigen::Index max_points, std::uint64_t seed, bool keep_abs_errors = false) {
  require(!samples.empty(), ErrorCode::EmptyDataset, "evaluation split is empty");
  EvaluationResult result;
  result.channels = model.zscore.channels;
  result.groups = channel_groups(result.channels);
  const auto c = result.channels.size();
  result.mean_per_channel.assign(c, 0.0);
  result.mean_per_group.assign(result.groups.size(), 0.0);
  std::vector<int> all_columns(c);
  for (std::size_t i = 0; i < c; ++i) all_columns[i] = static_cast<int>(i);
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const auto s = subsample_rows(samples[k], max_points, derive_seed(seed, "eval:" + samples[k].sample_id));
    const Matrix<double> pred = predict_physical(model, s.coords);
    SampleEvaluation e{s.sample_id, relative_l2_per_channel(pred, s.truth), {}, relative_l2(pred, s.truth, all_columns), {}};
    for (const auto& g : result.groups) e.per_group.push_back(relative_l2(pred, s.truth, g.columns));
    if (keep_abs_errors) {
      const Matrix<double> zp = apply_zscore<double>(pred, model.zscore);
      const Matrix<double> zt = apply_zscore<double>(s.truth, model.zscore);
      for (Eigen::Index i = 0; i < zp.size(); ++i) e.abs_errors.push_back(std::abs(zp.data()[i] - zt.data()[i]));
    }
    for (std::size_t j = 0; j < c; ++j) result.mean_per_channel[j] += e.per_channel[j];
    for (std::size_t j = 0; j < e.per_group.size(); ++j) result.mean_per_group[j] += e.per_group[j];
    result.mean_overall += e.overall;
    result.samples.push_back(std::move(e));
  }
  const auto n = static_cast<double>(samples.size());
  for (auto& v : result.mean_per_channel) v /= n;
  for (auto& v : result.mean_per_group) v /= n;
  result.mean_overall /= n;
  return result;
}

// ---------------------------------------------------------------------------
// Training loop.

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_mse = 0;
  std::vector<double> val_rel_l2;  // per target channel
  double val_overall = 0;
  double seconds = 0;
};

inline std::string log_header(std::span<const std::string> channels) {
  std::ostringstream os;
  os << "# epoch\tlr\ttrain_mse\tval_rel_l2[";
  for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
  os << "]\tseconds\n";
  return os.str();
}

inline std::string format_log_row(const EpochRecord& r) {
  std::ostringstream os;
  os << r.epoch << '\t' << format_number(r.lr) << '\t' << format_number(r.train_mse) << '\t';
  for (std::size_t i = 0; i < r.val_rel_l2.size(); ++i) os << (i ? "," : "") << format_number(r.val_rel_l2[i]);
  os << '\t' << std::fixed << std::setprecision(3) << r.seconds << '\n';
  return os.str();
}

template <std::floating_point T>
struct FitHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::function<void(const TrainedModel<T>&, int epoch, double val)> on_best;
  std::function<void(const TrainedModel<T>&, const TrainingState&)> on_state;
};

template <std::floating_point T>
struct FitResult {
  std::vector<EpochRecord> log;
  std::optional<ParameterStore<T>> best_params;  // unset if a resumed run never improved
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  std::uint64_t optimizer_steps = 0;
  bool stopped_early = false;
};

template <std::floating_point T>
OptimizerState<double> widen(const OptimizerState<T>& s) {
  OptimizerState<double> out;
  out.step = s.step;
  for (const auto& m : s.first_moment) out.first_moment.push_back(m.template cast<double>());
  for (const auto& v : s.second_moment) out.second_moment.push_back(v.template cast<double>());
  return out;
}

template <std::floating_point T>
OptimizerState<T> narrow(const OptimizerState<double>& s) {
  OptimizerState<T> out;
  out.step = s.step;
  for (const auto& m : s.first_moment) out.first_moment.push_back(m.template cast<T>());
  for (const auto& v : s.second_moment) out.second_moment.push_back(v.template cast<T>());
  return out;
}

// Normalizer and Z-score stats from the training split only; fresh weights from the init sub-seed.
template <std::floating_point T>
TrainedModel<T> prepare_model(const ModelConfig& config, std::span<const SampleRecord> train,
                              std::span<const std::string> target_channels, std::uint64_t seed) {
  require(!train.empty(), ErrorCode::EmptyDataset, "training split is empty");
  require(static_cast<int>(target_channels.size()) == config.out_channels, ErrorCode::Configuration,
          "out_channels " + std::to_string(config.out_channels) + " but " + std::to_string(target_channels.size()) +
              " target channels");
  std::vector<Vec3> pts;
  for (const auto& r : train) {
    const auto c = r.coordinate_list();
    pts.insert(pts.end(), c.begin(), c.end());
  }
  return {Architecture(config), init_parameters<T>(config, derive_seed(seed, "init")), fit_normalizer(pts),
          fit_zscore(train, target_channels)};
}

// Per epoch: seeded shuffle, seeded point subsample per sample, one Adam step per
// batch, validation on the held-out split. `model.params` ends at the last epoch;
// the best-validation parameters are returned (and passed to hooks.on_best).
template <std::floating_point T>
FitResult<T> fit(TrainedModel<T>& model, std::span<const SampleRecord> train, std::span<const SampleRecord> val,
                 const TrainConfig& config, const FitHooks<T>& hooks = {}, const TrainingState* resume = nullptr) {
  config.validate();
  require(!train.empty(), ErrorCode::EmptyDataset, "training split is empty");
  require(!val.empty(), ErrorCode::EmptyDataset, "validation split is empty");
  const auto train_set = prepare_samples<T>(train, model);
  const auto val_set = prepare_samples<T>(val, model);
  const auto adam = config.adam();

  FitResult<T> result;
  OptimizerState<T> opt = OptimizerState<T>::for_parameters(model.params);
  int start = 0;
  if (resume != nullptr) {
    opt = narrow<T>(resume->optimizer);
    start = resume->epoch + 1;
    result.best_val = resume->best_epoch >= 0 ? resume->best_val : result.best_val;
    result.best_epoch = resume->best_epoch;
  }

  for (int epoch = start; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = config.lr(epoch);
    const std::uint64_t epoch_seed = derive_seed(config.seed, "epoch", static_cast<std::uint64_t>(epoch));
    const auto order = random_permutation(train_set.size(), derive_seed(epoch_seed, "shuffle"));
    double loss_sum = 0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(config.batch_size));
      const double scale = 1.0 / static_cast<double>(last - first);
      model.params.zero_grad();
      for (std::size_t k = first; k < last; ++k) {
        const auto idx = order[k];
        const auto s = subsample_rows(train_set[idx], config.points_per_sample,
                                      derive_seed(epoch_seed, "subsample", static_cast<std::uint64_t>(idx)));
        const double loss = accumulate_gradient(model.params, model.arch, s.coords, s.target, scale);
        if (!std::isfinite(loss)) {
          fail(ErrorCode::NonFiniteLoss, "non-finite training loss at epoch " + std::to_string(epoch) + ", sample " +
                                             s.sample_id);
        }
        loss_sum += loss;
      }
      adam_step(model.params, opt, adam, lr);
      result.optimizer_steps += 1;
      if (!model.params.all_finite()) {
        fail(ErrorCode::NonFiniteLoss, "non-finite parameter after optimizer step at epoch " + std::to_string(epoch));
      }
    }
    const auto eval_seed = config.resample_eval
                               ? derive_seed(config.seed, "validation", static_cast<std::uint64_t>(epoch))
                               : derive_seed(config.seed, "validation");
    const auto eval = evaluate<T>(model, val_set, config.eval_points, eval_seed);
    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(train_set.size()), eval.mean_per_channel,
                    eval.mean_overall, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    if (!std::isfinite(rec.val_overall)) {
      fail(ErrorCode::NonFiniteLoss, "non-finite validation error at epoch " + std::to_string(epoch));
    }
    if (rec.val_overall < result.best_val) {
      result.best_val = rec.val_overall;
      result.best_epoch = epoch;
      result.best_params = model.params;
      if (hooks.on_best) hooks.on_best(model, epoch, rec.val_overall);
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (hooks.on_state) hooks.on_state(model, TrainingState{epoch, result.best_val, result.best_epoch, widen(opt)});
    result.log.push_back(std::move(rec));
    if (config.stop_below > 0 && result.log.back().val_overall < config.stop_below) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace reto
