// Library walkthrough: generate flow past spheres in memory, fit a small model,
// score it on held-out spheres and inspect one prediction.

#include <cstdio>
#include <vector>

#include "reto/checkpoint.hpp"
#include "reto/data.hpp"
#include "reto/training.hpp"

using namespace reto;

int main() {
  // 24 spheres of random radius, 256 points each in the shell around the body
  std::vector<SampleRecord> train, held_out;
  Rng rng(7);
  for (int i = 0; i < 24; ++i) {
    FlowSampleSpec spec;
    spec.radius = rng.uniform(0.6, 1.4);
    spec.points = 256;
    auto rec = gen_potential_flow_sphere(spec, derive_seed(7, "demo", static_cast<std::uint64_t>(i)),
                                         "sphere_" + std::to_string(i));
    (i < 20 ? train : held_out).push_back(std::move(rec));
  }

  ModelConfig model_cfg;
  model_cfg.num_blocks = 2;
  model_cfg.num_heads = 4;
  model_cfg.latent_dim = 64;
  model_cfg.per_axis_dim = 16;
  model_cfg.encoder_hidden = 128;
  model_cfg.out_channels = 3;
  const std::vector<std::string> targets{"u", "v", "w"};
  auto model = prepare_model<float>(model_cfg, train, targets, 7);

  TrainConfig train_cfg;
  train_cfg.epochs = 20;
  train_cfg.initial_lr = 2e-3;
  train_cfg.lr_step_epochs = 8;
  train_cfg.points_per_sample = 128;
  train_cfg.seed = 7;
  FitHooks<float> hooks;
  hooks.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %2d  lr %.2e  train mse %.4f  val L2 %.4f\n", r.epoch, r.lr, r.train_mse, r.val_overall);
  };
  auto result = fit(model, train, held_out, train_cfg, hooks);
  if (result.best_params) model.params = *result.best_params;
  std::printf("best epoch %d, validation L2 %.4f\n", result.best_epoch, result.best_val);

  const auto prepared = prepare_samples<float>(held_out, model);
  const auto scores = evaluate<float>(model, prepared, 10000, 0);
  for (std::size_t c = 0; c < scores.channels.size(); ++c) {
    std::printf("held-out relative L2 %s: %.4f\n", scores.channels[c].c_str(), scores.mean_per_channel[c]);
  }

  // physical-unit prediction next to the closed-form solution at a few points
  const auto& s = prepared.front();
  const Matrix<double> pred = predict_physical(model, s.coords);
  std::printf("\n%s, first points (predicted vs exact u, v, w):\n", s.sample_id.c_str());
  for (Eigen::Index i = 0; i < 4; ++i) {
    std::printf("  (%6.3f %6.3f %6.3f) vs (%6.3f %6.3f %6.3f)\n", pred(i, 0), pred(i, 1), pred(i, 2), s.truth(i, 0),
                s.truth(i, 1), s.truth(i, 2));
  }

  save_checkpoint("quickstart.ckpt", model);
  std::printf("\nsaved quickstart.ckpt (usable with: reto predict -s checkpoint=quickstart.ckpt -s input=<file.rsmp>)\n");
  return 0;
}
