#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "zmesh/corrupt.hpp"
#include "zmesh/mesh.hpp"
#include "zmesh/nn/checkpoint.hpp"
#include "zmesh/nn/graph.hpp"
#include "zmesh/nn/optim.hpp"
#include "zmesh/preprocess.hpp"
#include "zmesh/rng.hpp"
#include "zmesh/volume.hpp"

namespace zmesh {

struct TrainLogRow {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> val;
};

inline void write_train_log(const std::vector<TrainLogRow>& rows,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_train_log: cannot open " + path);
  out.precision(12);
  out << "epoch,loss,lr,val_metric\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.loss << ',' << r.lr << ',';
    if (r.val) out << *r.val;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Self-supervised restoration pre-training
// ---------------------------------------------------------------------------

struct PretrainConfig {
  MeshConfig mesh;  // forced to HeadMode::restore
  CorruptionConfig corruption;
  int subvolumes_per_case = 16;  // S
  int batch_size = 24;
  double lr0 = 0.1;
  double momentum = 0.9;
  double step_gamma = 0.5;
  int step_size = 10;
  int patience = 20;  // epochs without loss improvement
  int max_epochs = 200;
  std::uint64_t seed = 1;
};

struct TrainResult {
  nn::Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
  int epochs_run = 0;
};

namespace detail {

template <typename T>
void check_finite_loss(T value, std::int64_t step) {
  if (!std::isfinite(double(value))) {
    throw std::runtime_error("training diverged (non-finite loss) at step " +
                             std::to_string(step));
  }
}

}  // namespace detail

/// Minimizes restoration MSE over S sub-volumes per case with SGD+momentum
/// and the step LR policy; stops after `patience` epochs without improvement.
/// `val_cases` (optional) is scored each epoch with frozen corruptions.
inline TrainResult pretrain(const std::vector<CaseRecord>& cases,
                            const PretrainConfig& cfg_in,
                            const std::vector<CaseRecord>& val_cases = {}) {
  if (cases.empty()) throw std::invalid_argument("pretrain: empty dataset");
  PretrainConfig cfg = cfg_in;
  cfg.mesh.head_mode = HeadMode::restore;
  cfg.mesh.input_channels = kSubVolumeChannels;
  cfg.mesh.restore_channels = kImageChannels;

  // fixed sub-volume dataset: S blocks per case
  std::vector<SubVolume> items;
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    auto svs = sample_subvolumes(cases[ci], cfg.subvolumes_per_case,
                                 derive_seed(cfg.seed, 10000 + ci),
                                 cfg.corruption.subvol_dims);
    for (auto& sv : svs) items.push_back(std::move(sv));
  }
  std::vector<SubVolume> val_items;
  for (std::size_t ci = 0; ci < val_cases.size(); ++ci) {
    auto svs = sample_subvolumes(val_cases[ci], cfg.subvolumes_per_case,
                                 derive_seed(cfg.seed, 20000 + ci),
                                 cfg.corruption.subvol_dims);
    for (auto& sv : svs) val_items.push_back(std::move(sv));
  }

  MeshNetwork<float> net(cfg.mesh, cfg.seed);
  nn::SgdOptimizer<float> opt(&net.params(), cfg.momentum);
  const auto schedule =
      nn::LrSchedule::step_policy(cfg.lr0, cfg.step_gamma, cfg.step_size);
  Rng run_rng(derive_seed(cfg.seed, 1));

  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  std::int64_t step_index = 0;
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double lr = schedule.lr(epoch);
    run_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    std::size_t k = 0;
    while (k < order.size()) {
      const std::size_t batch =
          std::min<std::size_t>(cfg.batch_size, order.size() - k);
      opt.zero_grad();
      for (std::size_t b = 0; b < batch; ++b, ++k) {
        const SubVolume& sv = items[order[k]];
        const CorruptionRecipe recipe =
            sample_recipe(cfg.corruption, run_rng.next_u64());
        const SubVolume corrupted = corrupt(sv, recipe);
        auto input = nn::make_input(corrupted.data);
        auto out = net.forward(input, false);
        auto item_loss = nn::loss_mse(out.final, restoration_target(sv));
        epoch_loss += double(item_loss->value[0]);
        auto scaled = nn::weighted_sum<float>({item_loss}, {1.0 / double(batch)});
        nn::backward(scaled);
        detail::check_finite_loss(item_loss->value[0], step_index);
      }
      opt.step(lr);
      ++step_index;
    }
    epoch_loss /= double(items.size());

    std::optional<double> val;
    if (!val_items.empty()) {
      double acc = 0.0;
      for (std::size_t vi = 0; vi < val_items.size(); ++vi) {
        const CorruptionRecipe recipe =
            sample_recipe(cfg.corruption, derive_seed(cfg.seed, 30000 + vi));
        const SubVolume corrupted = corrupt(val_items[vi], recipe);
        auto out = net.forward(nn::make_input(corrupted.data), false);
        acc += double(nn::loss_mse(out.final, restoration_target(val_items[vi]))
                          ->value[0]);
      }
      val = acc / double(val_items.size());
    }

    result.log.push_back({epoch, epoch_loss, lr, val});
    result.epochs_run = epoch + 1;
    if (epoch_loss < best) {
      best = epoch_loss;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  result.checkpoint = nn::make_checkpoint(net.params(), run_rng.save_state());
  return result;
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning with deep supervision
// ---------------------------------------------------------------------------

struct FinetuneConfig {
  MeshConfig mesh;  // forced to HeadMode::detect
  Dims3 patch{16, 320, 320};
  int batch_size = 2;
  double lr0 = 0.01;
  double momentum = 0.9;
  int epochs = 100;  // poly horizon
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double ce_beta = 0.5;
  double lesion_patch_fraction = 0.5;
  int folds = 5;
  int fold = 0;  // cases with index % folds == fold form the validation split
  bool eval_val_loss = false;
  std::uint64_t seed = 1;
};

namespace detail {

struct FinetuneCase {
  nn::Tensor<float> channels;               // (6, Z, Y, X), zscore + one-hot
  nn::Tensor<float> target;                 // (1, Z, Y, X) binary
  std::vector<std::int64_t> lesion_voxels;  // linear indices into the grid
  Dims3 dims;
};

inline FinetuneCase prepare_finetune_case(const CaseRecord& rec) {
  FinetuneCase fc;
  fc.dims = rec.image.dims();
  fc.channels = case_to_channels(rec, NormMode::zscore);
  fc.target = nn::Tensor<float>({1, fc.dims.z, fc.dims.y, fc.dims.x});
  if (rec.lesions) {
    for (std::int64_t i = 0; i < rec.lesions->size(); ++i) {
      if (rec.lesions->data()[i] > 0.5f) {
        fc.target[i] = 1.0f;
        fc.lesion_voxels.push_back(i);
      }
    }
  }
  return fc;
}

inline nn::Tensor<float> copy_patch(const nn::Tensor<float>& src, Dims3 origin,
                                    Dims3 patch) {
  nn::Tensor<float> out({src.c(), patch.z, patch.y, patch.x});
  for (std::int64_t c = 0; c < src.c(); ++c) {
    for (std::int64_t z = 0; z < patch.z; ++z) {
      for (std::int64_t y = 0; y < patch.y; ++y) {
        const float* s = &src.at(c, origin.z + z, origin.y + y, origin.x);
        std::copy(s, s + patch.x, &out.at(c, z, y, 0));
      }
    }
  }
  return out;
}

/// Block-origin nearest subsampling of a binary target to a head resolution.
inline nn::Tensor<float> downsample_target(const nn::Tensor<float>& t, Dims3 out) {
  nn::Tensor<float> r({1, out.z, out.y, out.x});
  const std::int64_t fz = t.z() / out.z, fy = t.y() / out.y, fx = t.x() / out.x;
  for (std::int64_t z = 0; z < out.z; ++z) {
    for (std::int64_t y = 0; y < out.y; ++y) {
      for (std::int64_t x = 0; x < out.x; ++x) {
        r.at(0, z, y, x) = t.at(0, z * fz, y * fy, x * fx);
      }
    }
  }
  return r;
}

inline Dims3 clamp_origin(Dims3 origin, Dims3 dims, Dims3 patch) {
  return {std::clamp<std::int64_t>(origin.z, 0, dims.z - patch.z),
          std::clamp<std::int64_t>(origin.y, 0, dims.y - patch.y),
          std::clamp<std::int64_t>(origin.x, 0, dims.x - patch.x)};
}

}  // namespace detail

/// Combined per-head loss: focal + cross-entropy on the class-1 probability.
template <typename T>
nn::NodeRef<T> detection_loss(const nn::NodeRef<T>& probs,
                              const nn::Tensor<T>& target, double alpha,
                              double gamma, double beta) {
  auto class1 = nn::slice_channels(probs, 1, 1);
  auto focal = nn::loss_focal(class1, target, alpha, gamma);
  auto ce = nn::loss_ce(class1, target, beta);
  return nn::weighted_sum<T>({focal, ce}, {1.0, 1.0});
}

/// Deep-supervised total: final head plus (1/2)^(G-i)-weighted aux heads
/// against block-subsampled labels.
template <typename T>
nn::NodeRef<T> deep_supervised_loss(const MeshOutput<T>& out,
                                    const nn::Tensor<T>& target, int grid,
                                    double alpha, double gamma, double beta) {
  std::vector<nn::NodeRef<T>> losses;
  std::vector<double> weights;
  losses.push_back(detection_loss(out.final, target, alpha, gamma, beta));
  weights.push_back(1.0);
  for (const auto& aux : out.aux) {
    const Dims3 ad{aux.prob->value.z(), aux.prob->value.y(), aux.prob->value.x()};
    nn::Tensor<float> small = detail::downsample_target(target, ad);
    const int border_index = aux.i == grid ? aux.j : aux.i;
    losses.push_back(
        detection_loss(aux.prob, small, alpha, gamma, beta));
    weights.push_back(deep_supervision_weight(border_index, grid));
  }
  return nn::weighted_sum(losses, weights);
}

struct FinetuneResult {
  nn::Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
  std::vector<std::size_t> train_indices, val_indices;
};

/// Poly-schedule fine-tuning on lesion-balanced patches. `init` (optional)
/// transfers backbone weights from a restoration checkpoint; heads always
/// start fresh.
inline FinetuneResult finetune(const std::vector<CaseRecord>& cases,
                               const FinetuneConfig& cfg_in,
                               const nn::Checkpoint* init = nullptr) {
  if (cases.empty()) throw std::invalid_argument("finetune: empty dataset");
  FinetuneConfig cfg = cfg_in;
  cfg.mesh.head_mode = HeadMode::detect;
  cfg.mesh.input_channels = kSubVolumeChannels;
  if (cfg.folds < 1 || cfg.fold < 0 || cfg.fold >= cfg.folds) {
    throw std::invalid_argument("finetune: bad fold assignment");
  }

  FinetuneResult result;
  std::vector<detail::FinetuneCase> train_set, val_set;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (cfg.folds > 1 && static_cast<int>(i % cfg.folds) == cfg.fold) {
      result.val_indices.push_back(i);
      if (cfg.eval_val_loss) val_set.push_back(detail::prepare_finetune_case(cases[i]));
    } else {
      result.train_indices.push_back(i);
      train_set.push_back(detail::prepare_finetune_case(cases[i]));
    }
  }
  if (train_set.empty()) throw std::invalid_argument("finetune: empty train split");
  for (const auto& fc : train_set) {
    if (fc.dims.z < cfg.patch.z || fc.dims.y < cfg.patch.y ||
        fc.dims.x < cfg.patch.x) {
      throw std::invalid_argument("finetune: case smaller than the patch");
    }
  }

  MeshNetwork<float> net(cfg.mesh, cfg.seed);
  if (init) {
    nn::load_into(net.params(), *init, true, [](const std::string& id) {
      return id.rfind("head.", 0) != 0;  // backbone only
    });
  }
  nn::SgdOptimizer<float> opt(&net.params(), cfg.momentum);
  const auto schedule = nn::LrSchedule::poly_policy(cfg.lr0, cfg.epochs);
  Rng run_rng(derive_seed(cfg.seed, 2));

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::int64_t step_index = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = schedule.lr(epoch);
    run_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    std::size_t k = 0;
    while (k < order.size()) {
      const std::size_t batch =
          std::min<std::size_t>(cfg.batch_size, order.size() - k);
      opt.zero_grad();
      for (std::size_t b = 0; b < batch; ++b, ++k) {
        const auto& fc = train_set[order[k]];
        Dims3 origin;
        const bool lesion_centered =
            !fc.lesion_voxels.empty() &&
            run_rng.uniform() < cfg.lesion_patch_fraction;
        if (lesion_centered) {
          const std::int64_t v = fc.lesion_voxels[static_cast<std::size_t>(
              run_rng.uniform_int(0, std::int64_t(fc.lesion_voxels.size()) - 1))];
          const Dims3 center{v / (fc.dims.y * fc.dims.x),
                             (v / fc.dims.x) % fc.dims.y, v % fc.dims.x};
          origin = detail::clamp_origin({center.z - cfg.patch.z / 2,
                                         center.y - cfg.patch.y / 2,
                                         center.x - cfg.patch.x / 2},
                                        fc.dims, cfg.patch);
        } else {
          origin = {run_rng.uniform_int(0, fc.dims.z - cfg.patch.z),
                    run_rng.uniform_int(0, fc.dims.y - cfg.patch.y),
                    run_rng.uniform_int(0, fc.dims.x - cfg.patch.x)};
        }
        auto input =
            nn::make_input(detail::copy_patch(fc.channels, origin, cfg.patch));
        nn::Tensor<float> target =
            detail::copy_patch(fc.target, origin, cfg.patch);
        auto out = net.forward(input, true);
        auto item_loss =
            deep_supervised_loss(out, target, cfg.mesh.grid, cfg.focal_alpha,
                                 cfg.focal_gamma, cfg.ce_beta);
        epoch_loss += double(item_loss->value[0]);
        auto scaled = nn::weighted_sum<float>({item_loss}, {1.0 / double(batch)});
        nn::backward(scaled);
        detail::check_finite_loss(item_loss->value[0], step_index);
      }
      opt.step(lr);
      ++step_index;
    }
    epoch_loss /= double(train_set.size());

    std::optional<double> val;
    if (!val_set.empty()) {
      double acc = 0.0;
      for (const auto& fc : val_set) {
        const Dims3 origin = detail::clamp_origin(
            {(fc.dims.z - cfg.patch.z) / 2, (fc.dims.y - cfg.patch.y) / 2,
             (fc.dims.x - cfg.patch.x) / 2},
            fc.dims, cfg.patch);
        auto input =
            nn::make_input(detail::copy_patch(fc.channels, origin, cfg.patch));
        nn::Tensor<float> target =
            detail::copy_patch(fc.target, origin, cfg.patch);
        auto out = net.forward(input, true);
        acc += double(deep_supervised_loss(out, target, cfg.mesh.grid,
                                           cfg.focal_alpha, cfg.focal_gamma,
                                           cfg.ce_beta)
                          ->value[0]);
      }
      val = acc / double(val_set.size());
    }
    result.log.push_back({epoch, epoch_loss, lr, val});
  }
  result.checkpoint = nn::make_checkpoint(net.params(), run_rng.save_state());
  return result;
}

// ---------------------------------------------------------------------------
// Sliding-window ensemble inference
// ---------------------------------------------------------------------------

/// Voxel-wise csPCa probability for one preprocessed case: sliding windows
/// with half-patch stride, overlap averaging, and an equally weighted model
/// ensemble. Output dims equal the case dims; values lie in [0,1].
inline Volume infer_case(std::vector<MeshNetwork<float>*> models,
                         const CaseRecord& rec, Dims3 patch) {
  if (models.empty()) throw std::invalid_argument("infer_case: no models");
  for (auto* m : models) {
    if (m->config().input_channels != kSubVolumeChannels) {
      throw std::invalid_argument("infer_case: model expects different channels");
    }
    if (m->config().grid != models[0]->config().grid) {
      throw std::invalid_argument("infer_case: mixed mesh grids in ensemble");
    }
  }
  const int lmax = models[0]->level_max();
  const Dims3 multiple{std::int64_t(1) << lmax, std::int64_t(1) << (2 * lmax),
                       std::int64_t(1) << (2 * lmax)};
  const Dims3 case_dims = rec.image.dims();
  Dims3 padded = round_up_to_multiple(case_dims, multiple);
  patch = {std::min(patch.z, padded.z), std::min(patch.y, padded.y),
           std::min(patch.x, padded.x)};
  patch = round_up_to_multiple(patch, multiple);
  padded = {std::max(padded.z, patch.z), std::max(padded.y, patch.y),
            std::max(padded.x, patch.x)};

  nn::Tensor<float> channels = case_to_channels(rec, NormMode::zscore);
  nn::Tensor<float> grid({kSubVolumeChannels, padded.z, padded.y, padded.x});
  const Dims3 off{(padded.z - case_dims.z) / 2, (padded.y - case_dims.y) / 2,
                  (padded.x - case_dims.x) / 2};
  for (std::int64_t c = 0; c < kSubVolumeChannels; ++c) {
    for (std::int64_t z = 0; z < case_dims.z; ++z) {
      for (std::int64_t y = 0; y < case_dims.y; ++y) {
        const float* src = &channels.at(c, z, y, 0);
        std::copy(src, src + case_dims.x,
                  &grid.at(c, off.z + z, off.y + y, off.x));
      }
    }
  }

  auto window_starts = [](std::int64_t extent, std::int64_t size) {
    std::vector<std::int64_t> starts;
    const std::int64_t stride = std::max<std::int64_t>(1, size / 2);
    for (std::int64_t s = 0;; s += stride) {
      if (s + size >= extent) {
        starts.push_back(extent - size);
        break;
      }
      starts.push_back(s);
    }
    return starts;
  };
  const auto sz = window_starts(padded.z, patch.z);
  const auto sy = window_starts(padded.y, patch.y);
  const auto sx = window_starts(padded.x, patch.x);

  std::vector<double> ensemble(static_cast<std::size_t>(padded.voxels()), 0.0);
  std::vector<double> model_sum(ensemble.size());
  std::vector<double> model_cnt(ensemble.size());
  for (auto* model : models) {
    std::fill(model_sum.begin(), model_sum.end(), 0.0);
    std::fill(model_cnt.begin(), model_cnt.end(), 0.0);
    for (std::int64_t z0 : sz) {
      for (std::int64_t y0 : sy) {
        for (std::int64_t x0 : sx) {
          auto input = nn::make_input(
              detail::copy_patch(grid, {z0, y0, x0}, patch));
          auto out = model->forward(input, false);
          const auto& prob = out.final->value;  // channel 1 = csPCa
          for (std::int64_t z = 0; z < patch.z; ++z) {
            for (std::int64_t y = 0; y < patch.y; ++y) {
              for (std::int64_t x = 0; x < patch.x; ++x) {
                const std::size_t gi = static_cast<std::size_t>(
                    ((z0 + z) * padded.y + (y0 + y)) * padded.x + (x0 + x));
                model_sum[gi] += double(prob.at(1, z, y, x));
                model_cnt[gi] += 1.0;
              }
            }
          }
        }
      }
    }
    for (std::size_t i = 0; i < ensemble.size(); ++i) {
      ensemble[i] += model_sum[i] / model_cnt[i];
    }
  }

  Volume out(1, case_dims, rec.image.spacing());
  for (std::int64_t z = 0; z < case_dims.z; ++z) {
    for (std::int64_t y = 0; y < case_dims.y; ++y) {
      for (std::int64_t x = 0; x < case_dims.x; ++x) {
        const std::size_t gi = static_cast<std::size_t>(
            ((off.z + z) * padded.y + (off.y + y)) * padded.x + (off.x + x));
        const double v = ensemble[gi] / double(models.size());
        out.at(0, z, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

}  // namespace zmesh
