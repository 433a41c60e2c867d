#pragma once

// Minibatch gradient-descent driver shared by the supervised and contrastive
// trainers: seeded per-epoch shuffling, validation after every epoch, and
// best-validation-epoch selection (ties keep the earliest epoch).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace scvlm {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 0.05;
  std::uint64_t seed = 1;
  int threads = 0;  // 0 = hardware concurrency; results do not depend on it
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;  // mean of the epoch's batch losses
  double val_accuracy = 0.0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

// One JSON object per line: {"epoch":..,"train_loss":..,"val_accuracy":..}
std::string epoch_record_json(const EpochRecord& r);

struct TrainingOutcome {
  std::vector<EpochRecord> log;
  int best_epoch = 0;
  double best_val_accuracy = -1.0;
};

struct TrainingHooks {
  // Computes the loss of one batch, applies the update, returns the mean batch loss.
  // Must throw NumericError (without updating) when the loss is not finite.
  std::function<double(std::span<const std::size_t> batch, int epoch, int batch_index)> step;
  std::function<double()> validate;
  // Called after an epoch that set a new best validation accuracy.
  std::function<void(int epoch)> on_best;
  std::function<void(const EpochRecord&)> on_epoch;
};

TrainingOutcome run_minibatch_training(std::size_t n_train, const TrainConfig& config,
                                       const TrainingHooks& hooks);

// Runs fn(0..n-1) on up to `threads` workers. fn must only touch state owned by its index.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace scvlm
