#include "scvlm/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "scvlm/errors.hpp"
#include "scvlm/random.hpp"

namespace scvlm {

std::string epoch_record_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_accuracy"] = r.val_accuracy;
  return j.dump();
}

TrainingOutcome run_minibatch_training(std::size_t n_train, const TrainConfig& config,
                                       const TrainingHooks& hooks) {
  if (n_train == 0) throw ValidationError("training split is empty");
  if (config.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (config.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate)) {
    throw ConfigError("learning rate must be a non-negative number");
  }

  TrainingOutcome out;
  std::vector<std::size_t> order(n_train);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    Rng rng(mix_seed(config.seed, 0xE90C0000ULL + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < n_train; start += batch) {
      const std::size_t len = std::min(batch, n_train - start);
      loss_sum += hooks.step(std::span<const std::size_t>(order.data() + start, len), epoch, batches);
      ++batches;
    }
    EpochRecord rec{epoch, loss_sum / batches, hooks.validate()};
    out.log.push_back(rec);
    if (rec.val_accuracy > out.best_val_accuracy) {
      out.best_val_accuracy = rec.val_accuracy;
      out.best_epoch = epoch;
      if (hooks.on_best) hooks.on_best(epoch);
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  return out;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  unsigned workers = threads > 0 ? static_cast<unsigned>(threads)
                                 : std::max(1U, std::thread::hardware_concurrency());
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace scvlm
