#pragma once

#include "moce/corpus.hpp"
#include "moce/model.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace moce {

struct TrainConfig {
  double learning_rate = 5e-4;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  int batch_tokens = 4096;  // source plus target tokens per batch
  int warmup_steps = 4000;
  int patience = 10;        // validations without improvement before stopping
  int valid_interval = 100; // steps between validations
  int checkpoint_interval = 0;  // steps between checkpoints; 0 disables
  int keep_checkpoints = 5;
  std::int64_t max_steps = 100000;
  std::uint64_t seed = 1;
  std::string checkpoint_dir;  // empty: no checkpoints on disk
  /// Stop as soon as held-out token accuracy reaches this value.
  std::optional<double> target_accuracy;

  void validate() const;
};

struct LossLogEntry {
  std::int64_t step = 0;
  double train_loss = 0.0;  // mean smoothed loss since the previous validation
  double valid_loss = 0.0;
  double valid_accuracy = 0.0;
};

struct TrainResult {
  std::int64_t steps = 0;
  std::vector<LossLogEntry> log;
  double best_valid_loss = 0.0;
  double final_valid_accuracy = 0.0;
  bool early_stopped = false;
  bool reached_target = false;
  std::vector<std::string> checkpoints;  // most recent last
};

/// Tokenized sentence pairs, in corpus order.
struct EncodedCorpus {
  std::vector<TokenSeq> sources;
  std::vector<TokenSeq> targets;
};

EncodedCorpus encode_corpus(const ParallelCorpus& corpus, const Vocab& vocab);

/// Consecutive index ranges whose source plus target tokens fit
/// `batch_tokens` (a longer pair forms a batch on its own).
std::vector<std::vector<std::size_t>> make_batches(const EncodedCorpus& data, const std::vector<std::size_t>& order,
                                                   int batch_tokens);

/// Held-out teacher-forced accuracy and mean cross entropy.
TokenAccuracy evaluate(Model<float>& model, const EncodedCorpus& data, int batch_tokens = 4096);

using StepCallback = std::function<void(std::int64_t step, double loss)>;

/// Adam with inverse-sqrt warmup; shuffles every epoch; validates every
/// `valid_interval` steps and stops after `patience` validations without a
/// lower held-out loss. Model dropout is taken from the train config.
TrainResult train(Model<float>& model, const ParallelCorpus& train_set, const ParallelCorpus& valid_set,
                  const TrainConfig& config, const StepCallback& on_step = {});

void write_loss_log(const std::vector<LossLogEntry>& log, const std::string& path);

}  // namespace moce
