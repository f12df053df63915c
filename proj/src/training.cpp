#include "moce/training.hpp"

#include "moce/checkpoint.hpp"
#include "moce/optim.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace moce {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("train config: " + m); };
  if (!(learning_rate >= 0.0)) fail("learning rate must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0,1)");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) fail("label smoothing must be in [0,1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) fail("Adam betas must be in [0,1)");
  if (eps <= 0.0) fail("eps must be positive");
  if (batch_tokens < 1) fail("batch_tokens must be positive");
  if (warmup_steps < 0) fail("warmup must be >= 0");
  if (patience < 1) fail("patience must be >= 1");
  if (valid_interval < 1) fail("valid_interval must be positive");
  if (checkpoint_interval < 0) fail("checkpoint_interval must be >= 0");
  if (max_steps < 0) fail("max_steps must be >= 0");
}

EncodedCorpus encode_corpus(const ParallelCorpus& corpus, const Vocab& vocab) {
  corpus.validate(vocab);
  EncodedCorpus out;
  for (const auto& r : corpus.records) {
    out.sources.push_back(encode(r.src_text, r.src_lang, vocab));
    out.targets.push_back(encode(r.tgt_text, r.tgt_lang, vocab));
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(const EncodedCorpus& data, const std::vector<std::size_t>& order,
                                                   int batch_tokens) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t tokens = 0;
  for (std::size_t i : order) {
    const std::size_t n = data.sources[i].ids.size() + data.targets[i].ids.size();
    if (!current.empty() && tokens + n > static_cast<std::size_t>(batch_tokens)) {
      batches.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(i);
    tokens += n;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

namespace {

template <typename T>
std::vector<T> pick(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

}  // namespace

TokenAccuracy evaluate(Model<float>& model, const EncodedCorpus& data, int batch_tokens) {
  std::vector<std::size_t> order(data.sources.size());
  std::iota(order.begin(), order.end(), 0);
  TokenAccuracy total;
  double loss_sum = 0.0;
  for (const auto& b : make_batches(data, order, batch_tokens)) {
    const auto src = pick(data.sources, b), tgt = pick(data.targets, b);
    const auto acc = evaluate_batch(model, std::span<const TokenSeq>(src), std::span<const TokenSeq>(tgt));
    total.correct += acc.correct;
    total.total += acc.total;
    loss_sum += acc.loss * static_cast<double>(acc.total);
  }
  total.loss = total.total ? loss_sum / static_cast<double>(total.total) : 0.0;
  return total;
}

TrainResult train(Model<float>& model, const ParallelCorpus& train_set, const ParallelCorpus& valid_set,
                  const TrainConfig& config, const StepCallback& on_step) {
  config.validate();
  if (train_set.records.empty()) throw Error("train: empty training corpus");
  if (valid_set.records.empty()) throw Error("train: empty validation corpus");
  const auto train_data = encode_corpus(train_set, model.vocab);
  const auto valid_data = encode_corpus(valid_set, model.vocab);
  model.config.dropout = config.dropout;
  if (!config.checkpoint_dir.empty()) std::filesystem::create_directories(config.checkpoint_dir);

  auto params = model.parameters();
  AdamState<float> adam;
  adam.beta1 = config.beta1;
  adam.beta2 = config.beta2;
  adam.eps = config.eps;
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train_data.sources.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  result.best_valid_loss = std::numeric_limits<double>::infinity();
  int bad_validations = 0;
  double window_loss = 0.0;
  std::int64_t window_steps = 0;
  std::vector<std::vector<std::size_t>> batches;
  std::size_t next_batch = 0;

  auto validate_now = [&](std::int64_t step) {
    const auto acc = evaluate(model, valid_data, config.batch_tokens);
    LossLogEntry e{step, window_steps ? window_loss / static_cast<double>(window_steps) : 0.0, acc.loss, acc.accuracy()};
    result.log.push_back(e);
    result.final_valid_accuracy = e.valid_accuracy;
    window_loss = 0.0;
    window_steps = 0;
    if (acc.loss < result.best_valid_loss) {
      result.best_valid_loss = acc.loss;
      bad_validations = 0;
    } else {
      ++bad_validations;
    }
    if (config.target_accuracy && e.valid_accuracy >= *config.target_accuracy) {
      result.reached_target = true;
      return true;
    }
    if (bad_validations >= config.patience) {
      result.early_stopped = true;
      return true;
    }
    return false;
  };

  for (std::int64_t step = 1; step <= config.max_steps; ++step) {
    if (next_batch == batches.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      batches = make_batches(train_data, order, config.batch_tokens);
      next_batch = 0;
    }
    const auto& b = batches[next_batch++];
    const auto src = pick(train_data.sources, b), tgt = pick(train_data.targets, b);
    for (auto* p : params) p->zero_grad();
    Tape<float> tape;
    ForwardOptions fwd;
    fwd.training = true;
    fwd.dropout_seed = config.seed * 1000003u + static_cast<std::uint64_t>(step);
    auto loss = forward_loss(tape, model, std::span<const TokenSeq>(src), std::span<const TokenSeq>(tgt),
                             config.label_smoothing, fwd);
    const double value = loss.scalar();
    if (!std::isfinite(value))
      throw Error("train: non-finite loss " + std::to_string(value) + " at step " + std::to_string(step) + " (batch of " +
                  std::to_string(b.size()) + " pairs)");
    tape.backward(loss);
    adam_step(std::span<Parameter<float>* const>(params), adam, inverse_sqrt_lr(step, config.learning_rate, config.warmup_steps));
    result.steps = step;
    window_loss += value;
    ++window_steps;
    if (on_step) on_step(step, value);

    if (config.checkpoint_interval > 0 && !config.checkpoint_dir.empty() && step % config.checkpoint_interval == 0) {
      const auto path = (std::filesystem::path(config.checkpoint_dir) / ("checkpoint_" + std::to_string(step) + ".bin")).string();
      save_checkpoint(model, path);
      result.checkpoints.push_back(path);
      while (config.keep_checkpoints > 0 && result.checkpoints.size() > static_cast<std::size_t>(config.keep_checkpoints)) {
        std::filesystem::remove(result.checkpoints.front());
        result.checkpoints.erase(result.checkpoints.begin());
      }
    }
    if (step % config.valid_interval == 0 && validate_now(step)) break;
  }
  if (result.log.empty() || result.log.back().step != result.steps) validate_now(result.steps);
  return result;
}

void write_loss_log(const std::vector<LossLogEntry>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write loss log '" + path + "'");
  out.precision(8);
  for (const auto& e : log) out << e.step << '\t' << e.train_loss << '\t' << e.valid_loss << '\n';
}

}  // namespace moce
