#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "convprobe/audio.hpp"
#include "convprobe/container.hpp"
#include "convprobe/network.hpp"

namespace convprobe {

// Latent batch: row b is z (uniform(-1, 1), latent_z_dim values) followed by
// the code (one-hot or bits).
struct LatentBatch {
  std::size_t batch = 0;
  std::vector<float> latent;           // (batch, latent_dim)
  std::vector<std::size_t> categories;  // categorical: the hot index per item
  std::vector<std::uint8_t> bits;       // binary: (batch, width)
};

LatentBatch sample_latent(const NetConfig& cfg, std::size_t batch, std::mt19937_64& rng);

template <typename T>
struct DLossResult {
  double loss = 0;
  double mean_fake = 0;
  double mean_real = 0;
  double penalty = 0;
};

// x_hat = eps * real + (1 - eps) * fake with one eps ~ U(0, 1) per item.
template <typename T>
BasicTensor3<T> interpolate(const BasicTensor3<T>& real, const BasicTensor3<T>& fake,
                            std::mt19937_64& rng);

// mean D(fake) - mean D(real) + lambda * mean (||grad D(x_hat)|| - 1)^2.
// Parameter gradients accumulate into grads when non-null. Phase shuffle uses
// rng when shuffle is on.
template <typename T>
DLossResult<T> d_loss_wgan_gp(const NetConfig& cfg, const StackParams<T>& critic,
                              const BasicTensor3<T>& real, const BasicTensor3<T>& fake,
                              double lambda, std::mt19937_64& rng, bool shuffle,
                              std::type_identity_t<StackParams<T>>* grads = nullptr);

struct GQLoss {
  double total = 0;   // adversarial + q_weight * q_term
  double adversarial = 0;  // -mean D(fake)
  double q_term = 0;  // mean cross-entropy
  std::vector<double> d_fake_logits;  // dTotal / dD(fake), per item
  std::vector<double> d_q_logits;     // dTotal / dq_logits, (batch, width)
};

// Categorical: softmax cross-entropy against the one-hot code. Binary: sum of
// per-bit sigmoid cross-entropies. Both averaged over the batch.
GQLoss g_q_loss(std::span<const double> fake_logits_d, std::span<const double> q_logits,
                const LatentBatch& code, const CodeSpec& spec, double q_weight = 1.0);

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  std::size_t n_critic = 5;
  double lambda_gp = 10.0;
  double lr_d = 1e-4;
  double lr_g = 1e-4;
  double lr_q = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double q_weight = 1.0;
  std::size_t checkpoint_interval = 500;
  std::size_t eval_interval = 250;  // 0 disables periodic evaluation
  double collapse_floor = 1e-4;    // RMS pairwise distance of generated audio
  std::size_t collapse_warmup = 50;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
// JSON object or key=value lines ('#' starts a comment).
nlohmann::json parse_config_text(const std::string& text);

struct LossRow {
  std::size_t step = 0;
  double d_loss = 0;
  double g_loss = 0;
  double q_loss = 0;
};

template <typename P>
struct AdamMoments {
  P m;
  P v;
  std::uint64_t t = 0;
};

struct TrainState {
  NetConfig net;
  TrainConfig train;
  std::size_t step = 0;
  GeneratorParams<float> g;
  StackParams<float> d;
  StackParams<float> q;
  AdamMoments<GeneratorParams<float>> adam_g;
  AdamMoments<StackParams<float>> adam_d;
  AdamMoments<StackParams<float>> adam_q;
  std::mt19937_64 rng;
  std::deque<LossRow> history;  // most recent rows, bounded
  std::uint64_t q_calls_generated = 0;
  std::uint64_t q_calls_real = 0;
  double best_accuracy = -1;
  std::size_t best_step = 0;

  static constexpr std::size_t kHistory = 256;
};

TrainState init_train_state(const NetConfig& net, const TrainConfig& train);

Container checkpoint_container(const TrainState& s);
TrainState state_from_container(const Container& c);
void save_checkpoint(const std::filesystem::path& path, const TrainState& s);
TrainState load_checkpoint(const std::filesystem::path& path);

// Generated audio. The Q update only accepts this type, so corpus audio
// cannot reach the Q-network during training.
struct GeneratedBatch {
  Tensor3 audio;
  GeneratorTrace<float> trace;
  LatentBatch code;
};

// One generator/Q update preceded by n_critic critic updates.
LossRow train_step(TrainState& s, const std::vector<AudioToken>& train_set);

enum class TrainStatus { completed, collapsed, diverged };

struct TrainHooks {
  std::function<void(const LossRow&)> on_step;
  std::function<void(const TrainState&)> on_checkpoint;
  std::function<void(const TrainState&, double accuracy)> on_best;
};

struct TrainResult {
  TrainStatus status = TrainStatus::completed;
  std::string message;
  TrainState state;  // final state, or the last good checkpoint after divergence
};

TrainResult train(const CorpusSplit& corpus, const NetConfig& net, const TrainConfig& train_cfg,
                  const TrainHooks& hooks = {});
// Continues an existing state until it reaches target_step.
TrainResult resume(TrainState state, const CorpusSplit& corpus, std::size_t target_step,
                   const TrainHooks& hooks = {});

struct QEvaluation {
  std::vector<std::string> classes;              // sorted class labels (rows)
  std::vector<std::vector<std::size_t>> confusion;  // rows = true class, cols = code
  std::vector<long> code_for_class;              // matched code per class, -1 if none
  double accuracy = 0;
};

// Code index per item: argmax for categorical, bit pattern for binary.
std::vector<std::size_t> predicted_codes(std::span<const float> logits, const CodeSpec& spec);
std::size_t code_count(const CodeSpec& spec);

// Accuracy under the best one-to-one code-to-class assignment.
QEvaluation evaluate_codes(const std::vector<std::string>& labels,
                           const std::vector<std::size_t>& codes, std::size_t n_codes);

QEvaluation eval_q_accuracy(const std::vector<AudioToken>& test, const StackParams<float>& q,
                            const NetConfig& cfg);

// Maximum-weight assignment of every row to a distinct column (rows <=
// columns); returns the column chosen for each row.
std::vector<std::size_t> hungarian_max(const std::vector<std::vector<double>>& weight);

Tensor3 batch_tokens(const std::vector<AudioToken>& tokens, std::size_t begin, std::size_t end,
                     std::size_t input_len);

}  // namespace convprobe
