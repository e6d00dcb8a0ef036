#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convprobe/tensor.hpp"

namespace convprobe {

enum class CodeKind { categorical, binary };

struct CodeSpec {
  CodeKind kind = CodeKind::categorical;
  std::size_t width = 8;
  bool operator==(const CodeSpec&) const = default;
};

struct NetConfig {
  std::size_t input_len = 16384;
  std::size_t n_layers = 5;
  std::size_t base_channels = 64;
  std::size_t kernel_width = 25;
  std::size_t stride = 4;
  double leaky_slope = 0.2;
  int phase_shuffle_n = 2;
  std::size_t latent_z_dim = 100;
  CodeSpec code;

  // WaveGAN-sized network: 16384 samples, 5 layers, 64..1024 channels.
  static NetConfig full_preset();
  // 4096 samples, 4 layers, 16..128 channels.
  static NetConfig desk_preset();

  void validate() const;
  // Channel count of conv layer l (1-based) in the Discriminator / Q-network.
  std::size_t channels(std::size_t layer) const { return base_channels << (layer - 1); }
  // Time length after conv layer l (1-based).
  std::size_t layer_len(std::size_t layer) const;
  // Same-style padding giving T_out = T_in / stride.
  std::size_t pad() const { return (kernel_width - stride + 1) / 2; }
  std::size_t latent_dim() const { return latent_z_dim + code.width; }
  std::size_t feature_dim() const { return channels(n_layers) * layer_len(n_layers); }

  bool operator==(const NetConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetConfig& cfg);
void from_json(const nlohmann::json& j, NetConfig& cfg);

template <typename T>
struct ConvLayerParams {
  BasicTensor3<T> w;
  std::vector<T> b;
};

// Conv stack shared by the Discriminator (1 output) and the Q-network (code width).
template <typename T>
struct StackParams {
  std::vector<ConvLayerParams<T>> conv;
  std::vector<T> dense_w;  // (outputs, feature_dim)
  std::vector<T> dense_b;
  std::size_t outputs = 0;
};

template <typename T>
struct GeneratorParams {
  std::vector<T> dense_w;  // (channels(L) * layer_len(L), latent_dim)
  std::vector<T> dense_b;
  std::vector<ConvLayerParams<T>> deconv;  // weights (C_in_T, C_out_T, K)
};

// Named view of one parameter tensor.
template <typename T>
struct ParamRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<T> values;
};

template <typename T>
std::vector<ParamRef<T>> param_refs(StackParams<T>& p, const std::string& prefix);
template <typename T>
std::vector<ParamRef<T>> param_refs(GeneratorParams<T>& p, const std::string& prefix);

template <typename T>
StackParams<T> make_stack(const NetConfig& cfg, std::size_t outputs);
template <typename T>
GeneratorParams<T> make_generator(const NetConfig& cfg);

// Glorot-uniform weights, zero biases.
template <typename T>
void init_params(std::vector<ParamRef<T>> refs, std::mt19937_64& rng);

template <typename To, typename From>
StackParams<To> cast_params(const StackParams<From>& p);
template <typename To, typename From>
GeneratorParams<To> cast_params(const GeneratorParams<From>& p);

struct ForwardOptions {
  bool capture = false;
  bool shuffle = false;
  std::mt19937_64* rng = nullptr;  // required when shuffle is on and phase_shuffle_n > 0
};

// Cached intermediates for the backward pass.
template <typename T>
struct StackTrace {
  std::vector<BasicTensor3<T>> inputs;   // input of conv layer l
  std::vector<BasicTensor3<T>> pre;      // conv output before Leaky ReLU
  std::vector<std::vector<int>> shifts;  // empty when the layer was not shuffled
  BasicTensor3<T> features;              // input of the dense head
};

template <typename T>
struct StackOutput {
  std::vector<T> logits;  // (batch, outputs)
  // Post-Leaky-ReLU, pre-shuffle tensors, one per conv layer, when capturing.
  std::vector<BasicTensor3<T>> layer_activations;
};

template <typename T>
StackOutput<T> stack_forward(const NetConfig& cfg, const StackParams<T>& p,
                             const BasicTensor3<T>& x, const ForwardOptions& opt,
                             StackTrace<T>* trace = nullptr);

// Backpropagates dL/dlogits. Accumulates parameter gradients into grads when
// non-null; returns dL/dx when want_input_grad is set (empty tensor otherwise).
template <typename T>
BasicTensor3<T> stack_backward(const NetConfig& cfg, const StackParams<T>& p,
                               const StackTrace<T>& trace, std::span<const T> dlogits,
                               StackParams<T>* grads, bool want_input_grad);

struct PenaltyResult {
  double penalty = 0;              // lambda * mean_b (||grad_x D(x_b)|| - 1)^2
  std::vector<double> grad_norms;  // ||grad_x D(x_b)|| per item
};

// WGAN-GP penalty on a single-output critic and its exact parameter gradient.
// The critic is piecewise linear in its input, so the input gradient is a
// linear function of the weights given the activation pattern; its derivative
// is obtained by pushing dPenalty/dgrad forward through the linearized network.
template <typename T>
PenaltyResult gradient_penalty(const NetConfig& cfg, const StackParams<T>& critic,
                               const BasicTensor3<T>& x_hat, double lambda,
                               const ForwardOptions& opt, StackParams<T>* grads);

template <typename T>
struct GeneratorTrace {
  std::size_t batch = 0;
  std::vector<T> latent;
  BasicTensor3<T> dense_pre;             // dense output reshaped, before Leaky ReLU
  std::vector<BasicTensor3<T>> inputs;   // input of transposed conv layer l
  std::vector<BasicTensor3<T>> pre;      // transposed conv output before activation
  BasicTensor3<T> output;                // tanh output
};

// latent is (batch, latent_dim) row-major. Output is (batch, 1, input_len).
template <typename T>
BasicTensor3<T> generator_forward(const NetConfig& cfg, const GeneratorParams<T>& p,
                                  std::span<const T> latent, std::size_t batch,
                                  GeneratorTrace<T>* trace = nullptr);

// Returns dL/dlatent and accumulates parameter gradients when grads is non-null.
template <typename T>
std::vector<T> generator_backward(const NetConfig& cfg, const GeneratorParams<T>& p,
                                  const GeneratorTrace<T>& trace, const BasicTensor3<T>& gout,
                                  GeneratorParams<T>* grads);

struct QNetOutput {
  std::vector<float> logits;
  std::vector<Tensor3> layer_activations;
};

// Q-network forward pass as used for analysis and classification.
QNetOutput q_network_forward(const Tensor3& x, const StackParams<float>& params,
                             const NetConfig& cfg, bool capture, bool shuffle_enabled,
                             std::mt19937_64* rng = nullptr);

}  // namespace convprobe
