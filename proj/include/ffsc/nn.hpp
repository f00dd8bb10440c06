#pragma once

// Multilayer perceptron with optional gated residual adapters.
//
// A model with layer_dims [d0, d1, ..., dL] has L affine layers. Layers
// 0..L-2 form the task-agnostic backbone and apply the activation; layer L-1
// is the linear classification head. The penultimate activations (input of
// the head) are the features used for few-shot adaptation.
//
// Adapters attach to backbone layers and add a residual to the pre-activation:
//
//   z = W h + b + gate * delta h,   delta = B A (low_rank) or M (full_residual)
//
// where gate is 1 when gates are on and 0 otherwise. All parameters live in a
// single flat vector with a fixed ordering: for each layer, W (row-major,
// [out x in]) then b; afterwards, for each adapted layer in order, B [out x r]
// then A [r x in] (low_rank) or M [out x in] (full_residual).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ffsc/matrix.hpp"

namespace ffsc::nn {

enum class Activation { relu, tanh, identity };
enum class AdapterKind { full_residual, low_rank };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);
std::string to_string(AdapterKind k);
AdapterKind adapter_kind_from_string(const std::string& s);

struct AdapterSpec {
  AdapterKind kind = AdapterKind::low_rank;
  std::size_t rank = 1;  // ignored for full_residual

  bool operator==(const AdapterSpec&) const = default;
};

/// Inputs [n x d_in] and labels given as output-unit indices in [0, d_out).
struct Batch {
  Matrix inputs;
  std::vector<int> labels;
};

class Model {
 public:
  Model() = default;
  /// All parameters zero.
  Model(std::vector<std::size_t> layer_dims, Activation activation);

  /// Glorot-uniform weights, zero biases.
  static Model initialized(std::vector<std::size_t> layer_dims, Activation activation,
                           std::uint64_t seed);

  const std::vector<std::size_t>& layer_dims() const { return dims_; }
  std::size_t num_layers() const { return dims_.size() - 1; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }
  /// Width of the penultimate activations.
  std::size_t feature_dim() const { return dims_[dims_.size() - 2]; }
  std::size_t in_dim(std::size_t layer) const { return dims_[layer]; }
  std::size_t out_dim(std::size_t layer) const { return dims_[layer + 1]; }
  Activation activation() const { return activation_; }

  std::span<double> weights(std::size_t layer);
  std::span<const double> weights(std::size_t layer) const;
  std::span<double> bias(std::size_t layer);
  std::span<const double> bias(std::size_t layer) const;

  const std::optional<AdapterSpec>& adapter(std::size_t layer) const { return adapters_[layer]; }
  bool has_adapters() const;
  /// low_rank: B [out x r]; full_residual: M [out x in].
  std::span<double> adapter_first(std::size_t layer);
  std::span<const double> adapter_first(std::size_t layer) const;
  /// low_rank only: A [r x in].
  std::span<double> adapter_second(std::size_t layer);
  std::span<const double> adapter_second(std::size_t layer) const;

  bool gates_on() const { return gates_on_; }

  std::size_t parameter_count() const { return params_.size(); }
  /// Number of W/b entries across all layers (backbone + head).
  std::size_t base_parameter_count() const { return base_count_; }
  /// Number of W/b entries in the backbone layers only (excludes the head).
  std::size_t backbone_parameter_count() const;

  std::span<const double> parameters() const { return params_; }
  std::span<double> parameters() { return params_; }

  /// Copy of the parameters belonging to the backbone layers (phi).
  std::vector<double> backbone_parameters() const;

  /// True for parameters that currently influence the output: every W/b,
  /// plus adapter parameters when gates are on.
  std::vector<bool> active_mask() const;

  bool operator==(const Model&) const = default;

 private:
  friend Model attach_adapters(const Model&, const AdapterSpec&, std::uint64_t);
  friend Model set_gates(const Model&, bool);
  friend Model detach_adapters(const Model&);

  void layout();

  std::vector<std::size_t> dims_;
  Activation activation_ = Activation::relu;
  std::vector<std::optional<AdapterSpec>> adapters_;
  bool gates_on_ = false;
  std::vector<double> params_;
  std::vector<std::size_t> w_off_, b_off_, a1_off_, a2_off_;
  std::size_t base_count_ = 0;
};

/// Per-layer inputs and pre-activations kept for the backward pass.
struct ForwardCache {
  std::vector<Matrix> inputs;  // inputs[l] feeds layer l
  std::vector<Matrix> pre;     // pre-activation of layer l
  std::vector<Matrix> low_rank_hidden;  // h A^T for active low-rank layers
  std::size_t layers_run = 0;
  bool reached_head = false;

  /// Output of the last layer run (logits if the head ran).
  const Matrix& output() const { return reached_head ? pre.back() : inputs[layers_run]; }
};

/// Runs layers [0, layers) on `inputs`. `layers` = num_layers() gives logits;
/// num_layers()-1 stops at the features. Throws NumericError naming the layer
/// on non-finite pre-activations.
ForwardCache forward_pass(const Model& model, const Matrix& inputs, std::size_t layers);

/// Backpropagates `output_grad` (gradient w.r.t. cache.output()) and
/// accumulates parameter gradients into `grad` (flat ordering).
void backward_pass(const Model& model, const ForwardCache& cache, const Matrix& output_grad,
                   std::span<double> grad);

Matrix logits(const Model& model, const Matrix& inputs);

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
  Matrix logits;
};

/// Mean cross-entropy plus (alpha/2)|theta|^2 over active parameters.
LossGrad forward_backward(const Model& model, const Batch& batch, double weight_decay);

/// Adds zero-initialized adapters to every backbone layer (all but the head).
/// low_rank: B = 0, A ~ U(-1/sqrt(in), 1/sqrt(in)) seeded. Gates are off.
Model attach_adapters(const Model& model, const AdapterSpec& spec, std::uint64_t seed = 0);
Model detach_adapters(const Model& model);
Model set_gates(const Model& model, bool on);

std::vector<double> param_vector(const Model& model);
Model unflatten(const Model& model, std::span<const double> params);

/// max_i |analytic_i - fd_i| / (|analytic_i| + |fd_i| + 1e-12) with fd the
/// central difference of the full loss at the given step.
double gradient_check(const Model& model, const Batch& batch, double step,
                      double weight_decay = 0.0);

}  // namespace ffsc::nn
