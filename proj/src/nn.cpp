#include "ffsc/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ffsc/kernels.hpp"
#include "ffsc/rng.hpp"

namespace ffsc::nn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "relu";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw InvalidSpecError("unknown activation '" + s + "'");
}

std::string to_string(AdapterKind k) {
  return k == AdapterKind::low_rank ? "low_rank" : "full_residual";
}

AdapterKind adapter_kind_from_string(const std::string& s) {
  if (s == "low_rank") return AdapterKind::low_rank;
  if (s == "full_residual") return AdapterKind::full_residual;
  throw InvalidSpecError("unknown adapter kind '" + s + "'");
}

Model::Model(std::vector<std::size_t> layer_dims, Activation activation)
    : dims_(std::move(layer_dims)), activation_(activation) {
  if (dims_.size() < 2) throw StructuralError("model needs at least one layer");
  for (auto d : dims_) {
    if (d == 0) throw StructuralError("layer dimensions must be positive");
  }
  adapters_.assign(num_layers(), std::nullopt);
  layout();
}

Model Model::initialized(std::vector<std::size_t> layer_dims, Activation activation,
                         std::uint64_t seed) {
  Model m(std::move(layer_dims), activation);
  Rng rng = make_rng(seed, 0x11);
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(m.in_dim(l) + m.out_dim(l)));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& w : m.weights(l)) w = dist(rng);
  }
  return m;
}

void Model::layout() {
  w_off_.assign(num_layers(), 0);
  b_off_.assign(num_layers(), 0);
  a1_off_.assign(num_layers(), 0);
  a2_off_.assign(num_layers(), 0);
  std::size_t off = 0;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    w_off_[l] = off;
    off += in_dim(l) * out_dim(l);
    b_off_[l] = off;
    off += out_dim(l);
  }
  base_count_ = off;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const auto& a = adapters_[l];
    if (!a) continue;
    a1_off_[l] = off;
    if (a->kind == AdapterKind::low_rank) {
      off += out_dim(l) * a->rank;
      a2_off_[l] = off;
      off += a->rank * in_dim(l);
    } else {
      off += out_dim(l) * in_dim(l);
    }
  }
  params_.resize(off, 0.0);
}

std::span<double> Model::weights(std::size_t l) {
  return {params_.data() + w_off_[l], in_dim(l) * out_dim(l)};
}
std::span<const double> Model::weights(std::size_t l) const {
  return {params_.data() + w_off_[l], in_dim(l) * out_dim(l)};
}
std::span<double> Model::bias(std::size_t l) { return {params_.data() + b_off_[l], out_dim(l)}; }
std::span<const double> Model::bias(std::size_t l) const {
  return {params_.data() + b_off_[l], out_dim(l)};
}

bool Model::has_adapters() const {
  return std::any_of(adapters_.begin(), adapters_.end(), [](const auto& a) { return a.has_value(); });
}

std::span<double> Model::adapter_first(std::size_t l) {
  const auto& a = adapters_.at(l);
  if (!a) throw StateError("layer has no adapter");
  const std::size_t n = a->kind == AdapterKind::low_rank ? out_dim(l) * a->rank : out_dim(l) * in_dim(l);
  return {params_.data() + a1_off_[l], n};
}
std::span<const double> Model::adapter_first(std::size_t l) const {
  return const_cast<Model*>(this)->adapter_first(l);
}
std::span<double> Model::adapter_second(std::size_t l) {
  const auto& a = adapters_.at(l);
  if (!a || a->kind != AdapterKind::low_rank) throw StateError("layer has no low-rank adapter");
  return {params_.data() + a2_off_[l], a->rank * in_dim(l)};
}
std::span<const double> Model::adapter_second(std::size_t l) const {
  return const_cast<Model*>(this)->adapter_second(l);
}

std::size_t Model::backbone_parameter_count() const {
  return num_layers() == 0 ? 0 : w_off_[num_layers() - 1];
}

std::vector<double> Model::backbone_parameters() const {
  return {params_.begin(), params_.begin() + static_cast<std::ptrdiff_t>(backbone_parameter_count())};
}

std::vector<bool> Model::active_mask() const {
  std::vector<bool> mask(params_.size(), gates_on_);
  std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(base_count_), true);
  return mask;
}

namespace {

void apply_activation(Activation act, std::span<const double> z, std::span<double> h) {
  switch (act) {
    case Activation::relu:
      for (std::size_t i = 0; i < z.size(); ++i) h[i] = z[i] > 0.0 ? z[i] : 0.0;
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < z.size(); ++i) h[i] = std::tanh(z[i]);
      break;
    case Activation::identity:
      std::copy(z.begin(), z.end(), h.begin());
      break;
  }
}

// dz = dh * act'(z); h is the activation output (reused for tanh).
void activation_backward(Activation act, std::span<const double> z, std::span<const double> h,
                         std::span<const double> dh, std::span<double> dz) {
  switch (act) {
    case Activation::relu:
      for (std::size_t i = 0; i < z.size(); ++i) dz[i] = z[i] > 0.0 ? dh[i] : 0.0;
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < z.size(); ++i) dz[i] = dh[i] * (1.0 - h[i] * h[i]);
      break;
    case Activation::identity:
      std::copy(dh.begin(), dh.end(), dz.begin());
      break;
  }
}

bool adapter_active(const Model& m, std::size_t l) { return m.gates_on() && m.adapter(l).has_value(); }

}  // namespace

ForwardCache forward_pass(const Model& model, const Matrix& inputs, std::size_t layers) {
  if (layers > model.num_layers()) throw StructuralError("forward_pass: too many layers requested");
  if (inputs.cols() != model.input_dim()) {
    std::ostringstream os;
    os << "input width " << inputs.cols() << " does not match model input " << model.input_dim();
    throw StructuralError(os.str());
  }
  const std::size_t n = inputs.rows();
  ForwardCache cache;
  cache.layers_run = layers;
  cache.reached_head = layers == model.num_layers();
  cache.inputs.reserve(layers + 1);
  cache.pre.reserve(layers);
  cache.low_rank_hidden.resize(layers);
  cache.inputs.push_back(inputs);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = model.in_dim(l), out = model.out_dim(l);
    const Matrix& h = cache.inputs[l];
    Matrix z(n, out);
    kernels::gemm_nt(h.flat(), model.weights(l), z.flat(), n, out, in);
    const auto b = model.bias(l);
    for (std::size_t i = 0; i < n; ++i) {
      auto zr = z.row(i);
      for (std::size_t j = 0; j < out; ++j) zr[j] += b[j];
    }
    if (adapter_active(model, l)) {
      const auto& spec = *model.adapter(l);
      if (spec.kind == AdapterKind::low_rank) {
        Matrix u(n, spec.rank);
        kernels::gemm_nt(h.flat(), model.adapter_second(l), u.flat(), n, spec.rank, in);
        kernels::gemm_nt(u.flat(), model.adapter_first(l), z.flat(), n, out, spec.rank, true);
        cache.low_rank_hidden[l] = std::move(u);
      } else {
        kernels::gemm_nt(h.flat(), model.adapter_first(l), z.flat(), n, out, in, true);
      }
    }
    for (double v : z.flat()) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite activation in layer " + std::to_string(l));
      }
    }
    const bool is_head = l + 1 == model.num_layers();
    if (!is_head) {
      Matrix act(n, out);
      apply_activation(model.activation(), z.flat(), act.flat());
      cache.inputs.push_back(std::move(act));
    }
    cache.pre.push_back(std::move(z));
  }
  return cache;
}

void backward_pass(const Model& model, const ForwardCache& cache, const Matrix& output_grad,
                   std::span<double> grad) {
  if (grad.size() != model.parameter_count()) throw StructuralError("gradient buffer length mismatch");
  const std::size_t layers = cache.layers_run;
  if (layers == 0) return;
  const std::size_t n = cache.inputs[0].rows();
  const bool ran_head = cache.reached_head;
  Matrix dh = output_grad;
  const auto params = model.parameters();
  for (std::size_t step = 0; step < layers; ++step) {
    const std::size_t l = layers - 1 - step;
    const std::size_t in = model.in_dim(l), out = model.out_dim(l);
    const Matrix& h = cache.inputs[l];
    Matrix dz(n, out);
    if (ran_head && l + 1 == layers) {
      dz = dh;
    } else {
      activation_backward(model.activation(), cache.pre[l].flat(), cache.inputs[l + 1].flat(),
                          dh.flat(), dz.flat());
    }
    const std::size_t w_off = static_cast<std::size_t>(model.weights(l).data() - params.data());
    const std::size_t b_off = static_cast<std::size_t>(model.bias(l).data() - params.data());
    kernels::gemm_tn(dz.flat(), h.flat(), grad.subspan(w_off, out * in), out, in, n, true);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = dz.row(i);
      for (std::size_t j = 0; j < out; ++j) grad[b_off + j] += r[j];
    }
    const bool need_dh = l > 0;
    Matrix dprev;
    if (need_dh) {
      dprev = Matrix(n, in);
      kernels::gemm_nn(dz.flat(), model.weights(l), dprev.flat(), n, in, out);
    }
    if (adapter_active(model, l)) {
      const auto& spec = *model.adapter(l);
      const auto first = model.adapter_first(l);
      const std::size_t f_off = static_cast<std::size_t>(first.data() - params.data());
      if (spec.kind == AdapterKind::low_rank) {
        const std::size_t r = spec.rank;
        const Matrix& u = cache.low_rank_hidden[l];
        const auto second = model.adapter_second(l);
        const std::size_t s_off = static_cast<std::size_t>(second.data() - params.data());
        kernels::gemm_tn(dz.flat(), u.flat(), grad.subspan(f_off, out * r), out, r, n, true);
        Matrix du(n, r);
        kernels::gemm_nn(dz.flat(), first, du.flat(), n, r, out);
        kernels::gemm_tn(du.flat(), h.flat(), grad.subspan(s_off, r * in), r, in, n, true);
        if (need_dh) kernels::gemm_nn(du.flat(), second, dprev.flat(), n, in, r, true);
      } else {
        kernels::gemm_tn(dz.flat(), h.flat(), grad.subspan(f_off, out * in), out, in, n, true);
        if (need_dh) kernels::gemm_nn(dz.flat(), first, dprev.flat(), n, in, out, true);
      }
    }
    if (need_dh) dh = std::move(dprev);
  }
}

Matrix logits(const Model& model, const Matrix& inputs) {
  ForwardCache cache = forward_pass(model, inputs, model.num_layers());
  return std::move(cache.pre.back());
}

LossGrad forward_backward(const Model& model, const Batch& batch, double weight_decay) {
  const std::size_t n = batch.inputs.rows();
  if (n == 0) throw StructuralError("forward_backward: empty batch");
  if (batch.labels.size() != n) throw StructuralError("forward_backward: label count mismatch");
  if (weight_decay < 0.0) throw InvalidSpecError("weight decay must be non-negative");
  const std::size_t classes = model.output_dim();
  for (int y : batch.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw StructuralError("label " + std::to_string(y) + " outside output range");
    }
  }
  ForwardCache cache = forward_pass(model, batch.inputs, model.num_layers());
  const Matrix& z = cache.pre.back();
  Matrix dz(n, classes);
  double ce = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto zr = z.row(i);
    const double zmax = *std::max_element(zr.begin(), zr.end());
    double sum = 0.0;
    for (double v : zr) sum += std::exp(v - zmax);
    const double lse = zmax + std::log(sum);
    const auto y = static_cast<std::size_t>(batch.labels[i]);
    ce += lse - zr[y];
    auto dr = dz.row(i);
    for (std::size_t c = 0; c < classes; ++c) dr[c] = std::exp(zr[c] - lse) * inv_n;
    dr[y] -= inv_n;
  }
  ce *= inv_n;

  LossGrad out;
  out.grad.assign(model.parameter_count(), 0.0);
  backward_pass(model, cache, dz, out.grad);

  double reg = 0.0;
  if (weight_decay > 0.0) {
    const auto params = model.parameters();
    const auto mask = model.active_mask();
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!mask[i]) continue;
      sq += params[i] * params[i];
      out.grad[i] += weight_decay * params[i];
    }
    reg = 0.5 * weight_decay * sq;
  }
  out.loss = ce + reg;
  out.logits = std::move(cache.pre.back());
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
  return out;
}

Model attach_adapters(const Model& model, const AdapterSpec& spec, std::uint64_t seed) {
  if (model.num_layers() < 2) throw InvalidSpecError("adapters need at least one backbone layer");
  if (model.has_adapters()) throw StateError("model already has adapters");
  if (spec.kind == AdapterKind::low_rank) {
    if (spec.rank == 0) throw InvalidSpecError("low-rank adapter rank must be positive");
    for (std::size_t l = 0; l + 1 < model.num_layers(); ++l) {
      if (spec.rank >= std::min(model.in_dim(l), model.out_dim(l))) {
        std::ostringstream os;
        os << "rank " << spec.rank << " must be below min(in, out) = "
           << std::min(model.in_dim(l), model.out_dim(l)) << " for layer " << l;
        throw InvalidSpecError(os.str());
      }
    }
  }
  Model out = model;
  for (std::size_t l = 0; l + 1 < model.num_layers(); ++l) out.adapters_[l] = spec;
  out.gates_on_ = false;
  out.layout();
  if (spec.kind == AdapterKind::low_rank) {
    Rng rng = make_rng(seed, 0xada);
    for (std::size_t l = 0; l + 1 < out.num_layers(); ++l) {
      const double limit = 1.0 / std::sqrt(static_cast<double>(out.in_dim(l)));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (double& a : out.adapter_second(l)) a = dist(rng);
    }
  }
  return out;
}

Model detach_adapters(const Model& model) {
  Model out = model;
  out.adapters_.assign(model.num_layers(), std::nullopt);
  out.gates_on_ = false;
  out.layout();
  return out;
}

Model set_gates(const Model& model, bool on) {
  if (on && !model.has_adapters()) throw StateError("cannot switch gates on: model has no adapters");
  Model out = model;
  out.gates_on_ = on;
  return out;
}

std::vector<double> param_vector(const Model& model) {
  const auto p = model.parameters();
  return {p.begin(), p.end()};
}

Model unflatten(const Model& model, std::span<const double> params) {
  if (params.size() != model.parameter_count()) {
    std::ostringstream os;
    os << "parameter vector length " << params.size() << " does not match model parameter count "
       << model.parameter_count();
    throw StructuralError(os.str());
  }
  Model out = model;
  std::copy(params.begin(), params.end(), out.parameters().begin());
  return out;
}

double gradient_check(const Model& model, const Batch& batch, double step, double weight_decay) {
  if (!(step > 0.0)) throw InvalidSpecError("gradient_check step must be positive");
  const LossGrad base = forward_backward(model, batch, weight_decay);
  Model probe = model;
  auto p = probe.parameters();
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    const double hi = orig + step, lo = orig - step;
    p[i] = hi;
    const double up = forward_backward(probe, batch, weight_decay).loss;
    p[i] = lo;
    const double down = forward_backward(probe, batch, weight_decay).loss;
    p[i] = orig;
    const double fd = (up - down) / (hi - lo);
    const double a = base.grad[i];
    worst = std::max(worst, std::abs(a - fd) / (std::abs(a) + std::abs(fd) + 1e-12));
  }
  return worst;
}

}  // namespace ffsc::nn
