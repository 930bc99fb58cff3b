#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "ls4/tensor.hpp"

namespace ls4::ad {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    bool valid() const { return tape_ != nullptr; }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class BackwardContext;
using BackwardFn = std::function<void(BackwardContext&)>;

/// Dynamic reverse-mode tape over whole tensors. Single writer; one tape per thread.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value);
    Var constant(Tensor value);
    Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

    /// Accumulates d(root)/d(node) into every node that requires a gradient. Root must be scalar.
    void backward(Var root);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    /// Gradient of the last backward() root; zeros if the node was not reached.
    Tensor grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

private:
    friend class BackwardContext;
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
    };
    std::deque<Node> nodes_;
};

class BackwardContext {
public:
    BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

    const Tensor& grad_output() const { return tape_.nodes_[node_].grad; }
    const Tensor& output() const { return tape_.nodes_[node_].value; }
    const Tensor& input(std::size_t k) const { return tape_.nodes_[input_id(k)].value; }
    bool wants(std::size_t k) const { return tape_.nodes_[input_id(k)].requires_grad; }
    /// Gradient accumulator of input k, allocated as zeros on first use.
    Tensor& grad_input(std::size_t k);

private:
    std::size_t input_id(std::size_t k) const { return tape_.nodes_[node_].inputs[k]; }
    Tape& tape_;
    std::size_t node_;
};

// ---- elementwise and reductions -------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double c);
Var square(Var a);
Var exp(Var a);
Var log(Var a);
Var gelu(Var a);
Var softplus(Var a);
Var sigmoid(Var a);
Var sum(Var a);
Var mean(Var a);

/// x[..., C] + b[C]
Var add_last(Var x, Var b);
/// x[..., C] * s[C]
Var mul_last(Var x, Var s);

// ---- linear algebra -------------------------------------------------------------

Var matmul(Var a, Var b);
/// y[..., out] = x[..., in] W[out, in]^T + b[out]; pass an invalid Var for no bias.
Var linear(Var x, Var weight, Var bias);
/// Normalizes over the trailing axis, then applies gamma/beta[C].
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);

// ---- shape ----------------------------------------------------------------------

Var reshape(Var x, Shape shape);
Var concat_last(Var a, Var b);
Var slice_last(Var x, std::size_t begin, std::size_t count);
/// Right-shift along axis 1 of a [B, L, C] tensor with zero fill.
Var shift_time(Var x);
/// Mean over axis 1 of [B, L, C] -> [B, C].
Var mean_time(Var x);
/// Repeats a [B, ...] tensor `times` along a new leading block: [times*B, ...].
Var tile_batch(Var x, std::size_t times);

// ---- sequence ops ---------------------------------------------------------------

/// 1-D causal convolution of equal-length signal and kernel.
Var causal_conv(Var signal, Var kernel);
/// Per-channel causal convolution: u[B, L, H] with K[H, L] -> [B, L, H].
Var causal_conv_bank(Var u, Var kernel);

// ---- plain (tape-free) forms shared with step-mode code ---------------------------

double gelu_value(double x);
double gelu_derivative(double x);
double softplus_value(double x);
double sigmoid_value(double x);
Tensor linear_value(const Tensor& x, const Tensor& weight, const Tensor* bias);
Tensor layernorm_value(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor causal_conv_bank_value(const Tensor& u, const Tensor& kernel);

}  // namespace ls4::ad
