#include "ls4/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "ls4/fft.hpp"

namespace ls4::ad {

const Tensor& Var::value() const {
    if (!tape_) throw std::logic_error("value() on an unbound Var");
    return tape_->value(id_);
}

Var Tape::leaf(Tensor value) {
    nodes_.push_back(Node{std::move(value), Tensor{}, {}, {}, true});
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), Tensor{}, {}, {}, false});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    Node node;
    node.value = std::move(value);
    for (const Var& v : inputs) {
        if (&v.tape() != this) throw std::invalid_argument("operation mixes Vars from different tapes");
        node.inputs.push_back(v.id());
        node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root) {
    if (&root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
    if (value(root.id()).size() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got shape " +
                                    shape_string(value(root.id()).shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor{};
    nodes_[root.id()].grad = Tensor(nodes_[root.id()].value.shape(), 1.0);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.backward) continue;
        BackwardContext ctx(*this, i);
        n.backward(ctx);
    }
}

Tensor Tape::grad(Var v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
    return n.grad;
}

Tensor& BackwardContext::grad_input(std::size_t k) {
    auto& node = tape_.nodes_[input_id(k)];
    if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0);
    return node.grad;
}

// ---------------------------------------------------------------------------------

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_value(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace {

Tape& tape_of(Var a) { return a.tape(); }

void require_same(Var a, Var b, const char* op) { require_same_shape(a.value(), b.value(), op); }

template <class F, class G>
Var unary(Var a, F f, G df) {
    const Tensor& x = a.value();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return tape_of(a).record(std::move(y), {a}, [df](BackwardContext& ctx) {
        const Tensor& x = ctx.input(0);
        const Tensor& g = ctx.grad_output();
        Tensor& gx = ctx.grad_input(0);
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * df(x[i], ctx.output()[i]);
    });
}

std::size_t last_dim(const Tensor& t, const char* op) {
    if (t.rank() == 0) throw std::invalid_argument(std::string(op) + ": rank-0 tensor");
    return t.shape().back();
}

void require_seq(const Tensor& t, const char* op) {
    if (t.rank() != 3) {
        throw std::invalid_argument(std::string(op) + ": expected [B, L, C], got " + shape_string(t.shape()));
    }
}

}  // namespace

Var add(Var a, Var b) {
    require_same(a, b, "add");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    return tape_of(a).record(std::move(y), {a, b}, [](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        for (std::size_t k = 0; k < 2; ++k) {
            if (!ctx.wants(k)) continue;
            Tensor& gi = ctx.grad_input(k);
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    require_same(a, b, "sub");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    return tape_of(a).record(std::move(y), {a, b}, [](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        if (ctx.wants(0)) {
            Tensor& ga = ctx.grad_input(0);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (ctx.wants(1)) {
            Tensor& gb = ctx.grad_input(1);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    require_same(a, b, "mul");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    return tape_of(a).record(std::move(y), {a, b}, [](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        if (ctx.wants(0)) {
            Tensor& ga = ctx.grad_input(0);
            const Tensor& bv = ctx.input(1);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (ctx.wants(1)) {
            Tensor& gb = ctx.grad_input(1);
            const Tensor& av = ctx.input(0);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var a, double factor) {
    return unary(a, [factor](double x) { return factor * x; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double c) {
    return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var square(Var a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var exp(Var a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var gelu(Var a) {
    return unary(a, gelu_value, [](double x, double) { return gelu_derivative(x); });
}

Var softplus(Var a) {
    return unary(a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

Var sigmoid(Var a) {
    return unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return tape_of(a).record(Tensor::scalar(s), {a}, [](BackwardContext& ctx) {
        const double g = ctx.grad_output()[0];
        Tensor& ga = ctx.grad_input(0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var mean(Var a) {
    const std::size_t n = a.value().size();
    if (n == 0) throw std::invalid_argument("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var add_last(Var x, Var b) {
    const std::size_t c = last_dim(x.value(), "add_last");
    if (b.value().size() != c) throw std::invalid_argument("add_last: bias size mismatch");
    Tensor y = x.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % c];
    return tape_of(x).record(std::move(y), {x, b}, [c](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        if (ctx.wants(0)) {
            Tensor& gx = ctx.grad_input(0);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (ctx.wants(1)) {
            Tensor& gb = ctx.grad_input(1);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
        }
    });
}

Var mul_last(Var x, Var s) {
    const std::size_t c = last_dim(x.value(), "mul_last");
    if (s.value().size() != c) throw std::invalid_argument("mul_last: scale size mismatch");
    Tensor y = x.value();
    const Tensor& sv = s.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= sv[i % c];
    return tape_of(x).record(std::move(y), {x, s}, [c](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        const Tensor& xv = ctx.input(0);
        const Tensor& sv = ctx.input(1);
        if (ctx.wants(0)) {
            Tensor& gx = ctx.grad_input(0);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv[i % c];
        }
        if (ctx.wants(1)) {
            Tensor& gs = ctx.grad_input(1);
            for (std::size_t i = 0; i < g.size(); ++i) gs[i % c] += g[i] * xv[i];
        }
    });
}

// ---------------------------------------------------------------------------------

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstMapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MapMat as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
    return MapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace

Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_string(av.shape()) + " x " +
                                    shape_string(bv.shape()));
    }
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor y(Shape{m, n});
    as_matrix(y, m, n).noalias() = as_matrix(av, m, k) * as_matrix(bv, k, n);
    return tape_of(a).record(std::move(y), {a, b}, [m, k, n](BackwardContext& ctx) {
        const auto g = as_matrix(ctx.grad_output(), m, n);
        if (ctx.wants(0)) as_matrix(ctx.grad_input(0), m, k).noalias() += g * as_matrix(ctx.input(1), k, n).transpose();
        if (ctx.wants(1)) as_matrix(ctx.grad_input(1), k, n).noalias() += as_matrix(ctx.input(0), m, k).transpose() * g;
    });
}

Tensor linear_value(const Tensor& x, const Tensor& weight, const Tensor* bias) {
    if (weight.rank() != 2) throw std::invalid_argument("linear: weight must be [out, in]");
    const std::size_t in = weight.dim(1), out = weight.dim(0);
    if (last_dim(x, "linear") != in) {
        throw std::invalid_argument("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                                    shape_string(weight.shape()));
    }
    if (bias && bias->size() != out) throw std::invalid_argument("linear: bias size mismatch");
    Shape ys = x.shape();
    ys.back() = out;
    Tensor y(ys);
    const std::size_t rows = x.size() / in;
    auto ym = as_matrix(y, rows, out);
    ym.noalias() = as_matrix(x, rows, in) * as_matrix(weight, out, in).transpose();
    if (bias) ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->data().data(), static_cast<Eigen::Index>(out));
    return y;
}

Var linear(Var x, Var weight, Var bias) {
    Tensor y = linear_value(x.value(), weight.value(), bias.valid() ? &bias.value() : nullptr);
    std::vector<Var> inputs{x, weight};
    if (bias.valid()) inputs.push_back(bias);
    const bool has_bias = bias.valid();
    return tape_of(x).record(std::move(y), std::move(inputs), [has_bias](BackwardContext& ctx) {
        const Tensor& xv = ctx.input(0);
        const Tensor& wv = ctx.input(1);
        const std::size_t in = wv.dim(1), out = wv.dim(0);
        const std::size_t rows = xv.size() / in;
        const auto g = as_matrix(ctx.grad_output(), rows, out);
        if (ctx.wants(0)) as_matrix(ctx.grad_input(0), rows, in).noalias() += g * as_matrix(wv, out, in);
        if (ctx.wants(1)) as_matrix(ctx.grad_input(1), out, in).noalias() += g.transpose() * as_matrix(xv, rows, in);
        if (has_bias && ctx.wants(2))
            Eigen::Map<Eigen::RowVectorXd>(ctx.grad_input(2).data().data(), static_cast<Eigen::Index>(out)) +=
                g.colwise().sum();
    });
}

Tensor layernorm_value(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t c = last_dim(x, "layernorm");
    if (gamma.size() != c || beta.size() != c) throw std::invalid_argument("layernorm: affine size mismatch");
    Tensor y(x.shape());
    const std::size_t rows = x.size() / c;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * c;
        double mu = 0.0;
        for (std::size_t i = 0; i < c; ++i) mu += xr[i];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < c; ++i) y[r * c + i] = (xr[i] - mu) * inv * gamma[i] + beta[i];
    }
    return y;
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
    Tensor y = layernorm_value(x.value(), gamma.value(), beta.value(), eps);
    return tape_of(x).record(std::move(y), {x, gamma, beta}, [eps](BackwardContext& ctx) {
        const Tensor& xv = ctx.input(0);
        const Tensor& gam = ctx.input(1);
        const Tensor& g = ctx.grad_output();
        const std::size_t c = xv.shape().back();
        const std::size_t rows = xv.size() / c;
        std::vector<double> xhat(c), gxhat(c);
        Tensor* gx = ctx.wants(0) ? &ctx.grad_input(0) : nullptr;
        Tensor* gg = ctx.wants(1) ? &ctx.grad_input(1) : nullptr;
        Tensor* gb = ctx.wants(2) ? &ctx.grad_input(2) : nullptr;
        const double cd = static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = xv.data().data() + r * c;
            const double* gr = g.data().data() + r * c;
            double mu = 0.0;
            for (std::size_t i = 0; i < c; ++i) mu += xr[i];
            mu /= cd;
            double var = 0.0;
            for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
            var /= cd;
            const double inv = 1.0 / std::sqrt(var + eps);
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
                xhat[i] = (xr[i] - mu) * inv;
                gxhat[i] = gr[i] * gam[i];
                mean_g += gxhat[i];
                mean_gx += gxhat[i] * xhat[i];
                if (gg) (*gg)[i] += gr[i] * xhat[i];
                if (gb) (*gb)[i] += gr[i];
            }
            mean_g /= cd;
            mean_gx /= cd;
            if (gx) {
                for (std::size_t i = 0; i < c; ++i) (*gx)[r * c + i] += inv * (gxhat[i] - mean_g - xhat[i] * mean_gx);
            }
        }
    });
}

// ---------------------------------------------------------------------------------

Var reshape(Var x, Shape shape) {
    Tensor y = x.value().reshaped(std::move(shape));
    return tape_of(x).record(std::move(y), {x}, [](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& gx = ctx.grad_input(0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Var concat_last(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t ca = last_dim(av, "concat_last"), cb = last_dim(bv, "concat_last");
    Shape sa = av.shape(), sb = bv.shape();
    sa.pop_back();
    sb.pop_back();
    if (sa != sb) throw std::invalid_argument("concat_last: leading shapes differ");
    Shape ys = av.shape();
    ys.back() = ca + cb;
    Tensor y(ys);
    const std::size_t rows = av.size() / ca;
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(av.data().begin() + r * ca, ca, y.data().begin() + r * (ca + cb));
        std::copy_n(bv.data().begin() + r * cb, cb, y.data().begin() + r * (ca + cb) + ca);
    }
    return tape_of(a).record(std::move(y), {a, b}, [ca, cb, rows](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        if (ctx.wants(0)) {
            Tensor& ga = ctx.grad_input(0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < ca; ++i) ga[r * ca + i] += g[r * (ca + cb) + i];
        }
        if (ctx.wants(1)) {
            Tensor& gb = ctx.grad_input(1);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < cb; ++i) gb[r * cb + i] += g[r * (ca + cb) + ca + i];
        }
    });
}

Var slice_last(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    const std::size_t c = last_dim(xv, "slice_last");
    if (begin + count > c) throw std::invalid_argument("slice_last: range out of bounds");
    Shape ys = xv.shape();
    ys.back() = count;
    Tensor y(ys);
    const std::size_t rows = xv.size() / c;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < count; ++i) y[r * count + i] = xv[r * c + begin + i];
    return tape_of(x).record(std::move(y), {x}, [c, begin, count, rows](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& gx = ctx.grad_input(0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < count; ++i) gx[r * c + begin + i] += g[r * count + i];
    });
}

Var shift_time(Var x) {
    const Tensor& xv = x.value();
    require_seq(xv, "shift_time");
    const std::size_t b = xv.dim(0), l = xv.dim(1), c = xv.dim(2);
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t n = 1; n < l; ++n)
            for (std::size_t k = 0; k < c; ++k) y.at(i, n, k) = xv.at(i, n - 1, k);
    return tape_of(x).record(std::move(y), {x}, [b, l, c](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& gx = ctx.grad_input(0);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t n = 0; n + 1 < l; ++n)
                for (std::size_t k = 0; k < c; ++k) gx.at(i, n, k) += g.at(i, n + 1, k);
    });
}

Var mean_time(Var x) {
    const Tensor& xv = x.value();
    require_seq(xv, "mean_time");
    const std::size_t b = xv.dim(0), l = xv.dim(1), c = xv.dim(2);
    Tensor y(Shape{b, c});
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t n = 0; n < l; ++n)
            for (std::size_t k = 0; k < c; ++k) y.at(i, k) += xv.at(i, n, k) / static_cast<double>(l);
    return tape_of(x).record(std::move(y), {x}, [b, l, c](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& gx = ctx.grad_input(0);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t n = 0; n < l; ++n)
                for (std::size_t k = 0; k < c; ++k) gx.at(i, n, k) += g.at(i, k) / static_cast<double>(l);
    });
}

Var tile_batch(Var x, std::size_t times) {
    const Tensor& xv = x.value();
    if (xv.rank() == 0 || times == 0) throw std::invalid_argument("tile_batch: bad arguments");
    Shape ys = xv.shape();
    ys[0] *= times;
    Tensor y(ys);
    const std::size_t block = xv.size();
    for (std::size_t t = 0; t < times; ++t) std::copy(xv.data().begin(), xv.data().end(), y.data().begin() + t * block);
    return tape_of(x).record(std::move(y), {x}, [times, block](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        Tensor& gx = ctx.grad_input(0);
        for (std::size_t t = 0; t < times; ++t)
            for (std::size_t i = 0; i < block; ++i) gx[i] += g[t * block + i];
    });
}

// ---------------------------------------------------------------------------------

Var causal_conv(Var signal, Var kernel) {
    const Tensor& s = signal.value();
    const Tensor& k = kernel.value();
    if (s.rank() != 1 || k.rank() != 1) throw std::invalid_argument("causal_conv: expects 1-D tensors");
    auto y = ls4::causal_conv(s.data(), k.data());
    return tape_of(signal).record(Tensor::vector(std::move(y)), {signal, kernel}, [](BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        if (ctx.wants(0)) {
            auto gs = causal_correlate(g.data(), ctx.input(1).data());
            Tensor& gi = ctx.grad_input(0);
            for (std::size_t i = 0; i < gs.size(); ++i) gi[i] += gs[i];
        }
        if (ctx.wants(1)) {
            auto gk = causal_correlate(g.data(), ctx.input(0).data());
            Tensor& gi = ctx.grad_input(1);
            for (std::size_t i = 0; i < gk.size(); ++i) gi[i] += gk[i];
        }
    });
}

namespace {

void check_bank(const Tensor& u, const Tensor& kernel) {
    require_seq(u, "causal_conv_bank");
    if (kernel.rank() != 2 || kernel.dim(0) != u.dim(2) || kernel.dim(1) != u.dim(1)) {
        throw std::invalid_argument("causal_conv_bank: kernel " + shape_string(kernel.shape()) +
                                    " incompatible with input " + shape_string(u.shape()));
    }
}

// Spectrum of one real kernel row, zero-padded to the plan size.
ComplexBuf kernel_spectrum(const FftPlan& plan, const double* k, std::size_t len) {
    ComplexBuf buf(plan.size());
    std::copy_n(k, len, buf.re.begin());
    plan.forward(buf.re, buf.im);
    return buf;
}

// Loads channel h of batch rows b0 (real part) and b1 (imaginary part, if any).
void load_pair(const Tensor& u, std::size_t h, std::size_t b0, std::size_t b1, ComplexBuf& z) {
    const std::size_t l = u.dim(1), c = u.dim(2);
    std::fill(z.re.begin(), z.re.end(), 0.0);
    std::fill(z.im.begin(), z.im.end(), 0.0);
    const double* ud = u.data().data();
    for (std::size_t n = 0; n < l; ++n) z.re[n] = ud[(b0 * l + n) * c + h];
    if (b1 != b0) {
        for (std::size_t n = 0; n < l; ++n) z.im[n] = ud[(b1 * l + n) * c + h];
    }
}

void store_pair(Tensor& y, std::size_t h, std::size_t b0, std::size_t b1, const ComplexBuf& z, bool accumulate) {
    const std::size_t l = y.dim(1), c = y.dim(2);
    double* yd = y.data().data();
    for (std::size_t n = 0; n < l; ++n) {
        double& dst = yd[(b0 * l + n) * c + h];
        dst = accumulate ? dst + z.re[n] : z.re[n];
    }
    if (b1 != b0) {
        for (std::size_t n = 0; n < l; ++n) {
            double& dst = yd[(b1 * l + n) * c + h];
            dst = accumulate ? dst + z.im[n] : z.im[n];
        }
    }
}

// z *= w (or conj(w))
void multiply_spectrum(ComplexBuf& z, const ComplexBuf& w, bool conjugate) {
    const double s = conjugate ? -1.0 : 1.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
        const double ar = z.re[k], ai = z.im[k];
        const double br = w.re[k], bi = s * w.im[k];
        z.re[k] = ar * br - ai * bi;
        z.im[k] = ar * bi + ai * br;
    }
}

}  // namespace

Tensor causal_conv_bank_value(const Tensor& u, const Tensor& kernel) {
    check_bank(u, kernel);
    const std::size_t batch = u.dim(0), l = u.dim(1), channels = u.dim(2);
    Tensor y(u.shape());
    if (l == 0) return y;
    const FftPlan plan(next_power_of_two(2 * l));
    ComplexBuf z(plan.size());
    for (std::size_t h = 0; h < channels; ++h) {
        const ComplexBuf kf = kernel_spectrum(plan, kernel.data().data() + h * l, l);
        for (std::size_t b = 0; b < batch; b += 2) {
            const std::size_t b1 = std::min(b + 1, batch - 1);
            load_pair(u, h, b, b1, z);
            plan.forward(z.re, z.im);
            multiply_spectrum(z, kf, false);
            plan.inverse(z.re, z.im);
            store_pair(y, h, b, b1, z, false);
        }
    }
    return y;
}

Var causal_conv_bank(Var u, Var kernel) {
    Tensor y = causal_conv_bank_value(u.value(), kernel.value());
    return tape_of(u).record(std::move(y), {u, kernel}, [](BackwardContext& ctx) {
        const Tensor& uv = ctx.input(0);
        const Tensor& kv = ctx.input(1);
        const Tensor& g = ctx.grad_output();
        const std::size_t batch = uv.dim(0), l = uv.dim(1), channels = uv.dim(2);
        if (l == 0) return;
        const bool want_u = ctx.wants(0), want_k = ctx.wants(1);
        Tensor* gu = want_u ? &ctx.grad_input(0) : nullptr;
        Tensor* gk = want_k ? &ctx.grad_input(1) : nullptr;
        const FftPlan plan(next_power_of_two(2 * l));
        const std::size_t n = plan.size();
        ComplexBuf zg(n), zu(n), work(n), acc(n);
        for (std::size_t h = 0; h < channels; ++h) {
            const ComplexBuf kf = kernel_spectrum(plan, kv.data().data() + h * l, l);
            std::fill(acc.re.begin(), acc.re.end(), 0.0);
            std::fill(acc.im.begin(), acc.im.end(), 0.0);
            for (std::size_t b = 0; b < batch; b += 2) {
                const std::size_t b1 = std::min(b + 1, batch - 1);
                const bool paired = b1 != b;
                load_pair(g, h, b, b1, zg);
                plan.forward(zg.re, zg.im);
                if (want_u) {
                    work = zg;
                    multiply_spectrum(work, kf, true);
                    plan.inverse(work.re, work.im);
                    store_pair(*gu, h, b, b1, work, true);
                }
                if (want_k) {
                    load_pair(uv, h, b, b1, zu);
                    plan.forward(zu.re, zu.im);
                    for (std::size_t k = 0; k < n; ++k) {
                        const std::size_t m = (n - k) & (n - 1);
                        // Separate the two packed real spectra.
                        const double g0r = 0.5 * (zg.re[k] + zg.re[m]), g0i = 0.5 * (zg.im[k] - zg.im[m]);
                        const double u0r = 0.5 * (zu.re[k] + zu.re[m]), u0i = 0.5 * (zu.im[k] - zu.im[m]);
                        acc.re[k] += g0r * u0r + g0i * u0i;
                        acc.im[k] += g0i * u0r - g0r * u0i;
                        if (paired) {
                            const double g1r = 0.5 * (zg.im[k] + zg.im[m]), g1i = -0.5 * (zg.re[k] - zg.re[m]);
                            const double u1r = 0.5 * (zu.im[k] + zu.im[m]), u1i = -0.5 * (zu.re[k] - zu.re[m]);
                            acc.re[k] += g1r * u1r + g1i * u1i;
                            acc.im[k] += g1i * u1r - g1r * u1i;
                        }
                    }
                }
            }
            if (want_k) {
                plan.inverse(acc.re, acc.im);
                double* gkd = gk->data().data() + h * l;
                for (std::size_t i = 0; i < l; ++i) gkd[i] += acc.re[i];
            }
        }
    });
}

}  // namespace ls4::ad
