#include "ls4/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <sstream>

#include <unsupported/Eigen/MatrixFunctions>

#include "ls4/fft.hpp"

namespace ls4::ssm {

namespace {

std::string describe_delta(double delta) {
    std::ostringstream os;
    os << "I - A*delta/2 is singular for delta=" << delta;
    return os.str();
}

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kMinReciprocalCondition = 1e-14;

Eigen::PartialPivLU<RowMajorMatrix> factor_left(const ConstMatMap& A, double delta) {
    const auto n = A.rows();
    RowMajorMatrix m = RowMajorMatrix::Identity(n, n) - 0.5 * delta * A;
    Eigen::PartialPivLU<RowMajorMatrix> lu(m);
    const double rc = lu.rcond();
    if (!(rc > kMinReciprocalCondition)) throw NumericalSingularity(delta, describe_delta(delta));
    return lu;
}

void check_dense_bank(const Tensor& A, const char* what) {
    if (A.rank() != 3 || A.dim(1) != A.dim(2)) {
        throw std::invalid_argument(std::string(what) + ": expected A bank [H, N, N], got " + shape_string(A.shape()));
    }
}

void check_vec_bank(const Tensor& v, std::size_t heads, std::size_t n, const char* what) {
    if (v.rank() != 2 || v.dim(0) != heads || v.dim(1) != n) {
        throw std::invalid_argument(std::string(what) + ": expected [" + std::to_string(heads) + ", " +
                                    std::to_string(n) + "], got " + shape_string(v.shape()));
    }
}

}  // namespace

NumericalSingularity::NumericalSingularity(double delta, const std::string& detail)
    : std::runtime_error(detail), delta_(delta) {}

void ContinuousSSM::validate() const {
    const auto n = A.rows();
    if (A.cols() != n || B.size() != n || E.size() != n || C.size() != n || h0.size() != n) {
        throw std::invalid_argument("ContinuousSSM: inconsistent dimensions");
    }
}

Eigen::MatrixXd hippo_legs(std::size_t n) {
    if (n == 0) throw std::invalid_argument("hippo_legs: state size must be >= 1");
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < r; ++c) {
            a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                -std::sqrt(2.0 * static_cast<double>(r) + 1.0) * std::sqrt(2.0 * static_cast<double>(c) + 1.0);
        }
        a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(r)) = -(static_cast<double>(r) + 1.0);
    }
    return a;
}

ContinuousSSM random_hippo_ssm(std::size_t n, unsigned long long seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const auto ni = static_cast<Eigen::Index>(n);
    ContinuousSSM s;
    s.A = hippo_legs(n);
    s.B = Eigen::VectorXd::NullaryExpr(ni, [&] { return u(rng); });
    s.E = Eigen::VectorXd::NullaryExpr(ni, [&] { return u(rng); });
    s.C = Eigen::RowVectorXd::NullaryExpr(ni, [&] { return u(rng) / std::sqrt(static_cast<double>(n)); });
    s.D = u(rng);
    s.F = u(rng);
    s.h0 = Eigen::VectorXd::Zero(ni);
    return s;
}

DiscreteSSM discretize(const ContinuousSSM& ssm, double delta, Discretization mode) {
    if (!(delta > 0.0)) throw std::invalid_argument("discretize: delta must be positive");
    const auto n = ssm.A.rows();
    if (ssm.A.cols() != n || ssm.B.size() != n || ssm.E.size() != n) {
        throw std::invalid_argument("discretize: inconsistent SSM dimensions");
    }
    DiscreteSSM d;
    d.delta = delta;
    if (mode == Discretization::bilinear) {
        const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(I - 0.5 * delta * ssm.A);
        if (!(lu.rcond() > kMinReciprocalCondition)) throw NumericalSingularity(delta, describe_delta(delta));
        d.Abar = lu.solve(I + 0.5 * delta * ssm.A);
        d.Bbar = lu.solve(delta * ssm.B);
        d.Ebar = lu.solve(delta * ssm.E);
    } else {
        // exp([[A, B, E], [0, 0, 0]] delta) carries exp(A delta) and the integrated input maps.
        Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(n + 2, n + 2);
        aug.topLeftCorner(n, n) = ssm.A;
        aug.block(0, n, n, 1) = ssm.B;
        aug.block(0, n + 1, n, 1) = ssm.E;
        const Eigen::MatrixXd ex = (aug * delta).exp();
        d.Abar = ex.topLeftCorner(n, n);
        d.Bbar = ex.block(0, n, n, 1);
        d.Ebar = ex.block(0, n + 1, n, 1);
    }
    if (!d.Abar.allFinite()) throw NumericalSingularity(delta, "discretized transition is not finite");
    return d;
}

ConvKernel materialize_kernel(const DiscreteSSM& d, const Eigen::RowVectorXd& C, std::size_t length) {
    if (length == 0) throw std::invalid_argument("materialize_kernel: length must be >= 1");
    if (C.size() != d.Abar.rows()) throw std::invalid_argument("materialize_kernel: readout dimension mismatch");
    ConvKernel k;
    k.K.resize(length);
    k.Khat.resize(length);
    Eigen::VectorXd v = d.Bbar;
    Eigen::VectorXd w = d.Ebar;
    for (std::size_t i = 0; i < length; ++i) {
        k.K[i] = C.dot(v);
        k.Khat[i] = C.dot(w);
        v = d.Abar * v;
        w = d.Abar * w;
    }
    return k;
}

std::vector<double> ssm_conv_forward(const ConvKernel& kernel, std::span<const double> x, std::span<const double> z,
                                     double D, double F) {
    const std::size_t l = kernel.length();
    if (x.size() != l || z.size() != l) {
        throw std::invalid_argument("ssm_conv_forward: kernel length " + std::to_string(l) +
                                    " does not match inputs of length " + std::to_string(x.size()) + "/" +
                                    std::to_string(z.size()));
    }
    auto y = causal_conv(x, kernel.K);
    const auto yz = causal_conv(z, kernel.Khat);
    for (std::size_t i = 0; i < l; ++i) y[i] += yz[i] + D * x[i] + F * z[i];
    return y;
}

RecurrentOutput ssm_recurrent_forward(const DiscreteSSM& d, const Eigen::RowVectorXd& C, double D, double F,
                                      std::span<const double> x, std::span<const double> z,
                                      const Eigen::VectorXd& h0) {
    if (x.size() != z.size()) throw std::invalid_argument("ssm_recurrent_forward: x and z lengths differ");
    const auto n = d.Abar.rows();
    if (h0.size() != n || C.size() != n) throw std::invalid_argument("ssm_recurrent_forward: dimension mismatch");
    RecurrentOutput out;
    out.h.resize(static_cast<Eigen::Index>(x.size()), n);
    out.y.resize(x.size());
    Eigen::VectorXd s = h0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        s = ssm_step(d, s, x[k], z[k]);
        out.h.row(static_cast<Eigen::Index>(k)) = s.transpose();
        out.y[k] = C.dot(s) + D * x[k] + F * z[k];
    }
    return out;
}

Eigen::VectorXd ssm_step(const DiscreteSSM& d, const Eigen::VectorXd& h, double x_in, double z_in) {
    Eigen::VectorXd next = d.Abar * h;
    if (x_in != 0.0) next += d.Bbar * x_in;
    if (z_in != 0.0) next += d.Ebar * z_in;
    return next;
}

double spectral_radius(const Eigen::MatrixXd& m) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(m, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

// ---- banks ------------------------------------------------------------------------

Tensor hippo_bank(std::size_t heads, std::size_t n) {
    const Eigen::MatrixXd a = hippo_legs(n);
    Tensor t(Shape{heads, n, n});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c)
                t.at(h, r, c) = a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    return t;
}

Tensor hippo_diagonal_bank(std::size_t heads, std::size_t n) {
    if (n == 0) throw std::invalid_argument("hippo_diagonal_bank: state size must be >= 1");
    Tensor t(Shape{heads, n});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t r = 0; r < n; ++r) t.at(h, r) = -(static_cast<double>(r) + 1.0);
    return t;
}

Tensor bilinear_transition_value(const Tensor& A, double delta) {
    check_dense_bank(A, "bilinear_transition");
    const std::size_t heads = A.dim(0), n = A.dim(1);
    Tensor out(A.shape());
    const auto ni = static_cast<Eigen::Index>(n);
    for (std::size_t h = 0; h < heads; ++h) {
        ConstMatMap a(A.data().data() + h * n * n, ni, ni);
        auto lu = factor_left(a, delta);
        RowMajorMatrix p = RowMajorMatrix::Identity(ni, ni) + 0.5 * delta * a;
        MatMap(out.data().data() + h * n * n, ni, ni) = lu.solve(p);
    }
    return out;
}

Tensor bilinear_input_value(const Tensor& A, const Tensor& B, double delta) {
    check_dense_bank(A, "bilinear_input");
    const std::size_t heads = A.dim(0), n = A.dim(1);
    check_vec_bank(B, heads, n, "bilinear_input");
    Tensor out(B.shape());
    const auto ni = static_cast<Eigen::Index>(n);
    for (std::size_t h = 0; h < heads; ++h) {
        ConstMatMap a(A.data().data() + h * n * n, ni, ni);
        auto lu = factor_left(a, delta);
        Eigen::VectorXd rhs = delta * ConstVecMap(B.data().data() + h * n, ni);
        VecMap(out.data().data() + h * n, ni) = lu.solve(rhs);
    }
    return out;
}

ad::Var bilinear_transition(ad::Var A, double delta) {
    Tensor abar = bilinear_transition_value(A.value(), delta);
    return A.tape().record(std::move(abar), {A}, [delta](ad::BackwardContext& ctx) {
        const Tensor& a = ctx.input(0);
        const Tensor& abar = ctx.output();
        const Tensor& g = ctx.grad_output();
        Tensor& ga = ctx.grad_input(0);
        const std::size_t heads = a.dim(0), n = a.dim(1);
        const auto ni = static_cast<Eigen::Index>(n);
        for (std::size_t h = 0; h < heads; ++h) {
            ConstMatMap ah(a.data().data() + h * n * n, ni, ni);
            ConstMatMap abh(abar.data().data() + h * n * n, ni, ni);
            ConstMatMap gh(g.data().data() + h * n * n, ni, ni);
            auto lu = factor_left(ah, delta);
            // gA = delta/2 * M^-T gAbar (Abar + I)^T
            RowMajorMatrix solved = lu.transpose().solve(RowMajorMatrix(gh));
            RowMajorMatrix rhs = abh.transpose();
            rhs.diagonal().array() += 1.0;
            MatMap(ga.data().data() + h * n * n, ni, ni) += 0.5 * delta * solved * rhs;
        }
    });
}

ad::Var bilinear_input(ad::Var A, ad::Var B, double delta) {
    Tensor bbar = bilinear_input_value(A.value(), B.value(), delta);
    return A.tape().record(std::move(bbar), {A, B}, [delta](ad::BackwardContext& ctx) {
        const Tensor& a = ctx.input(0);
        const Tensor& bbar = ctx.output();
        const Tensor& g = ctx.grad_output();
        const std::size_t heads = a.dim(0), n = a.dim(1);
        const auto ni = static_cast<Eigen::Index>(n);
        Tensor* ga = ctx.wants(0) ? &ctx.grad_input(0) : nullptr;
        Tensor* gb = ctx.wants(1) ? &ctx.grad_input(1) : nullptr;
        for (std::size_t h = 0; h < heads; ++h) {
            ConstMatMap ah(a.data().data() + h * n * n, ni, ni);
            auto lu = factor_left(ah, delta);
            Eigen::VectorXd gh = ConstVecMap(g.data().data() + h * n, ni);
            Eigen::VectorXd solved = lu.transpose().solve(gh);
            if (ga) {
                ConstVecMap bh(bbar.data().data() + h * n, ni);
                MatMap(ga->data().data() + h * n * n, ni, ni) += 0.5 * delta * solved * bh.transpose();
            }
            if (gb) VecMap(gb->data().data() + h * n, ni) += delta * solved;
        }
    });
}

ad::Var bilinear_transition_diagonal(ad::Var a, double delta) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double den = 1.0 - 0.5 * delta * av[i];
        if (std::abs(den) < 1e-14) throw NumericalSingularity(delta, describe_delta(delta));
        out[i] = (1.0 + 0.5 * delta * av[i]) / den;
    }
    return a.tape().record(std::move(out), {a}, [delta](ad::BackwardContext& ctx) {
        const Tensor& av = ctx.input(0);
        const Tensor& g = ctx.grad_output();
        Tensor& ga = ctx.grad_input(0);
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double den = 1.0 - 0.5 * delta * av[i];
            ga[i] += g[i] * delta / (den * den);
        }
    });
}

ad::Var bilinear_input_diagonal(ad::Var a, ad::Var B, double delta) {
    const Tensor& av = a.value();
    require_same_shape(av, B.value(), "bilinear_input_diagonal");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double den = 1.0 - 0.5 * delta * av[i];
        if (std::abs(den) < 1e-14) throw NumericalSingularity(delta, describe_delta(delta));
        out[i] = delta * B.value()[i] / den;
    }
    return a.tape().record(std::move(out), {a, B}, [delta](ad::BackwardContext& ctx) {
        const Tensor& av = ctx.input(0);
        const Tensor& bv = ctx.input(1);
        const Tensor& g = ctx.grad_output();
        Tensor* ga = ctx.wants(0) ? &ctx.grad_input(0) : nullptr;
        Tensor* gb = ctx.wants(1) ? &ctx.grad_input(1) : nullptr;
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double den = 1.0 - 0.5 * delta * av[i];
            if (ga) (*ga)[i] += g[i] * 0.5 * delta * delta * bv[i] / (den * den);
            if (gb) (*gb)[i] += g[i] * delta / den;
        }
    });
}

Tensor readout_through_value(const Tensor& C, const Tensor& Abar) {
    check_dense_bank(Abar, "readout_through");
    const std::size_t heads = Abar.dim(0), n = Abar.dim(1);
    check_vec_bank(C, heads, n, "readout_through");
    Tensor out(C.shape());
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i) {
            const double ci = C.at(h, i);
            const double* row = Abar.data().data() + (h * n + i) * n;
            for (std::size_t j = 0; j < n; ++j) out.at(h, j) += ci * row[j];
        }
    return out;
}

ad::Var readout_through(ad::Var C, ad::Var Abar) {
    Tensor out = readout_through_value(C.value(), Abar.value());
    return C.tape().record(std::move(out), {C, Abar}, [](ad::BackwardContext& ctx) {
        const Tensor& c = ctx.input(0);
        const Tensor& abar = ctx.input(1);
        const Tensor& g = ctx.grad_output();
        const std::size_t heads = abar.dim(0), n = abar.dim(1);
        Tensor* gc = ctx.wants(0) ? &ctx.grad_input(0) : nullptr;
        Tensor* ga = ctx.wants(1) ? &ctx.grad_input(1) : nullptr;
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < n; ++i) {
                const double* row = abar.data().data() + (h * n + i) * n;
                if (gc) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g.at(h, j) * row[j];
                    gc->at(h, i) += s;
                }
                if (ga) {
                    double* grow = ga->data().data() + (h * n + i) * n;
                    const double ci = c.at(h, i);
                    for (std::size_t j = 0; j < n; ++j) grow[j] += ci * g.at(h, j);
                }
            }
    });
}

namespace {

// v_k = Abar^k bbar for k < L, stored row-wise in an L x N buffer.
void propagate_states(const double* abar, const double* bbar, std::size_t n, std::size_t length,
                      std::vector<double>& states) {
    states.assign(length * n, 0.0);
    std::copy_n(bbar, n, states.begin());
    for (std::size_t k = 1; k < length; ++k) {
        const double* prev = states.data() + (k - 1) * n;
        double* cur = states.data() + k * n;
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = abar + i * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += row[j] * prev[j];
            cur[i] = s;
        }
    }
}

}  // namespace

Tensor kernel_bank_value(const Tensor& c, const Tensor& Abar, const Tensor& bbar, std::size_t length) {
    check_dense_bank(Abar, "kernel_bank");
    const std::size_t heads = Abar.dim(0), n = Abar.dim(1);
    check_vec_bank(c, heads, n, "kernel_bank");
    check_vec_bank(bbar, heads, n, "kernel_bank");
    if (length == 0) throw std::invalid_argument("kernel_bank: length must be >= 1");
    Tensor out(Shape{heads, length});
    std::vector<double> states;
    for (std::size_t h = 0; h < heads; ++h) {
        propagate_states(Abar.data().data() + h * n * n, bbar.data().data() + h * n, n, length, states);
        const double* ch = c.data().data() + h * n;
        for (std::size_t k = 0; k < length; ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += ch[i] * states[k * n + i];
            out.at(h, k) = s;
        }
    }
    return out;
}

ad::Var kernel_bank(ad::Var c, ad::Var Abar, ad::Var bbar, std::size_t length) {
    Tensor out = kernel_bank_value(c.value(), Abar.value(), bbar.value(), length);
    return c.tape().record(std::move(out), {c, Abar, bbar}, [length](ad::BackwardContext& ctx) {
        const Tensor& cv = ctx.input(0);
        const Tensor& av = ctx.input(1);
        const Tensor& bv = ctx.input(2);
        const Tensor& g = ctx.grad_output();
        const std::size_t heads = av.dim(0), n = av.dim(1);
        Tensor* gc = ctx.wants(0) ? &ctx.grad_input(0) : nullptr;
        Tensor* ga = ctx.wants(1) ? &ctx.grad_input(1) : nullptr;
        Tensor* gb = ctx.wants(2) ? &ctx.grad_input(2) : nullptr;
        std::vector<double> states, adj(n), next(n);
        for (std::size_t h = 0; h < heads; ++h) {
            const double* abar = av.data().data() + h * n * n;
            const double* ch = cv.data().data() + h * n;
            const double* gh = g.data().data() + h * length;
            propagate_states(abar, bv.data().data() + h * n, n, length, states);
            if (gc) {
                double* gch = gc->data().data() + h * n;
                for (std::size_t k = 0; k < length; ++k)
                    for (std::size_t i = 0; i < n; ++i) gch[i] += gh[k] * states[k * n + i];
            }
            if (!ga && !gb) continue;
            // adj_k = dK/dv_k: adj_{L-1} = g_{L-1} c, adj_k = g_k c + Abar^T adj_{k+1}
            for (std::size_t i = 0; i < n; ++i) adj[i] = gh[length - 1] * ch[i];
            double* gah = ga ? ga->data().data() + h * n * n : nullptr;
            for (std::size_t k = length - 1; k-- > 0;) {
                const double* vk = states.data() + k * n;
                if (gah) {
                    for (std::size_t i = 0; i < n; ++i) {
                        const double ai = adj[i];
                        double* row = gah + i * n;
                        for (std::size_t j = 0; j < n; ++j) row[j] += ai * vk[j];
                    }
                }
                for (std::size_t j = 0; j < n; ++j) next[j] = gh[k] * ch[j];
                for (std::size_t i = 0; i < n; ++i) {
                    const double ai = adj[i];
                    const double* row = abar + i * n;
                    for (std::size_t j = 0; j < n; ++j) next[j] += row[j] * ai;
                }
                adj.swap(next);
            }
            if (gb) {
                double* gbh = gb->data().data() + h * n;
                for (std::size_t i = 0; i < n; ++i) gbh[i] += adj[i];
            }
        }
    });
}

Tensor kernel_bank_diagonal_value(const Tensor& c, const Tensor& abar, const Tensor& bbar, std::size_t length) {
    require_same_shape(c, abar, "kernel_bank_diagonal");
    require_same_shape(c, bbar, "kernel_bank_diagonal");
    if (c.rank() != 2) throw std::invalid_argument("kernel_bank_diagonal: expected [H, N]");
    if (length == 0) throw std::invalid_argument("kernel_bank_diagonal: length must be >= 1");
    const std::size_t heads = c.dim(0), n = c.dim(1);
    Tensor out(Shape{heads, length});
    std::vector<double> w(n);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) w[i] = c.at(h, i) * bbar.at(h, i);
        for (std::size_t k = 0; k < length; ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                s += w[i];
                w[i] *= abar.at(h, i);
            }
            out.at(h, k) = s;
        }
    }
    return out;
}

ad::Var kernel_bank_diagonal(ad::Var c, ad::Var abar, ad::Var bbar, std::size_t length) {
    Tensor out = kernel_bank_diagonal_value(c.value(), abar.value(), bbar.value(), length);
    return c.tape().record(std::move(out), {c, abar, bbar}, [length](ad::BackwardContext& ctx) {
        const Tensor& cv = ctx.input(0);
        const Tensor& av = ctx.input(1);
        const Tensor& bv = ctx.input(2);
        const Tensor& g = ctx.grad_output();
        const std::size_t heads = cv.dim(0), n = cv.dim(1);
        Tensor* gc = ctx.wants(0) ? &ctx.grad_input(0) : nullptr;
        Tensor* ga = ctx.wants(1) ? &ctx.grad_input(1) : nullptr;
        Tensor* gb = ctx.wants(2) ? &ctx.grad_input(2) : nullptr;
        for (std::size_t h = 0; h < heads; ++h) {
            const double* gh = g.data().data() + h * length;
            for (std::size_t i = 0; i < n; ++i) {
                const double a = av.at(h, i);
                // S0 = sum_k g_k a^k, S1 = sum_{k>=1} g_k k a^(k-1)
                double s0 = 0.0, s1 = 0.0, pw = 1.0, pw_prev = 0.0;
                for (std::size_t k = 0; k < length; ++k) {
                    s0 += gh[k] * pw;
                    if (k > 0) s1 += gh[k] * static_cast<double>(k) * pw_prev;
                    pw_prev = pw;
                    pw *= a;
                }
                if (gc) gc->at(h, i) += s0 * bv.at(h, i);
                if (gb) gb->at(h, i) += s0 * cv.at(h, i);
                if (ga) ga->at(h, i) += s1 * cv.at(h, i) * bv.at(h, i);
            }
        }
    });
}

ad::Var rowdot(ad::Var a, ad::Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_same_shape(av, bv, "rowdot");
    if (av.rank() != 2) throw std::invalid_argument("rowdot: expected [H, N]");
    const std::size_t heads = av.dim(0), n = av.dim(1);
    Tensor out(Shape{heads});
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i) out[h] += av.at(h, i) * bv.at(h, i);
    return a.tape().record(std::move(out), {a, b}, [heads, n](ad::BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        for (std::size_t k = 0; k < 2; ++k) {
            if (!ctx.wants(k)) continue;
            const Tensor& other = ctx.input(1 - k);
            Tensor& gi = ctx.grad_input(k);
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < n; ++i) gi.at(h, i) += g[h] * other.at(h, i);
        }
    });
}

ad::Var add_lag0(ad::Var K, ad::Var v) {
    const Tensor& kv = K.value();
    if (kv.rank() != 2 || v.value().size() != kv.dim(0)) throw std::invalid_argument("add_lag0: shape mismatch");
    Tensor out = kv;
    const std::size_t heads = kv.dim(0), length = kv.dim(1);
    for (std::size_t h = 0; h < heads; ++h) out.at(h, 0) += v.value()[h];
    return K.tape().record(std::move(out), {K, v}, [heads, length](ad::BackwardContext& ctx) {
        const Tensor& g = ctx.grad_output();
        if (ctx.wants(0)) {
            Tensor& gk = ctx.grad_input(0);
            for (std::size_t i = 0; i < g.size(); ++i) gk[i] += g[i];
        }
        if (ctx.wants(1)) {
            Tensor& gv = ctx.grad_input(1);
            for (std::size_t h = 0; h < heads; ++h) gv[h] += g[h * length];
        }
    });
}

void bank_step(const Tensor& Abar, std::span<double> state, std::size_t batch, const Tensor& bbar, const double* u,
               const Tensor* ebar, const double* w) {
    const std::size_t heads = Abar.dim(0), n = Abar.dim(1);
    std::vector<double> next(n);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            double* s = state.data() + (b * heads + h) * n;
            const double* a = Abar.data().data() + h * n * n;
            const double uin = u ? u[b * heads + h] : 0.0;
            const double win = w ? w[b * heads + h] : 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double* row = a + i * n;
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += row[j] * s[j];
                acc += bbar.at(h, i) * uin;
                if (ebar) acc += ebar->at(h, i) * win;
                next[i] = acc;
            }
            std::copy(next.begin(), next.end(), s);
        }
}

void bank_readout(const Tensor& c, std::span<const double> state, std::size_t batch, std::span<double> out) {
    const std::size_t heads = c.dim(0), n = c.dim(1);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            const double* s = state.data() + (b * heads + h) * n;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += c.at(h, i) * s[i];
            out[b * heads + h] = acc;
        }
}

}  // namespace ls4::ssm

namespace ls4::ssm {

namespace {

struct ScanShape {
    std::size_t B, L, H, N;
};

ScanShape scan_shape(const Tensor& u, const Tensor& Abar, const Tensor& bbar, const Tensor& c) {
    if (u.rank() != 3 || Abar.rank() != 3 || Abar.dim(1) != Abar.dim(2))
        throw std::invalid_argument("scan_bank: expected u [B, L, H] and Abar [H, N, N]");
    const ScanShape s{u.dim(0), u.dim(1), u.dim(2), Abar.dim(1)};
    if (Abar.dim(0) != s.H || bbar.shape() != Shape{s.H, s.N} || c.shape() != Shape{s.H, s.N})
        throw std::invalid_argument("scan_bank: head or state sizes disagree");
    return s;
}

// s <- Abar s + bbar u, written to out (distinct from s).
inline void advance(const double* a, const double* b, double u, const double* s, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = a + i * n;
        double acc = b[i] * u;
        for (std::size_t j = 0; j < n; ++j) acc += row[j] * s[j];
        out[i] = acc;
    }
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

std::size_t segment_length(std::size_t L) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(L)))));
}

}  // namespace

Tensor scan_bank_value(const Tensor& u, const Tensor& Abar, const Tensor& bbar, const Tensor& c) {
    const auto [B, L, H, N] = scan_shape(u, Abar, bbar, c);
    Tensor y({B, L, H});
    std::vector<double> s(N), t(N);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h) {
            const double* a = Abar.data().data() + h * N * N;
            const double* bb = bbar.data().data() + h * N;
            const double* ch = c.data().data() + h * N;
            std::fill(s.begin(), s.end(), 0.0);
            for (std::size_t l = 0; l < L; ++l) {
                advance(a, bb, u.at(b, l, h), s.data(), t.data(), N);
                s.swap(t);
                y.at(b, l, h) = dot(ch, s.data(), N);
            }
        }
    return y;
}

ad::Var scan_bank(ad::Var u, ad::Var Abar, ad::Var bbar, ad::Var c) {
    const ScanShape sh = scan_shape(u.value(), Abar.value(), bbar.value(), c.value());
    const std::size_t seg = segment_length(sh.L), n_seg = (sh.L + seg - 1) / seg;
    // Forward pass, keeping the state entering each segment.
    Tensor y({sh.B, sh.L, sh.H});
    auto checkpoints = std::make_shared<std::vector<double>>(sh.B * sh.H * n_seg * sh.N, 0.0);
    {
        const Tensor& uv = u.value();
        std::vector<double> s(sh.N), t(sh.N);
        for (std::size_t b = 0; b < sh.B; ++b)
            for (std::size_t h = 0; h < sh.H; ++h) {
                const double* a = Abar.value().data().data() + h * sh.N * sh.N;
                const double* bb = bbar.value().data().data() + h * sh.N;
                const double* ch = c.value().data().data() + h * sh.N;
                double* ck = checkpoints->data() + (b * sh.H + h) * n_seg * sh.N;
                std::fill(s.begin(), s.end(), 0.0);
                for (std::size_t l = 0; l < sh.L; ++l) {
                    if (l % seg == 0) std::copy(s.begin(), s.end(), ck + (l / seg) * sh.N);
                    advance(a, bb, uv.at(b, l, h), s.data(), t.data(), sh.N);
                    s.swap(t);
                    y.at(b, l, h) = dot(ch, s.data(), sh.N);
                }
            }
    }
    return u.tape().record(std::move(y), {u, Abar, bbar, c}, [sh, seg, n_seg, checkpoints](ad::BackwardContext& ctx) {
        const auto [B, L, H, N] = sh;
        const Tensor& uv = ctx.input(0);
        const Tensor& av = ctx.input(1);
        const Tensor& bv = ctx.input(2);
        const Tensor& cv = ctx.input(3);
        const Tensor& g = ctx.grad_output();
        Tensor* gu = ctx.wants(0) ? &ctx.grad_input(0) : nullptr;
        Tensor* ga = ctx.wants(1) ? &ctx.grad_input(1) : nullptr;
        Tensor* gb = ctx.wants(2) ? &ctx.grad_input(2) : nullptr;
        Tensor* gc = ctx.wants(3) ? &ctx.grad_input(3) : nullptr;
        std::vector<double> states((seg + 1) * N), adj(N), next(N);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H; ++h) {
                const double* a = av.data().data() + h * N * N;
                const double* bb = bv.data().data() + h * N;
                const double* ch = cv.data().data() + h * N;
                const double* ck = checkpoints->data() + (b * H + h) * n_seg * N;
                double* gah = ga ? ga->data().data() + h * N * N : nullptr;
                double* gbh = gb ? gb->data().data() + h * N : nullptr;
                double* gch = gc ? gc->data().data() + h * N : nullptr;
                std::fill(adj.begin(), adj.end(), 0.0);  // Abar^T adj carried from the step after
                for (std::size_t k = n_seg; k-- > 0;) {
                    const std::size_t l0 = k * seg, l1 = std::min(L, l0 + seg);
                    // states[i] = state before step l0 + i, states[i + 1] = state after it
                    std::copy(ck + k * N, ck + (k + 1) * N, states.begin());
                    for (std::size_t l = l0; l < l1; ++l)
                        advance(a, bb, uv.at(b, l, h), states.data() + (l - l0) * N, states.data() + (l - l0 + 1) * N, N);
                    for (std::size_t l = l1; l-- > l0;) {
                        const double gy = g.at(b, l, h);
                        const double* s_after = states.data() + (l - l0 + 1) * N;
                        const double* s_before = states.data() + (l - l0) * N;
                        // adj = dLoss/ds_l = gy c + Abar^T adj_{l+1}
                        for (std::size_t i = 0; i < N; ++i) adj[i] += gy * ch[i];
                        if (gch)
                            for (std::size_t i = 0; i < N; ++i) gch[i] += gy * s_after[i];
                        if (gu) gu->at(b, l, h) += dot(bb, adj.data(), N);
                        if (gbh)
                            for (std::size_t i = 0; i < N; ++i) gbh[i] += adj[i] * uv.at(b, l, h);
                        if (gah)
                            for (std::size_t i = 0; i < N; ++i) {
                                double* row = gah + i * N;
                                const double ai = adj[i];
                                for (std::size_t j = 0; j < N; ++j) row[j] += ai * s_before[j];
                            }
                        std::fill(next.begin(), next.end(), 0.0);
                        for (std::size_t i = 0; i < N; ++i) {
                            const double* row = a + i * N;
                            const double ai = adj[i];
                            for (std::size_t j = 0; j < N; ++j) next[j] += row[j] * ai;
                        }
                        adj.swap(next);
                    }
                }
            }
    });
}

}  // namespace ls4::ssm
