#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ls4/autodiff.hpp"
#include "ls4/tensor.hpp"

namespace ls4::ssm {

/// Raised when I - A*delta/2 cannot be inverted.
class NumericalSingularity : public std::runtime_error {
public:
    NumericalSingularity(double delta, const std::string& detail);
    double delta() const { return delta_; }

private:
    double delta_;
};

/// Two-input-stream SSM: dh/dt = A h + B x + E z, y = C h + D x + F z.
struct ContinuousSSM {
    Eigen::MatrixXd A;
    Eigen::VectorXd B;
    Eigen::VectorXd E;
    Eigen::RowVectorXd C;
    double D = 0.0;
    double F = 0.0;
    Eigen::VectorXd h0;

    std::size_t state_size() const { return static_cast<std::size_t>(A.rows()); }
    void validate() const;
};

struct DiscreteSSM {
    Eigen::MatrixXd Abar;
    Eigen::VectorXd Bbar;
    Eigen::VectorXd Ebar;
    double delta = 1.0;
};

/// K[k] = C Abar^k Bbar and Khat[k] = C Abar^k Ebar for k < L.
struct ConvKernel {
    std::vector<double> K;
    std::vector<double> Khat;
    std::size_t length() const { return K.size(); }
};

enum class Discretization { bilinear, zoh };

/// HiPPO-LegS transition: -sqrt(2n+1) sqrt(2k+1) below the diagonal, -(n+1) on it, 0 above.
Eigen::MatrixXd hippo_legs(std::size_t n);

/// Continuous SSM with HiPPO A and random B, E, C drawn from `seed`.
ContinuousSSM random_hippo_ssm(std::size_t n, unsigned long long seed);

DiscreteSSM discretize(const ContinuousSSM& ssm, double delta, Discretization mode = Discretization::bilinear);
inline DiscreteSSM discretize_bilinear(const ContinuousSSM& ssm, double delta) {
    return discretize(ssm, delta, Discretization::bilinear);
}

ConvKernel materialize_kernel(const DiscreteSSM& d, const Eigen::RowVectorXd& C, std::size_t length);

/// y = K * x + Khat * z + D x + F z (causal FFT convolution).
std::vector<double> ssm_conv_forward(const ConvKernel& kernel, std::span<const double> x, std::span<const double> z,
                                     double D, double F);

struct RecurrentOutput {
    Eigen::MatrixXd h;  // L x N, state after absorbing input k
    std::vector<double> y;
};

/// Sequential oracle: s <- Abar s + Bbar x_k + Ebar z_k starting from h0, then y_k = C s + D x_k + F z_k.
RecurrentOutput ssm_recurrent_forward(const DiscreteSSM& d, const Eigen::RowVectorXd& C, double D, double F,
                                      std::span<const double> x, std::span<const double> z,
                                      const Eigen::VectorXd& h0);

Eigen::VectorXd ssm_step(const DiscreteSSM& d, const Eigen::VectorXd& h, double x_in, double z_in);

double spectral_radius(const Eigen::MatrixXd& m);

// ---- differentiable banks of independent heads --------------------------------------
//
// A: [H, N, N] dense or [H, N] diagonal; B, E, C: [H, N]; kernels: [H, L].

Tensor hippo_bank(std::size_t heads, std::size_t n);
Tensor hippo_diagonal_bank(std::size_t heads, std::size_t n);

Tensor bilinear_transition_value(const Tensor& A, double delta);
Tensor bilinear_input_value(const Tensor& A, const Tensor& B, double delta);
Tensor readout_through_value(const Tensor& C, const Tensor& Abar);
Tensor kernel_bank_value(const Tensor& c, const Tensor& Abar, const Tensor& bbar, std::size_t length);
Tensor kernel_bank_diagonal_value(const Tensor& c, const Tensor& abar, const Tensor& bbar, std::size_t length);

ad::Var bilinear_transition(ad::Var A, double delta);
ad::Var bilinear_input(ad::Var A, ad::Var B, double delta);
ad::Var bilinear_transition_diagonal(ad::Var a, double delta);
ad::Var bilinear_input_diagonal(ad::Var a, ad::Var B, double delta);
/// Per-head row vector times matrix: c_h = C_h Abar_h.
ad::Var readout_through(ad::Var C, ad::Var Abar);
ad::Var kernel_bank(ad::Var c, ad::Var Abar, ad::Var bbar, std::size_t length);
ad::Var kernel_bank_diagonal(ad::Var c, ad::Var abar, ad::Var bbar, std::size_t length);
/// Per-head dot product -> [H].
ad::Var rowdot(ad::Var a, ad::Var b);
/// K[h, 0] += v[h].
ad::Var add_lag0(ad::Var K, ad::Var v);

/// Sequential form of causal_conv_bank(u, kernel_bank(c, Abar, bbar, L)): runs the recurrence for
/// every batch element and head. u: [B, L, H] -> [B, L, H]. Backward replays segments from stored
/// checkpoints, so memory grows with sqrt(L) instead of L.
Tensor scan_bank_value(const Tensor& u, const Tensor& Abar, const Tensor& bbar, const Tensor& c);
ad::Var scan_bank(ad::Var u, ad::Var Abar, ad::Var bbar, ad::Var c);

/// Per-head state update for step mode: s[b, h, :] <- Abar_h s + bbar_h u[b, h] (+ ebar_h w[b, h]).
void bank_step(const Tensor& Abar, std::span<double> state, std::size_t batch, const Tensor& bbar,
               const double* u, const Tensor* ebar = nullptr, const double* w = nullptr);
/// out[b, h] = c_h . s[b, h, :]
void bank_readout(const Tensor& c, std::span<const double> state, std::size_t batch, std::span<double> out);

}  // namespace ls4::ssm
