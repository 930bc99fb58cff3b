#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace ls4 {

/// Split-storage complex array used as FFT workspace.
struct ComplexBuf {
    std::vector<double> re;
    std::vector<double> im;

    ComplexBuf() = default;
    explicit ComplexBuf(std::size_t n) : re(n, 0.0), im(n, 0.0) {}
    ComplexBuf(std::vector<double> r, std::vector<double> i);

    std::size_t size() const { return re.size(); }
};

bool is_power_of_two(std::size_t n);
std::size_t next_power_of_two(std::size_t n);

/// Precomputed bit-reversal and twiddle tables for an iterative radix-2 transform.
class FftPlan {
public:
    explicit FftPlan(std::size_t n);

    std::size_t size() const { return n_; }

    /// In-place forward transform, X[k] = sum_j x[j] exp(-2 pi i jk/n).
    void forward(std::span<double> re, std::span<double> im) const;
    /// In-place inverse transform including the 1/n scaling.
    void inverse(std::span<double> re, std::span<double> im) const;

private:
    void transform(std::span<double> re, std::span<double> im, bool inverse) const;

    std::size_t n_;
    std::vector<std::size_t> bitrev_;
    std::vector<double> cos_;
    std::vector<double> sin_;
};

ComplexBuf fft(ComplexBuf buf);
ComplexBuf ifft(ComplexBuf buf);

/// Spectra of two real signals from one complex transform. Inputs are zero-padded to the plan size.
struct RealPairSpectra {
    ComplexBuf first;
    ComplexBuf second;
};
RealPairSpectra real_pair_forward(const FftPlan& plan, std::span<const double> a, std::span<const double> b);

/// Causal (truncated) linear convolution: out[k] = sum_{j<=k} kernel[j] * signal[k-j].
/// Both inputs have length L; zero-pads to the next power of two >= 2L.
std::vector<double> causal_conv(std::span<const double> signal, std::span<const double> kernel);

/// Adjoint of causal_conv with respect to the signal: out[j] = sum_{k>=j} grad[k] * kernel[k-j].
std::vector<double> causal_correlate(std::span<const double> grad, std::span<const double> kernel);

}  // namespace ls4
