#include "ls4/fft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ls4 {

ComplexBuf::ComplexBuf(std::vector<double> r, std::vector<double> i) : re(std::move(r)), im(std::move(i)) {
    if (re.size() != im.size()) {
        throw std::invalid_argument("ComplexBuf: real and imaginary parts differ in length");
    }
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_power_of_two(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

FftPlan::FftPlan(std::size_t n) : n_(n) {
    if (!is_power_of_two(n)) {
        throw std::invalid_argument("FFT length " + std::to_string(n) + " is not a power of two");
    }
    bitrev_.resize(n);
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t r = 0;
        for (std::size_t b = 0; b < bits; ++b) {
            if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
        }
        bitrev_[i] = r;
    }
    const std::size_t half = n / 2;
    cos_.resize(half);
    sin_.resize(half);
    for (std::size_t m = 0; m < half; ++m) {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(n);
        cos_[m] = std::cos(angle);
        sin_[m] = std::sin(angle);
    }
}

void FftPlan::forward(std::span<double> re, std::span<double> im) const { transform(re, im, false); }

void FftPlan::inverse(std::span<double> re, std::span<double> im) const {
    transform(re, im, true);
    const double scale = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < n_; ++i) {
        re[i] *= scale;
        im[i] *= scale;
    }
}

void FftPlan::transform(std::span<double> re, std::span<double> im, bool inverse) const {
    if (re.size() != n_ || im.size() != n_) {
        throw std::invalid_argument("FFT buffer length does not match plan size " + std::to_string(n_));
    }
    for (std::size_t i = 0; i < n_; ++i) {
        const std::size_t j = bitrev_[i];
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n_; len <<= 1) {
        const std::size_t half = len / 2;
        const std::size_t step = n_ / len;
        for (std::size_t start = 0; start < n_; start += len) {
            for (std::size_t j = 0; j < half; ++j) {
                const double wr = cos_[j * step];
                const double wi = sign * sin_[j * step];
                const std::size_t a = start + j;
                const std::size_t b = a + half;
                const double tr = re[b] * wr - im[b] * wi;
                const double ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
    }
}

ComplexBuf fft(ComplexBuf buf) {
    FftPlan plan(buf.size());
    plan.forward(buf.re, buf.im);
    return buf;
}

ComplexBuf ifft(ComplexBuf buf) {
    FftPlan plan(buf.size());
    plan.inverse(buf.re, buf.im);
    return buf;
}

RealPairSpectra real_pair_forward(const FftPlan& plan, std::span<const double> a, std::span<const double> b) {
    const std::size_t n = plan.size();
    if (a.size() > n || b.size() > n) {
        throw std::invalid_argument("real_pair_forward: signal longer than plan");
    }
    ComplexBuf z(n);
    for (std::size_t i = 0; i < a.size(); ++i) z.re[i] = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) z.im[i] = b[i];
    plan.forward(z.re, z.im);
    RealPairSpectra out{ComplexBuf(n), ComplexBuf(n)};
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t m = (n - k) & (n - 1);
        // A = (Z[k] + conj Z[m]) / 2, B = (Z[k] - conj Z[m]) / 2i
        out.first.re[k] = 0.5 * (z.re[k] + z.re[m]);
        out.first.im[k] = 0.5 * (z.im[k] - z.im[m]);
        out.second.re[k] = 0.5 * (z.im[k] + z.im[m]);
        out.second.im[k] = -0.5 * (z.re[k] - z.re[m]);
    }
    return out;
}

namespace {

std::vector<double> spectral_product(std::span<const double> x, std::span<const double> kernel, bool conjugate) {
    const std::size_t length = x.size();
    const std::size_t n = next_power_of_two(2 * length);
    FftPlan plan(n);
    auto spectra = real_pair_forward(plan, x, kernel);
    ComplexBuf prod(n);
    const double s = conjugate ? -1.0 : 1.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double ar = spectra.first.re[k], ai = spectra.first.im[k];
        const double br = spectra.second.re[k], bi = s * spectra.second.im[k];
        prod.re[k] = ar * br - ai * bi;
        prod.im[k] = ar * bi + ai * br;
    }
    plan.inverse(prod.re, prod.im);
    return {prod.re.begin(), prod.re.begin() + static_cast<std::ptrdiff_t>(length)};
}

}  // namespace

std::vector<double> causal_conv(std::span<const double> signal, std::span<const double> kernel) {
    if (signal.size() != kernel.size()) {
        throw std::invalid_argument("causal_conv: signal length " + std::to_string(signal.size()) +
                                    " != kernel length " + std::to_string(kernel.size()));
    }
    if (signal.empty()) return {};
    return spectral_product(signal, kernel, false);
}

std::vector<double> causal_correlate(std::span<const double> grad, std::span<const double> kernel) {
    if (grad.size() != kernel.size()) {
        throw std::invalid_argument("causal_correlate: length mismatch");
    }
    if (grad.empty()) return {};
    return spectral_product(grad, kernel, true);
}

}  // namespace ls4
