#pragma once

#include <random>

#include "ls4/tensor.hpp"

namespace ls4::test {

inline Tensor random_tensor(Shape shape, unsigned seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = u(rng);
    return t;
}

inline std::vector<double> random_vector(std::size_t n, unsigned seed) {
    return random_tensor(Shape{n}, seed).storage();
}

// Direct O(L^2) causal convolution.
inline std::vector<double> direct_conv(const std::vector<double>& x, const std::vector<double>& k) {
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j <= i; ++j) out[i] += k[j] * x[i - j];
    return out;
}

}  // namespace ls4::test
