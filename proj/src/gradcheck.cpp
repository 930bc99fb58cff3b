#include "ls4/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ls4::ad {

double grad_check_against(const std::function<double(const Tensor&)>& f, const Tensor& x, const Tensor& analytic,
                          double h) {
    require_same_shape(x, analytic, "grad_check");
    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double down = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw std::runtime_error("grad_check: function not finite near coordinate " + std::to_string(i));
        }
        const double fd = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    return worst;
}

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
    Tape tape;
    Var leaf = tape.leaf(x);
    Var root = f(tape, leaf);
    if (!std::isfinite(root.value().item())) throw std::runtime_error("grad_check: function not finite at x");
    tape.backward(root);
    const Tensor analytic = tape.grad(leaf);
    auto eval = [&f](const Tensor& p) {
        Tape t;
        return f(t, t.constant(p)).value().item();
    };
    return grad_check_against(eval, x, analytic, h);
}

}  // namespace ls4::ad
