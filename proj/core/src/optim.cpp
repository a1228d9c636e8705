#include "pr2r/optim.hpp"

namespace pr2r {

void sgd_momentum_step(std::map<std::string, Tensor>& params, const GradientMap& grads, double lr,
                       double momentum, SgdState& state) {
    if (lr <= 0.0) fail_arg("sgd_momentum_step: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) fail_arg("sgd_momentum_step: momentum must be in [0, 1)");
    for (auto& [name, p] : params) {
        if (!grads.contains(name)) continue;
        const Tensor& g = grads.tensor(name);
        if (!g.same_shape(p))
            fail("sgd_momentum_step: gradient shape " + shape_str(g.shape()) + " does not match param '" +
                 name + "' shape " + shape_str(p.shape()));
        auto it = state.velocity.find(name);
        if (it == state.velocity.end()) it = state.velocity.emplace(name, Tensor::zeros(p.shape())).first;
        Tensor& v = it->second;
        if (!v.same_shape(p))
            fail("sgd_momentum_step: velocity shape " + shape_str(v.shape()) + " does not match param '" +
                 name + "' shape " + shape_str(p.shape()));
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            v[i] = momentum * v[i] + g[i];
            p[i] -= lr * v[i];
        }
    }
}

}  // namespace pr2r
