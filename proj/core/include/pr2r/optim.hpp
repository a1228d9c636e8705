#ifndef PR2R_OPTIM_HPP
#define PR2R_OPTIM_HPP

#include <map>
#include <string>

#include "pr2r/graph.hpp"
#include "pr2r/tensor.hpp"

namespace pr2r {

// Velocity buffers, one per parameter name, created lazily at zero.
struct SgdState {
    std::map<std::string, Tensor> velocity;
};

// v ← momentum·v + g;  p ← p − lr·v
void sgd_momentum_step(std::map<std::string, Tensor>& params, const GradientMap& grads, double lr,
                       double momentum, SgdState& state);

}  // namespace pr2r

#endif
