#ifndef PR2R_OBJECTIVES_HPP
#define PR2R_OBJECTIVES_HPP

#include <map>
#include <string>
#include <vector>

#include "pr2r/graph.hpp"
#include "pr2r/models.hpp"

namespace pr2r {

// Scalar training objectives. All return graph nodes; losses over parameters
// or pixels are obtained via backward() on them.

struct LossBreakdown {
    Var total;
    std::map<std::string, double> components;  // unweighted component values
    std::map<std::string, double> weights;     // total == Σ weight·component
    double weighted_sum() const;
};

// mean over the batch of −log softmax at the true class (log-sum-exp based)
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

// Batch-hard soft-margin triplet: per anchor, hardest positive (including the
// anchor itself) and hardest negative; mean of log(1 + exp(d_ap − d_an)).
// Errors when an anchor has no negative in the batch.
Var batch_hard_triplet(const Var& embeddings, const std::vector<int>& labels);

// Sum over parameter groups (one per tensor; conv kernels split per output
// channel) of 1 − cosine similarity. Both-zero groups contribute 0, exactly
// one zero contributes 1.
Var gradient_match_distance(const GradientMap& ga, const GradientMap& gb);

// α·Σ_k 𝒟(grads of synthetic batch, grads of real batch at snapshot k)
// + CE + triplet of the synthetic batch at the latest snapshot. Both batches
// must be single-class (and the same class). Only the synthetic pixels are
// leaves of the outer gradient.
LossBreakdown condense_loss(const std::vector<Var>& synthetic_pixels,
                            const std::vector<int>& synthetic_labels, const Tensor& real_images,
                            const std::vector<int>& real_labels, const std::vector<Snapshot>& snapshots,
                            double alpha);

// mean |recon − target| + β · mean squared perceptual feature difference
LossBreakdown style_recon_loss(const Var& recon, const Var& target, const PerceptualExtractor& xi,
                               double beta);

namespace detail {
// Triplet where anchors lacking a negative contribute nothing (condensation
// batches are single-class by construction). Zero when no anchor qualifies.
Var triplet_tolerant(const Var& embeddings, const std::vector<int>& labels);
}  // namespace detail

}  // namespace pr2r

#endif
