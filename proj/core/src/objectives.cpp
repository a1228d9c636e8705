#include "pr2r/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pr2r {

double LossBreakdown::weighted_sum() const {
    double s = 0.0;
    for (const auto& [name, v] : components) {
        auto it = weights.find(name);
        s += (it == weights.end() ? 1.0 : it->second) * v;
    }
    return s;
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    if (logits.value().rank() != 2)
        fail("cross_entropy: N×C logits required, got " + shape_str(logits.shape()));
    const std::int64_t n = logits.value().extent(0), c = logits.value().extent(1);
    if (static_cast<std::int64_t>(labels.size()) != n)
        fail("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
             " rows");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || labels[i] >= c)
            fail("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0, " +
                 std::to_string(c) + ") at row " + std::to_string(i));
    Var lse = logsumexp_rows(logits);
    Var true_logit = gather_rows(logits, labels);
    return mean(sub(lse, true_logit));
}

namespace {

Var triplet_core(const Var& embeddings, const std::vector<int>& labels, bool tolerate_missing) {
    if (embeddings.value().rank() != 2)
        fail("batch_hard_triplet: N×D embeddings required, got " + shape_str(embeddings.shape()));
    const std::int64_t n = embeddings.value().extent(0);
    if (static_cast<std::int64_t>(labels.size()) != n)
        fail("batch_hard_triplet: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
             " rows");
    if (n < 2) fail("batch_hard_triplet: at least two samples required");

    Var gram = matmul(embeddings, transpose(embeddings));
    std::vector<int> iota(static_cast<std::size_t>(n));
    std::iota(iota.begin(), iota.end(), 0);
    Var diag = gather_rows(gram, iota);
    Var col = reshape(diag, Shape{n, 1});
    Var row = reshape(diag, Shape{1, n});
    Var ones_row = make_const(Tensor::full(Shape{1, n}, 1.0));
    Var ones_col = make_const(Tensor::full(Shape{n, 1}, 1.0));
    Var d2 = sub(add(matmul(col, ones_row), matmul(ones_col, row)), scale(gram, 2.0));
    // clamp rounding negatives; +eps keeps sqrt differentiable at coincidence
    Var dist = sqrt(add(relu(d2), make_const(Tensor::full(Shape{n, n}, 1e-12))));

    std::vector<char> same(static_cast<std::size_t>(n * n), 0);
    std::vector<char> diff(static_cast<std::size_t>(n * n), 0);
    std::vector<double> valid(static_cast<std::size_t>(n), 1.0);
    std::int64_t n_valid = n;
    for (std::int64_t i = 0; i < n; ++i) {
        bool has_negative = false;
        for (std::int64_t j = 0; j < n; ++j) {
            const bool s = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
            same[static_cast<std::size_t>(i * n + j)] = s ? 1 : 0;
            diff[static_cast<std::size_t>(i * n + j)] = s ? 0 : 1;
            if (!s) has_negative = true;
        }
        if (!has_negative) {
            if (!tolerate_missing)
                fail("batch_hard_triplet: identity " + std::to_string(labels[static_cast<std::size_t>(i)]) +
                     " has no negative sample in the batch");
            diff[static_cast<std::size_t>(i * n + i)] = 1;  // placeholder, masked out below
            valid[static_cast<std::size_t>(i)] = 0.0;
            --n_valid;
        }
    }
    if (n_valid == 0) return make_scalar(0.0);

    Var d_ap = rowmax_masked(dist, same);
    Var d_an = rowmin_masked(dist, diff);
    Var per_anchor = softplus(sub(d_ap, d_an));
    if (n_valid == n) return mean(per_anchor);
    Var mask = make_const(Tensor(Shape{n}, valid));
    return scale(sum(mul(per_anchor, mask)), 1.0 / static_cast<double>(n_valid));
}

}  // namespace

Var batch_hard_triplet(const Var& embeddings, const std::vector<int>& labels) {
    return triplet_core(embeddings, labels, false);
}

Var detail::triplet_tolerant(const Var& embeddings, const std::vector<int>& labels) {
    return triplet_core(embeddings, labels, true);
}

Var gradient_match_distance(const GradientMap& ga, const GradientMap& gb) {
    if (ga.entries.size() != gb.entries.size())
        fail("gradient_match_distance: leaf sets differ in size");
    for (const auto& [name, va] : ga.entries)
        if (!gb.contains(name)) fail("gradient_match_distance: leaf '" + name + "' missing from one side");

    Var total = make_scalar(0.0);
    for (const auto& [name, va] : ga.entries) {
        const Var& vb = gb.at(name);
        if (!(va.value().shape() == vb.value().shape()))
            fail("gradient_match_distance: shape mismatch on '" + name + "': " + shape_str(va.shape()) +
                 " vs " + shape_str(vb.shape()));
        const std::int64_t numel = va.value().numel();
        Var fa = reshape(va, Shape{numel});
        Var fb = reshape(vb, Shape{numel});
        std::int64_t groups = 1, glen = numel;
        if (va.value().rank() == 4) {  // conv kernels: one group per output channel
            groups = va.value().extent(0);
            glen = numel / groups;
        }
        for (std::int64_t g = 0; g < groups; ++g) {
            Var a = groups == 1 ? fa : narrow(fa, g * glen, glen);
            Var b = groups == 1 ? fb : narrow(fb, g * glen, glen);
            Var na2 = sum(mul(a, a));
            Var nb2 = sum(mul(b, b));
            const bool a_zero = na2.item() == 0.0;
            const bool b_zero = nb2.item() == 0.0;
            if (a_zero && b_zero) continue;  // coincident zero groups contribute 0
            if (a_zero || b_zero) {
                total = add(total, make_scalar(1.0));
                continue;
            }
            Var cos = div(sum(mul(a, b)), sqrt(mul(na2, nb2)));
            total = add(total, sub(make_scalar(1.0), cos));
        }
    }
    return total;
}

LossBreakdown condense_loss(const std::vector<Var>& synthetic_pixels,
                            const std::vector<int>& synthetic_labels, const Tensor& real_images,
                            const std::vector<int>& real_labels, const std::vector<Snapshot>& snapshots,
                            double alpha) {
    if (snapshots.empty()) fail("condense_loss: snapshot list is empty");
    if (synthetic_pixels.empty()) fail("condense_loss: no synthetic samples");
    if (synthetic_pixels.size() != synthetic_labels.size())
        fail("condense_loss: synthetic pixel/label count mismatch");
    if (real_images.rank() != 4 || real_images.extent(0) != static_cast<std::int64_t>(real_labels.size()))
        fail("condense_loss: real batch must be M×3×H×W with matching labels");
    const int cls = synthetic_labels.front();
    for (int l : synthetic_labels)
        if (l != cls) fail("condense_loss: synthetic batch mixes classes " + std::to_string(cls) + " and " +
                           std::to_string(l));
    for (int l : real_labels)
        if (l != cls) fail("condense_loss: real batch class " + std::to_string(l) +
                           " differs from synthetic class " + std::to_string(cls));
    for (const auto& s : snapshots)
        if (cls >= s.params.class_count)
            fail("condense_loss: class " + std::to_string(cls) + " not covered by snapshot head of size " +
                 std::to_string(s.params.class_count));

    Var syn_batch = stack_images(synthetic_pixels);

    auto id_loss = [](const ModelVars& vars, const Var& images, const std::vector<int>& labels) {
        Var emb = embedder_forward(vars, images);
        Var logits = classifier_forward(vars, emb);
        Var ce = cross_entropy(logits, labels);
        Var trip = detail::triplet_tolerant(emb, labels);
        return std::pair<Var, Var>(ce, trip);
    };

    LossBreakdown out;
    Var grad_match;
    if (alpha != 0.0) {
        for (const auto& snap : snapshots) {
            ModelVars vars_s = bind_params(snap.params, true);
            auto [ce_s, trip_s] = id_loss(vars_s, syn_batch, synthetic_labels);
            GradientMap gs = backward(add(ce_s, trip_s), vars_s.leaves(), true);

            ModelVars vars_t = bind_params(snap.params, true);
            auto [ce_t, trip_t] = id_loss(vars_t, make_const(real_images), real_labels);
            GradientMap gt = backward(add(ce_t, trip_t), vars_t.leaves(), false);

            Var d = gradient_match_distance(gs, gt);
            grad_match = grad_match.defined() ? add(grad_match, d) : d;
        }
    } else {
        grad_match = make_scalar(0.0);
    }

    // ID anchoring at the most recent snapshot, pixels as the only leaves
    ModelVars vars_id = bind_params(snapshots.back().params, false);
    auto [ce, trip] = id_loss(vars_id, syn_batch, synthetic_labels);

    Var total = add(add(scale(grad_match, alpha), ce), trip);
    out.total = total;
    out.components["grad_match"] = grad_match.item();
    out.components["ce"] = ce.item();
    out.components["triplet"] = trip.item();
    out.weights["grad_match"] = alpha;
    out.weights["ce"] = 1.0;
    out.weights["triplet"] = 1.0;
    return out;
}

LossBreakdown style_recon_loss(const Var& recon, const Var& target, const PerceptualExtractor& xi,
                               double beta) {
    if (!(recon.value().shape() == target.value().shape()))
        fail("style_recon_loss: shape mismatch " + shape_str(recon.shape()) + " vs " +
             shape_str(target.shape()));
    Var d = sub(recon, target);
    Var l1 = mean(add(relu(d), relu(neg(d))));
    Var fd = sub(perceptual_features(xi, recon), perceptual_features(xi, target));
    Var perc = mean(mul(fd, fd));
    LossBreakdown out;
    out.total = add(l1, scale(perc, beta));
    out.components["l1"] = l1.item();
    out.components["perceptual"] = perc.item();
    out.weights["l1"] = 1.0;
    out.weights["perceptual"] = beta;
    return out;
}

}  // namespace pr2r
