#include "pr2r/models.hpp"

#include <algorithm>
#include <cmath>

#include "pr2r/rng.hpp"

namespace pr2r {

namespace {

// uniform in ±1/sqrt(fan_in), biases zero
Tensor init_weight(Rng& rng, Shape shape, std::int64_t fan_in) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

}  // namespace

std::vector<Var> ModelVars::leaves() const {
    std::vector<Var> out;
    out.reserve(leaf.size());
    for (const auto& [name, v] : leaf) out.push_back(v);
    return out;
}

const Var& ModelVars::at(const std::string& name) const {
    auto it = leaf.find(name);
    if (it == leaf.end()) fail("ModelVars: no leaf named '" + name + "'");
    return it->second;
}

ModelParams init_params(std::uint64_t seed, int class_count) {
    if (class_count <= 0) fail_arg("init_params: class_count must be positive");
    ModelParams p;
    p.class_count = class_count;
    Rng rng(Rng::mix(seed));
    p.tensors.emplace("conv1.w", init_weight(rng, {8, 3, 3, 3}, 3 * 3 * 3));
    p.tensors.emplace("conv1.b", Tensor::zeros({8}));
    p.tensors.emplace("conv2.w", init_weight(rng, {16, 8, 3, 3}, 8 * 3 * 3));
    p.tensors.emplace("conv2.b", Tensor::zeros({16}));
    const std::int64_t flat = 16 * (p.input_h / 4) * (p.input_w / 4);
    p.tensors.emplace("fc.w", init_weight(rng, {flat, p.embed_dim}, flat));
    p.tensors.emplace("fc.b", Tensor::zeros({p.embed_dim}));
    p.tensors.emplace("head.w", init_weight(rng, {class_count, p.embed_dim}, p.embed_dim));
    p.tensors.emplace("head.b", Tensor::zeros({class_count}));
    return p;
}

ModelParams expand_head(const ModelParams& params, int new_classes, std::uint64_t seed) {
    if (new_classes <= 0) fail_arg("expand_head: new_classes must be positive");
    ModelParams out = params;
    const std::int64_t old_c = params.class_count;
    const std::int64_t dim = params.embed_dim;
    Rng rng(Rng::mix(seed ^ 0x9e3779b97f4a7c15ULL));
    Tensor grown(Shape{old_c + new_classes, dim});
    const Tensor& old_w = params.tensors.at("head.w");
    std::copy(old_w.data(), old_w.data() + old_w.numel(), grown.data());
    Tensor fresh = init_weight(rng, {new_classes, dim}, dim);
    std::copy(fresh.data(), fresh.data() + fresh.numel(), grown.data() + old_w.numel());
    Tensor grown_b(Shape{old_c + new_classes});
    const Tensor& old_b = params.tensors.at("head.b");
    std::copy(old_b.data(), old_b.data() + old_b.numel(), grown_b.data());
    out.tensors.at("head.w") = std::move(grown);
    out.tensors.at("head.b") = std::move(grown_b);
    out.class_count = params.class_count + new_classes;
    return out;
}

ModelVars bind_params(const ModelParams& params, bool requires_grad) {
    ModelVars v;
    for (const auto& [name, t] : params.tensors) v.leaf.emplace(name, make_leaf(t, name, requires_grad));
    return v;
}

Var embedder_forward(const ModelVars& model, const Var& images) {
    const Shape& s = images.value().shape();
    if (s.size() != 4 || s[1] != 3)
        fail("embedder_forward: N×3×H×W input required, got " + shape_str(s));
    if (s[2] % 4 != 0 || s[3] % 4 != 0)
        fail("embedder_forward: spatial extents " + shape_str(s) + " must be divisible by 4");
    Var h = relu(conv2d(images, model.at("conv1.w"), model.at("conv1.b"), 1, 1));
    h = avg_pool(h, 2);
    h = relu(conv2d(h, model.at("conv2.w"), model.at("conv2.b"), 1, 1));
    h = avg_pool(h, 2);
    const Shape& hs = h.value().shape();
    Var flat = reshape(h, Shape{hs[0], hs[1] * hs[2] * hs[3]});
    return linear(flat, model.at("fc.w"), model.at("fc.b"));
}

Var classifier_forward(const ModelVars& model, const Var& embeddings) {
    const Var& w = model.at("head.w");  // C×D
    const Var& b = model.at("head.b");
    if (embeddings.value().rank() != 2 ||
        embeddings.value().extent(1) != w.value().extent(1))
        fail("classifier_forward: embedding shape " + shape_str(embeddings.shape()) +
             " does not match head " + shape_str(w.shape()));
    return linear(embeddings, transpose(w), b);
}

Tensor embed_images(const ModelParams& params, const Tensor& images) {
    GradMode off(false);
    ModelVars v = bind_params(params, false);
    return embedder_forward(v, make_const(images)).value();
}

Tensor classify_embeddings(const ModelParams& params, const Tensor& embeddings) {
    GradMode off(false);
    ModelVars v = bind_params(params, false);
    return classifier_forward(v, make_const(embeddings)).value();
}

StyleModel init_style_model(std::uint64_t seed, int domain_id) {
    StyleModel m;
    m.domain_id = domain_id;
    Rng rng(Rng::mix(seed ^ 0x5851f42d4c957f2dULL));
    m.tensors.emplace("conv.w", init_weight(rng, {8, 3, 3, 3}, 3 * 3 * 3));
    m.tensors.emplace("conv.b", Tensor::zeros({8}));
    m.tensors.emplace("fc.w", init_weight(rng, {8, 84}, 8));
    m.tensors.emplace("fc.b", Tensor::zeros({84}));
    return m;
}

ModelVars bind_style(const StyleModel& style, bool requires_grad) {
    ModelVars v;
    for (const auto& [name, t] : style.tensors) v.leaf.emplace(name, make_leaf(t, name, requires_grad));
    return v;
}

std::pair<Var, Var> akpnet_predict_kernel(const ModelVars& style, const Var& image) {
    const Shape& s = image.value().shape();
    if (s.size() != 4 || s[0] != 1 || s[1] != 3)
        fail("akpnet_predict_kernel: 1×3×H×W input required, got " + shape_str(s));
    Var h = relu(conv2d(image, style.at("conv.w"), style.at("conv.b"), 1, 1));
    // global average pool -> 1×8
    const Shape& hs = h.value().shape();
    Var flat_h = reshape(h, Shape{hs[1], hs[2] * hs[3]});
    Var mean_col =
        make_const(Tensor::full(Shape{hs[2] * hs[3], 1}, 1.0 / static_cast<double>(hs[2] * hs[3])));
    Var pooled = reshape(matmul(flat_h, mean_col), Shape{1, hs[1]});
    Var out = linear(pooled, style.at("fc.w"), style.at("fc.b"));  // 1×84
    Var flat = reshape(out, Shape{84});
    Var kernel = reshape(narrow(flat, 0, 81), Shape{3, 3, 3, 3});
    Var bias = narrow(flat, 81, 3);
    return {kernel, bias};
}

std::pair<Tensor, Tensor> akpnet_predict_kernel(const StyleModel& style, const Tensor& image) {
    GradMode off(false);
    ModelVars v = bind_style(style, false);
    auto [k, b] = akpnet_predict_kernel(v, make_const(image));
    return {k.value(), b.value()};
}

Var apply_transfer_kernel(const Var& image, const Var& kernel, const Var& bias) {
    return conv2d(image, kernel, bias, 1, 1);
}

Tensor apply_transfer_kernel(const Tensor& image, const Tensor& kernel, const Tensor& bias) {
    GradMode off(false);
    return conv2d(make_const(image), make_const(kernel), make_const(bias), 1, 1).value();
}

PerceptualExtractor init_perceptual(std::uint64_t seed) {
    PerceptualExtractor xi;
    Rng rng(Rng::mix(seed ^ 0xda942042e4dd58b5ULL));
    xi.tensors.emplace("conv1.w", init_weight(rng, {8, 3, 3, 3}, 3 * 3 * 3));
    xi.tensors.emplace("conv1.b", Tensor::zeros({8}));
    xi.tensors.emplace("conv2.w", init_weight(rng, {8, 8, 3, 3}, 8 * 3 * 3));
    xi.tensors.emplace("conv2.b", Tensor::zeros({8}));
    return xi;
}

Var perceptual_features(const PerceptualExtractor& xi, const Var& images) {
    // frozen: bound without requires_grad, so no gradient ever reaches xi
    Var h = relu(conv2d(images, make_const(xi.tensors.at("conv1.w")), make_const(xi.tensors.at("conv1.b")), 1, 1));
    return conv2d(h, make_const(xi.tensors.at("conv2.w")), make_const(xi.tensors.at("conv2.b")), 1, 1);
}

Tensor clamp01(Tensor t) {
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = std::clamp(t[i], 0.0, 1.0);
    return t;
}

}  // namespace pr2r
