#ifndef PR2R_MODELS_HPP
#define PR2R_MODELS_HPP

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pr2r/graph.hpp"
#include "pr2r/tensor.hpp"

namespace pr2r {

// Small fixed architectures: a conv embedder with an expanding classifier
// head, a kernel-prediction style network, and a frozen perceptual extractor.

struct ModelParams {
    int class_count = 0;
    int input_h = 32;
    int input_w = 16;
    int embed_dim = 32;
    std::map<std::string, Tensor> tensors;
    // conv1.w 8×3×3×3, conv1.b 8, conv2.w 16×8×3×3, conv2.b 16,
    // fc.w D×32 (D = 16·H/4·W/4), fc.b 32, head.w C×32, head.b C
};

struct Snapshot {
    int stage = 0;  // training-step count at capture
    ModelParams params;
};

struct StyleModel {
    int domain_id = -1;
    std::map<std::string, Tensor> tensors;
    // conv.w 8×3×3×3, conv.b 8, fc.w 8×84, fc.b 84 (81 kernel entries + 3 bias)
};

struct PerceptualExtractor {
    std::map<std::string, Tensor> tensors;  // conv1.w 8×3×3×3, conv1.b 8, conv2.w 8×8×3×3, conv2.b 8
};

// Parameters as graph leaves, bound per forward pass.
struct ModelVars {
    std::map<std::string, Var> leaf;
    std::vector<Var> leaves() const;
    const Var& at(const std::string& name) const;
};

ModelParams init_params(std::uint64_t seed, int class_count);
ModelParams expand_head(const ModelParams& params, int new_classes, std::uint64_t seed);

ModelVars bind_params(const ModelParams& params, bool requires_grad);

Var embedder_forward(const ModelVars& model, const Var& images);   // N×3×H×W -> N×32
Var classifier_forward(const ModelVars& model, const Var& embeddings);  // N×32 -> N×C

// Value-level conveniences (no gradient tracking).
Tensor embed_images(const ModelParams& params, const Tensor& images);
Tensor classify_embeddings(const ModelParams& params, const Tensor& embeddings);

StyleModel init_style_model(std::uint64_t seed, int domain_id);
ModelVars bind_style(const StyleModel& style, bool requires_grad);

// Per-image transfer kernel from the global-pooled feature. Graph form for
// training; tensor form for application.
std::pair<Var, Var> akpnet_predict_kernel(const ModelVars& style, const Var& image);  // 1×3×H×W -> (3×3×3×3, 3)
std::pair<Tensor, Tensor> akpnet_predict_kernel(const StyleModel& style, const Tensor& image);

Var apply_transfer_kernel(const Var& image, const Var& kernel, const Var& bias);
Tensor apply_transfer_kernel(const Tensor& image, const Tensor& kernel, const Tensor& bias);

PerceptualExtractor init_perceptual(std::uint64_t seed);
Var perceptual_features(const PerceptualExtractor& xi, const Var& images);  // frozen; no grads into xi

Tensor clamp01(Tensor t);

}  // namespace pr2r

#endif
