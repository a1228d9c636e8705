#ifndef PR2R_GRAPH_HPP
#define PR2R_GRAPH_HPP

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pr2r/tensor.hpp"

namespace pr2r {

// Reverse-mode autodiff over a define-by-run DAG. Values are computed eagerly;
// each node records how to turn its output adjoint into input adjoints. The
// adjoint rules are themselves written with these ops, so running backward()
// in differentiable mode yields gradients that are graph nodes and can be
// differentiated again (double backprop).
//
// Supported op set is closed: the primitives below plus the composites in
// this header. ReLU's derivative at exactly 0 is 0.

namespace detail {
struct Node;
}

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    double item() const { return value().item(); }
    bool requires_grad() const;
    const std::string& name() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& ptr() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {
struct Node {
    Tensor value;
    std::string op;
    std::string leaf_name;  // non-empty for leaves
    bool requires_grad = false;
    bool from_diff_backward = false;  // produced by backward(differentiable=true)
    std::vector<Var> inputs;
    // maps this node's adjoint to adjoints of inputs (same order, undefined Var = no grad)
    std::function<std::vector<Var>(const Var&)> vjp;
};
}  // namespace detail

// Thread-local recording flag. When off, ops compute values only.
bool grad_enabled();
class GradMode {
public:
    explicit GradMode(bool on);
    ~GradMode();
    GradMode(const GradMode&) = delete;
    GradMode& operator=(const GradMode&) = delete;

private:
    bool prev_;
};

Var make_leaf(Tensor value, std::string name, bool requires_grad = true);
Var make_const(Tensor value);
Var make_scalar(double v);

// ---- primitives ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var relu(const Var& a);
Var matmul(const Var& a, const Var& b);      // 2-D
Var transpose(const Var& a);                 // 2-D
Var reshape(const Var& a, Shape shape);
Var narrow(const Var& a, std::int64_t offset, std::int64_t len);  // 1-D slice of flattened data
Var pad_flat(const Var& a, std::int64_t offset, std::int64_t total);
Var concat_flat(const std::vector<Var>& parts);
Var sum(const Var& a);                        // -> scalar
Var mean(const Var& a);                       // -> scalar
Var broadcast_to(const Var& scalar, Shape shape);
Var gather_rows(const Var& m, const std::vector<int>& idx);             // N×C, idx[N] -> N
Var scatter_rows(const Var& v, const std::vector<int>& idx, std::int64_t cols);  // N -> N×C
Var rowmax_masked(const Var& m, const std::vector<char>& mask);         // N×C -> N
Var rowmin_masked(const Var& m, const std::vector<char>& mask);
Var logsumexp_rows(const Var& m);             // N×C -> N
Var im2col(const Var& input, std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad);
Var avg_pool(const Var& input, std::int64_t window);   // NCHW, non-overlapping means
Var batch_major(const Var& m, std::int64_t n, std::int64_t o, std::int64_t s);  // O×(N·S) -> {N,O,S}

// ---- composites ----
Var conv2d(const Var& input, const Var& kernel, const Var& bias, std::int64_t stride, std::int64_t pad);
Var linear(const Var& input, const Var& weight, const Var& bias);  // N×D · D×M + M
Var softplus(const Var& v);     // elementwise on a rank-1 tensor, log(1+e^x), stable
Var l2_norm(const Var& v);      // sqrt(sum v²)
Var stack_images(const std::vector<Var>& images);  // k × (C×H×W) -> k×C×H×W

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

// Named leaf gradients. Entries are graph nodes when built in differentiable
// mode, plain values otherwise. Leaves absent from the objective's ancestry
// get zero gradients of the leaf's shape.
struct GradientMap {
    std::map<std::string, Var> entries;
    bool differentiable = false;

    const Var& at(const std::string& name) const;
    const Tensor& tensor(const std::string& name) const { return at(name).value(); }
    bool contains(const std::string& name) const { return entries.count(name) != 0; }
};

GradientMap backward(const Var& objective, const std::vector<Var>& leaves, bool differentiable = false);

// Second-order path: meta_objective must be built over gradients returned by a
// differentiable-mode backward(); errors otherwise.
GradientMap backward_through_gradients(const Var& meta_objective, const std::vector<Var>& leaves);

}  // namespace pr2r

#endif
