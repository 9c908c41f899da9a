#pragma once
// Dense double-precision tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a cheap handle to a graph node. Forward ops allocate fresh
// nodes, so the tape is rebuilt on every forward pass; node values are
// immutable once created. Leaf parameter buffers may be updated in place
// between passes (mutable_data), which is how the optimizer works. Leaf
// gradients accumulate across backward() calls until zero_grad().
//
// Single-threaded within one tape. Distinct tapes over distinct samples
// may run concurrently as long as leaf gradient accumulation is serialized.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace psvma {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

namespace detail {
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "leaf";

    std::size_t size() const { return data.size(); }
    void ensure_grad();
};
}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t rank() const;
    std::size_t rows() const;  // rank-2 only
    std::size_t cols() const;  // rank-2 only

    const std::vector<double>& data() const;
    std::vector<double>& mutable_data();  // leaves only; invalid on graph interiors
    double item() const;                  // size-1 tensors
    double at(std::size_t r, std::size_t c) const;
    double operator[](std::size_t flat) const;

    bool requires_grad() const;
    const std::vector<double>& grad() const;  // grad buffer (zeros if untouched)
    void zero_grad();

    Tensor detach() const;  // constant copy, off the tape

    detail::TensorNode* node() const { return node_.get(); }
    std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor make_op(const char* op, Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents,
                          std::function<void(detail::TensorNode&)> backward_fn);
};

enum class Activation { Gelu, Sigmoid };
enum class PoolKind { Max, Mean };

// Matrix/vector ops. All ops are pure; outputs join the tape only when an
// input requires grad.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& m, const Tensor& v);  // v broadcast over rows
Tensor row_scale(const Tensor& m, const Tensor& s);   // row i scaled by s[i]

Tensor softmax_rows(const Tensor& x);  // row-max subtraction for stability
Tensor elementwise_activate(const Tensor& x, Activation kind);
Tensor gelu(const Tensor& x);     // tanh approximation, cubic constant 0.044715
Tensor sigmoid(const Tensor& x);
Tensor exp_elem(const Tensor& x);
Tensor log_elem(const Tensor& x);  // requires strictly positive input

// Reduces the named axis of a rank-2 tensor to a rank-1 tensor. Max pooling
// routes the backward pass to the first maximal index of each slice.
Tensor pool(const Tensor& x, std::size_t axis, PoolKind kind);

Tensor sum(const Tensor& x);                       // scalar
Tensor dot(const Tensor& u, const Tensor& v);      // rank-1, scalar
Tensor cosine_similarity(const Tensor& u, const Tensor& v);  // norms must exceed 1e-12
Tensor pick(const Tensor& x, std::size_t flat_index);        // scalar
Tensor reshape(const Tensor& x, Shape shape);
Tensor stack(const std::vector<Tensor>& scalars);  // K scalars -> rank-1 of length K

// Patch-grid resampling for row-major (r*r) x D feature maps.
Tensor grid_pool2x2(const Tensor& x, std::size_t r);  // 2x2 mean pool, r even
Tensor grid_up2x2(const Tensor& x, std::size_t r);    // nearest-neighbor 2x duplication

// Reverse-mode sweep from a scalar loss. Accumulates into .grad of every
// reachable requires_grad leaf; d(loss)/d(loss) = 1.
void backward(const Tensor& loss);

// Central-difference gradient audit. Runs f once for the analytic gradients,
// then perturbs up to coords_per_param randomly sampled coordinates of each
// parameter (all of them when the parameter is smaller). Returns the max
// relative error with denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double h = 1e-5, std::size_t coords_per_param = 200,
                  std::uint64_t seed = 12345);

}  // namespace psvma
