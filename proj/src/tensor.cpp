#include "psvma/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace psvma {

namespace {

std::size_t shape_product(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

constexpr double kSqrt2OverPi = 0.7978845608028653558798921198687637;
constexpr double kGeluCubic = 0.044715;

double gelu_value(double x) {
    const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
    const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
    const double t = std::tanh(u);
    const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ')';
    return os.str();
}

namespace detail {
void TensorNode::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}
}  // namespace detail

using detail::TensorNode;

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs_grad = false;
    for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
    node->requires_grad = needs_grad;
    if (needs_grad) {
        node->parents.reserve(parents.size());
        for (const Tensor& p : parents) node->parents.push_back(p.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_product(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    const std::size_t n = shape_product(shape);
    if (data.empty()) data.assign(n, 0.0);
    require(data.size() == n, "tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->data.size(); }
std::size_t Tensor::rank() const { return node_->shape.size(); }

std::size_t Tensor::rows() const {
    require(rank() == 2, "rows: rank-2 tensor required, got " + shape_str(shape()));
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    require(rank() == 2, "cols: rank-2 tensor required, got " + shape_str(shape()));
    return node_->shape[1];
}

const std::vector<double>& Tensor::data() const { return node_->data; }

std::vector<double>& Tensor::mutable_data() {
    require(node_->parents.empty(), "mutable_data: only leaf tensors may be mutated");
    return node_->data;
}

double Tensor::item() const {
    require(size() == 1, "item: size-1 tensor required, got " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    require(rank() == 2 && r < rows() && c < cols(),
            "at: index out of range for " + shape_str(shape()));
    return node_->data[r * cols() + c];
}

double Tensor::operator[](std::size_t flat) const { return node_->data.at(flat); }

bool Tensor::requires_grad() const { return node_->requires_grad; }

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

Tensor Tensor::detach() const { return from_data(node_->shape, node_->data, false); }

// ---------------------------------------------------------------------------
// ops

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2,
            "matmul: rank-2 operands required: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    require(a.cols() == b.rows(), "matmul: inner dimensions disagree: " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) continue;
            const double* brow = bd.data() + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        const auto& g = nd.grad;
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double gv = g[i * n + j];
                    if (gv == 0.0) continue;
                    for (std::size_t p = 0; p < k; ++p)
                        pa.grad[i * k + p] += gv * pb.data[p * n + j];
                }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = pa.data[i * k + p];
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j)
                        pb.grad[p * n + j] += av * g[i * n + j];
                }
        }
    });
}

Tensor transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose: rank-2 tensor required, got " + shape_str(a.shape()));
    const std::size_t m = a.rows(), n = a.cols();
    const auto& ad = a.data();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
    return make_op("transpose", {n, m}, std::move(out), {a}, [m, n](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += nd.grad[j * m + i];
    });
}

namespace {
void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), std::string(op) + ": shapes disagree: " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op("add", a.shape(), std::move(out), {a, b}, [](TensorNode& nd) {
        for (auto& pp : nd.parents) {
            auto& p = *pp;
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i) p.grad[i] += nd.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_op("sub", a.shape(), std::move(out), {a, b}, [](TensorNode& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i) pa.grad[i] += nd.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i) pb.grad[i] -= nd.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op("mul", a.shape(), std::move(out), {a, b}, [](TensorNode& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i)
                pa.grad[i] += nd.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i)
                pb.grad[i] += nd.grad[i] * pa.data[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return make_op("scale", a.shape(), std::move(out), {a}, [c](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) p.grad[i] += c * nd.grad[i];
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    return make_op("add_scalar", a.shape(), std::move(out), {a}, [](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) p.grad[i] += nd.grad[i];
    });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    require(m.rank() == 2 && v.rank() == 1 && v.size() == m.cols(),
            "add_rowvec: shapes disagree: " + shape_str(m.shape()) + " vs " +
                shape_str(v.shape()));
    const std::size_t r = m.rows(), c = m.cols();
    std::vector<double> out(m.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.data()[i * c + j] + v.data()[j];
    return make_op("add_rowvec", m.shape(), std::move(out), {m, v}, [r, c](TensorNode& nd) {
        auto& pm = *nd.parents[0];
        auto& pv = *nd.parents[1];
        if (pm.requires_grad) {
            pm.ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i) pm.grad[i] += nd.grad[i];
        }
        if (pv.requires_grad) {
            pv.ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) pv.grad[j] += nd.grad[i * c + j];
        }
    });
}

Tensor row_scale(const Tensor& m, const Tensor& s) {
    require(m.rank() == 2 && s.rank() == 1 && s.size() == m.rows(),
            "row_scale: shapes disagree: " + shape_str(m.shape()) + " vs " +
                shape_str(s.shape()));
    const std::size_t r = m.rows(), c = m.cols();
    std::vector<double> out(m.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.data()[i * c + j] * s.data()[i];
    return make_op("row_scale", m.shape(), std::move(out), {m, s}, [r, c](TensorNode& nd) {
        auto& pm = *nd.parents[0];
        auto& ps = *nd.parents[1];
        if (pm.requires_grad) {
            pm.ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    pm.grad[i * c + j] += nd.grad[i * c + j] * ps.data[i];
        }
        if (ps.requires_grad) {
            ps.ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < c; ++j)
                    acc += nd.grad[i * c + j] * pm.data[i * c + j];
                ps.grad[i] += acc;
            }
        }
    });
}

Tensor softmax_rows(const Tensor& x) {
    require(x.rank() == 2, "softmax_rows: rank-2 tensor required, got " + shape_str(x.shape()));
    const std::size_t r = x.rows(), c = x.cols();
    require(c > 0, "softmax_rows: empty rows");
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = x.data().data() + i * c;
        double m = row[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double e = std::exp(row[j] - m);
            out[i * c + j] = e;
            s += e;
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
    }
    return make_op("softmax_rows", x.shape(), std::move(out), {x}, [r, c](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
            const double* y = nd.data.data() + i * c;
            const double* g = nd.grad.data() + i * c;
            double gy = 0.0;
            for (std::size_t j = 0; j < c; ++j) gy += g[j] * y[j];
            for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += y[j] * (g[j] - gy);
        }
    });
}

Tensor elementwise_activate(const Tensor& x, Activation kind) {
    std::vector<double> out(x.size());
    if (kind == Activation::Gelu) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(x.data()[i]);
        return make_op("gelu", x.shape(), std::move(out), {x}, [](TensorNode& nd) {
            auto& p = *nd.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < nd.grad.size(); ++i)
                p.grad[i] += nd.grad[i] * gelu_derivative(p.data[i]);
        });
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(x.data()[i]);
    return make_op("sigmoid", x.shape(), std::move(out), {x}, [](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) {
            const double y = nd.data[i];
            p.grad[i] += nd.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor gelu(const Tensor& x) { return elementwise_activate(x, Activation::Gelu); }
Tensor sigmoid(const Tensor& x) { return elementwise_activate(x, Activation::Sigmoid); }

Tensor exp_elem(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.data()[i]);
    return make_op("exp", x.shape(), std::move(out), {x}, [](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) p.grad[i] += nd.grad[i] * nd.data[i];
    });
}

Tensor log_elem(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        require(x.data()[i] > 0.0, "log: non-positive input");
        out[i] = std::log(x.data()[i]);
    }
    return make_op("log", x.shape(), std::move(out), {x}, [](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) p.grad[i] += nd.grad[i] / p.data[i];
    });
}

Tensor pool(const Tensor& x, std::size_t axis, PoolKind kind) {
    require(x.rank() == 2, "pool: rank-2 tensor required, got " + shape_str(x.shape()));
    require(axis < 2, "pool: invalid axis " + std::to_string(axis) + " for " +
                          shape_str(x.shape()));
    const std::size_t r = x.rows(), c = x.cols();
    const std::size_t out_len = (axis == 0) ? c : r;
    const std::size_t reduce_len = (axis == 0) ? r : c;
    require(reduce_len > 0, "pool: empty reduction axis");
    auto at = [&](std::size_t slice, std::size_t k) {
        return (axis == 0) ? x.data()[k * c + slice] : x.data()[slice * c + k];
    };
    std::vector<double> out(out_len);
    std::vector<std::size_t> arg(kind == PoolKind::Max ? out_len : 0);
    for (std::size_t s = 0; s < out_len; ++s) {
        if (kind == PoolKind::Max) {
            double best = at(s, 0);
            std::size_t bi = 0;
            for (std::size_t k = 1; k < reduce_len; ++k) {
                const double v = at(s, k);
                if (v > best) {  // first maximal index wins ties
                    best = v;
                    bi = k;
                }
            }
            out[s] = best;
            arg[s] = bi;
        } else {
            double acc = 0.0;
            for (std::size_t k = 0; k < reduce_len; ++k) acc += at(s, k);
            out[s] = acc / static_cast<double>(reduce_len);
        }
    }
    return make_op("pool", {out_len}, std::move(out), {x},
                   [axis, r, c, kind, reduce_len, arg = std::move(arg)](TensorNode& nd) {
                       auto& p = *nd.parents[0];
                       p.ensure_grad();
                       const std::size_t out_len = nd.data.size();
                       auto flat = [&](std::size_t slice, std::size_t k) {
                           return (axis == 0) ? k * c + slice : slice * c + k;
                       };
                       (void)r;
                       for (std::size_t s = 0; s < out_len; ++s) {
                           if (kind == PoolKind::Max) {
                               p.grad[flat(s, arg[s])] += nd.grad[s];
                           } else {
                               const double share = nd.grad[s] / static_cast<double>(reduce_len);
                               for (std::size_t k = 0; k < reduce_len; ++k)
                                   p.grad[flat(s, k)] += share;
                           }
                       }
                   });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_op("sum", {1}, {acc}, {x}, [](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += nd.grad[0];
    });
}

Tensor dot(const Tensor& u, const Tensor& v) {
    require(u.rank() == 1 && v.rank() == 1 && u.size() == v.size(),
            "dot: shapes disagree: " + shape_str(u.shape()) + " vs " + shape_str(v.shape()));
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += u.data()[i] * v.data()[i];
    return make_op("dot", {1}, {acc}, {u, v}, [](TensorNode& nd) {
        auto& pu = *nd.parents[0];
        auto& pv = *nd.parents[1];
        if (pu.requires_grad) {
            pu.ensure_grad();
            for (std::size_t i = 0; i < pu.grad.size(); ++i)
                pu.grad[i] += nd.grad[0] * pv.data[i];
        }
        if (pv.requires_grad) {
            pv.ensure_grad();
            for (std::size_t i = 0; i < pv.grad.size(); ++i)
                pv.grad[i] += nd.grad[0] * pu.data[i];
        }
    });
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
    require(u.rank() == 1 && v.rank() == 1 && u.size() == v.size(),
            "cosine_similarity: shapes disagree: " + shape_str(u.shape()) + " vs " +
                shape_str(v.shape()));
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uu += u.data()[i] * u.data()[i];
        vv += v.data()[i] * v.data()[i];
        uv += u.data()[i] * v.data()[i];
    }
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    if (nu <= 1e-12 || nv <= 1e-12)
        throw std::invalid_argument("cosine_similarity: degenerate input (zero-norm vector)");
    const double cosv = uv / (nu * nv);
    return make_op("cosine", {1}, {cosv}, {u, v}, [nu, nv, cosv](TensorNode& nd) {
        auto& pu = *nd.parents[0];
        auto& pv = *nd.parents[1];
        const double g = nd.grad[0];
        if (pu.requires_grad) {
            pu.ensure_grad();
            for (std::size_t i = 0; i < pu.grad.size(); ++i)
                pu.grad[i] += g * (pv.data[i] / (nu * nv) - cosv * pu.data[i] / (nu * nu));
        }
        if (pv.requires_grad) {
            pv.ensure_grad();
            for (std::size_t i = 0; i < pv.grad.size(); ++i)
                pv.grad[i] += g * (pu.data[i] / (nu * nv) - cosv * pv.data[i] / (nv * nv));
        }
    });
}

Tensor pick(const Tensor& x, std::size_t flat_index) {
    require(flat_index < x.size(), "pick: index " + std::to_string(flat_index) +
                                       " out of range for " + shape_str(x.shape()));
    return make_op("pick", {1}, {x.data()[flat_index]}, {x}, [flat_index](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        p.grad[flat_index] += nd.grad[0];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    require(shape_product(shape) == x.size(), "reshape: size mismatch: " +
                                                  shape_str(x.shape()) + " to " +
                                                  shape_str(shape));
    return make_op("reshape", std::move(shape), x.data(), {x}, [](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) p.grad[i] += nd.grad[i];
    });
}

Tensor stack(const std::vector<Tensor>& scalars) {
    require(!scalars.empty(), "stack: empty input");
    std::vector<double> out;
    out.reserve(scalars.size());
    for (const Tensor& t : scalars) {
        require(t.size() == 1, "stack: size-1 tensors required, got " + shape_str(t.shape()));
        out.push_back(t.data()[0]);
    }
    return make_op("stack", {scalars.size()}, std::move(out), scalars, [](TensorNode& nd) {
        for (std::size_t i = 0; i < nd.parents.size(); ++i) {
            auto& p = *nd.parents[i];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            p.grad[0] += nd.grad[i];
        }
    });
}

Tensor grid_pool2x2(const Tensor& x, std::size_t r) {
    require(x.rank() == 2 && x.rows() == r * r,
            "grid_pool2x2: expected " + std::to_string(r * r) + " patch rows, got " +
                shape_str(x.shape()));
    require(r % 2 == 0, "grid_pool2x2: odd grid side " + std::to_string(r));
    const std::size_t d = x.cols(), h = r / 2;
    std::vector<double> out(h * h * d, 0.0);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < h; ++j)
            for (std::size_t di = 0; di < 2; ++di)
                for (std::size_t dj = 0; dj < 2; ++dj) {
                    const std::size_t src = (2 * i + di) * r + (2 * j + dj);
                    for (std::size_t k = 0; k < d; ++k)
                        out[(i * h + j) * d + k] += 0.25 * x.data()[src * d + k];
                }
    return make_op("grid_pool2x2", {h * h, d}, std::move(out), {x}, [r, h, d](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < h; ++j)
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj) {
                        const std::size_t src = (2 * i + di) * r + (2 * j + dj);
                        for (std::size_t k = 0; k < d; ++k)
                            p.grad[src * d + k] += 0.25 * nd.grad[(i * h + j) * d + k];
                    }
    });
}

Tensor grid_up2x2(const Tensor& x, std::size_t r) {
    require(x.rank() == 2 && x.rows() == r * r,
            "grid_up2x2: expected " + std::to_string(r * r) + " patch rows, got " +
                shape_str(x.shape()));
    const std::size_t d = x.cols(), h = 2 * r;
    std::vector<double> out(h * h * d);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < h; ++j) {
            const std::size_t src = (i / 2) * r + (j / 2);
            for (std::size_t k = 0; k < d; ++k)
                out[(i * h + j) * d + k] = x.data()[src * d + k];
        }
    return make_op("grid_up2x2", {h * h, d}, std::move(out), {x}, [r, h, d](TensorNode& nd) {
        auto& p = *nd.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < h; ++j) {
                const std::size_t src = (i / 2) * r + (j / 2);
                for (std::size_t k = 0; k < d; ++k)
                    p.grad[src * d + k] += nd.grad[(i * h + j) * d + k];
            }
    });
}

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
    require(loss.size() == 1,
            "backward: loss must be scalar, got " + shape_str(loss.shape()));
    require(loss.requires_grad(), "backward: loss is not on the tape");

    // Iterative post-order DFS; every node visited exactly once.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

// ---------------------------------------------------------------------------
// finite-difference audit

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                  double h, std::size_t coords_per_param, std::uint64_t seed) {
    for (const Tensor& p : params) {
        require(p.requires_grad(), "grad_check: parameter without requires_grad");
        const_cast<Tensor&>(p).zero_grad();
    }
    Tensor loss = f();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) analytic.push_back(p.grad());

    std::mt19937_64 rng(seed);
    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        std::vector<std::size_t> coords(p.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(coords_per_param);
        }
        auto& buf = p.mutable_data();
        for (std::size_t c : coords) {
            const double orig = buf[c];
            buf[c] = orig + h;
            const double fp = f().item();
            buf[c] = orig - h;
            const double fm = f().item();
            buf[c] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double ana = analytic[pi][c];
            const double denom = std::max({std::abs(ana), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::abs(ana - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace psvma
