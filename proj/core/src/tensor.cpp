#include "vlmatch/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "vlmatch/error.hpp"

namespace vlmatch {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_next_seq = 1;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    if (values.size() != n) {
        throw DimensionError("tensor: shape " + shape_to_string(shape) + " needs " +
                             std::to_string(n) + " values, got " +
                             std::to_string(values.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    node->seq = t_next_seq++;
    if (requires_grad) node->grad.assign(n, 0.0);
    return node;
}

// Builds an op result. The backward rule is attached only when recording is
// on and some input requires grad.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->seq = t_next_seq++;
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr& p) { return p->requires_grad; });
    if (t_grad_enabled && any) {
        node->requires_grad = true;
        node->is_leaf = false;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

// Gradient buffer of a parent, or nullptr when it does not need one.
double* grad_buffer(Node& n) {
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad.data();
}

struct MatDims {
    std::size_t rows;
    std::size_t cols;
};

MatDims require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                             shape_to_string(t.shape()));
    }
    return {t.shape()[0], t.shape()[1]};
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

}  // namespace

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (const auto d : shape) {
        if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), false));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    return Tensor(make_leaf(std::move(shape), std::move(values), false));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return from({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return from({rows, cols}, std::move(values));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    return Tensor(make_leaf(std::move(shape), std::move(values), true));
}

detail::Node& Tensor::checked() const {
    if (!node_) throw StateError("tensor: use of an undefined tensor");
    return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }
std::size_t Tensor::size() const { return checked().value.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw IndexError("tensor: axis out of range");
    return s[axis];
}

std::span<const double> Tensor::data() const { return checked().value; }
std::span<double> Tensor::mutable_data() { return checked().value; }
std::span<const double> Tensor::grad() const { return checked().grad; }

std::span<double> Tensor::mutable_grad() {
    auto& n = checked();
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

void Tensor::zero_grad() {
    auto& n = checked();
    std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return checked().requires_grad; }
bool Tensor::is_leaf() const { return checked().is_leaf; }

double Tensor::item() const {
    const auto& n = checked();
    if (n.value.size() != 1) {
        throw DimensionError("tensor: item() on non-scalar shape " + shape_to_string(n.shape));
    }
    return n.value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    const auto d = require_matrix(*this, "at");
    if (r >= d.rows || c >= d.cols) throw IndexError("tensor: at() out of range");
    return data()[r * d.cols + c];
}

Tensor Tensor::detach() const {
    const auto& n = checked();
    return Tensor(make_leaf(n.shape, n.value, false));
}

Tensor Tensor::clone_parameter() const {
    const auto& n = checked();
    return Tensor(make_leaf(n.shape, n.value, true));
}

void Tensor::backward() const {
    auto& root = checked();
    if (root.value.size() != 1) {
        throw DimensionError("backward: loss must be a scalar, got shape " +
                             shape_to_string(root.shape));
    }
    if (root.consumed) {
        throw StateError("backward: graph already consumed by a previous backward()");
    }
    if (!root.requires_grad) return;

    std::vector<Node*> order;
    std::vector<std::shared_ptr<Node>> owners;  // keeps nodes alive while parents are cleared
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{&root};
    seen.insert(&root);
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) {
                stack.push_back(p.get());
                owners.push_back(p);
            }
        }
    }
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

    if (root.grad.empty()) root.grad.assign(1, 0.0);
    root.grad[0] += 1.0;
    for (Node* n : order) {
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    for (Node* n : order) {
        if (n->is_leaf) continue;
        n->consumed = true;
        n->backward_fn = nullptr;
        n->parents.clear();
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_recording_enabled() { return t_grad_enabled; }

// ---- matrix products ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto da = require_matrix(a, "matmul");
    const auto db = require_matrix(b, "matmul");
    if (da.cols != db.rows) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(a.shape()) +
                             " x " + shape_to_string(b.shape()));
    }
    const std::size_t m = da.rows, k = da.cols, n = db.cols;
    std::vector<double> out(m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* c = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
        }
    }
    return make_result({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
        Node& na = *self.parents[0];
        Node& nb = *self.parents[1];
        const double* G = self.grad.data();
        if (double* ga = grad_buffer(na)) {
            const double* B = nb.value.data();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* brow = B + p * n;
                    const double* grow = G + i * n;
                    for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                    ga[i * k + p] += s;
                }
            }
        }
        if (double* gb = grad_buffer(nb)) {
            const double* A = na.value.data();
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = G + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    double* gbrow = gb + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const auto da = require_matrix(a, "matmul_nt");
    const auto db = require_matrix(b, "matmul_nt");
    if (da.cols != db.cols) {
        throw DimensionError("matmul_nt: row widths differ, " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
    const std::size_t m = da.rows, k = da.cols, n = db.rows;
    std::vector<double> out(m * n);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
            out[i * n + j] = s;
        }
    }
    return make_result({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
        Node& na = *self.parents[0];
        Node& nb = *self.parents[1];
        const double* G = self.grad.data();
        if (double* ga = grad_buffer(na)) {
            const double* B = nb.value.data();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double g = G[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * B[j * k + p];
                }
            }
        }
        if (double* gb = grad_buffer(nb)) {
            const double* A = na.value.data();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double g = G[i * n + j];
                    for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += g * A[i * k + p];
                }
            }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() == 1) {
        Tensor y = linear(reshape(x, {1, x.size()}), w, b);
        return reshape(y, {y.size()});
    }
    Tensor y = matmul(x, w);
    return b.defined() ? add_bias(y, b) : y;
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
        for (auto& p : self.parents) {
            if (double* g = grad_buffer(*p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
        if (double* g = grad_buffer(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = grad_buffer(*self.parents[1])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
        Node& na = *self.parents[0];
        Node& nb = *self.parents[1];
        if (double* g = grad_buffer(na)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * nb.value[i];
        }
        if (double* g = grad_buffer(nb)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * na.value[i];
        }
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t c = last_dim(x);
    if (bias.rank() != 1 || bias.size() != c) {
        throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) +
                             " does not match last axis of " + shape_to_string(x.shape()));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto bv = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
    return make_result(x.shape(), std::move(out), {x.node(), bias.node()}, [c](Node& self) {
        if (double* g = grad_buffer(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = grad_buffer(*self.parents[1])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
        }
    });
}

Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= factor;
    return make_result(x.shape(), std::move(out), {x.node()}, [factor](Node& self) {
        if (double* g = grad_buffer(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
        }
    });
}

Tensor add_scalar(const Tensor& x, double value) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (auto& v : out) v += value;
    return make_result(x.shape(), std::move(out), {x.node()}, [](Node& self) {
        if (double* g = grad_buffer(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

// ---- normalization and activations ---------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    const auto& s = x.shape();
    const int r = static_cast<int>(s.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                             shape_to_string(s));
    }
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < r; ++i) inner *= s[i];
    const std::size_t n = s[axis];
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    }
    return make_result(s, std::move(out), {x.node()}, [outer, inner, n](Node& self) {
        double* g = grad_buffer(*self.parents[0]);
        if (!g) return;
        const double* y = self.value.data();
        const double* gy = self.grad.data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                double d = 0.0;
                for (std::size_t j = 0; j < n; ++j) d += gy[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t idx = base + j * inner;
                    g[idx] += y[idx] * (gy[idx] - d);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
    const std::size_t c = last_dim(x);
    if (gain.rank() != 1 || gain.size() != c || bias.rank() != 1 || bias.size() != c) {
        throw DimensionError("layer_norm: gain/bias must have shape [" + std::to_string(c) + "]");
    }
    const std::size_t rows = x.size() / c;
    const auto xv = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();
    std::vector<double> out(xv.size());
    std::vector<double> xhat(xv.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (xr[j] - mu) * is;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gv[j] + bv[j];
        }
    }
    return make_result(
        x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
        [rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            Node& nx = *self.parents[0];
            Node& ng = *self.parents[1];
            const double* gy = self.grad.data();
            if (double* gg = grad_buffer(ng)) {
                for (std::size_t i = 0; i < rows * c; ++i) gg[i % c] += gy[i] * xhat[i];
            }
            if (double* gb = grad_buffer(*self.parents[2])) {
                for (std::size_t i = 0; i < rows * c; ++i) gb[i % c] += gy[i];
            }
            if (double* gx = grad_buffer(nx)) {
                const double* gv = ng.value.data();
                const double inv_c = 1.0 / static_cast<double>(c);
                for (std::size_t r = 0; r < rows; ++r) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dh = gy[r * c + j] * gv[j];
                        s1 += dh;
                        s2 += dh * xhat[r * c + j];
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dh = gy[r * c + j] * gv[j];
                        gx[r * c + j] +=
                            inv_std[r] * (dh - inv_c * s1 - xhat[r * c + j] * inv_c * s2);
                    }
                }
            }
        });
}

Tensor gelu(const Tensor& x) {
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
    }
    return make_result(x.shape(), std::move(out), {x.node()}, [](Node& self) {
        Node& nx = *self.parents[0];
        double* g = grad_buffer(nx);
        if (!g) return;
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double v = nx.value[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    const auto d = require_matrix(table, "embedding");
    if (ids.empty()) throw DimensionError("embedding: empty id list");
    std::vector<double> out(ids.size() * d.cols);
    const auto tv = table.data();
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= d.rows) {
            throw IndexError("embedding: id " + std::to_string(ids[r]) + " outside [0, " +
                             std::to_string(d.rows) + ")");
        }
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[r] * d.cols), d.cols,
                    out.begin() + static_cast<std::ptrdiff_t>(r * d.cols));
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return make_result({ids.size(), d.cols}, std::move(out), {table.node()},
                       [idx = std::move(idx), cols = d.cols](Node& self) {
                           double* g = grad_buffer(*self.parents[0]);
                           if (!g) return;
                           for (std::size_t r = 0; r < idx.size(); ++r) {
                               for (std::size_t j = 0; j < cols; ++j) {
                                   g[idx[r] * cols + j] += self.grad[r * cols + j];
                               }
                           }
                       });
}

// ---- structural ----------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const std::size_t r = parts[0].rank();
    if (r == 0 || r > 2 || axis >= r) {
        throw DimensionError("concat: unsupported rank/axis for shape " +
                             shape_to_string(parts[0].shape()));
    }
    // Treat every part as (outer, width) blocks; axis 0 of a matrix has one
    // outer block with width rows*cols.
    std::size_t outer = 1;
    if (r == 2 && axis == 1) outer = parts[0].shape()[0];
    std::vector<std::size_t> widths;
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw DimensionError("concat: rank mismatch");
        for (std::size_t a = 0; a < r; ++a) {
            if (a != axis && p.shape()[a] != parts[0].shape()[a]) {
                throw DimensionError("concat: shape mismatch " + shape_to_string(p.shape()) +
                                     " vs " + shape_to_string(parts[0].shape()));
            }
        }
        out_shape[axis] += p.shape()[axis];
        widths.push_back(p.size() / outer);
    }
    const std::size_t total_width = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
    std::vector<double> out(outer * total_width);
    std::vector<NodePtr> parents;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto pv = parts[k].data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                        out.begin() + static_cast<std::ptrdiff_t>(o * total_width + offset));
        }
        offset += widths[k];
        parents.push_back(parts[k].node());
    }
    return make_result(std::move(out_shape), std::move(out), std::move(parents),
                       [outer, total_width, widths = std::move(widths)](Node& self) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < widths.size(); ++k) {
                               if (double* g = grad_buffer(*self.parents[k])) {
                                   for (std::size_t o = 0; o < outer; ++o) {
                                       for (std::size_t j = 0; j < widths[k]; ++j) {
                                           g[o * widths[k] + j] +=
                                               self.grad[o * total_width + off + j];
                                       }
                                   }
                               }
                               off += widths[k];
                           }
                       });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    const auto d = require_matrix(x, "slice_rows");
    if (begin >= end || end > d.rows) throw IndexError("slice_rows: bad range");
    const auto xv = x.data();
    std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * d.cols),
                            xv.begin() + static_cast<std::ptrdiff_t>(end * d.cols));
    const std::size_t offset = begin * d.cols;
    return make_result({end - begin, d.cols}, std::move(out), {x.node()}, [offset](Node& self) {
        if (double* g = grad_buffer(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
        }
    });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
    const auto d = require_matrix(x, "slice_cols");
    if (begin >= end || end > d.cols) throw IndexError("slice_cols: bad range");
    const std::size_t w = end - begin;
    const auto xv = x.data();
    std::vector<double> out(d.rows * w);
    for (std::size_t r = 0; r < d.rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = xv[r * d.cols + begin + j];
    }
    return make_result({d.rows, w}, std::move(out), {x.node()},
                       [rows = d.rows, cols = d.cols, begin, w](Node& self) {
                           double* g = grad_buffer(*self.parents[0]);
                           if (!g) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < w; ++j) {
                                   g[r * cols + begin + j] += self.grad[r * w + j];
                               }
                           }
                       });
}

Tensor row(const Tensor& x, std::size_t i) {
    const auto d = require_matrix(x, "row");
    return reshape(slice_rows(x, i, i + 1), {d.cols});
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                             shape_to_string(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_result(std::move(shape), std::move(out), {x.node()}, [](Node& self) {
        if (double* g = grad_buffer(*self.parents[0])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor transpose(const Tensor& x) {
    const auto d = require_matrix(x, "transpose");
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t r = 0; r < d.rows; ++r) {
        for (std::size_t c = 0; c < d.cols; ++c) out[c * d.rows + r] = xv[r * d.cols + c];
    }
    return make_result({d.cols, d.rows}, std::move(out), {x.node()},
                       [rows = d.rows, cols = d.cols](Node& self) {
                           double* g = grad_buffer(*self.parents[0]);
                           if (!g) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) {
                                   g[r * cols + c] += self.grad[c * rows + r];
                               }
                           }
                       });
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (const double v : x.data()) s += v;
    return make_result({}, {s}, {x.node()}, [](Node& self) {
        if (double* g = grad_buffer(*self.parents[0])) {
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor row_sum(const Tensor& x) {
    const std::size_t c = last_dim(x);
    const std::size_t rows = x.size() / c;
    const auto xv = x.data();
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) out[r] += xv[r * c + j];
    }
    Shape shape = x.rank() <= 1 ? Shape{} : Shape(x.shape().begin(), x.shape().end() - 1);
    return make_result(std::move(shape), std::move(out), {x.node()}, [c, rows](Node& self) {
        if (double* g = grad_buffer(*self.parents[0])) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[r];
            }
        }
    });
}

Tensor dot(const Tensor& u, const Tensor& v) { return sum(mul(u, v)); }

Tensor l2_normalize(const Tensor& x) {
    if (x.rank() == 0 || x.rank() > 2) {
        throw DimensionError("l2_normalize: expected vector or matrix, got " +
                             shape_to_string(x.shape()));
    }
    const std::size_t c = last_dim(x);
    const std::size_t rows = x.size() / c;
    const auto xv = x.data();
    std::vector<double> out(xv.size());
    std::vector<double> inv_norm(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < c; ++j) ss += xv[r * c + j] * xv[r * c + j];
        if (!(ss > 0.0)) throw DegenerateInputError("l2_normalize: zero vector");
        const double inv = 1.0 / std::sqrt(ss);
        inv_norm[r] = inv;
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] * inv;
    }
    return make_result(x.shape(), std::move(out), {x.node()},
                       [rows, c, inv_norm = std::move(inv_norm)](Node& self) {
                           double* g = grad_buffer(*self.parents[0]);
                           if (!g) return;
                           const double* y = self.value.data();
                           const double* gy = self.grad.data();
                           for (std::size_t r = 0; r < rows; ++r) {
                               double d = 0.0;
                               for (std::size_t j = 0; j < c; ++j) d += gy[r * c + j] * y[r * c + j];
                               for (std::size_t j = 0; j < c; ++j) {
                                   g[r * c + j] += inv_norm[r] * (gy[r * c + j] - y[r * c + j] * d);
                               }
                           }
                       });
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
    if (u.rank() != 1 || v.rank() != 1 || u.size() != v.size()) {
        throw DimensionError("cosine_similarity: expected equal-length vectors, got " +
                             shape_to_string(u.shape()) + " and " + shape_to_string(v.shape()));
    }
    return dot(l2_normalize(u), l2_normalize(v));
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    if (logits.rank() == 1) return cross_entropy(reshape(logits, {1, logits.size()}), targets);
    const auto d = require_matrix(logits, "cross_entropy");
    if (targets.size() != d.rows) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(d.rows) + " rows");
    }
    const auto lv = logits.data();
    std::vector<double> probs(lv.size());
    double total = 0.0;
    for (std::size_t r = 0; r < d.rows; ++r) {
        if (targets[r] >= d.cols) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[r]) +
                             " outside [0, " + std::to_string(d.cols) + ")");
        }
        const double* x = lv.data() + r * d.cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < d.cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < d.cols; ++j) {
            const double e = std::exp(x[j] - mx);
            probs[r * d.cols + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < d.cols; ++j) probs[r * d.cols + j] /= z;
        total += (mx + std::log(z)) - x[targets[r]];
    }
    const double n = static_cast<double>(d.rows);
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    return make_result({}, {total / n}, {logits.node()},
                       [probs = std::move(probs), tgt = std::move(tgt), cols = d.cols,
                        n](Node& self) {
                           double* g = grad_buffer(*self.parents[0]);
                           if (!g) return;
                           const double s = self.grad[0] / n;
                           for (std::size_t r = 0; r < tgt.size(); ++r) {
                               for (std::size_t j = 0; j < cols; ++j) {
                                   const double onehot = (j == tgt[r]) ? 1.0 : 0.0;
                                   g[r * cols + j] += s * (probs[r * cols + j] - onehot);
                               }
                           }
                       });
}

}  // namespace vlmatch
