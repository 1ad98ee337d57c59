#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vlmatch {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    std::uint64_t seq = 0;
    bool requires_grad = false;
    bool is_leaf = true;
    bool consumed = false;
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies alias the same storage. Ops record
/// their inputs while gradient recording is enabled (see NoGradGuard) and
/// any input requires grad. Recorded ops are replayed in reverse creation
/// order by backward(), so the graph order is the program order.
///
/// backward() consumes the graph it walks: interior nodes release their
/// backward rules, and calling backward() again on any consumed node throws
/// StateError. Leaf gradients accumulate across separate graphs until
/// zero_grad() is called.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
    /// Leaf that requires grad; its grad buffer is allocated and zeroed.
    static Tensor parameter(Shape shape, std::vector<double> values);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    std::size_t dim(std::size_t axis) const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    /// Empty span when no gradient has been accumulated for this node.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    bool requires_grad() const;
    bool is_leaf() const;

    double item() const;
    double operator[](std::size_t i) const { return data()[i]; }
    double at(std::size_t r, std::size_t c) const;

    /// Fresh leaf holding a copy of the values; no graph, no grad.
    Tensor detach() const;
    /// Fresh parameter leaf holding a copy of the values.
    Tensor clone_parameter() const;

    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    detail::Node& checked() const;
    std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_recording_enabled();

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a [m,k] times the transpose of b [n,k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x [n,in] or [in] times w [in,out] plus optional bias [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Adds a bias vector along the last axis; the only supported broadcast.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& x);
Tensor embedding(const Tensor& table, std::span<const int> ids);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
/// Row i of a matrix as a rank-1 tensor.
Tensor row(const Tensor& x, std::size_t i);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum over the last axis: [n,c] -> [n], [c] -> scalar.
Tensor row_sum(const Tensor& x);
Tensor dot(const Tensor& u, const Tensor& v);

/// L2-normalizes a vector, or each row of a matrix.
Tensor l2_normalize(const Tensor& x);
Tensor cosine_similarity(const Tensor& u, const Tensor& v);
/// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace vlmatch
