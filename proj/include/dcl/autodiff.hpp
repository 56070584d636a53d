#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive applied while it is the active tape on the
// calling thread (RAII: constructing a Tape activates it, destroying it
// restores the previous one). Operations on inputs that do not require
// gradients, or evaluated with no active tape, produce plain constants.
// backward() walks the tape once in reverse; a tape cannot be replayed.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "dcl/ndarray.hpp"

namespace dcl::ad {

template <class T>
struct Node {
    using BackwardFn = std::function<void(const NdArray<T>& grad_out, std::span<NdArray<T>* const> grad_in)>;

    NdArray<T> value;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;
};

/// Differentiable tensor handle. Copies share the underlying node.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NdArray<T> value, bool requires_grad = false);

    static Tensor from_node(std::shared_ptr<Node<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const NdArray<T>& value() const { return node_->value; }
    /// Mutable access for leaves (optimizer updates, test perturbations).
    NdArray<T>& mutable_value();
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    T item() const;

    const Node<T>* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

template <class T>
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Active tape for this thread, or nullptr.
    static Tape* current() noexcept;

    void record(std::shared_ptr<Node<T>> node);
    std::size_t size() const noexcept { return entries_.size(); }
    bool consumed() const noexcept { return consumed_; }
    void mark_consumed() noexcept { consumed_ = true; }
    const std::vector<std::shared_ptr<Node<T>>>& entries() const noexcept { return entries_; }

private:
    std::vector<std::shared_ptr<Node<T>>> entries_;
    bool consumed_ = false;
    Tape* previous_ = nullptr;
};

template <class T>
class Gradients {
public:
    /// Gradient for `t`; all zeros when `t` did not influence the loss.
    NdArray<T> of(const Tensor<T>& t) const;
    const NdArray<T>* find(const Tensor<T>& t) const;
    std::size_t count() const noexcept { return grads_.size(); }

private:
    template <class U>
    friend Gradients<U> backward(const Tensor<U>& loss, Tape<U>& tape);
    std::unordered_map<const Node<T>*, NdArray<T>> grads_;
};

/// d(loss)/d(leaf) for every grad-enabled leaf reachable through `tape`.
template <class T>
Gradients<T> backward(const Tensor<T>& loss, Tape<T>& tape);

// ---------------------------------------------------------------------------
// Construction

template <class T>
Tensor<T> constant(NdArray<T> value) {
    return Tensor<T>(std::move(value), false);
}

template <class T>
Tensor<T> parameter(NdArray<T> value) {
    return Tensor<T>(std::move(value), true);
}

/// Same value, cut from the graph.
template <class T>
Tensor<T> detach(const Tensor<T>& x);

// ---------------------------------------------------------------------------
// Elementwise

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
/// Adds b (length x.dim(1)) along axis 1; works for N x D and N x C x H x W.
template <class T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);

/// log(max(x, floor)); zero gradient where x < floor. floor == 0 is a plain log.
template <class T> Tensor<T> log(const Tensor<T>& x, T floor = T{0});
template <class T> Tensor<T> abs(const Tensor<T>& x);
template <class T> Tensor<T> relu(const Tensor<T>& x);
/// Gradient at exactly 0 uses the negative-side slope.
template <class T> Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
template <class T> Tensor<T> tanh(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);

// ---------------------------------------------------------------------------
// Reductions and structure

template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);
/// Reduces one axis; the axis is removed (rank-1 input yields shape {1}).
template <class T> Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis);
template <class T> Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);
template <class T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <class T> Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Rows [begin, end) along axis 0.
template <class T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);

// ---------------------------------------------------------------------------
// Linear algebra and convolution (NCHW)

template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

enum class Padding { same, valid };

/// Cross-correlation. kernel is O x I x KH x KW.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, Padding padding);

/// Adjoint of conv2d. kernel is I x O x KH x KW; "same" multiplies spatial
/// extents by the stride.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, Padding padding);

template <class T>
struct BatchStats {
    std::vector<T> mean;
    std::vector<T> var;  // biased
};

/// Training-mode batch normalization over every axis except 1.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     BatchStats<T>* stats_out = nullptr);

/// Inference-mode batch normalization with fixed statistics.
template <class T>
Tensor<T> batch_norm_inference(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                               std::span<const T> mean, std::span<const T> var, T eps);

/// Inverted dropout. The mask bit of element j in row r depends only on
/// (seed, (row_offset + r) * row_size + j), so results do not depend on how a
/// dataset is split into batches.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t seed, std::size_t row_offset = 0);

} // namespace dcl::ad

namespace dcl::ad {

template <class T>
Tensor<T> dropout_apply(const Tensor<T>& x, double rate, std::uint64_t seed) {
    return dropout(x, rate, seed, 0);
}

} // namespace dcl::ad
