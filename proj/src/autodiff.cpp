#include "dcl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dcl/rng.hpp"
#include "kernels.hpp"

namespace dcl::ad {

// ---------------------------------------------------------------------------
// Tensor / Tape / backward

template <class T>
Tensor<T>::Tensor(NdArray<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

template <class T>
NdArray<T>& Tensor<T>::mutable_value() {
    if (node_->backward) throw TapeError("mutable_value() on a non-leaf tensor (" + std::string(node_->op) + ")");
    return node_->value;
}

template <class T>
T Tensor<T>::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

namespace {

template <class T>
Tape<T>*& current_tape_slot() noexcept {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}

} // namespace

template <class T>
Tape<T>::Tape() : previous_(current_tape_slot<T>()) {
    current_tape_slot<T>() = this;
}

template <class T>
Tape<T>::~Tape() {
    current_tape_slot<T>() = previous_;
}

template <class T>
Tape<T>* Tape<T>::current() noexcept {
    return current_tape_slot<T>();
}

template <class T>
void Tape<T>::record(std::shared_ptr<Node<T>> node) {
    if (consumed_) throw TapeError("recording onto a consumed tape");
    entries_.push_back(std::move(node));
}

template <class T>
NdArray<T> Gradients<T>::of(const Tensor<T>& t) const {
    if (const auto* g = find(t)) return *g;
    return NdArray<T>(t.shape(), T{0});
}

template <class T>
const NdArray<T>* Gradients<T>::find(const Tensor<T>& t) const {
    auto it = grads_.find(t.node());
    return it == grads_.end() ? nullptr : &it->second;
}

template <class T>
Gradients<T> backward(const Tensor<T>& loss, Tape<T>& tape) {
    if (tape.consumed()) throw TapeError("tape already consumed by a previous backward pass");
    if (loss.size() != 1) throw TapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    tape.mark_consumed();

    Gradients<T> out;
    if (!loss.requires_grad()) return out;

    auto& grads = out.grads_;
    grads.emplace(loss.node(), NdArray<T>(loss.shape(), T{1}));

    const auto& entries = tape.entries();
    std::vector<NdArray<T>*> slots;
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        const Node<T>* node = it->get();
        auto found = grads.find(node);
        if (found == grads.end()) continue;
        NdArray<T> grad_out = std::move(found->second);
        grads.erase(found);

        slots.assign(node->inputs.size(), nullptr);
        for (std::size_t i = 0; i < node->inputs.size(); ++i) {
            const auto& in = node->inputs[i];
            if (!in->requires_grad) continue;
            auto& slot = grads[in.get()];  // unordered_map keeps references stable
            if (slot.empty()) slot = NdArray<T>(in->value.shape(), T{0});
            slots[i] = &slot;
        }
        node->backward(grad_out, slots);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

template <class T>
using BackwardFn = typename Node<T>::BackwardFn;

template <class T>
Tensor<T> make_result(NdArray<T> value, const char* op, std::vector<Tensor<T>> inputs, BackwardFn<T> fn) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->op = op;
    Tape<T>* tape = Tape<T>::current();
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (tape && needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
        node->backward = std::move(fn);
        tape->record(node);
    }
    return Tensor<T>::from_node(std::move(node));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class F, class T>
Tensor<T> unary(const Tensor<T>& x, const char* op, F&& forward, BackwardFn<T> fn) {
    const NdArray<T>& xv = x.value();
    NdArray<T> out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = forward(xv[i]);
    return make_result<T>(std::move(out), op, {x}, std::move(fn));
}

struct AxisSplit {
    std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size())
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

} // namespace

template <class T>
Tensor<T> detach(const Tensor<T>& x) {
    return Tensor<T>(x.value(), false);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    NdArray<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_result<T>(std::move(out), "add", {a, b}, [](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        for (NdArray<T>* gi : gin)
            if (gi)
                for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    NdArray<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make_result<T>(std::move(out), "sub", {a, b}, [](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        if (gin[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
        if (gin[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    NdArray<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_result<T>(std::move(out), "mul", {a, b}, [an, bn](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        if (gin[0])
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * bn->value[i];
        if (gin[1])
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * an->value[i];
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    return unary(a, "scale", [factor](T v) { return v * factor; },
                 [factor](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * factor;
                 });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
    return unary(a, "add_scalar", [offset](T v) { return v + offset; },
                 [](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                 });
}

template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
    if (x.shape().size() < 2 || b.size() != x.dim(1))
        throw ShapeError("add_bias: input " + shape_str(x.shape()) + " incompatible with bias " + shape_str(b.shape()));
    const AxisSplit s = split_axis(x.shape(), 1, "add_bias");
    NdArray<T> out(x.shape());
    const T* xv = x.value().data();
    const T* bv = b.value().data();
    if (s.inner == 1) {
        for (std::size_t o = 0; o < s.outer; ++o) {
            T* __restrict orow = out.data() + o * s.extent;
            const T* __restrict xrow = xv + o * s.extent;
            for (std::size_t c = 0; c < s.extent; ++c) orow[c] = xrow[c] + bv[c];
        }
    } else {
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t c = 0; c < s.extent; ++c) {
                const std::size_t base = (o * s.extent + c) * s.inner;
                for (std::size_t i = 0; i < s.inner; ++i) out[base + i] = xv[base + i] + bv[c];
            }
    }
    return make_result<T>(std::move(out), "add_bias", {x, b}, [s](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        if (gin[0]) {
            T* __restrict gx = gin[0]->data();
            const T* __restrict gv = g.data();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += gv[i];
        }
        if (gin[1] && s.inner == 1) {
            T* __restrict gb = gin[1]->data();
            for (std::size_t o = 0; o < s.outer; ++o) {
                const T* __restrict grow = g.data() + o * s.extent;
                for (std::size_t c = 0; c < s.extent; ++c) gb[c] += grow[c];
            }
        } else if (gin[1])
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t c = 0; c < s.extent; ++c) {
                    const std::size_t base = (o * s.extent + c) * s.inner;
                    T acc = 0;
                    for (std::size_t i = 0; i < s.inner; ++i) acc += g[base + i];
                    (*gin[1])[c] += acc;
                }
    });
}

template <class T>
Tensor<T> log(const Tensor<T>& x, T floor) {
    auto xn = x.node_ptr();
    return unary(x, "log", [floor](T v) { return std::log(std::max(v, floor)); },
                 [xn, floor](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                     const NdArray<T>& xv = xn->value;
                     for (std::size_t i = 0; i < g.size(); ++i)
                         if (xv[i] >= floor) (*gin[0])[i] += g[i] / xv[i];
                 });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
    auto xn = x.node_ptr();
    return unary(x, "abs", [](T v) { return std::abs(v); }, [xn](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        const NdArray<T>& xv = xn->value;
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += xv[i] > 0 ? g[i] : (xv[i] < 0 ? -g[i] : T{0});
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    auto xn = x.node_ptr();
    return unary(x, "relu", [](T v) { return v > 0 ? v : T{0}; },
                 [xn](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                     const T* __restrict xv = xn->value.data();
                     const T* __restrict gv = g.data();
                     T* __restrict gx = gin[0]->data();
                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > 0 ? gv[i] : T{0};
                 });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    if (!(slope >= 0 && slope < 1)) throw ConfigError("leaky_relu slope must lie in [0,1)");
    auto xn = x.node_ptr();
    return unary(x, "leaky_relu", [slope](T v) { return v > 0 ? v : v * slope; },
                 [xn, slope](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                     const NdArray<T>& xv = xn->value;
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += xv[i] > 0 ? g[i] : g[i] * slope;
                 });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
    auto out = unary(x, "tanh", [](T v) { return std::tanh(v); }, nullptr);
    if (!out.requires_grad()) return out;
    // Output-dependent derivative: rebuild the closure with the output node.
    std::weak_ptr<Node<T>> self = out.node_ptr();
    out.node_ptr()->backward = [self](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        const NdArray<T>& y = self.lock()->value;
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (T{1} - y[i] * y[i]);
    };
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    auto out = unary(
        x, "sigmoid",
        [](T v) { return v >= 0 ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v)); }, nullptr);
    if (!out.requires_grad()) return out;
    std::weak_ptr<Node<T>> self = out.node_ptr();
    out.node_ptr()->backward = [self](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        const NdArray<T>& y = self.lock()->value;
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * y[i] * (T{1} - y[i]);
    };
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and structure

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.value().values()) acc += v;
    return make_result<T>(NdArray<T>::scalar(acc), "sum", {x}, [](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        for (auto& v : gin[0]->values()) v += g[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    const T n = static_cast<T>(x.size());
    T acc = 0;
    for (T v : x.value().values()) acc += v;
    return make_result<T>(NdArray<T>::scalar(acc / n), "mean", {x},
                          [n](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                              const T d = g[0] / n;
                              for (auto& v : gin[0]->values()) v += d;
                          });
}

namespace {

template <class T>
Tensor<T> reduce_axis(const Tensor<T>& x, std::size_t axis, T factor, const char* op) {
    const AxisSplit s = split_axis(x.shape(), axis, op);
    Shape out_shape;
    for (std::size_t i = 0; i < x.shape().size(); ++i)
        if (i != axis) out_shape.push_back(x.shape()[i]);
    if (out_shape.empty()) out_shape.push_back(1);
    NdArray<T> out(out_shape, T{0});
    const T* xv = x.value().data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.extent + e) * s.inner + i];
    if (factor != T{1})
        for (auto& v : out.values()) v *= factor;
    return make_result<T>(std::move(out), op, {x}, [s, factor](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t e = 0; e < s.extent; ++e)
                for (std::size_t i = 0; i < s.inner; ++i)
                    (*gin[0])[(o * s.extent + e) * s.inner + i] += g[o * s.inner + i] * factor;
    });
}

} // namespace

template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
    return reduce_axis(x, axis, T{1}, "sum_axis");
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis, "mean_axis");
    return reduce_axis(x, axis, T{1} / static_cast<T>(s.extent), "mean_axis");
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis, "softmax");
    NdArray<T> out(x.shape());
    const T* xv = x.value().data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T mx = xv[base];
            for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
            T z = 0;
            for (std::size_t e = 0; e < s.extent; ++e) {
                const T v = std::exp(xv[base + e * s.inner] - mx);
                out[base + e * s.inner] = v;
                z += v;
            }
            for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= z;
        }
    auto result = make_result<T>(std::move(out), "softmax", {x}, nullptr);
    if (!result.requires_grad()) return result;
    std::weak_ptr<Node<T>> self = result.node_ptr();
    result.node_ptr()->backward = [self, s](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        const NdArray<T>& y = self.lock()->value;
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                T dot = 0;
                for (std::size_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * y[base + e * s.inner];
                for (std::size_t e = 0; e < s.extent; ++e) {
                    const std::size_t k = base + e * s.inner;
                    (*gin[0])[k] += y[k] * (g[k] - dot);
                }
            }
    };
    return result;
}

template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
    std::vector<std::size_t> extents;
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& sh = p.shape();
        bool ok = sh.size() == ref.size();
        for (std::size_t i = 0; ok && i < sh.size(); ++i) ok = i == axis || sh[i] == ref[i];
        if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(sh));
        extents.push_back(sh[axis]);
        out_shape[axis] += sh[axis];
    }
    const AxisSplit s = split_axis(out_shape, axis, "concat");
    NdArray<T> out(out_shape);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const T* src = parts[p].value().data();
        const std::size_t chunk = extents[p] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy(src + o * chunk, src + (o + 1) * chunk, out.data() + (o * s.extent + offset) * s.inner);
        offset += extents[p];
    }
    std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
    return make_result<T>(std::move(out), "concat", std::move(inputs),
                          [s, extents](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                              std::size_t off = 0;
                              for (std::size_t p = 0; p < extents.size(); ++p) {
                                  const std::size_t chunk = extents[p] * s.inner;
                                  if (gin[p])
                                      for (std::size_t o = 0; o < s.outer; ++o) {
                                          const T* src = g.data() + (o * s.extent + off) * s.inner;
                                          T* dst = gin[p]->data() + o * chunk;
                                          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                                      }
                                  off += extents[p];
                              }
                          });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    NdArray<T> out = x.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), "reshape", {x}, [](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
    });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    const std::size_t rows = x.dim(0);
    if (begin >= end || end > rows)
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + shape_str(x.shape()));
    const std::size_t row_size = x.size() / rows;
    Shape out_shape = x.shape();
    out_shape[0] = end - begin;
    NdArray<T> out(out_shape);
    std::copy(x.value().data() + begin * row_size, x.value().data() + end * row_size, out.data());
    return make_result<T>(std::move(out), "slice_rows", {x},
                          [begin, row_size](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                              T* dst = gin[0]->data() + begin * row_size;
                              for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                          });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    NdArray<T> out(Shape{m, n});
    kernels::gemm_nn(m, n, k, a.value().data(), b.value().data(), out.data(), false);
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_result<T>(std::move(out), "matmul", {a, b},
                          [an, bn, m, k, n](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                              if (gin[0]) kernels::gemm_nt(m, k, n, g.data(), bn->value.data(), gin[0]->data(), true);
                              if (gin[1]) kernels::gemm_tn(k, n, m, an->value.data(), g.data(), gin[1]->data(), true);
                          });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
    std::size_t n, c, h, w;      // input
    std::size_t o, kh, kw;       // kernel
    std::size_t stride;
    std::size_t oh, ow;          // output
    std::size_t pad_top, pad_left;

    std::size_t col_rows() const { return c * kh * kw; }
    std::size_t col_cols() const { return n * oh * ow; }
};

std::size_t same_pad(std::size_t in, std::size_t out, std::size_t k, std::size_t stride) {
    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>((out - 1) * stride + k) - static_cast<std::ptrdiff_t>(in);
    return total > 0 ? static_cast<std::size_t>(total) / 2 : 0;
}

// Geometry of a forward convolution from an input of shape (n,c,h,w) with an
// o x c x kh x kw kernel.
ConvGeometry conv_geometry(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t o, std::size_t kh,
                           std::size_t kw, std::size_t stride, Padding padding, const char* op, const Shape& in_shape,
                           const Shape& k_shape) {
    if (stride < 1) throw ConfigError(std::string(op) + ": stride must be >= 1");
    ConvGeometry g{n, c, h, w, o, kh, kw, stride, 0, 0, 0, 0};
    if (padding == Padding::same) {
        g.oh = (h + stride - 1) / stride;
        g.ow = (w + stride - 1) / stride;
        g.pad_top = same_pad(h, g.oh, kh, stride);
        g.pad_left = same_pad(w, g.ow, kw, stride);
        const std::size_t ph = std::max<std::size_t>((g.oh - 1) * stride + kh, h);
        const std::size_t pw = std::max<std::size_t>((g.ow - 1) * stride + kw, w);
        if (kh > ph || kw > pw)
            throw ShapeError(std::string(op) + ": kernel " + shape_str(k_shape) + " larger than padded input " +
                             shape_str(in_shape));
    } else {
        if (kh > h || kw > w)
            throw ShapeError(std::string(op) + ": kernel " + shape_str(k_shape) + " larger than input " +
                             shape_str(in_shape));
        g.oh = (h - kh) / stride + 1;
        g.ow = (w - kw) / stride + 1;
    }
    return g;
}

template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
    const std::size_t cols = g.col_cols();
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
                for (std::size_t n = 0; n < g.n; ++n) {
                    const T* plane = x + (n * g.c + c) * g.h * g.w;
                    for (std::size_t y = 0; y < g.oh; ++y) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + i) -
                                                  static_cast<std::ptrdiff_t>(g.pad_top);
                        T* dst = row + (n * g.oh + y) * g.ow;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                            std::fill(dst, dst + g.ow, T{0});
                            continue;
                        }
                        for (std::size_t xo = 0; xo < g.ow; ++xo) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * g.stride + j) -
                                                      static_cast<std::ptrdiff_t>(g.pad_left);
                            dst[xo] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{0}
                                                                                         : plane[iy * g.w + ix];
                        }
                    }
                }
            }
}

template <class T>
void col2im(const ConvGeometry& g, const T* col, T* x) {
    const std::size_t cols = g.col_cols();
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
                for (std::size_t n = 0; n < g.n; ++n) {
                    T* plane = x + (n * g.c + c) * g.h * g.w;
                    for (std::size_t y = 0; y < g.oh; ++y) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + i) -
                                                  static_cast<std::ptrdiff_t>(g.pad_top);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                        const T* src = row + (n * g.oh + y) * g.ow;
                        for (std::size_t xo = 0; xo < g.ow; ++xo) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * g.stride + j) -
                                                      static_cast<std::ptrdiff_t>(g.pad_left);
                            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) plane[iy * g.w + ix] += src[xo];
                        }
                    }
                }
            }
}

// (n, ch, hw) <-> (ch, n*hw) layout shuffles
template <class T>
void nchw_to_cm(const T* src, T* dst, std::size_t n, std::size_t ch, std::size_t hw) {
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < ch; ++c) std::copy(src + (b * ch + c) * hw, src + (b * ch + c + 1) * hw, dst + (c * n + b) * hw);
}

template <class T>
void cm_to_nchw(const T* src, T* dst, std::size_t n, std::size_t ch, std::size_t hw, bool accumulate) {
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < ch; ++c) {
            const T* s = src + (c * n + b) * hw;
            T* d = dst + (b * ch + c) * hw;
            if (accumulate)
                for (std::size_t i = 0; i < hw; ++i) d[i] += s[i];
            else
                std::copy(s, s + hw, d);
        }
}

void require_rank4(const Shape& s, const char* op, const char* what) {
    if (s.size() != 4) throw ShapeError(std::string(op) + ": " + what + " must be rank 4, got " + shape_str(s));
}

} // namespace

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, Padding padding) {
    const Shape& xs = input.shape();
    const Shape& ks = kernel.shape();
    require_rank4(xs, "conv2d", "input");
    require_rank4(ks, "conv2d", "kernel");
    if (xs[1] != ks[1])
        throw ShapeError("conv2d: channel mismatch between input " + shape_str(xs) + " and kernel " + shape_str(ks));
    const ConvGeometry g =
        conv_geometry(xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, padding, "conv2d", xs, ks);

    auto col = std::make_shared<std::vector<T>>(g.col_rows() * g.col_cols());
    im2col(g, input.value().data(), col->data());
    std::vector<T> out_cm(g.o * g.col_cols());
    kernels::gemm_nn(g.o, g.col_cols(), g.col_rows(), kernel.value().data(), col->data(), out_cm.data(), false);
    NdArray<T> out(Shape{g.n, g.o, g.oh, g.ow});
    cm_to_nchw(out_cm.data(), out.data(), g.n, g.o, g.oh * g.ow, false);

    auto kn = kernel.node_ptr();
    return make_result<T>(std::move(out), "conv2d", {input, kernel},
                          [g, col, kn](const NdArray<T>& grad, std::span<NdArray<T>* const> gin) {
                              const std::size_t hw = g.oh * g.ow;
                              std::vector<T> g_cm(g.o * g.col_cols());
                              nchw_to_cm(grad.data(), g_cm.data(), g.n, g.o, hw);
                              if (gin[1])
                                  kernels::gemm_nt(g.o, g.col_rows(), g.col_cols(), g_cm.data(), col->data(),
                                                   gin[1]->data(), true);
                              if (gin[0]) {
                                  std::vector<T> gcol(g.col_rows() * g.col_cols());
                                  kernels::gemm_tn(g.col_rows(), g.col_cols(), g.o, kn->value.data(), g_cm.data(),
                                                   gcol.data(), false);
                                  col2im(g, gcol.data(), gin[0]->data());
                              }
                          });
}

template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, Padding padding) {
    const Shape& xs = input.shape();
    const Shape& ks = kernel.shape();
    require_rank4(xs, "conv_transpose2d", "input");
    require_rank4(ks, "conv_transpose2d", "kernel");
    if (xs[1] != ks[0])
        throw ShapeError("conv_transpose2d: channel mismatch between input " + shape_str(xs) + " and kernel " +
                         shape_str(ks));
    if (stride < 1) throw ConfigError("conv_transpose2d: stride must be >= 1");
    const std::size_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3];
    const std::size_t co = ks[1], kh = ks[2], kw = ks[3];
    const std::size_t big_h = padding == Padding::same ? h * stride : (h - 1) * stride + kh;
    const std::size_t big_w = padding == Padding::same ? w * stride : (w - 1) * stride + kw;
    // The adjoint convolution maps (n, co, big_h, big_w) -> (n, ci, h, w).
    const ConvGeometry g =
        conv_geometry(n, co, big_h, big_w, ci, kh, kw, stride, padding, "conv_transpose2d", xs, ks);
    if (g.oh != h || g.ow != w) throw ShapeError("conv_transpose2d: inconsistent geometry for " + shape_str(xs));

    const std::size_t hw = h * w;
    auto x_cm = std::make_shared<std::vector<T>>(ci * n * hw);
    nchw_to_cm(input.value().data(), x_cm->data(), n, ci, hw);
    std::vector<T> col(g.col_rows() * g.col_cols());
    kernels::gemm_tn(g.col_rows(), g.col_cols(), ci, kernel.value().data(), x_cm->data(), col.data(), false);
    NdArray<T> out(Shape{n, co, big_h, big_w}, T{0});
    col2im(g, col.data(), out.data());

    auto kn = kernel.node_ptr();
    return make_result<T>(std::move(out), "conv_transpose2d", {input, kernel},
                          [g, x_cm, kn, n, ci, hw](const NdArray<T>& grad, std::span<NdArray<T>* const> gin) {
                              std::vector<T> gcol(g.col_rows() * g.col_cols());
                              im2col(g, grad.data(), gcol.data());
                              if (gin[0]) {
                                  std::vector<T> gx_cm(ci * n * hw);
                                  kernels::gemm_nn(ci, g.col_cols(), g.col_rows(), kn->value.data(), gcol.data(),
                                                   gx_cm.data(), false);
                                  cm_to_nchw(gx_cm.data(), gin[0]->data(), n, ci, hw, true);
                              }
                              if (gin[1])
                                  kernels::gemm_nt(ci, g.col_rows(), g.col_cols(), x_cm->data(), gcol.data(),
                                                   gin[1]->data(), true);
                          });
}

// ---------------------------------------------------------------------------
// Batch normalization

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps, BatchStats<T>* stats_out) {
    if (x.shape().size() < 2) throw ShapeError("batch_norm: input must have rank >= 2, got " + shape_str(x.shape()));
    const AxisSplit s = split_axis(x.shape(), 1, "batch_norm");
    if (gamma.size() != s.extent || beta.size() != s.extent)
        throw ShapeError("batch_norm: scale/shift length does not match channels of " + shape_str(x.shape()));
    const std::size_t count = s.outer * s.inner;
    const T* xv = x.value().data();
    std::vector<T> mu(s.extent, T{0}), var(s.extent, T{0});
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c) {
            const T* p = xv + (o * s.extent + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) mu[c] += p[i];
        }
    for (auto& m : mu) m /= static_cast<T>(count);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c) {
            const T* p = xv + (o * s.extent + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
                const T d = p[i] - mu[c];
                var[c] += d * d;
            }
        }
    for (auto& v : var) v /= static_cast<T>(count);

    auto inv_std = std::make_shared<std::vector<T>>(s.extent);
    for (std::size_t c = 0; c < s.extent; ++c) (*inv_std)[c] = T{1} / std::sqrt(var[c] + eps);
    auto xhat = std::make_shared<NdArray<T>>(x.shape());
    NdArray<T> out(x.shape());
    const T* gv = gamma.value().data();
    const T* bv = beta.value().data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c) {
            const std::size_t base = (o * s.extent + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
                const T h = (xv[base + i] - mu[c]) * (*inv_std)[c];
                (*xhat)[base + i] = h;
                out[base + i] = gv[c] * h + bv[c];
            }
        }
    if (stats_out) {
        stats_out->mean = mu;
        stats_out->var = var;
    }
    auto gn = gamma.node_ptr();
    return make_result<T>(std::move(out), "batch_norm", {x, gamma, beta},
                          [s, count, xhat, inv_std, gn](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                              std::vector<T> sum_g(s.extent, T{0}), sum_gx(s.extent, T{0});
                              for (std::size_t o = 0; o < s.outer; ++o)
                                  for (std::size_t c = 0; c < s.extent; ++c) {
                                      const std::size_t base = (o * s.extent + c) * s.inner;
                                      for (std::size_t i = 0; i < s.inner; ++i) {
                                          sum_g[c] += g[base + i];
                                          sum_gx[c] += g[base + i] * (*xhat)[base + i];
                                      }
                                  }
                              if (gin[1])
                                  for (std::size_t c = 0; c < s.extent; ++c) (*gin[1])[c] += sum_gx[c];
                              if (gin[2])
                                  for (std::size_t c = 0; c < s.extent; ++c) (*gin[2])[c] += sum_g[c];
                              if (gin[0]) {
                                  const T inv_n = T{1} / static_cast<T>(count);
                                  for (std::size_t o = 0; o < s.outer; ++o)
                                      for (std::size_t c = 0; c < s.extent; ++c) {
                                          const std::size_t base = (o * s.extent + c) * s.inner;
                                          const T k = gn->value[c] * (*inv_std)[c];
                                          const T mg = sum_g[c] * inv_n, mgx = sum_gx[c] * inv_n;
                                          for (std::size_t i = 0; i < s.inner; ++i)
                                              (*gin[0])[base + i] += k * (g[base + i] - mg - (*xhat)[base + i] * mgx);
                                      }
                              }
                          });
}

template <class T>
Tensor<T> batch_norm_inference(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::span<const T> mean,
                               std::span<const T> var, T eps) {
    if (x.shape().size() < 2) throw ShapeError("batch_norm_inference: input must have rank >= 2");
    const AxisSplit s = split_axis(x.shape(), 1, "batch_norm_inference");
    if (gamma.size() != s.extent || beta.size() != s.extent || mean.size() != s.extent || var.size() != s.extent)
        throw ShapeError("batch_norm_inference: statistics do not match channels of " + shape_str(x.shape()));
    auto inv_std = std::make_shared<std::vector<T>>(s.extent);
    for (std::size_t c = 0; c < s.extent; ++c) (*inv_std)[c] = T{1} / std::sqrt(var[c] + eps);
    auto xhat = std::make_shared<NdArray<T>>(x.shape());
    NdArray<T> out(x.shape());
    const T* xv = x.value().data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.extent; ++c) {
            const std::size_t base = (o * s.extent + c) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) {
                const T h = (xv[base + i] - mean[c]) * (*inv_std)[c];
                (*xhat)[base + i] = h;
                out[base + i] = gamma.value()[c] * h + beta.value()[c];
            }
        }
    auto gn = gamma.node_ptr();
    return make_result<T>(std::move(out), "batch_norm_inference", {x, gamma, beta},
                          [s, xhat, inv_std, gn](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
                              for (std::size_t o = 0; o < s.outer; ++o)
                                  for (std::size_t c = 0; c < s.extent; ++c) {
                                      const std::size_t base = (o * s.extent + c) * s.inner;
                                      for (std::size_t i = 0; i < s.inner; ++i) {
                                          const T gi = g[base + i];
                                          if (gin[0]) (*gin[0])[base + i] += gi * gn->value[c] * (*inv_std)[c];
                                          if (gin[1]) (*gin[1])[c] += gi * (*xhat)[base + i];
                                          if (gin[2]) (*gin[2])[c] += gi;
                                      }
                                  }
                          });
}

// ---------------------------------------------------------------------------
// Dropout

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::uint64_t seed, std::size_t row_offset) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(rate));
    if (rate == 0.0) return x;
    const std::size_t rows = x.dim(0);
    const std::size_t row_size = x.size() / rows;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<T>>(x.size());
    NdArray<T> out(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < row_size; ++j) {
            const std::size_t i = r * row_size + j;
            const std::uint64_t key = static_cast<std::uint64_t>((row_offset + r) * row_size + j);
            const bool keep = unit_from_bits(derive_seed(seed, key)) >= rate;
            (*mask)[i] = keep ? keep_scale : T{0};
            out[i] = x.value()[i] * (*mask)[i];
        }
    return make_result<T>(std::move(out), "dropout", {x}, [mask](const NdArray<T>& g, std::span<NdArray<T>* const> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// Instantiation

#define DCL_INSTANTIATE(T)                                                                                        \
    template class Tensor<T>;                                                                                      \
    template class Tape<T>;                                                                                        \
    template class Gradients<T>;                                                                                   \
    template Gradients<T> backward<T>(const Tensor<T>&, Tape<T>&);                                                 \
    template Tensor<T> detach<T>(const Tensor<T>&);                                                                \
    template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                 \
    template Tensor<T> scale<T>(const Tensor<T>&, T);                                                              \
    template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                         \
    template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                                            \
    template Tensor<T> log<T>(const Tensor<T>&, T);                                                                \
    template Tensor<T> abs<T>(const Tensor<T>&);                                                                   \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                                  \
    template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                                         \
    template Tensor<T> tanh<T>(const Tensor<T>&);                                                                  \
    template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                               \
    template Tensor<T> sum<T>(const Tensor<T>&);                                                                   \
    template Tensor<T> mean<T>(const Tensor<T>&);                                                                  \
    template Tensor<T> sum_axis<T>(const Tensor<T>&, std::size_t);                                                 \
    template Tensor<T> mean_axis<T>(const Tensor<T>&, std::size_t);                                                \
    template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                                  \
    template Tensor<T> concat<T>(std::span<const Tensor<T>>, std::size_t);                                         \
    template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                        \
    template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);                                  \
    template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                              \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, Padding);                        \
    template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, Padding);              \
    template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, BatchStats<T>*);     \
    template Tensor<T> batch_norm_inference<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                               std::span<const T>, std::span<const T>, T);                         \
    template Tensor<T> dropout<T>(const Tensor<T>&, double, std::uint64_t, std::size_t);

DCL_INSTANTIATE(float)
DCL_INSTANTIATE(double)

#undef DCL_INSTANTIATE

} // namespace dcl::ad
