#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emnet/errors.hpp"

namespace emnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Allocator that skips value-initialization on resize. Freshly produced op
// outputs are fully overwritten, so zero-filling them first only burns
// memory bandwidth.
template <class T>
struct UninitAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = UninitAllocator<U>;
    };
    template <class U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

template <class T>
using TensorStorage = std::vector<T, UninitAllocator<T>>;

template <class T>
struct TensorImpl {
    Shape shape;
    TensorStorage<T> data;
    TensorStorage<T> grad;  // empty until a backward pass needs it
    bool requires_grad = false;
};

// Shared-ownership handle over a dense row-major array. Copies alias the
// same storage, which is what the tape's backward closures rely on.
template <class T>
class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : impl_(std::make_shared<TensorImpl<T>>()) {
        impl_->shape = std::move(shape);
        impl_->data.assign(shape_numel(impl_->shape), fill);
        impl_->requires_grad = requires_grad;
    }

    static Tensor from_data(Shape shape, const std::vector<T>& values,
                            bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t = uninit(std::move(shape));
        std::copy(values.begin(), values.end(), t.impl_->data.begin());
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    // Allocates without filling; callers must write every element.
    static Tensor uninit(Shape shape) {
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->data.resize(shape_numel(t.impl_->shape));
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    T* raw() { return impl_->data.data(); }
    const T* raw() const { return impl_->data.data(); }

    T item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) {
        impl_->requires_grad = on;
        if (!on) impl_->grad.clear();
    }

    bool has_grad() const { return !impl_->grad.empty(); }

    // Allocates (zeroed) the gradient accumulator on first use.
    std::span<T> grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }
    std::span<const T> grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }

    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    bool all_finite() const {
        for (const T v : impl_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

// Ordered record of executed operations. Ops append one backward closure
// each, in execution order; backward() replays them exactly once in
// reverse, so gradients accumulate in reverse-topological order.
template <class T>
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

    void backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;
};

// Seeds d(loss)/d(loss) = 1 and propagates through every recorded op.
// Gradients accumulate across calls until tensors are explicitly zeroed.
template <class T>
void backward(Tensor<T> loss, Tape<T>& tape) {
    if (loss.size() != 1)
        throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    loss.grad()[0] += T(1);
    tape.backward();
}

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace emnet
