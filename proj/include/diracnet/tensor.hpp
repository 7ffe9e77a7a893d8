#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <vector>

#include "diracnet/errors.hpp"

namespace diracnet {

using Shape = std::vector<std::size_t>;

namespace detail {

/// Allocator that default-initializes (i.e. leaves uninitialized) trivially
/// constructible elements. Kernel outputs are fully overwritten, so zeroing
/// them first would be wasted bandwidth.
template <typename T>
struct UninitAllocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = UninitAllocator<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0) {
            ::new (static_cast<void*>(p)) U;
        } else {
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
        }
    }
};

}  // namespace detail

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Dense n-dimensional array, row-major (last index fastest).
///
/// T is float for training; double builds exist for gradient checking.
/// Values are plain: copying a tensor copies its data.
template <typename T>
class TensorT {
public:
    using value_type = T;
    using buffer_type = std::vector<T, detail::UninitAllocator<T>>;

    TensorT() = default;

    /// Zero-filled tensor of the given shape.
    explicit TensorT(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_numel(shape_), T(0));
    }

    TensorT(Shape shape, T fill) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_numel(shape_), fill);
    }

    TensorT(Shape shape, std::initializer_list<T> values)
        : TensorT(std::move(shape), std::vector<T>(values)) {}

    TensorT(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
        validate_shape();
        if (values.size() != shape_numel(shape_)) {
            throw ShapeError(msg("tensor data length ", values.size(), " does not match shape ",
                                 shape_str(shape_), " (", shape_numel(shape_), " elements)"));
        }
        data_.assign(values.begin(), values.end());
    }

    /// Allocates without zero-filling; caller must overwrite every element.
    static TensorT uninitialized(Shape shape) {
        TensorT t;
        t.shape_ = std::move(shape);
        t.validate_shape();
        t.data_.resize(shape_numel(t.shape_));
        return t;
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
    static TensorT full(Shape shape, T v) { return TensorT(std::move(shape), v); }
    static TensorT scalar(T v) { return TensorT(Shape{1}, v); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }
    const T& at4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Same data, new shape; element count must match.
    TensorT reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw ShapeError(msg("cannot reshape ", shape_str(shape_), " to ", shape_str(shape),
                                 ": element count differs"));
        }
        TensorT t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    /// Elementwise conversion to another scalar type.
    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> t = TensorT<U>::uninitialized(shape_);
        for (std::size_t i = 0; i < numel(); ++i) t[i] = static_cast<U>(data_[i]);
        return t;
    }

private:
    void validate_shape() const {
        for (std::size_t d : shape_) {
            if (d == 0) throw ShapeError(msg("zero dimension in shape ", shape_str(shape_)));
        }
    }

    Shape shape_;
    buffer_type data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

/// Throws NumericError if the tensor contains NaN or infinity.
/// `what` names the producing kernel for the diagnostic.
template <typename T>
void ensure_finite(const TensorT<T>& t, const char* what);

/// True when |a[i]-b[i]| <= atol + rtol*|b[i]| for every element.
template <typename T>
bool allclose(const TensorT<T>& a, const TensorT<T>& b, double rtol = 1e-5, double atol = 1e-8);

/// max |a-b| over all elements; shapes must match.
template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
void require_rank(const TensorT<T>& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(msg(what, ": expected rank ", rank, " tensor, got shape ",
                             shape_str(t.shape())));
    }
}

}  // namespace diracnet
