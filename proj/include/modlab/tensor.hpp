#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "modlab/error.hpp"

namespace modlab {

/// Storage starts on a 64-byte boundary, so vectorized kernels split every
/// buffer the same way and results do not depend on heap layout.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array.  The last axis is the "column" axis; all leading
/// axes collapse into rows for the 2-D kernels.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
    Tensor(std::vector<std::size_t> shape, std::vector<T> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
        if (data_.size() != element_count(shape_))
            throw ShapeError("Tensor: " + std::to_string(data_.size()) + " values for shape " + shape_string());
    }

    [[nodiscard]] static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    [[nodiscard]] const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }
    [[nodiscard]] std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
    [[nodiscard]] std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

    [[nodiscard]] T* data() noexcept { return data_.data(); }
    [[nodiscard]] const T* data() const noexcept { return data_.data(); }
    [[nodiscard]] std::span<T> values() noexcept { return data_; }
    [[nodiscard]] std::span<const T> values() const noexcept { return data_; }
    [[nodiscard]] AlignedVector<T>& storage() noexcept { return data_; }
    [[nodiscard]] const AlignedVector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }
    T& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

    [[nodiscard]] std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    [[nodiscard]] std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

    void fill(T v) noexcept { std::fill(data_.begin(), data_.end(), v); }

    /// Same storage, new shape with the same element count.
    void reshape(std::vector<std::size_t> shape) {
        if (element_count(shape) != data_.size()) throw ShapeError("Tensor::reshape: element count changes");
        shape_ = std::move(shape);
    }

    [[nodiscard]] bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    [[nodiscard]] std::string shape_string() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

    template <class U>
    [[nodiscard]] Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) noexcept {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
    }

private:
    std::vector<std::size_t> shape_;
    AlignedVector<T> data_;
};

/// Identity of shapes, used by every shape check.
template <class T, class U>
bool same_shape(const Tensor<T>& a, const Tensor<U>& b) noexcept {
    return a.shape() == b.shape();
}

}  // namespace modlab
