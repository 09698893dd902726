#ifndef IDPATCH_TENSOR_HPP
#define IDPATCH_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "idpatch/errors.hpp"

namespace idpatch {

// 64-byte aligned storage keeps every coefficient-wise SIMD kernel on one
// code path, so repeated evaluations are bitwise identical.
template <typename T>
struct AlignedAllocT {
    using value_type = T;
    static constexpr size_t kAlign = 64;

    AlignedAllocT() = default;
    template <typename U>
    AlignedAllocT(const AlignedAllocT<U>&) {}

    T* allocate(size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
    }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, std::align_val_t(kAlign)); }
    bool operator==(const AlignedAllocT&) const { return true; }
    bool operator!=(const AlignedAllocT&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocT<T>>;

// Dense row-major tensor of rank <= 4. Shapes in use:
//   [n]        vectors / biases
//   [n, d]     token sequences, weight matrices
//   [C, H, W]  feature maps and images
//   [Cout, Cin, kh, kw]  conv kernels
template <typename T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), T(0));
    }
    TensorT(std::vector<int> shape, AlignedVec<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel_of(shape_)) throw ShapeError("tensor data/shape mismatch");
    }

    static size_t numel_of(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= static_cast<size_t>(d);
        }
        return shape.empty() ? 0 : n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    T& at3(int c, int y, int x) {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    const T& at3(int c, int y, int x) const {
        return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    T& at2(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    const T& at2(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    TensorT reshaped(std::vector<int> new_shape) const {
        if (numel_of(new_shape) != numel()) throw ShapeError("reshape numel mismatch");
        return TensorT(std::move(new_shape), data_);
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); i++) os << (i ? "," : "") << shape_[i];
        os << "]";
        return os.str();
    }

    template <typename U>
    TensorT<U> cast() const {
        TensorT<U> out(shape_);
        for (size_t i = 0; i < data_.size(); i++) out[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::vector<int> shape_;
    AlignedVec<T> data_;
};

using Tensor  = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
inline void check_shape(const TensorT<T>& t, const std::vector<int>& expect, const char* what) {
    if (t.shape() != expect) {
        TensorT<T> e(expect);
        throw ShapeError(std::string(what) + ": expected " + e.shape_str() + ", got " +
                         t.shape_str());
    }
}

}  // namespace idpatch

#endif  // IDPATCH_TENSOR_HPP
