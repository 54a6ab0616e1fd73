#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "vct/errors.hpp"

namespace vct {

using Shape = std::vector<std::int64_t>;

// 64-byte aligned storage, so vectorized kernels see the same alignment on
// every call and results stay bitwise reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of doubles. Every latent, noise sample, embedding and
// attention map in the library is one of these.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    Tensor reshaped(Shape shape) const;
    bool all_finite() const noexcept;
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s);
    // this += s * other
    Tensor& axpy(double s, const Tensor& other);

    bool operator==(const Tensor& other) const noexcept {
        return shape_ == other.shape_ && data_ == other.data_;
    }

private:
    Shape shape_;
    Storage data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(double s, Tensor a);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

double dot(const Tensor& a, const Tensor& b);
double squared_norm(const Tensor& t);
double l2_norm(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
// ||a - b|| / max(||b||, tiny)
double relative_error(const Tensor& a, const Tensor& b);

// Rounds every entry to the nearest float. Persisted arrays are 32-bit, so
// anything that must survive a save/load bit-exactly is kept on this grid.
void round_to_float(Tensor& t);

}  // namespace vct
