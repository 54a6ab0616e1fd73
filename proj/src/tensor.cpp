#include "vct/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <sstream>

namespace vct {

void rethrow_with_stage(const std::string& stage) {
    try {
        throw;
    } catch (const ValidationError& e) {
        throw ValidationError("[" + stage + "] " + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError("[" + stage + "] " + e.what());
    } catch (const std::exception& e) {
        throw std::runtime_error("[" + stage + "] " + e.what());
    }
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw ValidationError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
        throw ValidationError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                              shape_str(shape_));
    }
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != static_cast<std::int64_t>(data_.size())) {
        throw ValidationError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(*this, other, "tensor +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    require_same_shape(*this, other, "tensor -=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
}

Tensor& Tensor::axpy(double s, const Tensor& other) {
    require_same_shape(*this, other, "tensor axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
    return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(double s, Tensor a) { return a *= s; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ValidationError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    }
}

double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double squared_norm(const Tensor& t) { return dot(t, t); }
double l2_norm(const Tensor& t) { return std::sqrt(squared_norm(t)); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double relative_error(const Tensor& a, const Tensor& b) {
    const double denom = std::max(l2_norm(b), std::numeric_limits<double>::min());
    return l2_norm(a - b) / denom;
}

void round_to_float(Tensor& t) {
    for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace vct
