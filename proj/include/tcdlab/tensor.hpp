#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tcdlab {

// Configuration problems (bad keys, impossible splits, invalid sweep values).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor extents that do not line up.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf detected in a loss term or gradient.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kNormEpsilon = 1e-12;

// Dense row-major rank-4 tensor. Used for frame stacks [T x C x H x W],
// feature maps and conv weights [Cout x Cin x kH x kW].
class Tensor4 {
public:
    Tensor4() = default;
    Tensor4(std::size_t d0, std::size_t d1, std::size_t d2, std::size_t d3, double fill = 0.0)
        : dims_{d0, d1, d2, d3}, data_(d0 * d1 * d2 * d3, fill) {}

    std::size_t dim(std::size_t i) const { return dims_[i]; }
    const std::array<std::size_t, 4>& dims() const { return dims_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return data_[((a * dims_[1] + b) * dims_[2] + c) * dims_[3] + d];
    }
    double operator()(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return data_[((a * dims_[1] + b) * dims_[2] + c) * dims_[3] + d];
    }

    // Contiguous H*W plane for (a, b).
    std::span<double> plane(std::size_t a, std::size_t b) {
        const std::size_t n = dims_[2] * dims_[3];
        return {data_.data() + (a * dims_[1] + b) * n, n};
    }
    std::span<const double> plane(std::size_t a, std::size_t b) const {
        const std::size_t n = dims_[2] * dims_[3];
        return {data_.data() + (a * dims_[1] + b) * n, n};
    }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor4& o) const { return dims_ == o.dims_; }
    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor4& operator+=(const Tensor4& o) {
        if (!same_shape(o)) throw ShapeError("Tensor4 += with mismatched shapes");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor4& operator*=(double s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    bool operator==(const Tensor4&) const = default;

    std::string shape_string() const {
        return "[" + std::to_string(dims_[0]) + "x" + std::to_string(dims_[1]) + "x" +
               std::to_string(dims_[2]) + "x" + std::to_string(dims_[3]) + "]";
    }

private:
    std::array<std::size_t, 4> dims_{0, 0, 0, 0};
    std::vector<double> data_;
};

// Neumaier compensated accumulator; makes sums insensitive to term order
// up to the last few ulps.
class CompensatedSum {
public:
    void add(double x) {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline std::vector<double> normalized(std::span<const double> a) {
    const double n = l2_norm(a) + kNormEpsilon;
    std::vector<double> out(a.begin(), a.end());
    for (auto& v : out) v /= n;
    return out;
}

inline bool all_finite(std::span<const double> a) {
    for (double v : a)
        if (!std::isfinite(v)) return false;
    return true;
}

// FNV-1a over the raw bytes; used for parameter checksums in freeze/wiring checks.
inline std::uint64_t checksum(std::span<const double> a, std::uint64_t h = 1469598103934665603ULL) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(a.data());
    for (std::size_t i = 0; i < a.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace tcdlab
