#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedgen {

/// Dense row-major n-dimensional array of doubles. The single value carrier
/// for activations, gradients and parameters.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape)
        : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

    Tensor(std::vector<std::int64_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), data_(std::move(values)) {
        if (static_cast<std::int64_t>(data_.size()) != checked_size(shape_)) {
            throw std::invalid_argument("Tensor: data size " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str());
        }
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, double value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t ndim() const { return shape_.size(); }

    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    double& operator()(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    double operator()(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }

    double& operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    double operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    Tensor reshaped(std::vector<std::int64_t> new_shape) const {
        if (checked_size(new_shape) != size()) {
            throw std::invalid_argument("Tensor: cannot reshape " + shape_str() + " to " +
                                        shape_str(new_shape));
        }
        return Tensor(std::move(new_shape), data_);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    std::string shape_str() const { return shape_str(shape_); }

    static std::string shape_str(const std::vector<std::int64_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << ", ";
            os << s[i];
        }
        os << "]";
        return os.str();
    }

private:
    static std::int64_t checked_size(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (std::int64_t d : shape) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension in shape " + shape_str(shape));
            n *= d;
        }
        return n;
    }

    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

}  // namespace fedgen
