#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "arrest/errors.hpp"

namespace arrest {

// Dense row-major tensor of doubles. Value type: copies are deep.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), values_(checked_size(shape_), 0.0) {}

    Tensor(std::vector<int> shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        if (static_cast<std::int64_t>(values_.size()) != checked_size(shape_))
            throw shape_error("tensor: value count " + std::to_string(values_.size()) +
                              " does not match shape " + shape_string(shape_));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.values_) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(std::size_t i) const { return shape_.at(i); }
    int rank() const { return static_cast<int>(shape_.size()); }

    std::int64_t size() const { return static_cast<std::int64_t>(values_.size()); }

    const std::vector<double>& values() const { return values_; }
    std::vector<double>& values() { return values_; }

    double operator[](std::int64_t i) const { return values_[static_cast<std::size_t>(i)]; }
    double& operator[](std::int64_t i) { return values_[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static std::string shape_string(const std::vector<int>& s) {
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << ',';
            os << s[i];
        }
        os << ')';
        return os.str();
    }

    std::string shape_string() const { return shape_string(shape_); }

private:
    static std::int64_t checked_size(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw shape_error("tensor: nonpositive dimension in " + shape_string(shape));
            n *= d;
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> values_;
};

}  // namespace arrest
