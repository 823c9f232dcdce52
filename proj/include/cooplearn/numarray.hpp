#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace coop {

// Dense row-major array of 64-bit floats. Scalars have an empty shape and
// exactly one element.
class NumArray {
public:
    NumArray() : shape_{}, data_(1, 0.0) {}

    NumArray(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (element_count(shape_) != data_.size()) {
            throw std::invalid_argument("NumArray: shape " + shape_to_string(shape_) +
                                        " expects " + std::to_string(element_count(shape_)) +
                                        " elements, got " + std::to_string(data_.size()));
        }
    }

    static NumArray zeros(std::vector<std::size_t> shape) {
        std::vector<double> d(element_count(shape), 0.0);
        return NumArray(std::move(shape), std::move(d));
    }

    static NumArray full(std::vector<std::size_t> shape, double v) {
        std::vector<double> d(element_count(shape), v);
        return NumArray(std::move(shape), std::move(d));
    }

    static NumArray scalar(double v) { return NumArray({}, {v}); }

    static NumArray vec(std::vector<double> v) {
        std::size_t n = v.size();
        return NumArray({n}, std::move(v));
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        return n;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t rank() const { return shape_.size(); }

    std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    double item() const {
        if (data_.size() != 1)
            throw std::invalid_argument("NumArray::item: array of shape " +
                                        shape_to_string(shape_) + " is not a scalar");
        return data_[0];
    }

    bool same_shape(const NumArray& o) const { return shape_ == o.shape_; }

    static std::string shape_to_string(const std::vector<std::size_t>& shape) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << ",";
            os << shape[i];
        }
        os << "]";
        return os.str();
    }

    std::string shape_str() const { return shape_to_string(shape_); }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline bool bitwise_equal(const NumArray& a, const NumArray& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace coop
