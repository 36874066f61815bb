#include "cfseq/diffcore/tensor.hpp"

#include <cmath>
#include <sstream>

namespace cfseq {

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape.size() > 3) throw ShapeError("rank above 3 is not supported: " + to_string(shape));
    if (element_count(shape) != data.size()) {
        throw ShapeError("shape " + to_string(shape) + " does not hold " + std::to_string(data.size()) +
                         " values");
    }
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
    if (shape.size() > 3) throw ShapeError("rank above 3 is not supported: " + to_string(shape));
    data.assign(element_count(shape), fill);
}

Tensor Tensor::vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
        if (r.size() != cols) throw ShapeError("ragged matrix literal");
        values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(values));
}

std::size_t Tensor::rows() const {
    if (shape.size() != 2) throw ShapeError("expected a matrix, got " + to_string(shape));
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (shape.size() != 2) throw ShapeError("expected a matrix, got " + to_string(shape));
    return shape[1];
}

double Tensor::item() const {
    if (data.size() != 1) throw ShapeError("item() on non-scalar " + to_string(shape));
    return data[0];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace cfseq
