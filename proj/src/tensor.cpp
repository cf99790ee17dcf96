#include "stats/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "stats/errors.hpp"

namespace stats {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::scalar(double v) {
    Tensor t;
    t.data_[0] = v;
    return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

Tensor Tensor::vector(std::vector<double> values) {
    std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape_));
    }
    return shape_[axis];
}

void Tensor::fill(double v) {
    for (double& x : data_) x = v;
}

bool Tensor::all_finite() const {
    for (double x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ContractError("item() requires a scalar-shaped tensor, got shape " +
                            shape_to_string(shape_));
    }
    return data_[0];
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) {
        throw NumericError(std::string("non-finite values in ") + what);
    }
}

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    b[0] = static_cast<unsigned char>(v & 0xff);
    b[1] = static_cast<unsigned char>((v >> 8) & 0xff);
    b[2] = static_cast<unsigned char>((v >> 16) & 0xff);
    b[3] = static_cast<unsigned char>((v >> 24) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("truncated stream while reading u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& out, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw FormatError("truncated stream while reading f64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(v);
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.size(); ++i) write_f64(out, t[i]);
}

Tensor read_tensor(std::istream& in) {
    std::uint32_t rank = read_u32(in);
    if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = read_u32(in);
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = read_f64(in);
    return t;
}

}  // namespace stats
