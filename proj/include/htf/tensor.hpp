#pragma once

#include <algorithm>
#include <cstring>
#include <initializer_list>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "htf/common.hpp"

namespace htf {

// Dense row-major tensor of 64-bit floats. Value type, no view semantics.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != data.size())
            throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("Tensor: negative dimension in " + shape_str(s));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) {
        const std::size_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<int> s, double v) {
        const std::size_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<double>(n, v));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor vec(std::vector<double> d) {
        const int n = static_cast<int>(d.size());
        return Tensor({n}, std::move(d));
    }

    // 2-D constructor from nested initializer list, test convenience.
    static Tensor mat(std::initializer_list<std::initializer_list<double>> rows_init) {
        std::vector<double> d;
        int r = 0;
        int c = -1;
        for (const auto& row : rows_init) {
            if (c < 0) c = static_cast<int>(row.size());
            if (static_cast<int>(row.size()) != c) throw ShapeError("Tensor::mat: ragged rows");
            d.insert(d.end(), row.begin(), row.end());
            ++r;
        }
        return Tensor({r, c < 0 ? 0 : c}, std::move(d));
    }

    static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(s));
        for (double& v : t.data) v = rng.normal(0.0, stddev);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return numel() == 1; }

    int rows() const {
        require_rank(2, "rows");
        return shape[0];
    }
    int cols() const {
        require_rank(2, "cols");
        return shape[1];
    }

    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double item() const {
        if (!is_scalar()) throw ContractError("Tensor::item: tensor of shape " + shape_str(shape) + " is not scalar");
        return data[0];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void require_rank(int r, const char* what) const {
        if (rank() != r)
            throw ShapeError(std::string("Tensor::") + what + ": expected rank " + std::to_string(r) +
                             ", got shape " + shape_str(shape));
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::abs(v));
        return m;
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += "x";
            out += std::to_string(s[i]);
        }
        return out + "]";
    }
};

// ----------------------------- matmul kernels -----------------------------
// Raw kernels shared by forward ops and backward rules. C is accumulated
// into when `acc` is set, otherwise overwritten.

// C[m x n] (+)= A[m x k] * B[k x n]
inline void matmul_into(const Tensor& a, const Tensor& b, Tensor& c, bool acc) {
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw ShapeError("matmul: inner dimensions differ, " + Tensor::shape_str(a.shape) + " vs " +
                         Tensor::shape_str(b.shape));
    if (!acc) std::fill(c.data.begin(), c.data.end(), 0.0);
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
    for (int i = 0; i < m; ++i) {
        const double* arow = pa + static_cast<std::size_t>(i) * k;
        double* crow = pc + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = pb + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
inline void matmul_nt_into(const Tensor& a, const Tensor& b, Tensor& c, bool acc) {
    const int m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k)
        throw ShapeError("matmul_nt: inner dimensions differ, " + Tensor::shape_str(a.shape) + " vs " +
                         Tensor::shape_str(b.shape));
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
    for (int i = 0; i < m; ++i) {
        const double* arow = pa + static_cast<std::size_t>(i) * k;
        double* crow = pc + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = pb + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
            crow[j] = acc ? crow[j] + s : s;
        }
    }
}

// C[n x k] (+)= A[m x n]^T * B[m x k]
inline void matmul_tn_into(const Tensor& a, const Tensor& b, Tensor& c, bool acc) {
    const int m = a.rows(), n = a.cols(), k = b.cols();
    if (b.rows() != m)
        throw ShapeError("matmul_tn: outer dimensions differ, " + Tensor::shape_str(a.shape) + " vs " +
                         Tensor::shape_str(b.shape));
    if (!acc) std::fill(c.data.begin(), c.data.end(), 0.0);
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
    for (int l = 0; l < m; ++l) {
        const double* arow = pa + static_cast<std::size_t>(l) * n;
        const double* brow = pb + static_cast<std::size_t>(l) * k;
        for (int i = 0; i < n; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = pc + static_cast<std::size_t>(i) * k;
            for (int j = 0; j < k; ++j) crow[j] += av * brow[j];
        }
    }
}

// ----------------------------- serialization -----------------------------
// One-line ASCII header "HTF1 <rank> <d0> <d1> ...\n" followed by the values
// as little-endian 64-bit floats in row-major order. Round-trips bit-exactly.

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os << "HTF1 " << t.rank();
    for (int d : t.shape) os << ' ' << d;
    os << '\n';
    for (double v : t.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
        os.write(reinterpret_cast<const char*>(buf), 8);
    }
    if (!os) throw IoError("write_tensor: stream write failed");
}

inline Tensor read_tensor(std::istream& is) {
    std::string magic;
    is >> magic;
    if (!is || magic != "HTF1") throw IoError("read_tensor: bad magic '" + magic + "'");
    int rank = 0;
    is >> rank;
    if (!is || rank < 0 || rank > 8) throw IoError("read_tensor: bad rank");
    std::vector<int> shape(static_cast<std::size_t>(rank));
    for (int& d : shape) {
        is >> d;
        if (!is || d < 0) throw IoError("read_tensor: bad dimension");
    }
    is.get();  // newline
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) {
        unsigned char buf[8];
        is.read(reinterpret_cast<char*>(buf), 8);
        if (!is) throw IoError("read_tensor: truncated payload");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        std::memcpy(&v, &bits, 8);
    }
    return t;
}

}  // namespace htf
