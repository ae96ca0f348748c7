#ifndef NCA_TENSOR_HPP
#define NCA_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nca {

struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct config_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense 4-D shape, NCHW order (w fastest).
struct Shape4 {
    int64_t n = 0, c = 0, h = 0, w = 0;

    int64_t numel() const { return n * c * h * w; }
    int64_t spatial() const { return h * w; }

    bool operator==(const Shape4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape4& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

/// Dense NCHW tensor. `node` is the handle into the active tape, -1 when the
/// tensor is a constant (no gradient flows into it).
template <typename S>
struct TensorT {
    Shape4 shape{0, 0, 0, 0};
    std::vector<S> data;
    int node = -1;
    uint32_t tape_id = 0;  // which tape `node` belongs to; guards stale handles

    TensorT() = default;
    explicit TensorT(Shape4 s) : shape(s), data(static_cast<size_t>(s.numel()), S(0)) {}
    TensorT(Shape4 s, std::vector<S> d) : shape(s), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != shape.numel())
            throw shape_error("tensor: data length " + std::to_string(data.size()) +
                              " != numel of shape " + shape.str());
    }

    static TensorT zeros(Shape4 s) { return TensorT(s); }
    static TensorT full(Shape4 s, S v) {
        TensorT t(s);
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static TensorT scalar(S v) { return full({1, 1, 1, 1}, v); }

    int64_t size() const { return shape.numel(); }
    bool empty() const { return data.empty(); }

    S& at(int64_t n_, int64_t c_, int64_t y_, int64_t x_) {
        return data[static_cast<size_t>(((n_ * shape.c + c_) * shape.h + y_) * shape.w + x_)];
    }
    S at(int64_t n_, int64_t c_, int64_t y_, int64_t x_) const {
        return data[static_cast<size_t>(((n_ * shape.c + c_) * shape.h + y_) * shape.w + x_)];
    }

    S item() const {
        if (size() != 1) throw shape_error("item(): tensor has " + std::to_string(size()) + " elements, expected 1");
        return data[0];
    }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor = TensorT<float>;

template <typename To, typename From>
TensorT<To> tensor_cast(const TensorT<From>& t) {
    TensorT<To> out(t.shape);
    for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
    return out;
}

inline void check_same_shape(const char* op, const Shape4& a, const Shape4& b) {
    if (a != b)
        throw shape_error(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

}  // namespace nca

#endif
