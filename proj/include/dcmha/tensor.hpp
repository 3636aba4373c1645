#pragma once

// Dense row-major n-d tensors with a deterministic counter-based RNG and the
// numeric primitives used throughout: softmax, gelu/tanh, rmsnorm, initializers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcmha {

using Shape = std::vector<int64_t>;

template <typename T>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() { return "float32"; }
template <>
constexpr const char* dtype_name<double>() { return "float64"; }

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d <= 0) throw std::invalid_argument("tensor shape has non-positive extent");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

inline Shape shape_strides(const Shape& s) {
    Shape st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
            throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape_));
    }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = value;
        return t;
    }
    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    const Shape& shape() const { return shape_; }
    int64_t dim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t size(int64_t axis) const { return shape_[normalize_axis(axis)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[i]; }
    const T& operator[](int64_t i) const { return data_[i]; }

    template <typename... Ix>
    T& operator()(Ix... ix) { return data_[offset_of({static_cast<int64_t>(ix)...})]; }
    template <typename... Ix>
    const T& operator()(Ix... ix) const { return data_[offset_of({static_cast<int64_t>(ix)...})]; }

    int64_t normalize_axis(int64_t axis) const {
        if (axis < 0) axis += dim();
        if (axis < 0 || axis >= dim())
            throw std::invalid_argument("axis out of range for shape " + shape_str(shape_));
        return axis;
    }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                                        " changes element count");
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    int64_t offset_of(std::initializer_list<int64_t> ix) const {
        int64_t off = 0, stride = 1;
        size_t i = shape_.size();
        auto it = ix.end();
        while (i-- > 0) {
            --it;
            off += *it * stride;
            stride *= shape_[i];
        }
        return off;
    }

    Shape shape_;
    std::vector<T> data_;
};

// ---- elementwise helpers ----

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F&& f) {
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
    return out;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    return map(a, [c](T x) { return x * c; });
}

template <typename T>
T sum(const Tensor<T>& a) {
    T s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i];
    return s;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
    T m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i]));
    return m;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <typename T>
T norm(const Tensor<T>& a) {
    T s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * a[i];
    return std::sqrt(s);
}

// ---- axis-aware ops ----

// Copy of the [from, to) range along `axis`.
template <typename T>
Tensor<T> slice_axis(const Tensor<T>& a, int64_t axis, int64_t from, int64_t to) {
    axis = a.normalize_axis(axis);
    const Shape& s = a.shape();
    if (from < 0 || to > s[axis] || from >= to) throw std::invalid_argument("slice_axis: bad range");
    Shape out_shape = s;
    out_shape[axis] = to - from;
    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= s[d];
    for (int64_t d = axis + 1; d < a.dim(); ++d) inner *= s[d];
    Tensor<T> out(out_shape);
    const int64_t len = s[axis], cut = to - from;
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(a.data() + (o * len + from) * inner, cut * inner, out.data() + o * cut * inner);
    return out;
}

// Permute axes: out[i_perm[0], i_perm[1], ...] = in[i_0, i_1, ...], i.e. output
// axis d corresponds to input axis perm[d].
template <typename T>
Tensor<T> permuted(const Tensor<T>& a, const std::vector<int64_t>& perm) {
    const int64_t nd = a.dim();
    if (static_cast<int64_t>(perm.size()) != nd)
        throw std::invalid_argument("permute rank mismatch for " + shape_str(a.shape()));
    Shape out_shape(nd);
    std::vector<bool> seen(nd, false);
    for (int64_t d = 0; d < nd; ++d) {
        int64_t p = perm[d];
        if (p < 0 || p >= nd || seen[p]) throw std::invalid_argument("invalid permutation");
        seen[p] = true;
        out_shape[d] = a.shape()[p];
    }
    bool identity = true;
    for (int64_t d = 0; d < nd; ++d) identity = identity && perm[d] == d;
    if (identity) return a;

    Tensor<T> out(out_shape);
    Shape in_strides = shape_strides(a.shape());
    std::vector<int64_t> stride_for_out(nd);
    for (int64_t d = 0; d < nd; ++d) stride_for_out[d] = in_strides[perm[d]];

    // odometer over output indices; innermost loop strided over the input
    std::vector<int64_t> idx(nd, 0);
    const int64_t inner = out_shape[nd - 1];
    const int64_t inner_stride = stride_for_out[nd - 1];
    const T* src = a.data();
    T* dst = out.data();
    int64_t in_off = 0;
    int64_t total_rows = out.numel() / inner;
    for (int64_t row = 0; row < total_rows; ++row) {
        int64_t o = in_off;
        for (int64_t j = 0; j < inner; ++j, o += inner_stride) *dst++ = src[o];
        // advance all but the last axis
        for (int64_t d = nd - 2; d >= 0; --d) {
            in_off += stride_for_out[d];
            if (++idx[d] < out_shape[d]) break;
            in_off -= stride_for_out[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    return out;
}

namespace detail {
// Apply f(src_slice, dst_slice, len, stride) along `axis` of a.
template <typename T, typename F>
void for_each_lane(const Tensor<T>& a, Tensor<T>& out, int64_t axis, F&& f) {
    axis = a.normalize_axis(axis);
    const Shape& s = a.shape();
    int64_t outer = 1, inner = 1, len = s[axis];
    for (int64_t d = 0; d < axis; ++d) outer *= s[d];
    for (int64_t d = axis + 1; d < a.dim(); ++d) inner *= s[d];
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            int64_t base = o * len * inner + i;
            f(a.data() + base, out.data() + base, len, inner);
        }
}
}  // namespace detail

// Numerically stabilized softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int64_t axis) {
    Tensor<T> out(a.shape());
    detail::for_each_lane(a, out, axis, [](const T* src, T* dst, int64_t len, int64_t stride) {
        T m = src[0];
        for (int64_t j = 1; j < len; ++j) m = std::max(m, src[j * stride]);
        T total = 0;
        for (int64_t j = 0; j < len; ++j) {
            T e = std::exp(src[j * stride] - m);
            dst[j * stride] = e;
            total += e;
        }
        for (int64_t j = 0; j < len; ++j) dst[j * stride] /= total;
    });
    return out;
}

// y = x / sqrt(mean(x^2, axis) + eps); no learned scale.
template <typename T>
Tensor<T> rmsnorm_noscale(const Tensor<T>& a, int64_t axis, T eps) {
    if (!(eps > 0)) throw std::invalid_argument("rmsnorm eps must be positive");
    Tensor<T> out(a.shape());
    detail::for_each_lane(a, out, axis, [eps](const T* src, T* dst, int64_t len, int64_t stride) {
        T ms = 0;
        for (int64_t j = 0; j < len; ++j) ms += src[j * stride] * src[j * stride];
        ms /= static_cast<T>(len);
        T inv = T(1) / std::sqrt(ms + eps);
        for (int64_t j = 0; j < len; ++j) dst[j * stride] = src[j * stride] * inv;
    });
    return out;
}

// Exact erf-based GELU: x * Phi(x).
template <typename T>
T gelu_scalar(T x) {
    return x * T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <typename T>
T gelu_grad_scalar(T x) {
    T phi = std::exp(-x * x / 2) / std::sqrt(2 * M_PI);
    T Phi = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
    return Phi + x * phi;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    return map(a, [](T x) { return gelu_scalar(x); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    return map(a, [](T x) { return std::tanh(x); });
}

// ---- deterministic RNG ----

// Counter-based generator (splitmix64 finalizer over seed+counter). The whole
// state is two u64s, which makes checkpointing trivial and every stream
// reproducible bit-for-bit from (seed, counter).
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // standard normal via Box-Muller; two uniforms per draw, no cached spare
    double normal() {
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Independent child stream; deterministic in (seed, stream).
    Rng split(uint64_t stream) const {
        uint64_t z = seed_ ^ ((stream + 1) * 0xD1B54A32D192ED03ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return Rng(z ^ (z >> 31));
    }

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }

private:
    uint64_t seed_;
    uint64_t counter_;
};

// ---- initializers ----

struct InitSpec {
    enum class Kind { zeros, normal, xavier_normal };
    Kind kind = Kind::zeros;
    double std = 0.0;

    static InitSpec zeros() { return {Kind::zeros, 0.0}; }
    static InitSpec normal(double std) { return {Kind::normal, std}; }
    static InitSpec xavier_normal() { return {Kind::xavier_normal, 0.0}; }
};

// normal(std): i.i.d. N(0, std^2); xavier_normal: N(0, 2/(fan_in+fan_out)) with
// fan_in = product of leading extents, fan_out = trailing extent.
template <typename T>
Tensor<T> init(const Shape& shape, const InitSpec& spec, Rng& rng) {
    if (shape.empty()) throw std::invalid_argument("init: shape must be nonempty");
    Tensor<T> t(shape);
    double std = 0.0;
    switch (spec.kind) {
        case InitSpec::Kind::zeros:
            return t;
        case InitSpec::Kind::normal:
            if (spec.std < 0) throw std::invalid_argument("init: negative std");
            if (spec.std == 0) return t;
            std = spec.std;
            break;
        case InitSpec::Kind::xavier_normal: {
            int64_t fan_out = shape.back();
            int64_t fan_in = t.numel() / fan_out;
            std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
            break;
        }
    }
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal() * std);
    return t;
}

}  // namespace dcmha
