#include "hitt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "hitt/kernels/kernels.hpp"
#include "hitt/random.hpp"

namespace hitt {

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

thread_local GradientTape* g_active_tape = nullptr;

std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

Tensor make(std::vector<int> shape, bool requires_grad) {
    for (int d : shape)
        if (d <= 0) throw ShapeError("non-positive dim in shape " + shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->value.assign(numel_of(t.d_->shape), 0.0f);
    t.d_->requires_grad = requires_grad;
    return t;
}

float* grad_buf(TensorData& t) {
    if (t.grad.empty()) t.grad.assign(t.value.size(), 0.0f);
    return t.grad.data();
}

// Gradient flowing into a node's output; nullptr means "all zeros, skip".
const float* out_grad(const TensorData& t) {
    return t.grad.empty() ? nullptr : t.grad.data();
}

void maybe_record(bool requires_grad, std::function<void()> fn) {
    if (!requires_grad) return;
    if (GradientTape* tape = GradientTape::active()) tape->record(std::move(fn));
}

void check_finite(const Tensor& t, const char* op) {
    for (float v : t.d_->value)
        if (!std::isfinite(v))
            throw NumericalError(std::string(op) + " produced a non-finite value");
}

bool wants(const Tensor& a) { return a.d_->requires_grad; }

// Trailing-dim broadcast plan: per output dim, operand strides (0 where the
// operand is broadcast).
struct Bcast {
    std::vector<int> out_shape;
    std::vector<std::size_t> sa, sb, so;
    bool same = false;
};

Bcast plan_bcast(const std::vector<int>& a, const std::vector<int>& b,
                 const char* op) {
    Bcast p;
    if (a == b) {
        p.out_shape = a;
        p.same = true;
        return p;
    }
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    p.out_shape.resize(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int da = i < r - ra ? 1 : a[static_cast<std::size_t>(i - (r - ra))];
        const int db = i < r - rb ? 1 : b[static_cast<std::size_t>(i - (r - rb))];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes not broadcastable " +
                             shape_str(a) + " vs " + shape_str(b));
        p.out_shape[static_cast<std::size_t>(i)] = std::max(da, db);
    }
    auto strides_for = [&](const std::vector<int>& s) {
        std::vector<std::size_t> st(static_cast<std::size_t>(r), 0);
        std::size_t acc = 1;
        const int rs = static_cast<int>(s.size());
        for (int i = rs - 1; i >= 0; --i) {
            const int out_i = i + (r - rs);
            st[static_cast<std::size_t>(out_i)] =
                s[static_cast<std::size_t>(i)] == 1 ? 0 : acc;
            acc *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
        }
        return st;
    };
    p.sa = strides_for(a);
    p.sb = strides_for(b);
    p.so.assign(static_cast<std::size_t>(r), 0);
    std::size_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
        p.so[static_cast<std::size_t>(i)] = acc;
        acc *= static_cast<std::size_t>(p.out_shape[static_cast<std::size_t>(i)]);
    }
    return p;
}

// Calls fn(out_index, a_offset, b_offset) for every output element.
template <typename F>
void for_bcast(const Bcast& p, F&& fn) {
    const int r = static_cast<int>(p.out_shape.size());
    const std::size_t n = numel_of(p.out_shape);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t rem = i, oa = 0, ob = 0;
        for (int d = 0; d < r; ++d) {
            const std::size_t idx = rem / p.so[static_cast<std::size_t>(d)];
            rem %= p.so[static_cast<std::size_t>(d)];
            oa += idx * p.sa[static_cast<std::size_t>(d)];
            ob += idx * p.sb[static_cast<std::size_t>(d)];
        }
        fn(i, oa, ob);
    }
}

struct AxisSplit {
    std::size_t outer, mid, inner;
};

AxisSplit split_axis(const std::vector<int>& shape, int axis, const char* op) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(shape));
    AxisSplit s{1, static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]), 1};
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
        s.inner *= static_cast<std::size_t>(shape[i]);
    return s;
}

void transpose_mat(const float* src, float* dst, int rows, int cols) {
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            dst[static_cast<std::size_t>(j) * rows + i] =
                src[static_cast<std::size_t>(i) * cols + j];
}

float stable_sigmoid(float x) {
    if (x >= 0.0f) {
        return 1.0f / (1.0f + std::exp(-x));
    }
    const float e = std::exp(x);
    return e / (1.0f + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return make(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float v, bool requires_grad) {
    Tensor t = make(std::move(shape), requires_grad);
    std::fill(t.d_->value.begin(), t.d_->value.end(), v);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> data,
                    bool requires_grad) {
    Tensor t = make(std::move(shape), requires_grad);
    if (data.size() != t.numel())
        throw ShapeError("from: data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(t.shape()));
    t.d_->value = std::move(data);
    return t;
}

Tensor Tensor::random_normal(std::vector<int> shape, Rng& rng, float stddev,
                             float mean, bool requires_grad) {
    Tensor t = make(std::move(shape), requires_grad);
    for (float& v : t.d_->value) v = rng.normal(mean, stddev);
    return t;
}

Tensor Tensor::random_uniform(std::vector<int> shape, Rng& rng, float lo,
                              float hi, bool requires_grad) {
    Tensor t = make(std::move(shape), requires_grad);
    for (float& v : t.d_->value) v = rng.uniform(lo, hi);
    return t;
}

float* Tensor::grad() { return grad_buf(*d_); }

void Tensor::zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
}

namespace {
std::size_t flat_index(const TensorData& d, std::initializer_list<int> idx) {
    if (idx.size() != d.shape.size())
        throw ShapeError("at: index rank mismatch for " + shape_str(d.shape));
    std::size_t off = 0, stride = 1;
    const int* p = idx.begin();
    for (int i = static_cast<int>(d.shape.size()) - 1; i >= 0; --i) {
        const int v = p[i];
        if (v < 0 || v >= d.shape[static_cast<std::size_t>(i)])
            throw ShapeError("at: index out of range");
        off += static_cast<std::size_t>(v) * stride;
        stride *= static_cast<std::size_t>(d.shape[static_cast<std::size_t>(i)]);
    }
    return off;
}
}  // namespace

float Tensor::at(std::initializer_list<int> idx) const {
    return d_->value[flat_index(*d_, idx)];
}

float& Tensor::at(std::initializer_list<int> idx) {
    return d_->value[flat_index(*d_, idx)];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = d_->shape;
    t.d_->value = d_->value;
    t.d_->requires_grad = false;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t = detach();
    t.d_->requires_grad = d_->requires_grad;
    return t;
}

// ---------------------------------------------------------------------------
// GradientTape
// ---------------------------------------------------------------------------

GradientTape::GradientTape() {
    if (g_active_tape)
        throw std::logic_error("a gradient tape is already active on this thread");
    g_active_tape = this;
}

GradientTape::~GradientTape() { g_active_tape = nullptr; }

GradientTape* GradientTape::active() { return g_active_tape; }

void GradientTape::backward(Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward: loss must be a defined scalar");
    loss.grad()[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
}

// ---------------------------------------------------------------------------
// Elementwise / broadcast ops
// ---------------------------------------------------------------------------

namespace {

enum class BinKind { add, sub, mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const Bcast p = plan_bcast(a.shape(), b.shape(), name);
    const bool req = wants(a) || wants(b);
    Tensor out = make(p.out_shape, req);
    const std::size_t n = out.numel();
    const auto& K = kernels::active();
    if (p.same) {
        switch (kind) {
            case BinKind::add: K.add(a.data(), b.data(), out.data(), n); break;
            case BinKind::mul: K.mul(a.data(), b.data(), out.data(), n); break;
            case BinKind::sub: {
                const float* pa = a.data();
                const float* pb = b.data();
                float* po = out.data();
                for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
                break;
            }
        }
    } else {
        const float* pa = a.data();
        const float* pb = b.data();
        float* po = out.data();
        for_bcast(p, [&](std::size_t i, std::size_t oa, std::size_t ob) {
            switch (kind) {
                case BinKind::add: po[i] = pa[oa] + pb[ob]; break;
                case BinKind::sub: po[i] = pa[oa] - pb[ob]; break;
                case BinKind::mul: po[i] = pa[oa] * pb[ob]; break;
            }
        });
    }
    check_finite(out, name);
    maybe_record(req, [da = a.d_, db = b.d_, dout = out.d_, p, kind, n] {
        const float* g = out_grad(*dout);
        if (!g) return;
        const auto& K = kernels::active();
        if (p.same) {
            switch (kind) {
                case BinKind::add:
                    if (da->requires_grad) K.axpy(1.0f, g, grad_buf(*da), n);
                    if (db->requires_grad) K.axpy(1.0f, g, grad_buf(*db), n);
                    break;
                case BinKind::sub:
                    if (da->requires_grad) K.axpy(1.0f, g, grad_buf(*da), n);
                    if (db->requires_grad) K.axpy(-1.0f, g, grad_buf(*db), n);
                    break;
                case BinKind::mul:
                    if (da->requires_grad) {
                        float* ga = grad_buf(*da);
                        const float* vb = db->value.data();
                        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
                    }
                    if (db->requires_grad) {
                        float* gb = grad_buf(*db);
                        const float* va = da->value.data();
                        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
                    }
                    break;
            }
            return;
        }
        float* ga = da->requires_grad ? grad_buf(*da) : nullptr;
        float* gb = db->requires_grad ? grad_buf(*db) : nullptr;
        const float* va = da->value.data();
        const float* vb = db->value.data();
        for_bcast(p, [&](std::size_t i, std::size_t oa, std::size_t ob) {
            switch (kind) {
                case BinKind::add:
                    if (ga) ga[oa] += g[i];
                    if (gb) gb[ob] += g[i];
                    break;
                case BinKind::sub:
                    if (ga) ga[oa] += g[i];
                    if (gb) gb[ob] -= g[i];
                    break;
                case BinKind::mul:
                    if (ga) ga[oa] += g[i] * vb[ob];
                    if (gb) gb[ob] += g[i] * va[oa];
                    break;
            }
        });
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::mul, "mul"); }

Tensor scale(const Tensor& a, float s) {
    const bool req = wants(a);
    Tensor out = make(a.shape(), req);
    kernels::active().scale(a.data(), s, out.data(), a.numel());
    check_finite(out, "scale");
    maybe_record(req, [da = a.d_, dout = out.d_, s] {
        const float* g = out_grad(*dout);
        if (!g) return;
        if (da->requires_grad)
            kernels::active().axpy(s, g, grad_buf(*da), da->value.size());
    });
    return out;
}

Tensor add_scalar(const Tensor& a, float s) {
    const bool req = wants(a);
    Tensor out = make(a.shape(), req);
    const float* pa = a.data();
    float* po = out.data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + s;
    check_finite(out, "add_scalar");
    maybe_record(req, [da = a.d_, dout = out.d_] {
        const float* g = out_grad(*dout);
        if (!g) return;
        if (da->requires_grad)
            kernels::active().axpy(1.0f, g, grad_buf(*da), da->value.size());
    });
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra / shape ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    const bool req = wants(a) || wants(b);
    Tensor out = make({m, n}, req);
    kernels::active().gemm(a.data(), b.data(), out.data(), m, k, n, false);
    check_finite(out, "matmul");
    maybe_record(req, [da = a.d_, db = b.d_, dout = out.d_, m, k, n] {
        const float* g = out_grad(*dout);
        if (!g) return;
        const auto& K = kernels::active();
        if (da->requires_grad) {
            // dA += G * B^T
            std::vector<float> bt(static_cast<std::size_t>(n) * k);
            transpose_mat(db->value.data(), bt.data(), k, n);
            K.gemm(g, bt.data(), grad_buf(*da), m, n, k, true);
        }
        if (db->requires_grad) {
            // dB += A^T * G
            std::vector<float> at(static_cast<std::size_t>(k) * m);
            transpose_mat(da->value.data(), at.data(), m, k);
            K.gemm(at.data(), g, grad_buf(*db), k, m, n, true);
        }
    });
    return out;
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2)
        throw ShapeError("transpose2d: expected rank 2, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    const bool req = wants(a);
    Tensor out = make({n, m}, req);
    transpose_mat(a.data(), out.data(), m, n);
    maybe_record(req, [da = a.d_, dout = out.d_, m, n] {
        const float* g = out_grad(*dout);
        if (!g || !da->requires_grad) return;
        float* ga = grad_buf(*da);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                ga[static_cast<std::size_t>(i) * n + j] +=
                    g[static_cast<std::size_t>(j) * m + i];
    });
    return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    const std::size_t n = numel_of(shape);
    if (n != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    const bool req = wants(a);
    Tensor out = make(std::move(shape), req);
    out.d_->value = a.d_->value;
    maybe_record(req, [da = a.d_, dout = out.d_] {
        const float* g = out_grad(*dout);
        if (!g || !da->requires_grad) return;
        kernels::active().axpy(1.0f, g, grad_buf(*da), da->value.size());
    });
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int r = parts[0].rank();
    if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
    std::vector<int> out_shape = parts[0].shape();
    bool req = false;
    int axis_total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != r) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && t.dim(i) != out_shape[static_cast<std::size_t>(i)])
                throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) +
                                 " vs " + shape_str(parts[0].shape()));
        axis_total += t.dim(axis);
        req = req || wants(t);
    }
    out_shape[static_cast<std::size_t>(axis)] = axis_total;
    Tensor out = make(out_shape, req);

    const AxisSplit s = split_axis(out_shape, axis, "concat");
    float* po = out.data();
    std::size_t axis_off = 0;
    for (const Tensor& t : parts) {
        const std::size_t block = static_cast<std::size_t>(t.dim(axis)) * s.inner;
        const float* pt = t.data();
        for (std::size_t o = 0; o < s.outer; ++o)
            std::memcpy(po + o * s.mid * s.inner + axis_off * s.inner, pt + o * block,
                        block * sizeof(float));
        axis_off += static_cast<std::size_t>(t.dim(axis));
    }
    std::vector<std::shared_ptr<TensorData>> srcs;
    srcs.reserve(parts.size());
    for (const Tensor& t : parts) srcs.push_back(t.d_);
    maybe_record(req, [srcs, dout = out.d_, s] {
        const float* g = out_grad(*dout);
        if (!g) return;
        std::size_t axis_off = 0;
        for (const auto& src : srcs) {
            const std::size_t mid_t = src->value.size() / (s.outer * s.inner);
            if (src->requires_grad) {
                float* gs = grad_buf(*src);
                const std::size_t block = mid_t * s.inner;
                for (std::size_t o = 0; o < s.outer; ++o) {
                    const float* gsrc = g + o * s.mid * s.inner + axis_off * s.inner;
                    float* gdst = gs + o * block;
                    for (std::size_t i = 0; i < block; ++i) gdst[i] += gsrc[i];
                }
            }
            axis_off += mid_t;
        }
    });
    return out;
}

Tensor slice_axis0(const Tensor& a, int begin, int end) {
    if (a.rank() < 1) throw ShapeError("slice_axis0: rank-0 input");
    if (begin < 0 || end > a.dim(0) || begin >= end)
        throw ShapeError("slice_axis0: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") for " + shape_str(a.shape()));
    std::vector<int> out_shape = a.shape();
    out_shape[0] = end - begin;
    const std::size_t inner = a.numel() / static_cast<std::size_t>(a.dim(0));
    const bool req = wants(a);
    Tensor out = make(out_shape, req);
    std::memcpy(out.data(), a.data() + static_cast<std::size_t>(begin) * inner,
                out.numel() * sizeof(float));
    maybe_record(req, [da = a.d_, dout = out.d_, begin, inner] {
        const float* g = out_grad(*dout);
        if (!g || !da->requires_grad) return;
        float* ga = grad_buf(*da) + static_cast<std::size_t>(begin) * inner;
        for (std::size_t i = 0; i < dout->value.size(); ++i) ga[i] += g[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities & normalizations
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
    const AxisSplit s = split_axis(a.shape(), axis, "softmax");
    const bool req = wants(a);
    Tensor out = make(a.shape(), req);
    const float* pa = a.data();
    float* po = out.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.mid * s.inner + in;
            float mx = pa[base];
            for (std::size_t m = 1; m < s.mid; ++m)
                mx = std::max(mx, pa[base + m * s.inner]);
            float z = 0.0f;
            for (std::size_t m = 0; m < s.mid; ++m) {
                const float e = std::exp(pa[base + m * s.inner] - mx);
                po[base + m * s.inner] = e;
                z += e;
            }
            const float inv = 1.0f / z;
            for (std::size_t m = 0; m < s.mid; ++m) po[base + m * s.inner] *= inv;
        }
    }
    check_finite(out, "softmax");
    maybe_record(req, [da = a.d_, dout = out.d_, s] {
        const float* g = out_grad(*dout);
        if (!g || !da->requires_grad) return;
        float* ga = grad_buf(*da);
        const float* p = dout->value.data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = o * s.mid * s.inner + in;
                float dot = 0.0f;
                for (std::size_t m = 0; m < s.mid; ++m)
                    dot += g[base + m * s.inner] * p[base + m * s.inner];
                for (std::size_t m = 0; m < s.mid; ++m) {
                    const std::size_t k = base + m * s.inner;
                    ga[k] += p[k] * (g[k] - dot);
                }
            }
        }
    });
    return out;
}

Tensor log_softmax(const Tensor& a, int axis) {
    const AxisSplit s = split_axis(a.shape(), axis, "log_softmax");
    const bool req = wants(a);
    Tensor out = make(a.shape(), req);
    const float* pa = a.data();
    float* po = out.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.mid * s.inner + in;
            float mx = pa[base];
            for (std::size_t m = 1; m < s.mid; ++m)
                mx = std::max(mx, pa[base + m * s.inner]);
            float z = 0.0f;
            for (std::size_t m = 0; m < s.mid; ++m)
                z += std::exp(pa[base + m * s.inner] - mx);
            const float lz = std::log(z) + mx;
            for (std::size_t m = 0; m < s.mid; ++m)
                po[base + m * s.inner] = pa[base + m * s.inner] - lz;
        }
    }
    check_finite(out, "log_softmax");
    maybe_record(req, [da = a.d_, dout = out.d_, s] {
        const float* g = out_grad(*dout);
        if (!g || !da->requires_grad) return;
        float* ga = grad_buf(*da);
        const float* y = dout->value.data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = o * s.mid * s.inner + in;
                float gsum = 0.0f;
                for (std::size_t m = 0; m < s.mid; ++m)
                    gsum += g[base + m * s.inner];
                for (std::size_t m = 0; m < s.mid; ++m) {
                    const std::size_t k = base + m * s.inner;
                    ga[k] += g[k] - std::exp(y[k]) * gsum;
                }
            }
        }
    });
    return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
    const bool req = wants(a);
    Tensor out = make(a.shape(), req);
    const float* pa = a.data();
    float* po = out.data();
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
    check_finite(out, name);
    maybe_record(req, [da = a.d_, dout = out.d_, bwd, n] {
        const float* g = out_grad(*dout);
        if (!g || !da->requires_grad) return;
        float* ga = grad_buf(*da);
        const float* x = da->value.data();
        const float* y = dout->value.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bwd(x[i], y[i]);
    });
    return out;
}

}  // namespace

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, "sigmoid", [](float x) { return stable_sigmoid(x); },
        [](float, float y) { return y * (1.0f - y); });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, "relu", [](float x) { return x > 0.0f ? x : 0.0f; },
        [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        a, "softplus",
        [](float x) { return std::max(x, 0.0f) + std::log1p(std::exp(-std::fabs(x))); },
        [](float x, float) { return stable_sigmoid(x); });
}

Tensor abs_val(const Tensor& a) {
    return unary_op(
        a, "abs", [](float x) { return std::fabs(x); },
        [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

Tensor rsqrt(const Tensor& a, float eps) {
    return unary_op(
        a, "rsqrt",
        [eps](float x) { return 1.0f / std::sqrt(x + eps); },
        [](float, float y) { return -0.5f * y * y * y; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
    const bool req = wants(a);
    Tensor out = make({1}, req);
    const float* pa = a.data();
    float acc = 0.0f;
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) acc += pa[i];
    out.data()[0] = acc;
    check_finite(out, "sum");
    maybe_record(req, [da = a.d_, dout = out.d_] {
        const float* g = out_grad(*dout);
        if (!g || !da->requires_grad) return;
        float* ga = grad_buf(*da);
        const float g0 = g[0];
        for (std::size_t i = 0; i < da->value.size(); ++i) ga[i] += g0;
    });
    return out;
}

Tensor sum_axis(const Tensor& a, int axis) {
    const AxisSplit s = split_axis(a.shape(), axis, "sum_axis");
    std::vector<int> out_shape;
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis) out_shape.push_back(a.dim(i));
    if (out_shape.empty()) out_shape.push_back(1);
    const bool req = wants(a);
    Tensor out = make(out_shape, req);
    const float* pa = a.data();
    float* po = out.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            float acc = 0.0f;
            const std::size_t base = o * s.mid * s.inner + in;
            for (std::size_t m = 0; m < s.mid; ++m) acc += pa[base + m * s.inner];
            po[o * s.inner + in] = acc;
        }
    }
    check_finite(out, "sum_axis");
    maybe_record(req, [da = a.d_, dout = out.d_, s] {
        const float* g = out_grad(*dout);
        if (!g || !da->requires_grad) return;
        float* ga = grad_buf(*da);
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t in = 0; in < s.inner; ++in) {
                const float gv = g[o * s.inner + in];
                const std::size_t base = o * s.mid * s.inner + in;
                for (std::size_t m = 0; m < s.mid; ++m) ga[base + m * s.inner] += gv;
            }
    });
    return out;
}

Tensor mean(const Tensor& a) {
    return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

// ---------------------------------------------------------------------------
// Convolution (im2col + gemm) and resampling
// ---------------------------------------------------------------------------

namespace {

void im2col(const float* x, int c_in, int h, int w, int k, int stride, int pad,
            int oh, int ow, float* cols) {
    const int nout = oh * ow;
    for (int ci = 0; ci < c_in; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* row = cols + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) *
                                        static_cast<std::size_t>(nout);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        const bool ok = iy >= 0 && iy < h && ix >= 0 && ix < w;
                        row[oy * ow + ox] =
                            ok ? x[(static_cast<std::size_t>(ci) * h + iy) * w + ix]
                               : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_add(const float* cols, int c_in, int h, int w, int k, int stride,
                int pad, int oh, int ow, float* dx) {
    const int nout = oh * ow;
    for (int ci = 0; ci < c_in; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* row =
                    cols + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) *
                               static_cast<std::size_t>(nout);
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        dx[(static_cast<std::size_t>(ci) * h + iy) * w + ix] +=
                            row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
    if (x.rank() != 3) throw ShapeError("conv2d: input must be [C,h,w], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(w.shape()));
    const int c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int c_out = w.dim(0), k = w.dim(2);
    if (w.dim(2) != w.dim(3))
        throw ShapeError("conv2d: kernel must be square, got " + shape_str(w.shape()));
    if (k != 1 && k != 3)
        throw ShapeError("conv2d: unsupported kernel size " + std::to_string(k) +
                         " (supported: 1, 3)");
    if (w.dim(1) != c_in)
        throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) +
                         " input channels, input has " + std::to_string(c_in));
    if (bias.rank() != 1 || bias.dim(0) != c_out)
        throw ShapeError("conv2d: bias must be [Cout]");
    if (stride != 1 && stride != 2)
        throw ShapeError("conv2d: unsupported stride " + std::to_string(stride));
    const int pad = k / 2;
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (wd + 2 * pad - k) / stride + 1;
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output");

    const int ckk = c_in * k * k;
    const int nout = oh * ow;
    auto cols = std::make_shared<std::vector<float>>(
        static_cast<std::size_t>(ckk) * static_cast<std::size_t>(nout));
    im2col(x.data(), c_in, h, wd, k, stride, pad, oh, ow, cols->data());

    const bool req = wants(x) || wants(w) || wants(bias);
    Tensor out = make({c_out, oh, ow}, req);
    kernels::active().gemm(w.data(), cols->data(), out.data(), c_out, ckk, nout,
                           false);
    float* po = out.data();
    const float* pb = bias.data();
    for (int co = 0; co < c_out; ++co) {
        const float b = pb[co];
        float* row = po + static_cast<std::size_t>(co) * nout;
        for (int j = 0; j < nout; ++j) row[j] += b;
    }
    check_finite(out, "conv2d");

    maybe_record(req, [dx = x.d_, dw = w.d_, db = bias.d_, dout = out.d_, cols,
                       c_in, h, wd, c_out, k, stride, pad, oh, ow, ckk, nout] {
        const float* g = out_grad(*dout);
        if (!g) return;
        const auto& K = kernels::active();
        if (dw->requires_grad) {
            // dW += G * cols^T
            std::vector<float> colsT(static_cast<std::size_t>(nout) * ckk);
            transpose_mat(cols->data(), colsT.data(), ckk, nout);
            K.gemm(g, colsT.data(), grad_buf(*dw), c_out, nout, ckk, true);
        }
        if (db->requires_grad) {
            float* gb = grad_buf(*db);
            for (int co = 0; co < c_out; ++co) {
                const float* row = g + static_cast<std::size_t>(co) * nout;
                float acc = 0.0f;
                for (int j = 0; j < nout; ++j) acc += row[j];
                gb[co] += acc;
            }
        }
        if (dx->requires_grad) {
            // dcols = W^T * G, then scatter back through the patch map.
            std::vector<float> wT(static_cast<std::size_t>(ckk) * c_out);
            transpose_mat(dw->value.data(), wT.data(), c_out, ckk);
            std::vector<float> dcols(static_cast<std::size_t>(ckk) * nout);
            K.gemm(wT.data(), g, dcols.data(), ckk, c_out, nout, false);
            col2im_add(dcols.data(), c_in, h, wd, k, stride, pad, oh, ow,
                       grad_buf(*dx));
        }
    });
    return out;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
    if (x.rank() != 3) throw ShapeError("upsample_nearest: input must be [C,h,w]");
    if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const bool req = wants(x);
    Tensor out = make({c, h * factor, w * factor}, req);
    const float* px = x.data();
    float* po = out.data();
    const int oh = h * factor, ow = w * factor;
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < oh; ++y) {
            const float* srow = px + (static_cast<std::size_t>(ci) * h + y / factor) * w;
            float* drow = po + (static_cast<std::size_t>(ci) * oh + y) * ow;
            for (int xg = 0; xg < ow; ++xg) drow[xg] = srow[xg / factor];
        }
    maybe_record(req, [dx = x.d_, dout = out.d_, c, h, w, factor] {
        const float* g = out_grad(*dout);
        if (!g || !dx->requires_grad) return;
        float* gx = grad_buf(*dx);
        const int oh = h * factor, ow = w * factor;
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < oh; ++y) {
                const float* grow = g + (static_cast<std::size_t>(ci) * oh + y) * ow;
                float* xrow = gx + (static_cast<std::size_t>(ci) * h + y / factor) * w;
                for (int xg = 0; xg < ow; ++xg) xrow[xg / factor] += grow[xg];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

std::vector<int> argmax_channel(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("argmax_channel: input must be [C,h,w]");
    const int c = x.dim(0);
    const std::size_t np = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    std::vector<int> out(np);
    const float* p = x.data();
    for (std::size_t i = 0; i < np; ++i) {
        int best = 0;
        float bv = p[i];
        for (int ch = 1; ch < c; ++ch) {
            const float v = p[static_cast<std::size_t>(ch) * np + i];
            if (v > bv) {  // strict: ties keep the lowest channel index
                bv = v;
                best = ch;
            }
        }
        out[i] = best;
    }
    return out;
}

std::vector<float> max_channel(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("max_channel: input must be [C,h,w]");
    const int c = x.dim(0);
    const std::size_t np = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    std::vector<float> out(np);
    const float* p = x.data();
    for (std::size_t i = 0; i < np; ++i) {
        float bv = p[i];
        for (int ch = 1; ch < c; ++ch)
            bv = std::max(bv, p[static_cast<std::size_t>(ch) * np + i]);
        out[i] = bv;
    }
    return out;
}

}  // namespace hitt
