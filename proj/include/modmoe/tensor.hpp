#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
// Row-major contiguous storage, no views. The primitive set is the minimal
// closed set needed by the transformer in model.hpp.

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <malloc.h>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace modmoe {

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Allocator that skips value-initialization on default construction, so
// buffers that are fully overwritten are not zero-filled first. Explicit
// zeroing still happens wherever assign()/zeros() is used.
template <class T>
struct NoInitAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = NoInitAllocator<U>;
    };
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new (static_cast<void*>(p)) U;
        else
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using dvec = std::vector<double, NoInitAllocator<double>>;

inline bool operator==(const dvec& a, const std::vector<double>& b) {
    return std::equal(a.begin(), a.end(), b.begin(), b.end());
}
inline bool operator==(const std::vector<double>& a, const dvec& b) { return b == a; }
inline bool operator!=(const dvec& a, const std::vector<double>& b) { return !(a == b); }
inline bool operator!=(const std::vector<double>& a, const dvec& b) { return !(b == a); }

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(numel(t.impl_->shape), 0.0);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    // Allocates without zero-filling; callers must write every element.
    static Tensor uninit(std::vector<int> shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->data.resize(numel(shape));
        t.impl_->shape = std::move(shape);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(std::vector<int> shape, dvec data, bool requires_grad = false) {
        if (numel(shape) != static_cast<int64_t>(data.size()))
            throw TensorError("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(std::vector<int> shape, const std::vector<double>& data,
                       bool requires_grad = false) {
        return from(std::move(shape), dvec(data.begin(), data.end()), requires_grad);
    }

    static Tensor from(std::vector<int> shape, std::initializer_list<double> data,
                       bool requires_grad = false) {
        return from(std::move(shape), dvec(data.begin(), data.end()), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[i]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

    dvec& data() { return impl_->data; }
    const dvec& data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }

    bool has_grad() const { return !impl_->grad.empty(); }
    dvec& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    const dvec& grad() const {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    }

    double item() const {
        if (size() != 1) throw TensorError("item() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

    void check_finite(const std::string& what) const {
        for (double v : impl_->data)
            if (!std::isfinite(v))
                throw TensorError("non-finite value in " + what);
    }

    static int64_t numel(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw TensorError("non-positive dimension in shape " + shape_str(shape));
            n *= d;
        }
        return n;
    }

private:
    struct Impl {
        std::vector<int> shape;
        dvec data;
        mutable dvec grad;  // empty until touched
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

// Records backward closures for one training step. Confined to a single
// logical step; never shared across threads.
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void backward(Tensor loss) {
        if (loss.size() != 1)
            throw TensorError("backward() requires a scalar loss, got " +
                              shape_str(loss.shape()));
        loss.grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

namespace detail {
inline bool track(const Tape* tape, std::initializer_list<const Tensor*> ins) {
    if (!tape) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
}
// Last dim and row count for a [...xN] tensor.
inline void rows_cols(const Tensor& t, int64_t& rows, int64_t& cols) {
    cols = t.shape().back();
    rows = t.size() / cols;
}
}  // namespace detail

// ---- elementwise ----

inline Tensor add(Tape* tape, Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = Tensor::uninit(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (int64_t i = 0; i < a.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (int64_t i = 0; i < b.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(Tape* tape, Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = Tensor::uninit(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (int64_t i = 0; i < a.size(); ++i) ga[i] += g[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (int64_t i = 0; i < b.size(); ++i) gb[i] += g[i] * a.data()[i];
            }
        });
    }
    return out;
}

inline Tensor scale(Tape* tape, Tensor a, double c) {
    Tensor out = Tensor::uninit(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * c;
    if (detail::track(tape, {&a})) {
        out.set_requires_grad(true);
        tape->record([a, out, c]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (int64_t i = 0; i < a.size(); ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

inline Tensor silu(Tape* tape, Tensor x) {
    Tensor out = Tensor::uninit(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        double v = x.data()[i];
        out.data()[i] = v / (1.0 + std::exp(-v));
    }
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (int64_t i = 0; i < x.size(); ++i) {
                double v = x.data()[i];
                double s = 1.0 / (1.0 + std::exp(-v));
                gx[i] += g[i] * s * (1.0 + v * (1.0 - s));
            }
        });
    }
    return out;
}

// ---- matrix products (OpenBLAS dgemm behind the contract) ----

namespace detail {
// fixed-order single-threaded accumulation keeps results bit-reproducible
inline void blas_single_thread() {
    static const bool once = [] {
        openblas_set_num_threads(1);
        // Large intermediate buffers are allocated and freed every step;
        // keeping them off mmap and uncommitted avoids page-fault churn.
        mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
        return true;
    }();
    (void)once;
}
}  // namespace detail

inline Tensor matmul(Tape* tape, Tensor a, Tensor b) {
    detail::blas_single_thread();
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::uninit({m, n});
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a.data().data(), k,
                b.data().data(), n, 0.0, out.data().data(), n);
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, m, n, k]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad())  // dA += dC * B^T
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0, g, n,
                            b.data().data(), n, 1.0, a.grad().data(), k);
            if (b.requires_grad())  // dB += A^T * dC
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0,
                            a.data().data(), k, g, n, 1.0, b.grad().data(), n);
        });
    }
    return out;
}

// C = A * B^T with A [m x k], B [n x k].
// (matmul_nt below also routes through dgemm; the thread guard is shared)
inline Tensor matmul_nt(Tape* tape, Tensor a, Tensor b) {
    detail::blas_single_thread();
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
        throw TensorError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()) + "^T");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = Tensor::uninit({m, n});
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0, a.data().data(), k,
                b.data().data(), k, 0.0, out.data().data(), n);
    if (detail::track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, m, n, k]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad())  // dA += dC * B
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, k, n, 1.0, g, n,
                            b.data().data(), k, 1.0, a.grad().data(), k);
            if (b.requires_grad())  // dB += dC^T * A
                cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, n, k, m, 1.0, g, n,
                            a.data().data(), k, 1.0, b.grad().data(), k);
        });
    }
    return out;
}

// ---- row/last-dim ops ----

inline Tensor softmax_lastdim(Tape* tape, Tensor x) {
    int64_t rows, cols;
    detail::rows_cols(x, rows, cols);
    Tensor out = Tensor::uninit(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* xi = x.data().data() + r * cols;
        double* yi = out.data().data() + r * cols;
        double mx = xi[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            z += yi[j];
        }
        for (int64_t j = 0; j < cols; ++j) yi[j] /= z;
    }
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, rows, cols]() mutable {
            auto& gx = x.grad();
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = out.data().data() + r * cols;
                const double* gy = out.grad().data() + r * cols;
                double dot = 0.0;
                for (int64_t j = 0; j < cols; ++j) dot += gy[j] * y[j];
                for (int64_t j = 0; j < cols; ++j) gx[r * cols + j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

inline Tensor logsumexp_lastdim(Tape* tape, Tensor x) {
    int64_t rows, cols;
    detail::rows_cols(x, rows, cols);
    Tensor out = Tensor::uninit({static_cast<int>(rows)});
    for (int64_t r = 0; r < rows; ++r) {
        const double* xi = x.data().data() + r * cols;
        double mx = xi[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (int64_t j = 0; j < cols; ++j) z += std::exp(xi[j] - mx);
        out.data()[r] = mx + std::log(z);
    }
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, rows, cols]() mutable {
            auto& gx = x.grad();
            for (int64_t r = 0; r < rows; ++r) {
                double lse = out.data()[r];
                double g = out.grad()[r];
                for (int64_t j = 0; j < cols; ++j)
                    gx[r * cols + j] += g * std::exp(x.data()[r * cols + j] - lse);
            }
        });
    }
    return out;
}

// y = x / rms(x) * gain, rms over the last dim; gain has length = last dim.
inline Tensor rms_norm(Tape* tape, Tensor x, Tensor gain, double eps = 1e-6) {
    int64_t rows, cols;
    detail::rows_cols(x, rows, cols);
    if (gain.size() != cols)
        throw TensorError("rms_norm: gain length " + std::to_string(gain.size()) +
                          " != last dim " + std::to_string(cols));
    Tensor out = Tensor::uninit(x.shape());
    std::vector<double> inv(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xi = x.data().data() + r * cols;
        double ms = 0.0;
        for (int64_t j = 0; j < cols; ++j) ms += xi[j] * xi[j];
        ms /= static_cast<double>(cols);
        inv[r] = 1.0 / std::sqrt(ms + eps);
        for (int64_t j = 0; j < cols; ++j)
            out.data()[r * cols + j] = xi[j] * inv[r] * gain.data()[j];
    }
    if (detail::track(tape, {&x, &gain})) {
        out.set_requires_grad(true);
        tape->record([x, gain, out, inv, rows, cols]() mutable {
            for (int64_t r = 0; r < rows; ++r) {
                const double* xi = x.data().data() + r * cols;
                const double* gy = out.grad().data() + r * cols;
                if (gain.requires_grad()) {
                    auto& gg = gain.grad();
                    for (int64_t j = 0; j < cols; ++j) gg[j] += gy[j] * xi[j] * inv[r];
                }
                if (x.requires_grad()) {
                    auto& gx = x.grad();
                    double dot = 0.0;  // sum_k gy_k * gain_k * x_k
                    for (int64_t j = 0; j < cols; ++j) dot += gy[j] * gain.data()[j] * xi[j];
                    double c = inv[r] * inv[r] * inv[r] * dot / static_cast<double>(cols);
                    for (int64_t j = 0; j < cols; ++j)
                        gx[r * cols + j] += gy[j] * gain.data()[j] * inv[r] - c * xi[j];
                }
            }
        });
    }
    return out;
}

// ---- indexing ----

inline Tensor embedding_lookup(Tape* tape, Tensor table, const std::vector<int>& ids) {
    const int cols = table.dim(1);
    Tensor out = Tensor::uninit({static_cast<int>(ids.size()), cols});
    for (size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= table.dim(0))
            throw TensorError("embedding_lookup: id " + std::to_string(ids[t]) +
                              " out of range for table " + shape_str(table.shape()));
        std::copy_n(table.data().data() + static_cast<int64_t>(ids[t]) * cols, cols,
                    out.data().data() + t * cols);
    }
    if (detail::track(tape, {&table})) {
        out.set_requires_grad(true);
        tape->record([table, out, ids, cols]() mutable {
            auto& gt = table.grad();
            for (size_t t = 0; t < ids.size(); ++t)
                for (int j = 0; j < cols; ++j)
                    gt[static_cast<int64_t>(ids[t]) * cols + j] += out.grad()[t * cols + j];
        });
    }
    return out;
}

inline Tensor gather_rows(Tape* tape, Tensor x, const std::vector<int>& idx) {
    const int cols = x.dim(1);
    Tensor out = Tensor::uninit({static_cast<int>(idx.size()), cols});
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x.data().data() + static_cast<int64_t>(idx[r]) * cols, cols,
                    out.data().data() + r * cols);
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, idx, cols]() mutable {
            auto& gx = x.grad();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int j = 0; j < cols; ++j)
                    gx[static_cast<int64_t>(idx[r]) * cols + j] += out.grad()[r * cols + j];
        });
    }
    return out;
}

// Rows of x land at positions idx in a zero matrix with n_rows rows.
inline Tensor scatter_rows(Tape* tape, Tensor x, const std::vector<int>& idx, int n_rows) {
    const int cols = x.dim(1);
    Tensor out = Tensor::zeros({n_rows, cols});
    for (size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < cols; ++j)
            out.data()[static_cast<int64_t>(idx[r]) * cols + j] += x.data()[r * cols + j];
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, idx, cols]() mutable {
            auto& gx = x.grad();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int j = 0; j < cols; ++j)
                    gx[r * cols + j] += out.grad()[static_cast<int64_t>(idx[r]) * cols + j];
        });
    }
    return out;
}

// out[i] = x[rows[i], cols[i]]
inline Tensor gather_cells(Tape* tape, Tensor x, const std::vector<int>& rows,
                           const std::vector<int>& colidx) {
    if (rows.size() != colidx.size()) throw TensorError("gather_cells: index length mismatch");
    const int cols = x.dim(1);
    Tensor out = Tensor::uninit({static_cast<int>(rows.size())});
    for (size_t i = 0; i < rows.size(); ++i)
        out.data()[i] = x.data()[static_cast<int64_t>(rows[i]) * cols + colidx[i]];
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, rows, colidx, cols]() mutable {
            auto& gx = x.grad();
            for (size_t i = 0; i < rows.size(); ++i)
                gx[static_cast<int64_t>(rows[i]) * cols + colidx[i]] += out.grad()[i];
        });
    }
    return out;
}

// Each row of x [T x n] multiplied by w[t].
inline Tensor row_scale(Tape* tape, Tensor x, Tensor w) {
    const int64_t rowsN = x.dim(0), cols = x.dim(1);
    if (w.size() != rowsN) throw TensorError("row_scale: weight length mismatch");
    Tensor out = Tensor::uninit(x.shape());
    for (int64_t r = 0; r < rowsN; ++r)
        for (int64_t j = 0; j < cols; ++j)
            out.data()[r * cols + j] = x.data()[r * cols + j] * w.data()[r];
    if (detail::track(tape, {&x, &w})) {
        out.set_requires_grad(true);
        tape->record([x, w, out, rowsN, cols]() mutable {
            const auto& g = out.grad();
            if (x.requires_grad()) {
                auto& gx = x.grad();
                for (int64_t r = 0; r < rowsN; ++r)
                    for (int64_t j = 0; j < cols; ++j)
                        gx[r * cols + j] += g[r * cols + j] * w.data()[r];
            }
            if (w.requires_grad()) {
                auto& gw = w.grad();
                for (int64_t r = 0; r < rowsN; ++r)
                    for (int64_t j = 0; j < cols; ++j)
                        gw[r] += g[r * cols + j] * x.data()[r * cols + j];
            }
        });
    }
    return out;
}

inline Tensor slice_cols(Tape* tape, Tensor x, int c0, int c1) {
    const int rows = x.dim(0), cols = x.dim(1), w = c1 - c0;
    if (c0 < 0 || c1 > cols || w <= 0) throw TensorError("slice_cols: bad range");
    Tensor out = Tensor::uninit({rows, w});
    for (int r = 0; r < rows; ++r)
        std::copy_n(x.data().data() + static_cast<int64_t>(r) * cols + c0, w,
                    out.data().data() + static_cast<int64_t>(r) * w);
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, rows, cols, c0, w]() mutable {
            auto& gx = x.grad();
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < w; ++j)
                    gx[static_cast<int64_t>(r) * cols + c0 + j] +=
                        out.grad()[static_cast<int64_t>(r) * w + j];
        });
    }
    return out;
}

inline Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw TensorError("concat_cols: empty input");
    const int rows = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p.dim(0) != rows) throw TensorError("concat_cols: row mismatch");
        total += p.dim(1);
    }
    Tensor out = Tensor::uninit({rows, total});
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int r = 0; r < rows; ++r)
            std::copy_n(p.data().data() + static_cast<int64_t>(r) * w, w,
                        out.data().data() + static_cast<int64_t>(r) * total + off);
        off += w;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> owned = parts;
        tape->record([owned = std::move(owned), out, rows, total]() mutable {
            int off = 0;
            for (auto& p : owned) {
                const int w = p.dim(1);
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (int r = 0; r < rows; ++r)
                        for (int j = 0; j < w; ++j)
                            gp[static_cast<int64_t>(r) * w + j] +=
                                out.grad()[static_cast<int64_t>(r) * total + off + j];
                }
                off += w;
            }
        });
    }
    return out;
}

// ---- reductions ----

inline Tensor sum(Tape* tape, Tensor x) {
    Tensor out = Tensor::scalar(std::accumulate(x.data().begin(), x.data().end(), 0.0));
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            double g = out.grad()[0];
            auto& gx = x.grad();
            for (int64_t i = 0; i < x.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

inline Tensor mean(Tape* tape, Tensor x) {
    return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size()));
}

// Column means of a [T x n] matrix -> [n].
inline Tensor mean_rows(Tape* tape, Tensor x) {
    const int64_t rows = x.dim(0), cols = x.dim(1);
    Tensor out = Tensor::zeros({static_cast<int>(cols)});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cols; ++j) out.data()[j] += x.data()[r * cols + j];
    for (int64_t j = 0; j < cols; ++j) out.data()[j] /= static_cast<double>(rows);
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, rows, cols]() mutable {
            auto& gx = x.grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < cols; ++j)
                    gx[r * cols + j] += out.grad()[j] / static_cast<double>(rows);
        });
    }
    return out;
}

inline Tensor dot(Tape* tape, Tensor a, Tensor b) { return sum(tape, mul(tape, a, b)); }

// ---- language-model loss ----

// Mean negative log-likelihood over unmasked positions.
inline Tensor cross_entropy(Tape* tape, Tensor logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask) {
    const int64_t T = logits.dim(0), V = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != T ||
        static_cast<int64_t>(mask.size()) != T)
        throw TensorError("cross_entropy: targets/mask length mismatch");
    int64_t n_active = 0;
    for (uint8_t m : mask) n_active += m ? 1 : 0;
    if (n_active == 0) throw TensorError("cross_entropy: all positions masked (degenerate batch)");

    std::vector<double> lse(T);
    double loss = 0.0;
    for (int64_t t = 0; t < T; ++t) {
        if (!mask[t]) continue;
        if (targets[t] < 0 || targets[t] >= V)
            throw TensorError("cross_entropy: target id out of range");
        const double* row = logits.data().data() + t * V;
        double mx = row[0];
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
        lse[t] = mx + std::log(z);
        loss += lse[t] - row[targets[t]];
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(n_active));
    if (detail::track(tape, {&logits})) {
        out.set_requires_grad(true);
        tape->record([logits, out, targets, mask, lse, T, V, n_active]() mutable {
            double g = out.grad()[0] / static_cast<double>(n_active);
            auto& gx = logits.grad();
            for (int64_t t = 0; t < T; ++t) {
                if (!mask[t]) continue;
                const double* row = logits.data().data() + t * V;
                for (int64_t j = 0; j < V; ++j) {
                    double p = std::exp(row[j] - lse[t]);
                    gx[t * V + j] += g * (p - (j == targets[t] ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

// Rotary position embedding over dimension pairs; positions given per row.
inline Tensor rope(Tape* tape, Tensor x, const std::vector<int>& positions,
                   double base = 10000.0) {
    const int64_t T = x.dim(0), d = x.dim(1);
    if (static_cast<int64_t>(positions.size()) != T)
        throw TensorError("rope: positions length mismatch");
    if (d % 2 != 0) throw TensorError("rope: head dim must be even");
    Tensor out = Tensor::uninit(x.shape());
    std::vector<double> cs(T * d / 2), sn(T * d / 2);
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < d / 2; ++i) {
            double theta = positions[t] * std::pow(base, -2.0 * static_cast<double>(i) /
                                                             static_cast<double>(d));
            cs[t * d / 2 + i] = std::cos(theta);
            sn[t * d / 2 + i] = std::sin(theta);
        }
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < d / 2; ++i) {
            double x0 = x.data()[t * d + 2 * i], x1 = x.data()[t * d + 2 * i + 1];
            double c = cs[t * d / 2 + i], s = sn[t * d / 2 + i];
            out.data()[t * d + 2 * i] = x0 * c - x1 * s;
            out.data()[t * d + 2 * i + 1] = x0 * s + x1 * c;
        }
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, cs, sn, T, d]() mutable {
            auto& gx = x.grad();
            for (int64_t t = 0; t < T; ++t)
                for (int64_t i = 0; i < d / 2; ++i) {
                    double g0 = out.grad()[t * d + 2 * i], g1 = out.grad()[t * d + 2 * i + 1];
                    double c = cs[t * d / 2 + i], s = sn[t * d / 2 + i];
                    gx[t * d + 2 * i] += g0 * c + g1 * s;
                    gx[t * d + 2 * i + 1] += -g0 * s + g1 * c;
                }
        });
    }
    return out;
}

// p restricted to mask (0/1 per cell) and renormalized per row. Gradient
// flows through numerator and denominator; the mask itself is constant.
inline Tensor mask_renorm(Tape* tape, Tensor p, const std::vector<uint8_t>& mask) {
    const int64_t T = p.dim(0), n = p.dim(1);
    if (static_cast<int64_t>(mask.size()) != T * n)
        throw TensorError("mask_renorm: mask size mismatch");
    Tensor out = Tensor::uninit(p.shape());
    std::vector<double> denom(T);
    for (int64_t t = 0; t < T; ++t) {
        double s = 0.0;
        for (int64_t j = 0; j < n; ++j)
            if (mask[t * n + j]) s += p.data()[t * n + j];
        if (s <= 0.0) throw TensorError("mask_renorm: empty or zero-probability pool");
        denom[t] = s;
        for (int64_t j = 0; j < n; ++j)
            out.data()[t * n + j] = mask[t * n + j] ? p.data()[t * n + j] / s : 0.0;
    }
    if (detail::track(tape, {&p})) {
        out.set_requires_grad(true);
        tape->record([p, out, mask, denom, T, n]() mutable {
            auto& gp = p.grad();
            for (int64_t t = 0; t < T; ++t) {
                double dots = 0.0;  // sum_i g_i * phat_i over the pool
                for (int64_t j = 0; j < n; ++j)
                    if (mask[t * n + j]) dots += out.grad()[t * n + j] * out.data()[t * n + j];
                for (int64_t j = 0; j < n; ++j)
                    if (mask[t * n + j])
                        gp[t * n + j] += (out.grad()[t * n + j] - dots) / denom[t];
            }
        });
    }
    return out;
}

}  // namespace modmoe
