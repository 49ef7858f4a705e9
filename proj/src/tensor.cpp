#include "latentforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lf {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local std::uint64_t g_pass_counter = 0;

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
        n *= d;
    }
    return s.empty() ? 0 : n;
}

[[noreturn]] void shape_error(const std::string& what) {
    throw ConfigError("shape error: " + what);
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "," : "") << s[i];
    }
    os << "]";
    return os.str();
}

// NaN/Inf never propagates silently: every op checks its result.
void check_finite(const TensorImpl& t, const char* op) {
    for (double v : t.value) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

// Lazily allocates the grad buffer and resets intermediate grads once per
// backward pass. Leaf grads persist so repeated backward calls accumulate.
void touch_grad(TensorImpl& t, std::uint64_t pass) {
    if (t.grad.empty()) {
        t.grad.assign(t.value.size(), 0.0);
        t.grad_pass = pass;
        return;
    }
    if (t.grad_pass != pass) {
        if (t.produced_by_op) {
            std::fill(t.grad.begin(), t.grad.end(), 0.0);
        }
        t.grad_pass = pass;
    }
}

// True when this tensor's grad carries signal for the current pass.
bool grad_live(const TensorImpl& t, std::uint64_t pass) {
    return !t.grad.empty() && t.grad_pass == pass;
}

using ImplPtr = std::shared_ptr<TensorImpl>;

Tensor finish_op(const char* name, Tensor out, std::function<void(std::uint64_t)> rule,
                 std::initializer_list<const Tensor*> inputs) {
    check_finite(*out.impl(), name);
    Tape* tape = Tape::active();
    if (tape == nullptr) {
        return out;
    }
    bool needs_grad = false;
    for (const Tensor* in : inputs) {
        needs_grad = needs_grad || in->requires_grad();
    }
    if (!needs_grad) {
        return out;
    }
    out.impl()->requires_grad = true;
    out.impl()->produced_by_op = true;
    tape->record(std::move(rule));
    return out;
}

}  // namespace

// ----------------------------------------------------------------- Tensor

Tensor make_tensor(Shape shape, std::vector<double> value) {
    if (shape.empty() || shape_numel(shape) != value.size()) {
        shape_error("tensor data size " + std::to_string(value.size()) +
                    " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->value = std::move(value);
    return t;
}

Tensor Tensor::zeros(const Shape& shape) {
    return make_tensor(shape, std::vector<double>(shape_numel(shape), 0.0));
}

Tensor Tensor::full(const Shape& shape, double v) {
    return make_tensor(shape, std::vector<double>(shape_numel(shape), v));
}

Tensor Tensor::scalar(double v) { return make_tensor({1}, {v}); }

Tensor Tensor::from(std::vector<double> data, const Shape& shape) {
    return make_tensor(shape, std::move(data));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
        x = rng.normal() * stddev;
    }
    return make_tensor(shape, std::move(v));
}

std::size_t Tensor::rows() const {
    const Shape& s = impl_->shape;
    return s.size() >= 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
    const Shape& s = impl_->shape;
    return s.size() >= 2 ? s[1] : s[0];
}

double Tensor::item() const {
    if (numel() != 1) {
        shape_error("item() on tensor with " + std::to_string(numel()) + " elements");
    }
    return impl_->value[0];
}

Tensor Tensor::clone() const {
    return make_tensor(impl_->shape, impl_->value);
}

// ------------------------------------------------------------------- Tape

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        shape_error("backward root must be a scalar");
    }
    const std::uint64_t pass = ++g_pass_counter;
    touch_grad(*loss.impl(), pass);
    loss.impl()->grad[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        (*it)(pass);
    }
}

// ----------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() > 2 || b.shape().size() > 2) {
        shape_error("matmul expects rank <= 2");
    }
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2) {
        shape_error("matmul inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    {
        const double* pa = a.value().data();
        const double* pb = b.value().data();
        double* pc = out.data();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = pa[i * k + kk];
                const double* brow = pb + kk * n;
                double* crow = pc + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    crow[j] += aik * brow[j];
                }
            }
        }
    }
    Tensor result = make_tensor({m, n}, std::move(out));
    ImplPtr ia = a.impl_ptr(), ib = b.impl_ptr(), io = result.impl_ptr();
    auto rule = [ia, ib, io, m, k, n](std::uint64_t pass) {
        if (!grad_live(*io, pass)) {
            return;
        }
        const double* g = io->grad.data();
        if (ia->requires_grad) {
            touch_grad(*ia, pass);
            double* da = ia->grad.data();
            const double* pb = ib->value.data();
            // dA[i,kk] += sum_j g[i,j] * B[kk,j]
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double* grow = g + i * n;
                    const double* brow = pb + kk * n;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += grow[j] * brow[j];
                    }
                    da[i * k + kk] += acc;
                }
            }
        }
        if (ib->requires_grad) {
            touch_grad(*ib, pass);
            double* db = ib->grad.data();
            const double* pa = ia->value.data();
            // dB[kk,j] += sum_i A[i,kk] * g[i,j]
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = g + i * n;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double aik = pa[i * k + kk];
                    double* brow = db + kk * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        brow[j] += aik * grow[j];
                    }
                }
            }
        }
    };
    return finish_op("matmul", std::move(result), std::move(rule), {&a, &b});
}

Tensor transpose(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = a.value()[i * n + j];
        }
    }
    Tensor result = make_tensor({n, m}, std::move(out));
    ImplPtr ia = a.impl_ptr(), io = result.impl_ptr();
    auto rule = [ia, io, m, n](std::uint64_t pass) {
        if (!grad_live(*io, pass) || !ia->requires_grad) {
            return;
        }
        touch_grad(*ia, pass);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                ia->grad[i * n + j] += io->grad[j * m + i];
            }
        }
    };
    return finish_op("transpose", std::move(result), std::move(rule), {&a});
}

// ----------------------------------------------------- elementwise binary

namespace {

enum class Broadcast { none, row_b, scalar_b, row_a, scalar_a };

Broadcast classify_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape() || (a.rows() == b.rows() && a.cols() == b.cols())) {
        return Broadcast::none;
    }
    if (b.numel() == 1) {
        return Broadcast::scalar_b;
    }
    if (a.numel() == 1) {
        return Broadcast::scalar_a;
    }
    if (b.rows() == 1 && b.cols() == a.cols()) {
        return Broadcast::row_b;
    }
    if (a.rows() == 1 && a.cols() == b.cols()) {
        return Broadcast::row_a;
    }
    shape_error(std::string(op) + " broadcast " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()) + " (only scalar and row broadcast are supported)");
}

// out[i] = f(a[bcast(i)], b[bcast(i)]) over the larger operand's index space.
template <class F>
std::vector<double> apply_binary(const Tensor& a, const Tensor& b, Broadcast bc, F f) {
    const bool a_big = (bc == Broadcast::none || bc == Broadcast::row_b || bc == Broadcast::scalar_b);
    const Tensor& big = a_big ? a : b;
    const std::size_t rows = big.rows(), cols = big.cols();
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t idx = i * cols + j;
            double av = 0.0, bv = 0.0;
            switch (bc) {
                case Broadcast::none: av = a.value()[idx]; bv = b.value()[idx]; break;
                case Broadcast::row_b: av = a.value()[idx]; bv = b.value()[j]; break;
                case Broadcast::scalar_b: av = a.value()[idx]; bv = b.value()[0]; break;
                case Broadcast::row_a: av = a.value()[j]; bv = b.value()[idx]; break;
                case Broadcast::scalar_a: av = a.value()[0]; bv = b.value()[idx]; break;
            }
            out[idx] = f(av, bv);
        }
    }
    return out;
}

// Accumulates g over the broadcast pattern into the (possibly smaller) input.
void scatter_bcast(TensorImpl& dst, const std::vector<double>& g, std::size_t rows,
                   std::size_t cols, bool reduced_row, bool reduced_scalar,
                   const std::vector<double>& weight) {
    // weight empty -> weight 1 everywhere.
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t idx = i * cols + j;
            const double w = weight.empty() ? 1.0 : weight[idx];
            if (reduced_scalar) {
                dst.grad[0] += g[idx] * w;
            } else if (reduced_row) {
                dst.grad[j] += g[idx] * w;
            } else {
                dst.grad[idx] += g[idx] * w;
            }
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const Broadcast bc = classify_broadcast(a, b, "add");
    const bool a_big = (bc == Broadcast::none || bc == Broadcast::row_b || bc == Broadcast::scalar_b);
    const Tensor& big = a_big ? a : b;
    Tensor result = make_tensor(big.shape(), apply_binary(a, b, bc, [](double x, double y) { return x + y; }));
    ImplPtr ia = a.impl_ptr(), ib = b.impl_ptr(), io = result.impl_ptr();
    const std::size_t rows = big.rows(), cols = big.cols();
    auto rule = [ia, ib, io, bc, rows, cols](std::uint64_t pass) {
        if (!grad_live(*io, pass)) {
            return;
        }
        const std::vector<double>& g = io->grad;
        if (ia->requires_grad) {
            touch_grad(*ia, pass);
            scatter_bcast(*ia, g, rows, cols, bc == Broadcast::row_a, bc == Broadcast::scalar_a, {});
        }
        if (ib->requires_grad) {
            touch_grad(*ib, pass);
            scatter_bcast(*ib, g, rows, cols, bc == Broadcast::row_b, bc == Broadcast::scalar_b, {});
        }
    };
    return finish_op("add", std::move(result), std::move(rule), {&a, &b});
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const Broadcast bc = classify_broadcast(a, b, "mul");
    const bool a_big = (bc == Broadcast::none || bc == Broadcast::row_b || bc == Broadcast::scalar_b);
    const Tensor& big = a_big ? a : b;
    Tensor result = make_tensor(big.shape(), apply_binary(a, b, bc, [](double x, double y) { return x * y; }));
    ImplPtr ia = a.impl_ptr(), ib = b.impl_ptr(), io = result.impl_ptr();
    const std::size_t rows = big.rows(), cols = big.cols();
    auto rule = [ia, ib, io, bc, rows, cols](std::uint64_t pass) {
        if (!grad_live(*io, pass)) {
            return;
        }
        const std::vector<double>& g = io->grad;
        // d/da (a*b) = b broadcast to the output grid; symmetric for b.
        auto expand = [&](const TensorImpl& src, bool as_row, bool as_scalar) {
            std::vector<double> w(rows * cols);
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    const std::size_t idx = i * cols + j;
                    w[idx] = as_scalar ? src.value[0] : (as_row ? src.value[j] : src.value[idx]);
                }
            }
            return w;
        };
        if (ia->requires_grad) {
            touch_grad(*ia, pass);
            std::vector<double> w = expand(*ib, bc == Broadcast::row_b, bc == Broadcast::scalar_b);
            scatter_bcast(*ia, g, rows, cols, bc == Broadcast::row_a, bc == Broadcast::scalar_a, w);
        }
        if (ib->requires_grad) {
            touch_grad(*ib, pass);
            std::vector<double> w = expand(*ia, bc == Broadcast::row_a, bc == Broadcast::scalar_a);
            scatter_bcast(*ib, g, rows, cols, bc == Broadcast::row_b, bc == Broadcast::scalar_b, w);
        }
    };
    return finish_op("mul", std::move(result), std::move(rule), {&a, &b});
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

// ------------------------------------------------------ elementwise unary

namespace {

template <class FwdF, class GradF>
Tensor unary_op(const char* name, const Tensor& x, FwdF fwd, GradF dfdx) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(x.value()[i]);
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    ImplPtr ix = x.impl_ptr(), io = result.impl_ptr();
    auto rule = [ix, io, dfdx](std::uint64_t pass) {
        if (!grad_live(*io, pass) || !ix->requires_grad) {
            return;
        }
        touch_grad(*ix, pass);
        for (std::size_t i = 0; i < io->grad.size(); ++i) {
            ix->grad[i] += io->grad[i] * dfdx(ix->value[i], io->value[i]);
        }
    };
    return finish_op(name, std::move(result), std::move(rule), {&x});
}

}  // namespace

Tensor neg(const Tensor& x) {
    return unary_op("neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor tanh(const Tensor& x) {
    return unary_op("tanh", x, [](double v) { return std::tanh(v); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
    return unary_op("exp", x, [](double v) { return std::exp(v); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    for (double v : x.value()) {
        if (v <= 0.0) {
            throw std::domain_error("log of non-positive input");
        }
    }
    return unary_op("log", x, [](double v) { return std::log(v); },
                    [](double v, double) { return 1.0 / v; });
}

Tensor scale(const Tensor& x, double c) {
    return unary_op("scale", x, [c](double v) { return c * v; },
                    [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
    return unary_op("add_scalar", x, [c](double v) { return v + c; },
                    [](double, double) { return 1.0; });
}

Tensor max_floor(const Tensor& x, double floor_v) {
    return unary_op("max_floor", x, [floor_v](double v) { return v > floor_v ? v : floor_v; },
                    [floor_v](double v, double) { return v > floor_v ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (lo > hi) {
        shape_error("clamp lo > hi");
    }
    return unary_op("clamp", x,
                    [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
                    [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ----------------------------------------------------------- softmax rows

Tensor softmax_rows(const Tensor& x) {
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.value().data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) {
            mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(row[j] - mx);
            z += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] /= z;
        }
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    ImplPtr ix = x.impl_ptr(), io = result.impl_ptr();
    auto rule = [ix, io, m, n](std::uint64_t pass) {
        if (!grad_live(*io, pass) || !ix->requires_grad) {
            return;
        }
        touch_grad(*ix, pass);
        // dx = y * (g - <g, y>_row)
        for (std::size_t i = 0; i < m; ++i) {
            const double* y = io->value.data() + i * n;
            const double* g = io->grad.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                dot += g[j] * y[j];
            }
            double* dx = ix->grad.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                dx[j] += y[j] * (g[j] - dot);
            }
        }
    };
    return finish_op("softmax_rows", std::move(result), std::move(rule), {&x});
}

// -------------------------------------------------------------- layernorm

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t m = x.rows(), d = x.cols();
    if (d < 2) {
        shape_error("layernorm needs at least 2 features");
    }
    if (gain.numel() != d || bias.numel() != d) {
        shape_error("layernorm gain/bias must have " + std::to_string(d) + " elements");
    }
    std::vector<double> out(m * d);
    std::vector<double> inv_std(m), xhat(m * d);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.value().data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mu += row[j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * is;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain.value()[j] + bias.value()[j];
        }
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    ImplPtr ix = x.impl_ptr(), ig = gain.impl_ptr(), ibs = bias.impl_ptr(), io = result.impl_ptr();
    auto rule = [ix, ig, ibs, io, m, d, inv_std = std::move(inv_std),
                 xhat = std::move(xhat)](std::uint64_t pass) {
        if (!grad_live(*io, pass)) {
            return;
        }
        for (std::size_t i = 0; i < m; ++i) {
            const double* g = io->grad.data() + i * d;
            const double* h = xhat.data() + i * d;
            if (ig->requires_grad) {
                touch_grad(*ig, pass);
                for (std::size_t j = 0; j < d; ++j) {
                    ig->grad[j] += g[j] * h[j];
                }
            }
            if (ibs->requires_grad) {
                touch_grad(*ibs, pass);
                for (std::size_t j = 0; j < d; ++j) {
                    ibs->grad[j] += g[j];
                }
            }
            if (ix->requires_grad) {
                touch_grad(*ix, pass);
                // dx = (gg - mean(gg) - h * mean(gg*h)) * inv_std, gg = g*gain
                double mean_gg = 0.0, mean_ggh = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double gg = g[j] * ig->value[j];
                    mean_gg += gg;
                    mean_ggh += gg * h[j];
                }
                mean_gg /= static_cast<double>(d);
                mean_ggh /= static_cast<double>(d);
                double* dx = ix->grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) {
                    const double gg = g[j] * ig->value[j];
                    dx[j] += (gg - mean_gg - h[j] * mean_ggh) * inv_std[i];
                }
            }
        }
    };
    return finish_op("layernorm", std::move(result), std::move(rule), {&x, &gain, &bias});
}

// ---------------------------------------------------------- cross entropy

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& mask) {
    const std::size_t t = logits.rows(), vocab = logits.cols();
    if (targets.size() != t || mask.size() != t) {
        shape_error("cross_entropy targets/mask length must equal logit rows");
    }
    std::size_t n_active = 0;
    for (std::size_t i = 0; i < t; ++i) {
        if (mask[i]) {
            ++n_active;
            if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
                shape_error("cross_entropy target id out of vocabulary");
            }
        }
    }
    if (n_active == 0) {
        throw ConfigError("cross_entropy: mask excludes every position");
    }
    // Stable log-softmax NLL, mean over unmasked rows.
    std::vector<double> probs(t * vocab, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        if (!mask[i]) {
            continue;
        }
        const double* row = logits.value().data() + i * vocab;
        double mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) {
            mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            const double e = std::exp(row[j] - mx);
            probs[i * vocab + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[i * vocab + j] /= z;
        }
        total += (mx + std::log(z)) - row[targets[i]];
    }
    Tensor result = Tensor::scalar(total / static_cast<double>(n_active));
    ImplPtr il = logits.impl_ptr(), io = result.impl_ptr();
    auto rule = [il, io, targets, mask, t, vocab, n_active,
                 probs = std::move(probs)](std::uint64_t pass) {
        if (!grad_live(*io, pass) || !il->requires_grad) {
            return;
        }
        touch_grad(*il, pass);
        const double g = io->grad[0] / static_cast<double>(n_active);
        for (std::size_t i = 0; i < t; ++i) {
            if (!mask[i]) {
                continue;
            }
            double* dl = il->grad.data() + i * vocab;
            const double* p = probs.data() + i * vocab;
            for (std::size_t j = 0; j < vocab; ++j) {
                dl[j] += g * p[j];
            }
            dl[targets[i]] -= g;
        }
    };
    return finish_op("cross_entropy", std::move(result), std::move(rule), {&logits});
}

// -------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.value()) {
        s += v;
    }
    Tensor result = Tensor::scalar(s);
    ImplPtr ix = x.impl_ptr(), io = result.impl_ptr();
    auto rule = [ix, io](std::uint64_t pass) {
        if (!grad_live(*io, pass) || !ix->requires_grad) {
            return;
        }
        touch_grad(*ix, pass);
        for (double& d : ix->grad) {
            d += io->grad[0];
        }
    };
    return finish_op("sum", std::move(result), std::move(rule), {&x});
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// --------------------------------------------------------- gather / slice

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    const std::size_t n = table.rows(), d = table.cols();
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) {
            shape_error("gather_rows id " + std::to_string(ids[i]) + " out of range [0," +
                        std::to_string(n) + ")");
        }
        std::copy_n(table.value().data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.data() + i * d);
    }
    Tensor result = make_tensor({ids.size(), d}, std::move(out));
    ImplPtr it = table.impl_ptr(), io = result.impl_ptr();
    auto rule = [it, io, ids, d](std::uint64_t pass) {
        if (!grad_live(*io, pass) || !it->requires_grad) {
            return;
        }
        touch_grad(*it, pass);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const double* g = io->grad.data() + i * d;
            double* dst = it->grad.data() + static_cast<std::size_t>(ids[i]) * d;
            for (std::size_t j = 0; j < d; ++j) {
                dst[j] += g[j];
            }
        }
    };
    return finish_op("gather_rows", std::move(result), std::move(rule), {&table});
}

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    const std::size_t m = x.rows(), n = x.cols();
    if (r0 > r1 || r1 > m) {
        shape_error("slice_rows range");
    }
    std::vector<double> out((r1 - r0) * n);
    std::copy_n(x.value().data() + r0 * n, out.size(), out.data());
    Tensor result = make_tensor({r1 - r0, n}, std::move(out));
    ImplPtr ix = x.impl_ptr(), io = result.impl_ptr();
    auto rule = [ix, io, r0, n](std::uint64_t pass) {
        if (!grad_live(*io, pass) || !ix->requires_grad) {
            return;
        }
        touch_grad(*ix, pass);
        for (std::size_t i = 0; i < io->grad.size(); ++i) {
            ix->grad[r0 * n + i] += io->grad[i];
        }
    };
    return finish_op("slice_rows", std::move(result), std::move(rule), {&x});
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    const std::size_t m = x.rows(), n = x.cols();
    if (c0 > c1 || c1 > n) {
        shape_error("slice_cols range");
    }
    const std::size_t w = c1 - c0;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(x.value().data() + i * n + c0, w, out.data() + i * w);
    }
    Tensor result = make_tensor({m, w}, std::move(out));
    ImplPtr ix = x.impl_ptr(), io = result.impl_ptr();
    auto rule = [ix, io, m, n, c0, w](std::uint64_t pass) {
        if (!grad_live(*io, pass) || !ix->requires_grad) {
            return;
        }
        touch_grad(*ix, pass);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                ix->grad[i * n + c0 + j] += io->grad[i * w + j];
            }
        }
    };
    return finish_op("slice_cols", std::move(result), std::move(rule), {&x});
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    const std::size_t n = a.cols();
    if (b.cols() != n) {
        shape_error("concat_rows column mismatch");
    }
    std::vector<double> out;
    out.reserve(a.numel() + b.numel());
    out.insert(out.end(), a.value().begin(), a.value().end());
    out.insert(out.end(), b.value().begin(), b.value().end());
    Tensor result = make_tensor({a.rows() + b.rows(), n}, std::move(out));
    ImplPtr ia = a.impl_ptr(), ib = b.impl_ptr(), io = result.impl_ptr();
    auto rule = [ia, ib, io](std::uint64_t pass) {
        if (!grad_live(*io, pass)) {
            return;
        }
        const std::size_t na = ia->value.size();
        if (ia->requires_grad) {
            touch_grad(*ia, pass);
            for (std::size_t i = 0; i < na; ++i) {
                ia->grad[i] += io->grad[i];
            }
        }
        if (ib->requires_grad) {
            touch_grad(*ib, pass);
            for (std::size_t i = 0; i < ib->value.size(); ++i) {
                ib->grad[i] += io->grad[na + i];
            }
        }
    };
    return finish_op("concat_rows", std::move(result), std::move(rule), {&a, &b});
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows();
    if (b.rows() != m) {
        shape_error("concat_cols row mismatch");
    }
    const std::size_t na = a.cols(), nb = b.cols();
    std::vector<double> out(m * (na + nb));
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(a.value().data() + i * na, na, out.data() + i * (na + nb));
        std::copy_n(b.value().data() + i * nb, nb, out.data() + i * (na + nb) + na);
    }
    Tensor result = make_tensor({m, na + nb}, std::move(out));
    ImplPtr ia = a.impl_ptr(), ib = b.impl_ptr(), io = result.impl_ptr();
    auto rule = [ia, ib, io, m, na, nb](std::uint64_t pass) {
        if (!grad_live(*io, pass)) {
            return;
        }
        for (std::size_t i = 0; i < m; ++i) {
            const double* g = io->grad.data() + i * (na + nb);
            if (ia->requires_grad) {
                touch_grad(*ia, pass);
                for (std::size_t j = 0; j < na; ++j) {
                    ia->grad[i * na + j] += g[j];
                }
            }
            if (ib->requires_grad) {
                touch_grad(*ib, pass);
                for (std::size_t j = 0; j < nb; ++j) {
                    ib->grad[i * nb + j] += g[na + j];
                }
            }
        }
    };
    return finish_op("concat_cols", std::move(result), std::move(rule), {&a, &b});
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.numel()) {
        shape_error("reshape to " + shape_str(shape) + " from " + shape_str(x.shape()));
    }
    Tensor result = make_tensor(shape, x.value());
    ImplPtr ix = x.impl_ptr(), io = result.impl_ptr();
    auto rule = [ix, io](std::uint64_t pass) {
        if (!grad_live(*io, pass) || !ix->requires_grad) {
            return;
        }
        touch_grad(*ix, pass);
        for (std::size_t i = 0; i < io->grad.size(); ++i) {
            ix->grad[i] += io->grad[i];
        }
    };
    return finish_op("reshape", std::move(result), std::move(rule), {&x});
}

}  // namespace lf
