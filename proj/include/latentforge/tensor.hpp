#ifndef LATENTFORGE_TENSOR_HPP
#define LATENTFORGE_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "latentforge/rng.hpp"

namespace lf {

// Shape/config violations. The CLI maps these to exit code 2.
struct ConfigError : std::invalid_argument {
    explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

using Shape = std::vector<std::size_t>;

struct TensorImpl {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated on first backward touch, never for frozen tensors
    bool requires_grad = false;
    bool produced_by_op = false;  // true for tape intermediates; their grads reset per pass
    std::uint64_t grad_pass = 0;
};

// Dense f64 tensor, row-major. Cheap handle: copies alias the same buffer.
// Rank 1 is treated as a single row, rank 2 as [rows, cols], a scalar is {1}.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double v);
    static Tensor scalar(double v);
    static Tensor from(std::vector<double> data, const Shape& shape);
    static Tensor randn(const Shape& shape, Rng& rng, double stddev);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->value.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double at(std::size_t i) const { return impl_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->value[r * cols() + c]; }
    double item() const;  // scalar value; throws unless numel()==1

    const std::vector<double>& value() const { return impl_->value; }
    // Direct mutation; valid on leaves between tape passes (optimizer steps,
    // finite-difference probes). Mutating a recorded intermediate invalidates the tape.
    std::vector<double>& mutable_value() { return impl_->value; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    const std::vector<double>& grad() const { return impl_->grad; }
    void zero_grad() {
        if (impl_) {
            impl_->grad.assign(impl_->grad.empty() ? 0 : impl_->value.size(), 0.0);
        }
    }

    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

    // Deep copy of values (fresh buffer, no grad, not on any tape).
    Tensor clone() const;

private:
    std::shared_ptr<TensorImpl> impl_;
    friend Tensor make_tensor(Shape shape, std::vector<double> value);
};

Tensor make_tensor(Shape shape, std::vector<double> value);

// Reverse-mode tape. Construction pushes it as the active tape for this
// thread; destruction pops. Ops record a backward rule when any input
// requires grad and a tape is active. Rules run in exact reverse order.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() noexcept;

    void record(std::function<void(std::uint64_t)> rule) { ops_.push_back(std::move(rule)); }
    std::size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss)=1 and replays the tape backwards. Leaf gradients
    // accumulate across calls; intermediate gradients are reset each pass.
    void backward(const Tensor& loss);

private:
    std::vector<std::function<void(std::uint64_t)>> ops_;
    Tape* prev_ = nullptr;
};

// ---------------------------------------------------------------------------
// Ops. Each op validates shapes, checks the result for NaN/Inf, and records
// its backward rule on the active tape.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);      // [m,k] x [k,n] -> [m,n]
Tensor transpose(const Tensor& a);                    // [m,n] -> [n,m]

// Elementwise; add/mul accept equal shapes, a row [1,n] against [m,n], or a
// scalar against anything. Other broadcasts are shape errors.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);                          // domain error on x <= 0
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor max_floor(const Tensor& x, double floor_v);    // elementwise max(x, floor_v)
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor softmax_rows(const Tensor& x);                 // stabilized by row-max subtraction
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Mean NLL over positions where mask != 0. targets/mask length == logits rows.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<std::uint8_t>& mask);

Tensor sum(const Tensor& x);                          // scalar
Tensor mean(const Tensor& x);                         // scalar

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor reshape(const Tensor& x, const Shape& shape);

}  // namespace lf

#endif
