// Dense double-precision tensors with reverse-mode automatic differentiation
// on a define-by-run tape. Shapes are rank 0 (scalar), 1 (vector) or
// 2 (matrix), which covers everything the sequence models need. Broadcasting
// is deliberately narrow: same shape, scalar against anything, or a vector
// expanded across the rows of a matrix.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace deconf {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel(shape) != data.size())
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(data.size()) + " elements");
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }
    static Tensor zeros(const Shape& s) { return Tensor(s, std::vector<double>(numel(s), 0.0)); }
    static Tensor full(const Shape& s, double v) { return Tensor(s, std::vector<double>(numel(s), v)); }
    static Tensor vector(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return shape.empty(); }

    double item() const {
        if (data.size() != 1)
            throw std::logic_error("Tensor::item on non-scalar of shape " + shape_str(shape));
        return data[0];
    }

    // Matrix element access; row-major.
    double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    bool finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

class Tape;

// Lightweight handle to a node on a tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    const Shape& shape() const { return value().shape; }
    int id() const { return id_; }
    Tape* tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

using GradientMap = std::unordered_map<int, Tensor>;

class Tape {
public:
    // BackwardFn accumulates d(output)/d(parent) * grad_out into the parents'
    // gradient buffers. `grads` is indexed by node id.
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, std::vector<Tensor>& grads)>;

    Var leaf(Tensor t) {
        Node n;
        n.value = std::move(t);
        n.needs_grad = n.value.requires_grad;
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    Var constant(Tensor t) {
        t.requires_grad = false;
        return leaf(std::move(t));
    }

    Var record(Tensor value, std::vector<int> parents, BackwardFn backward) {
        bool needs = false;
        for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].needs_grad;
        value.requires_grad = false;
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs;
        if (needs) {
            n.parents = std::move(parents);
            n.backward = std::move(backward);
        }
        nodes_.push_back(std::move(n));
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Reverse sweep from a scalar output. Returns gradients for every leaf
    // with requires_grad set; other nodes get no entry.
    GradientMap backward(const Var& output) {
        if (output.tape() != this) throw std::logic_error("backward: output from a different tape");
        if (nodes_.empty()) throw std::logic_error("backward: empty tape");
        const Node& out = nodes_[static_cast<std::size_t>(output.id())];
        if (!out.value.is_scalar())
            throw std::invalid_argument("backward: output must be scalar, got shape " +
                                        shape_str(out.value.shape));

        std::vector<Tensor> grads(nodes_.size());
        if (out.needs_grad) {
            grads[static_cast<std::size_t>(output.id())] = Tensor::scalar(1.0);
            for (int id = output.id(); id >= 0; --id) {
                Node& n = nodes_[static_cast<std::size_t>(id)];
                if (!n.needs_grad || grads[static_cast<std::size_t>(id)].data.empty()) continue;
                if (n.backward) n.backward(*this, grads[static_cast<std::size_t>(id)], grads);
            }
        }

        GradientMap result;
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            const Node& n = nodes_[id];
            if (n.value.requires_grad && !n.backward) {
                if (grads[id].data.empty()) grads[id] = Tensor::zeros(n.value.shape);
                result.emplace(static_cast<int>(id), std::move(grads[id]));
            }
        }
        return result;
    }

    // Gradient accumulation helper for backward closures.
    static void accumulate(std::vector<Tensor>& grads, int id, const Shape& shape,
                           const std::function<void(std::vector<double>&)>& add) {
        Tensor& g = grads[static_cast<std::size_t>(id)];
        if (g.data.empty()) g = Tensor::zeros(shape);
        add(g.data);
    }

private:
    struct Node {
        Tensor value;
        bool needs_grad = false;
        std::vector<int> parents;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                                " and " + shape_str(b));
}

inline void check_same_tape(const char* op, const Var& a, const Var& b) {
    if (a.tape() != b.tape()) throw std::logic_error(std::string(op) + ": operands on different tapes");
}

// How one operand of an elementwise binary op maps onto the output.
enum class Bcast { same, scalar, row_vector };

inline Bcast bcast_mode(const char* op, const Shape& out, const Shape& in, const Shape& other) {
    if (in == out) return Bcast::same;
    if (in.empty()) return Bcast::scalar;
    if (out.size() == 2 && in.size() == 1 && in[0] == out[1]) return Bcast::row_vector;
    shape_error(op, in, other);
}

// Result shape of broadcasting two operands, or error.
inline Shape bcast_shape(const char* op, const Shape& a, const Shape& b) {
    if (a == b) return a;
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return a;
    if (b.size() == 2 && a.size() == 1 && a[0] == b[1]) return b;
    shape_error(op, a, b);
}

inline double bcast_read(const std::vector<double>& d, Bcast mode, std::size_t flat, std::size_t cols) {
    switch (mode) {
        case Bcast::same: return d[flat];
        case Bcast::scalar: return d[0];
        case Bcast::row_vector: return d[flat % cols];
    }
    return 0.0;  // unreachable
}

inline void bcast_accumulate(std::vector<double>& dst, Bcast mode, std::size_t flat, std::size_t cols,
                             double v) {
    switch (mode) {
        case Bcast::same: dst[flat] += v; break;
        case Bcast::scalar: dst[0] += v; break;
        case Bcast::row_vector: dst[flat % cols] += v; break;
    }
}

template <class FwdFn, class GradAFn, class GradBFn>
Var binary_elementwise(const char* op, const Var& a, const Var& b, FwdFn f, GradAFn dfa, GradBFn dfb) {
    check_same_tape(op, a, b);
    Tape& tape = *a.tape();
    const Tensor& ta = a.value();
    const Tensor& tb = b.value();
    Shape out_shape = bcast_shape(op, ta.shape, tb.shape);
    const Bcast ma = bcast_mode(op, out_shape, ta.shape, tb.shape);
    const Bcast mb = bcast_mode(op, out_shape, tb.shape, ta.shape);
    const std::size_t cols = out_shape.size() == 2 ? out_shape[1] : (out_shape.empty() ? 1 : out_shape[0]);

    Tensor out = Tensor::zeros(out_shape);
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i)
        out.data[i] = f(bcast_read(ta.data, ma, i, cols), bcast_read(tb.data, mb, i, cols));

    const int ia = a.id();
    const int ib = b.id();
    return tape.record(std::move(out), {ia, ib},
                       [=](Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                           const Tensor& va = t.value(ia);
                           const Tensor& vb = t.value(ib);
                           if (t.needs_grad(ia)) {
                               Tape::accumulate(grads, ia, va.shape, [&](std::vector<double>& dst) {
                                   for (std::size_t i = 0; i < g.data.size(); ++i) {
                                       const double xa = bcast_read(va.data, ma, i, cols);
                                       const double xb = bcast_read(vb.data, mb, i, cols);
                                       bcast_accumulate(dst, ma, i, cols, g.data[i] * dfa(xa, xb));
                                   }
                               });
                           }
                           if (t.needs_grad(ib)) {
                               Tape::accumulate(grads, ib, vb.shape, [&](std::vector<double>& dst) {
                                   for (std::size_t i = 0; i < g.data.size(); ++i) {
                                       const double xa = bcast_read(va.data, ma, i, cols);
                                       const double xb = bcast_read(vb.data, mb, i, cols);
                                       bcast_accumulate(dst, mb, i, cols, g.data[i] * dfb(xa, xb));
                                   }
                               });
                           }
                       });
}

template <class FwdFn, class GradFn>
Var unary_elementwise(const Var& a, FwdFn f, GradFn df) {
    Tape& tape = *a.tape();
    const Tensor& ta = a.value();
    Tensor out = Tensor::zeros(ta.shape);
    for (std::size_t i = 0; i < ta.size(); ++i) out.data[i] = f(ta.data[i]);

    const int ia = a.id();
    const int iy = static_cast<int>(tape.size());  // id the new node will get
    return tape.record(std::move(out), {ia}, [=](Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
        const Tensor& x = t.value(ia);
        const Tensor& y = t.value(iy);
        Tape::accumulate(grads, ia, x.shape, [&](std::vector<double>& dst) {
            for (std::size_t i = 0; i < g.data.size(); ++i) dst[i] += g.data[i] * df(x.data[i], y.data[i]);
        });
    });
}

}  // namespace detail

// ---- arithmetic primitives ----

inline Var add(const Var& a, const Var& b) {
    return detail::binary_elementwise(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary_elementwise(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary_elementwise(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
    return detail::binary_elementwise(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Var neg(const Var& a) {
    return detail::unary_elementwise(a, [](double x) { return -x; },
                                     [](double, double) { return -1.0; });
}

// Multiply by a plain constant.
inline Var scale(const Var& a, double c) {
    return detail::unary_elementwise(a, [c](double x) { return c * x; },
                                     [c](double, double) { return c; });
}

inline Var add_const(const Var& a, double c) {
    return detail::unary_elementwise(a, [c](double x) { return x + c; },
                                     [](double, double) { return 1.0; });
}

// ---- nonlinearities ----

inline Var tanh(const Var& a) {
    return detail::unary_elementwise(a, [](double x) { return std::tanh(x); },
                                     [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& a) {
    return detail::unary_elementwise(
        a,
        [](double x) {
            // Stable for large |x|.
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& a) {
    return detail::unary_elementwise(
        a,
        [](double x) {
            // log(1 + e^x) without overflow.
            if (x > 0.0) return x + std::log1p(std::exp(-x));
            return std::log1p(std::exp(x));
        },
        [](double x, double) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        });
}

inline Var exp(const Var& a) {
    return detail::unary_elementwise(a, [](double x) { return std::exp(x); },
                                     [](double, double y) { return y; });
}

inline Var log(const Var& a) {
    return detail::unary_elementwise(a, [](double x) { return std::log(x); },
                                     [](double x, double) { return 1.0 / x; });
}

// ---- reductions ----

inline Var sum(const Var& a) {
    Tape& tape = *a.tape();
    const Tensor& ta = a.value();
    double s = 0.0;
    for (double v : ta.data) s += v;
    const int ia = a.id();
    return tape.record(Tensor::scalar(s), {ia}, [=](Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
        const double gv = g.data[0];
        Tape::accumulate(grads, ia, t.value(ia).shape, [&](std::vector<double>& dst) {
            for (double& d : dst) d += gv;
        });
    });
}

inline Var mean(const Var& a) {
    Tape& tape = *a.tape();
    const Tensor& ta = a.value();
    if (ta.size() == 0) throw std::invalid_argument("mean: empty tensor");
    double s = 0.0;
    for (double v : ta.data) s += v;
    const double inv_n = 1.0 / static_cast<double>(ta.size());
    const int ia = a.id();
    return tape.record(Tensor::scalar(s * inv_n), {ia},
                       [=](Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                           const double gv = g.data[0] * inv_n;
                           Tape::accumulate(grads, ia, t.value(ia).shape, [&](std::vector<double>& dst) {
                               for (double& d : dst) d += gv;
                           });
                       });
}

// ---- structure ----

// Concatenate vectors (rank 1) into one vector, in argument order.
inline Var concat(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    Tape& tape = *parts[0].tape();
    std::size_t total = 0;
    std::vector<int> ids;
    std::vector<std::size_t> sizes;
    ids.reserve(parts.size());
    for (const Var& p : parts) {
        detail::check_same_tape("concat", parts[0], p);
        const Tensor& tp = p.value();
        if (tp.rank() != 1)
            throw std::invalid_argument("concat: expected vectors, got shape " + shape_str(tp.shape));
        total += tp.size();
        ids.push_back(p.id());
        sizes.push_back(tp.size());
    }
    Tensor out = Tensor::zeros({total});
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& tp = p.value();
        for (std::size_t i = 0; i < tp.size(); ++i) out.data[off + i] = tp.data[i];
        off += tp.size();
    }
    return tape.record(std::move(out), ids, [=](Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
        std::size_t o = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t sz = sizes[k];
            if (t.needs_grad(ids[k])) {
                Tape::accumulate(grads, ids[k], {sz}, [&](std::vector<double>& dst) {
                    for (std::size_t i = 0; i < sz; ++i) dst[i] += g.data[o + i];
                });
            }
            o += sz;
        }
    });
}

inline Var concat(std::initializer_list<Var> parts) { return concat(std::vector<Var>(parts)); }

// Slice along the first axis: rows [start, start+len) of a matrix, or
// elements [start, start+len) of a vector.
inline Var slice(const Var& a, std::size_t start, std::size_t len) {
    Tape& tape = *a.tape();
    const Tensor& ta = a.value();
    if (ta.rank() == 0) throw std::invalid_argument("slice: scalar input");
    const std::size_t axis0 = ta.shape[0];
    if (start + len > axis0)
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") exceeds axis of size " +
                                    std::to_string(axis0));
    const std::size_t stride = ta.size() / axis0;
    Shape out_shape = ta.shape;
    out_shape[0] = len;
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t i = 0; i < len * stride; ++i) out.data[i] = ta.data[start * stride + i];
    const int ia = a.id();
    return tape.record(std::move(out), {ia}, [=](Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
        Tape::accumulate(grads, ia, t.value(ia).shape, [&](std::vector<double>& dst) {
            for (std::size_t i = 0; i < g.data.size(); ++i) dst[start * stride + i] += g.data[i];
        });
    });
}

// ---- matrix multiplication ----
// (m,k)x(k,n) -> (m,n); (m,k)x(k,) -> (m,); (k,)x(k,n) -> (n,)

inline Var matmul(const Var& a, const Var& b) {
    detail::check_same_tape("matmul", a, b);
    Tape& tape = *a.tape();
    const Tensor& ta = a.value();
    const Tensor& tb = b.value();

    std::size_t m, k, n;
    bool a_vec = false, b_vec = false;
    if (ta.rank() == 2 && tb.rank() == 2) {
        m = ta.shape[0]; k = ta.shape[1]; n = tb.shape[1];
        if (tb.shape[0] != k) detail::shape_error("matmul", ta.shape, tb.shape);
    } else if (ta.rank() == 2 && tb.rank() == 1) {
        m = ta.shape[0]; k = ta.shape[1]; n = 1; b_vec = true;
        if (tb.shape[0] != k) detail::shape_error("matmul", ta.shape, tb.shape);
    } else if (ta.rank() == 1 && tb.rank() == 2) {
        m = 1; k = ta.shape[0]; n = tb.shape[1]; a_vec = true;
        if (tb.shape[0] != k) detail::shape_error("matmul", ta.shape, tb.shape);
    } else {
        detail::shape_error("matmul", ta.shape, tb.shape);
    }

    Shape out_shape;
    if (a_vec && !b_vec) out_shape = {n};
    else if (b_vec && !a_vec) out_shape = {m};
    else out_shape = {m, n};

    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += ta.data[i * k + t] * tb.data[t * n + j];
            out.data[i * n + j] = s;
        }

    const int ia = a.id();
    const int ib = b.id();
    return tape.record(std::move(out), {ia, ib},
                       [=](Tape& t, const Tensor& g, std::vector<Tensor>& grads) {
                           const Tensor& va = t.value(ia);
                           const Tensor& vb = t.value(ib);
                           // dA = g . B^T ; dB = A^T . g, with g reshaped to (m,n).
                           if (t.needs_grad(ia)) {
                               Tape::accumulate(grads, ia, va.shape, [&](std::vector<double>& dst) {
                                   for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t tt = 0; tt < k; ++tt) {
                                           double s = 0.0;
                                           for (std::size_t j = 0; j < n; ++j)
                                               s += g.data[i * n + j] * vb.data[tt * n + j];
                                           dst[i * k + tt] += s;
                                       }
                               });
                           }
                           if (t.needs_grad(ib)) {
                               Tape::accumulate(grads, ib, vb.shape, [&](std::vector<double>& dst) {
                                   for (std::size_t tt = 0; tt < k; ++tt)
                                       for (std::size_t j = 0; j < n; ++j) {
                                           double s = 0.0;
                                           for (std::size_t i = 0; i < m; ++i)
                                               s += va.data[i * k + tt] * g.data[i * n + j];
                                           dst[tt * n + j] += s;
                                       }
                               });
                           }
                       });
}

// ---- gradient checking ----

// Loss builder: given a tape and leaf handles for the parameters, construct a
// scalar loss. Must be deterministic for fixed parameter values.
using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

namespace detail {

inline double eval_loss(const LossFn& fn, const std::vector<Tensor>& params) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) {
        Tensor t = p;
        t.requires_grad = false;
        vars.push_back(tape.leaf(std::move(t)));
    }
    const double v = fn(tape, vars).value().item();
    if (!std::isfinite(v)) throw std::runtime_error("check_gradient: non-finite loss");
    return v;
}

}  // namespace detail

// Max over all parameter elements of |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
// numeric by central differences with the given step.
inline double check_gradient(const LossFn& fn, std::vector<Tensor> params, double step) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (Tensor& p : params) {
        Tensor t = p;
        t.requires_grad = true;
        vars.push_back(tape.leaf(std::move(t)));
    }
    Var loss = fn(tape, vars);
    if (!std::isfinite(loss.value().item())) throw std::runtime_error("check_gradient: non-finite loss");
    GradientMap grads = tape.backward(loss);

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const Tensor& analytic = grads.at(vars[pi].id());
        for (std::size_t i = 0; i < params[pi].size(); ++i) {
            const double saved = params[pi].data[i];
            params[pi].data[i] = saved + step;
            const double up = detail::eval_loss(fn, params);
            params[pi].data[i] = saved - step;
            const double down = detail::eval_loss(fn, params);
            params[pi].data[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic.data[i];
            const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace deconf
