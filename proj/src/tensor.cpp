#include "mstkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace mstkd {

namespace {

thread_local bool g_grad_enabled = true;

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw numeric_error(std::string(op) + ": produced a non-finite value");
        }
    }
}

bool wants_tape(const std::vector<Tensor>& parents) {
    if (!g_grad_enabled) return false;
    for (const auto& p : parents) {
        if (p.requires_grad()) return true;
    }
    return false;
}

Tensor make_result(const Shape& shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> parents, std::function<void(const Tensor&)> backward_fn) {
    check_finite(data, op);
    Tensor out = Tensor::from_data(shape, std::move(data));
    if (wants_tape(parents)) {
        out.set_requires_grad(true);
        auto node = std::make_shared<TensorNode>();
        node->parents = std::move(parents);
        node->backward = std::move(backward_fn);
        node->op = op;
        out.set_node(std::move(node));
    }
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
}

void require_axis(const Tensor& t, int axis, const char* op) {
    if (axis < 0 || axis >= t.rank()) {
        throw value_error(std::string(op) + ": axis " + std::to_string(axis) +
                          " out of range for rank " + std::to_string(t.rank()));
    }
}

// Decompose a tensor into (outer, count, inner) around `axis` so that the
// elements of one slice sit at base + t*inner.
struct AxisView {
    std::int64_t outer = 1;
    std::int64_t count = 1;
    std::int64_t inner = 1;
};

AxisView axis_view(const Shape& shape, int axis) {
    AxisView v;
    for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<std::size_t>(i)];
    v.count = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
        v.inner *= shape[i];
    }
    return v;
}

// Accumulate helper: adds src into the grad buffer of t (if it wants one).
void acc_grad(const Tensor& t, const std::vector<double>& src) {
    if (!t.requires_grad()) return;
    const_cast<Tensor&>(t).accumulate_grad(src);
}

std::vector<double>* grad_buffer(const Tensor& t) {
    if (!t.requires_grad()) return nullptr;
    return &const_cast<Tensor&>(t).grad();
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) {
        if (e <= 0) throw value_error("shape extents must be positive, got " + shape_str(s));
        n *= e;
    }
    return n;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return from_data(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), 0.0),
                     requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    return from_data(shape, std::vector<double>(static_cast<std::size_t>(shape_numel(shape)), v),
                     requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
    const auto n = shape_numel(shape);
    if (static_cast<std::int64_t>(data.size()) != n) {
        throw shape_error("from_data: " + std::to_string(data.size()) + " values for shape " +
                          shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::uniform(const Shape& shape, double bound, Rng& rng, bool requires_grad) {
    const auto n = shape_numel(shape);
    std::vector<double> d(static_cast<std::size_t>(n));
    for (auto& x : d) x = rng.uniform(-bound, bound);
    return from_data(shape, std::move(d), requires_grad);
}

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) throw value_error("grad accessed before backward");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
    if (g.size() != impl_->data.size()) {
        throw shape_error("accumulate_grad: grad size mismatch");
    }
    auto& dst = grad();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

double Tensor::item() const {
    if (numel() != 1) throw value_error("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
}

Tensor Tensor::detach() const { return from_data(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const { return from_data(impl_->shape, impl_->data, impl_->requires_grad); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw value_error("backward: loss must be a defined scalar");
    }
    // Iterative DFS topological order over the tape.
    std::vector<Tensor> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        Tensor t;
        std::size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({loss, 0});
    visited.insert(loss.impl());
    while (!stack.empty()) {
        Frame& f = stack.back();
        const auto& node = f.t.node();
        if (node && f.next < node->parents.size()) {
            Tensor p = node->parents[f.next++];
            if (!visited.count(p.impl())) {
                visited.insert(p.impl());
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.t);
            stack.pop_back();
        }
    }
    // Interior grads are scratch for this sweep; leaf grads accumulate across sweeps.
    for (auto& t : order) {
        if (t.node()) t.zero_grad();
    }
    const_cast<Tensor&>(loss).grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const auto& node = it->node();
        if (node && it->requires_grad()) node->backward(*it);
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elemwise(const Tensor& a, const Tensor& b, const char* op, Fwd f, Bwd df) {
    require_same_shape(a, b, op);
    const auto n = a.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = f(a.value_at(i), b.value_at(i));
    return make_result(a.shape(), std::move(out), op, {a, b}, [df](const Tensor& o) {
        const auto& ps = o.node()->parents;
        const auto& g = o.grad();
        const Tensor& pa = ps[0];
        const Tensor& pb = ps[1];
        auto* ga = grad_buffer(pa);
        auto* gb = grad_buffer(pb);
        const auto n2 = o.numel();
        for (std::int64_t i = 0; i < n2; ++i) {
            const auto [da, db] = df(pa.value_at(i), pb.value_at(i));
            const double gi = g[static_cast<std::size_t>(i)];
            if (ga) (*ga)[static_cast<std::size_t>(i)] += gi * da;
            if (gb) (*gb)[static_cast<std::size_t>(i)] += gi * db;
        }
    });
}

template <typename Fwd, typename Bwd>
Tensor unary_elemwise(const Tensor& a, const char* op, Fwd f, Bwd df) {
    const auto n = a.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = f(a.value_at(i));
    return make_result(a.shape(), std::move(out), op, {a}, [df](const Tensor& o) {
        const Tensor& pa = o.node()->parents[0];
        auto* ga = grad_buffer(pa);
        if (!ga) return;
        const auto& g = o.grad();
        const auto n2 = o.numel();
        for (std::int64_t i = 0; i < n2; ++i) {
            (*ga)[static_cast<std::size_t>(i)] +=
                g[static_cast<std::size_t>(i)] * df(pa.value_at(i), o.value_at(i));
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double x, double y) { return std::pair<double, double>{y, x}; });
}

Tensor elem_div(const Tensor& a, const Tensor& b) {
    return binary_elemwise(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double x, double y) { return std::pair<double, double>{1.0 / y, -x / (y * y)}; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_elemwise(
        a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
    return unary_elemwise(
        a, "mul_scalar", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor exp(const Tensor& a) {
    return unary_elemwise(
        a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_elemwise(
        a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
    return unary_elemwise(
        a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_elemwise(
        a, "sigmoid",
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
    return unary_elemwise(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary_elemwise(
        a, "leaky_relu", [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor silu(const Tensor& a) {
    return unary_elemwise(
        a, "silu",
        [](double x) {
            const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            return x * s;
        },
        [](double x, double) {
            const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo < hi)) throw value_error("clamp: lo must be < hi");
    return unary_elemwise(
        a, "clamp", [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel()) {
        throw shape_error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return make_result(shape, a.data(), "reshape", {a}, [](const Tensor& o) {
        acc_grad(o.node()->parents[0], o.grad());
    });
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
    const int r = a.rank();
    if (static_cast<int>(axes.size()) != r) throw value_error("permute: axes size != rank");
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= r || seen[static_cast<std::size_t>(ax)]) {
            throw value_error("permute: invalid axis list");
        }
        seen[static_cast<std::size_t>(ax)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = a.extent(axes[static_cast<std::size_t>(i)]);

    // in_stride[j] = stride of input axis j; walk output indices in row-major order.
    std::vector<std::int64_t> in_stride(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) {
        in_stride[static_cast<std::size_t>(i)] =
            in_stride[static_cast<std::size_t>(i + 1)] * a.extent(i + 1);
    }
    std::vector<std::int64_t> step(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) step[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

    const auto n = a.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t src = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        out[static_cast<std::size_t>(flat)] = a.value_at(src);
        for (int d = r - 1; d >= 0; --d) {
            auto ud = static_cast<std::size_t>(d);
            idx[ud]++;
            src += step[ud];
            if (idx[ud] < out_shape[ud]) break;
            src -= step[ud] * out_shape[ud];
            idx[ud] = 0;
        }
    }
    return make_result(out_shape, std::move(out), "permute", {a},
                       [axes, out_shape, step, r](const Tensor& o) {
                           const Tensor& pa = o.node()->parents[0];
                           auto* ga = grad_buffer(pa);
                           if (!ga) return;
                           const auto& g = o.grad();
                           std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
                           std::int64_t src = 0;
                           const auto n2 = o.numel();
                           for (std::int64_t flat = 0; flat < n2; ++flat) {
                               (*ga)[static_cast<std::size_t>(src)] += g[static_cast<std::size_t>(flat)];
                               for (int d = r - 1; d >= 0; --d) {
                                   auto ud = static_cast<std::size_t>(d);
                                   idx[ud]++;
                                   src += step[ud];
                                   if (idx[ud] < out_shape[ud]) break;
                                   src -= step[ud] * out_shape[ud];
                                   idx[ud] = 0;
                               }
                           }
                       });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw shape_error("transpose: expected rank-2, got " + shape_str(a.shape()));
    return permute(a, {1, 0});
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw value_error("concat: no inputs");
    const Tensor& first = parts[0];
    require_axis(first, axis, "concat");
    Shape out_shape = first.shape();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != first.rank()) throw shape_error("concat: rank mismatch");
        for (int d = 0; d < first.rank(); ++d) {
            if (d != axis && p.extent(d) != first.extent(d)) {
                throw shape_error("concat: extent mismatch at axis " + std::to_string(d) + ": " +
                                  shape_str(p.shape()) + " vs " + shape_str(first.shape()));
            }
        }
        total += p.extent(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total;

    const auto view = axis_view(out_shape, axis);
    std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<std::int64_t> counts;
    counts.reserve(parts.size());
    for (const auto& p : parts) counts.push_back(p.extent(axis));

    std::int64_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& src = parts[pi].data();
        const std::int64_t c = counts[pi];
        for (std::int64_t o = 0; o < view.outer; ++o) {
            const double* s = src.data() + o * c * view.inner;
            double* d = out.data() + (o * total + offset) * view.inner;
            std::memcpy(d, s, static_cast<std::size_t>(c * view.inner) * sizeof(double));
        }
        offset += c;
    }
    return make_result(out_shape, std::move(out), "concat", parts,
                       [view, counts, total](const Tensor& o) {
                           const auto& g = o.grad();
                           std::int64_t offset2 = 0;
                           for (std::size_t pi = 0; pi < o.node()->parents.size(); ++pi) {
                               const Tensor& p = o.node()->parents[pi];
                               const std::int64_t c = counts[pi];
                               if (auto* gp = grad_buffer(p)) {
                                   for (std::int64_t ou = 0; ou < view.outer; ++ou) {
                                       const double* s = g.data() + (ou * total + offset2) * view.inner;
                                       double* d = gp->data() + ou * c * view.inner;
                                       for (std::int64_t i = 0; i < c * view.inner; ++i) d[i] += s[i];
                                   }
                               }
                               offset2 += c;
                           }
                       });
}

// ---------------------------------------------------------------------------
// linear algebra and reductions
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw shape_error("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    }
    const std::int64_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2) {
        throw shape_error("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    const auto& A = a.data();
    const auto& B = b.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double aik = A[static_cast<std::size_t>(i * k + kk)];
            const double* brow = B.data() + kk * n;
            double* orow = out.data() + i * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](const Tensor& o) {
        const Tensor& pa = o.node()->parents[0];
        const Tensor& pb = o.node()->parents[1];
        const auto& g = o.grad();
        if (auto* ga = grad_buffer(pa)) {
            const auto& B = pb.data();
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const double* brow = B.data() + kk * n;
                    const double* grow = g.data() + i * n;
                    double s = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                    (*ga)[static_cast<std::size_t>(i * k + kk)] += s;
                }
            }
        }
        if (auto* gb = grad_buffer(pb)) {
            const auto& A = pa.data();
            for (std::int64_t kk = 0; kk < k; ++kk) {
                for (std::int64_t i = 0; i < m; ++i) {
                    const double aik = A[static_cast<std::size_t>(i * k + kk)];
                    const double* grow = g.data() + i * n;
                    double* gbrow = gb->data() + kk * n;
                    for (std::int64_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                }
            }
        }
    });
}

Tensor softmax(const Tensor& a, int axis) {
    require_axis(a, axis, "softmax");
    const auto v = axis_view(a.shape(), axis);
    std::vector<double> out(static_cast<std::size_t>(a.numel()));
    const auto& x = a.data();
    for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t in = 0; in < v.inner; ++in) {
            const std::int64_t base = o * v.count * v.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t t = 0; t < v.count; ++t) mx = std::max(mx, x[static_cast<std::size_t>(base + t * v.inner)]);
            double z = 0.0;
            for (std::int64_t t = 0; t < v.count; ++t) {
                const double e = std::exp(x[static_cast<std::size_t>(base + t * v.inner)] - mx);
                out[static_cast<std::size_t>(base + t * v.inner)] = e;
                z += e;
            }
            for (std::int64_t t = 0; t < v.count; ++t) out[static_cast<std::size_t>(base + t * v.inner)] /= z;
        }
    }
    return make_result(a.shape(), std::move(out), "softmax", {a}, [v](const Tensor& o) {
        const Tensor& pa = o.node()->parents[0];
        auto* ga = grad_buffer(pa);
        if (!ga) return;
        const auto& g = o.grad();
        const auto& s = o.data();
        for (std::int64_t ou = 0; ou < v.outer; ++ou) {
            for (std::int64_t in = 0; in < v.inner; ++in) {
                const std::int64_t base = ou * v.count * v.inner + in;
                double dot = 0.0;
                for (std::int64_t t = 0; t < v.count; ++t) {
                    const auto i = static_cast<std::size_t>(base + t * v.inner);
                    dot += g[i] * s[i];
                }
                for (std::int64_t t = 0; t < v.count; ++t) {
                    const auto i = static_cast<std::size_t>(base + t * v.inner);
                    (*ga)[i] += s[i] * (g[i] - dot);
                }
            }
        }
    });
}

Tensor log_softmax(const Tensor& a, int axis) {
    require_axis(a, axis, "log_softmax");
    const auto v = axis_view(a.shape(), axis);
    std::vector<double> out(static_cast<std::size_t>(a.numel()));
    const auto& x = a.data();
    for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t in = 0; in < v.inner; ++in) {
            const std::int64_t base = o * v.count * v.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t t = 0; t < v.count; ++t) mx = std::max(mx, x[static_cast<std::size_t>(base + t * v.inner)]);
            double z = 0.0;
            for (std::int64_t t = 0; t < v.count; ++t) z += std::exp(x[static_cast<std::size_t>(base + t * v.inner)] - mx);
            const double lz = mx + std::log(z);
            for (std::int64_t t = 0; t < v.count; ++t) {
                const auto i = static_cast<std::size_t>(base + t * v.inner);
                out[i] = x[i] - lz;
            }
        }
    }
    return make_result(a.shape(), std::move(out), "log_softmax", {a}, [v](const Tensor& o) {
        const Tensor& pa = o.node()->parents[0];
        auto* ga = grad_buffer(pa);
        if (!ga) return;
        const auto& g = o.grad();
        const auto& y = o.data();
        for (std::int64_t ou = 0; ou < v.outer; ++ou) {
            for (std::int64_t in = 0; in < v.inner; ++in) {
                const std::int64_t base = ou * v.count * v.inner + in;
                double gsum = 0.0;
                for (std::int64_t t = 0; t < v.count; ++t) gsum += g[static_cast<std::size_t>(base + t * v.inner)];
                for (std::int64_t t = 0; t < v.count; ++t) {
                    const auto i = static_cast<std::size_t>(base + t * v.inner);
                    (*ga)[i] += g[i] - std::exp(y[i]) * gsum;
                }
            }
        }
    });
}

Tensor reduce(const Tensor& a, int axis, AxisReduceMode mode) {
    require_axis(a, axis, "reduce");
    const auto v = axis_view(a.shape(), axis);
    Shape out_shape;
    for (int d = 0; d < a.rank(); ++d) {
        if (d != axis) out_shape.push_back(a.extent(d));
    }
    if (out_shape.empty()) out_shape = {1};

    const auto& x = a.data();
    std::vector<double> out(static_cast<std::size_t>(v.outer * v.inner));
    std::vector<std::int64_t> arg;  // winning index along the axis, for max/min routing
    if (mode != AxisReduceMode::kMean) arg.assign(static_cast<std::size_t>(v.outer * v.inner), 0);

    for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t in = 0; in < v.inner; ++in) {
            const std::int64_t base = o * v.count * v.inner + in;
            const std::int64_t oi = o * v.inner + in;
            if (mode == AxisReduceMode::kMean) {
                double s = 0.0;
                for (std::int64_t t = 0; t < v.count; ++t) s += x[static_cast<std::size_t>(base + t * v.inner)];
                out[static_cast<std::size_t>(oi)] = s / static_cast<double>(v.count);
            } else {
                double best = x[static_cast<std::size_t>(base)];
                std::int64_t bi = 0;
                for (std::int64_t t = 1; t < v.count; ++t) {
                    const double c = x[static_cast<std::size_t>(base + t * v.inner)];
                    const bool better = (mode == AxisReduceMode::kMax) ? (c > best) : (c < best);
                    if (better) {
                        best = c;
                        bi = t;
                    }
                }
                out[static_cast<std::size_t>(oi)] = best;
                arg[static_cast<std::size_t>(oi)] = bi;
            }
        }
    }
    return make_result(out_shape, std::move(out), "reduce", {a}, [v, mode, arg](const Tensor& o) {
        const Tensor& pa = o.node()->parents[0];
        auto* ga = grad_buffer(pa);
        if (!ga) return;
        const auto& g = o.grad();
        for (std::int64_t ou = 0; ou < v.outer; ++ou) {
            for (std::int64_t in = 0; in < v.inner; ++in) {
                const std::int64_t base = ou * v.count * v.inner + in;
                const std::int64_t oi = ou * v.inner + in;
                const double gi = g[static_cast<std::size_t>(oi)];
                if (mode == AxisReduceMode::kMean) {
                    const double share = gi / static_cast<double>(v.count);
                    for (std::int64_t t = 0; t < v.count; ++t) {
                        (*ga)[static_cast<std::size_t>(base + t * v.inner)] += share;
                    }
                } else {
                    (*ga)[static_cast<std::size_t>(base + arg[static_cast<std::size_t>(oi)] * v.inner)] += gi;
                }
            }
        }
    });
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (const double x : a.data()) s += x;
    return make_result({1}, {s}, "sum_all", {a}, [](const Tensor& o) {
        const Tensor& pa = o.node()->parents[0];
        auto* ga = grad_buffer(pa);
        if (!ga) return;
        const double gi = o.grad()[0];
        for (auto& v : *ga) v += gi;
    });
}

Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (const double x : a.data()) s += x;
    const auto n = static_cast<double>(a.numel());
    return make_result({1}, {s / n}, "mean_all", {a}, [n](const Tensor& o) {
        const Tensor& pa = o.node()->parents[0];
        auto* ga = grad_buffer(pa);
        if (!ga) return;
        const double share = o.grad()[0] / n;
        for (auto& v : *ga) v += share;
    });
}

Tensor mul_broadcast_leading(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() + 1) {
        throw shape_error("mul_broadcast_leading: rank of " + shape_str(b.shape()) +
                          " must be one less than " + shape_str(a.shape()));
    }
    for (int d = 0; d < b.rank(); ++d) {
        if (a.extent(d + 1) != b.extent(d)) {
            throw shape_error("mul_broadcast_leading: trailing extents differ: " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
        }
    }
    const std::int64_t slices = a.extent(0);
    const std::int64_t m = b.numel();
    std::vector<double> out(static_cast<std::size_t>(a.numel()));
    for (std::int64_t i = 0; i < slices; ++i) {
        for (std::int64_t j = 0; j < m; ++j) {
            out[static_cast<std::size_t>(i * m + j)] = a.value_at(i * m + j) * b.value_at(j);
        }
    }
    return make_result(a.shape(), std::move(out), "mul_broadcast_leading", {a, b},
                       [slices, m](const Tensor& o) {
                           const Tensor& pa = o.node()->parents[0];
                           const Tensor& pb = o.node()->parents[1];
                           const auto& g = o.grad();
                           auto* ga = grad_buffer(pa);
                           auto* gb = grad_buffer(pb);
                           for (std::int64_t i = 0; i < slices; ++i) {
                               for (std::int64_t j = 0; j < m; ++j) {
                                   const auto oi = static_cast<std::size_t>(i * m + j);
                                   if (ga) (*ga)[oi] += g[oi] * pb.value_at(j);
                                   if (gb) (*gb)[static_cast<std::size_t>(j)] += g[oi] * pa.value_at(i * m + j);
                               }
                           }
                       });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 1 || a.extent(1) != b.extent(0)) {
        throw shape_error("add_rowvec: expected (R,C) + (C), got " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    }
    const std::int64_t r = a.extent(0), c = a.extent(1);
    std::vector<double> out(static_cast<std::size_t>(r * c));
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            out[static_cast<std::size_t>(i * c + j)] = a.value_at(i * c + j) + b.value_at(j);
        }
    }
    return make_result(a.shape(), std::move(out), "add_rowvec", {a, b}, [r, c](const Tensor& o) {
        const Tensor& pa = o.node()->parents[0];
        const Tensor& pb = o.node()->parents[1];
        const auto& g = o.grad();
        if (auto* ga = grad_buffer(pa)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        }
        if (auto* gb = grad_buffer(pb)) {
            for (std::int64_t i = 0; i < r; ++i) {
                for (std::int64_t j = 0; j < c; ++j) (*gb)[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * c + j)];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// volumetric ops, layout (C, H, W, D), row-major with D fastest
// ---------------------------------------------------------------------------

namespace {

void require_volume(const Tensor& t, const char* op) {
    if (t.rank() != 4) {
        throw shape_error(std::string(op) + ": expected (C,H,W,D), got " + shape_str(t.shape()));
    }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    require_volume(input, "conv3d");
    if (weight.rank() != 5) {
        throw shape_error("conv3d: expected weight (Co,Ci,k,k,k), got " + shape_str(weight.shape()));
    }
    const std::int64_t ci = input.extent(0), H = input.extent(1), W = input.extent(2), D = input.extent(3);
    const std::int64_t co = weight.extent(0), wci = weight.extent(1), k = weight.extent(2);
    if (weight.extent(3) != k || weight.extent(4) != k) {
        throw shape_error("conv3d: kernel must be cubic, got " + shape_str(weight.shape()));
    }
    if (k != 1 && k != 3) throw value_error("conv3d: kernel side must be 1 or 3");
    if (stride != 1 && stride != 2) throw value_error("conv3d: stride must be 1 or 2");
    if (padding < 0) throw value_error("conv3d: padding must be >= 0");
    if (wci != ci) {
        throw shape_error("conv3d: input channels " + std::to_string(ci) +
                          " incompatible with weight " + shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != co)) {
        throw shape_error("conv3d: bias must be (Co), got " + shape_str(bias.shape()));
    }
    const auto os = [&](std::int64_t e) { return (e + 2 * padding - k) / stride + 1; };
    const std::int64_t OH = os(H), OW = os(W), OD = os(D);
    if (OH <= 0 || OW <= 0 || OD <= 0) {
        throw shape_error("conv3d: non-positive output extent for input " + shape_str(input.shape()));
    }

    // valid output index range along one spatial axis for a given kernel offset
    const auto span = [stride, padding](std::int64_t kk, std::int64_t ext, std::int64_t oext) {
        const std::int64_t shift = kk - padding;
        std::int64_t lo = 0, hi = oext - 1;
        if (shift < 0) lo = (-shift + stride - 1) / stride;
        hi = std::min(hi, (ext - 1 - shift) / stride);
        return std::pair<std::int64_t, std::int64_t>{lo, hi};
    };

    std::vector<double> out(static_cast<std::size_t>(co * OH * OW * OD), 0.0);
    const auto& X = input.data();
    const auto& Wt = weight.data();
    if (bias.defined()) {
        for (std::int64_t c = 0; c < co; ++c) {
            std::fill_n(out.begin() + c * OH * OW * OD, OH * OW * OD, bias.value_at(c));
        }
    }
    for (std::int64_t c = 0; c < co; ++c) {
        for (std::int64_t ic = 0; ic < ci; ++ic) {
            for (std::int64_t kh = 0; kh < k; ++kh) {
                const auto [hlo, hhi] = span(kh, H, OH);
                for (std::int64_t kw = 0; kw < k; ++kw) {
                    const auto [wlo, whi] = span(kw, W, OW);
                    for (std::int64_t kd = 0; kd < k; ++kd) {
                        const auto [dlo, dhi] = span(kd, D, OD);
                        const double wv = Wt[static_cast<std::size_t>((((c * ci + ic) * k + kh) * k + kw) * k + kd)];
                        const std::int64_t dshift = kd - padding;
                        for (std::int64_t oh = hlo; oh <= hhi; ++oh) {
                            const std::int64_t ih = oh * stride + kh - padding;
                            for (std::int64_t ow = wlo; ow <= whi; ++ow) {
                                const std::int64_t iw = ow * stride + kw - padding;
                                const double* xrow = X.data() + ((ic * H + ih) * W + iw) * D;
                                double* orow = out.data() + ((c * OH + oh) * OW + ow) * OD;
                                if (stride == 1) {
                                    const double* xs = xrow + dshift;
                                    for (std::int64_t od = dlo; od <= dhi; ++od) orow[od] += wv * xs[od];
                                } else {
                                    for (std::int64_t od = dlo; od <= dhi; ++od) {
                                        orow[od] += wv * xrow[od * 2 + dshift];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    std::vector<Tensor> parents = {input, weight};
    if (bias.defined()) parents.push_back(bias);
    const bool has_bias = bias.defined();
    return make_result(
        {co, OH, OW, OD}, std::move(out), "conv3d", std::move(parents),
        [ci, co, H, W, D, OH, OW, OD, k, stride, padding, span, has_bias](const Tensor& o) {
            const Tensor& pin = o.node()->parents[0];
            const Tensor& pw = o.node()->parents[1];
            const auto& g = o.grad();
            auto* gin = grad_buffer(pin);
            auto* gw = grad_buffer(pw);
            const auto& X = pin.data();
            const auto& Wt = pw.data();
            for (std::int64_t c = 0; c < co; ++c) {
                for (std::int64_t ic = 0; ic < ci; ++ic) {
                    for (std::int64_t kh = 0; kh < k; ++kh) {
                        const auto [hlo, hhi] = span(kh, H, OH);
                        for (std::int64_t kw = 0; kw < k; ++kw) {
                            const auto [wlo, whi] = span(kw, W, OW);
                            for (std::int64_t kd = 0; kd < k; ++kd) {
                                const auto [dlo, dhi] = span(kd, D, OD);
                                const std::size_t wi = static_cast<std::size_t>((((c * ci + ic) * k + kh) * k + kw) * k + kd);
                                const double wv = Wt[wi];
                                const std::int64_t dshift = kd - padding;
                                double wacc = 0.0;
                                for (std::int64_t oh = hlo; oh <= hhi; ++oh) {
                                    const std::int64_t ih = oh * stride + kh - padding;
                                    for (std::int64_t ow = wlo; ow <= whi; ++ow) {
                                        const std::int64_t iw = ow * stride + kw - padding;
                                        const double* grow = g.data() + ((c * OH + oh) * OW + ow) * OD;
                                        const std::int64_t xbase = ((ic * H + ih) * W + iw) * D;
                                        if (gin) {
                                            double* girow = gin->data() + xbase;
                                            for (std::int64_t od = dlo; od <= dhi; ++od) {
                                                girow[od * stride + dshift] += wv * grow[od];
                                            }
                                        }
                                        if (gw) {
                                            const double* xrow = X.data() + xbase;
                                            for (std::int64_t od = dlo; od <= dhi; ++od) {
                                                wacc += grow[od] * xrow[od * stride + dshift];
                                            }
                                        }
                                    }
                                }
                                if (gw) (*gw)[wi] += wacc;
                            }
                        }
                    }
                }
            }
            if (has_bias) {
                const Tensor& pb = o.node()->parents[2];
                if (auto* gb = grad_buffer(pb)) {
                    const std::int64_t vol = OH * OW * OD;
                    for (std::int64_t c = 0; c < co; ++c) {
                        double s = 0.0;
                        const double* grow = g.data() + c * vol;
                        for (std::int64_t i = 0; i < vol; ++i) s += grow[i];
                        (*gb)[static_cast<std::size_t>(c)] += s;
                    }
                }
            }
        });
}

Tensor upsample_nearest(const Tensor& input, int factor) {
    require_volume(input, "upsample_nearest");
    if (factor < 2) throw value_error("upsample_nearest: factor must be >= 2");
    const std::int64_t C = input.extent(0), H = input.extent(1), W = input.extent(2), D = input.extent(3);
    const std::int64_t f = factor;
    const Shape oshape = {C, H * f, W * f, D * f};
    std::vector<double> out(static_cast<std::size_t>(shape_numel(oshape)));
    const auto& X = input.data();
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t z = 0; z < H * f; ++z) {
            for (std::int64_t y = 0; y < W * f; ++y) {
                double* orow = out.data() + ((c * H * f + z) * W * f + y) * D * f;
                const double* xrow = X.data() + ((c * H + z / f) * W + y / f) * D;
                for (std::int64_t x = 0; x < D * f; ++x) orow[x] = xrow[x / f];
            }
        }
    }
    return make_result(oshape, std::move(out), "upsample_nearest", {input},
                       [C, H, W, D, f](const Tensor& o) {
                           const Tensor& pin = o.node()->parents[0];
                           auto* gin = grad_buffer(pin);
                           if (!gin) return;
                           const auto& g = o.grad();
                           for (std::int64_t c = 0; c < C; ++c) {
                               for (std::int64_t z = 0; z < H * f; ++z) {
                                   for (std::int64_t y = 0; y < W * f; ++y) {
                                       const double* grow = g.data() + ((c * H * f + z) * W * f + y) * D * f;
                                       double* xrow = gin->data() + ((c * H + z / f) * W + y / f) * D;
                                       for (std::int64_t x = 0; x < D * f; ++x) xrow[x / f] += grow[x];
                                   }
                               }
                           }
                       });
}

Tensor avg_pool3d(const Tensor& input, int factor) {
    require_volume(input, "avg_pool3d");
    if (factor < 1) throw value_error("avg_pool3d: factor must be >= 1");
    const std::int64_t C = input.extent(0), H = input.extent(1), W = input.extent(2), D = input.extent(3);
    const std::int64_t f = factor;
    if (H % f || W % f || D % f) {
        throw shape_error("avg_pool3d: extents " + shape_str(input.shape()) +
                          " not divisible by factor " + std::to_string(factor));
    }
    const Shape oshape = {C, H / f, W / f, D / f};
    std::vector<double> out(static_cast<std::size_t>(shape_numel(oshape)), 0.0);
    const auto& X = input.data();
    const double inv = 1.0 / static_cast<double>(f * f * f);
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t z = 0; z < H; ++z) {
            for (std::int64_t y = 0; y < W; ++y) {
                const double* xrow = X.data() + ((c * H + z) * W + y) * D;
                double* orow = out.data() + ((c * (H / f) + z / f) * (W / f) + y / f) * (D / f);
                for (std::int64_t x = 0; x < D; ++x) orow[x / f] += xrow[x] * inv;
            }
        }
    }
    return make_result(oshape, std::move(out), "avg_pool3d", {input}, [C, H, W, D, f, inv](const Tensor& o) {
        const Tensor& pin = o.node()->parents[0];
        auto* gin = grad_buffer(pin);
        if (!gin) return;
        const auto& g = o.grad();
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t z = 0; z < H; ++z) {
                for (std::int64_t y = 0; y < W; ++y) {
                    double* xrow = gin->data() + ((c * H + z) * W + y) * D;
                    const double* grow = g.data() + ((c * (H / f) + z / f) * (W / f) + y / f) * (D / f);
                    for (std::int64_t x = 0; x < D; ++x) xrow[x] += grow[x / f] * inv;
                }
            }
        }
    });
}

Tensor global_max_pool(const Tensor& input) {
    require_volume(input, "global_max_pool");
    const std::int64_t C = input.extent(0);
    const std::int64_t vol = input.numel() / C;
    std::vector<double> out(static_cast<std::size_t>(C));
    std::vector<std::int64_t> arg(static_cast<std::size_t>(C), 0);
    const auto& X = input.data();
    for (std::int64_t c = 0; c < C; ++c) {
        const double* row = X.data() + c * vol;
        double best = row[0];
        std::int64_t bi = 0;
        for (std::int64_t i = 1; i < vol; ++i) {
            if (row[i] > best) {
                best = row[i];
                bi = i;
            }
        }
        out[static_cast<std::size_t>(c)] = best;
        arg[static_cast<std::size_t>(c)] = bi;
    }
    return make_result({C}, std::move(out), "global_max_pool", {input}, [C, vol, arg](const Tensor& o) {
        const Tensor& pin = o.node()->parents[0];
        auto* gin = grad_buffer(pin);
        if (!gin) return;
        const auto& g = o.grad();
        for (std::int64_t c = 0; c < C; ++c) {
            (*gin)[static_cast<std::size_t>(c * vol + arg[static_cast<std::size_t>(c)])] += g[static_cast<std::size_t>(c)];
        }
    });
}

Tensor global_mean_pool(const Tensor& input) {
    require_volume(input, "global_mean_pool");
    const std::int64_t C = input.extent(0);
    const std::int64_t vol = input.numel() / C;
    std::vector<double> out(static_cast<std::size_t>(C));
    const auto& X = input.data();
    for (std::int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        const double* row = X.data() + c * vol;
        for (std::int64_t i = 0; i < vol; ++i) s += row[i];
        out[static_cast<std::size_t>(c)] = s / static_cast<double>(vol);
    }
    return make_result({C}, std::move(out), "global_mean_pool", {input}, [C, vol](const Tensor& o) {
        const Tensor& pin = o.node()->parents[0];
        auto* gin = grad_buffer(pin);
        if (!gin) return;
        const auto& g = o.grad();
        for (std::int64_t c = 0; c < C; ++c) {
            const double share = g[static_cast<std::size_t>(c)] / static_cast<double>(vol);
            double* row = gin->data() + c * vol;
            for (std::int64_t i = 0; i < vol; ++i) row[i] += share;
        }
    });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
    if (a.rank() < 1) throw shape_error("layer_norm: scalar input");
    const std::int64_t f = a.extent(a.rank() - 1);
    if (gamma.rank() != 1 || gamma.extent(0) != f || beta.rank() != 1 || beta.extent(0) != f) {
        throw shape_error("layer_norm: gamma/beta must be (" + std::to_string(f) + ")");
    }
    const std::int64_t rows = a.numel() / f;
    std::vector<double> out(static_cast<std::size_t>(a.numel()));
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    std::vector<double> xhat(static_cast<std::size_t>(a.numel()));
    const auto& X = a.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = X.data() + r * f;
        double mu = 0.0;
        for (std::int64_t j = 0; j < f; ++j) mu += row[j];
        mu /= static_cast<double>(f);
        double var = 0.0;
        for (std::int64_t j = 0; j < f; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(f);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = inv;
        for (std::int64_t j = 0; j < f; ++j) {
            const double h = (row[j] - mu) * inv;
            xhat[static_cast<std::size_t>(r * f + j)] = h;
            out[static_cast<std::size_t>(r * f + j)] = h * gamma.value_at(j) + beta.value_at(j);
        }
    }
    return make_result(a.shape(), std::move(out), "layer_norm", {a, gamma, beta},
                       [rows, f, inv_std, xhat](const Tensor& o) {
                           const Tensor& pa = o.node()->parents[0];
                           const Tensor& pg = o.node()->parents[1];
                           const Tensor& pb = o.node()->parents[2];
                           const auto& g = o.grad();
                           auto* ga = grad_buffer(pa);
                           auto* gg = grad_buffer(pg);
                           auto* gb = grad_buffer(pb);
                           for (std::int64_t r = 0; r < rows; ++r) {
                               const double inv = inv_std[static_cast<std::size_t>(r)];
                               double sum_gy = 0.0, sum_gyx = 0.0;
                               for (std::int64_t j = 0; j < f; ++j) {
                                   const auto i = static_cast<std::size_t>(r * f + j);
                                   const double gy = g[i] * pg.value_at(j);
                                   sum_gy += gy;
                                   sum_gyx += gy * xhat[i];
                                   if (gg) (*gg)[static_cast<std::size_t>(j)] += g[i] * xhat[i];
                                   if (gb) (*gb)[static_cast<std::size_t>(j)] += g[i];
                               }
                               if (ga) {
                                   const double nf = static_cast<double>(f);
                                   for (std::int64_t j = 0; j < f; ++j) {
                                       const auto i = static_cast<std::size_t>(r * f + j);
                                       const double gy = g[i] * pg.value_at(j);
                                       (*ga)[i] += inv * (gy - sum_gy / nf - xhat[i] * sum_gyx / nf);
                                   }
                               }
                           }
                       });
}

Tensor standardize(const Tensor& a, int axis, double tau) {
    require_axis(a, axis, "standardize");
    if (!(tau > 0.0)) throw value_error("standardize: tau must be > 0");
    const auto v = axis_view(a.shape(), axis);
    const auto& x = a.data();
    std::vector<double> out(static_cast<std::size_t>(a.numel()));
    std::vector<double> mus(static_cast<std::size_t>(v.outer * v.inner));
    std::vector<double> sigmas(static_cast<std::size_t>(v.outer * v.inner));
    for (std::int64_t o = 0; o < v.outer; ++o) {
        for (std::int64_t in = 0; in < v.inner; ++in) {
            const std::int64_t base = o * v.count * v.inner + in;
            const std::int64_t si = o * v.inner + in;
            double mu = 0.0;
            for (std::int64_t t = 0; t < v.count; ++t) mu += x[static_cast<std::size_t>(base + t * v.inner)];
            mu /= static_cast<double>(v.count);
            double var = 0.0;
            for (std::int64_t t = 0; t < v.count; ++t) {
                const double d = x[static_cast<std::size_t>(base + t * v.inner)] - mu;
                var += d * d;
            }
            const double sigma = std::sqrt(var / static_cast<double>(v.count));
            const double denom = (sigma + 1e-7) * tau;
            mus[static_cast<std::size_t>(si)] = mu;
            sigmas[static_cast<std::size_t>(si)] = sigma;
            for (std::int64_t t = 0; t < v.count; ++t) {
                const auto i = static_cast<std::size_t>(base + t * v.inner);
                out[i] = (x[i] - mu) / denom;
            }
        }
    }
    return make_result(a.shape(), std::move(out), "standardize", {a}, [v, tau, mus, sigmas](const Tensor& o) {
        const Tensor& pa = o.node()->parents[0];
        auto* ga = grad_buffer(pa);
        if (!ga) return;
        const auto& g = o.grad();
        const auto& x = pa.data();
        const double K = static_cast<double>(v.count);
        for (std::int64_t ou = 0; ou < v.outer; ++ou) {
            for (std::int64_t in = 0; in < v.inner; ++in) {
                const std::int64_t base = ou * v.count * v.inner + in;
                const std::int64_t si = ou * v.inner + in;
                const double mu = mus[static_cast<std::size_t>(si)];
                const double sigma = sigmas[static_cast<std::size_t>(si)];
                const double s = sigma + 1e-7;
                double gsum = 0.0, gu = 0.0;
                for (std::int64_t t = 0; t < v.count; ++t) {
                    const auto i = static_cast<std::size_t>(base + t * v.inner);
                    gsum += g[i];
                    gu += g[i] * (x[i] - mu);
                }
                // d/dx_j of (x_i - mu)/(s*tau): delta term, mean term, sigma term
                const double sig_coef = sigma > 0.0 ? gu / (K * sigma * s * s * tau) : 0.0;
                for (std::int64_t t = 0; t < v.count; ++t) {
                    const auto i = static_cast<std::size_t>(base + t * v.inner);
                    (*ga)[i] += (g[i] - gsum / K) / (s * tau) - sig_coef * (x[i] - mu);
                }
            }
        }
    });
}

}  // namespace mstkd
