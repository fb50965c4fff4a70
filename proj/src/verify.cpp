#include "mstkd/verify.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mstkd/distill.hpp"
#include "mstkd/gsme.hpp"
#include "mstkd/metrics.hpp"
#include "mstkd/net.hpp"
#include "mstkd/train.hpp"

namespace mstkd::verify {

GradCheckReport check_gradient(const std::function<Tensor(std::vector<Tensor>&)>& f,
                               std::vector<Tensor>& inputs, double h) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = f(inputs);
    if (loss.numel() != 1) throw value_error("check_gradient: f must return a scalar");
    backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) {
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.data().size(), 0.0));
    }

    GradCheckReport report;
    NoGradGuard ng;  // FD evaluations do not need a tape
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& data = inputs[ti].data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double saved = data[j];
            data[j] = saved + h;
            const double fp = f(inputs).item();
            data[j] = saved - h;
            const double fm = f(inputs).item();
            data[j] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[ti][j];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                std::ostringstream os;
                os << "input " << ti << " element " << j << ": analytic " << a << " vs numeric "
                   << numeric;
                report.worst = os.str();
            }
        }
    }
    return report;
}

namespace {

Tensor rand_tensor(const Shape& shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : d) x = rng.uniform(lo, hi);
    return Tensor::from_data(shape, std::move(d));
}

CheckResult summarize(const std::string& name, const std::string& tol, bool ok,
                      const std::string& detail) {
    return CheckResult{name, tol, ok, detail};
}

// Runs `instances` gradient checks built by `make`, keeping the worst error.
template <typename MakeCase>
CheckResult grad_family(const std::string& name, Rng& rng, int instances, MakeCase make,
                        double tol = 1e-4) {
    double worst = 0.0;
    std::string detail;
    for (int i = 0; i < instances; ++i) {
        auto [f, inputs] = make(rng);
        auto rep = check_gradient(f, inputs);
        if (rep.max_rel_err > worst) {
            worst = rep.max_rel_err;
            detail = rep.worst;
        }
    }
    std::ostringstream os;
    os << "max rel err " << worst;
    if (!detail.empty()) os << " (" << detail << ")";
    return summarize(name, "rel < 1e-4", worst < tol, os.str());
}

using GradFn = std::function<Tensor(std::vector<Tensor>&)>;
using GradCase = std::pair<GradFn, std::vector<Tensor>>;

}  // namespace

std::vector<CheckResult> run_gradient_suite(Rng& rng, int instances) {
    std::vector<CheckResult> out;
    const auto weights = [](const Shape& s, Rng& r) { return rand_tensor(s, r, -1.0, 1.0); };

    out.push_back(grad_family("grad/elementwise", rng, instances, [&](Rng& r) -> GradCase {
        const Shape s = {r.uniform_int(1, 3), r.uniform_int(1, 4)};
        auto w = weights(s, r);
        auto denom = rand_tensor(s, r, 0.5, 2.5);
        return {[w](std::vector<Tensor>& in) {
                    auto t = add(sub(mul(in[0], in[1]), elem_div(in[0], in[2])),
                                 add_scalar(mul_scalar(in[1], 0.7), 0.3));
                    return sum_all(mul(t, w));
                },
                {rand_tensor(s, r), rand_tensor(s, r), denom}};
    }));
    out.push_back(grad_family("grad/maps", rng, instances, [&](Rng& r) -> GradCase {
        const Shape s = {r.uniform_int(2, 5)};
        auto w = weights(s, r);
        auto pos = rand_tensor(s, r, 0.5, 2.5);
        return {[w](std::vector<Tensor>& in) {
                    auto t = add(add(exp(mul_scalar(in[0], 0.5)), log(in[1])),
                                 add(square(in[0]), add(sigmoid(in[0]),
                                                        add(silu(in[0]),
                                                            add(relu(in[0]), leaky_relu(in[0]))))));
                    return sum_all(mul(add(t, clamp(in[0], -1.0, 1.0)), w));
                },
                {rand_tensor(s, r), pos}};
    }));
    out.push_back(grad_family("grad/matmul", rng, instances, [&](Rng& r) -> GradCase {
        const auto m = r.uniform_int(1, 3), k = r.uniform_int(1, 3), n = r.uniform_int(1, 3);
        auto w = weights({m, n}, r);
        return {[w](std::vector<Tensor>& in) { return sum_all(mul(matmul(in[0], in[1]), w)); },
                {rand_tensor({m, k}, r), rand_tensor({k, n}, r)}};
    }));
    out.push_back(grad_family("grad/softmax", rng, instances, [&](Rng& r) -> GradCase {
        const Shape s = {r.uniform_int(2, 3), r.uniform_int(2, 4)};
        const int axis = static_cast<int>(r.uniform_int(0, 1));
        auto w = weights(s, r);
        return {[w, axis](std::vector<Tensor>& in) {
                    return sum_all(mul(add(softmax(in[0], axis), log_softmax(in[0], axis)), w));
                },
                {rand_tensor(s, r)}};
    }));
    out.push_back(grad_family("grad/reduce", rng, instances, [&](Rng& r) -> GradCase {
        const Shape s = {r.uniform_int(2, 3), r.uniform_int(2, 3), r.uniform_int(2, 3)};
        const int axis = static_cast<int>(r.uniform_int(0, 2));
        const auto mode = static_cast<AxisReduceMode>(r.uniform_int(0, 2));
        Shape os;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (static_cast<int>(i) != axis) os.push_back(s[i]);
        }
        auto w = weights(os, r);
        return {[w, axis, mode](std::vector<Tensor>& in) {
                    return sum_all(mul(reduce(in[0], axis, mode), w));
                },
                {rand_tensor(s, r)}};
    }));
    out.push_back(grad_family("grad/shape_ops", rng, instances, [&](Rng& r) -> GradCase {
        auto w = weights({3, 2, 2}, r);
        return {[w](std::vector<Tensor>& in) {
                    auto t = permute(reshape(concat({in[0], in[1]}, 0), {2, 2, 3}), {2, 0, 1});
                    return sum_all(mul(t, w));
                },
                {rand_tensor({1, 6}, r), rand_tensor({1, 6}, r)}};
    }));
    out.push_back(grad_family("grad/broadcast_helpers", rng, instances, [&](Rng& r) -> GradCase {
        const auto n = r.uniform_int(1, 3);
        auto w = weights({n, 2, 2}, r);
        auto w2 = weights({2, 3}, r);
        return {[w, w2](std::vector<Tensor>& in) {
                    return add(sum_all(mul(mul_broadcast_leading(in[0], in[1]), w)),
                               sum_all(mul(add_rowvec(in[2], in[3]), w2)));
                },
                {rand_tensor({n, 2, 2}, r), rand_tensor({2, 2}, r), rand_tensor({2, 3}, r),
                 rand_tensor({3}, r)}};
    }));
    out.push_back(grad_family("grad/conv3d", rng, instances, [&](Rng& r) -> GradCase {
        const auto ci = r.uniform_int(1, 2), co = r.uniform_int(1, 2);
        const int k = r.coin() ? 3 : 1;
        const int stride = r.coin() ? 2 : 1;
        const int pad = k == 3 ? 1 : 0;
        const auto e = r.uniform_int(2, 4);
        const auto oe = (e + 2 * pad - k) / stride + 1;
        auto w = weights({co, oe, oe, oe}, r);
        return {[w, stride, pad](std::vector<Tensor>& in) {
                    return sum_all(mul(conv3d(in[0], in[1], in[2], stride, pad), w));
                },
                {rand_tensor({ci, e, e, e}, r), rand_tensor({co, ci, k, k, k}, r),
                 rand_tensor({co}, r)}};
    }));
    out.push_back(grad_family("grad/resample_pool", rng, instances, [&](Rng& r) -> GradCase {
        const auto c = r.uniform_int(1, 2);
        auto w = weights({c, 4, 4, 4}, r);
        auto wc = weights({c}, r);
        return {[w, wc](std::vector<Tensor>& in) {
                    auto up = upsample_nearest(in[0], 2);
                    return add(sum_all(mul(up, w)),
                               add(sum_all(mul(global_max_pool(in[1]), wc)),
                                   add(sum_all(mul(global_mean_pool(in[1]), wc)),
                                       sum_all(avg_pool3d(in[1], 2)))));
                },
                {rand_tensor({c, 2, 2, 2}, r), rand_tensor({c, 4, 4, 4}, r)}};
    }));
    out.push_back(grad_family("grad/normalization", rng, instances, [&](Rng& r) -> GradCase {
        const auto rows = r.uniform_int(1, 3), f = r.uniform_int(2, 5);
        auto w = weights({rows, f}, r);
        const double tau = r.uniform(0.5, 3.0);
        return {[w, tau](std::vector<Tensor>& in) {
                    return add(sum_all(mul(layer_norm(in[0], in[1], in[2]), w)),
                               sum_all(mul(standardize(in[0], 1, tau), w)));
                },
                {rand_tensor({rows, f}, r), rand_tensor({f}, r, 0.5, 1.5), rand_tensor({f}, r)}};
    }));
    return out;
}

namespace {

ForwardTrace toy_trace(Rng& rng, int blocks, std::int64_t heads, std::int64_t n_tokens,
                       std::int64_t k) {
    ForwardTrace t;
    for (int i = 0; i < blocks; ++i) {
        // attention-like rows: positive, rows summing to one
        auto raw = rand_tensor({heads, n_tokens, n_tokens}, rng, -1.0, 1.0);
        t.attn.push_back(softmax(raw, 2).detach());
        t.tokens.push_back(rand_tensor({n_tokens, k}, rng));
    }
    t.logits = rand_tensor({3, 2, 2, 2}, rng);
    return t;
}

}  // namespace

std::vector<CheckResult> run_loss_gradient_suite(Rng& rng, int instances) {
    std::vector<CheckResult> out;
    LossWeights w;

    out.push_back(grad_family("grad/ms_tkd_loss", rng, instances, [&](Rng& r) -> GradCase {
        auto teacher = toy_trace(r, 2, 2, 2, 3);
        return {[teacher, w](std::vector<Tensor>& in) {
                    ForwardTrace student;
                    student.attn = {in[0], in[1]};
                    student.tokens = {in[2], in[3]};
                    return ms_tkd_loss(teacher, student, w);
                },
                {rand_tensor({2, 2, 2}, r, 0.0, 1.0), rand_tensor({2, 2, 2}, r, 0.0, 1.0),
                 rand_tensor({2, 3}, r), rand_tensor({2, 3}, r)}};
    }));
    out.push_back(grad_family("grad/logit_loss", rng, instances, [&](Rng& r) -> GradCase {
        auto teacher = rand_tensor({3, 2, 2}, r);
        return {[teacher, w](std::vector<Tensor>& in) { return logit_loss(teacher, in[0], w); },
                {rand_tensor({3, 2, 2}, r)}};
    }));
    out.push_back(grad_family("grad/std_kl", rng, instances, [&](Rng& r) -> GradCase {
        auto teacher = rand_tensor({4, 3}, r);
        const double tau = r.uniform(0.5, 2.0);
        return {[teacher, tau](std::vector<Tensor>& in) { return std_kl_loss(teacher, in[0], tau); },
                {rand_tensor({4, 3}, r)}};
    }));
    out.push_back(grad_family("grad/gram_match", rng, instances, [&](Rng& r) -> GradCase {
        StyleFeatures teacher{rand_tensor({2, 4}, r), rand_tensor({3, 4}, r), rand_tensor({2, 4}, r)};
        return {[teacher, w](std::vector<Tensor>& in) {
                    StyleFeatures student{in[0], in[1], in[2]};
                    return gram_match_loss(teacher, student, w);
                },
                {rand_tensor({2, 4}, r), rand_tensor({3, 4}, r), rand_tensor({2, 4}, r)}};
    }));
    out.push_back(grad_family("grad/adversarial_student", rng, instances, [&](Rng& r) -> GradCase {
        Discriminator d(3, 8, r.next_u64());
        auto teacher = rand_tensor({3, 2, 2, 2}, r);
        return {[d = std::move(d), teacher](std::vector<Tensor>& in) {
                    return adversarial_loss(d, teacher, in[0]).g_loss;
                },
                {rand_tensor({3, 2, 2, 2}, r)}};
    }));
    out.push_back(grad_family("grad/adversarial_disc", rng, instances, [&](Rng& r) -> GradCase {
        // the inputs ARE the discriminator weights; both fused sides are fixed
        auto d = std::make_shared<Discriminator>(3, 4, r.next_u64());
        auto teacher = rand_tensor({3, 2, 2, 2}, r);
        auto student = rand_tensor({3, 2, 2, 2}, r);
        std::vector<Tensor> params = d->parameters();
        return {[d, teacher, student](std::vector<Tensor>&) {
                    return adversarial_loss(*d, teacher, student).d_loss;
                },
                params};
    }));
    out.push_back(grad_family("grad/soft_dice", rng, instances, [&](Rng& r) -> GradCase {
        std::vector<double> lab(3 * 8);
        for (auto& v : lab) v = r.coin() ? 1.0 : 0.0;
        auto label = Tensor::from_data({3, 2, 2, 2}, std::move(lab));
        return {[label](std::vector<Tensor>& in) { return soft_dice_loss(in[0], label); },
                {rand_tensor({3, 2, 2, 2}, r)}};
    }));

    // teacher-side inputs receive no gradient
    {
        bool ok = true;
        std::string detail = "teacher grads are absent or zero";
        for (int i = 0; i < instances && ok; ++i) {
            auto t_attn = rand_tensor({2, 2, 2}, rng, 0.0, 1.0);
            auto t_tok = rand_tensor({2, 3}, rng);
            auto t_logits = rand_tensor({3, 2, 2}, rng);
            t_attn.set_requires_grad(true);
            t_tok.set_requires_grad(true);
            t_logits.set_requires_grad(true);
            ForwardTrace teacher;
            teacher.attn = {t_attn, t_attn};
            teacher.tokens = {t_tok, t_tok};
            ForwardTrace student;
            student.attn = {rand_tensor({2, 2, 2}, rng, 0.0, 1.0),
                            rand_tensor({2, 2, 2}, rng, 0.0, 1.0)};
            student.tokens = {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng)};
            for (auto& a : student.attn) a.set_requires_grad(true);
            auto s_logits = rand_tensor({3, 2, 2}, rng);
            s_logits.set_requires_grad(true);
            backward(add(ms_tkd_loss(teacher, student, LossWeights{}),
                         logit_loss(t_logits, s_logits, LossWeights{})));
            auto all_zero = [](const Tensor& t) {
                if (!t.has_grad()) return true;
                for (double v : t.grad()) {
                    if (v != 0.0) return false;
                }
                return true;
            };
            if (!all_zero(t_attn) || !all_zero(t_tok) || !all_zero(t_logits)) {
                ok = false;
                detail = "teacher-side tensor received gradient";
            }
        }
        out.push_back(summarize("grad/teacher_detached", "exactly zero", ok, detail));
    }
    return out;
}

std::vector<CheckResult> run_kl_invariance_suite(Rng& rng, int draws) {
    double worst = 0.0;
    for (int i = 0; i < draws; ++i) {
        auto l = rand_tensor({3, 4}, rng, -100.0, 100.0);
        const double a = rng.uniform(0.05, 20.0);
        const double b = rng.uniform(-100.0, 100.0);
        auto l2 = add_scalar(mul_scalar(l, a), b);
        const double tau = i % 3 == 0 ? 1.0 : rng.uniform(0.5, 4.0);
        worst = std::max(worst, std_kl_loss(l, l2, tau).item());
    }
    std::ostringstream os;
    os << "max std_kl_loss(l, a*l+b) = " << worst << " over " << draws << " draws";
    return {summarize("kl/affine_invariance", "< 1e-9", worst < 1e-9, os.str())};
}

std::vector<CheckResult> run_evd_identity_suite(Rng& rng) {
    std::vector<CheckResult> out;
    {
        bool ok = true;
        for (double c : {0.25, 1.0, 2.5}) {
            auto a = Tensor::full({3, 2, 2}, c);
            auto [e1, e2, e3] = extreme_value_sequences(a);
            for (const auto* t : {&e1, &e2, &e3}) {
                for (double v : t->data()) ok = ok && v == c * c;
            }
        }
        out.push_back(summarize("evd/constant_attention", "exact", ok,
                                "EV sequences equal c^2 for constant attention"));
    }
    {
        auto a = rand_tensor({1, 3, 3}, rng, 0.0, 1.0);
        auto [e1, e2, e3] = extreme_value_sequences(a);
        bool ok = true;
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            const double expect = a.value_at(i) * a.value_at(i);
            ok = ok && e1.value_at(i) == expect && e2.value_at(i) == expect &&
                 e3.value_at(i) == expect;
        }
        out.push_back(summarize("evd/single_head", "exact", ok, "single head gives elementwise A*A"));
    }
    {
        auto trace = toy_trace(rng, 3, 2, 3, 4);
        const double v = ms_tkd_loss(trace, trace, LossWeights{}).item();
        out.push_back(summarize("evd/self_distillation_zero", "exact",
                                v == 0.0, "teacher==student loss = " + std::to_string(v)));
    }
    return out;
}

std::vector<CheckResult> run_gram_suite(Rng& rng) {
    std::vector<CheckResult> out;
    LossWeights w;
    {
        // brute-force recomputation of the Gram matching term
        double worst = 0.0;
        for (int it = 0; it < 20; ++it) {
            const std::int64_t ce = rng.uniform_int(1, 3), ct = rng.uniform_int(1, 3),
                               cd = rng.uniform_int(1, 3), s = rng.uniform_int(1, 4);
            StyleFeatures tf{rand_tensor({ce, s}, rng), rand_tensor({ct, s}, rng),
                             rand_tensor({cd, s}, rng)};
            StyleFeatures sf{rand_tensor({ce, s}, rng), rand_tensor({ct, s}, rng),
                             rand_tensor({cd, s}, rng)};
            const double got = gram_match_loss(tf, sf, w).item();

            auto gram = [s](const Tensor& a, const Tensor& b, std::int64_t i, std::int64_t j) {
                double acc = 0.0;
                for (std::int64_t u = 0; u < s; ++u) {
                    acc += a.value_at(i * s + u) * b.value_at(j * s + u);
                }
                return acc;
            };
            double want = 0.0;
            const struct {
                const Tensor *ta, *tb, *sa, *sb;
                std::int64_t ca, cb;
            } pairs[3] = {{&tf.enc, &tf.dec, &sf.enc, &sf.dec, ce, cd},
                          {&tf.enc, &tf.t, &sf.enc, &sf.t, ce, ct},
                          {&tf.dec, &tf.t, &sf.dec, &sf.t, cd, ct}};
            for (const auto& p : pairs) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < p.ca; ++i) {
                    for (std::int64_t j = 0; j < p.cb; ++j) {
                        const double d = gram(*p.sa, *p.sb, i, j) - gram(*p.ta, *p.tb, i, j);
                        acc += d * d;
                    }
                }
                want += w.theta / (4.0 * static_cast<double>(p.ca) * static_cast<double>(p.cb)) * acc;
            }
            worst = std::max(worst, std::abs(got - want));
        }
        std::ostringstream os;
        os << "max |loss - brute force| = " << worst;
        out.push_back(summarize("gram/brute_force", "<= 1e-12", worst <= 1e-12, os.str()));
    }
    {
        // permutation invariance, integer-valued features so sums are exact
        bool ok = true;
        for (int it = 0; it < 10 && ok; ++it) {
            const std::int64_t c = 3, s = 6;
            std::vector<double> vals(static_cast<std::size_t>(c * s));
            for (auto& v : vals) v = static_cast<double>(rng.uniform_int(-3, 3));
            auto base = Tensor::from_data({c, s}, vals);

            std::vector<std::int64_t> perm(static_cast<std::size_t>(s));
            for (std::int64_t i = 0; i < s; ++i) perm[static_cast<std::size_t>(i)] = i;
            for (std::int64_t i = s - 1; i > 0; --i) {
                std::swap(perm[static_cast<std::size_t>(i)],
                          perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
            }
            std::vector<double> shuffled_vals(vals.size());
            for (std::int64_t ch = 0; ch < c; ++ch) {
                for (std::int64_t i = 0; i < s; ++i) {
                    shuffled_vals[static_cast<std::size_t>(ch * s + i)] =
                        vals[static_cast<std::size_t>(ch * s + perm[static_cast<std::size_t>(i)])];
                }
            }
            auto shuffled = Tensor::from_data({c, s}, shuffled_vals);

            StyleFeatures f1{base, base, base};
            StyleFeatures f2{shuffled, shuffled, shuffled};
            auto [a1, a2, a3] = gram_pairs(f1);
            auto [b1, b2, b3] = gram_pairs(f2);
            ok = a1.data() == b1.data() && a2.data() == b2.data() && a3.data() == b3.data();
        }
        out.push_back(summarize("gram/permutation_invariance", "exact", ok,
                                "Gram pairs unchanged under shared column shuffles"));
    }
    return out;
}

double dice_oracle(const std::vector<int>& pred, const std::vector<int>& gt) {
    std::int64_t np = 0, ng = 0, ni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        np += pred[i] ? 1 : 0;
        ng += gt[i] ? 1 : 0;
        ni += (pred[i] && gt[i]) ? 1 : 0;
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
}

bool hd95_oracle(const std::vector<int>& pred, const std::vector<int>& gt, std::int64_t H,
                 std::int64_t W, std::int64_t D, double* out) {
    const auto idx = [W, D](std::int64_t z, std::int64_t y, std::int64_t x) {
        return static_cast<std::size_t>((z * W + y) * D + x);
    };
    const auto is_boundary = [&](const std::vector<int>& m, std::int64_t z, std::int64_t y,
                                 std::int64_t x) {
        if (!m[idx(z, y, x)]) return false;
        const std::int64_t dz[6] = {-1, 1, 0, 0, 0, 0};
        const std::int64_t dy[6] = {0, 0, -1, 1, 0, 0};
        const std::int64_t dx[6] = {0, 0, 0, 0, -1, 1};
        for (int d = 0; d < 6; ++d) {
            const std::int64_t nz = z + dz[d], ny = y + dy[d], nx = x + dx[d];
            if (nz < 0 || nz >= H || ny < 0 || ny >= W || nx < 0 || nx >= D) return true;
            if (!m[idx(nz, ny, nx)]) return true;
        }
        return false;
    };
    std::vector<std::array<std::int64_t, 3>> bp, bg;
    for (std::int64_t z = 0; z < H; ++z) {
        for (std::int64_t y = 0; y < W; ++y) {
            for (std::int64_t x = 0; x < D; ++x) {
                if (is_boundary(pred, z, y, x)) bp.push_back({z, y, x});
                if (is_boundary(gt, z, y, x)) bg.push_back({z, y, x});
            }
        }
    }
    if (bp.empty() || bg.empty()) return false;
    std::vector<double> pool;
    const auto collect = [&pool](const auto& from, const auto& to) {
        for (const auto& p : from) {
            std::int64_t best = std::numeric_limits<std::int64_t>::max();
            for (const auto& q : to) {
                const std::int64_t dz = p[0] - q[0], dy = p[1] - q[1], dx = p[2] - q[2];
                best = std::min(best, dz * dz + dy * dy + dx * dx);
            }
            pool.push_back(std::sqrt(static_cast<double>(best)));
        }
    };
    collect(bp, bg);
    collect(bg, bp);
    std::sort(pool.begin(), pool.end());
    const auto rank = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(pool.size())));
    *out = pool[std::max<std::size_t>(rank, 1) - 1];
    return true;
}

std::vector<CheckResult> run_metric_oracle_suite(Rng& rng, int instances) {
    std::vector<CheckResult> out;
    const std::int64_t E = 8;
    int dice_fail = 0, hd_fail = 0, undefined_cases = 0;
    for (int it = 0; it < instances; ++it) {
        const double p = rng.uniform(0.02, 0.3);
        std::vector<int> a(static_cast<std::size_t>(E * E * E)), b(a.size());
        if (it % 17 != 0) {  // a few all-empty masks exercise the sentinel path
            for (auto& v : a) v = rng.uniform() < p ? 1 : 0;
        }
        for (auto& v : b) v = rng.uniform() < p ? 1 : 0;
        const auto to_tensor = [E](const std::vector<int>& m) {
            std::vector<double> d(m.size());
            for (std::size_t i = 0; i < m.size(); ++i) d[i] = m[i] ? 1.0 : 0.0;
            return Tensor::from_data({E, E, E}, std::move(d));
        };
        auto ta = to_tensor(a);
        auto tb = to_tensor(b);

        if (dice(ta, tb) != dice_oracle(a, b)) dice_fail++;

        double want = 0.0;
        const bool defined = hd95_oracle(a, b, E, E, E, &want);
        const auto got = hd95(ta, tb);
        if (defined != got.has_value()) {
            hd_fail++;
        } else if (defined && *got != want) {
            hd_fail++;
        }
        if (!defined) undefined_cases++;
    }
    std::ostringstream os;
    os << instances << " random 8^3 pairs, " << undefined_cases << " undefined-hd cases";
    out.push_back(summarize("metrics/dice_oracle", "exact", dice_fail == 0, os.str()));
    out.push_back(summarize("metrics/hd95_oracle", "exact", hd_fail == 0, os.str()));
    return out;
}

std::vector<CheckResult> run_attention_suite(Rng& rng) {
    std::vector<CheckResult> out;
    {
        struct Case {
            std::int64_t h, w, d;
            int p;
        };
        bool ok = true;
        for (const auto& c : {Case{16, 16, 16, 1}, Case{16, 16, 16, 2}, Case{24, 16, 16, 1},
                              Case{32, 16, 24, 1}, Case{16, 32, 16, 2}}) {
            NetConfig cfg;
            cfg.H = c.h;
            cfg.W = c.w;
            cfg.D = c.d;
            cfg.patch = c.p;
            cfg.validate();
            const auto p3 = static_cast<std::int64_t>(c.p) * c.p * c.p;
            ok = ok && cfg.seq_len() == (c.h / 8) * (c.w / 8) * (c.d / 8) / p3;
        }
        out.push_back(summarize("attention/sequence_length", "exact", ok,
                                "N = (H/8)(W/8)(D/8)/P^3 on 5 configurations"));
    }
    {
        NetConfig cfg;
        SegNet net(cfg, rng.next_u64());
        auto x = rand_tensor({4, 16, 16, 16}, rng, 0.0, 1.0);
        NoGradGuard ng;
        auto trace = net.forward(x);
        double worst = 0.0;
        for (const auto& a : trace.attn) {
            const auto n = a.extent(1);
            for (std::int64_t h = 0; h < a.extent(0); ++h) {
                for (std::int64_t r = 0; r < n; ++r) {
                    double s = 0.0;
                    for (std::int64_t c = 0; c < n; ++c) s += a.value_at((h * n + r) * n + c);
                    worst = std::max(worst, std::abs(s - 1.0));
                }
            }
        }
        std::ostringstream os;
        os << "max |row sum - 1| = " << worst;
        out.push_back(summarize("attention/row_sums", "<= 1e-6", worst <= 1e-6, os.str()));
    }
    return out;
}

}  // namespace mstkd::verify
