#include "mstkd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace mstkd {

namespace {

std::vector<NamedTensor> snapshot(const std::vector<NamedTensor>& params) {
    std::vector<NamedTensor> out;
    out.reserve(params.size());
    for (const auto& nt : params) out.push_back({nt.name, nt.tensor.detach()});
    return out;
}

Tensor channel_slice(const Tensor& t, std::int64_t c) {
    const std::int64_t vol = t.numel() / t.extent(0);
    std::vector<double> d(t.data().begin() + c * vol, t.data().begin() + (c + 1) * vol);
    return Tensor::from_data({t.extent(1), t.extent(2), t.extent(3)}, std::move(d));
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void TrainConfig::validate() const {
    net.validate();
    weights.validate();
    if (!(lr > 0.0)) throw value_error("TrainConfig: lr must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw value_error("TrainConfig: adam betas must lie in [0,1)");
    }
    if (epochs < 1) throw value_error("TrainConfig: epochs must be >= 1");
    if (batch_size != 1) throw value_error("TrainConfig: only batch size 1 is supported");
}

AdamState make_adam_state(const std::vector<Tensor>& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
        st.m.emplace_back(p.data().size(), 0.0);
        st.v.emplace_back(p.data().size(), 0.0);
    }
    return st;
}

void adam_step(const std::vector<Tensor>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
    if (params.size() != state.m.size()) {
        throw shape_error("adam_step: state tracks " + std::to_string(state.m.size()) +
                          " tensors, got " + std::to_string(params.size()));
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = const_cast<Tensor&>(params[i]);
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.data().size()) {
            throw shape_error("adam_step: parameter " + std::to_string(i) + " changed shape");
        }
        const bool has_grad = p.has_grad();
        auto& data = p.data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = has_grad ? p.grad()[j] : 0.0;
            if (!std::isfinite(g)) {
                throw numeric_error("adam_step: non-finite gradient in parameter " +
                                    std::to_string(i));
            }
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            data[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        }
    }
}

Tensor soft_dice_loss(const Tensor& logits, const Tensor& label) {
    if (logits.shape() != label.shape()) {
        throw shape_error("soft_dice_loss: shape mismatch " + shape_str(logits.shape()) + " vs " +
                          shape_str(label.shape()));
    }
    constexpr double kSmooth = 1e-5;
    const std::int64_t R = logits.extent(0);
    const std::int64_t V = logits.numel() / R;
    auto ones = Tensor::full({V, 1}, 1.0);
    auto p = reshape(sigmoid(logits), {R, V});
    auto g = reshape(label.detach(), {R, V});
    auto pg_sum = matmul(mul(p, g), ones);  // (R,1)
    auto p_sum = matmul(p, ones);
    auto g_sum = matmul(g, ones);
    auto num = add_scalar(mul_scalar(pg_sum, 2.0), kSmooth);
    auto den = add_scalar(add(p_sum, g_sum), kSmooth);
    return add_scalar(mul_scalar(mean_all(elem_div(num, den)), -1.0), 1.0);
}

TotalLoss total_loss(const ForwardTrace& teacher, const ForwardTrace& student, const Tensor& adv,
                     const Tensor& label, const LossWeights& w, bool use_ms_tkd, bool use_gsme,
                     bool use_slkd) {
    const bool distill = use_ms_tkd || use_gsme || use_slkd;
    TotalLoss out;
    out.dice = soft_dice_loss(student.logits, label);
    Tensor total = mul_scalar(out.dice, w.lambda4);
    if (use_ms_tkd) {
        out.ms_tkd = ms_tkd_loss(teacher, student, w);
        total = add(total, mul_scalar(out.ms_tkd, w.lambda1));
    }
    if (distill) {
        auto mse = logit_mse(teacher.logits, student.logits);
        out.logit = mul_scalar(mse, w.lambda_mse);
        if (use_slkd) {
            auto kl = std_kl_loss(teacher.logits, student.logits, w.tau);
            out.logit = add(out.logit, mul_scalar(kl, w.lambda_kd * w.tau * w.tau));
        }
        total = add(total, mul_scalar(out.logit, w.lambda2));
    }
    if (use_gsme) {
        out.gsme = gsme_loss(style_features(teacher), style_features(student), adv, w);
        total = add(total, mul_scalar(out.gsme, w.lambda3));
    }
    out.total = total;
    return out;
}

namespace {

// Deterministic per-epoch visit order.
std::vector<int> shuffled(const std::vector<int>& ids, Rng& rng) {
    auto out = ids;
    for (int i = static_cast<int>(out.size()) - 1; i > 0; --i) {
        const auto j = rng.uniform_int(0, i);
        std::swap(out[static_cast<std::size_t>(i)], out[static_cast<std::size_t>(j)]);
    }
    return out;
}

}  // namespace

TrainResult train_teacher(const TrainConfig& cfg, const Dataset& ds) {
    cfg.validate();
    if (ds.train_ids.empty()) throw value_error("train_teacher: empty train split");

    SegNet net(cfg.net, cfg.seed);
    auto params = net.parameters();
    auto adam = make_adam_state(params);
    Rng order_rng(cfg.seed ^ 0x0EDEull);
    Rng aug_rng(cfg.seed ^ 0xA26ull);

    TrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double sum = 0.0;
        const auto order = shuffled(ds.train_ids, order_rng);
        for (int idx : order) {
            const auto& base = ds.cases[static_cast<std::size_t>(idx)];
            VolumeCase c = cfg.augment ? augment(base, aug_rng.next_u64()) : base;
            auto trace = net.forward(c.image);
            auto loss = soft_dice_loss(trace.logits, c.label);
            net.zero_grads();
            backward(loss);
            adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
            sum += loss.item();
        }
        TrainLogRow row;
        row.epoch = epoch;
        row.dice = sum / static_cast<double>(order.size());
        row.total = row.dice;
        result.log.push_back(row);
    }
    result.checkpoint = snapshot(net.named_parameters());
    return result;
}

TrainResult train_student(const TrainConfig& cfg, const Dataset& ds,
                          const std::vector<NamedTensor>& teacher_ckpt) {
    cfg.validate();
    if (ds.train_ids.empty()) throw value_error("train_student: empty train split");

    SegNet teacher(cfg.net, 0);
    teacher.load_parameters(teacher_ckpt);
    SegNet student(cfg.net, cfg.seed);
    auto params = student.parameters();
    auto adam = make_adam_state(params);

    const std::int64_t disc_in = 16ll * cfg.net.base_channels + cfg.net.embed_dim;
    Discriminator disc(disc_in, 32, cfg.seed ^ 0xD15Cull);
    auto disc_params = disc.parameters();
    auto disc_adam = make_adam_state(disc_params);

    Rng order_rng(cfg.seed ^ 0x0EDEull);
    Rng aug_rng(cfg.seed ^ 0xA26ull);
    Rng mask_rng(cfg.seed ^ 0x3A5Cull);
    const auto& combos = modality_combinations();
    const bool distill = cfg.distillation_active();

    TrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        TrainLogRow row;
        row.epoch = epoch;
        const auto order = shuffled(ds.train_ids, order_rng);
        for (int idx : order) {
            const auto& base = ds.cases[static_cast<std::size_t>(idx)];
            VolumeCase c = cfg.augment ? augment(base, aug_rng.next_u64()) : base;
            const auto mask_idx = static_cast<std::size_t>(mask_rng.uniform_int(0, 14));
            result.mask_histogram[mask_idx] += 1;
            auto masked = apply_modality_mask(c, combos[mask_idx]);

            ForwardTrace teacher_trace;
            if (distill) {
                NoGradGuard ng;
                teacher_trace = teacher.forward(c.image);
                result.teacher_reads += 1;
            }
            auto student_trace = student.forward(masked);

            Tensor adv_for_student;
            if (cfg.use_gsme) {
                // discriminator step first, then the student sees the updated D
                auto adv = adversarial_loss(disc, teacher_trace.fused, student_trace.fused);
                disc.zero_grads();
                backward(adv.d_loss);
                adam_step(disc_params, disc_adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
                auto adv2 = adversarial_loss(disc, teacher_trace.fused, student_trace.fused);
                adv_for_student = adv2.g_loss;
                row.d_loss += adv.d_loss.item();
            }

            auto losses = total_loss(teacher_trace, student_trace, adv_for_student, c.label,
                                     cfg.weights, cfg.use_ms_tkd, cfg.use_gsme, cfg.use_slkd);
            student.zero_grads();
            backward(losses.total);
            adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

            row.ms_tkd += losses.ms_tkd_value();
            row.logit += losses.logit_value();
            row.gsme += losses.gsme_value();
            row.dice += losses.dice_value();
            row.total += losses.total.item();
        }
        const auto n = static_cast<double>(order.size());
        row.ms_tkd /= n;
        row.logit /= n;
        row.gsme /= n;
        row.dice /= n;
        row.d_loss /= n;
        row.total /= n;
        result.log.push_back(row);
    }
    result.checkpoint = snapshot(student.named_parameters());
    if (cfg.use_gsme) result.discriminator = snapshot(disc.named_parameters());
    return result;
}

EvalResult evaluate_predictions(const Dataset& ds,
                                const std::function<Tensor(const Tensor&, const VolumeCase&)>& predict) {
    if (ds.test_ids.empty()) throw value_error("evaluate: empty test split");
    EvalResult out;
    const auto& combos = modality_combinations();
    std::array<double, 3> region_dice_sum{};
    std::array<double, 3> region_hd_sum{};
    std::array<int, 3> region_hd_count{};

    for (const auto& mask : combos) {
        std::array<double, 3> dice_sum{};
        std::array<double, 3> hd_sum{};
        std::array<int, 3> hd_count{};
        for (int idx : ds.test_ids) {
            const auto& c = ds.cases[static_cast<std::size_t>(idx)];
            auto masked = apply_modality_mask(c, mask);
            Tensor logits;
            {
                NoGradGuard ng;
                logits = predict(masked, c);
            }
            auto pred = binarize(logits, 0.5);
            for (int r = 0; r < 3; ++r) {
                auto pr = channel_slice(pred, r);
                auto gt = channel_slice(c.label, r);
                dice_sum[static_cast<std::size_t>(r)] += dice(pr, gt);
                if (auto h = hd95(pr, gt)) {
                    hd_sum[static_cast<std::size_t>(r)] += *h;
                    hd_count[static_cast<std::size_t>(r)] += 1;
                }
            }
        }
        const auto n = static_cast<double>(ds.test_ids.size());
        for (int r = 0; r < 3; ++r) {
            const auto ur = static_cast<std::size_t>(r);
            MetricsRow row;
            row.mask = mask;
            row.region = kRegionNames[ur];
            row.dice = dice_sum[ur] / n;
            if (hd_count[ur] > 0) row.hd95 = hd_sum[ur] / hd_count[ur];
            out.rows.push_back(row);
            region_dice_sum[ur] += row.dice;
            if (row.hd95) {
                region_hd_sum[ur] += *row.hd95;
                region_hd_count[ur] += 1;
            }
        }
    }
    for (int r = 0; r < 3; ++r) {
        const auto ur = static_cast<std::size_t>(r);
        MetricsRow avg;
        avg.mask = ModalityMask{};  // no bits set marks the average row
        avg.region = kRegionNames[ur];
        avg.dice = region_dice_sum[ur] / 15.0;
        if (region_hd_count[ur] > 0) avg.hd95 = region_hd_sum[ur] / region_hd_count[ur];
        out.region_averages.push_back(avg);
    }
    return out;
}

EvalResult evaluate_model(const NetConfig& cfg, const std::vector<NamedTensor>& ckpt,
                          const Dataset& ds) {
    SegNet net(cfg, 0);
    net.load_parameters(ckpt);
    return evaluate_predictions(
        ds, [&net](const Tensor& masked, const VolumeCase&) { return net.forward(masked).logits; });
}

double mean_region_dice(const EvalResult& r, const std::string& region) {
    for (const auto& row : r.region_averages) {
        if (row.region == region) return row.dice;
    }
    throw value_error("mean_region_dice: unknown region " + region);
}

void write_train_log_csv(const std::string& path, const TrainResult& result) {
    std::ofstream os(path);
    if (!os) throw value_error("cannot open for write: " + path);
    os << "epoch,ms_tkd,logit,gsme,dice,d_loss,total\n";
    for (const auto& r : result.log) {
        os << r.epoch << ',' << format_double(r.ms_tkd) << ',' << format_double(r.logit) << ','
           << format_double(r.gsme) << ',' << format_double(r.dice) << ','
           << format_double(r.d_loss) << ',' << format_double(r.total) << "\n";
    }
}

void write_mask_histogram_csv(const std::string& path, const TrainResult& result) {
    std::ofstream os(path);
    if (!os) throw value_error("cannot open for write: " + path);
    os << "mask_bits,label,count\n";
    const auto& combos = modality_combinations();
    for (std::size_t i = 0; i < combos.size(); ++i) {
        os << combos[i].bits() << ',' << combos[i].label() << ',' << result.mask_histogram[i]
           << "\n";
    }
}

void write_eval_csv(const std::string& path, const EvalResult& result) {
    std::ofstream os(path);
    if (!os) throw value_error("cannot open for write: " + path);
    os << "mask_bits,region,dice,hd95\n";
    const auto emit = [&os](const MetricsRow& r, const std::string& mask_field) {
        os << mask_field << ',' << r.region << ',' << format_double(r.dice) << ','
           << (r.hd95 ? format_double(*r.hd95) : "-") << "\n";
    };
    for (const auto& r : result.rows) emit(r, r.mask.bits());
    for (const auto& r : result.region_averages) emit(r, "avg");
}

void write_eval_markdown(const std::string& path, const EvalResult& result) {
    std::ofstream os(path);
    if (!os) throw value_error("cannot open for write: " + path);
    const auto& combos = modality_combinations();
    const auto dots = [](const ModalityMask& m) {
        std::string s;
        for (bool b : m.present) s += b ? "●" : "○";
        return s;
    };
    for (const auto metric : {0, 1}) {
        os << (metric == 0 ? "### Dice\n\n" : "\n### HD95\n\n");
        os << "| Region |";
        for (const auto& m : combos) os << ' ' << dots(m) << " |";
        os << " Avg |\n|---|";
        for (std::size_t i = 0; i < combos.size() + 1; ++i) os << "---|";
        os << "\n";
        for (int r = 0; r < 3; ++r) {
            os << "| " << kRegionNames[static_cast<std::size_t>(r)] << " |";
            for (std::size_t mi = 0; mi < combos.size(); ++mi) {
                const auto& row = result.rows[mi * 3 + static_cast<std::size_t>(r)];
                char buf[32];
                if (metric == 0) {
                    std::snprintf(buf, sizeof(buf), "%.3f", row.dice);
                    os << ' ' << buf << " |";
                } else if (row.hd95) {
                    std::snprintf(buf, sizeof(buf), "%.2f", *row.hd95);
                    os << ' ' << buf << " |";
                } else {
                    os << " - |";
                }
            }
            const auto& avg = result.region_averages[static_cast<std::size_t>(r)];
            char buf[32];
            if (metric == 0) {
                std::snprintf(buf, sizeof(buf), "%.3f", avg.dice);
                os << ' ' << buf << " |\n";
            } else if (avg.hd95) {
                std::snprintf(buf, sizeof(buf), "%.2f", *avg.hd95);
                os << ' ' << buf << " |\n";
            } else {
                os << " - |\n";
            }
        }
    }
    os << "\nModality bit order: FLAIR, T1, T1Gd, T2 (filled = present).\n";
}

void write_dice_barchart_svg(const std::string& path, const EvalResult& result) {
    std::ofstream os(path);
    if (!os) throw value_error("cannot open for write: " + path);
    const auto& combos = modality_combinations();
    const int panel_w = 640, panel_h = 150, margin = 45;
    const int width = panel_w + 2 * margin;
    const int height = 3 * (panel_h + margin) + margin;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    const char* colors[3] = {"#4878d0", "#ee854a", "#6acc64"};
    for (int r = 0; r < 3; ++r) {
        const int top = margin + r * (panel_h + margin);
        os << "<text x=\"" << margin << "\" y=\"" << top - 8 << "\" font-size=\"14\">"
           << kRegionNames[static_cast<std::size_t>(r)] << " Dice per modality combination</text>\n";
        os << "<line x1=\"" << margin << "\" y1=\"" << top + panel_h << "\" x2=\"" << margin + panel_w
           << "\" y2=\"" << top + panel_h << "\" stroke=\"black\"/>\n";
        const double bar_w = static_cast<double>(panel_w) / 15.0;
        for (std::size_t mi = 0; mi < combos.size(); ++mi) {
            const auto& row = result.rows[mi * 3 + static_cast<std::size_t>(r)];
            const double h = std::clamp(row.dice, 0.0, 1.0) * panel_h;
            const double x = margin + static_cast<double>(mi) * bar_w;
            os << "<rect x=\"" << x + 2 << "\" y=\"" << top + panel_h - h << "\" width=\""
               << bar_w - 4 << "\" height=\"" << h << "\" fill=\"" << colors[r] << "\"/>\n";
            os << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << top + panel_h + 12
               << "\" font-size=\"7\" text-anchor=\"middle\">" << combos[mi].bits() << "</text>\n";
        }
    }
    os << "</svg>\n";
}

}  // namespace mstkd
