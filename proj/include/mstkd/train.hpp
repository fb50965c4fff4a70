#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "mstkd/distill.hpp"
#include "mstkd/gsme.hpp"
#include "mstkd/metrics.hpp"
#include "mstkd/net.hpp"
#include "mstkd/synth.hpp"

namespace mstkd {

struct TrainConfig {
    NetConfig net;
    LossWeights weights;
    double lr = 0.0001;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    int epochs = 30;
    int batch_size = 1;
    std::uint64_t seed = 1;
    bool use_ms_tkd = true;
    bool use_gsme = true;
    bool use_slkd = true;
    bool augment = false;

    void validate() const;
    // The teacher is consulted only while some distillation term is active;
    // with all three flags off the student trains purely supervised.
    bool distillation_active() const { return use_ms_tkd || use_gsme || use_slkd; }
};

// Adam with bias correction; moments stored per parameter tensor.
struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::int64_t step = 0;
};
AdamState make_adam_state(const std::vector<Tensor>& params);
void adam_step(const std::vector<Tensor>& params, AdamState& state, double lr, double beta1,
               double beta2, double eps);

// 1 - mean over region channels of (2*sum(p*g)+s)/(sum(p)+sum(g)+s),
// p = sigmoid(logits), smoothing s = 1e-5.
Tensor soft_dice_loss(const Tensor& logits, const Tensor& label);

// Weighted joint loss; disabled terms contribute exact zeros.
struct TotalLoss {
    Tensor total;
    Tensor ms_tkd, logit, gsme, dice;  // undefined when the term is off
    double ms_tkd_value() const { return ms_tkd.defined() ? ms_tkd.item() : 0.0; }
    double logit_value() const { return logit.defined() ? logit.item() : 0.0; }
    double gsme_value() const { return gsme.defined() ? gsme.item() : 0.0; }
    double dice_value() const { return dice.defined() ? dice.item() : 0.0; }
};
TotalLoss total_loss(const ForwardTrace& teacher, const ForwardTrace& student, const Tensor& adv,
                     const Tensor& label, const LossWeights& w, bool use_ms_tkd, bool use_gsme,
                     bool use_slkd);

struct TrainLogRow {
    int epoch = 0;
    double ms_tkd = 0, logit = 0, gsme = 0, dice = 0, d_loss = 0, total = 0;
};

struct TrainResult {
    std::vector<NamedTensor> checkpoint;
    std::vector<NamedTensor> discriminator;  // student phase with style matching on
    std::vector<TrainLogRow> log;            // one row per epoch (mean losses)
    std::array<std::int64_t, 15> mask_histogram{};
    std::int64_t teacher_reads = 0;
};

// Phase 1: all four modalities, soft dice only.
TrainResult train_teacher(const TrainConfig& cfg, const Dataset& ds);
// Phase 2: modality dropout + joint distillation loss against a frozen teacher.
TrainResult train_student(const TrainConfig& cfg, const Dataset& ds,
                          const std::vector<NamedTensor>& teacher_ckpt);

struct EvalResult {
    std::vector<MetricsRow> rows;             // 15 combinations x 3 regions
    std::vector<MetricsRow> region_averages;  // one per region, over combinations
};

// Test-split evaluation over every modality combination. The predictor maps a
// masked (4,H,W,D) image to logits; evaluate_model wires in a checkpointed net.
EvalResult evaluate_predictions(const Dataset& ds,
                                const std::function<Tensor(const Tensor&, const VolumeCase&)>& predict);
EvalResult evaluate_model(const NetConfig& cfg, const std::vector<NamedTensor>& ckpt,
                          const Dataset& ds);

double mean_region_dice(const EvalResult& r, const std::string& region);

// Deterministic text emissions.
void write_train_log_csv(const std::string& path, const TrainResult& result);
void write_mask_histogram_csv(const std::string& path, const TrainResult& result);
void write_eval_csv(const std::string& path, const EvalResult& result);
void write_eval_markdown(const std::string& path, const EvalResult& result);
void write_dice_barchart_svg(const std::string& path, const EvalResult& result);

}  // namespace mstkd
