#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mstkd/rng.hpp"
#include "mstkd/tensor.hpp"

namespace mstkd::verify {

// Central finite-difference check of reverse-mode gradients. `f` must be a
// pure function of `inputs` (it is re-evaluated with perturbed values).
// Error metric per element: |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;
    bool ok(double tol = 1e-4) const { return max_rel_err < tol; }
};

GradCheckReport check_gradient(const std::function<Tensor(std::vector<Tensor>&)>& f,
                               std::vector<Tensor>& inputs, double h = 1e-5);

// One named property check with its tolerance, for reporting.
struct CheckResult {
    std::string name;
    std::string tolerance;
    bool passed = false;
    std::string detail;
};

// Check families run by the release gate and by the acceptance suite.
std::vector<CheckResult> run_gradient_suite(Rng& rng, int instances_per_op);
std::vector<CheckResult> run_loss_gradient_suite(Rng& rng, int instances_per_loss);
std::vector<CheckResult> run_kl_invariance_suite(Rng& rng, int draws);
std::vector<CheckResult> run_evd_identity_suite(Rng& rng);
std::vector<CheckResult> run_gram_suite(Rng& rng);
std::vector<CheckResult> run_metric_oracle_suite(Rng& rng, int instances);
std::vector<CheckResult> run_attention_suite(Rng& rng);

// Independent brute-force oracles (never call the implementations they check).
double dice_oracle(const std::vector<int>& pred, const std::vector<int>& gt);
// Returns false when either boundary set is empty (hd95 undefined).
bool hd95_oracle(const std::vector<int>& pred, const std::vector<int>& gt,
                 std::int64_t H, std::int64_t W, std::int64_t D, double* out);

}  // namespace mstkd::verify
