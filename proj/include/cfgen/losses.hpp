#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cfgen/autograd.hpp"

namespace cfgen {

// Learnable loss parameters. The sigmoid losses use a multiplicative logit
// scale and a bias; the softmax losses divide by a separate temperature.
// Both positive quantities are stored as logs.
struct LossParams {
    double log_scale = std::log(10.0);
    // The sigmoid terms read softplus(l(-scale S + b)), so the logit is
    // scale S - b: b = +10 is the usual -10 logit bias.
    double bias = 10.0;
    double log_temperature = std::log(0.07);

    double scale() const { return std::exp(log_scale); }
    double temperature() const { return std::exp(log_temperature); }
};

struct LossReport {
    double value = 0;
    long long similarity_eval_count = 0;
    double intra = 0;
    double inter = 0;
    double neg = 0;
    bool inter_skipped = false;  // single-set batch
};

// Gradients of a loss value. Only the fields relevant to the loss are filled.
struct LossGrad {
    MatD d_sim;                     // contrastive / inter-set
    std::vector<MatD> d_sets;       // per-set intra similarities
    std::vector<double> d_pos, d_neg;  // negative-text similarities
    double d_scale = 0;             // w.r.t. the scale itself (not its log)
    double d_bias = 0;
    double d_temperature = 0;
};

// log(1 + e^z) and its derivative.
double softplus(double z);
double sigmoid(double z);

// -sum_i log softmax_j(S_ij / temperature) at j = i.
LossReport contrastive_loss(const MatD& S, double temperature, LossGrad* grad = nullptr);

// -sum_ij log sigmoid(-l_ij (-scale S_ij + b)) = sum_ij softplus(l_ij (-scale S_ij + b)).
LossReport intra_set_loss(const MatD& S, const MatD& labels, double scale, double bias, LossGrad* grad = nullptr);

// sum_{i != j} softplus(scale R_ij - b).
LossReport inter_set_loss(const MatD& R, double scale, double bias, LossGrad* grad = nullptr);

struct SetBatch {
    std::vector<MatD> set_sims;  // n matrices, m x m; row = image, column = caption
    std::vector<MatD> labels;    // n matrices of +-1; entry (0, 0) is the real pair
    MatD rep_sims;               // n x n similarities of the real pairs across sets
};

inline long long similarity_eval_count(long long n, long long m) { return n * m * m + n * (n - 1); }

LossReport sets_loss(const SetBatch& batch, double scale, double bias, LossGrad* grad = nullptr);

// Two-way softmax of the true caption against its permutation, per item.
LossReport neg_text_loss(const std::vector<double>& pos, const std::vector<double>& neg, double temperature,
                         LossGrad* grad = nullptr);

struct NegTextBatch {
    std::vector<double> pos, neg;
};

LossReport total_loss(const SetBatch& batch, const std::optional<NegTextBatch>& negs, const LossParams& params,
                      LossGrad* grad = nullptr);

// One JSON line per training step.
nlohmann::json loss_report_json(long step, const LossReport& r, const LossParams& p);

}  // namespace cfgen
