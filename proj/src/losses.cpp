#include "cfgen/losses.hpp"

#include <cmath>
#include <iostream>

namespace cfgen {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

namespace {

void require_finite(const MatD& m, const char* what) {
    if (!m.allFinite()) fail(ErrorKind::Input, std::string(what) + " contains non-finite values");
}

}  // namespace

LossReport contrastive_loss(const MatD& S, double temperature, LossGrad* grad) {
    if (S.rows() != S.cols() || S.rows() == 0) fail(ErrorKind::Shape, "contrastive loss needs a non-empty square matrix");
    require_finite(S, "similarity matrix");
    const Eigen::Index B = S.rows();
    LossReport r;
    r.similarity_eval_count = B * B;
    if (grad) grad->d_sim = MatD::Zero(B, B);
    for (Eigen::Index i = 0; i < B; ++i) {
        const double mx = S.row(i).maxCoeff() / temperature;
        double z = 0;
        for (Eigen::Index j = 0; j < B; ++j) z += std::exp(S(i, j) / temperature - mx);
        const double lse = mx + std::log(z);
        r.value += lse - S(i, i) / temperature;
        if (grad) {
            for (Eigen::Index j = 0; j < B; ++j) {
                const double p = std::exp(S(i, j) / temperature - lse) - (i == j ? 1.0 : 0.0);
                grad->d_sim(i, j) += p / temperature;
                grad->d_temperature += -p * S(i, j) / (temperature * temperature);
            }
        }
    }
    return r;
}

LossReport intra_set_loss(const MatD& S, const MatD& labels, double scale, double bias, LossGrad* grad) {
    if (S.rows() != labels.rows() || S.cols() != labels.cols()) fail(ErrorKind::Shape, "similarities and labels differ in shape");
    require_finite(S, "similarity matrix");
    for (Eigen::Index i = 0; i < labels.size(); ++i) {
        const double l = labels.data()[i];
        if (l != 1.0 && l != -1.0) fail(ErrorKind::Label, "pair labels must be +1 or -1");
    }
    LossReport r;
    r.similarity_eval_count = S.size();
    MatD dS;
    if (grad) dS = MatD::Zero(S.rows(), S.cols());
    for (Eigen::Index i = 0; i < S.rows(); ++i)
        for (Eigen::Index j = 0; j < S.cols(); ++j) {
            const double l = labels(i, j);
            const double z = l * (-scale * S(i, j) + bias);
            r.value += softplus(z);
            if (grad) {
                const double s = sigmoid(z);
                dS(i, j) = -s * l * scale;
                grad->d_scale += -s * l * S(i, j);
                grad->d_bias += s * l;
            }
        }
    r.intra = r.value;
    if (grad) grad->d_sets.push_back(std::move(dS));
    return r;
}

LossReport inter_set_loss(const MatD& R, double scale, double bias, LossGrad* grad) {
    if (R.rows() != R.cols()) fail(ErrorKind::Shape, "representative similarities must be square");
    if (R.rows() < 2) fail(ErrorKind::InsufficientSets, "inter-set loss needs at least two sets");
    require_finite(R, "representative similarities");
    const Eigen::Index n = R.rows();
    LossReport r;
    r.similarity_eval_count = n * (n - 1);
    if (grad) grad->d_sim = MatD::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            const double z = scale * R(i, j) - bias;
            r.value += softplus(z);
            if (grad) {
                const double s = sigmoid(z);
                grad->d_sim(i, j) = s * scale;
                grad->d_scale += s * R(i, j);
                grad->d_bias += -s;
            }
        }
    r.inter = r.value;
    return r;
}

LossReport sets_loss(const SetBatch& batch, double scale, double bias, LossGrad* grad) {
    const size_t n = batch.set_sims.size();
    if (n == 0) fail(ErrorKind::SetStructure, "batch has no sets");
    if (batch.labels.size() != n) fail(ErrorKind::SetStructure, "each set needs a label matrix");
    const Eigen::Index m = batch.set_sims[0].rows();
    LossReport r;
    if (grad) grad->d_sets.clear();
    for (size_t i = 0; i < n; ++i) {
        const auto& S = batch.set_sims[i];
        if (S.rows() != m || S.cols() != m) fail(ErrorKind::SetStructure, "all sets must have the same size m");
        if (batch.labels[i](0, 0) != 1.0) fail(ErrorKind::SetStructure, "set " + std::to_string(i) + " is missing its real pair");
        const auto part = intra_set_loss(S, batch.labels[i], scale, bias, grad);
        r.intra += part.value;
        r.similarity_eval_count += part.similarity_eval_count;
    }
    if (n >= 2) {
        if (batch.rep_sims.rows() != static_cast<Eigen::Index>(n)) fail(ErrorKind::SetStructure, "representative matrix must be n x n");
        const auto part = inter_set_loss(batch.rep_sims, scale, bias, grad);
        r.inter = part.value;
        r.similarity_eval_count += part.similarity_eval_count;
    } else {
        r.inter_skipped = true;
        if (grad) grad->d_sim = MatD::Zero(1, 1);
        static bool warned = false;
        if (!warned) std::clog << "warning: single-set batch, inter-set loss is 0\n";
        warned = true;
    }
    r.value = r.inter + r.intra;
    return r;
}

LossReport neg_text_loss(const std::vector<double>& pos, const std::vector<double>& neg, double temperature,
                         LossGrad* grad) {
    if (pos.size() != neg.size()) fail(ErrorKind::Input, "every item needs a permuted caption");
    LossReport r;
    r.similarity_eval_count = static_cast<long long>(2 * pos.size());
    if (grad) {
        grad->d_pos.assign(pos.size(), 0.0);
        grad->d_neg.assign(pos.size(), 0.0);
    }
    for (size_t i = 0; i < pos.size(); ++i) {
        if (!std::isfinite(pos[i]) || !std::isfinite(neg[i])) fail(ErrorKind::Input, "non-finite similarity");
        const double z = (neg[i] - pos[i]) / temperature;
        r.value += softplus(z);
        if (grad) {
            const double s = sigmoid(z);
            grad->d_pos[i] = -s / temperature;
            grad->d_neg[i] = s / temperature;
            grad->d_temperature += -s * (neg[i] - pos[i]) / (temperature * temperature);
        }
    }
    r.neg = r.value;
    return r;
}

LossReport total_loss(const SetBatch& batch, const std::optional<NegTextBatch>& negs, const LossParams& params,
                      LossGrad* grad) {
    LossReport r = sets_loss(batch, params.scale(), params.bias, grad);
    if (negs) {
        const auto part = neg_text_loss(negs->pos, negs->neg, params.temperature(), grad);
        r.neg = part.value;
        r.similarity_eval_count += part.similarity_eval_count;
    }
    r.value = r.intra + r.inter + r.neg;
    return r;
}

nlohmann::json loss_report_json(long step, const LossReport& r, const LossParams& p) {
    return nlohmann::json{{"step", step},
                {"loss", r.value},
                {"intra", r.intra},
                {"inter", r.inter},
                {"neg", r.neg},
                {"similarity_eval_count", r.similarity_eval_count},
                {"scale", p.scale()},
                {"bias", p.bias},
                {"temperature", p.temperature()}};
}

}  // namespace cfgen
