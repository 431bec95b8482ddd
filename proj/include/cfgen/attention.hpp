#pragma once

#include <Eigen/Core>
#include <cmath>
#include <vector>

#include "cfgen/core.hpp"

namespace cfgen {

template <typename T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// softmax(q k^T / sqrt(d)) v, returning the attention probabilities through `probs`.
template <typename T>
MatT<T> softmax_attention(const MatT<T>& q, const MatT<T>& k, const MatT<T>& v, MatT<T>* probs = nullptr) {
    if (q.cols() != k.cols()) fail(ErrorKind::Shape, "query and key dimensions differ");
    if (k.rows() != v.rows()) fail(ErrorKind::Shape, "key and value counts differ");
    if (k.rows() == 0) fail(ErrorKind::Shape, "attention needs at least one key");
    const T inv = T(1) / std::sqrt(static_cast<T>(q.cols()));
    MatT<T> p = (q * k.transpose()) * inv;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const T mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
    }
    MatT<T> out = p * v;
    if (probs) *probs = std::move(p);
    return out;
}

template <typename T>
MatT<T> vstack(const MatT<T>& a, const MatT<T>& b) {
    if (a.rows() == 0) return b;
    if (b.rows() == 0) return a;
    if (a.cols() != b.cols()) fail(ErrorKind::Shape, "cannot stack matrices with different widths");
    MatT<T> out(a.rows() + b.rows(), a.cols());
    out << a, b;
    return out;
}

// Attention of queries over the concatenated text and image key/value streams
// of one entity. Either stream may be empty, but not both.
template <typename T>
MatT<T> local_cross_attention(const MatT<T>& q, const MatT<T>& k_text, const MatT<T>& v_text, const MatT<T>& k_image,
                              const MatT<T>& v_image, MatT<T>* probs = nullptr) {
    if (k_text.rows() != v_text.rows() || k_image.rows() != v_image.rows())
        fail(ErrorKind::Shape, "key and value counts differ");
    if (k_text.rows() > 0 && k_text.cols() != q.cols()) fail(ErrorKind::Shape, "text key dimension differs from query");
    if (k_image.rows() > 0 && k_image.cols() != q.cols()) fail(ErrorKind::Shape, "image key dimension differs from query");
    return softmax_attention<T>(q, vstack<T>(k_text, k_image), vstack<T>(v_text, v_image), probs);
}

// Backward of softmax_attention given dOut; accumulates into dq, dk, dv.
template <typename T>
void softmax_attention_backward(const MatT<T>& q, const MatT<T>& k, const MatT<T>& v, const MatT<T>& probs,
                                const MatT<T>& dout, MatT<T>& dq, MatT<T>& dk, MatT<T>& dv) {
    const T inv = T(1) / std::sqrt(static_cast<T>(q.cols()));
    dv.noalias() += probs.transpose() * dout;
    MatT<T> dp = dout * v.transpose();
    Eigen::Matrix<T, Eigen::Dynamic, 1> dot = dp.cwiseProduct(probs).rowwise().sum();
    MatT<T> ds = (probs.array() * (dp.colwise() - dot).array()).matrix() * inv;
    dq.noalias() += ds * k;
    dk.noalias() += ds.transpose() * q;
}

struct GuidanceWeightsPair {
    double local = 0;
    double global = 0;
};

// Parameters of one cross-attention site. q = h Wq + Pq; global keys/values
// use (Wkg, Wvg); entity keys/values use (Wkl, Wvl); the weighted sum of all
// attention outputs is projected back with Wo (no bias).
template <typename T>
struct SiteParams {
    MatT<T> wq, pq, wkg, wvg, wkl, wvl, wo;
};

template <typename T>
struct EntityTokens {
    MatT<T> text;   // [n_text x E]
    MatT<T> image;  // [n_image x E]
    std::vector<T> mask;  // length N, values 0/1
};

template <typename T>
struct SiteGrads {
    MatT<T> h, wq, pq, wkg, wvg, wkl, wvl, wo, global;
    std::vector<MatT<T>> text, image;
};

// One application of the block-guided hidden update:
//   h' = h + (w_g * A_global + sum_i w_l * M_i * A_i) Wo
template <typename T>
class GuidanceSite {
public:
    MatT<T> forward(const MatT<T>& h, const MatT<T>& global, const std::vector<EntityTokens<T>>& entities,
                    const SiteParams<T>& p, GuidanceWeightsPair w) {
        const Eigen::Index n = h.rows();
        if (h.cols() != p.wq.rows() || p.wo.cols() != h.cols()) fail(ErrorKind::Shape, "hidden width does not match site");
        if (p.pq.rows() != n) fail(ErrorKind::Shape, "query positions do not match hidden resolution");
        h_ = h;
        w_ = w;
        has_global_ = global.rows() > 0;
        q_ = h * p.wq + p.pq;
        mix_ = MatT<T>::Zero(n, p.wq.cols());
        if (has_global_) {
            kg_ = global * p.wkg;
            vg_ = global * p.wvg;
            mix_ += static_cast<T>(w.global) * softmax_attention<T>(q_, kg_, vg_, &pg_);
        }
        ent_.clear();
        for (const auto& e : entities) {
            if (static_cast<Eigen::Index>(e.mask.size()) != n) fail(ErrorKind::Shape, "mask resolution does not match hidden state");
            EntityCache c;
            c.n_text = e.text.rows();
            c.k = vstack<T>(e.text, e.image) * p.wkl;
            c.v = vstack<T>(e.text, e.image) * p.wvl;
            c.tokens = vstack<T>(e.text, e.image);
            c.mask = e.mask;
            MatT<T> a = softmax_attention<T>(q_, c.k, c.v, &c.probs);
            for (Eigen::Index r = 0; r < n; ++r)
                if (c.mask[static_cast<size_t>(r)] != T(0))
                    mix_.row(r) += (static_cast<T>(w.local) * c.mask[static_cast<size_t>(r)]) * a.row(r);
            ent_.push_back(std::move(c));
        }
        global_ = global;
        return h + mix_ * p.wo;
    }

    SiteGrads<T> backward(const MatT<T>& dout, const SiteParams<T>& p) const {
        SiteGrads<T> g;
        const Eigen::Index n = h_.rows(), d = p.wq.cols();
        g.h = dout;
        g.wo = mix_.transpose() * dout;
        const MatT<T> dmix = dout * p.wo.transpose();
        MatT<T> dq = MatT<T>::Zero(n, d);
        g.wkg = MatT<T>::Zero(p.wkg.rows(), p.wkg.cols());
        g.wvg = MatT<T>::Zero(p.wvg.rows(), p.wvg.cols());
        g.wkl = MatT<T>::Zero(p.wkl.rows(), p.wkl.cols());
        g.wvl = MatT<T>::Zero(p.wvl.rows(), p.wvl.cols());
        g.global = MatT<T>::Zero(global_.rows(), global_.cols());
        if (has_global_) {
            MatT<T> dk = MatT<T>::Zero(kg_.rows(), d), dv = MatT<T>::Zero(vg_.rows(), vg_.cols());
            softmax_attention_backward<T>(q_, kg_, vg_, pg_, dmix * static_cast<T>(w_.global), dq, dk, dv);
            g.wkg = global_.transpose() * dk;
            g.wvg = global_.transpose() * dv;
            g.global = dk * p.wkg.transpose() + dv * p.wvg.transpose();
        }
        for (const auto& c : ent_) {
            MatT<T> da = MatT<T>::Zero(n, c.v.cols());
            for (Eigen::Index r = 0; r < n; ++r)
                if (c.mask[static_cast<size_t>(r)] != T(0))
                    da.row(r) = (static_cast<T>(w_.local) * c.mask[static_cast<size_t>(r)]) * dmix.row(r);
            MatT<T> dk = MatT<T>::Zero(c.k.rows(), d), dv = MatT<T>::Zero(c.v.rows(), c.v.cols());
            softmax_attention_backward<T>(q_, c.k, c.v, c.probs, da, dq, dk, dv);
            g.wkl += c.tokens.transpose() * dk;
            g.wvl += c.tokens.transpose() * dv;
            MatT<T> dtok = dk * p.wkl.transpose() + dv * p.wvl.transpose();
            g.text.push_back(dtok.topRows(c.n_text));
            g.image.push_back(dtok.bottomRows(dtok.rows() - c.n_text));
        }
        g.pq = dq;
        g.wq = h_.transpose() * dq;
        g.h += dq * p.wq.transpose();
        return g;
    }

private:
    struct EntityCache {
        Eigen::Index n_text = 0;
        MatT<T> tokens, k, v, probs;
        std::vector<T> mask;
    };
    MatT<T> h_, q_, mix_, kg_, vg_, pg_, global_;
    GuidanceWeightsPair w_;
    bool has_global_ = false;
    std::vector<EntityCache> ent_;
};

}  // namespace cfgen
