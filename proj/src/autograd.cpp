#include "cfgen/autograd.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cfgen {

// ---- parameters -------------------------------------------------------------

Parameter& ParamStore::add(const std::string& name, Mat value, bool trainable) {
    if (index_.count(name)) fail(ErrorKind::Config, "duplicate parameter " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->grad = Mat::Zero(value.rows(), value.cols());
    p->adam_m = Mat::Zero(value.rows(), value.cols());
    p->adam_v = Mat::Zero(value.rows(), value.cols());
    p->value = std::move(value);
    p->trainable = trainable;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
}

Parameter& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::Config, "unknown parameter " + name);
    return *params_[it->second];
}

const Parameter& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::Config, "unknown parameter " + name);
    return *params_[it->second];
}

void ParamStore::remove(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::Config, "unknown parameter " + name);
    params_.erase(params_.begin() + static_cast<std::ptrdiff_t>(it->second));
    index_.clear();
    for (size_t i = 0; i < params_.size(); ++i) index_[params_[i]->name] = i;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p->grad.setZero();
}

size_t ParamStore::parameter_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += static_cast<size_t>(p->value.size());
    return n;
}

std::string ParamStore::checksum() const {
    std::vector<uint8_t> bytes;
    for (const auto& p : params_) {
        bytes.insert(bytes.end(), p->name.begin(), p->name.end());
        const auto* raw = reinterpret_cast<const uint8_t*>(p->value.data());
        bytes.insert(bytes.end(), raw, raw + p->value.size() * sizeof(float));
    }
    return sha256_hex(bytes);
}

ParamStore ParamStore::clone() const {
    ParamStore out;
    for (const auto& p : params_) {
        auto& q = out.add(p->name, p->value, p->trainable);
        q.adam_m = p->adam_m;
        q.adam_v = p->adam_v;
    }
    return out;
}

void adam_step(ParamStore& store, const AdamConfig& cfg, long step) {
    double sq = 0;
    for (const auto& p : store.all())
        if (p->trainable) sq += p->grad.cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) fail(ErrorKind::Divergence, "non-finite gradient norm at step " + std::to_string(step), step);
    const double scale = (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (auto& p : store.all()) {
        if (!p->trainable) continue;
        float* w = p->value.data();
        const float* g = p->grad.data();
        float* m = p->adam_m.data();
        float* v = p->adam_v.data();
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            const double gi = g[i] * scale;
            m[i] = static_cast<float>(cfg.beta1 * m[i] + (1 - cfg.beta1) * gi);
            v[i] = static_cast<float>(cfg.beta2 * v[i] + (1 - cfg.beta2) * gi * gi);
            const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
            w[i] = static_cast<float>(w[i] - cfg.lr * (update + cfg.weight_decay * w[i]));
        }
    }
}

Mat randn(int rows, int cols, float stddev, Rng& rng) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal() * stddev);
    return m;
}

// ---- im2col -------------------------------------------------------------------

Mat im2col(const Mat& x, int height, int width, int k, int stride) {
    const int c = static_cast<int>(x.cols());
    const int pad = k / 2;
    const int ho = (height + 2 * pad - k) / stride + 1;
    const int wo = (width + 2 * pad - k) / stride + 1;
    Mat cols = Mat::Zero(ho * wo, k * k * c);
    for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
            float* dst = cols.row(oy * wo + ox).data();
            for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= height) continue;
                for (int kx = 0; kx < k; ++kx) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= width) continue;
                    std::memcpy(dst + (ky * k + kx) * c, x.row(iy * width + ix).data(), sizeof(float) * c);
                }
            }
        }
    return cols;
}

Mat col2im(const Mat& cols, int height, int width, int channels, int k, int stride) {
    const int pad = k / 2;
    const int ho = (height + 2 * pad - k) / stride + 1;
    const int wo = (width + 2 * pad - k) / stride + 1;
    Mat x = Mat::Zero(height * width, channels);
    for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
            const float* src = cols.row(oy * wo + ox).data();
            for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= height) continue;
                for (int kx = 0; kx < k; ++kx) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= width) continue;
                    float* dst = x.row(iy * width + ix).data();
                    const float* s = src + (ky * k + kx) * channels;
                    for (int ch = 0; ch < channels; ++ch) dst[ch] += s[ch];
                }
            }
        }
    return x;
}

// ---- tape -----------------------------------------------------------------------

Tape::Var Tape::push(Mat value, std::function<void(Tape&, const Mat&)> back) {
    nodes_.push_back(Node{std::move(value), Mat(), std::move(back), nullptr});
    return static_cast<Var>(nodes_.size() - 1);
}

Mat& Tape::grad(Var v) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

Tape::Var Tape::constant(Mat value) { return push(std::move(value)); }

Tape::Var Tape::param(Parameter& p) {
    Var v = push(p.value);
    nodes_.back().param = &p;
    return v;
}

Tape::Var Tape::custom(Mat value, std::vector<Var>, std::function<void(Tape&, const Mat&)> backward) {
    return push(std::move(value), std::move(backward));
}

Tape::Var Tape::matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows()) fail(ErrorKind::Shape, "matmul inner dimensions differ");
    Mat out = value(a) * value(b);
    return push(std::move(out), [a, b](Tape& t, const Mat& g) {
        t.grad(a).noalias() += g * t.value(b).transpose();
        t.grad(b).noalias() += t.value(a).transpose() * g;
    });
}

Tape::Var Tape::matmul_nt(Var a, Var b) {
    if (value(a).cols() != value(b).cols()) fail(ErrorKind::Shape, "matmul_nt inner dimensions differ");
    Mat out = value(a) * value(b).transpose();
    return push(std::move(out), [a, b](Tape& t, const Mat& g) {
        t.grad(a).noalias() += g * t.value(b);
        t.grad(b).noalias() += g.transpose() * t.value(a);
    });
}

Tape::Var Tape::add(Var a, Var b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
        fail(ErrorKind::Shape, "add shape mismatch");
    Mat out = value(a) + value(b);
    return push(std::move(out), [a, b](Tape& t, const Mat& g) {
        t.grad(a) += g;
        t.grad(b) += g;
    });
}

Tape::Var Tape::add_row(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) fail(ErrorKind::Shape, "add_row shape mismatch");
    Mat out = value(a).rowwise() + value(row).row(0);
    return push(std::move(out), [a, row](Tape& t, const Mat& g) {
        t.grad(a) += g;
        t.grad(row) += g.colwise().sum();
    });
}

Tape::Var Tape::scale(Var a, float s) {
    Mat out = value(a) * s;
    return push(std::move(out), [a, s](Tape& t, const Mat& g) { t.grad(a) += g * s; });
}

Tape::Var Tape::mul_const(Var a, const Mat& m) {
    Mat out = value(a).cwiseProduct(m);
    return push(std::move(out), [a, m](Tape& t, const Mat& g) { t.grad(a) += g.cwiseProduct(m); });
}

Tape::Var Tape::silu(Var a) {
    const Mat& x = value(a);
    Mat sig = (1.0f + (-x.array()).exp()).inverse().matrix();
    Mat out = x.cwiseProduct(sig);
    return push(std::move(out), [a, sig](Tape& t, const Mat& g) {
        const Mat& x = t.value(a);
        t.grad(a).array() += g.array() * (sig.array() * (1.0f + x.array() * (1.0f - sig.array())));
    });
}

Tape::Var Tape::relu(Var a) {
    Mat out = value(a).cwiseMax(0.0f);
    return push(std::move(out), [a](Tape& t, const Mat& g) {
        t.grad(a).array() += (t.value(a).array() > 0.0f).select(g.array(), 0.0f);
    });
}

Tape::Var Tape::softmax_rows(Var a) {
    const Mat& x = value(a);
    Mat out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float mx = x.row(r).maxCoeff();
        out.row(r) = (x.row(r).array() - mx).exp().matrix();
        out.row(r) /= out.row(r).sum();
    }
    const Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), [a, self](Tape& t, const Mat& g) {
        const Mat& y = t.value(self);
        Eigen::VectorXf dot = g.cwiseProduct(y).rowwise().sum();
        t.grad(a).array() += y.array() * (g.colwise() - dot).array();
    });
}

Tape::Var Tape::layernorm(Var a, Var gamma, Var beta, float eps) {
    const Mat& x = value(a);
    const Eigen::Index n = x.cols();
    Mat xhat(x.rows(), n);
    Eigen::VectorXf inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const float mu = x.row(r).mean();
        const float var = (x.row(r).array() - mu).square().mean();
        inv_std[r] = 1.0f / std::sqrt(var + eps);
        xhat.row(r) = (x.row(r).array() - mu) * inv_std[r];
    }
    Mat out = (xhat.array().rowwise() * value(gamma).row(0).array()).rowwise() + value(beta).row(0).array();
    return push(std::move(out), [a, gamma, beta, xhat, inv_std, n](Tape& t, const Mat& g) {
        t.grad(gamma) += g.cwiseProduct(xhat).colwise().sum();
        t.grad(beta) += g.colwise().sum();
        Mat dxhat = g.array().rowwise() * t.value(gamma).row(0).array();
        Mat& ga = t.grad(a);
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
            const float m1 = dxhat.row(r).mean();
            const float m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() / static_cast<float>(n);
            ga.row(r).array() += inv_std[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
    });
}

Tape::Var Tape::concat_cols(Var a, Var b) {
    const Mat& x = value(a);
    const Mat& y = value(b);
    if (x.rows() != y.rows()) fail(ErrorKind::Shape, "concat_cols row mismatch");
    Mat out(x.rows(), x.cols() + y.cols());
    out << x, y;
    const Eigen::Index ca = x.cols(), cb = y.cols();
    return push(std::move(out), [a, b, ca, cb](Tape& t, const Mat& g) {
        t.grad(a) += g.leftCols(ca);
        t.grad(b) += g.rightCols(cb);
    });
}

Tape::Var Tape::concat_rows(Var a, Var b) {
    const Mat& x = value(a);
    const Mat& y = value(b);
    if (x.cols() != y.cols()) fail(ErrorKind::Shape, "concat_rows column mismatch");
    Mat out(x.rows() + y.rows(), x.cols());
    out << x, y;
    const Eigen::Index ra = x.rows(), rb = y.rows();
    return push(std::move(out), [a, b, ra, rb](Tape& t, const Mat& g) {
        t.grad(a) += g.topRows(ra);
        t.grad(b) += g.bottomRows(rb);
    });
}

Tape::Var Tape::mean_rows(Var a) {
    Mat out = value(a).colwise().mean();
    const float inv = 1.0f / static_cast<float>(value(a).rows());
    return push(std::move(out), [a, inv](Tape& t, const Mat& g) { t.grad(a).rowwise() += g.row(0) * inv; });
}

Tape::Var Tape::gather_rows(Var table, const std::vector<int>& ids) {
    const Mat& w = value(table);
    Mat out(static_cast<Eigen::Index>(ids.size()), w.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= w.rows()) fail(ErrorKind::Vocabulary, "token id out of range");
        out.row(static_cast<Eigen::Index>(i)) = w.row(ids[i]);
    }
    return push(std::move(out), [table, ids](Tape& t, const Mat& g) {
        Mat& gt = t.grad(table);
        for (size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

Tape::Var Tape::slice_rows(Var a, int begin, int count) {
    Mat out = value(a).middleRows(begin, count);
    return push(std::move(out), [a, begin, count](Tape& t, const Mat& g) { t.grad(a).middleRows(begin, count) += g; });
}

Tape::Var Tape::conv2d(Var x, int height, int width, Var weight, Var bias, int k, int stride) {
    const int cin = static_cast<int>(value(x).cols());
    if (value(x).rows() != height * width) fail(ErrorKind::Shape, "conv2d input rows do not match height*width");
    if (value(weight).rows() != k * k * cin) fail(ErrorKind::Shape, "conv2d weight rows do not match k*k*cin");
    Mat cols = im2col(value(x), height, width, k, stride);
    Mat out = cols * value(weight);
    if (bias >= 0) out.rowwise() += value(bias).row(0);
    return push(std::move(out), [x, weight, bias, cols = std::move(cols), height, width, cin, k, stride](Tape& t, const Mat& g) {
        t.grad(weight).noalias() += cols.transpose() * g;
        if (bias >= 0) t.grad(bias) += g.colwise().sum();
        Mat dcols = g * t.value(weight).transpose();
        t.grad(x) += col2im(dcols, height, width, cin, k, stride);
    });
}

Tape::Var Tape::upsample2x(Var x, int height, int width) {
    const Mat& v = value(x);
    Mat out(4 * height * width, v.cols());
    for (int y = 0; y < 2 * height; ++y)
        for (int xx = 0; xx < 2 * width; ++xx) out.row(y * 2 * width + xx) = v.row((y / 2) * width + xx / 2);
    return push(std::move(out), [x, height, width](Tape& t, const Mat& g) {
        Mat& gx = t.grad(x);
        for (int y = 0; y < 2 * height; ++y)
            for (int xx = 0; xx < 2 * width; ++xx) gx.row((y / 2) * width + xx / 2) += g.row(y * 2 * width + xx);
    });
}

Tape::Var Tape::avgpool(Var x, int height, int width, int factor) {
    const Mat& v = value(x);
    const int ho = height / factor, wo = width / factor;
    Mat out = Mat::Zero(ho * wo, v.cols());
    const float inv = 1.0f / static_cast<float>(factor * factor);
    for (int y = 0; y < height; ++y)
        for (int xx = 0; xx < width; ++xx) out.row((y / factor) * wo + xx / factor) += v.row(y * width + xx) * inv;
    return push(std::move(out), [x, height, width, factor, wo, inv](Tape& t, const Mat& g) {
        Mat& gx = t.grad(x);
        for (int y = 0; y < height; ++y)
            for (int xx = 0; xx < width; ++xx) gx.row(y * width + xx) += g.row((y / factor) * wo + xx / factor) * inv;
    });
}

Tape::Var Tape::mse(Var a, const Mat& target) {
    const Mat& x = value(a);
    if (x.rows() != target.rows() || x.cols() != target.cols()) fail(ErrorKind::Shape, "mse shape mismatch");
    Mat diff = x - target;
    Mat out(1, 1);
    out(0, 0) = diff.squaredNorm() / static_cast<float>(diff.size());
    const float k = 2.0f / static_cast<float>(diff.size());
    return push(std::move(out), [a, diff = std::move(diff), k](Tape& t, const Mat& g) { t.grad(a) += diff * (k * g(0, 0)); });
}

void Tape::backward(Var root) {
    Mat seed = Mat::Ones(value(root).rows(), value(root).cols());
    backward(root, seed);
}

void Tape::backward(Var root, const Mat& seed) {
    grad(root) += seed;
    for (size_t i = static_cast<size_t>(root) + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.size() == 0) continue;
        if (n.back) n.back(*this, n.grad);
        if (n.param && n.param->trainable) n.param->grad += n.grad;
    }
}

Tape::Var Tape::stack_rows(const std::vector<Var>& parts) {
    if (parts.empty()) fail(ErrorKind::Shape, "stack_rows needs at least one part");
    Eigen::Index rows = 0;
    const Eigen::Index cols = value(parts[0]).cols();
    for (Var v : parts) {
        if (value(v).cols() != cols) fail(ErrorKind::Shape, "stack_rows column mismatch");
        rows += value(v).rows();
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (Var v : parts) {
        out.middleRows(r, value(v).rows()) = value(v);
        r += value(v).rows();
    }
    return push(std::move(out), [parts](Tape& t, const Mat& g) {
        Eigen::Index r = 0;
        for (Var v : parts) {
            const Eigen::Index n = t.value(v).rows();
            t.grad(v) += g.middleRows(r, n);
            r += n;
        }
    });
}

Tape::Var Tape::reshape(Var a, int rows, int cols) {
    const Mat& x = value(a);
    if (static_cast<Eigen::Index>(rows) * cols != x.size()) fail(ErrorKind::Shape, "reshape changes the element count");
    Mat out = Eigen::Map<const Mat>(x.data(), rows, cols);
    const Eigen::Index r0 = x.rows(), c0 = x.cols();
    return push(std::move(out), [a, r0, c0](Tape& t, const Mat& g) {
        t.grad(a) += Eigen::Map<const Mat>(g.data(), r0, c0);
    });
}

Tape::Var Tape::l2_normalize_rows(Var a) {
    const Mat& x = value(a);
    Eigen::VectorXf norms = x.rowwise().norm();
    for (Eigen::Index r = 0; r < norms.size(); ++r)
        if (!(norms[r] > 0.0f) || !std::isfinite(norms[r])) fail(ErrorKind::Degenerate, "zero-norm embedding");
    Mat out = norms.cwiseInverse().asDiagonal() * x;
    const Var self = static_cast<Var>(nodes_.size());
    return push(std::move(out), [a, self, norms](Tape& t, const Mat& g) {
        const Mat& y = t.value(self);
        Eigen::VectorXf dot = g.cwiseProduct(y).rowwise().sum();
        t.grad(a) += norms.cwiseInverse().asDiagonal() * (g - dot.asDiagonal() * y);
    });
}

// ---- checkpoint container -------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'F', 'G', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
    for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>(static_cast<uint64_t>(v) >> (8 * i)));
}

struct Reader {
    const std::vector<uint8_t>& bytes;
    size_t pos = 0;

    template <typename T>
    T get() {
        need(sizeof(T));
        uint64_t v = 0;
        for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(bytes[pos + i]) << (8 * i);
        pos += sizeof(T);
        return static_cast<T>(v);
    }
    void need(size_t n) const {
        if (pos + n > bytes.size()) fail(ErrorKind::Io, "truncated checkpoint");
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const nlohmann::json& meta, const std::vector<NamedTensor>& tensors) {
    std::vector<uint8_t> out(kMagic, kMagic + 8);
    put<uint32_t>(out, kCheckpointVersion);
    put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    const std::string meta_text = meta.dump();
    put<uint32_t>(out, static_cast<uint32_t>(meta_text.size()));
    out.insert(out.end(), meta_text.begin(), meta_text.end());
    for (const auto& t : tensors) {
        put<uint16_t>(out, static_cast<uint16_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        put<uint8_t>(out, 0);
        put<uint8_t>(out, 2);
        put<uint32_t>(out, static_cast<uint32_t>(t.value.rows()));
        put<uint32_t>(out, static_cast<uint32_t>(t.value.cols()));
        for (Eigen::Index i = 0; i < t.value.size(); ++i) {
            uint32_t bits;
            std::memcpy(&bits, t.value.data() + i, 4);
            put<uint32_t>(out, bits);
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::Io, "cannot write checkpoint " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) fail(ErrorKind::Io, "short write to " + path);
}

std::pair<nlohmann::json, std::vector<NamedTensor>> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::Io, "cannot open checkpoint " + path);
    const std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, 8) != 0) fail(ErrorKind::Io, path + " is not a checkpoint");
    Reader r{bytes, 8};
    const auto version = r.get<uint32_t>();
    if (version != kCheckpointVersion) fail(ErrorKind::Io, "unsupported checkpoint version " + std::to_string(version));
    const auto count = r.get<uint32_t>();
    const auto meta_len = r.get<uint32_t>();
    r.need(meta_len);
    nlohmann::json meta = nlohmann::json::parse(bytes.begin() + static_cast<long>(r.pos),
                                                bytes.begin() + static_cast<long>(r.pos + meta_len));
    r.pos += meta_len;
    std::vector<NamedTensor> tensors;
    for (uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto name_len = r.get<uint16_t>();
        r.need(name_len);
        t.name.assign(bytes.begin() + static_cast<long>(r.pos), bytes.begin() + static_cast<long>(r.pos + name_len));
        r.pos += name_len;
        if (r.get<uint8_t>() != 0) fail(ErrorKind::Io, "unsupported tensor dtype in " + path);
        const auto ndim = r.get<uint8_t>();
        std::vector<uint32_t> dims;
        for (int d = 0; d < ndim; ++d) dims.push_back(r.get<uint32_t>());
        uint32_t rows = 1, cols = 1;
        if (ndim == 1) cols = dims[0];
        else if (ndim == 2) rows = dims[0], cols = dims[1];
        else if (ndim != 0) fail(ErrorKind::Io, "tensor rank above 2 in " + path);
        t.value.resize(rows, cols);
        for (Eigen::Index j = 0; j < t.value.size(); ++j) {
            const auto bits = r.get<uint32_t>();
            std::memcpy(t.value.data() + j, &bits, 4);
        }
        tensors.push_back(std::move(t));
    }
    if (r.pos != bytes.size()) fail(ErrorKind::Io, "trailing bytes in checkpoint " + path);
    return {meta, tensors};
}

std::vector<NamedTensor> export_params(const ParamStore& store, bool with_adam) {
    std::vector<NamedTensor> out;
    for (const auto& p : store.all()) {
        out.push_back({p->name, p->value});
        if (with_adam) {
            out.push_back({p->name + "@adam_m", p->adam_m});
            out.push_back({p->name + "@adam_v", p->adam_v});
        }
    }
    return out;
}

void import_params(ParamStore& store, const std::vector<NamedTensor>& tensors, bool with_adam) {
    std::map<std::string, const Mat*> by_name;
    for (const auto& t : tensors) by_name[t.name] = &t.value;
    for (auto& p : store.all()) {
        auto load = [&](const std::string& name, Mat& dst) {
            auto it = by_name.find(name);
            if (it == by_name.end()) fail(ErrorKind::Io, "checkpoint is missing tensor " + name);
            if (it->second->rows() != dst.rows() || it->second->cols() != dst.cols())
                fail(ErrorKind::Shape, "checkpoint tensor " + name + " has the wrong shape");
            dst = *it->second;
        };
        load(p->name, p->value);
        if (with_adam) {
            load(p->name + "@adam_m", p->adam_m);
            load(p->name + "@adam_v", p->adam_v);
        }
    }
}

}  // namespace cfgen
