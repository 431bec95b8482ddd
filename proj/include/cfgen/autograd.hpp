#pragma once

#include <Eigen/Core>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cfgen/core.hpp"
#include "json.hpp"

namespace cfgen {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
    std::string name;
    Mat value;
    Mat grad;
    Mat adam_m;
    Mat adam_v;
    bool trainable = true;
};

// Named parameters in insertion order; order is part of the checkpoint format.
class ParamStore {
public:
    Parameter& add(const std::string& name, Mat value, bool trainable = true);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    void remove(const std::string& name);

    std::vector<std::unique_ptr<Parameter>>& all() { return params_; }
    const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }

    void zero_grad();
    size_t parameter_count() const;
    std::string checksum() const;

    ParamStore clone() const;

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::map<std::string, size_t> index_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
    double grad_clip = 0.0;     // global norm; 0 disables
};

// One Adam update over trainable parameters; `step` is 1-based.
void adam_step(ParamStore& store, const AdamConfig& cfg, long step);

// Reverse-mode tape over row-major float matrices. Feature maps are stored as
// [H*W x C] with the spatial index row-major.
class Tape {
public:
    using Var = int;

    Var constant(Mat value);
    Var param(Parameter& p);
    const Mat& value(Var v) const { return nodes_[static_cast<size_t>(v)].value; }
    Mat& grad(Var v);

    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);  // a * b^T
    Var add(Var a, Var b);
    Var add_row(Var a, Var row);  // broadcast a 1 x C row over every row of a
    Var scale(Var a, float s);
    Var mul_const(Var a, const Mat& m);  // elementwise
    Var silu(Var a);
    Var relu(Var a);
    Var softmax_rows(Var a);
    Var layernorm(Var a, Var gamma, Var beta, float eps = 1e-5f);
    Var concat_cols(Var a, Var b);
    Var concat_rows(Var a, Var b);
    Var stack_rows(const std::vector<Var>& parts);
    Var mean_rows(Var a);
    Var gather_rows(Var table, const std::vector<int>& ids);
    Var slice_rows(Var a, int begin, int count);
    Var reshape(Var a, int rows, int cols);  // row-major reinterpretation
    // Rows scaled to unit length; a zero row raises a degenerate-input error.
    Var l2_normalize_rows(Var a);

    // k x k convolution with zero padding k/2; weight is [k*k*cin x cout].
    Var conv2d(Var x, int height, int width, Var weight, Var bias, int k, int stride);
    Var upsample2x(Var x, int height, int width);
    Var avgpool(Var x, int height, int width, int factor);

    Var mse(Var a, const Mat& target);

    // Adds a node computed outside the tape; `backward` receives the output
    // gradient and must accumulate into the inputs' gradients.
    Var custom(Mat value, std::vector<Var> inputs, std::function<void(Tape&, const Mat&)> backward);

    void backward(Var root);
    void backward(Var root, const Mat& seed);
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        std::function<void(Tape&, const Mat&)> back;
        Parameter* param = nullptr;
    };
    Var push(Mat value, std::function<void(Tape&, const Mat&)> back = nullptr);
    std::vector<Node> nodes_;
};

// im2col for HWC feature maps, zero padding k/2.
Mat im2col(const Mat& x, int height, int width, int k, int stride);
Mat col2im(const Mat& cols, int height, int width, int channels, int k, int stride);

// Deterministic initializers.
Mat randn(int rows, int cols, float stddev, Rng& rng);

// Checkpoint container shared by the denoiser and the encoders:
// "CFGCKPT\0", u32 version, u32 tensor count, u32 metadata length + JSON,
// then per tensor: u16 name length, name, u8 dtype (0 = f32), u8 ndim,
// u32 dims..., little-endian float32 data.
struct NamedTensor {
    std::string name;
    Mat value;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const nlohmann::json& meta, const std::vector<NamedTensor>& tensors);
std::pair<nlohmann::json, std::vector<NamedTensor>> load_checkpoint(const std::string& path);

std::vector<NamedTensor> export_params(const ParamStore& store, bool with_adam = false);
void import_params(ParamStore& store, const std::vector<NamedTensor>& tensors, bool with_adam = false);

}  // namespace cfgen
