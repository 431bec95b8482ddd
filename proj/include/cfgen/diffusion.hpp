#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cfgen/attention.hpp"
#include "cfgen/autograd.hpp"
#include "cfgen/image.hpp"
#include "cfgen/scene.hpp"

namespace cfgen {

// t counts completed reverse steps: t = 0 is pure noise, t = T the clean
// image. The forward-process noise level of the state entering reverse step
// t + 1 is k = T - t.
struct DiffusionConfig {
    int total_steps = 200;
    int threshold_step = 100;
    double w_max = 1.0;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int image_size = 32;

    void validate() const;
};

void to_json(json& j, const DiffusionConfig& c);
DiffusionConfig diffusion_config_from_json(const json& j);

GuidanceWeightsPair guidance_weights(int t, const DiffusionConfig& cfg);

// Linear-beta DDPM schedule indexed by noise level k in [1, T]; alpha_bar[0] = 1.
struct NoiseSchedule {
    std::vector<double> beta, alpha, alpha_bar;

    explicit NoiseSchedule(const DiffusionConfig& cfg);
    int steps() const { return static_cast<int>(beta.size()) - 1; }
    double posterior_variance(int k) const;
};

// x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps
std::vector<double> q_sample(const std::vector<double>& x0, const std::vector<double>& eps, int k,
                             const NoiseSchedule& s);
std::vector<double> predict_x0(const std::vector<double>& xk, const std::vector<double>& eps, int k,
                               const NoiseSchedule& s);
// Mean of q(x_{k-1} | x_k, x0).
std::vector<double> posterior_mean(const std::vector<double>& xk, const std::vector<double>& x0, int k,
                                   const NoiseSchedule& s);

enum class GuidanceMode { Combined, LocalText, LocalImage, GlobalOnly };
std::string_view to_string(GuidanceMode mode);
GuidanceMode guidance_mode_from_string(std::string_view name);
inline constexpr std::array<GuidanceMode, 4> kAllGuidanceModes = {GuidanceMode::GlobalOnly, GuidanceMode::LocalImage,
                                                                  GuidanceMode::LocalText, GuidanceMode::Combined};

inline constexpr int kPatch = 4;
inline constexpr int kHidden = 16;     // hidden resolution of the outer site
inline constexpr int kBottleneck = 8;  // hidden resolution of the inner site

struct EntityGuidance {
    int entity_id = 0;
    std::vector<int> text_ids;
    Mat image_patches;               // [n x 48], background-centered
    std::vector<int> patch_positions;  // patch index on the 8 x 8 patch grid
    std::vector<float> mask_hidden;    // kHidden^2
    std::vector<float> mask_bottleneck;  // kBottleneck^2
};

struct GuidanceBundle {
    GuidanceMode mode = GuidanceMode::Combined;
    std::vector<int> global_ids;
    std::vector<EntityGuidance> entities;
};

// Hidden cell is inside when its pixel footprint overlaps the box by >= 50%.
std::vector<float> downsample_mask(const Box& box, int image_size, int cells);

GuidanceBundle make_bundle(const SceneSpec& scene, GuidanceMode mode, const GrammarConfig& grammar,
                           const DiffusionConfig& cfg);
json bundle_manifest(const SceneSpec& scene, GuidanceMode mode);

// Guidance weights used at reverse step t for a bundle: global-only bundles
// keep a constant w_max on the global term.
GuidanceWeightsPair bundle_weights(const GuidanceBundle& bundle, int t, const DiffusionConfig& cfg);

// 2x2 space-to-depth: [32*32 x 3] HWC -> [16*16 x 12].
Mat pixel_unshuffle(const std::vector<float>& hwc, int size);
std::vector<float> pixel_shuffle(const Mat& m, int size);

struct DenoiserShape {
    int base = 32;
    int mid = 64;
    int embed = 64;
    int key_dim = 64;
    int time_dim = 128;
};

class Denoiser {
public:
    Denoiser(const GrammarConfig& grammar, const DiffusionConfig& cfg, uint64_t seed, DenoiserShape shape = {});

    // Noise prediction for x_k (unshuffled, [256 x 12]) at noise level k.
    Tape::Var forward(Tape& tape, const Mat& xk, int k, const GuidanceBundle& bundle, GuidanceWeightsPair w);
    Mat predict(const Mat& xk, int k, const GuidanceBundle& bundle, GuidanceWeightsPair w);

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const DiffusionConfig& config() const { return cfg_; }
    const GrammarConfig& grammar() const { return grammar_; }
    const Vocabulary& vocab() const { return vocab_; }
    bool trained() const { return trained_; }
    void set_trained(bool t) { trained_ = t; }

    void save(const std::string& path, const json& extra_meta = json::object(), bool with_adam = false) const;
    static Denoiser load(const std::string& path, json* meta_out = nullptr, bool with_adam = false);

private:
    Tape::Var resblock(Tape& tape, Tape::Var x, int hw, const std::string& name, Tape::Var temb);
    Tape::Var site(Tape& tape, Tape::Var h, const std::string& name, Tape::Var global,
                   const std::vector<std::pair<Tape::Var, Tape::Var>>& entity_tokens, const GuidanceBundle& bundle,
                   bool bottleneck, GuidanceWeightsPair w);

    GrammarConfig grammar_;
    DiffusionConfig cfg_;
    DenoiserShape shape_;
    Vocabulary vocab_;
    ParamStore params_;
    bool trained_ = false;
};

struct TrainConfig {
    int epochs = 20;
    int batch_size = 16;
    double lr = 1e-3;
    double grad_clip = 1.0;
    uint64_t seed = 0;
    // Probabilities of {combined, local text, local image, global only}.
    std::array<double, 4> condition_mix = {0.25, 0.25, 0.25, 0.25};
};

struct TrainSample {
    SceneSpec scene;
    Image image;
};

struct TrainLog {
    std::vector<double> epoch_loss;
    long steps = 0;
    int epochs_done = 0;
};

// Trains in place. `on_epoch` (optional) runs after each epoch, e.g. to write a
// resumable checkpoint. Resuming from epoch e reproduces an uninterrupted run.
TrainLog train_denoiser(Denoiser& model, const std::vector<TrainSample>& data, const TrainConfig& tc,
                        TrainLog resume = {},
                        const std::function<void(const Denoiser&, const TrainLog&)>& on_epoch = nullptr);

struct SampleOptions {
    std::optional<ReferenceCollage> init;
    // Reverse steps run from a noised collage; T by default. Ignored without init.
    std::optional<int> init_steps;
};

Image sample_guided(const Denoiser& model, const GuidanceBundle& bundle, uint64_t seed, const SampleOptions& opts = {});

// Noise level the stitched collage is pushed to when image references guide
// sampling; the reverse process then runs from there.
inline constexpr int kDefaultCollageInitSteps = 100;

// Samples an image of `scene`. Modes carrying image references start from the
// collage of those references noised to `collage_init_steps` (clamped to T,
// negative for pure noise); text-only modes always start from noise.
Image generate_image(const Denoiser& model, const SceneSpec& scene, GuidanceMode mode, uint64_t seed,
                     int collage_init_steps = kDefaultCollageInitSteps);

}  // namespace cfgen
