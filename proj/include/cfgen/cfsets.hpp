#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cfgen/diffusion.hpp"
#include "cfgen/encoder.hpp"

namespace cfgen {

enum class Provenance { RealRendered, DiffusionGenerated, StitchedCollage };
std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view name);

struct CounterfactualPair {
    Image image;
    Tokens caption;
    SceneSpec scene;
    Provenance provenance = Provenance::RealRendered;
    std::optional<Perturbation> perturbation;
    uint64_t seed = 0;  // sampling seed for diffusion images
    GuidanceMode guidance = GuidanceMode::Combined;
};

struct CounterfactualSet {
    int set_id = 0;
    uint64_t base_seed = 0;
    std::vector<CounterfactualPair> pairs;  // index 0 is the real pair

    int m() const { return static_cast<int>(pairs.size()); }
};

// Proportions of modification (attribute or position change), addition,
// deletion and regeneration variants.
struct PerturbationMix {
    double modification = 0.25;
    double addition = 0.25;
    double deletion = 0.25;
    double regeneration = 0.25;

    void validate() const;
};

struct SetBuildConfig {
    int m = 10;
    PerturbationMix mix;
    double stitched_fraction = 0.0;
    GuidanceMode guidance = GuidanceMode::Combined;
    int max_retries = 16;
};

// Draws the perturbation kind of each variant slot. Exposed for the mix check.
PerturbationKind draw_variant_kind(const PerturbationMix& mix, Rng& rng);

// Kinds for `count` variant slots: floor(p * count) of each mix group, the
// rest drawn by fractional remainder, then shuffled.
std::vector<PerturbationKind> allocate_variant_kinds(const PerturbationMix& mix, int count, Rng& rng);

// Produces a variant image from its scene and sampling seed.
using VariantImager = std::function<Image(const SceneSpec& scene, Provenance provenance, uint64_t seed)>;

// Default imager: compose_collage for stitched variants, generate_image for
// diffusion variants (requires `denoiser`).
VariantImager make_imager(const GrammarConfig& grammar, const Denoiser* denoiser, GuidanceMode guidance,
                          int collage_init_steps = kDefaultCollageInitSteps);

CounterfactualSet build_set(const SceneSpec& base, int set_id, const SetBuildConfig& cfg, uint64_t seed,
                            const GrammarConfig& grammar, const VariantImager& imager);

// +1 where the captions are token-identical, -1 elsewhere.
MatD pair_labels(const CounterfactualSet& set);

// Value below which a fraction `percentile` (0..100) of the samples lie.
double percentile_threshold(std::vector<double> values, double percentile);

// Variants scoring strictly below `threshold` are regenerated once through
// `regenerate` (if given) and dropped if still below. The real pair is kept.
// Throws Rejection if fewer than two pairs remain.
using Regenerator = std::function<std::optional<CounterfactualPair>(const CounterfactualPair& pair, int attempt)>;
CounterfactualSet filter_pairs(const CounterfactualSet& set, const DualEncoder& encoder, double threshold,
                               const Regenerator& regenerate = nullptr);
using PairScorer = std::function<double(const Image& image, const Tokens& caption)>;
CounterfactualSet filter_pairs(const CounterfactualSet& set, const PairScorer& score, double threshold,
                               const Regenerator& regenerate = nullptr);

struct DatasetConfig {
    int n_sets = 50;
    int m = 10;
    PerturbationMix mix;
    double stitched_fraction = 0.0;
    GuidanceMode guidance = GuidanceMode::Combined;
    uint64_t seed = 0;
    uint64_t scene_seed_offset = 0;  // base scene seeds are offset + i
    int base_min_entities = 3;
    double filter_percentile = 10.0;  // 0 disables filtering
    int collage_init_steps = kDefaultCollageInitSteps;
};

void to_json(json& j, const DatasetConfig& c);
DatasetConfig dataset_config_from_json(const json& j);

struct Dataset {
    json manifest;
    std::vector<CounterfactualSet> sets;
};

// Builds, filters and persists a dataset under `out_dir` (images/ holds one
// lossless float file per content hash plus a PNG preview). The manifest is
// written to out_dir/manifest.json.
Dataset build_dataset(const DatasetConfig& cfg, const GrammarConfig& grammar, const Denoiser* denoiser,
                      const DualEncoder* filter_encoder, const std::string& out_dir,
                      const std::string& checkpoint_hash = "");
Dataset load_dataset(const std::string& manifest_path);
std::string manifest_hash(const json& manifest);

// Base scene seeds listed in a manifest (for disjointness checks).
std::vector<uint64_t> manifest_scene_seeds(const json& manifest);

}  // namespace cfgen
