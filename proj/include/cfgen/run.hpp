#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cfgen/bench.hpp"

namespace cfgen {

struct DiffusionTrainSpec {
    int n_scenes = 4000;
    uint64_t scene_seed_offset = 3'000'000'000;
    TrainConfig train{40, 16, 1e-3, 1.0, 1, {0.25, 0.25, 0.25, 0.25}};
};

struct AblationGrid {
    std::vector<LossConfig> losses = {{true, true}, {false, false}};
    std::vector<std::string> data = {"generated", "stitched"};
    std::vector<int> m = {5, 10, 20};
    std::vector<uint64_t> seeds = {0, 1, 2};
};

struct RunPaths {
    std::string denoiser;  // empty: <out>/denoiser.ckpt
    std::string encoder;   // start encoder; empty: pretrain into <out>/pretrained.ckpt
    std::string dataset;   // manifest; empty: <out>/dataset/manifest.json
};

struct RunConfig {
    std::string experiment = "default";
    uint64_t seed = 0;
    std::string grammar_path;  // when set, replaces `grammar`
    GrammarConfig grammar = GrammarConfig::defaults();
    DiffusionConfig diffusion;
    DiffusionTrainSpec diffusion_train;
    EncoderConfig encoder;
    PretrainConfig pretrain;
    DatasetConfig dataset;
    FinetuneConfig finetune;
    BenchmarkConfig benchmark;
    AblationGrid ablation;
    RunPaths paths;
    std::string out = "runs/default";

    std::string denoiser_path() const;
    std::string dataset_manifest_path() const;
};

void to_json(json& j, const RunConfig& c);
// Strict: unknown keys are a Config error. A "grammar_path" is read and inlined.
RunConfig run_config_from_json(const json& j);

// "a.b.c=value"; value is parsed as JSON, falling back to a plain string.
void apply_override(json& config, const std::string& assignment);

// Component seeds (dataset, pretrain, finetune, diffusion training) follow `seed`.
void set_run_seed(RunConfig& cfg, uint64_t seed);

// Referenced paths must exist.
void validate_paths(const RunConfig& cfg);

// ---- cached pipeline stages ---------------------------------------------------
// Each stage reuses its on-disk artifact when the recorded stage config matches.

// Trains (or resumes) the denoiser at `path`; `on_epoch` receives one JSON line per epoch.
Denoiser obtain_denoiser(const RunConfig& cfg, const std::string& path,
                         const std::function<void(const json&)>& on_epoch = nullptr);

// paths.encoder if given; a randomly initialized encoder when pretrain.epochs == 0;
// otherwise pretrained and cached at `path`.
DualEncoder obtain_start_encoder(const RunConfig& cfg, const std::string& path);

// Builds or reloads the dataset in `dir`. `filter_encoder` is only needed when
// filtering is enabled.
Dataset obtain_dataset(const RunConfig& cfg, const DatasetConfig& dc, const std::string& dir, const Denoiser* denoiser,
                       const std::string& denoiser_hash, const DualEncoder* filter_encoder);

// Benchmark disjoint from every seed the encoder was trained on.
Benchmark obtain_benchmark(const RunConfig& cfg, const std::vector<uint64_t>& training_seeds);

json run_echo(const RunConfig& cfg);

}  // namespace cfgen
