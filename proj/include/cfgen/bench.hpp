#pragma once

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cfgen/cfsets.hpp"
#include "cfgen/losses.hpp"

namespace cfgen {

// ---- benchmark ------------------------------------------------------------------

enum class ItemKind { OrderNegative, AttributeNegative, RelationNegative, WinogroundStyle };
std::string_view to_string(ItemKind kind);
ItemKind item_kind_from_string(std::string_view name);
inline constexpr std::array<ItemKind, 4> kAllItemKinds = {ItemKind::OrderNegative, ItemKind::AttributeNegative,
                                                          ItemKind::RelationNegative, ItemKind::WinogroundStyle};

// Binary kinds: one image, captions[0] is the true caption.
// Winoground style: images[i] matches captions[i].
struct BenchmarkItem {
    ItemKind kind = ItemKind::OrderNegative;
    uint64_t scene_seed = 0;
    std::vector<SceneSpec> scenes;
    std::vector<Image> images;
    std::array<Tokens, 2> captions;
};

struct BenchmarkConfig {
    int n_per_kind = 250;
    uint64_t seed = 17;
    uint64_t scene_seed_offset = 1'000'000'000;
};

void to_json(json& j, const BenchmarkConfig& c);
BenchmarkConfig benchmark_config_from_json(const json& j);

struct Benchmark {
    json manifest;
    std::vector<BenchmarkItem> items;
};

// Throws Disjointness if a benchmark scene seed appears in `training_seeds`.
Benchmark build_benchmark(const BenchmarkConfig& cfg, const GrammarConfig& grammar,
                          const std::vector<uint64_t>& training_seeds = {});
// Images are re-rendered from the stored scenes.
Benchmark benchmark_from_manifest(const json& manifest, const GrammarConfig& grammar);
void check_disjoint(const std::vector<uint64_t>& benchmark_seeds, const std::vector<uint64_t>& training_seeds);

// ---- evaluation -----------------------------------------------------------------

struct EvalResult {
    std::map<std::string, double> accuracy;  // binary kinds
    std::map<std::string, int> counts;
    double text_score = 0, image_score = 0, group_score = 0;
    int winoground_count = 0;
    // sim(image, true caption) - sim(image, negative caption) per binary item.
    std::map<std::string, std::vector<double>> gaps;
    json meta = json::object();

    double mean_binary_accuracy(const std::vector<ItemKind>& kinds) const;
    double mean_gap() const;
};

void to_json(json& j, const EvalResult& r);
EvalResult eval_result_from_json(const json& j);

using PairScorer = std::function<double(const Image& image, const Tokens& caption)>;

EvalResult evaluate(const PairScorer& score, const Benchmark& bench);
// Embeds every distinct image and caption once, then scores by cosine.
EvalResult evaluate(const DualEncoder& encoder, const Benchmark& bench);

// Cosine of embeddings drawn from a normal seeded by the content hash.
PairScorer random_scorer(uint64_t seed, int dim = 64);
// verify_image-backed: number of satisfied dimensions of the parsed caption.
PairScorer oracle_scorer(const GrammarConfig& grammar);

// ---- encoder training -----------------------------------------------------------

// Contrastive pretraining on rendered (image, caption) pairs with in-batch
// negatives; stands in for the pretrained dual encoder.
struct PretrainConfig {
    int n_scenes = 3000;
    int epochs = 8;
    int batch_size = 32;
    double lr = 2e-3;
    double weight_decay = 0.0;
    uint64_t seed = 0;
    uint64_t scene_seed_offset = 500'000'000;
};

void to_json(json& j, const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const json& j);

std::vector<uint64_t> pretrain_scene_seeds(const PretrainConfig& cfg);
std::vector<json> pretrain(DualEncoder& encoder, const PretrainConfig& cfg);

struct LossConfig {
    bool sets_loss = true;  // false: in-batch contrastive baseline
    bool neg_loss = true;
    std::string name() const;
};

void to_json(json& j, const LossConfig& c);
LossConfig loss_config_from_json(const json& j);

struct FinetuneConfig {
    LossConfig loss;
    int epochs = 10;
    int batch_sets = 8;
    double lr = 1e-3;
    double weight_decay = 0.1;
    double grad_clip = 1.0;
    bool use_adapters = true;
    AdapterConfig adapters;
    bool learn_loss_params = true;
    LossParams init;
    uint64_t seed = 0;
};

void to_json(json& j, const FinetuneConfig& c);
FinetuneConfig finetune_config_from_json(const json& j);

struct FinetuneLog {
    std::vector<json> steps;  // one loss report per step
    LossParams final_params;
    std::string to_jsonl() const;
};

// Trains in place. Throws Divergence with the step index on a non-finite loss.
FinetuneLog finetune(DualEncoder& encoder, const std::vector<CounterfactualSet>& sets, const FinetuneConfig& cfg);

// Multinomial logistic regression on frozen image embeddings of single-entity
// renders; returns held-out category accuracy.
struct ProbeConfig {
    int n_train = 600;
    int n_test = 300;
    int iterations = 300;
    double lr = 0.5;
    double l2 = 1e-3;
    uint64_t scene_seed_offset = 700'000'000;
};
double linear_probe_accuracy(const DualEncoder& encoder, const ProbeConfig& cfg = {});

// ---- ablation -------------------------------------------------------------------

struct AblationCell {
    LossConfig loss;
    std::string data = "generated";  // "generated" or "stitched"
    int m = 10;
    std::string key() const;
};

struct AblationCellResult {
    AblationCell cell;
    std::vector<EvalResult> runs;  // one per seed
    std::vector<std::string> errors;
    long long eval_count_per_batch = 0;
    json config_echo;
};

// Builds (or fetches) the training sets for a data config and set size.
using SetProvider = std::function<std::vector<CounterfactualSet>(const std::string& data, int m)>;

struct AblationSpec {
    std::vector<AblationCell> cells;
    std::vector<uint64_t> seeds = {0, 1, 2};
    FinetuneConfig base;
};

// Failures are recorded per cell and the run continues.
std::vector<AblationCellResult> run_ablation(const AblationSpec& spec, const DualEncoder& start,
                                             const SetProvider& sets, const Benchmark& bench);

// Columns: loss,data,m,kind,mean,std,eval_count_per_batch.
std::string ablation_csv(const std::vector<AblationCellResult>& results);

// ---- guidance ordering ----------------------------------------------------------

struct GuidanceAccuracy {
    double attribute = 0;  // mean fraction of entities with correct color and shape
    double position = 0;   // fraction of scenes with every entity in place
    int scenes = 0;
};

struct GuidanceExperimentConfig {
    int n_scenes = 200;
    std::vector<uint64_t> seeds = {0, 1, 2};
    uint64_t scene_seed_offset = 2'000'000'000;
    int collage_init_steps = kDefaultCollageInitSteps;
};

// result[mode][seed index]
std::map<GuidanceMode, std::vector<GuidanceAccuracy>> guidance_ordering(const Denoiser& model,
                                                                        const GuidanceExperimentConfig& cfg);

// ---- report ---------------------------------------------------------------------

struct Histogram {
    double lo = 0, hi = 0;
    std::vector<int> counts;
};
// Values outside [lo, hi] fall into the edge bins. Empty input is a validation error.
Histogram histogram(const std::vector<double>& values, int bins, double lo, double hi);

struct ReportInputs {
    std::map<std::string, EvalResult> results;  // e.g. "pretrained", "finetuned"
    std::vector<AblationCellResult> ablation;
    std::optional<DiffusionConfig> schedule;
};

// Writes results.json, gap_histogram.svg, ablation.svg / ablation.csv and
// weight_schedule.svg as applicable; returns the written paths.
std::vector<std::string> emit_report(const ReportInputs& in, const std::string& out_dir, const json& config_echo);

}  // namespace cfgen
