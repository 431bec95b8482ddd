#include "cfgen/cfsets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "cfgen/parallel.hpp"

namespace cfgen {

std::string_view to_string(Provenance p) {
    switch (p) {
        case Provenance::RealRendered: return "real_rendered";
        case Provenance::DiffusionGenerated: return "diffusion_generated";
        case Provenance::StitchedCollage: return "stitched_collage";
    }
    return "unknown";
}

Provenance provenance_from_string(std::string_view name) {
    for (auto p : {Provenance::RealRendered, Provenance::DiffusionGenerated, Provenance::StitchedCollage})
        if (to_string(p) == name) return p;
    fail(ErrorKind::Input, "unknown provenance: " + std::string(name));
}

void PerturbationMix::validate() const {
    for (double p : {modification, addition, deletion, regeneration})
        if (!(p >= 0)) fail(ErrorKind::Config, "mix proportions must be non-negative");
    if (std::abs(modification + addition + deletion + regeneration - 1.0) > 1e-9)
        fail(ErrorKind::Config, "mix proportions must sum to 1");
}


namespace {

PerturbationKind group_kind(int g, Rng& rng) {
    switch (g) {
        case 0: return rng.uniform() < 0.5 ? PerturbationKind::AttributeChange : PerturbationKind::PositionChange;
        case 1: return PerturbationKind::AddEntity;
        case 2: return PerturbationKind::RemoveEntity;
        default: return PerturbationKind::Regenerate;
    }
}

int kind_group(PerturbationKind k) {
    switch (k) {
        case PerturbationKind::AddEntity: return 1;
        case PerturbationKind::RemoveEntity: return 2;
        case PerturbationKind::Regenerate: return 3;
        default: return 0;
    }
}

int draw_group(const std::array<double, 4>& w, Rng& rng) {
    double total = 0;
    for (double x : w) total += x;
    double u = rng.uniform() * total;
    for (int g = 0; g < 3; ++g)
        if ((u -= w[g]) < 0) return g;
    return 3;
}

}  // namespace

PerturbationKind draw_variant_kind(const PerturbationMix& mix, Rng& rng) {
    return group_kind(draw_group({mix.modification, mix.addition, mix.deletion, mix.regeneration}, rng), rng);
}

std::vector<PerturbationKind> allocate_variant_kinds(const PerturbationMix& mix, int count, Rng& rng) {
    // Whole quotas first; leftover slots are drawn in proportion to the
    // fractional parts so each group's expected count is exactly p * count.
    const std::array<double, 4> p{mix.modification, mix.addition, mix.deletion, mix.regeneration};
    std::array<double, 4> frac{};
    std::vector<PerturbationKind> kinds;
    for (int g = 0; g < 4; ++g) {
        const double share = p[g] * count;
        const int whole = static_cast<int>(std::floor(share + 1e-9));
        frac[g] = std::max(0.0, share - whole);
        for (int i = 0; i < whole; ++i) kinds.push_back(group_kind(g, rng));
    }
    while (static_cast<int>(kinds.size()) < count) kinds.push_back(group_kind(draw_group(frac, rng), rng));
    rng.shuffle(kinds);
    return kinds;
}

VariantImager make_imager(const GrammarConfig& grammar, const Denoiser* denoiser, GuidanceMode guidance,
                          int collage_init_steps) {
    return [grammar, denoiser, guidance, collage_init_steps](const SceneSpec& scene, Provenance provenance, uint64_t seed) {
        if (provenance == Provenance::StitchedCollage) return compose_collage(scene, grammar).image;
        if (provenance == Provenance::RealRendered) return render_scene(scene, grammar);
        if (!denoiser) fail(ErrorKind::State, "diffusion variants need a trained denoiser checkpoint");
        return generate_image(*denoiser, scene, guidance, seed, collage_init_steps);
    };
}

CounterfactualSet build_set(const SceneSpec& base, int set_id, const SetBuildConfig& cfg, uint64_t seed,
                            const GrammarConfig& grammar, const VariantImager& imager) {
    if (cfg.m < 2) fail(ErrorKind::Config, "a counterfactual set needs m >= 2");
    cfg.mix.validate();
    CounterfactualSet set;
    set.set_id = set_id;
    set.base_seed = seed;
    CounterfactualPair real;
    real.image = render_scene(base, grammar);
    real.caption = render_caption(base);
    real.scene = base;
    set.pairs.push_back(std::move(real));
    std::set<Tokens> captions{set.pairs[0].caption};

    Rng rng(derive_seed(seed, 0xc5e7));
    const auto kinds = allocate_variant_kinds(cfg.mix, cfg.m - 1, rng);
    const std::array<double, 4> weights{cfg.mix.modification, cfg.mix.addition, cfg.mix.deletion, cfg.mix.regeneration};
    std::array<bool, 4> exhausted{};
    for (int v = 1; v < cfg.m; ++v) {
        PerturbationKind kind = kinds[static_cast<size_t>(v - 1)];
        const Provenance provenance =
            rng.uniform() < cfg.stitched_fraction ? Provenance::StitchedCollage : Provenance::DiffusionGenerated;
        bool made = false;
        while (!made) {
            for (int attempt = 0; attempt <= cfg.max_retries && !made; ++attempt) {
                const uint64_t ps = derive_seed(seed, static_cast<uint64_t>(v) << 8 | static_cast<uint64_t>(kind),
                                                static_cast<uint64_t>(attempt));
                std::pair<Perturbation, SceneSpec> result;
                try {
                    result = perturb(base, kind, ps, grammar);
                } catch (const Error& e) {
                    if (e.kind() == ErrorKind::Exhaustion) continue;
                    throw;
                }
                Tokens caption = render_caption(result.second);
                if (kind != PerturbationKind::Regenerate && captions.count(caption)) continue;
                CounterfactualPair pair;
                pair.seed = derive_seed(ps, 0x5a);
                pair.image = imager(result.second, provenance, pair.seed);
                pair.caption = std::move(caption);
                pair.scene = std::move(result.second);
                pair.provenance = provenance;
                pair.perturbation = std::move(result.first);
                pair.guidance = cfg.guidance;
                captions.insert(pair.caption);
                set.pairs.push_back(std::move(pair));
                made = true;
            }
            if (made) break;
            // Small scenes run out of distinct deletions (or modifications) at
            // large m; the slot then goes to another group of the mix.
            exhausted[static_cast<size_t>(kind_group(kind))] = true;
            std::array<double, 4> w{};
            for (int g = 0; g < 4; ++g) w[g] = exhausted[g] ? 0.0 : weights[g];
            if (w[0] + w[1] + w[2] + w[3] <= 0)
                fail(ErrorKind::Exhaustion, "set " + std::to_string(set_id) + ": no distinct variant left after " +
                                                std::to_string(cfg.max_retries + 1) + " attempts per kind");
            kind = group_kind(draw_group(w, rng), rng);
        }
    }
    return set;
}

MatD pair_labels(const CounterfactualSet& set) {
    const int m = set.m();
    MatD l(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) l(i, j) = set.pairs[i].caption == set.pairs[j].caption ? 1.0 : -1.0;
    return l;
}

double percentile_threshold(std::vector<double> values, double percentile) {
    if (values.empty()) fail(ErrorKind::Input, "no values for a percentile");
    if (percentile < 0 || percentile > 100) fail(ErrorKind::Range, "percentile outside [0, 100]");
    std::sort(values.begin(), values.end());
    const double pos = percentile / 100.0 * static_cast<double>(values.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(values.size() - 1, lo + 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

CounterfactualSet filter_pairs(const CounterfactualSet& set, const DualEncoder& encoder, double threshold,
                               const Regenerator& regenerate) {
    return filter_pairs(
        set, [&](const Image& image, const Tokens& caption) { return encoder.similarity(image, caption); }, threshold,
        regenerate);
}

CounterfactualSet filter_pairs(const CounterfactualSet& set, const PairScorer& score, double threshold,
                               const Regenerator& regenerate) {
    CounterfactualSet out;
    out.set_id = set.set_id;
    out.base_seed = set.base_seed;
    for (int i = 0; i < set.m(); ++i) {
        const auto& pair = set.pairs[static_cast<size_t>(i)];
        if (i == 0 || score(pair.image, pair.caption) >= threshold) {
            out.pairs.push_back(pair);
            continue;
        }
        if (regenerate) {
            if (auto again = regenerate(pair, 0); again && score(again->image, again->caption) >= threshold)
                out.pairs.push_back(std::move(*again));
        }
    }
    if (out.m() < 2) fail(ErrorKind::Rejection, "set " + std::to_string(set.set_id) + " shrank below two pairs after filtering");
    return out;
}

// ---- datasets -----------------------------------------------------------------------

void to_json(json& j, const DatasetConfig& c) {
    j = json{{"n_sets", c.n_sets},
             {"m", c.m},
             {"mix", {{"modification", c.mix.modification}, {"addition", c.mix.addition},
                      {"deletion", c.mix.deletion}, {"regeneration", c.mix.regeneration}}},
             {"stitched_fraction", c.stitched_fraction},
             {"guidance", std::string(to_string(c.guidance))},
             {"seed", c.seed},
             {"scene_seed_offset", c.scene_seed_offset},
             {"base_min_entities", c.base_min_entities},
             {"filter_percentile", c.filter_percentile},
             {"collage_init_steps", c.collage_init_steps}};
}

DatasetConfig dataset_config_from_json(const json& j) {
    DatasetConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "n_sets") c.n_sets = v.get<int>();
        else if (key == "m") c.m = v.get<int>();
        else if (key == "mix") {
            for (const auto& [k2, p] : v.items()) {
                if (k2 == "modification") c.mix.modification = p.get<double>();
                else if (k2 == "addition") c.mix.addition = p.get<double>();
                else if (k2 == "deletion") c.mix.deletion = p.get<double>();
                else if (k2 == "regeneration") c.mix.regeneration = p.get<double>();
                else fail(ErrorKind::Config, "unknown mix key: " + k2);
            }
        } else if (key == "stitched_fraction") c.stitched_fraction = v.get<double>();
        else if (key == "guidance") c.guidance = guidance_mode_from_string(v.get<std::string>());
        else if (key == "seed") c.seed = v.get<uint64_t>();
        else if (key == "scene_seed_offset") c.scene_seed_offset = v.get<uint64_t>();
        else if (key == "base_min_entities") c.base_min_entities = v.get<int>();
        else if (key == "filter_percentile") c.filter_percentile = v.get<double>();
        else if (key == "collage_init_steps") c.collage_init_steps = v.get<int>();
        else fail(ErrorKind::Config, "unknown dataset config key: " + key);
    }
    if (c.n_sets < 0) fail(ErrorKind::Config, "n_sets must be non-negative");
    if (c.m < 2) fail(ErrorKind::Config, "m must be at least 2");
    if (c.stitched_fraction < 0 || c.stitched_fraction > 1) fail(ErrorKind::Config, "stitched_fraction must be in [0, 1]");
    if (c.filter_percentile < 0 || c.filter_percentile > 100) fail(ErrorKind::Config, "filter_percentile must be in [0, 100]");
    c.mix.validate();
    return c;
}

namespace {

json pair_json(const CounterfactualPair& p, const std::string& hash) {
    json j{{"image_hash", hash},
           {"image_file", "images/" + hash + ".cfimg"},
           {"caption", p.caption},
           {"scene", p.scene},
           {"provenance", std::string(to_string(p.provenance))},
           {"seed", p.seed}};
    j["perturbation"] = p.perturbation ? json(*p.perturbation) : json(nullptr);
    if (p.provenance == Provenance::DiffusionGenerated) j["guidance"] = std::string(to_string(p.guidance));
    return j;
}

}  // namespace

std::string manifest_hash(const json& manifest) { return sha256_hex(manifest.dump()); }

Dataset build_dataset(const DatasetConfig& cfg, const GrammarConfig& grammar, const Denoiser* denoiser,
                      const DualEncoder* filter_encoder, const std::string& out_dir, const std::string& checkpoint_hash) {
    cfg.mix.validate();
    if (cfg.stitched_fraction < 1.0 && !denoiser)
        fail(ErrorKind::State, "stitched_fraction < 1 needs a trained denoiser checkpoint");
    GrammarConfig base_grammar = grammar;
    base_grammar.min_entities = std::max(grammar.min_entities, cfg.base_min_entities);
    base_grammar.validate();

    SetBuildConfig sc;
    sc.m = cfg.m;
    sc.mix = cfg.mix;
    sc.stitched_fraction = cfg.stitched_fraction;
    sc.guidance = cfg.guidance;
    const VariantImager imager = make_imager(grammar, denoiser, cfg.guidance, cfg.collage_init_steps);

    Dataset ds;
    ds.sets.resize(static_cast<size_t>(cfg.n_sets));
    parallel_for(ds.sets.size(), [&](size_t i) {
        const uint64_t scene_seed = cfg.scene_seed_offset + i;
        const SceneSpec base = generate_scene(scene_seed, base_grammar);
        ds.sets[i] = build_set(base, static_cast<int>(i), sc, derive_seed(cfg.seed, 0xda7a, i), grammar, imager);
        ds.sets[i].base_seed = scene_seed;
    });

    json filter_info = nullptr;
    if (filter_encoder && cfg.filter_percentile > 0 && !ds.sets.empty()) {
        std::vector<std::vector<double>> sims(ds.sets.size());
        parallel_for(ds.sets.size(), [&](size_t i) {
            for (size_t v = 1; v < ds.sets[i].pairs.size(); ++v)
                sims[i].push_back(filter_encoder->similarity(ds.sets[i].pairs[v].image, ds.sets[i].pairs[v].caption));
        });
        std::vector<double> all;
        for (const auto& s : sims) all.insert(all.end(), s.begin(), s.end());
        const double threshold = percentile_threshold(all, cfg.filter_percentile);
        const Regenerator regen = [&](const CounterfactualPair& p, int attempt) -> std::optional<CounterfactualPair> {
            if (p.provenance != Provenance::DiffusionGenerated) return std::nullopt;
            CounterfactualPair q = p;
            q.seed = derive_seed(p.seed, 0x7e, static_cast<uint64_t>(attempt));
            q.image = imager(q.scene, q.provenance, q.seed);
            return q;
        };
        std::vector<char> rejected(ds.sets.size(), 0);
        parallel_for(ds.sets.size(), [&](size_t i) {
            try {
                ds.sets[i] = filter_pairs(ds.sets[i], *filter_encoder, threshold, regen);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::Rejection) throw;
                rejected[i] = 1;
            }
        });
        // A rejected set is rebuilt from the next spare base scene, same threshold.
        json replaced = json::array();
        uint64_t spare = cfg.scene_seed_offset + static_cast<uint64_t>(cfg.n_sets);
        for (size_t i = 0; i < ds.sets.size(); ++i) {
            for (int attempt = 0; rejected[i]; ++attempt, ++spare) {
                if (attempt == 50) fail(ErrorKind::Rejection, "set " + std::to_string(i) + " keeps failing the filter");
                auto set = build_set(generate_scene(spare, base_grammar), static_cast<int>(i), sc,
                                     derive_seed(cfg.seed, 0xda7b, spare), grammar, imager);
                set.base_seed = spare;
                try {
                    ds.sets[i] = filter_pairs(set, *filter_encoder, threshold, regen);
                    rejected[i] = 0;
                    replaced.push_back({{"set_id", i}, {"scene_seed", spare}});
                } catch (const Error& e) {
                    if (e.kind() != ErrorKind::Rejection) throw;
                }
            }
        }
        filter_info = json{{"percentile", cfg.filter_percentile}, {"threshold", threshold},
                           {"encoder_checksum", filter_encoder->params().checksum()}, {"replaced_sets", replaced}};
    }

    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    json config_echo{{"dataset", cfg}, {"grammar", grammar}, {"checkpoint_hash", checkpoint_hash},
                     {"tool_version", std::string(kVersion)}};
    json sets = json::array();
    for (const auto& set : ds.sets) {
        json pairs = json::array();
        for (const auto& p : set.pairs) {
            const std::string hash = image_hash(p.image);
            const fs::path file = fs::path(out_dir) / "images" / (hash + ".cfimg");
            try {
                if (!fs::exists(file)) {
                    save_float_image(p.image, file.string());
                    save_png(p.image, (fs::path(out_dir) / "images" / (hash + ".png")).string());
                }
            } catch (const Error& e) {
                fail(ErrorKind::Io, "set " + std::to_string(set.set_id) + ": " + e.what());
            }
            pairs.push_back(pair_json(p, hash));
        }
        sets.push_back({{"set_id", set.set_id}, {"scene_seed", set.base_seed}, {"m", set.m()}, {"pairs", pairs}});
    }
    ds.manifest = json{{"dataset_id", sha256_hex(config_echo.dump()).substr(0, 16)},
                       {"config", config_echo},
                       {"filter", filter_info},
                       {"sets", sets}};
    std::ofstream(fs::path(out_dir) / "manifest.json") << ds.manifest.dump(1) << "\n";
    return ds;
}

Dataset load_dataset(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream in(manifest_path);
    if (!in) fail(ErrorKind::Io, "cannot open manifest " + manifest_path);
    Dataset ds;
    try {
        ds.manifest = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorKind::Io, "manifest " + manifest_path + " is not valid JSON: " + e.what());
    }
    const fs::path dir = fs::path(manifest_path).parent_path();
    for (const auto& js : ds.manifest.at("sets")) {
        CounterfactualSet set;
        set.set_id = js.at("set_id");
        set.base_seed = js.at("scene_seed");
        for (const auto& jp : js.at("pairs")) {
            CounterfactualPair p;
            p.image = load_float_image((dir / jp.at("image_file").get<std::string>()).string());
            if (image_hash(p.image) != jp.at("image_hash"))
                fail(ErrorKind::Io, "set " + std::to_string(set.set_id) + ": image content does not match its hash");
            p.caption = jp.at("caption").get<Tokens>();
            p.scene = scene_from_json(jp.at("scene"));
            p.provenance = provenance_from_string(jp.at("provenance").get<std::string>());
            if (!jp.at("perturbation").is_null()) p.perturbation = perturbation_from_json(jp.at("perturbation"));
            p.seed = jp.at("seed");
            if (jp.contains("guidance")) p.guidance = guidance_mode_from_string(jp.at("guidance").get<std::string>());
            set.pairs.push_back(std::move(p));
        }
        ds.sets.push_back(std::move(set));
    }
    return ds;
}

std::vector<uint64_t> manifest_scene_seeds(const json& manifest) {
    std::vector<uint64_t> seeds;
    for (const auto& s : manifest.at("sets")) seeds.push_back(s.at("scene_seed").get<uint64_t>());
    return seeds;
}

}  // namespace cfgen
