#include "cfgen/bench.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include "cfgen/parallel.hpp"

namespace cfgen {

std::string_view to_string(ItemKind kind) {
    switch (kind) {
        case ItemKind::OrderNegative: return "order_negative";
        case ItemKind::AttributeNegative: return "attribute_negative";
        case ItemKind::RelationNegative: return "relation_negative";
        case ItemKind::WinogroundStyle: return "winoground_style";
    }
    return "unknown";
}

ItemKind item_kind_from_string(std::string_view name) {
    for (auto k : kAllItemKinds)
        if (to_string(k) == name) return k;
    fail(ErrorKind::Input, "unknown benchmark item kind: " + std::string(name));
}

void to_json(json& j, const BenchmarkConfig& c) {
    j = json{{"n_per_kind", c.n_per_kind}, {"seed", c.seed}, {"scene_seed_offset", c.scene_seed_offset}};
}

BenchmarkConfig benchmark_config_from_json(const json& j) {
    BenchmarkConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "n_per_kind") c.n_per_kind = v.get<int>();
        else if (key == "seed") c.seed = v.get<uint64_t>();
        else if (key == "scene_seed_offset") c.scene_seed_offset = v.get<uint64_t>();
        else fail(ErrorKind::Config, "unknown benchmark config key: " + key);
    }
    if (c.n_per_kind < 0) fail(ErrorKind::Config, "n_per_kind must be non-negative");
    return c;
}

void check_disjoint(const std::vector<uint64_t>& benchmark_seeds, const std::vector<uint64_t>& training_seeds) {
    const std::set<uint64_t> train(training_seeds.begin(), training_seeds.end());
    for (uint64_t s : benchmark_seeds)
        if (train.count(s))
            fail(ErrorKind::Disjointness, "benchmark scene seed " + std::to_string(s) + " also appears in training data");
}

namespace {

bool satisfied(const SceneSpec& scene, const Image& image, const GrammarConfig& g) {
    const auto v = verify_image(scene, image, g);
    return v.attribute_ok && v.position_ok && v.relation_ok;
}

// A negative caption qualifies when it parses to a different scene that the
// positive image does not satisfy.
std::optional<SceneSpec> usable_negative(const Tokens& neg, const SceneSpec& pos, const Image& image,
                                         const GrammarConfig& g) {
    SceneSpec s;
    try {
        s = parse_caption(neg, g);
    } catch (const Error&) {
        return std::nullopt;
    }
    if (equivalent(s, pos) || satisfied(s, image, g)) return std::nullopt;
    return s;
}

std::optional<BenchmarkItem> make_item(ItemKind kind, uint64_t seed, uint64_t salt, const GrammarConfig& g) {
    GrammarConfig gk = g;
    gk.min_entities = std::min(2, g.max_entities);
    if (kind == ItemKind::WinogroundStyle) gk.max_entities = gk.min_entities;
    BenchmarkItem item;
    item.kind = kind;
    item.scene_seed = seed;
    const SceneSpec scene = generate_scene(seed, gk);
    const Image image = render_scene(scene, g);
    const Tokens caption = render_caption(scene);
    if (!satisfied(scene, image, g)) return std::nullopt;

    auto binary = [&](const SceneSpec& neg_scene, const Tokens& neg) {
        item.scenes = {scene, neg_scene};
        item.images = {image};
        item.captions = {caption, neg};
        return item;
    };

    switch (kind) {
        case ItemKind::OrderNegative: {
            Tokens neg;
            try {
                neg = permute_word_order(caption, derive_seed(salt, 1, seed), g);
            } catch (const Error& e) {
                if (e.kind() == ErrorKind::Exhaustion) return std::nullopt;
                throw;
            }
            auto s = usable_negative(neg, scene, image, g);
            if (!s) return std::nullopt;
            return binary(*s, neg);
        }
        case ItemKind::AttributeNegative: {
            const auto [p, neg_scene] = perturb(scene, PerturbationKind::AttributeChange, derive_seed(salt, 2, seed), g);
            const Tokens neg = render_caption(neg_scene);
            if (!usable_negative(neg, scene, image, g)) return std::nullopt;
            return binary(neg_scene, neg);
        }
        case ItemKind::RelationNegative: {
            const auto candidates = relation_change_candidates(scene, g);
            if (candidates.empty()) return std::nullopt;
            Rng rng(derive_seed(salt, 3, seed));
            const auto& p = candidates[rng.below(candidates.size())];
            const SceneSpec neg_scene = apply_perturbation(scene, p, g);
            const Tokens neg = render_caption(neg_scene);
            if (!usable_negative(neg, scene, image, g)) return std::nullopt;
            return binary(neg_scene, neg);
        }
        case ItemKind::WinogroundStyle: {
            // Swap the two entities' boxes and every relation's arguments: the
            // caption keeps its words, the arrangement changes.
            if (scene.entities.size() != 2) return std::nullopt;
            const bool directional = std::any_of(scene.relations.begin(), scene.relations.end(), [&](const Relation& r) {
                return g.is_spatial(r.predicate) && !g.whitelist.contains(r.predicate);
            });
            if (!directional) return std::nullopt;
            SceneSpec swapped = scene;
            std::swap(swapped.entities[0].box, swapped.entities[1].box);
            for (auto& r : swapped.relations) std::swap(r.subject, r.object);
            try {
                validate_scene(swapped, g);
            } catch (const Error&) {
                return std::nullopt;
            }
            const Tokens caption2 = render_caption(swapped);
            auto a = caption, b = caption2;
            std::sort(a.begin(), a.end());
            std::sort(b.begin(), b.end());
            if (a != b || caption == caption2) return std::nullopt;
            const Image image2 = render_scene(swapped, g);
            if (!satisfied(swapped, image2, g) || satisfied(swapped, image, g) || satisfied(scene, image2, g))
                return std::nullopt;
            item.scenes = {scene, swapped};
            item.images = {image, image2};
            item.captions = {caption, caption2};
            return item;
        }
    }
    return std::nullopt;
}

json item_json(const BenchmarkItem& it) {
    return json{{"kind", std::string(to_string(it.kind))},
                {"scene_seed", it.scene_seed},
                {"scenes", it.scenes},
                {"captions", it.captions}};
}

}  // namespace

Benchmark build_benchmark(const BenchmarkConfig& cfg, const GrammarConfig& grammar,
                          const std::vector<uint64_t>& training_seeds) {
    if (cfg.n_per_kind < 0) fail(ErrorKind::Config, "n_per_kind must be non-negative");
    grammar.validate();
    Benchmark bench;
    // Candidate seeds are tried in order, in fixed-size blocks so the result does
    // not depend on the thread count.
    const uint64_t block = 64;
    uint64_t next = cfg.scene_seed_offset;
    for (auto kind : kAllItemKinds) {
        int made = 0;
        uint64_t tried = 0;
        while (made < cfg.n_per_kind) {
            std::vector<std::optional<BenchmarkItem>> cands(block);
            parallel_for(block, [&](size_t i) { cands[i] = make_item(kind, next + i, cfg.seed, grammar); });
            for (auto& c : cands) {
                if (c && made < cfg.n_per_kind) {
                    bench.items.push_back(std::move(*c));
                    ++made;
                }
            }
            next += block;
            tried += block;
            if (tried > 200 * static_cast<uint64_t>(cfg.n_per_kind) + 1000)
                fail(ErrorKind::Exhaustion, "could not build enough " + std::string(to_string(kind)) + " items");
        }
    }
    std::vector<uint64_t> seeds;
    for (const auto& it : bench.items) seeds.push_back(it.scene_seed);
    check_disjoint(seeds, training_seeds);

    json items = json::array();
    for (const auto& it : bench.items) items.push_back(item_json(it));
    bench.manifest = json{{"config", cfg}, {"grammar", grammar}, {"tool_version", std::string(kVersion)}, {"items", items}};
    return bench;
}

Benchmark benchmark_from_manifest(const json& manifest, const GrammarConfig& grammar) {
    Benchmark bench;
    bench.manifest = manifest;
    for (const auto& j : manifest.at("items")) {
        BenchmarkItem it;
        it.kind = item_kind_from_string(j.at("kind").get<std::string>());
        it.scene_seed = j.at("scene_seed");
        for (const auto& s : j.at("scenes")) it.scenes.push_back(scene_from_json(s));
        it.captions = {j.at("captions")[0].get<Tokens>(), j.at("captions")[1].get<Tokens>()};
        it.images.push_back(render_scene(it.scenes[0], grammar));
        if (it.kind == ItemKind::WinogroundStyle) it.images.push_back(render_scene(it.scenes[1], grammar));
        bench.items.push_back(std::move(it));
    }
    return bench;
}

// ---- evaluation -------------------------------------------------------------------

double EvalResult::mean_binary_accuracy(const std::vector<ItemKind>& kinds) const {
    double sum = 0;
    int n = 0;
    for (auto k : kinds) {
        auto it = accuracy.find(std::string(to_string(k)));
        if (it == accuracy.end()) continue;
        sum += it->second;
        ++n;
    }
    if (n == 0) fail(ErrorKind::Validation, "no accuracy for the requested kinds");
    return sum / n;
}

double EvalResult::mean_gap() const {
    double sum = 0;
    size_t n = 0;
    for (const auto& [k, g] : gaps) {
        for (double x : g) sum += x;
        n += g.size();
    }
    if (n == 0) fail(ErrorKind::Validation, "no score-gap samples");
    return sum / static_cast<double>(n);
}

void to_json(json& j, const EvalResult& r) {
    j = json{{"accuracy", r.accuracy},
             {"counts", r.counts},
             {"winoground", {{"text", r.text_score}, {"image", r.image_score}, {"group", r.group_score},
                             {"count", r.winoground_count}}},
             {"gaps", r.gaps},
             {"meta", r.meta}};
}

EvalResult eval_result_from_json(const json& j) {
    EvalResult r;
    r.accuracy = j.at("accuracy").get<std::map<std::string, double>>();
    r.counts = j.at("counts").get<std::map<std::string, int>>();
    const auto& w = j.at("winoground");
    r.text_score = w.at("text");
    r.image_score = w.at("image");
    r.group_score = w.at("group");
    r.winoground_count = w.at("count");
    r.gaps = j.at("gaps").get<std::map<std::string, std::vector<double>>>();
    r.meta = j.at("meta");
    return r;
}

EvalResult evaluate(const PairScorer& score, const Benchmark& bench) {
    EvalResult r;
    std::map<std::string, int> correct;
    int text = 0, image = 0, group = 0;
    for (const auto& it : bench.items) {
        if (it.kind == ItemKind::WinogroundStyle) {
            if (it.images.size() != 2) fail(ErrorKind::Input, "winoground item needs two images");
            double s[2][2];
            for (int i = 0; i < 2; ++i)
                for (int c = 0; c < 2; ++c) s[i][c] = score(it.images[i], it.captions[c]);
            const bool t = s[0][0] > s[0][1] && s[1][1] > s[1][0];
            const bool im = s[0][0] > s[1][0] && s[1][1] > s[0][1];
            text += t;
            image += im;
            group += t && im;
            ++r.winoground_count;
            continue;
        }
        if (it.images.size() != 1) fail(ErrorKind::Input, "binary item needs one image");
        const std::string k(to_string(it.kind));
        const double pos = score(it.images[0], it.captions[0]);
        const double neg = score(it.images[0], it.captions[1]);
        correct[k] += pos > neg;
        ++r.counts[k];
        r.gaps[k].push_back(pos - neg);
    }
    for (const auto& [k, n] : r.counts) r.accuracy[k] = static_cast<double>(correct[k]) / n;
    if (r.winoground_count > 0) {
        r.text_score = static_cast<double>(text) / r.winoground_count;
        r.image_score = static_cast<double>(image) / r.winoground_count;
        r.group_score = static_cast<double>(group) / r.winoground_count;
        r.counts["winoground_style"] = r.winoground_count;
    }
    return r;
}

EvalResult evaluate(const DualEncoder& encoder, const Benchmark& bench) {
    std::vector<const Image*> images;
    std::unordered_map<const Image*, size_t> image_row;
    std::vector<Tokens> captions;
    std::map<Tokens, size_t> caption_row;
    for (const auto& it : bench.items) {
        for (const auto& im : it.images)
            if (image_row.emplace(&im, images.size()).second) images.push_back(&im);
        for (const auto& c : it.captions)
            if (caption_row.emplace(c, captions.size()).second) captions.push_back(c);
    }
    const size_t chunk = 64;
    Mat ie(static_cast<Eigen::Index>(images.size()), encoder.config().embed);
    Mat te(static_cast<Eigen::Index>(captions.size()), encoder.config().embed);
    const size_t ni = (images.size() + chunk - 1) / chunk, nt = (captions.size() + chunk - 1) / chunk;
    parallel_for(ni + nt, [&](size_t c) {
        if (c < ni) {
            const size_t b = c * chunk, e = std::min(images.size(), b + chunk);
            std::vector<const Image*> part(images.begin() + static_cast<long>(b), images.begin() + static_cast<long>(e));
            ie.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) = encoder.encode_images(part);
        } else {
            const size_t b = (c - ni) * chunk, e = std::min(captions.size(), b + chunk);
            std::vector<Tokens> part(captions.begin() + static_cast<long>(b), captions.begin() + static_cast<long>(e));
            te.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) = encoder.encode_texts(part);
        }
    });
    auto normalize = [](Mat& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            const float n = m.row(r).norm();
            if (!(n > 0)) fail(ErrorKind::Degenerate, "zero embedding");
            m.row(r) /= n;
        }
    };
    normalize(ie);
    normalize(te);
    auto r = evaluate(
        [&](const Image& image, const Tokens& caption) {
            return static_cast<double>(ie.row(static_cast<Eigen::Index>(image_row.at(&image)))
                                           .dot(te.row(static_cast<Eigen::Index>(caption_row.at(caption)))));
        },
        bench);
    r.meta["encoder_checksum"] = encoder.params().checksum();
    return r;
}

namespace {

uint64_t hash64(const std::string& hex) { return std::stoull(hex.substr(0, 16), nullptr, 16); }

std::vector<double> seeded_embedding(uint64_t seed, int dim) {
    Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(dim));
    for (auto& x : v) x = rng.normal();
    return v;
}

}  // namespace

PairScorer random_scorer(uint64_t seed, int dim) {
    return [seed, dim](const Image& image, const Tokens& caption) {
        const auto a = seeded_embedding(derive_seed(seed, 1, hash64(image_hash(image))), dim);
        const auto b = seeded_embedding(derive_seed(seed, 2, hash64(sha256_hex(join_tokens(caption)))), dim);
        double dot = 0, na = 0, nb = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        return dot / std::sqrt(na * nb);
    };
}

PairScorer oracle_scorer(const GrammarConfig& grammar) {
    return [grammar](const Image& image, const Tokens& caption) {
        SceneSpec s;
        try {
            s = parse_caption(caption, grammar);
        } catch (const Error&) {
            return -1.0;
        }
        const auto v = verify_image(s, image, grammar);
        return static_cast<double>(v.attribute_ok) + v.position_ok + v.relation_ok;
    };
}

}  // namespace cfgen
