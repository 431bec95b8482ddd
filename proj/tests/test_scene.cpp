#include "doctest.h"

#include <algorithm>
#include <map>

#include "cfgen/scene.hpp"

using namespace cfgen;

namespace {

GrammarConfig grammar(int max_entities = 3) {
    auto cfg = GrammarConfig::defaults();
    cfg.max_entities = max_entities;
    return cfg;
}

// Independent re-check of every SceneSpec invariant.
bool scene_ok(const SceneSpec& s, const GrammarConfig& cfg) {
    std::set<int> ids;
    for (const auto& e : s.entities) {
        if (!ids.insert(e.id).second) return false;
        if (!(e.box.x1 > e.box.x0 && e.box.y1 > e.box.y0)) return false;
        if (e.box.x0 < 0 || e.box.y0 < 0 || e.box.x1 > 1 || e.box.y1 > 1) return false;
    }
    for (size_t i = 0; i < s.entities.size(); ++i)
        for (size_t j = i + 1; j < s.entities.size(); ++j) {
            const Box &a = s.entities[i].box, &b = s.entities[j].box;
            const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
            const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
            const double inter = ix * iy;
            if (inter / (a.area() + b.area() - inter) > cfg.iou_threshold + 1e-12) return false;
        }
    for (const auto& r : s.relations)
        if (!ids.count(r.subject) || !ids.count(r.object)) return false;
    return true;
}

size_t token_diff(const Tokens& a, const Tokens& b) {
    if (a.size() != b.size()) return SIZE_MAX;
    size_t d = 0;
    for (size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
    return d;
}

}  // namespace

TEST_CASE("generate_scene respects entity bounds and is deterministic") {
    const auto cfg = grammar(2);
    const auto s = generate_scene(0, cfg);
    CHECK(s.entities.size() >= 1);
    CHECK(s.entities.size() <= 2);
    CHECK(scene_ok(s, cfg));
    CHECK(generate_scene(0, cfg) == s);
    CHECK(generate_scene(12345, cfg) == generate_scene(12345, cfg));
}

TEST_CASE("1000-seed invariant scan") {
    const auto cfg = grammar(4);
    int violations = 0;
    std::map<size_t, int> sizes;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        const auto s = generate_scene(seed, cfg);
        violations += !scene_ok(s, cfg);
        sizes[s.entities.size()]++;
        CHECK_NOTHROW(validate_scene(s, cfg));
    }
    CHECK(violations == 0);
    CHECK(sizes.size() == 4);
}

TEST_CASE("placement failure surfaces as a placement error") {
    auto cfg = grammar(3);
    cfg.min_entities = 3;
    cfg.iou_threshold = 0.0;
    cfg.max_attempts = 2;
    int placement_errors = 0;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        try {
            generate_scene(seed, cfg);
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Placement);
            ++placement_errors;
        }
    }
    CHECK(placement_errors > 0);
}

TEST_CASE("config validation rejects bad vocabularies") {
    auto cfg = grammar();
    cfg.categories.clear();
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = grammar();
    cfg.max_entities = 20;
    CHECK_THROWS_AS(cfg.validate(), Error);
    CHECK_THROWS_AS(grammar_config_from_json(json{{"bogus", 1}}), Error);
    const auto round = grammar_config_from_json(json(grammar()));
    CHECK(round.categories == grammar().categories);
}

TEST_CASE("parse and render round-trip over 1000 scenes") {
    const auto cfg = grammar(4);
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        const auto s = generate_scene(seed, cfg);
        const auto parsed = parse_caption(render_caption(s), cfg);
        REQUIRE(equivalent(parsed, s));
    }
}

TEST_CASE("caption template for a single entity") {
    SceneSpec s;
    s.entities.push_back({0, "cube", {"red", "solid"}, slot_box({1, 0, 0})});
    const auto caption = render_caption(s);
    CHECK(join_tokens(caption) == "a small red solid cube at middle left");
    const auto parsed = parse_caption(caption, grammar());
    CHECK(parsed.relations.empty());
    CHECK(parsed.entities.size() == 1);
}

TEST_CASE("parse errors carry token positions") {
    const auto cfg = grammar();
    try {
        parse_caption({}, cfg);
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Parse);
        CHECK(e.detail() == 0);
    }
    try {
        parse_caption(split_tokens("a small red solid zebra at top left"), cfg);
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Parse);
        CHECK(e.detail() == 4);
    }
    try {
        parse_caption(split_tokens("a small red solid cube at top left . the cube above the ball"), cfg);
        FAIL("expected parse error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Parse);
        CHECK(e.detail() == 13);
    }
}

TEST_CASE("one-attribute difference yields a one-token caption difference") {
    const auto cfg = grammar(3);
    for (uint64_t seed = 0; seed < 300; ++seed) {
        const auto s = generate_scene(seed, cfg);
        const auto [p, t] = perturb(s, PerturbationKind::AttributeChange, seed, cfg);
        CHECK(token_diff(render_caption(s), render_caption(t)) == 1);
    }
}

TEST_CASE("attribute_change edits exactly one attribute and no box") {
    const auto cfg = grammar(3);
    for (uint64_t seed = 0; seed < 300; ++seed) {
        const auto s = generate_scene(seed, cfg);
        const auto [p, t] = perturb(s, PerturbationKind::AttributeChange, seed + 7, cfg);
        REQUIRE(t.entities.size() == s.entities.size());
        int edits = 0;
        for (size_t i = 0; i < s.entities.size(); ++i) {
            CHECK(s.entities[i].box == t.entities[i].box);
            CHECK(s.entities[i].category == t.entities[i].category);
            edits += s.entities[i].attributes.color != t.entities[i].attributes.color;
            edits += s.entities[i].attributes.state != t.entities[i].attributes.state;
        }
        CHECK(edits == 1);
        CHECK(s.relations == t.relations);
    }
}

TEST_CASE("attribute_change example: white to another color keeps the box") {
    auto cfg = grammar();
    cfg.colors = {"white", "black"};
    SceneSpec s;
    s.entities.push_back({0, "ball", {"white", "solid"}, slot_box({0, 0, 1})});
    bool saw_color = false;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const auto [p, t] = perturb(s, PerturbationKind::AttributeChange, seed, cfg);
        CHECK(t.entities[0].box == s.entities[0].box);
        if (p.attribute_key == "color") {
            CHECK(t.entities[0].attributes.color == "black");
            saw_color = true;
        }
    }
    CHECK(saw_color);
}

TEST_CASE("position_change moves exactly one box and no attribute") {
    const auto cfg = grammar(3);
    for (uint64_t seed = 0; seed < 300; ++seed) {
        const auto s = generate_scene(seed, cfg);
        const auto [p, t] = perturb(s, PerturbationKind::PositionChange, seed, cfg);
        int moved = 0;
        for (size_t i = 0; i < s.entities.size(); ++i) {
            CHECK(s.entities[i].attributes == t.entities[i].attributes);
            moved += !(s.entities[i].box == t.entities[i].box);
        }
        CHECK(moved == 1);
        // Relations stay true under the new geometry.
        for (const auto& r : t.relations) {
            if (!cfg.is_spatial(r.predicate)) continue;
            CHECK(spatial_holds(cfg, r.predicate, t.find(r.subject)->box, t.find(r.object)->box));
        }
        CHECK(render_caption(s) != render_caption(t));
    }
}

TEST_CASE("every non-regenerate kind changes the caption and keeps the scene valid") {
    const auto cfg = grammar(3);
    for (uint64_t seed = 0; seed < 200; ++seed) {
        const auto s = generate_scene(seed, cfg);
        for (auto kind : kAllPerturbationKinds) {
            try {
                const auto [p, t] = perturb(s, kind, seed, cfg);
                CHECK(scene_ok(t, cfg));
                if (kind == PerturbationKind::Regenerate) {
                    CHECK(t == s);
                    CHECK(p.variant_tag != 0);
                } else {
                    CHECK(render_caption(t) != render_caption(s));
                }
                CHECK(apply_perturbation(s, p, cfg) == t);
                CHECK(perturbation_from_json(json(p)) == p);
            } catch (const Error& e) {
                CHECK(e.kind() == ErrorKind::Exhaustion);
            }
        }
    }
}

TEST_CASE("remove_entity on a single-entity scene is exhausted") {
    SceneSpec s;
    s.entities.push_back({0, "cube", {"red", "solid"}, slot_box({0, 0, 0})});
    CHECK_THROWS_AS(perturb(s, PerturbationKind::RemoveEntity, 1, grammar()), Error);
    CHECK_THROWS_AS(perturb(s, PerturbationKind::RelationChange, 1, grammar()), Error);
}

TEST_CASE("relation_change never emits a pure swap for whitelisted predicates") {
    auto cfg = grammar(4);
    cfg.interactive_relation_prob = 0.5;
    size_t candidates = 0, whitelisted_sources = 0;
    for (uint64_t seed = 0; seed < 500; ++seed) {
        const auto s = generate_scene(seed, cfg);
        for (const auto& p : relation_change_candidates(s, cfg)) {
            ++candidates;
            const Relation& before = s.relations[static_cast<size_t>(p.relation_index)];
            const Relation& after = *p.relation;
            const bool pure_swap = after.predicate == before.predicate && after.subject == before.object &&
                                   after.object == before.subject;
            if (cfg.whitelist.contains(before.predicate)) {
                ++whitelisted_sources;
                CHECK_FALSE(pure_swap);
            }
            // Boxes are fixed, so a spatial rewrite must be false in the current layout.
            if (cfg.is_spatial(after.predicate))
                CHECK_FALSE(spatial_holds(cfg, after.predicate, s.find(after.subject)->box, s.find(after.object)->box));
        }
    }
    CHECK(candidates > 0);
    CHECK(whitelisted_sources > 0);
}

TEST_CASE("relation_change keeps every box and attribute") {
    const auto cfg = grammar(3);
    for (uint64_t seed = 0; seed < 200; ++seed) {
        const auto s = generate_scene(seed, cfg);
        if (s.relations.empty()) continue;
        const auto [p, t] = perturb(s, PerturbationKind::RelationChange, seed, cfg);
        CHECK(t.entities == s.entities);
        CHECK(t.relations != s.relations);
    }
}

TEST_CASE("permute_word_order changes semantics on 500 captions") {
    const auto cfg = grammar(3);
    int checked = 0;
    for (uint64_t seed = 0; checked < 500; ++seed) {
        const auto s = generate_scene(seed, cfg);
        const auto caption = render_caption(s);
        Tokens neg;
        try {
            neg = permute_word_order(caption, seed, cfg);
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Exhaustion);
            continue;
        }
        ++checked;
        CHECK(neg != caption);
        auto a = caption, b = neg;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
        bool differs = true;
        try {
            differs = !equivalent(parse_caption(neg, cfg), s);
        } catch (const Error&) {
        }
        CHECK(differs);
    }
}

TEST_CASE("permute_word_order swaps relation arguments") {
    const auto cfg = grammar();
    const auto caption = split_tokens("the ball left_of the cube");
    const auto out = permute_word_order(caption, 3, cfg);
    CHECK(join_tokens(out) == "the cube left_of the ball");
}

TEST_CASE("permute_word_order exhaustion cases") {
    const auto cfg = grammar();
    CHECK_THROWS_AS(permute_word_order(split_tokens("a"), 0, cfg), Error);
    // Only one token per class: no same-class swap exists.
    try {
        permute_word_order(split_tokens("a small red solid cube at top left"), 0, cfg);
        FAIL("expected exhaustion");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Exhaustion);
    }
}

TEST_CASE("scene JSON round-trips and rejects inconsistent captions") {
    const auto cfg = grammar(3);
    for (uint64_t seed = 0; seed < 50; ++seed) {
        const auto s = generate_scene(seed, cfg);
        const json j = s;
        CHECK(j.at("global_caption").get<Tokens>() == render_caption(s));
        CHECK(scene_from_json(j) == s);
        json bad = j;
        bad["global_caption"] = json::array({"a"});
        CHECK_THROWS_AS(scene_from_json(bad), Error);
    }
}

TEST_CASE("spatial predicates honor the dead zone") {
    const auto cfg = grammar();
    CHECK(spatial_holds_px(cfg, "left_of", 10, 0, 12.5, 0));
    CHECK_FALSE(spatial_holds_px(cfg, "left_of", 10, 0, 12.0, 0));
    CHECK(spatial_holds_px(cfg, "above", 0, 3, 0, 6));
    CHECK(spatial_holds_px(cfg, "near", 0, 0, 17, 0));
    CHECK_FALSE(spatial_holds_px(cfg, "far_from", 0, 0, 24.9, 0));
}
