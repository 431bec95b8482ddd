#include "cfgen/scene.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace cfgen {

namespace {

constexpr int kAnchorStart = 12;
constexpr int kAnchorStep = 20;
constexpr std::array<int, 2> kHalfSide = {8, 10};

constexpr std::array<const char*, 5> kFunctionTokens = {"a", "and", "at", "the", "."};

const std::array<const char*, 6> kSpatialNames = {"left_of", "right_of", "above", "below", "near", "far_from"};

bool contains(const std::vector<std::string>& v, const std::string& x) {
    return std::find(v.begin(), v.end(), x) != v.end();
}

template <size_t N>
int index_of(const std::array<const char*, N>& arr, const std::string& x) {
    for (size_t i = 0; i < N; ++i)
        if (x == arr[i]) return static_cast<int>(i);
    return -1;
}

[[noreturn]] void parse_fail(const std::string& what, size_t pos) {
    fail(ErrorKind::Parse, "parse error at token " + std::to_string(pos) + ": " + what, static_cast<long long>(pos));
}

}  // namespace

std::string join_tokens(const Tokens& tokens) {
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (i) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

Tokens split_tokens(const std::string& text) {
    Tokens out;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

Box slot_box(const Slot& slot) {
    const int cx = kAnchorStart + kAnchorStep * slot.col;
    const int cy = kAnchorStart + kAnchorStep * slot.row;
    const int h = kHalfSide.at(static_cast<size_t>(slot.size));
    const double g = kGridCells;
    return Box{(cx - h) / g, (cy - h) / g, (cx + h) / g, (cy + h) / g};
}

std::vector<Slot> all_slots() {
    std::vector<Slot> out;
    for (int size = 0; size < 2; ++size)
        for (int row = 0; row < 3; ++row)
            for (int col = 0; col < 3; ++col) out.push_back({row, col, size});
    return out;
}

std::optional<Slot> slot_of(const Box& box) {
    for (const auto& s : all_slots())
        if (slot_box(s) == box) return s;
    return std::nullopt;
}

Tokens Entity::local_caption() const { return {attributes.color, attributes.state, category}; }

const Entity* SceneSpec::find(int id) const {
    for (const auto& e : entities)
        if (e.id == id) return &e;
    return nullptr;
}

Entity* SceneSpec::find(int id) {
    for (auto& e : entities)
        if (e.id == id) return &e;
    return nullptr;
}

Tokens SceneSpec::global_caption() const { return render_caption(*this); }

RelationWhitelist RelationWhitelist::defaults() {
    // Desk-scale whitelist; only entries present in the grammar vocabulary are
    // ever consulted.
    return RelationWhitelist{{
        "near",        "far_from",      "touching",     "meeting",     "beside",       "next_to",
        "facing",      "talking_with",  "playing_with", "dancing_with", "married_to",  "shaking_hands_with",
        "hugging",     "kissing",       "arguing_with", "fighting",    "racing",       "colliding_with",
        "aligned_with", "connected_to", "adjacent_to",  "equal_to",    "sharing_with", "across_from",
    }};
}

GrammarConfig GrammarConfig::defaults() {
    GrammarConfig cfg;
    cfg.categories = {"cube", "ball", "tree", "cone", "gem", "star", "log", "post"};
    cfg.colors = {"red", "green", "blue", "yellow", "white", "black"};
    cfg.states = {"solid", "hollow", "striped", "dotted"};
    cfg.spatial_predicates = {kSpatialNames.begin(), kSpatialNames.end()};
    cfg.interactive_predicates = {"chasing", "watching", "touching", "meeting"};
    cfg.whitelist = RelationWhitelist::defaults();
    return cfg;
}

bool GrammarConfig::is_spatial(const std::string& predicate) const { return contains(spatial_predicates, predicate); }

bool GrammarConfig::is_predicate(const std::string& predicate) const {
    return contains(spatial_predicates, predicate) || contains(interactive_predicates, predicate);
}

void GrammarConfig::validate() const {
    if (categories.empty() || colors.empty() || states.empty())
        fail(ErrorKind::Config, "grammar vocabulary must be non-empty");
    if (min_entities < 1 || max_entities < min_entities)
        fail(ErrorKind::Config, "entity count range must satisfy 1 <= min_entities <= max_entities");
    if (max_entities > static_cast<int>(categories.size()))
        fail(ErrorKind::Config, "max_entities exceeds the number of categories");
    if (max_entities > 9) fail(ErrorKind::Config, "max_entities exceeds the 9 layout anchors");
    for (const auto& p : spatial_predicates)
        if (!spatial_predicate_from_token(p)) fail(ErrorKind::Config, "unknown spatial predicate " + p);
    if (iou_threshold < 0 || iou_threshold >= 1) fail(ErrorKind::Config, "iou_threshold must be in [0,1)");
    if (max_attempts < 1) fail(ErrorKind::Config, "max_attempts must be positive");
    if (interactive_relation_prob < 0 || interactive_relation_prob > 1)
        fail(ErrorKind::Config, "interactive_relation_prob must be in [0,1]");
    std::set<std::string> seen;
    auto check_vocab = [&](const std::vector<std::string>& words) {
        for (const auto& w : words) {
            if (!seen.insert(w).second) fail(ErrorKind::Config, "token listed twice in vocabulary: " + w);
            if (index_of(kFunctionTokens, w) >= 0 || index_of(kRowTokens, w) >= 0 || index_of(kColTokens, w) >= 0 ||
                index_of(kSizeTokens, w) >= 0)
                fail(ErrorKind::Config, "vocabulary token collides with a reserved token: " + w);
        }
    };
    check_vocab(categories);
    check_vocab(colors);
    check_vocab(states);
    check_vocab(spatial_predicates);
    check_vocab(interactive_predicates);
}

void to_json(json& j, const GrammarConfig& cfg) {
    j = json{{"categories", cfg.categories},
             {"colors", cfg.colors},
             {"states", cfg.states},
             {"spatial_predicates", cfg.spatial_predicates},
             {"interactive_predicates", cfg.interactive_predicates},
             {"symmetric_predicates", cfg.whitelist.symmetric_predicates},
             {"min_entities", cfg.min_entities},
             {"max_entities", cfg.max_entities},
             {"iou_threshold", cfg.iou_threshold},
             {"max_attempts", cfg.max_attempts},
             {"interactive_relation_prob", cfg.interactive_relation_prob},
             {"pixel_size", cfg.pixel_size},
             {"dead_zone_px", cfg.dead_zone_px},
             {"near_px", cfg.near_px},
             {"far_px", cfg.far_px}};
}

GrammarConfig grammar_config_from_json(const json& j) {
    GrammarConfig cfg = GrammarConfig::defaults();
    if (!j.is_object()) fail(ErrorKind::Config, "grammar config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "categories") cfg.categories = value.get<std::vector<std::string>>();
        else if (key == "colors") cfg.colors = value.get<std::vector<std::string>>();
        else if (key == "states") cfg.states = value.get<std::vector<std::string>>();
        else if (key == "spatial_predicates") cfg.spatial_predicates = value.get<std::vector<std::string>>();
        else if (key == "interactive_predicates") cfg.interactive_predicates = value.get<std::vector<std::string>>();
        else if (key == "symmetric_predicates") cfg.whitelist.symmetric_predicates = value.get<std::set<std::string>>();
        else if (key == "min_entities") cfg.min_entities = value.get<int>();
        else if (key == "max_entities") cfg.max_entities = value.get<int>();
        else if (key == "iou_threshold") cfg.iou_threshold = value.get<double>();
        else if (key == "max_attempts") cfg.max_attempts = value.get<int>();
        else if (key == "interactive_relation_prob") cfg.interactive_relation_prob = value.get<double>();
        else if (key == "pixel_size") cfg.pixel_size = value.get<int>();
        else if (key == "dead_zone_px") cfg.dead_zone_px = value.get<double>();
        else if (key == "near_px") cfg.near_px = value.get<double>();
        else if (key == "far_px") cfg.far_px = value.get<double>();
        else fail(ErrorKind::Config, "unknown grammar config key: " + key);
    }
    cfg.validate();
    return cfg;
}

std::optional<SpatialPredicate> spatial_predicate_from_token(const std::string& token) {
    static const std::map<std::string, SpatialPredicate> kMap = {
        {"left_of", SpatialPredicate::LeftOf}, {"right_of", SpatialPredicate::RightOf},
        {"above", SpatialPredicate::Above},    {"below", SpatialPredicate::Below},
        {"near", SpatialPredicate::Near},      {"far_from", SpatialPredicate::FarFrom}};
    auto it = kMap.find(token);
    if (it == kMap.end()) return std::nullopt;
    return it->second;
}

bool spatial_holds_px(const GrammarConfig& cfg, const std::string& predicate, double sx, double sy, double ox,
                      double oy) {
    const auto p = spatial_predicate_from_token(predicate);
    if (!p) return false;
    const double dz = cfg.dead_zone_px;
    switch (*p) {
        case SpatialPredicate::LeftOf: return sx < ox - dz;
        case SpatialPredicate::RightOf: return sx > ox + dz;
        case SpatialPredicate::Above: return sy < oy - dz;
        case SpatialPredicate::Below: return sy > oy + dz;
        case SpatialPredicate::Near: return std::hypot(sx - ox, sy - oy) <= cfg.near_px;
        case SpatialPredicate::FarFrom: return std::hypot(sx - ox, sy - oy) >= cfg.far_px;
    }
    return false;
}

bool spatial_holds(const GrammarConfig& cfg, const std::string& predicate, const Box& subject, const Box& object) {
    const double s = cfg.pixel_size;
    return spatial_holds_px(cfg, predicate, subject.center_x() * s, subject.center_y() * s, object.center_x() * s,
                            object.center_y() * s);
}

std::string_view to_string(PerturbationKind kind) {
    switch (kind) {
        case PerturbationKind::AttributeChange: return "attribute_change";
        case PerturbationKind::PositionChange: return "position_change";
        case PerturbationKind::RelationChange: return "relation_change";
        case PerturbationKind::AddEntity: return "add_entity";
        case PerturbationKind::RemoveEntity: return "remove_entity";
        case PerturbationKind::Regenerate: return "regenerate";
    }
    return "unknown";
}

PerturbationKind perturbation_kind_from_string(std::string_view name) {
    for (auto k : kAllPerturbationKinds)
        if (to_string(k) == name) return k;
    fail(ErrorKind::Config, "unknown perturbation kind: " + std::string(name));
}

// ---- JSON ------------------------------------------------------------------

void to_json(json& j, const Box& box) { j = json::array({box.x0, box.y0, box.x1, box.y1}); }

void to_json(json& j, const Entity& e) {
    j = json{{"id", e.id},
             {"category", e.category},
             {"attributes", {{"color", e.attributes.color}, {"state", e.attributes.state}}},
             {"box", e.box},
             {"local_caption", e.local_caption()}};
}

void to_json(json& j, const Relation& r) {
    j = json{{"subject_id", r.subject}, {"predicate", r.predicate}, {"object_id", r.object}};
}

void to_json(json& j, const SceneSpec& s) {
    j = json{{"entities", s.entities}, {"relations", s.relations}, {"global_caption", s.global_caption()}};
}

namespace {

Box box_from_json(const json& j) {
    if (!j.is_array() || j.size() != 4) fail(ErrorKind::Validation, "box must be [x0, y0, x1, y1]");
    return Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

Entity entity_from_json(const json& j) {
    Entity e;
    e.id = j.at("id").get<int>();
    e.category = j.at("category").get<std::string>();
    e.attributes.color = j.at("attributes").at("color").get<std::string>();
    e.attributes.state = j.at("attributes").at("state").get<std::string>();
    e.box = box_from_json(j.at("box"));
    if (j.contains("local_caption") && j.at("local_caption").get<Tokens>() != e.local_caption())
        fail(ErrorKind::Validation, "local_caption does not match category and attributes");
    return e;
}

Relation relation_from_json(const json& j) {
    return Relation{j.at("subject_id").get<int>(), j.at("predicate").get<std::string>(), j.at("object_id").get<int>()};
}

}  // namespace

SceneSpec scene_from_json(const json& j) {
    SceneSpec s;
    try {
        for (const auto& e : j.at("entities")) s.entities.push_back(entity_from_json(e));
        for (const auto& r : j.at("relations")) s.relations.push_back(relation_from_json(r));
    } catch (const json::exception& ex) {
        fail(ErrorKind::Validation, std::string("malformed scene JSON: ") + ex.what());
    }
    if (j.contains("global_caption") && j.at("global_caption").get<Tokens>() != s.global_caption())
        fail(ErrorKind::Validation, "global_caption does not match entities and relations");
    return s;
}

void to_json(json& j, const Perturbation& p) {
    j = json{{"kind", std::string(to_string(p.kind))},
             {"targets", p.targets},
             {"relation_index", p.relation_index},
             {"variant_tag", p.variant_tag}};
    json payload = json::object();
    if (!p.attribute_key.empty()) {
        payload["attribute_key"] = p.attribute_key;
        payload["attribute_value"] = p.attribute_value;
    }
    if (p.box) payload["box"] = *p.box;
    if (p.relation) payload["relation"] = *p.relation;
    if (p.entity) payload["entity"] = *p.entity;
    if (!p.relation_updates.empty()) {
        json updates = json::array();
        for (const auto& [idx, rel] : p.relation_updates) updates.push_back({{"index", idx}, {"relation", rel}});
        payload["relation_updates"] = updates;
    }
    j["payload"] = payload;
}

Perturbation perturbation_from_json(const json& j) {
    Perturbation p;
    p.kind = perturbation_kind_from_string(j.at("kind").get<std::string>());
    p.targets = j.at("targets").get<std::vector<int>>();
    p.relation_index = j.at("relation_index").get<int>();
    p.variant_tag = j.at("variant_tag").get<uint64_t>();
    const json& payload = j.at("payload");
    if (payload.contains("attribute_key")) {
        p.attribute_key = payload.at("attribute_key").get<std::string>();
        p.attribute_value = payload.at("attribute_value").get<std::string>();
    }
    if (payload.contains("box")) p.box = box_from_json(payload.at("box"));
    if (payload.contains("relation")) p.relation = relation_from_json(payload.at("relation"));
    if (payload.contains("entity")) p.entity = entity_from_json(payload.at("entity"));
    if (payload.contains("relation_updates"))
        for (const auto& u : payload.at("relation_updates"))
            p.relation_updates.emplace_back(u.at("index").get<int>(), relation_from_json(u.at("relation")));
    return p;
}

// ---- validation ------------------------------------------------------------

void validate_scene(const SceneSpec& scene, const GrammarConfig& cfg) {
    std::set<int> ids;
    std::set<std::string> cats;
    for (const auto& e : scene.entities) {
        if (!ids.insert(e.id).second) fail(ErrorKind::Validation, "duplicate entity id " + std::to_string(e.id));
        if (!cats.insert(e.category).second) fail(ErrorKind::Validation, "duplicate category " + e.category);
        if (!contains(cfg.categories, e.category)) fail(ErrorKind::Validation, "unknown category " + e.category);
        if (!contains(cfg.colors, e.attributes.color)) fail(ErrorKind::Validation, "unknown color " + e.attributes.color);
        if (!contains(cfg.states, e.attributes.state)) fail(ErrorKind::Validation, "unknown state " + e.attributes.state);
        const Box& b = e.box;
        if (!(b.width() > 0 && b.height() > 0)) fail(ErrorKind::Validation, "box must have positive extent");
        if (b.x0 < 0 || b.y0 < 0 || b.x1 > 1 || b.y1 > 1) fail(ErrorKind::Validation, "box outside [0,1]^2");
    }
    for (size_t i = 0; i < scene.entities.size(); ++i)
        for (size_t j = i + 1; j < scene.entities.size(); ++j)
            if (iou(scene.entities[i].box, scene.entities[j].box) > cfg.iou_threshold)
                fail(ErrorKind::Validation, "entity boxes overlap beyond the IoU threshold");
    for (size_t r = 0; r < scene.relations.size(); ++r) {
        const auto& rel = scene.relations[r];
        if (!ids.count(rel.subject) || !ids.count(rel.object))
            fail(ErrorKind::Validation, "relation references a missing entity");
        if (rel.subject == rel.object) fail(ErrorKind::Validation, "relation subject equals object");
        if (!cfg.is_predicate(rel.predicate)) fail(ErrorKind::Validation, "unknown predicate " + rel.predicate);
        for (size_t q = 0; q < r; ++q)
            if (scene.relations[q] == rel) fail(ErrorKind::Validation, "duplicate relation");
    }
}

SceneSpec canonical(const SceneSpec& scene) {
    SceneSpec out = scene;
    std::map<int, int> relabel;
    for (size_t i = 0; i < out.entities.size(); ++i) {
        relabel[out.entities[i].id] = static_cast<int>(i);
        out.entities[i].id = static_cast<int>(i);
    }
    for (auto& r : out.relations) {
        r.subject = relabel.count(r.subject) ? relabel[r.subject] : -1;
        r.object = relabel.count(r.object) ? relabel[r.object] : -1;
    }
    return out;
}

bool equivalent(const SceneSpec& a, const SceneSpec& b) { return canonical(a) == canonical(b); }

// ---- generation ------------------------------------------------------------

namespace {

bool slot_fits(const Box& candidate, const SceneSpec& scene, const GrammarConfig& cfg, int ignore_id = -1) {
    for (const auto& e : scene.entities) {
        if (e.id == ignore_id) continue;
        if (iou(candidate, e.box) > cfg.iou_threshold) return false;
    }
    return true;
}

std::vector<std::string> holding_spatial(const GrammarConfig& cfg, const Box& s, const Box& o) {
    std::vector<std::string> out;
    for (const auto& p : cfg.spatial_predicates)
        if (spatial_holds(cfg, p, s, o)) out.push_back(p);
    return out;
}

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
    return v[static_cast<size_t>(rng.below(v.size()))];
}

int next_id(const SceneSpec& scene) {
    int id = 0;
    for (const auto& e : scene.entities) id = std::max(id, e.id + 1);
    return id;
}

}  // namespace

SceneSpec generate_scene(uint64_t seed, const GrammarConfig& cfg) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x5ce4e));
    const int count = cfg.min_entities + static_cast<int>(rng.below(static_cast<uint64_t>(cfg.max_entities - cfg.min_entities + 1)));

    std::vector<std::string> cats = cfg.categories;
    rng.shuffle(cats);
    const auto slots = all_slots();

    SceneSpec scene;
    int attempts = 0;
    for (int i = 0; i < count; ++i) {
        Entity e;
        e.id = i;
        e.category = cats[static_cast<size_t>(i)];
        e.attributes.color = pick(rng, cfg.colors);
        e.attributes.state = pick(rng, cfg.states);
        while (true) {
            if (++attempts > cfg.max_attempts)
                fail(ErrorKind::Placement, "could not place " + std::to_string(count) + " entities within " +
                                               std::to_string(cfg.max_attempts) + " attempts");
            const Box b = slot_box(pick(rng, slots));
            if (slot_fits(b, scene, cfg)) {
                e.box = b;
                break;
            }
        }
        scene.entities.push_back(e);
    }

    for (int i = 1; i < count; ++i) {
        int s = i - 1, o = i;
        if (rng.uniform() < 0.5) std::swap(s, o);
        const bool interactive = !cfg.interactive_predicates.empty() && rng.uniform() < cfg.interactive_relation_prob;
        if (interactive) {
            scene.relations.push_back({s, pick(rng, cfg.interactive_predicates), o});
            continue;
        }
        const auto holding = holding_spatial(cfg, scene.entities[static_cast<size_t>(s)].box,
                                             scene.entities[static_cast<size_t>(o)].box);
        if (!holding.empty()) scene.relations.push_back({s, pick(rng, holding), o});
    }
    return scene;
}

// ---- captions --------------------------------------------------------------

Tokens render_caption(const SceneSpec& scene) {
    Tokens out;
    for (size_t i = 0; i < scene.entities.size(); ++i) {
        const Entity& e = scene.entities[i];
        const auto slot = slot_of(e.box);
        if (!slot) fail(ErrorKind::Validation, "entity box is not a grammar slot");
        if (i) out.push_back("and");
        out.insert(out.end(), {"a", kSizeTokens[static_cast<size_t>(slot->size)], e.attributes.color,
                               e.attributes.state, e.category, "at", kRowTokens[static_cast<size_t>(slot->row)],
                               kColTokens[static_cast<size_t>(slot->col)]});
    }
    for (const auto& r : scene.relations) {
        const Entity* s = scene.find(r.subject);
        const Entity* o = scene.find(r.object);
        if (!s || !o) fail(ErrorKind::Validation, "relation references a missing entity");
        out.insert(out.end(), {".", "the", s->category, r.predicate, "the", o->category});
    }
    return out;
}

SceneSpec parse_caption(const Tokens& caption, const GrammarConfig& cfg) {
    if (caption.empty()) parse_fail("empty caption", 0);
    for (size_t i = 0; i < caption.size(); ++i) {
        const auto& t = caption[i];
        const bool known = index_of(kFunctionTokens, t) >= 0 || index_of(kSizeTokens, t) >= 0 ||
                           index_of(kRowTokens, t) >= 0 || index_of(kColTokens, t) >= 0 ||
                           contains(cfg.colors, t) || contains(cfg.states, t) || contains(cfg.categories, t) ||
                           cfg.is_predicate(t);
        if (!known) parse_fail("unknown token '" + t + "'", i);
    }

    size_t pos = 0;
    auto expect = [&](auto&& ok, const char* what) -> const std::string& {
        if (pos >= caption.size()) parse_fail(std::string("expected ") + what + " but caption ended", pos);
        if (!ok(caption[pos])) parse_fail(std::string("expected ") + what + ", got '" + caption[pos] + "'", pos);
        return caption[pos++];
    };
    auto literal = [](const char* lit) { return [lit](const std::string& t) { return t == lit; }; };
    auto in_list = [](const std::vector<std::string>& v) { return [&v](const std::string& t) { return contains(v, t); }; };

    SceneSpec scene;
    std::map<std::string, int> by_category;
    while (true) {
        const size_t phrase_start = pos;
        expect(literal("a"), "'a'");
        const int size = index_of(kSizeTokens, expect([](const std::string& t) { return index_of(kSizeTokens, t) >= 0; }, "size"));
        Entity e;
        e.id = static_cast<int>(scene.entities.size());
        e.attributes.color = expect(in_list(cfg.colors), "color");
        e.attributes.state = expect(in_list(cfg.states), "state");
        const size_t cat_pos = pos;
        e.category = expect(in_list(cfg.categories), "category");
        expect(literal("at"), "'at'");
        const int row = index_of(kRowTokens, expect([](const std::string& t) { return index_of(kRowTokens, t) >= 0; }, "row"));
        const int col = index_of(kColTokens, expect([](const std::string& t) { return index_of(kColTokens, t) >= 0; }, "column"));
        e.box = slot_box({row, col, size});
        if (by_category.count(e.category)) parse_fail("category '" + e.category + "' appears twice", cat_pos);
        for (const auto& other : scene.entities)
            if (iou(other.box, e.box) > cfg.iou_threshold) parse_fail("entity box overlaps an earlier entity", phrase_start);
        by_category[e.category] = e.id;
        scene.entities.push_back(e);
        if (pos == caption.size()) return scene;
        if (caption[pos] == "and") {
            ++pos;
            continue;
        }
        break;
    }
    while (pos < caption.size()) {
        expect(literal("."), "'.'");
        expect(literal("the"), "'the'");
        const size_t sp = pos;
        const std::string& subj = expect(in_list(cfg.categories), "subject category");
        const std::string& pred = expect([&](const std::string& t) { return cfg.is_predicate(t); }, "predicate");
        expect(literal("the"), "'the'");
        const size_t op = pos;
        const std::string& obj = expect(in_list(cfg.categories), "object category");
        if (!by_category.count(subj)) parse_fail("relation subject '" + subj + "' is not an entity", sp);
        if (!by_category.count(obj)) parse_fail("relation object '" + obj + "' is not an entity", op);
        if (subj == obj) parse_fail("relation subject equals object", op);
        Relation r{by_category[subj], pred, by_category[obj]};
        for (const auto& existing : scene.relations)
            if (existing == r) parse_fail("duplicate relation", sp);
        scene.relations.push_back(r);
    }
    return scene;
}

// ---- perturbations ---------------------------------------------------------

SceneSpec apply_perturbation(const SceneSpec& scene, const Perturbation& p, const GrammarConfig& cfg) {
    SceneSpec out = scene;
    auto target = [&]() -> Entity& {
        if (p.targets.empty()) fail(ErrorKind::Input, "perturbation has no target");
        Entity* e = out.find(p.targets.front());
        if (!e) fail(ErrorKind::Input, "perturbation target missing from scene");
        return *e;
    };
    switch (p.kind) {
        case PerturbationKind::AttributeChange: {
            Entity& e = target();
            if (p.attribute_key == "color") e.attributes.color = p.attribute_value;
            else if (p.attribute_key == "state") e.attributes.state = p.attribute_value;
            else fail(ErrorKind::Input, "unknown attribute key " + p.attribute_key);
            break;
        }
        case PerturbationKind::PositionChange: {
            if (!p.box) fail(ErrorKind::Input, "position_change without a box");
            target().box = *p.box;
            for (const auto& [idx, rel] : p.relation_updates) out.relations.at(static_cast<size_t>(idx)) = rel;
            break;
        }
        case PerturbationKind::RelationChange: {
            if (!p.relation || p.relation_index < 0) fail(ErrorKind::Input, "relation_change without a relation");
            out.relations.at(static_cast<size_t>(p.relation_index)) = *p.relation;
            break;
        }
        case PerturbationKind::AddEntity: {
            if (!p.entity) fail(ErrorKind::Input, "add_entity without an entity");
            out.entities.push_back(*p.entity);
            if (p.relation) out.relations.push_back(*p.relation);
            break;
        }
        case PerturbationKind::RemoveEntity: {
            const int id = target().id;
            std::erase_if(out.entities, [id](const Entity& e) { return e.id == id; });
            std::erase_if(out.relations, [id](const Relation& r) { return r.subject == id || r.object == id; });
            break;
        }
        case PerturbationKind::Regenerate: break;
    }
    validate_scene(out, cfg);
    return out;
}

std::vector<Perturbation> relation_change_candidates(const SceneSpec& scene, const GrammarConfig& cfg) {
    std::vector<Perturbation> out;
    for (size_t r = 0; r < scene.relations.size(); ++r) {
        const Relation& rel = scene.relations[r];
        const Entity* s = scene.find(rel.subject);
        const Entity* o = scene.find(rel.object);
        if (!s || !o) continue;
        const bool spatial = cfg.is_spatial(rel.predicate);
        std::vector<Relation> rewrites;
        // Stage 1: argument swap, only for predicates outside the whitelist.
        if (!cfg.whitelist.contains(rel.predicate)) rewrites.push_back({rel.object, rel.predicate, rel.subject});
        // Stage 2: predicate replacement within the same predicate family.
        for (const auto& p : spatial ? cfg.spatial_predicates : cfg.interactive_predicates)
            if (p != rel.predicate) rewrites.push_back({rel.subject, p, rel.object});
        for (const auto& nr : rewrites) {
            if (spatial) {
                const Entity* ns = scene.find(nr.subject);
                const Entity* no = scene.find(nr.object);
                // Boxes stay fixed, so a spatial rewrite must contradict the geometry.
                if (spatial_holds(cfg, nr.predicate, ns->box, no->box)) continue;
            }
            bool duplicate = false;
            for (size_t q = 0; q < scene.relations.size(); ++q)
                if (q != r && scene.relations[q] == nr) duplicate = true;
            if (duplicate) continue;
            Perturbation p;
            p.kind = PerturbationKind::RelationChange;
            p.targets = {rel.subject, rel.object};
            p.relation_index = static_cast<int>(r);
            p.relation = nr;
            out.push_back(p);
        }
    }
    return out;
}

std::pair<Perturbation, SceneSpec> perturb(const SceneSpec& scene, PerturbationKind kind, uint64_t seed,
                                           const GrammarConfig& cfg) {
    validate_scene(scene, cfg);
    Rng rng(derive_seed(seed, 0x9e27, static_cast<uint64_t>(kind)));
    Perturbation p;
    p.kind = kind;
    auto exhausted = [&](const std::string& why) {
        fail(ErrorKind::Exhaustion, "no valid " + std::string(to_string(kind)) + " perturbation: " + why);
    };

    switch (kind) {
        case PerturbationKind::AttributeChange: {
            std::vector<Perturbation> cands;
            for (const auto& e : scene.entities) {
                for (const auto& c : cfg.colors)
                    if (c != e.attributes.color) {
                        Perturbation q = p;
                        q.targets = {e.id};
                        q.attribute_key = "color";
                        q.attribute_value = c;
                        cands.push_back(q);
                    }
                for (const auto& s : cfg.states)
                    if (s != e.attributes.state) {
                        Perturbation q = p;
                        q.targets = {e.id};
                        q.attribute_key = "state";
                        q.attribute_value = s;
                        cands.push_back(q);
                    }
            }
            if (cands.empty()) exhausted("vocabulary has a single value per attribute");
            p = pick(rng, cands);
            break;
        }
        case PerturbationKind::PositionChange: {
            // Moves keep the entity's size; the new anchor differs from the old one.
            std::vector<std::pair<int, Box>> cands;
            for (const auto& e : scene.entities) {
                const auto slot = slot_of(e.box);
                if (!slot) continue;
                const Slot cur = *slot;
                for (const auto& s : all_slots()) {
                    if (s.size != cur.size || (s.row == cur.row && s.col == cur.col)) continue;
                    const Box b = slot_box(s);
                    if (slot_fits(b, scene, cfg, e.id)) cands.emplace_back(e.id, b);
                }
            }
            if (cands.empty()) exhausted("no free anchor");
            const auto [id, box] = pick(rng, cands);
            p.targets = {id};
            p.box = box;
            SceneSpec moved = scene;
            moved.find(id)->box = box;
            for (size_t r = 0; r < scene.relations.size(); ++r) {
                const Relation& rel = scene.relations[r];
                if ((rel.subject != id && rel.object != id) || !cfg.is_spatial(rel.predicate)) continue;
                const Box& sb = moved.find(rel.subject)->box;
                const Box& ob = moved.find(rel.object)->box;
                if (spatial_holds(cfg, rel.predicate, sb, ob)) continue;
                auto holding = holding_spatial(cfg, sb, ob);
                std::erase_if(holding, [&](const std::string& pred) {
                    const Relation cand{rel.subject, pred, rel.object};
                    return std::find(scene.relations.begin(), scene.relations.end(), cand) != scene.relations.end();
                });
                if (holding.empty()) exhausted("moved entity admits no consistent relation");
                p.relation_updates.emplace_back(static_cast<int>(r), Relation{rel.subject, pick(rng, holding), rel.object});
            }
            break;
        }
        case PerturbationKind::RelationChange: {
            const auto cands = relation_change_candidates(scene, cfg);
            if (cands.empty()) exhausted("scene has no rewritable relation");
            p = pick(rng, cands);
            break;
        }
        case PerturbationKind::AddEntity: {
            std::vector<std::string> unused;
            for (const auto& c : cfg.categories)
                if (!std::any_of(scene.entities.begin(), scene.entities.end(),
                                 [&](const Entity& e) { return e.category == c; }))
                    unused.push_back(c);
            std::vector<Box> free;
            for (const auto& s : all_slots())
                if (slot_fits(slot_box(s), scene, cfg)) free.push_back(slot_box(s));
            if (unused.empty()) exhausted("every category is already present");
            if (free.empty()) exhausted("no free slot");
            Entity e;
            e.id = next_id(scene);
            e.category = pick(rng, unused);
            e.attributes.color = pick(rng, cfg.colors);
            e.attributes.state = pick(rng, cfg.states);
            e.box = pick(rng, free);
            p.targets = {e.id};
            if (!scene.entities.empty()) {
                const Entity& anchor = pick(rng, scene.entities);
                const auto holding = holding_spatial(cfg, e.box, anchor.box);
                if (!holding.empty()) p.relation = Relation{e.id, pick(rng, holding), anchor.id};
            }
            p.entity = e;
            break;
        }
        case PerturbationKind::RemoveEntity: {
            if (scene.entities.size() < 2) exhausted("removal needs at least two entities");
            p.targets = {pick(rng, scene.entities).id};
            break;
        }
        case PerturbationKind::Regenerate: {
            p.variant_tag = derive_seed(seed, 0x7e9) | 1ULL;
            break;
        }
    }
    SceneSpec out = apply_perturbation(scene, p, cfg);
    return {p, out};
}

// ---- word-order negatives --------------------------------------------------

namespace {

int token_class(const std::string& t, const GrammarConfig& cfg) {
    if (index_of(kSizeTokens, t) >= 0) return 0;
    if (contains(cfg.colors, t)) return 1;
    if (contains(cfg.states, t)) return 2;
    if (contains(cfg.categories, t)) return 3;
    if (index_of(kRowTokens, t) >= 0) return 4;
    if (index_of(kColTokens, t) >= 0) return 5;
    if (cfg.is_predicate(t)) return 6;
    return -1;
}

}  // namespace

Tokens permute_word_order(const Tokens& caption, uint64_t seed, const GrammarConfig& cfg) {
    std::vector<size_t> content;
    for (size_t i = 0; i < caption.size(); ++i)
        if (token_class(caption[i], cfg) >= 0) content.push_back(i);
    if (content.size() < 2) fail(ErrorKind::Input, "caption needs at least two content tokens");

    std::vector<std::pair<size_t, size_t>> swaps;
    for (size_t a = 0; a < content.size(); ++a)
        for (size_t b = a + 1; b < content.size(); ++b) {
            const size_t i = content[a], j = content[b];
            if (caption[i] != caption[j] && token_class(caption[i], cfg) == token_class(caption[j], cfg))
                swaps.emplace_back(i, j);
        }
    Rng rng(derive_seed(seed, 0x0bde));
    rng.shuffle(swaps);

    std::optional<SceneSpec> original;
    try {
        original = parse_caption(caption, cfg);
    } catch (const Error&) {
    }
    for (const auto& [i, j] : swaps) {
        Tokens out = caption;
        std::swap(out[i], out[j]);
        if (!original) return out;
        try {
            if (!equivalent(parse_caption(out, cfg), *original)) return out;
        } catch (const Error&) {
            return out;
        }
    }
    fail(ErrorKind::Exhaustion, "no semantics-changing word-order permutation exists");
}

// ---- vocabulary ------------------------------------------------------------

Vocabulary::Vocabulary(const GrammarConfig& cfg) {
    auto add = [&](const std::string& t) {
        if (index_.emplace(t, static_cast<int>(tokens_.size())).second) tokens_.push_back(t);
    };
    for (const char* t : kFunctionTokens) add(t);
    for (const char* t : kSizeTokens) add(t);
    for (const char* t : kRowTokens) add(t);
    for (const char* t : kColTokens) add(t);
    for (const auto* list : {&cfg.colors, &cfg.states, &cfg.categories, &cfg.spatial_predicates, &cfg.interactive_predicates})
        for (const auto& t : *list) add(t);
}

int Vocabulary::id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) fail(ErrorKind::Vocabulary, "token '" + token + "' is not in the vocabulary");
    return it->second;
}

std::vector<int> Vocabulary::ids(const Tokens& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
}

}  // namespace cfgen
