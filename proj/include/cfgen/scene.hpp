#pragma once

#include <array>
#include <map>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cfgen/core.hpp"

namespace cfgen {

using json = nlohmann::json;
using Tokens = std::vector<std::string>;

std::string join_tokens(const Tokens& tokens);
Tokens split_tokens(const std::string& text);

// Axis-aligned rectangle in normalized image coordinates.
struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x0 + x1); }
    double center_y() const { return 0.5 * (y0 + y1); }

    bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

// Boxes are drawn from a closed slot set: a 3x3 grid of anchors and two
// sizes, all on the 64-cell quantization grid.
inline constexpr int kGridCells = 64;
inline constexpr std::array<const char*, 3> kRowTokens = {"top", "middle", "bottom"};
inline constexpr std::array<const char*, 3> kColTokens = {"left", "center", "right"};
inline constexpr std::array<const char*, 2> kSizeTokens = {"small", "large"};

struct Slot {
    int row = 0;
    int col = 0;
    int size = 0;

    bool operator==(const Slot&) const = default;
};

Box slot_box(const Slot& slot);
std::optional<Slot> slot_of(const Box& box);
std::vector<Slot> all_slots();

struct Attributes {
    std::string color;
    std::string state;

    bool operator==(const Attributes&) const = default;
};

struct Entity {
    int id = 0;
    std::string category;
    Attributes attributes;
    Box box;

    Tokens local_caption() const;
    bool operator==(const Entity&) const = default;
};

struct Relation {
    int subject = 0;
    std::string predicate;
    int object = 0;

    bool operator==(const Relation&) const = default;
};

struct SceneSpec {
    std::vector<Entity> entities;
    std::vector<Relation> relations;

    const Entity* find(int id) const;
    Entity* find(int id);
    Tokens global_caption() const;

    bool operator==(const SceneSpec&) const = default;
};

// Predicates whose argument swap preserves meaning.
struct RelationWhitelist {
    std::set<std::string> symmetric_predicates;

    bool contains(const std::string& predicate) const { return symmetric_predicates.count(predicate) > 0; }
    static RelationWhitelist defaults();
};

enum class SpatialPredicate { LeftOf, RightOf, Above, Below, Near, FarFrom };

struct GrammarConfig {
    std::vector<std::string> categories;
    std::vector<std::string> colors;
    std::vector<std::string> states;
    std::vector<std::string> spatial_predicates;
    std::vector<std::string> interactive_predicates;
    RelationWhitelist whitelist;
    int min_entities = 1;
    int max_entities = 3;
    double iou_threshold = 0.1;
    int max_attempts = 1000;
    double interactive_relation_prob = 0.0;
    // Geometry of spatial predicates is evaluated in pixels of an image this size.
    int pixel_size = 32;
    double dead_zone_px = 2.0;
    double near_px = 17.0;
    double far_px = 25.0;

    static GrammarConfig defaults();
    void validate() const;

    bool is_spatial(const std::string& predicate) const;
    bool is_predicate(const std::string& predicate) const;
};

void to_json(json& j, const GrammarConfig& cfg);
GrammarConfig grammar_config_from_json(const json& j);

std::optional<SpatialPredicate> spatial_predicate_from_token(const std::string& token);

// True when `predicate(subject, object)` holds for the two boxes, with the
// dead zone applied to directional predicates.
bool spatial_holds(const GrammarConfig& cfg, const std::string& predicate, const Box& subject, const Box& object);
bool spatial_holds_px(const GrammarConfig& cfg, const std::string& predicate, double sx, double sy, double ox, double oy);

enum class PerturbationKind { AttributeChange, PositionChange, RelationChange, AddEntity, RemoveEntity, Regenerate };

std::string_view to_string(PerturbationKind kind);
PerturbationKind perturbation_kind_from_string(std::string_view name);
inline constexpr std::array<PerturbationKind, 6> kAllPerturbationKinds = {
    PerturbationKind::AttributeChange, PerturbationKind::PositionChange, PerturbationKind::RelationChange,
    PerturbationKind::AddEntity,       PerturbationKind::RemoveEntity,   PerturbationKind::Regenerate};

struct Perturbation {
    PerturbationKind kind = PerturbationKind::Regenerate;
    std::vector<int> targets;
    int relation_index = -1;
    std::string attribute_key;
    std::string attribute_value;
    std::optional<Box> box;
    std::optional<Relation> relation;
    std::optional<Entity> entity;
    // position_change records the rewritten relations implied by the new geometry.
    std::vector<std::pair<int, Relation>> relation_updates;
    uint64_t variant_tag = 0;

    bool operator==(const Perturbation&) const = default;
};

void to_json(json& j, const Box& box);
void to_json(json& j, const Entity& e);
void to_json(json& j, const Relation& r);
void to_json(json& j, const SceneSpec& s);
void to_json(json& j, const Perturbation& p);
SceneSpec scene_from_json(const json& j);
Perturbation perturbation_from_json(const json& j);

// Throws Error(Validation) naming the first violated SceneSpec invariant.
void validate_scene(const SceneSpec& scene, const GrammarConfig& cfg);

// Entity ids renumbered 0..k-1 in list order.
SceneSpec canonical(const SceneSpec& scene);
bool equivalent(const SceneSpec& a, const SceneSpec& b);

SceneSpec generate_scene(uint64_t seed, const GrammarConfig& cfg);

Tokens render_caption(const SceneSpec& scene);
SceneSpec parse_caption(const Tokens& caption, const GrammarConfig& cfg);

SceneSpec apply_perturbation(const SceneSpec& scene, const Perturbation& p, const GrammarConfig& cfg);
std::pair<Perturbation, SceneSpec> perturb(const SceneSpec& scene, PerturbationKind kind, uint64_t seed,
                                           const GrammarConfig& cfg);

// Every relation_change perturb() may emit for this scene, in a fixed order.
std::vector<Perturbation> relation_change_candidates(const SceneSpec& scene, const GrammarConfig& cfg);

Tokens permute_word_order(const Tokens& caption, uint64_t seed, const GrammarConfig& cfg);

// Closed token inventory of a grammar, in a fixed order; shared by the
// denoiser's text embeddings and the text encoder.
class Vocabulary {
public:
    explicit Vocabulary(const GrammarConfig& cfg);
    int id(const std::string& token) const;
    std::vector<int> ids(const Tokens& tokens) const;
    const std::vector<std::string>& tokens() const { return tokens_; }
    int size() const { return static_cast<int>(tokens_.size()); }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

}  // namespace cfgen
