#pragma once

#include <array>
#include <string>
#include <vector>

#include "cfgen/scene.hpp"

namespace cfgen {

// H x W x 3 float image, row-major HWC, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, fill) {}

    float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }

    bool operator==(const Image&) const = default;
};

using Rgb = std::array<float, 3>;
inline constexpr float kBackground = 0.5f;

// Binary mask at image resolution, row-major.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> bits;

    uint8_t at(int y, int x) const { return bits[static_cast<size_t>(y) * width + x]; }
    size_t count() const;
    bool operator==(const Mask&) const = default;
};

struct ReferenceCollage {
    Image image;
    std::vector<Mask> entity_masks;
};

inline constexpr int kReferenceSize = 16;
inline constexpr int kGlyphCount = 8;

Rgb palette_color(const std::string& color);
int glyph_of(const std::string& category, const GrammarConfig& cfg);

// Glyph coverage at box-normalized coordinates (u, v) in [0,1)^2.
bool glyph_covers(int glyph, const std::string& state, double u, double v);

// Pixels whose centers fall inside the box.
Mask box_mask(const Box& box, int height, int width);

Image render_scene(const SceneSpec& scene, const GrammarConfig& cfg, int size = 32);
Image render_entity_reference(const Entity& entity, const GrammarConfig& cfg);
ReferenceCollage compose_collage(const SceneSpec& scene, const GrammarConfig& cfg, int size = 32);

struct EntityCheck {
    int id = 0;
    double foreground_fraction = 0;
    bool detected = false;
    double center_x = 0;  // pixel coordinates of the detected glyph's bounding-box center
    double center_y = 0;
    std::string color;
    int glyph = -1;
    std::string state;
    bool color_ok = false;
    bool shape_ok = false;
};

struct VerifyResult {
    bool attribute_ok = false;
    bool position_ok = false;
    bool relation_ok = false;
    int empty_region_foreground = 0;
    std::vector<EntityCheck> entities;

    // Fraction of entities that are detected with correct color and shape.
    double entity_attribute_rate() const;
};

struct VerifyConfig {
    double foreground_delta = 0.2;
    double detect_fraction = 0.12;
    double center_tolerance = 0.25;  // fraction of box side
    int empty_region_budget = 12;
};

VerifyResult verify_image(const SceneSpec& scene, const Image& image, const GrammarConfig& cfg,
                          const VerifyConfig& vcfg = {});

void save_png(const Image& image, const std::string& path);
Image load_png(const std::string& path);

// Lossless sidecar: "CFGIMGF1", u32 height, u32 width, u32 channels, float32 HWC.
std::vector<uint8_t> encode_float_image(const Image& image);
Image decode_float_image(const std::vector<uint8_t>& bytes);
void save_float_image(const Image& image, const std::string& path);
Image load_float_image(const std::string& path);
std::string image_hash(const Image& image);

}  // namespace cfgen
