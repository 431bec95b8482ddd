#include "cfgen/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace cfgen {

namespace {

enum Glyph { Square, Disk, TriangleUp, TriangleDown, Diamond, Plus, HBar, VBar };

bool shape_covers(int glyph, double u, double v) {
    const double du = std::abs(u - 0.5), dv = std::abs(v - 0.5);
    switch (glyph) {
        case Square: return du <= 0.45 && dv <= 0.45;
        case Disk: return du * du + dv * dv <= 0.48 * 0.48;
        case TriangleUp: return v >= 0.04 && v <= 0.96 && du <= 0.48 * (v - 0.04) / 0.92;
        case TriangleDown: return v >= 0.04 && v <= 0.96 && du <= 0.48 * (0.96 - v) / 0.92;
        case Diamond: return du + dv <= 0.48;
        case Plus: return (du <= 0.1 && dv <= 0.48) || (dv <= 0.1 && du <= 0.48);
        case HBar: return du <= 0.48 && dv <= 0.25;
        case VBar: return du <= 0.25 && dv <= 0.48;
        default: fail(ErrorKind::Input, "unknown glyph " + std::to_string(glyph));
    }
}

struct PixelRange {
    int x0, x1, y0, y1;  // half-open
    double fx0, fy0, fw, fh;
};

PixelRange pixel_range(const Box& box, int height, int width) {
    PixelRange r;
    r.fx0 = box.x0 * width;
    r.fy0 = box.y0 * height;
    r.fw = box.width() * width;
    r.fh = box.height() * height;
    // Pixel x is inside when fx0 <= x + 0.5 < fx1.
    r.x0 = std::max(0, static_cast<int>(std::ceil(r.fx0 - 0.5)));
    r.x1 = std::min(width, static_cast<int>(std::ceil(box.x1 * width - 0.5)));
    r.y0 = std::max(0, static_cast<int>(std::ceil(r.fy0 - 0.5)));
    r.y1 = std::min(height, static_cast<int>(std::ceil(box.y1 * height - 0.5)));
    return r;
}

double foreground_strength(const Image& img, int y, int x) {
    double m = 0;
    for (int c = 0; c < 3; ++c) m = std::max(m, std::abs(static_cast<double>(img.at(y, x, c)) - kBackground));
    return m;
}

}  // namespace

size_t Mask::count() const { return static_cast<size_t>(std::count(bits.begin(), bits.end(), uint8_t{1})); }

Rgb palette_color(const std::string& color) {
    static const std::map<std::string, Rgb> kPalette = {
        {"red", {0.90f, 0.10f, 0.10f}},   {"green", {0.10f, 0.75f, 0.15f}},  {"blue", {0.10f, 0.20f, 0.90f}},
        {"yellow", {0.95f, 0.90f, 0.10f}}, {"white", {1.00f, 1.00f, 1.00f}}, {"black", {0.00f, 0.00f, 0.00f}},
        {"orange", {1.00f, 0.55f, 0.00f}}, {"purple", {0.55f, 0.10f, 0.75f}}, {"cyan", {0.00f, 0.90f, 0.90f}},
        {"pink", {1.00f, 0.60f, 0.80f}},   {"brown", {0.45f, 0.25f, 0.05f}}, {"magenta", {0.90f, 0.00f, 0.90f}}};
    auto it = kPalette.find(color);
    if (it == kPalette.end()) fail(ErrorKind::Vocabulary, "no palette entry for color " + color);
    return it->second;
}

int glyph_of(const std::string& category, const GrammarConfig& cfg) {
    auto it = std::find(cfg.categories.begin(), cfg.categories.end(), category);
    if (it == cfg.categories.end()) fail(ErrorKind::Vocabulary, "unknown category " + category);
    return static_cast<int>(it - cfg.categories.begin()) % kGlyphCount;
}

bool glyph_covers(int glyph, const std::string& state, double u, double v) {
    if (!shape_covers(glyph, u, v)) return false;
    if (state == "solid") return true;
    if (state == "hollow") return !shape_covers(glyph, 0.5 + (u - 0.5) / 0.7, 0.5 + (v - 0.5) / 0.7);
    if (state == "striped") return static_cast<int>(std::floor(v * 5)) % 2 == 0;
    if (state == "dotted") return (static_cast<int>(std::floor(u * 4)) + static_cast<int>(std::floor(v * 4))) % 2 == 0;
    fail(ErrorKind::Vocabulary, "no pattern for state " + state);
}

Mask box_mask(const Box& box, int height, int width) {
    Mask m{height, width, std::vector<uint8_t>(static_cast<size_t>(height) * width, 0)};
    const auto r = pixel_range(box, height, width);
    for (int y = r.y0; y < r.y1; ++y)
        for (int x = r.x0; x < r.x1; ++x) m.bits[static_cast<size_t>(y) * width + x] = 1;
    return m;
}

Image render_scene(const SceneSpec& scene, const GrammarConfig& cfg, int size) {
    Image img(size, size, kBackground);
    for (const auto& e : scene.entities) {
        const int glyph = glyph_of(e.category, cfg);
        const Rgb rgb = palette_color(e.attributes.color);
        const auto r = pixel_range(e.box, size, size);
        for (int y = r.y0; y < r.y1; ++y)
            for (int x = r.x0; x < r.x1; ++x) {
                const double u = (x + 0.5 - r.fx0) / r.fw;
                const double v = (y + 0.5 - r.fy0) / r.fh;
                if (!glyph_covers(glyph, e.attributes.state, u, v)) continue;
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[static_cast<size_t>(c)];
            }
    }
    return img;
}

Image render_entity_reference(const Entity& entity, const GrammarConfig& cfg) {
    Entity centered = entity;
    centered.box = Box{0, 0, 1, 1};
    SceneSpec single;
    single.entities.push_back(centered);
    return render_scene(single, cfg, kReferenceSize);
}

ReferenceCollage compose_collage(const SceneSpec& scene, const GrammarConfig& cfg, int size) {
    ReferenceCollage out;
    out.image = Image(size, size, kBackground);
    for (const auto& e : scene.entities) {
        const Image ref = render_entity_reference(e, cfg);
        const auto r = pixel_range(e.box, size, size);
        for (int y = r.y0; y < r.y1; ++y)
            for (int x = r.x0; x < r.x1; ++x) {
                const int ry = std::min(kReferenceSize - 1, static_cast<int>((y + 0.5 - r.fy0) / r.fh * kReferenceSize));
                const int rx = std::min(kReferenceSize - 1, static_cast<int>((x + 0.5 - r.fx0) / r.fw * kReferenceSize));
                for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = ref.at(ry, rx, c);
            }
        out.entity_masks.push_back(box_mask(e.box, size, size));
    }
    return out;
}

double VerifyResult::entity_attribute_rate() const {
    if (entities.empty()) return 1.0;
    double ok = 0;
    for (const auto& e : entities) ok += e.detected && e.color_ok && e.shape_ok;
    return ok / static_cast<double>(entities.size());
}

VerifyResult verify_image(const SceneSpec& scene, const Image& image, const GrammarConfig& cfg,
                          const VerifyConfig& vcfg) {
    const int H = image.height, W = image.width;
    if (H <= 0 || W <= 0 || image.pixels.size() != static_cast<size_t>(H) * W * 3)
        fail(ErrorKind::Shape, "image buffer does not match its dimensions");

    // owner[p] = number of boxes covering p; used to exclude shared pixels.
    std::vector<int> cover(static_cast<size_t>(H) * W, 0);
    std::vector<Mask> masks;
    for (const auto& e : scene.entities) {
        masks.push_back(box_mask(e.box, H, W));
        for (size_t p = 0; p < cover.size(); ++p) cover[p] += masks.back().bits[p];
    }
    std::vector<uint8_t> fg(cover.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            fg[static_cast<size_t>(y) * W + x] = foreground_strength(image, y, x) > vcfg.foreground_delta;

    VerifyResult out;
    for (size_t p = 0; p < cover.size(); ++p)
        if (cover[p] == 0 && fg[p]) ++out.empty_region_foreground;

    std::set<int> glyphs;
    for (const auto& c : cfg.categories) glyphs.insert(glyph_of(c, cfg));

    const double px_scale = static_cast<double>(cfg.pixel_size) / W;
    std::map<int, const EntityCheck*> by_id;
    out.entities.reserve(scene.entities.size());
    for (size_t i = 0; i < scene.entities.size(); ++i) {
        const Entity& e = scene.entities[i];
        EntityCheck chk;
        chk.id = e.id;
        const auto r = pixel_range(e.box, H, W);
        int domain = 0, count = 0, bx0 = W, bx1 = -1, by0 = H, by1 = -1;
        double sum[3] = {0, 0, 0};
        for (int y = r.y0; y < r.y1; ++y)
            for (int x = r.x0; x < r.x1; ++x) {
                const size_t p = static_cast<size_t>(y) * W + x;
                if (cover[p] != 1) continue;
                ++domain;
                if (!fg[p]) continue;
                ++count;
                for (int c = 0; c < 3; ++c) sum[c] += image.at(y, x, c);
                bx0 = std::min(bx0, x);
                bx1 = std::max(bx1, x);
                by0 = std::min(by0, y);
                by1 = std::max(by1, y);
            }
        chk.foreground_fraction = domain ? static_cast<double>(count) / domain : 0.0;
        if (count > 0) {
            chk.center_x = 0.5 * (bx0 + bx1 + 1);
            chk.center_y = 0.5 * (by0 + by1 + 1);
            const double box_cx = r.fx0 + 0.5 * r.fw, box_cy = r.fy0 + 0.5 * r.fh;
            chk.detected = chk.foreground_fraction >= vcfg.detect_fraction &&
                           std::abs(chk.center_x - box_cx) <= vcfg.center_tolerance * r.fw &&
                           std::abs(chk.center_y - box_cy) <= vcfg.center_tolerance * r.fh;

            const Rgb mean = {static_cast<float>(sum[0] / count), static_cast<float>(sum[1] / count),
                              static_cast<float>(sum[2] / count)};
            double best = 1e300;
            for (const auto& name : cfg.colors) {
                const Rgb p = palette_color(name);
                double d = 0;
                for (int c = 0; c < 3; ++c) d += (mean[c] - p[c]) * (mean[c] - p[c]);
                if (d < best) {
                    best = d;
                    chk.color = name;
                }
            }

            double best_iou = -1;
            for (int g : glyphs)
                for (const auto& st : cfg.states) {
                    int inter = 0, uni = 0;
                    for (int y = r.y0; y < r.y1; ++y)
                        for (int x = r.x0; x < r.x1; ++x) {
                            const size_t p = static_cast<size_t>(y) * W + x;
                            if (cover[p] != 1) continue;
                            const bool expect = glyph_covers(g, st, (x + 0.5 - r.fx0) / r.fw, (y + 0.5 - r.fy0) / r.fh);
                            inter += expect && fg[p];
                            uni += expect || fg[p];
                        }
                    const double v = uni ? static_cast<double>(inter) / uni : 0.0;
                    if (v > best_iou) {
                        best_iou = v;
                        chk.glyph = g;
                        chk.state = st;
                    }
                }
            chk.color_ok = chk.color == e.attributes.color;
            chk.shape_ok = chk.glyph == glyph_of(e.category, cfg) && chk.state == e.attributes.state;
        }
        out.entities.push_back(chk);
    }
    for (const auto& chk : out.entities) by_id[chk.id] = &chk;

    out.position_ok = out.empty_region_foreground < vcfg.empty_region_budget;
    out.attribute_ok = true;
    for (const auto& chk : out.entities) {
        out.position_ok = out.position_ok && chk.detected;
        if (chk.detected) out.attribute_ok = out.attribute_ok && chk.color_ok && chk.shape_ok;
    }
    out.relation_ok = true;
    for (const auto& rel : scene.relations) {
        if (!cfg.is_spatial(rel.predicate)) continue;
        const EntityCheck* s = by_id.count(rel.subject) ? by_id[rel.subject] : nullptr;
        const EntityCheck* o = by_id.count(rel.object) ? by_id[rel.object] : nullptr;
        if (!s || !o || !s->detected || !o->detected) continue;
        if (!spatial_holds_px(cfg, rel.predicate, s->center_x * px_scale, s->center_y * px_scale,
                              o->center_x * px_scale, o->center_y * px_scale))
            out.relation_ok = false;
    }
    return out;
}

// ---- persistence -----------------------------------------------------------

void save_png(const Image& image, const std::string& path) {
    std::vector<uint8_t> bytes(image.pixels.size());
    for (size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<uint8_t>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr))
        fail(ErrorKind::Io, "cannot write PNG " + path + ": " + png.message);
}

Image load_png(const std::string& path) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str())) fail(ErrorKind::Io, "cannot read PNG " + path);
    png.format = PNG_FORMAT_RGB;
    std::vector<uint8_t> bytes(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr))
        fail(ErrorKind::Io, "cannot decode PNG " + path + ": " + png.message);
    Image img(static_cast<int>(png.height), static_cast<int>(png.width));
    for (size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0f;
    return img;
}

namespace {
constexpr char kFloatMagic[8] = {'C', 'F', 'G', 'I', 'M', 'G', 'F', '1'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 | static_cast<uint32_t>(p[2]) << 16 |
           static_cast<uint32_t>(p[3]) << 24;
}
}  // namespace

std::vector<uint8_t> encode_float_image(const Image& image) {
    std::vector<uint8_t> out(kFloatMagic, kFloatMagic + 8);
    put_u32(out, static_cast<uint32_t>(image.height));
    put_u32(out, static_cast<uint32_t>(image.width));
    put_u32(out, 3);
    for (float f : image.pixels) {
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
    return out;
}

Image decode_float_image(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 20 || std::memcmp(bytes.data(), kFloatMagic, 8) != 0)
        fail(ErrorKind::Io, "not a float image sidecar");
    const uint32_t h = get_u32(&bytes[8]), w = get_u32(&bytes[12]), c = get_u32(&bytes[16]);
    if (c != 3 || bytes.size() != 20 + static_cast<size_t>(h) * w * c * 4)
        fail(ErrorKind::Io, "float image sidecar has inconsistent size");
    Image img(static_cast<int>(h), static_cast<int>(w));
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        const uint32_t bits = get_u32(&bytes[20 + 4 * i]);
        std::memcpy(&img.pixels[i], &bits, 4);
    }
    return img;
}

void save_float_image(const Image& image, const std::string& path) {
    const auto bytes = encode_float_image(image);
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "short write to " + path);
}

Image load_float_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_float_image(bytes);
}

std::string image_hash(const Image& image) { return sha256_hex(encode_float_image(image)); }

}  // namespace cfgen
