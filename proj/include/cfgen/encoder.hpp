#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cfgen/autograd.hpp"
#include "cfgen/image.hpp"
#include "cfgen/scene.hpp"

namespace cfgen {

struct AdapterConfig {
    int rank = 8;
    double alpha = 8;
    // Base weight names to adapt; empty means every weight matrix.
    std::vector<std::string> targets;
};

struct EncoderConfig {
    int embed = 64;
    int text_width = 64;
    int text_layers = 2;
    int image_size = 32;
};

void to_json(json& j, const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const json& j);
void to_json(json& j, const AdapterConfig& c);
AdapterConfig adapter_config_from_json(const json& j);

// Image encoder: three 3x3 conv blocks (two strided), 2x2 average pool and a
// linear head. Text encoder: token embedding plus sinusoidal positions, pre-LN
// single-head self-attention layers, mean pool and a linear head.
class DualEncoder {
public:
    DualEncoder(const GrammarConfig& grammar, const EncoderConfig& cfg, uint64_t seed);
    DualEncoder clone() const;

    // Rows are embeddings (unnormalized).
    Tape::Var encode_images(Tape& tape, const std::vector<const Image*>& images);
    Tape::Var encode_texts(Tape& tape, const std::vector<Tokens>& captions);

    std::vector<float> encode_image(const Image& image) const;
    std::vector<float> encode_text(const Tokens& caption) const;
    Mat encode_images(const std::vector<const Image*>& images) const;
    Mat encode_texts(const std::vector<Tokens>& captions) const;

    double similarity(const Image& image, const Tokens& caption) const;

    // Adds low-rank factors (A random, B zero) to the target weights and freezes
    // the base. Calling it again replaces existing adapters.
    void apply_adapters(const AdapterConfig& cfg, uint64_t seed);
    bool has_adapters() const { return adapters_.has_value(); }
    const std::optional<AdapterConfig>& adapters() const { return adapters_; }
    // Unfreezes all base weights (used for from-scratch pretraining).
    void set_base_trainable(bool trainable);

    std::vector<std::string> weight_names() const;
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const EncoderConfig& config() const { return cfg_; }
    const GrammarConfig& grammar() const { return grammar_; }
    const Vocabulary& vocab() const { return vocab_; }

    // Hash of base weights only; adapter overlays reference it.
    std::string base_checksum() const;

    void save(const std::string& path, const json& extra_meta = json::object()) const;
    static DualEncoder load(const std::string& path, json* meta_out = nullptr);
    // Overlay file holding only adapter factors plus the base checksum.
    void save_adapters(const std::string& path, const json& extra_meta = json::object()) const;
    void load_adapters(const std::string& path);

private:
    Tape::Var weight(Tape& tape, const std::string& name);
    Tape::Var text_layer(Tape& tape, Tape::Var x, const std::vector<Tape::Var>& w);

    GrammarConfig grammar_;
    EncoderConfig cfg_;
    Vocabulary vocab_;
    ParamStore params_;
    std::vector<std::string> weights_;  // matrices eligible for adapters
    std::optional<AdapterConfig> adapters_;
};

// Cosine similarity of two embeddings; zero norm raises a degenerate-input error.
double cosine(const std::vector<float>& a, const std::vector<float>& b);

}  // namespace cfgen
