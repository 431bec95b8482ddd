#include "cfgen/core.hpp"

#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <memory>

namespace cfgen {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Placement: return "placement";
        case ErrorKind::Parse: return "parse";
        case ErrorKind::Exhaustion: return "exhaustion";
        case ErrorKind::Range: return "range";
        case ErrorKind::Shape: return "shape";
        case ErrorKind::Vocabulary: return "vocabulary";
        case ErrorKind::Degenerate: return "degenerate-input";
        case ErrorKind::Label: return "label";
        case ErrorKind::InsufficientSets: return "insufficient-sets";
        case ErrorKind::SetStructure: return "set-structure";
        case ErrorKind::Input: return "input";
        case ErrorKind::Divergence: return "divergence";
        case ErrorKind::State: return "state";
        case ErrorKind::Config: return "config";
        case ErrorKind::Rejection: return "rejection";
        case ErrorKind::Io: return "io";
        case ErrorKind::Validation: return "validation";
        case ErrorKind::Disjointness: return "disjointness";
    }
    return "unknown";
}

std::string sha256_hex(std::span<const uint8_t> bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
        fail(ErrorKind::Io, "sha256 failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 15]);
    }
    return out;
}

std::string sha256_hex(std::string_view text) {
    return sha256_hex(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes);
}

int thread_count() {
    const char* env = std::getenv("CFGEN_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n > 0 ? n : 1;
}

}  // namespace cfgen
