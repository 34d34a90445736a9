#pragma once

#include "vlci/common.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vlci::data {

struct Sample {
    std::string id;
    std::vector<std::string> image_paths;  // 1 or 2 views
    std::string report;                    // normalized text
};

struct AnnotationSet {
    std::map<std::string, std::vector<Sample>> splits;  // exactly train/val/test

    const std::vector<Sample>& split(const std::string& name) const;
};

// lowercase, drop characters outside [a-z0-9.,], '.'/',' become standalone
// tokens, split on whitespace
std::vector<std::string> normalize_tokens(const std::string& text);
std::string normalize_report(const std::string& text);

AnnotationSet load_annotations(const std::string& path);
void save_annotations(const AnnotationSet& ann, const std::string& path);

struct Vocabulary {
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kMask = 4;
    static constexpr int kSpecialCount = 5;

    std::map<std::string, int> word_to_id;
    std::vector<std::string> id_to_word;  // includes the 5 specials
    int min_count = 1;

    int size() const { return static_cast<int>(id_to_word.size()); }
    int id_of(const std::string& w) const {
        auto it = word_to_id.find(w);
        return it == word_to_id.end() ? kUnk : it->second;
    }
};

Vocabulary build_vocabulary(const std::vector<std::string>& reports, int min_count);

struct TokenizedReport {
    std::vector<int> ids;  // padded to max_len
    int length = 0;        // non-pad count, including bos/eos
};

TokenizedReport tokenize(const std::string& report, const Vocabulary& vocab, int max_len);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

struct RawImage {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> pix;  // CHW, values in [0,1]

    float at(int c, int y, int x) const { return pix[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float& at(int c, int y, int x) { return pix[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

RawImage load_png(const std::string& path);
void save_png(const RawImage& img, const std::string& path);

// Average-pool by `factor` then nearest-neighbor upsample back; factor must
// divide both height and width; factor 1 is the identity.
RawImage degrade_image(const RawImage& img, int factor);

struct SynthOptions {
    std::uint64_t seed = 0;
    int n = 20;
    int image_size = 128;
    std::string out_dir;  // images land in <out_dir>/images, annotations in <out_dir>/annotations.json
};

// Deterministic synthetic corpus: 0-3 rendered lesion primitives per image,
// verbalized through the fixed finding grammar; 7:1:2 split.
AnnotationSet synth_dataset(const SynthOptions& opts);

// Finding presence bits used by the generator for sample index `i` (test hook).
std::vector<bool> synth_present_findings(std::uint64_t seed, int sample_index);

}  // namespace vlci::data
