#pragma once

#include <array>
#include <string>
#include <vector>

namespace vlci::findings {

// Canonical 14-finding list shared by the synthetic report grammar and the
// rule-based clinical-efficacy labeler. Order is fixed and indexable.
struct Finding {
    const char* name;
    const char* keyword_phrase;    // token sequence that marks the finding
    const char* positive_sentence; // normalized, "."-terminated
    const char* negative_sentence; // empty when the finding is never negated
};

inline constexpr int kCount = 14;
inline constexpr int kNoFinding = 8;  // index of "No Finding"

inline const std::array<Finding, kCount>& table() {
    // every positive sentence opens with its keyword phrase, so a decoder
    // resolves the image once per sentence boundary
    static const std::array<Finding, kCount> t = {{
        {"Atelectasis", "atelectasis", "atelectasis is seen .", "no atelectasis ."},
        {"Cardiomegaly", "cardiomegaly", "cardiomegaly is present .", "no cardiomegaly ."},
        {"Consolidation", "consolidation", "consolidation is noted .", "no consolidation ."},
        {"Edema", "edema", "edema is observed .", "no edema ."},
        {"Enlarged Cardiomediastinum", "enlarged cardiomediastinum",
         "enlarged cardiomediastinum is seen .", "no enlarged cardiomediastinum ."},
        {"Fracture", "fracture", "fracture of a rib is noted .", "no fracture ."},
        {"Lung Lesion", "lung lesion", "lung lesion is identified .", "no lung lesion ."},
        {"Lung Opacity", "lung opacity", "lung opacity is observed .", "no lung opacity ."},
        {"No Finding", "no acute cardiopulmonary findings",
         "no acute cardiopulmonary findings .", ""},
        {"Pleural Effusion", "pleural effusion", "pleural effusion is seen .",
         "no pleural effusion ."},
        {"Pleural Other", "pleural thickening", "pleural thickening is noted .",
         "no pleural thickening ."},
        {"Pneumonia", "pneumonia", "pneumonia is suspected .", "no evidence of pneumonia ."},
        {"Pneumothorax", "pneumothorax", "pneumothorax is present .", "no pneumothorax ."},
        {"Support Devices", "support device", "support device is in place .",
         "no support device ."},
    }};
    return t;
}

std::vector<std::string> keyword_tokens(int finding);

}  // namespace vlci::findings
