#include "vlci/data.hpp"
#include "vlci/findings.hpp"

#include <nlohmann/json.hpp>
#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace vlci::findings {

std::vector<std::string> keyword_tokens(int finding) {
    std::istringstream ss(table()[finding].keyword_phrase);
    std::vector<std::string> out;
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

}  // namespace vlci::findings

namespace vlci::data {

const std::vector<Sample>& AnnotationSet::split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw ConfigError("split '" + name + "' absent");
    return it->second;
}

std::vector<std::string> normalize_tokens(const std::string& text) {
    std::string buf;
    buf.reserve(text.size() + 16);
    for (char raw : text) {
        unsigned char c = static_cast<unsigned char>(raw);
        if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
        if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
            buf.push_back(static_cast<char>(c));
        } else if (c == '.' || c == ',') {
            buf.push_back(' ');
            buf.push_back(static_cast<char>(c));
            buf.push_back(' ');
        } else if (std::isspace(c)) {
            buf.push_back(' ');
        }
        // everything else is stripped
    }
    std::istringstream ss(buf);
    std::vector<std::string> toks;
    std::string w;
    while (ss >> w) toks.push_back(w);
    return toks;
}

std::string normalize_report(const std::string& text) {
    const auto toks = normalize_tokens(text);
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) out.push_back(' ');
        out += toks[i];
    }
    return out;
}

static Sample parse_sample(const json& j) {
    Sample s;
    s.id = j.at("id").get<std::string>();
    const json& ip = j.at("image_path");
    if (ip.is_string()) {
        s.image_paths.push_back(ip.get<std::string>());
    } else {
        for (const auto& p : ip) s.image_paths.push_back(p.get<std::string>());
    }
    if (s.image_paths.empty()) throw ConfigError("sample '" + s.id + "' has no image path");
    if (s.image_paths.size() > 2) throw ConfigError("sample '" + s.id + "' has more than 2 views");
    s.report = normalize_report(j.at("report").get<std::string>());
    if (s.report.empty()) throw ConfigError("sample '" + s.id + "' has an empty report");
    return s;
}

AnnotationSet load_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open annotation file '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("annotation file '" + path + "' is not valid: " + e.what());
    }
    AnnotationSet ann;
    for (const char* key : {"train", "val", "test"}) {
        if (!j.contains(key)) throw ConfigError(std::string("split '") + key + "' absent");
        std::vector<Sample> samples;
        for (const auto& js : j.at(key)) samples.push_back(parse_sample(js));
        ann.splits[key] = std::move(samples);
    }
    return ann;
}

void save_annotations(const AnnotationSet& ann, const std::string& path) {
    json j;
    for (const auto& [name, samples] : ann.splits) {
        json arr = json::array();
        for (const auto& s : samples) {
            arr.push_back({{"id", s.id}, {"image_path", s.image_paths}, {"report", s.report}});
        }
        j[name] = std::move(arr);
    }
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write annotation file '" + path + "'");
    out << j.dump(2) << "\n";
}

Vocabulary build_vocabulary(const std::vector<std::string>& reports, int min_count) {
    if (min_count < 1) throw ConfigError("min_count must be >= 1");
    std::unordered_map<std::string, long> freq;
    for (const auto& r : reports) {
        for (const auto& w : normalize_tokens(r)) ++freq[w];
    }
    std::vector<std::pair<std::string, long>> kept;
    for (const auto& [w, c] : freq) {
        if (c >= min_count) kept.emplace_back(w, c);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;  // frequency desc
        return a.first < b.first;                              // lexicographic tie-break
    });
    Vocabulary v;
    v.min_count = min_count;
    v.id_to_word = {"<pad>", "<bos>", "<eos>", "<unk>", "<mask>"};
    for (auto& [w, c] : kept) {
        v.word_to_id[w] = static_cast<int>(v.id_to_word.size());
        v.id_to_word.push_back(w);
    }
    return v;
}

TokenizedReport tokenize(const std::string& report, const Vocabulary& vocab, int max_len) {
    if (max_len < 3) throw ConfigError("max_len must be >= 3");
    auto toks = normalize_tokens(report);
    if (static_cast<int>(toks.size()) > max_len - 2) toks.resize(max_len - 2);
    TokenizedReport r;
    r.ids.assign(max_len, Vocabulary::kPad);
    int p = 0;
    r.ids[p++] = Vocabulary::kBos;
    for (const auto& w : toks) r.ids[p++] = vocab.id_of(w);
    r.ids[p++] = Vocabulary::kEos;
    r.length = p;
    return r;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == Vocabulary::kEos) break;
        if (id == Vocabulary::kBos || id == Vocabulary::kPad || id == Vocabulary::kMask) continue;
        if (!out.empty()) out.push_back(' ');
        out += vocab.id_to_word[static_cast<std::size_t>(id)];
    }
    return out;
}

// ---------------------------------------------------------------------------
// PNG I/O

RawImage load_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw ConfigError("cannot open image '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw ConfigError("failed to decode PNG '" + path + "'");
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_packing(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (png_get_color_type(png, info) & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int ch = static_cast<int>(png_get_channels(png, info));

    std::vector<png_byte> rowbuf(static_cast<std::size_t>(w) * ch);
    RawImage img;
    img.channels = ch;
    img.height = h;
    img.width = w;
    img.pix.resize(static_cast<std::size_t>(ch) * h * w);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, rowbuf.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                img.at(c, y, x) = static_cast<float>(rowbuf[static_cast<std::size_t>(x) * ch + c]) / 255.0f;
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

void save_png(const RawImage& img, const std::string& path) {
    if (img.channels != 1 && img.channels != 3) throw ConfigError("save_png: 1 or 3 channels only");
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw ConfigError("cannot write image '" + path + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw ConfigError("failed to encode PNG '" + path + "'");
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> rowbuf(static_cast<std::size_t>(img.width) * img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
                rowbuf[static_cast<std::size_t>(x) * img.channels + c] =
                    static_cast<png_byte>(std::lround(v * 255.0f));
            }
        }
        png_write_row(png, rowbuf.data());
    }
    png_write_end(png, info);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

RawImage degrade_image(const RawImage& img, int factor) {
    if (factor < 1) throw ConfigError("degrade factor must be >= 1");
    if (img.height % factor != 0 || img.width % factor != 0) {
        throw ConfigError("degrade factor " + std::to_string(factor) + " does not divide image size");
    }
    if (factor == 1) return img;
    RawImage out = img;
    const int bh = img.height / factor, bw = img.width / factor;
    for (int c = 0; c < img.channels; ++c) {
        for (int by = 0; by < bh; ++by) {
            for (int bx = 0; bx < bw; ++bx) {
                float acc = 0.0f;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) acc += img.at(c, by * factor + dy, bx * factor + dx);
                const float mean = acc / static_cast<float>(factor * factor);
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx) out.at(c, by * factor + dy, bx * factor + dx) = mean;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

// Grid cell for each finding (No Finding has no primitive).
int finding_cell(int f) { return f < findings::kNoFinding ? f : f - 1; }

void render_finding(RawImage& img, int f, Rng& rng) {
    const int cells = 4;  // 4x4 layout, 13 cells in use
    const int cell = finding_cell(f);
    const int cw = img.width / cells, ch = img.height / cells;
    const int cx = (cell % cells) * cw + cw / 2;
    const int cy = (cell / cells) * ch + ch / 2;
    const float intensity = 0.70f + 0.02f * static_cast<float>(f) + 0.02f * static_cast<float>(rng.uniform());
    const int r = std::max(3, std::min(cw, ch) / 2 - 2);
    const int kind = f % 3;
    for (int y = cy - r; y <= cy + r; ++y) {
        for (int x = cx - r; x <= cx + r; ++x) {
            if (y < 0 || y >= img.height || x < 0 || x >= img.width) continue;
            const int dx = x - cx, dy = y - cy;
            bool inside = false;
            switch (kind) {
                case 0: inside = dx * dx + dy * dy <= r * r; break;            // disc
                case 1: inside = std::abs(dx) <= r && std::abs(dy) <= r; break; // square
                default: inside = dy >= -r && std::abs(dx) <= (r - dy) / 2 + r / 2 && dy <= r; break;
            }
            if (inside) img.at(0, y, x) = std::max(img.at(0, y, x), intensity);
        }
    }
}

std::vector<bool> draw_present(Rng& rng) {
    std::vector<bool> present(findings::kCount, false);
    const int n_lesions = rng.uniform_int(0, 3);
    std::vector<int> pool;
    for (int f = 0; f < findings::kCount; ++f)
        if (f != findings::kNoFinding) pool.push_back(f);
    rng.shuffle(pool);
    for (int i = 0; i < n_lesions; ++i) present[static_cast<std::size_t>(pool[i])] = true;
    return present;
}

std::string report_for(const std::vector<bool>& present) {
    const auto& tab = findings::table();
    std::string out;
    auto append = [&out](const std::string& s) {
        if (!out.empty()) out.push_back(' ');
        out += s;
    };
    bool any = false;
    for (int f = 0; f < findings::kCount; ++f) {
        if (present[static_cast<std::size_t>(f)]) {
            append(tab[static_cast<std::size_t>(f)].positive_sentence);
            any = true;
        }
    }
    if (!any) {
        append(tab[findings::kNoFinding].positive_sentence);
        return out;
    }
    for (int f = 0; f < findings::kCount; ++f) {
        if (f == findings::kNoFinding || present[static_cast<std::size_t>(f)]) continue;
        append(tab[static_cast<std::size_t>(f)].negative_sentence);
        break;
    }
    return out;
}

Rng sample_rng(std::uint64_t seed, int index) {
    Rng base(seed);
    Rng r(base.next_u64() ^ (0x517CC1B727220A95ULL * static_cast<std::uint64_t>(index + 1)));
    return r;
}

}  // namespace

std::vector<bool> synth_present_findings(std::uint64_t seed, int sample_index) {
    Rng r = sample_rng(seed, sample_index);
    return draw_present(r);
}

AnnotationSet synth_dataset(const SynthOptions& opts) {
    if (opts.n < 3) throw ConfigError("synthetic corpus needs n >= 3");
    if (opts.out_dir.empty()) throw ConfigError("synthetic corpus needs an output directory");
    fs::create_directories(fs::path(opts.out_dir) / "images");

    const int n_train = static_cast<int>(opts.n * 7 / 10);
    const int n_val = static_cast<int>(opts.n / 10);

    AnnotationSet ann;
    ann.splits["train"] = {};
    ann.splits["val"] = {};
    ann.splits["test"] = {};
    for (int i = 0; i < opts.n; ++i) {
        Rng r = sample_rng(opts.seed, i);
        const auto present = draw_present(r);

        RawImage img;
        img.channels = 1;
        img.height = opts.image_size;
        img.width = opts.image_size;
        img.pix.assign(static_cast<std::size_t>(opts.image_size) * opts.image_size, 0.0f);
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                const float base =
                    0.08f + 0.04f * static_cast<float>(y) / static_cast<float>(img.height);
                img.at(0, y, x) = base + 0.02f * static_cast<float>(r.uniform());
            }
        }
        for (int f = 0; f < findings::kCount; ++f) {
            if (present[static_cast<std::size_t>(f)]) render_finding(img, f, r);
        }

        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "synth-%04d", i);
        const std::string rel = std::string("images/") + idbuf + ".png";
        save_png(img, (fs::path(opts.out_dir) / rel).string());

        Sample s;
        s.id = idbuf;
        s.image_paths = {rel};
        s.report = report_for(present);
        if (i < n_train) {
            ann.splits["train"].push_back(std::move(s));
        } else if (i < n_train + n_val) {
            ann.splits["val"].push_back(std::move(s));
        } else {
            ann.splits["test"].push_back(std::move(s));
        }
    }
    save_annotations(ann, (fs::path(opts.out_dir) / "annotations.json").string());
    return ann;
}

}  // namespace vlci::data
