#include "stats/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <cstring>

#include <json.hpp>

#include "stats/errors.hpp"
#include "stats/metrics.hpp"

namespace stats {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'S', 'T', 'F', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32_at(std::istream& in, std::size_t offset) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) {
        throw FormatError("feature file truncated at byte offset " + std::to_string(offset));
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& out, float v) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    write_u32(out, bits);
}

}  // namespace

void write_feature_file(const fs::path& path, const VideoFeatures& vf) {
    vf.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for write: " + path.string());
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u32(out, vf.layout == RegionLayout::grid ? 0u : 1u);
    if (vf.layout == RegionLayout::grid) {
        write_u32(out, static_cast<std::uint32_t>(vf.grid_rows));
        write_u32(out, static_cast<std::uint32_t>(vf.grid_cols));
    } else {
        write_u32(out, static_cast<std::uint32_t>(vf.regions));
    }
    write_u32(out, static_cast<std::uint32_t>(vf.frames));
    write_u32(out, static_cast<std::uint32_t>(vf.regions));
    write_u32(out, static_cast<std::uint32_t>(vf.dim));
    for (std::size_t i = 0; i < vf.values.size(); ++i) {
        write_f32(out, static_cast<float>(vf.values[i]));
    }
    if (!out) throw FormatError("write failed: " + path.string());
}

VideoFeatures read_feature_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open feature file: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("bad magic in " + path.string() + " at byte offset 0");
    }
    std::size_t off = 4;
    std::uint32_t version = read_u32_at(in, off);
    off += 4;
    if (version != kVersion) {
        throw FormatError("unsupported feature file version " + std::to_string(version));
    }
    std::uint32_t layout = read_u32_at(in, off);
    off += 4;
    VideoFeatures vf;
    if (layout == 0) {
        vf.layout = RegionLayout::grid;
        vf.grid_rows = read_u32_at(in, off);
        off += 4;
        vf.grid_cols = read_u32_at(in, off);
        off += 4;
    } else if (layout == 1) {
        vf.layout = RegionLayout::detection_boxes;
        std::uint32_t boxes = read_u32_at(in, off);
        off += 4;
        vf.regions = boxes;
    } else {
        throw FormatError("unknown layout tag " + std::to_string(layout) + " in " +
                          path.string());
    }
    vf.frames = read_u32_at(in, off);
    off += 4;
    std::uint32_t n = read_u32_at(in, off);
    off += 4;
    vf.dim = read_u32_at(in, off);
    off += 4;
    if (vf.layout == RegionLayout::grid) {
        vf.regions = n;
        if (vf.grid_rows * vf.grid_cols != vf.regions) {
            throw FormatError("grid " + std::to_string(vf.grid_rows) + "x" +
                              std::to_string(vf.grid_cols) + " does not cover n=" +
                              std::to_string(vf.regions) + " in " + path.string());
        }
    } else if (vf.regions != n) {
        throw FormatError("box count disagrees with n in " + path.string());
    }
    if (vf.frames == 0 || vf.regions == 0 || vf.dim == 0) {
        throw FormatError("empty dimensions (T,n,d)=(" + std::to_string(vf.frames) + "," +
                          std::to_string(vf.regions) + "," + std::to_string(vf.dim) + ") in " +
                          path.string());
    }

    std::size_t count = vf.frames * vf.regions * vf.dim;
    vf.values = Tensor({vf.frames, vf.regions, vf.dim});
    std::vector<char> payload(count * 4);
    in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (static_cast<std::size_t>(in.gcount()) != payload.size()) {
        throw FormatError("feature payload truncated in " + path.string() + ": expected " +
                          std::to_string(payload.size()) + " bytes at offset " +
                          std::to_string(off) + ", got " + std::to_string(in.gcount()));
    }
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(
                        static_cast<unsigned char>(payload[i * 4 + std::size_t(b)]))
                    << (8 * b);
        }
        vf.values[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    vf.validate();
    return vf;
}

void CorpusManifest::validate() const {
    std::set<std::string> ids;
    for (const auto& e : entries) {
        if (!ids.insert(e.video_id).second) {
            throw FormatError("duplicate video id in manifest: " + e.video_id);
        }
        if (e.captions.empty()) {
            throw FormatError("manifest entry " + e.video_id + " has no captions");
        }
        if (e.split != "train" && e.split != "val" && e.split != "test") {
            throw FormatError("manifest entry " + e.video_id + " has bad split: " + e.split);
        }
    }
}

std::vector<ManifestEntry> CorpusManifest::split(const std::string& name) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
        if (e.split == name) out.push_back(e);
    }
    return out;
}

void write_manifest(const fs::path& path, const CorpusManifest& manifest) {
    manifest.validate();
    nlohmann::json j;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : manifest.entries) {
        j["entries"].push_back({{"video_id", e.video_id},
                                {"feature_path", e.feature_path},
                                {"captions", e.captions},
                                {"split", e.split}});
    }
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write manifest: " + path.string());
    out << j.dump(2) << "\n";
}

CorpusManifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("malformed manifest " + path.string() + ": " + e.what());
    }
    CorpusManifest m;
    for (const auto& je : j.at("entries")) {
        ManifestEntry e;
        e.video_id = je.at("video_id").get<std::string>();
        e.feature_path = je.at("feature_path").get<std::string>();
        e.captions = je.at("captions").get<std::vector<std::string>>();
        e.split = je.at("split").get<std::string>();
        m.entries.push_back(std::move(e));
    }
    m.validate();
    return m;
}

const char* shape_noun(SynthShape s) {
    switch (s) {
        case SynthShape::square: return "square";
        case SynthShape::circle: return "circle";
        case SynthShape::triangle: return "triangle";
    }
    return "?";
}

const char* motion_verb(SynthMotion m) {
    switch (m) {
        case SynthMotion::moves_left: return "moves_left";
        case SynthMotion::moves_right: return "moves_right";
        case SynthMotion::grows: return "grows";
        case SynthMotion::blinks: return "blinks";
        case SynthMotion::still: return "stays";
    }
    return "?";
}

std::vector<SynthShape> all_shapes() {
    return {SynthShape::square, SynthShape::circle, SynthShape::triangle};
}

std::vector<SynthMotion> all_motions() {
    return {SynthMotion::moves_left, SynthMotion::moves_right, SynthMotion::grows,
            SynthMotion::blinks, SynthMotion::still};
}

void SynthSpec::validate() const {
    if (grid_rows == 0 || grid_cols == 0) throw ConfigError("synth grid must be nonempty");
    if (grid_cols < 2) {
        throw ConfigError("synth grid needs at least 2 columns for the moving motions");
    }
    if (frames < 2) throw ConfigError("synth videos need at least 2 frames to carry motion");
    if (dim < all_shapes().size()) {
        throw ConfigError("synth dim must be >= " + std::to_string(all_shapes().size()) +
                          " to hold orthogonal shape prototypes");
    }
    if (train_videos + val_videos + test_videos == 0) {
        throw ConfigError("synth corpus must contain at least one video");
    }
    if (noise_sigma < 0.0) throw ConfigError("synth noise sigma must be nonnegative");
}

std::size_t synth_motion_col(const SynthSpec& spec, SynthMotion motion, std::size_t start_col,
                             std::size_t t) {
    // Traverse all columns over the T frames; moves_left is the exact frame
    // reversal of moves_right.
    std::size_t sweep = (t * spec.grid_cols) / spec.frames;
    switch (motion) {
        case SynthMotion::moves_right: return sweep;
        case SynthMotion::moves_left:
            return ((spec.frames - 1 - t) * spec.grid_cols) / spec.frames;
        default: return start_col;
    }
}

VideoFeatures synth_video(const SynthSpec& spec, SynthShape shape, SynthMotion motion,
                          std::size_t row, std::size_t col, RngStream* noise) {
    spec.validate();
    if (row >= spec.grid_rows || col >= spec.grid_cols) {
        throw ConfigError("synth_video cell outside the grid");
    }
    VideoFeatures vf;
    vf.frames = spec.frames;
    vf.regions = spec.grid_rows * spec.grid_cols;
    vf.dim = spec.dim;
    vf.layout = RegionLayout::grid;
    vf.grid_rows = spec.grid_rows;
    vf.grid_cols = spec.grid_cols;
    vf.values = Tensor({vf.frames, vf.regions, vf.dim});

    std::size_t proto_axis = static_cast<std::size_t>(shape);
    for (std::size_t t = 0; t < spec.frames; ++t) {
        double amplitude = 1.0;
        if (motion == SynthMotion::grows) {
            amplitude = double(t + 1) / double(spec.frames);
        } else if (motion == SynthMotion::blinks) {
            amplitude = (t % 2 == 0) ? 1.0 : 0.0;
        }
        std::size_t cell = row * spec.grid_cols + synth_motion_col(spec, motion, col, t);
        vf.values.at(t, cell, proto_axis) += amplitude;
    }
    if (noise != nullptr && spec.noise_sigma > 0.0) {
        for (std::size_t i = 0; i < vf.values.size(); ++i) {
            vf.values[i] += noise->normal(0.0, spec.noise_sigma);
        }
    }
    return vf;
}

CorpusManifest generate_synthetic_corpus(const SynthSpec& spec, const fs::path& root) {
    spec.validate();
    fs::create_directories(root / "features");

    auto shapes = all_shapes();
    auto motions = all_motions();
    CorpusManifest manifest;
    RngStream base(spec.rng_seed);

    struct SplitPlan {
        const char* name;
        std::size_t count;
    };
    SplitPlan plans[3] = {{"train", spec.train_videos},
                          {"val", spec.val_videos},
                          {"test", spec.test_videos}};
    std::size_t serial = 0;
    for (const auto& plan : plans) {
        for (std::size_t k = 0; k < plan.count; ++k, ++serial) {
            std::string id = "vid" + std::to_string(serial);
            RngStream rng = base.substream(id);
            SynthShape shape = shapes[rng.index(shapes.size())];
            SynthMotion motion = motions[rng.index(motions.size())];
            std::size_t row = rng.index(spec.grid_rows);
            std::size_t col = rng.index(spec.grid_cols);
            VideoFeatures vf = synth_video(spec, shape, motion, row, col, &rng);
            std::string rel = "features/" + id + ".stft";
            write_feature_file(root / rel, vf);

            ManifestEntry e;
            e.video_id = id;
            e.feature_path = rel;
            e.captions = {std::string("a ") + shape_noun(shape) + " " + motion_verb(motion)};
            e.split = plan.name;
            manifest.entries.push_back(std::move(e));
        }
    }
    write_manifest(root / "manifest.json", manifest);

    for (const char* split : {"train", "val", "test"}) {
        std::vector<RefsRecord> refs;
        for (const auto& e : manifest.entries) {
            if (e.split == split) refs.push_back({e.video_id, e.captions});
        }
        if (!refs.empty()) {
            write_refs_jsonl(root / (std::string("refs.") + split + ".jsonl"), refs);
        }
    }
    return manifest;
}

Vocabulary build_vocab(const CorpusManifest& manifest, std::size_t min_count) {
    if (manifest.entries.empty()) throw VocabError("cannot build a vocabulary from nothing");
    std::map<std::string, std::size_t> counts;
    for (const auto& e : manifest.entries) {
        for (const auto& caption : e.captions) {
            for (const auto& tok : tokenize(caption)) ++counts[tok];
        }
    }
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [tok, c] : counts) {
        if (c >= min_count) kept.emplace_back(tok, c);
    }
    if (kept.empty()) {
        throw VocabError("no tokens survive min_count=" + std::to_string(min_count));
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> words;
    words.reserve(kept.size());
    for (const auto& [tok, c] : kept) words.push_back(tok);
    return Vocabulary::with_words(words);
}

LoadedCorpus load_corpus(const fs::path& root, const CorpusManifest& manifest,
                         const std::string& split) {
    LoadedCorpus corpus;
    for (const auto& e : manifest.entries) {
        if (!split.empty() && e.split != split) continue;
        CorpusItem item;
        item.video_id = e.video_id;
        item.features = read_feature_file(root / e.feature_path);
        for (const auto& caption : e.captions) {
            item.caption_tokens.push_back(tokenize(caption));
        }
        corpus.items.push_back(std::move(item));
    }
    return corpus;
}

std::vector<Batch> make_batches(const LoadedCorpus& corpus, const Vocabulary& vocab,
                                std::size_t batch_size, RngStream& rng) {
    if (batch_size == 0) throw ParamError("batch_size must be >= 1");
    std::vector<std::size_t> order(corpus.items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::size_t end = std::min(start + batch_size, order.size());
        Batch batch;
        std::size_t max_T = 0;
        std::size_t max_len = 0;
        std::vector<std::size_t> chosen_caption(end - start);
        for (std::size_t k = start; k < end; ++k) {
            const CorpusItem& item = corpus.items[order[k]];
            max_T = std::max(max_T, item.features.frames);
            std::size_t ci = item.caption_tokens.size() == 1
                                 ? 0
                                 : rng.index(item.caption_tokens.size());
            chosen_caption[k - start] = ci;
            max_len = std::max(max_len, item.caption_tokens[ci].size() + 1);  // + EOS
        }
        for (std::size_t k = start; k < end; ++k) {
            const CorpusItem& item = corpus.items[order[k]];
            BatchItem bi;
            bi.item = &item;
            bi.features = item.features;
            if (item.features.frames < max_T) {
                Tensor padded({max_T, item.features.regions, item.features.dim});
                for (std::size_t i = 0; i < item.features.values.size(); ++i) {
                    padded[i] = item.features.values[i];
                }
                bi.features.values = std::move(padded);
                bi.features.frames = max_T;
            }
            bi.frame_mask.assign(max_T, 0);
            for (std::size_t t = 0; t < item.features.frames; ++t) bi.frame_mask[t] = 1;

            const auto& words = item.caption_tokens[chosen_caption[k - start]];
            bi.target = vocab.encode(words);
            bi.target.push_back(Vocabulary::EOS);
            bi.token_mask.assign(max_len, 0);
            for (std::size_t i = 0; i < bi.target.size(); ++i) bi.token_mask[i] = 1;
            bi.target.resize(max_len, Vocabulary::PAD);
            batch.items.push_back(std::move(bi));
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

void write_captions_jsonl(const fs::path& path, const std::vector<CaptionRecord>& records) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write captions: " + path.string());
    for (const auto& r : records) {
        nlohmann::json j{{"video_id", r.video_id}, {"caption", r.caption},
                         {"log_prob", r.log_prob}};
        out << j.dump() << "\n";
    }
}

std::vector<CaptionRecord> read_captions_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open captions: " + path.string());
    std::vector<CaptionRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            CaptionRecord r;
            r.video_id = j.at("video_id").get<std::string>();
            r.caption = j.at("caption").get<std::vector<std::string>>();
            r.log_prob = j.value("log_prob", 0.0);
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad captions line " + std::to_string(lineno) + " in " +
                              path.string() + ": " + e.what());
        }
    }
    return out;
}

void write_refs_jsonl(const fs::path& path, const std::vector<RefsRecord>& records) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write refs: " + path.string());
    for (const auto& r : records) {
        nlohmann::json j{{"video_id", r.video_id}, {"captions", r.captions}};
        out << j.dump() << "\n";
    }
}

std::vector<RefsRecord> read_refs_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open refs: " + path.string());
    std::vector<RefsRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(line);
            out.push_back({j.at("video_id").get<std::string>(),
                           j.at("captions").get<std::vector<std::string>>()});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad refs line " + std::to_string(lineno) + " in " +
                              path.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace stats
