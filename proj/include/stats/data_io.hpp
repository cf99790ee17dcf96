#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stats/attention.hpp"
#include "stats/decoder.hpp"
#include "stats/rng.hpp"

namespace stats {

// ---- feature files ----------------------------------------------------------
// Binary layout (all integers little-endian u32):
//   magic "STFT" | version | layout (0 grid, 1 boxes)
//   grid: rows, cols | boxes: box count
//   T, n, d | payload T*n*d little-endian f32

void write_feature_file(const std::filesystem::path& path, const VideoFeatures& vf);
VideoFeatures read_feature_file(const std::filesystem::path& path);

// ---- corpus manifest ---------------------------------------------------------

struct ManifestEntry {
    std::string video_id;
    std::string feature_path;  // relative to the corpus root
    std::vector<std::string> captions;
    std::string split;  // train | val | test
};

struct CorpusManifest {
    std::vector<ManifestEntry> entries;

    void validate() const;
    std::vector<ManifestEntry> split(const std::string& name) const;
};

void write_manifest(const std::filesystem::path& path, const CorpusManifest& manifest);
CorpusManifest read_manifest(const std::filesystem::path& path);

// ---- synthetic corpus --------------------------------------------------------

enum class SynthShape : std::uint8_t { square = 0, circle, triangle };
enum class SynthMotion : std::uint8_t { moves_left = 0, moves_right, grows, blinks, still };

const char* shape_noun(SynthShape s);
const char* motion_verb(SynthMotion m);
std::vector<SynthShape> all_shapes();
std::vector<SynthMotion> all_motions();

struct SynthSpec {
    std::size_t grid_rows = 3;
    std::size_t grid_cols = 3;
    std::size_t dim = 16;
    std::size_t frames = 8;
    std::size_t train_videos = 100;
    std::size_t val_videos = 20;
    std::size_t test_videos = 0;
    double noise_sigma = 0.05;
    std::uint64_t rng_seed = 0;

    void validate() const;
};

/// One video's features, noiseless placement plus optional additive noise.
/// The shape identity is visible in any single frame; the motion only in the
/// frame ordering (moves_left is the exact frame reversal of moves_right).
VideoFeatures synth_video(const SynthSpec& spec, SynthShape shape, SynthMotion motion,
                          std::size_t row, std::size_t col, RngStream* noise);

/// Column of the active cell at frame t for the moving motions.
std::size_t synth_motion_col(const SynthSpec& spec, SynthMotion motion, std::size_t start_col,
                             std::size_t t);

/// Writes feature files and manifest.json under root. Deterministic per seed.
CorpusManifest generate_synthetic_corpus(const SynthSpec& spec,
                                         const std::filesystem::path& root);

// ---- vocabulary and batching --------------------------------------------------

/// Tokens with count >= min_count, ordered by frequency then lexicographic,
/// after the four reserved tokens. Rarer tokens encode as UNK.
Vocabulary build_vocab(const CorpusManifest& manifest, std::size_t min_count = 1);

struct CorpusItem {
    std::string video_id;
    VideoFeatures features;
    std::vector<std::vector<std::string>> caption_tokens;
};

struct LoadedCorpus {
    std::vector<CorpusItem> items;
};

LoadedCorpus load_corpus(const std::filesystem::path& root, const CorpusManifest& manifest,
                         const std::string& split);

struct BatchItem {
    const CorpusItem* item = nullptr;
    VideoFeatures features;                // padded along T with zero frames
    std::vector<std::uint8_t> frame_mask;  // 1 = real frame
    std::vector<std::size_t> target;       // chosen caption + EOS, PAD-padded
    std::vector<std::uint8_t> token_mask;  // 1 = real target position
};

struct Batch {
    std::vector<BatchItem> items;
};

/// Shuffles the corpus and picks one reference caption per video, both from
/// the supplied stream; pads features and captions per batch.
std::vector<Batch> make_batches(const LoadedCorpus& corpus, const Vocabulary& vocab,
                                std::size_t batch_size, RngStream& rng);

// ---- caption / reference JSONL -------------------------------------------------

struct CaptionRecord {
    std::string video_id;
    std::vector<std::string> caption;
    double log_prob = 0.0;
};

void write_captions_jsonl(const std::filesystem::path& path,
                          const std::vector<CaptionRecord>& records);
std::vector<CaptionRecord> read_captions_jsonl(const std::filesystem::path& path);

struct RefsRecord {
    std::string video_id;
    std::vector<std::string> captions;
};

void write_refs_jsonl(const std::filesystem::path& path, const std::vector<RefsRecord>& records);
std::vector<RefsRecord> read_refs_jsonl(const std::filesystem::path& path);

}  // namespace stats
