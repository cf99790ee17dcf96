#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace stats {

using TokenSeq = std::vector<std::string>;

/// Lowercase, split on whitespace, strip trailing .,;:!? from each token.
/// Applied identically to candidates and references so no side is favored.
TokenSeq tokenize(const std::string& sentence);

/// Sentence BLEU4: geometric mean of clipped modified precisions n=1..4 with
/// brevity penalty exp(1 - r/c) for c < r, r the closest reference length
/// (ties broken toward the shorter reference). Orders for which the
/// candidate has no n-grams are skipped; a zero precision over a populated
/// order yields 0. Empty candidates score 0.
double bleu4(const TokenSeq& candidate, const std::vector<TokenSeq>& references);

/// Sentence BLEU4 with add-one smoothing on the n-gram counts; used as an
/// RL reward where the unsmoothed score is almost always zero early on.
double bleu4_smoothed(const TokenSeq& candidate, const std::vector<TokenSeq>& references);

/// ROUGE-L F-measure with beta = 1.2, maximized over references.
double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references);

/// Per-corpus document frequencies for CIDEr. One document = one video's
/// reference set. Built once, then immutable and shareable.
class CiderCorpus {
public:
    static CiderCorpus build(const std::vector<std::vector<TokenSeq>>& references_per_video);

    std::size_t num_videos() const { return num_videos_; }
    /// Smoothed idf: log((N+1)/(df+1)); finite even for a 1-video corpus.
    double idf(const std::string& ngram_key) const;

    /// tf-idf weighted n-gram cosine similarity averaged over n=1..4 and
    /// over the references, scaled by 10. No length penalty (plain CIDEr).
    double score(const TokenSeq& candidate, const std::vector<TokenSeq>& references) const;

private:
    std::size_t num_videos_ = 0;
    std::unordered_map<std::string, std::size_t> df_;
};

struct CorpusScores {
    double bleu4 = 0.0;
    double rouge_l = 0.0;
    double cider = 0.0;
};

/// Corpus-level evaluation: BLEU4 from aggregated counts, mean ROUGE-L,
/// mean CIDEr. Throws AlignmentError when ids do not line up.
CorpusScores evaluate_corpus(const std::map<std::string, TokenSeq>& captions,
                             const std::map<std::string, std::vector<TokenSeq>>& references);

}  // namespace stats
