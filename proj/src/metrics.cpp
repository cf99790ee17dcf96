#include "stats/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "stats/errors.hpp"

namespace stats {

namespace {

constexpr int kMaxOrder = 4;
constexpr double kRougeBeta = 1.2;

using NgramCounts = std::unordered_map<std::string, std::size_t>;

std::string ngram_key(const TokenSeq& toks, std::size_t start, std::size_t n) {
    std::string key;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) key.push_back('\x1f');
        key += toks[start + i];
    }
    return key;
}

NgramCounts count_ngrams(const TokenSeq& toks, std::size_t n) {
    NgramCounts counts;
    if (toks.size() >= n) {
        for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[ngram_key(toks, i, n)];
    }
    return counts;
}

struct ClippedCounts {
    std::size_t matches = 0;
    std::size_t total = 0;
};

ClippedCounts clipped_counts(const TokenSeq& cand, const std::vector<TokenSeq>& refs,
                             std::size_t n) {
    ClippedCounts out;
    NgramCounts cn = count_ngrams(cand, n);
    for (const auto& [key, c] : cn) out.total += c;
    if (out.total == 0) return out;
    NgramCounts best;
    for (const auto& ref : refs) {
        for (const auto& [key, c] : count_ngrams(ref, n)) {
            auto& b = best[key];
            b = std::max(b, c);
        }
    }
    for (const auto& [key, c] : cn) {
        auto it = best.find(key);
        if (it != best.end()) out.matches += std::min(c, it->second);
    }
    return out;
}

std::size_t closest_ref_len(std::size_t cand_len, const std::vector<TokenSeq>& refs) {
    std::size_t best = refs[0].size();
    auto dist = [cand_len](std::size_t len) {
        return len > cand_len ? len - cand_len : cand_len - len;
    };
    for (const auto& ref : refs) {
        std::size_t len = ref.size();
        if (dist(len) < dist(best) || (dist(len) == dist(best) && len < best)) best = len;
    }
    return best;
}

double bleu_from_counts(const ClippedCounts counts[kMaxOrder], std::size_t cand_len,
                        std::size_t ref_len) {
    if (cand_len == 0) return 0.0;
    double log_sum = 0.0;
    int orders = 0;
    for (int n = 0; n < kMaxOrder; ++n) {
        if (counts[n].total == 0) continue;  // candidate too short for this order
        if (counts[n].matches == 0) return 0.0;
        log_sum += std::log(double(counts[n].matches) / double(counts[n].total));
        ++orders;
    }
    if (orders == 0) return 0.0;
    double bp = cand_len < ref_len
                    ? std::exp(1.0 - double(ref_len) / double(cand_len))
                    : 1.0;
    return bp * std::exp(log_sum / orders);
}

double lcs_length(const TokenSeq& a, const TokenSeq& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return double(prev[b.size()]);
}

void require_refs(const std::vector<TokenSeq>& refs, const char* metric) {
    if (refs.empty()) {
        throw ParamError(std::string(metric) + " requires at least one reference");
    }
}

}  // namespace

TokenSeq tokenize(const std::string& sentence) {
    TokenSeq out;
    std::istringstream in(sentence);
    std::string tok;
    while (in >> tok) {
        for (auto& ch : tok) ch = char(std::tolower(static_cast<unsigned char>(ch)));
        while (!tok.empty()) {
            char last = tok.back();
            if (last == '.' || last == ',' || last == ';' || last == ':' || last == '!' ||
                last == '?') {
                tok.pop_back();
            } else {
                break;
            }
        }
        if (!tok.empty()) out.push_back(tok);
    }
    return out;
}

double bleu4(const TokenSeq& candidate, const std::vector<TokenSeq>& references) {
    require_refs(references, "bleu4");
    if (candidate.empty()) return 0.0;
    ClippedCounts counts[kMaxOrder];
    for (int n = 0; n < kMaxOrder; ++n) {
        counts[n] = clipped_counts(candidate, references, std::size_t(n + 1));
    }
    return bleu_from_counts(counts, candidate.size(),
                            closest_ref_len(candidate.size(), references));
}

double bleu4_smoothed(const TokenSeq& candidate, const std::vector<TokenSeq>& references) {
    require_refs(references, "bleu4_smoothed");
    if (candidate.empty()) return 0.0;
    double log_sum = 0.0;
    for (int n = 0; n < kMaxOrder; ++n) {
        ClippedCounts c = clipped_counts(candidate, references, std::size_t(n + 1));
        log_sum += std::log(double(c.matches + 1) / double(c.total + 1));
    }
    std::size_t ref_len = closest_ref_len(candidate.size(), references);
    double bp = candidate.size() < ref_len
                    ? std::exp(1.0 - double(ref_len) / double(candidate.size()))
                    : 1.0;
    return bp * std::exp(log_sum / kMaxOrder);
}

double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references) {
    require_refs(references, "rouge_l");
    if (candidate.empty()) return 0.0;
    double best = 0.0;
    double b2 = kRougeBeta * kRougeBeta;
    for (const auto& ref : references) {
        if (ref.empty()) continue;
        double lcs = lcs_length(candidate, ref);
        if (lcs == 0.0) continue;
        double p = lcs / double(candidate.size());
        double r = lcs / double(ref.size());
        best = std::max(best, (1.0 + b2) * p * r / (r + b2 * p));
    }
    return best;
}

CiderCorpus CiderCorpus::build(const std::vector<std::vector<TokenSeq>>& references_per_video) {
    CiderCorpus corpus;
    corpus.num_videos_ = references_per_video.size();
    for (const auto& refs : references_per_video) {
        std::set<std::string> seen;
        for (const auto& ref : refs) {
            for (int n = 1; n <= kMaxOrder; ++n) {
                for (const auto& [key, c] : count_ngrams(ref, std::size_t(n))) seen.insert(key);
            }
        }
        for (const auto& key : seen) ++corpus.df_[key];
    }
    return corpus;
}

double CiderCorpus::idf(const std::string& key) const {
    auto it = df_.find(key);
    std::size_t df = it == df_.end() ? 0 : it->second;
    return std::log(double(num_videos_ + 1) / double(df + 1));
}

namespace {

struct TfIdfVec {
    std::unordered_map<std::string, double> weights;
    double norm = 0.0;
};

TfIdfVec tfidf_vector(const TokenSeq& toks, std::size_t n, const CiderCorpus& corpus) {
    TfIdfVec v;
    NgramCounts counts = count_ngrams(toks, n);
    double total = 0.0;
    for (const auto& [key, c] : counts) total += double(c);
    if (total == 0.0) return v;
    double norm2 = 0.0;
    for (const auto& [key, c] : counts) {
        double w = (double(c) / total) * corpus.idf(key);
        v.weights.emplace(key, w);
        norm2 += w * w;
    }
    v.norm = std::sqrt(norm2);
    return v;
}

}  // namespace

double CiderCorpus::score(const TokenSeq& candidate,
                          const std::vector<TokenSeq>& references) const {
    require_refs(references, "cider");
    double order_sum = 0.0;
    for (int n = 1; n <= kMaxOrder; ++n) {
        TfIdfVec cv = tfidf_vector(candidate, std::size_t(n), *this);
        double ref_sum = 0.0;
        for (const auto& ref : references) {
            TfIdfVec rv = tfidf_vector(ref, std::size_t(n), *this);
            if (cv.norm == 0.0 || rv.norm == 0.0) continue;
            double dot = 0.0;
            for (const auto& [key, w] : cv.weights) {
                auto it = rv.weights.find(key);
                if (it != rv.weights.end()) dot += w * it->second;
            }
            ref_sum += dot / (cv.norm * rv.norm);
        }
        order_sum += ref_sum / double(references.size());
    }
    return 10.0 * order_sum / double(kMaxOrder);
}

CorpusScores evaluate_corpus(const std::map<std::string, TokenSeq>& captions,
                             const std::map<std::string, std::vector<TokenSeq>>& references) {
    if (captions.empty()) {
        throw AlignmentError("evaluate_corpus: empty caption set");
    }
    std::string missing;
    for (const auto& [id, refs] : references) {
        if (!captions.count(id)) missing += (missing.empty() ? "" : ", ") + id;
    }
    for (const auto& [id, cand] : captions) {
        if (!references.count(id)) missing += (missing.empty() ? "" : ", ") + id;
    }
    if (!missing.empty()) {
        throw AlignmentError("evaluate_corpus: unmatched video ids: " + missing);
    }

    std::vector<std::vector<TokenSeq>> ref_list;
    ref_list.reserve(references.size());
    for (const auto& [id, refs] : references) ref_list.push_back(refs);
    CiderCorpus corpus = CiderCorpus::build(ref_list);

    ClippedCounts agg[kMaxOrder];
    std::size_t cand_len_sum = 0;
    std::size_t ref_len_sum = 0;
    double rouge_sum = 0.0;
    double cider_sum = 0.0;
    for (const auto& [id, cand] : captions) {
        const auto& refs = references.at(id);
        for (int n = 0; n < kMaxOrder; ++n) {
            ClippedCounts c = clipped_counts(cand, refs, std::size_t(n + 1));
            agg[n].matches += c.matches;
            agg[n].total += c.total;
        }
        cand_len_sum += cand.size();
        ref_len_sum += closest_ref_len(cand.size(), refs);
        rouge_sum += rouge_l(cand, refs);
        cider_sum += corpus.score(cand, refs);
    }
    CorpusScores scores;
    scores.bleu4 = bleu_from_counts(agg, cand_len_sum, ref_len_sum);
    scores.rouge_l = rouge_sum / double(captions.size());
    scores.cider = cider_sum / double(captions.size());
    return scores;
}

}  // namespace stats
