#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "somer/numerics.hpp"

namespace somer {

enum class InteractionKind { share, url, hashtag_seq, text_vec };

std::string to_string(InteractionKind k);
InteractionKind interaction_kind_from_string(const std::string& name);

struct Interaction {
    std::string user_id;
    std::string item_id;
    InteractionKind kind = InteractionKind::share;
    std::vector<std::string> tokens;  // hashtag_seq: one post's hashtags in order
    std::vector<double> vector;       // text_vec
};

struct InteractionLog {
    std::vector<Interaction> records;
};

/// JSON lines: {"user": str, "kind": "share"|"url"|"hashtag_seq"|"text_vec", "item": str,
/// "payload": [str, ...] | [float, ...]}.
InteractionLog load_interactions(const std::filesystem::path& path);
void write_interactions(const std::filesystem::path& path, const InteractionLog& log);

struct PairScore {
    std::string a;
    std::string b;
    double score = 0.0;
};

struct DetectionResult {
    std::set<std::string> flagged;
    double threshold = 0.0;
    /// Pairs the threshold was computed over.
    std::size_t pair_count = 0;
    /// Pairs at or above the threshold.
    std::vector<PairScore> linked;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
};

/// Linear-interpolation percentile (0..100) of `values`, which need not be sorted.
double percentile(std::vector<double> values, double pct);

/// Users in any co-share pair whose cosine similarity of item-count vectors reaches the
/// `pct` percentile of the positive pair similarities.
DetectionResult coshare_flags(const InteractionLog& log, InteractionKind kind, double pct = 99.5);

/// Users sharing an identical contiguous run of at least `min_len` hashtags within a post.
DetectionResult hashtag_sequence_flags(const InteractionLog& log, std::size_t min_len = 5);

/// Per-user mean of text_vec payloads, rows aligned with the returned ids.
std::pair<std::vector<std::string>, Matrix> mean_text_vectors(const InteractionLog& log);

/// Users in any pair with cosine >= threshold; zero vectors are skipped with a warning.
DetectionResult text_similarity_flags(std::span<const std::string> ids, const Matrix& vectors,
                                      double threshold = 0.7);

struct DetectionScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// Flagged users are predicted positives; labels cover the population (1 = positive).
DetectionScore score_detection(const std::set<std::string>& flagged, const std::map<std::string, int>& labels);

}  // namespace somer
