#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "somer/numerics.hpp"

namespace somer {

/// One timestamped post with its precomputed text features.
struct PostEvent {
    std::string user_id;
    double timestamp = 0.0;  // days since epoch
    std::vector<double> features;
};

/// (time, feature index, value) observation.
struct TripletEvent {
    double t = 0.0;
    int f = 0;
    double v = 0.0;

    bool operator==(const TripletEvent&) const = default;
};

enum class ProfileMode { dense, tokens };

struct Profile {
    std::vector<double> dense;
    std::vector<std::string> tokens;
    /// Vocabulary rows for `tokens`, filled by normalize(); unknown tokens are dropped.
    std::vector<int> token_ids;
};

struct UserRecord {
    std::string user_id;
    Profile profile;
    std::vector<TripletEvent> triplets;
    std::optional<int> label;
};

/// Undirected user-pair connectivity.
class EdgeList {
public:
    /// Throws DataError on a self-pair.
    void add(const std::string& a, const std::string& b);
    bool contains(const std::string& a, const std::string& b) const;
    std::size_t size() const noexcept { return pairs_.size(); }
    bool empty() const noexcept { return pairs_.empty(); }
    const std::set<std::pair<std::string, std::string>>& pairs() const noexcept { return pairs_; }

private:
    std::set<std::pair<std::string, std::string>> pairs_;
};

struct Corpus {
    std::vector<PostEvent> posts;  // grouped by user, each user sorted by time
    std::map<std::string, Profile> profiles;
    EdgeList edges;
    std::size_t feature_dim = 0;
};

/// Reads the JSON-lines corpus (post / profile / edge records). Unknown fields are ignored.
Corpus load_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);

struct PcaModel {
    RowVector mean;
    Matrix components;  // n_components x dim, orthonormal rows
    std::vector<double> explained_variance;

    std::size_t n_components() const { return static_cast<std::size_t>(components.rows()); }
    RowVector project(const RowVector& x) const;
};

/// Principal directions of the mean-centred rows of `features` via SVD.
PcaModel fit_pca(const Matrix& features, std::size_t n_components = 5);

enum class AggregateMode { sum, mean };

/// Buckets one user's posts into windows of `window_days` anchored at `origin` and emits one
/// triplet per feature for every non-empty window, stamped at the window midpoint.
/// A null `pca` keeps the raw features.
std::vector<TripletEvent> window_aggregate(std::span<const PostEvent> events, const PcaModel* pca,
                                           double window_days = 3.0, double origin = 0.0,
                                           AggregateMode mode = AggregateMode::sum, bool drop_zero_values = false);

struct PipelineOptions {
    bool use_pca = true;
    std::size_t n_components = 5;
    double window_days = 3.0;
    AggregateMode mode = AggregateMode::sum;
    bool drop_zero_values = false;
    std::size_t min_posts = 10;
    std::size_t max_seq_len = 512;
};

/// Everything needed to turn raw posts into triplets the same way twice.
struct Preprocessor {
    PipelineOptions options;
    std::optional<PcaModel> pca;
    double time_origin = 0.0;
};

struct Dataset {
    ProfileMode profile_mode = ProfileMode::dense;
    std::size_t num_features = 0;
    std::size_t profile_dim = 0;
    std::vector<UserRecord> users;  // sorted by user_id

    std::size_t index_of(const std::string& user_id) const;
};

struct BuildResult {
    Dataset dataset;
    Preprocessor preprocessor;
    std::size_t dropped_users = 0;
};

/// Fits the preprocessor on `corpus` and builds the raw (unnormalized) dataset.
BuildResult build_dataset(const Corpus& corpus, const PipelineOptions& options);
/// Reuses a fitted preprocessor (held-out users or periods).
BuildResult build_dataset(const Corpus& corpus, const Preprocessor& preprocessor);

/// Keeps the `max_len` most recent triplets (stable in time).
std::vector<TripletEvent> cap_recent(std::vector<TripletEvent> triplets, std::size_t max_len);

struct NormalizationStats {
    double time_min = 0.0;
    double time_max = 1.0;
    std::vector<double> feature_mean;
    std::vector<double> feature_std;
    std::vector<double> profile_mean;
    std::vector<double> profile_std;
    std::vector<std::string> vocab;

    double span_days() const { return time_max - time_min; }
};

struct Normalized {
    Dataset dataset;
    NormalizationStats stats;
};

/// Min-max scales time, z-scores values per feature, log1p + z-scores dense profiles and maps
/// profile tokens to vocabulary rows. When `stats` is given it is applied verbatim.
Normalized normalize(const Dataset& dataset, const NormalizationStats* stats = nullptr);

nlohmann::json to_json(const PcaModel& pca);
PcaModel pca_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PipelineOptions& o);
/// Keys absent from `j` keep the values in `base`.
PipelineOptions pipeline_options_from_json(const nlohmann::json& j, PipelineOptions base = {});
nlohmann::json to_json(const Preprocessor& p);
Preprocessor preprocessor_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NormalizationStats& s);
NormalizationStats stats_from_json(const nlohmann::json& j);

/// Preprocessor + normalization stats side file.
void save_sidecar(const std::filesystem::path& path, const Preprocessor& pre, const NormalizationStats& stats);
std::pair<Preprocessor, NormalizationStats> load_sidecar(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace somer
