#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "somer/numerics.hpp"

namespace somer {

enum class Metric { cosine, euclidean };

std::string to_string(Metric m);
Metric metric_from_string(const std::string& name);

/// Rows of `values` are the embeddings of `ids`, in the same order.
struct EmbeddingTable {
    std::vector<std::string> ids;
    Matrix values;

    std::size_t size() const { return ids.size(); }
};

/// Cosine distance is 1 - cos; a zero vector has cos = 0 against everything.
double distance(const RowVector& a, const RowVector& b, Metric metric);

/// Exact k nearest neighbours of every row, self excluded, ties broken by lower row index.
std::vector<std::vector<std::size_t>> knn_indices(const Matrix& embeddings, std::size_t k, Metric metric);

struct GroupShares {
    std::vector<double> in_group;
    std::vector<double> out_group;
    std::size_t k = 0;
    Metric metric = Metric::cosine;
};

/// Fraction of each user's k nearest neighbours sharing (in) or not sharing (out) its label.
GroupShares knn_group_shares(const Matrix& embeddings, std::span<const int> labels, std::size_t k,
                             Metric metric = Metric::cosine);

struct WelchResult {
    double t = 0.0;
    double df = 0.0;
    double p_value = 1.0;
};

/// Two-sided unequal-variance two-sample t-test.
WelchResult welch_test(std::span<const double> a, std::span<const double> b);

struct ShiftCell {
    int group = 0;
    std::string share;  // "in_group" or "out_group"
    std::size_t k = 0;
    double before = 0.0;
    double after = 0.0;
    std::optional<double> pct_change;  // absent when before == 0
    double p_value = 1.0;
};

struct ShiftReport {
    Metric metric = Metric::cosine;
    std::vector<ShiftCell> cells;

    nlohmann::json to_json() const;
    /// Columns: group, metric, k, before, after, pct_change, p_value.
    std::string to_csv() const;
};

/// Per-period kNN shares, percent change of group means and Welch p-values. `after` is aligned to
/// `before` by user id; `labels` follows `before`.
ShiftReport shift_report(const EmbeddingTable& before, const EmbeddingTable& after, std::span<const int> labels,
                         std::span<const std::size_t> k_list, Metric metric = Metric::cosine);

struct KMeansResult {
    std::vector<int> assignment;
    Matrix centroids;
    double inertia = 0.0;
};

/// Lloyd's algorithm from k-means++ seeds, best of `restarts` by inertia.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t restarts = 10,
                    std::size_t max_iter = 300);

double adjusted_rand_index(std::span<const int> a, std::span<const int> b);
/// Share of points whose cluster's majority label equals their own.
double purity(std::span<const int> clusters, std::span<const int> labels);

struct Agreement {
    double ari = 0.0;
    double purity = 0.0;
};

Agreement cluster_agreement(const Matrix& embeddings, std::span<const int> true_labels, std::size_t n_clusters,
                            std::uint64_t seed = 0);

/// CSV with a header row (user_id, e0, e1, ...), shortest round-trip decimal values.
void export_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable import_embeddings(const std::filesystem::path& path);

}  // namespace somer
