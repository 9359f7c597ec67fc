#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "somer/dataio.hpp"

namespace somer {

/// One population of synthetic users: Poisson baseline counts plus Poisson peaks.
struct ClusterSpec {
    std::size_t n_samples = 1000;
    std::size_t series_len = 400;
    std::size_t n_features = 5;
    /// Baseline rates; sample i uses lambda_grid[i % size].
    std::vector<double> lambda_grid{0.5, 1.0, 1.5};
    /// First step of each peak (ignored when peaks_random is set).
    std::vector<std::size_t> peak_positions{80, 200, 320};
    double peak_lambda = 10.0;
    std::size_t peak_width = 3;
    /// Draw `random_peak_count` positions per sample instead of using peak_positions.
    bool peaks_random = false;
    std::size_t random_peak_count = 3;

    /// Throws ConfigError on an inconsistent spec.
    void validate() const;
};

struct SyntheticDataset {
    /// Raw triplets: t is the integer time step, v the count. Sorted by user_id.
    std::vector<UserRecord> users;
    /// Peak start steps used for each user, aligned with `users`.
    std::vector<std::vector<std::size_t>> peaks;
    std::vector<ClusterSpec> specs;
    std::uint64_t seed = 0;
    std::size_t dropped = 0;
    std::size_t n_clusters() const { return specs.size(); }
};

struct GenerateOptions {
    /// Keep zero-count observations as triplets.
    bool keep_zeros = false;
};

SyntheticDataset generate(std::span<const ClusterSpec> specs, std::uint64_t seed, GenerateOptions options = {});

/// Cluster specs of the four validation datasets (ids 1..4).
std::vector<ClusterSpec> builtin_specs(int dataset_id);
SyntheticDataset builtin(int dataset_id, std::uint64_t seed);

/// Canonical corpus: one post per (user, step) with the step's feature counts as its features,
/// steps with no activity omitted; dense profile per user.
Corpus to_corpus(const SyntheticDataset& data);
/// `{user_id: cluster}` sidecar.
void write_labels(const std::filesystem::path& path, const SyntheticDataset& data);
std::map<std::string, int> read_labels(const std::filesystem::path& path);

/// Pipeline settings that turn the emitted corpus back into per-step triplets.
PipelineOptions synthetic_pipeline_options();

}  // namespace somer
