#include "somer/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "somer/seeding.hpp"

namespace somer {

namespace {

const std::vector<double> kLowActivity{0.5, 1.0, 1.5};
const std::vector<double> kHighActivity{4.0, 4.5, 5.0, 5.5};
const std::vector<std::size_t> kThreePeaks{80, 200, 320};
const std::vector<std::size_t> kThreeOtherPeaks{140, 260, 380};
const std::vector<std::size_t> kSixPeaks{40, 100, 160, 220, 280, 340};

// Shared positions for the n-peak clusters of the ten-cluster set.
std::vector<std::size_t> peaks_for_count(std::size_t n) {
    switch (n) {
        case 2: return {200, 350};
        case 3: return kThreePeaks;
        case 4: return {80, 200, 290, 360};
        case 5: return {80, 200, 280, 330, 380};
        default: throw ConfigError("no shared peak layout for " + std::to_string(n) + " peaks");
    }
}

ClusterSpec cluster(std::vector<double> grid, std::vector<std::size_t> peaks, double peak_lambda = 10.0) {
    ClusterSpec s;
    s.lambda_grid = std::move(grid);
    s.peak_positions = std::move(peaks);
    s.peak_lambda = peak_lambda;
    return s;
}

std::string sample_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "u%06zu", index);
    return buf;
}

}  // namespace

void ClusterSpec::validate() const {
    if (n_samples == 0) throw ConfigError("cluster spec: n_samples must be positive");
    if (series_len == 0) throw ConfigError("cluster spec: series_len must be positive");
    if (n_features == 0) throw ConfigError("cluster spec: n_features must be positive");
    if (lambda_grid.empty()) throw ConfigError("cluster spec: lambda_grid is empty");
    for (double l : lambda_grid) {
        if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("cluster spec: rates must be finite and >= 0");
    }
    if (!(peak_lambda >= 0.0)) throw ConfigError("cluster spec: peak_lambda must be >= 0");
    if (peak_width > series_len) throw ConfigError("cluster spec: peak_width exceeds series_len");
    if (!peaks_random) {
        for (std::size_t p : peak_positions) {
            if (p + peak_width > series_len) {
                throw ConfigError("cluster spec: peak at " + std::to_string(p) + " runs past series_len " +
                                  std::to_string(series_len));
            }
        }
    }
}

SyntheticDataset generate(std::span<const ClusterSpec> specs, std::uint64_t seed, GenerateOptions options) {
    if (specs.empty()) throw ConfigError("generate: no cluster specs");
    for (const auto& s : specs) s.validate();

    SyntheticDataset out;
    out.specs.assign(specs.begin(), specs.end());
    out.seed = seed;
    std::size_t index = 0;
    for (std::size_t c = 0; c < specs.size(); ++c) {
        const ClusterSpec& spec = specs[c];
        for (std::size_t i = 0; i < spec.n_samples; ++i, ++index) {
            std::mt19937_64 rng(derive_seed(seed, index));
            const double lambda = spec.lambda_grid[i % spec.lambda_grid.size()];

            std::vector<std::size_t> peaks = spec.peak_positions;
            if (spec.peaks_random) {
                std::uniform_int_distribution<std::size_t> pos(0, spec.series_len - spec.peak_width);
                peaks.clear();
                for (std::size_t k = 0; k < spec.random_peak_count; ++k) peaks.push_back(pos(rng));
                std::sort(peaks.begin(), peaks.end());
            }

            std::vector<std::vector<int>> counts(spec.series_len, std::vector<int>(spec.n_features, 0));
            std::poisson_distribution<int> base(lambda);
            for (auto& step : counts) {
                for (auto& x : step) x = lambda > 0.0 ? base(rng) : 0;
            }
            std::poisson_distribution<int> burst(spec.peak_lambda);
            for (std::size_t p : peaks) {
                for (std::size_t s = p; s < p + spec.peak_width; ++s) {
                    for (auto& x : counts[s]) x += spec.peak_lambda > 0.0 ? burst(rng) : 0;
                }
            }

            UserRecord user;
            user.user_id = sample_id(index);
            user.label = static_cast<int>(c);
            double total = 0.0;
            for (std::size_t s = 0; s < spec.series_len; ++s) {
                for (std::size_t f = 0; f < spec.n_features; ++f) {
                    const int x = counts[s][f];
                    total += x;
                    if (x != 0 || options.keep_zeros) {
                        user.triplets.push_back({static_cast<double>(s), static_cast<int>(f), static_cast<double>(x)});
                    }
                }
            }
            if (user.triplets.empty()) {
                ++out.dropped;
                continue;
            }
            user.profile.dense = {std::log1p(total), 0.0};
            out.users.push_back(std::move(user));
            out.peaks.push_back(std::move(peaks));
        }
    }
    return out;
}

std::vector<ClusterSpec> builtin_specs(int dataset_id) {
    switch (dataset_id) {
        case 1:
            return {cluster(kHighActivity, kThreePeaks), cluster(kLowActivity, kThreePeaks),
                    cluster(kLowActivity, kThreeOtherPeaks)};
        case 2: {
            struct Cell {
                bool high;
                std::size_t peaks;
                double peak_lambda;
            };
            const Cell cells[] = {{false, 2, 10.0}, {false, 3, 5.0}, {false, 4, 2.0}, {false, 5, 1.0},
                                  {false, 3, 10.0}, {true, 2, 10.0}, {true, 3, 5.0}, {true, 4, 2.0},
                                  {true, 5, 1.0},   {true, 5, 10.0}};
            std::vector<ClusterSpec> specs;
            for (const Cell& c : cells) {
                specs.push_back(cluster(c.high ? kHighActivity : kLowActivity, peaks_for_count(c.peaks), c.peak_lambda));
            }
            return specs;
        }
        case 3:
            return {cluster(kLowActivity, kThreePeaks), cluster(kLowActivity, kThreeOtherPeaks),
                    cluster(kLowActivity, kSixPeaks)};
        case 4: {
            std::vector<ClusterSpec> specs;
            for (double l : {0.5, 2.0, 5.0}) {
                ClusterSpec s = cluster({l}, {});
                s.peaks_random = true;
                s.random_peak_count = 3;
                specs.push_back(s);
            }
            return specs;
        }
        default:
            throw ConfigError("unknown synthetic dataset " + std::to_string(dataset_id) + " (expected 1-4)");
    }
}

SyntheticDataset builtin(int dataset_id, std::uint64_t seed) {
    const auto specs = builtin_specs(dataset_id);
    return generate(specs, seed);
}

Corpus to_corpus(const SyntheticDataset& data) {
    Corpus corpus;
    corpus.feature_dim = data.specs.empty() ? 0 : data.specs.front().n_features;
    for (const auto& s : data.specs) {
        if (s.n_features != corpus.feature_dim) throw ConfigError("to_corpus: clusters disagree on n_features");
    }
    for (const auto& user : data.users) {
        // Triplets are grouped by step in generation order.
        std::size_t i = 0;
        while (i < user.triplets.size()) {
            PostEvent post;
            post.user_id = user.user_id;
            post.timestamp = user.triplets[i].t;
            post.features.assign(corpus.feature_dim, 0.0);
            for (; i < user.triplets.size() && user.triplets[i].t == post.timestamp; ++i) {
                post.features[static_cast<std::size_t>(user.triplets[i].f)] = user.triplets[i].v;
            }
            corpus.posts.push_back(std::move(post));
        }
        Profile p;
        p.dense = user.profile.dense;
        corpus.profiles.emplace(user.user_id, std::move(p));
    }
    return corpus;
}

void write_labels(const std::filesystem::path& path, const SyntheticDataset& data) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& u : data.users) j[u.user_id] = u.label.value_or(-1);
    write_json_file(path, j);
}

std::map<std::string, int> read_labels(const std::filesystem::path& path) {
    const nlohmann::json j = read_json_file(path);
    if (!j.is_object()) throw DataError("labels file '" + path.string() + "' must hold a JSON object");
    std::map<std::string, int> out;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_number_integer()) throw DataError("labels file '" + path.string() + "': label of '" + k + "' is not an integer");
        out.emplace(k, v.get<int>());
    }
    return out;
}

PipelineOptions synthetic_pipeline_options() {
    PipelineOptions o;
    o.use_pca = false;
    o.window_days = 1.0;
    o.drop_zero_values = true;
    return o;
}

}  // namespace somer
