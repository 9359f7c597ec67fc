#include "somer/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <boost/math/distributions/students_t.hpp>

#include "somer/seeding.hpp"

namespace somer {

std::string to_string(Metric m) { return m == Metric::cosine ? "cosine" : "euclidean"; }

Metric metric_from_string(const std::string& name) {
    if (name == "cosine") return Metric::cosine;
    if (name == "euclidean") return Metric::euclidean;
    throw ConfigError("unknown metric '" + name + "' (expected cosine or euclidean)");
}

double distance(const RowVector& a, const RowVector& b, Metric metric) {
    if (a.size() != b.size()) throw DimensionError("distance: vectors of length " + std::to_string(a.size()) +
                                                   " and " + std::to_string(b.size()));
    if (metric == Metric::euclidean) return (a - b).norm();
    const double na = a.squaredNorm();
    const double nb = b.squaredNorm();
    if (na == 0.0 || nb == 0.0) return 1.0;
    return 1.0 - a.dot(b) / std::sqrt(na * nb);
}

namespace {

// Pairwise distances; entry (i, j) and (j, i) come from the same evaluation.
Matrix distance_matrix(const Matrix& x, Metric metric) {
    const Eigen::Index n = x.rows();
    Matrix d = Matrix::Zero(n, n);
    Vector sq(n);
    for (Eigen::Index i = 0; i < n; ++i) sq(i) = x.row(i).squaredNorm();
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            double v;
            if (metric == Metric::euclidean) {
                v = (x.row(i) - x.row(j)).norm();
            } else if (sq(i) == 0.0 || sq(j) == 0.0) {
                v = 1.0;
            } else {
                v = 1.0 - x.row(i).dot(x.row(j)) / std::sqrt(sq(i) * sq(j));
            }
            d(i, j) = v;
            d(j, i) = v;
        }
    }
    return d;
}

double mean_of(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double comb2(double n) { return n * (n - 1.0) / 2.0; }

}  // namespace

std::vector<std::vector<std::size_t>> knn_indices(const Matrix& embeddings, std::size_t k, Metric metric) {
    const auto n = static_cast<std::size_t>(embeddings.rows());
    if (k == 0) throw ConfigError("knn: k must be positive");
    if (k >= n) throw ConfigError("knn: k=" + std::to_string(k) + " needs more than " + std::to_string(n) + " users");
    require_finite(embeddings, "knn embeddings");
    const Matrix d = distance_matrix(embeddings, metric);
    std::vector<std::vector<std::size_t>> out(n);
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < n; ++i) {
        order.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) order.push_back(j);
        }
        const auto row = static_cast<Eigen::Index>(i);
        auto closer = [&](std::size_t a, std::size_t b) {
            const double da = d(row, static_cast<Eigen::Index>(a));
            const double db = d(row, static_cast<Eigen::Index>(b));
            return da < db || (da == db && a < b);
        };
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), closer);
        out[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    }
    return out;
}

GroupShares knn_group_shares(const Matrix& embeddings, std::span<const int> labels, std::size_t k, Metric metric) {
    const auto n = static_cast<std::size_t>(embeddings.rows());
    if (labels.size() != n) {
        throw DimensionError("knn_group_shares: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " embeddings");
    }
    if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
        throw ConfigError("knn_group_shares: at least two groups are required");
    }
    const auto nn = knn_indices(embeddings, k, metric);
    GroupShares out;
    out.k = k;
    out.metric = metric;
    out.in_group.resize(n);
    out.out_group.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t same = 0;
        for (std::size_t j : nn[i]) same += labels[j] == labels[i] ? 1 : 0;
        out.in_group[i] = static_cast<double>(same) / static_cast<double>(k);
        out.out_group[i] = static_cast<double>(k - same) / static_cast<double>(k);
    }
    return out;
}

WelchResult welch_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw DataError("welch_test: each sample needs at least 2 values");
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    const double ma = mean_of(a);
    const double mb = mean_of(b);
    double va = 0.0, vb = 0.0;
    for (double x : a) va += (x - ma) * (x - ma);
    for (double x : b) vb += (x - mb) * (x - mb);
    va /= na - 1.0;
    vb /= nb - 1.0;
    const double se2 = va / na + vb / nb;
    WelchResult r;
    if (se2 == 0.0) {
        // Both samples constant: identical means are no evidence of a difference.
        r.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
        r.df = na + nb - 2.0;
        r.p_value = ma == mb ? 1.0 : 0.0;
        return r;
    }
    r.t = (ma - mb) / std::sqrt(se2);
    const double qa = va / na;
    const double qb = vb / nb;
    r.df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    boost::math::students_t dist(r.df);
    r.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
    return r;
}

nlohmann::json ShiftReport::to_json() const {
    nlohmann::json cells_json = nlohmann::json::array();
    for (const auto& c : cells) {
        cells_json.push_back({{"group", c.group},
                              {"share", c.share},
                              {"k", c.k},
                              {"before", c.before},
                              {"after", c.after},
                              {"pct_change", c.pct_change ? nlohmann::json(*c.pct_change) : nlohmann::json(nullptr)},
                              {"p_value", c.p_value}});
    }
    return {{"distance", somer::to_string(metric)}, {"cells", cells_json}};
}

std::string ShiftReport::to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "group,metric,k,before,after,pct_change,p_value\n";
    for (const auto& c : cells) {
        out << c.group << ',' << c.share << ',' << c.k << ',' << c.before << ',' << c.after << ',';
        if (c.pct_change) out << *c.pct_change;
        out << ',' << c.p_value << '\n';
    }
    return out.str();
}

ShiftReport shift_report(const EmbeddingTable& before, const EmbeddingTable& after, std::span<const int> labels,
                         std::span<const std::size_t> k_list, Metric metric) {
    const std::size_t n = before.size();
    if (labels.size() != n) throw DimensionError("shift_report: one label per user required");
    if (after.size() != n) {
        throw DataError("shift_report: periods hold " + std::to_string(n) + " and " + std::to_string(after.size()) +
                        " users");
    }
    std::unordered_map<std::string, Eigen::Index> where;
    for (std::size_t i = 0; i < after.size(); ++i) where.emplace(after.ids[i], static_cast<Eigen::Index>(i));
    Matrix aligned(static_cast<Eigen::Index>(n), after.values.cols());
    for (std::size_t i = 0; i < n; ++i) {
        auto it = where.find(before.ids[i]);
        if (it == where.end()) throw DataError("shift_report: user '" + before.ids[i] + "' missing after the event");
        aligned.row(static_cast<Eigen::Index>(i)) = after.values.row(it->second);
    }
    const std::set<int> groups(labels.begin(), labels.end());

    ShiftReport report;
    report.metric = metric;
    for (std::size_t k : k_list) {
        const GroupShares sb = knn_group_shares(before.values, labels, k, metric);
        const GroupShares sa = knn_group_shares(aligned, labels, k, metric);
        for (int g : groups) {
            for (const char* share : {"in_group", "out_group"}) {
                const bool in = share[0] == 'i';
                std::vector<double> xb, xa;
                for (std::size_t i = 0; i < n; ++i) {
                    if (labels[i] != g) continue;
                    xb.push_back(in ? sb.in_group[i] : sb.out_group[i]);
                    xa.push_back(in ? sa.in_group[i] : sa.out_group[i]);
                }
                ShiftCell cell;
                cell.group = g;
                cell.share = share;
                cell.k = k;
                cell.before = mean_of(xb);
                cell.after = mean_of(xa);
                if (cell.before != 0.0) cell.pct_change = (cell.after - cell.before) / std::abs(cell.before) * 100.0;
                cell.p_value = xb.size() >= 2 ? welch_test(xb, xa).p_value : 1.0;
                report.cells.push_back(cell);
            }
        }
    }
    return report;
}

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t restarts,
                    std::size_t max_iter) {
    const Eigen::Index n = points.rows();
    if (k == 0) throw ConfigError("kmeans: k must be positive");
    if (static_cast<std::size_t>(n) < k) {
        throw ConfigError("kmeans: " + std::to_string(n) + " points cannot form " + std::to_string(k) + " clusters");
    }
    const auto kk = static_cast<Eigen::Index>(k);
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < std::max<std::size_t>(1, restarts); ++r) {
        std::mt19937_64 rng(derive_seed(seed, r));
        Matrix c(kk, points.cols());
        std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
        c.row(0) = points.row(first(rng));
        Vector d2(n);
        for (Eigen::Index i = 0; i < n; ++i) d2(i) = (points.row(i) - c.row(0)).squaredNorm();
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (Eigen::Index m = 1; m < kk; ++m) {
            const double total = d2.sum();
            Eigen::Index pick = 0;
            if (total > 0.0) {
                const double target = unit(rng) * total;
                double acc = 0.0;
                pick = n - 1;
                for (Eigen::Index i = 0; i < n; ++i) {
                    acc += d2(i);
                    if (acc >= target && d2(i) > 0.0) {
                        pick = i;
                        break;
                    }
                }
            } else {
                pick = first(rng);
            }
            c.row(m) = points.row(pick);
            for (Eigen::Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (points.row(i) - c.row(m)).squaredNorm());
        }

        std::vector<int> assign(static_cast<std::size_t>(n), -1);
        double inertia = 0.0;
        for (std::size_t it = 0; it < max_iter; ++it) {
            bool changed = false;
            inertia = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                int arg = 0;
                double bestd = std::numeric_limits<double>::infinity();
                for (Eigen::Index m = 0; m < kk; ++m) {
                    const double dd = (points.row(i) - c.row(m)).squaredNorm();
                    if (dd < bestd) {
                        bestd = dd;
                        arg = static_cast<int>(m);
                    }
                }
                inertia += bestd;
                if (assign[static_cast<std::size_t>(i)] != arg) {
                    assign[static_cast<std::size_t>(i)] = arg;
                    changed = true;
                }
            }
            if (!changed) break;
            Matrix sums = Matrix::Zero(kk, points.cols());
            std::vector<std::size_t> counts(k, 0);
            for (Eigen::Index i = 0; i < n; ++i) {
                sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
                ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
            }
            for (Eigen::Index m = 0; m < kk; ++m) {
                if (counts[static_cast<std::size_t>(m)] > 0) {
                    c.row(m) = sums.row(m) / static_cast<double>(counts[static_cast<std::size_t>(m)]);
                    continue;
                }
                // Empty cluster: restart it at the point farthest from its centre.
                Eigen::Index far = 0;
                double fard = -1.0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double dd = (points.row(i) - c.row(assign[static_cast<std::size_t>(i)])).squaredNorm();
                    if (dd > fard) {
                        fard = dd;
                        far = i;
                    }
                }
                c.row(m) = points.row(far);
            }
        }
        if (inertia < best.inertia) {
            best.inertia = inertia;
            best.assignment = assign;
            best.centroids = c;
        }
    }
    return best;
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size()) throw DimensionError("adjusted_rand_index: labelings differ in length");
    const double n = static_cast<double>(a.size());
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> ra, rb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        joint[{a[i], b[i]}] += 1.0;
        ra[a[i]] += 1.0;
        rb[b[i]] += 1.0;
    }
    double sum_joint = 0.0, sum_a = 0.0, sum_b = 0.0;
    for (const auto& [_, c] : joint) sum_joint += comb2(c);
    for (const auto& [_, c] : ra) sum_a += comb2(c);
    for (const auto& [_, c] : rb) sum_b += comb2(c);
    const double expected = sum_a * sum_b / comb2(n);
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) return 1.0;
    return (sum_joint - expected) / (max_index - expected);
}

double purity(std::span<const int> clusters, std::span<const int> labels) {
    if (clusters.size() != labels.size()) throw DimensionError("purity: labelings differ in length");
    if (clusters.empty()) return 0.0;
    std::map<int, std::map<int, std::size_t>> table;
    for (std::size_t i = 0; i < clusters.size(); ++i) ++table[clusters[i]][labels[i]];
    std::size_t hit = 0;
    for (const auto& [_, row] : table) {
        std::size_t top = 0;
        for (const auto& [__, c] : row) top = std::max(top, c);
        hit += top;
    }
    return static_cast<double>(hit) / static_cast<double>(clusters.size());
}

Agreement cluster_agreement(const Matrix& embeddings, std::span<const int> true_labels, std::size_t n_clusters,
                            std::uint64_t seed) {
    if (n_clusters < 2) throw ConfigError("cluster_agreement: n_clusters must be at least 2");
    if (static_cast<std::size_t>(embeddings.rows()) != true_labels.size()) {
        throw DimensionError("cluster_agreement: one label per embedding required");
    }
    const KMeansResult km = kmeans(embeddings, n_clusters, seed);
    return {adjusted_rand_index(km.assignment, true_labels), purity(km.assignment, true_labels)};
}

void export_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
    if (static_cast<std::size_t>(table.values.rows()) != table.ids.size()) {
        throw DimensionError("export_embeddings: ids and rows differ");
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write embeddings to '" + path.string() + "'");
    out << "user_id";
    for (Eigen::Index j = 0; j < table.values.cols(); ++j) out << ",e" << j;
    out << '\n';
    char buf[64];
    for (std::size_t i = 0; i < table.ids.size(); ++i) {
        if (table.ids[i].find_first_of(",\"\n") != std::string::npos) {
            throw DataError("export_embeddings: user id '" + table.ids[i] + "' contains a CSV delimiter");
        }
        out << table.ids[i];
        for (Eigen::Index j = 0; j < table.values.cols(); ++j) {
            auto res = std::to_chars(buf, buf + sizeof buf, table.values(static_cast<Eigen::Index>(i), j));
            out << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
        }
        out << '\n';
    }
    if (!out) throw IoError("failed writing embeddings to '" + path.string() + "'");
}

EmbeddingTable import_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read embeddings from '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("embeddings file is empty", 1);
    const auto dim = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ','));
    if (line.rfind("user_id", 0) != 0) throw ParseError("embeddings header must start with user_id", 1);
    EmbeddingTable table;
    std::vector<double> values;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::size_t start = 0;
        std::size_t comma = line.find(',');
        table.ids.push_back(line.substr(0, comma));
        Eigen::Index fields = 0;
        while (comma != std::string::npos) {
            start = comma + 1;
            comma = line.find(',', start);
            const std::size_t stop = comma == std::string::npos ? line.size() : comma;
            double v = 0.0;
            auto res = std::from_chars(line.data() + start, line.data() + stop, v);
            if (res.ec != std::errc() || res.ptr != line.data() + stop) {
                throw ParseError("bad number '" + line.substr(start, stop - start) + "'", line_no);
            }
            values.push_back(v);
            ++fields;
        }
        if (fields != dim) {
            throw ParseError("expected " + std::to_string(dim) + " values, found " + std::to_string(fields), line_no);
        }
    }
    table.values = Matrix(static_cast<Eigen::Index>(table.ids.size()), dim);
    if (!values.empty()) {
        table.values = Eigen::Map<const Matrix>(values.data(), static_cast<Eigen::Index>(table.ids.size()), dim);
    }
    return table;
}

}  // namespace somer
