#include "somer/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "somer/errors.hpp"

namespace somer {

using nlohmann::json;

std::string to_string(InteractionKind k) {
    switch (k) {
        case InteractionKind::share: return "share";
        case InteractionKind::url: return "url";
        case InteractionKind::hashtag_seq: return "hashtag_seq";
        case InteractionKind::text_vec: return "text_vec";
    }
    return "share";
}

InteractionKind interaction_kind_from_string(const std::string& name) {
    if (name == "share") return InteractionKind::share;
    if (name == "url") return InteractionKind::url;
    if (name == "hashtag_seq") return InteractionKind::hashtag_seq;
    if (name == "text_vec") return InteractionKind::text_vec;
    throw ConfigError("unknown interaction kind '" + name + "'");
}

InteractionLog load_interactions(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read interaction log '" + path.string() + "'");
    InteractionLog log;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
        }
        try {
            Interaction r;
            r.user_id = j.at("user").get<std::string>();
            r.kind = interaction_kind_from_string(j.at("kind").get<std::string>());
            r.item_id = j.value("item", std::string());
            if (r.kind == InteractionKind::hashtag_seq) {
                r.tokens = j.at("payload").get<std::vector<std::string>>();
            } else if (r.kind == InteractionKind::text_vec) {
                r.vector = j.at("payload").get<std::vector<double>>();
            } else if (r.item_id.empty()) {
                throw ParseError("share/url records need an item", line_no);
            }
            log.records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw ParseError(std::string("bad interaction record: ") + e.what(), line_no);
        } catch (const ConfigError& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return log;
}

void write_interactions(const std::filesystem::path& path, const InteractionLog& log) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write interaction log '" + path.string() + "'");
    for (const auto& r : log.records) {
        json j{{"user", r.user_id}, {"kind", to_string(r.kind)}};
        if (!r.item_id.empty()) j["item"] = r.item_id;
        if (r.kind == InteractionKind::hashtag_seq) j["payload"] = r.tokens;
        if (r.kind == InteractionKind::text_vec) j["payload"] = r.vector;
        out << j.dump() << '\n';
    }
}

json DetectionResult::to_json() const {
    json pairs = json::array();
    for (const auto& p : linked) pairs.push_back({{"a", p.a}, {"b", p.b}, {"score", p.score}});
    return {{"flagged", std::vector<std::string>(flagged.begin(), flagged.end())},
            {"threshold", threshold},
            {"pair_count", pair_count},
            {"linked_pairs", pairs},
            {"warnings", warnings}};
}

double percentile(std::vector<double> values, double pct) {
    if (values.empty()) throw DataError("percentile of an empty set");
    if (!(pct >= 0.0 && pct <= 100.0)) throw ConfigError("percentile must lie in [0, 100]");
    std::sort(values.begin(), values.end());
    const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

DetectionResult coshare_flags(const InteractionLog& log, InteractionKind kind, double pct) {
    if (kind != InteractionKind::share && kind != InteractionKind::url) {
        throw ConfigError("coshare_flags works on share or url interactions");
    }
    std::map<std::string, std::map<std::string, double>> counts;  // user -> item -> count
    for (const auto& r : log.records) {
        if (r.kind == kind) counts[r.user_id][r.item_id] += 1.0;
    }
    if (counts.empty()) throw DataError("coshare_flags: log has no " + to_string(kind) + " interactions");
    if (counts.size() < 2) throw DataError("coshare_flags: need at least 2 users with " + to_string(kind) + " interactions");

    std::vector<std::string> users;
    std::vector<double> sq;
    std::unordered_map<std::string, std::vector<std::pair<std::size_t, double>>> by_item;
    for (const auto& [user, items] : counts) {
        const std::size_t u = users.size();
        users.push_back(user);
        double s = 0.0;
        for (const auto& [item, c] : items) {
            s += c * c;
            by_item[item].push_back({u, c});
        }
        sq.push_back(s);
    }
    // Only pairs that co-share an item have a nonzero dot product.
    std::map<std::pair<std::size_t, std::size_t>, double> dots;
    for (const auto& [_, holders] : by_item) {
        for (std::size_t i = 0; i < holders.size(); ++i) {
            for (std::size_t j = i + 1; j < holders.size(); ++j) {
                dots[{holders[i].first, holders[j].first}] += holders[i].second * holders[j].second;
            }
        }
    }

    DetectionResult out;
    std::vector<double> sims;
    std::vector<PairScore> pairs;
    for (const auto& [p, dot] : dots) {
        const double sim = dot / std::sqrt(sq[p.first] * sq[p.second]);
        sims.push_back(sim);
        pairs.push_back({users[p.first], users[p.second], sim});
    }
    out.pair_count = sims.size();
    if (sims.empty()) {
        out.warnings.push_back("no user pair shares an item; every similarity ties at 0 and nobody is flagged");
        return out;
    }
    out.threshold = percentile(sims, pct);
    for (const auto& p : pairs) {
        if (p.score >= out.threshold) {
            out.linked.push_back(p);
            out.flagged.insert(p.a);
            out.flagged.insert(p.b);
        }
    }
    return out;
}

DetectionResult hashtag_sequence_flags(const InteractionLog& log, std::size_t min_len) {
    if (min_len == 0) throw ConfigError("hashtag_sequence_flags: min_len must be positive");
    std::map<std::vector<std::string>, std::set<std::string>> runs;
    for (const auto& r : log.records) {
        if (r.kind != InteractionKind::hashtag_seq || r.tokens.size() < min_len) continue;
        for (std::size_t s = 0; s + min_len <= r.tokens.size(); ++s) {
            runs[std::vector<std::string>(r.tokens.begin() + static_cast<std::ptrdiff_t>(s),
                                          r.tokens.begin() + static_cast<std::ptrdiff_t>(s + min_len))]
                .insert(r.user_id);
        }
    }
    DetectionResult out;
    out.threshold = static_cast<double>(min_len);
    std::set<std::pair<std::string, std::string>> linked;
    for (const auto& [_, holders] : runs) {
        if (holders.size() < 2) continue;
        for (auto a = holders.begin(); a != holders.end(); ++a) {
            for (auto b = std::next(a); b != holders.end(); ++b) linked.insert({*a, *b});
        }
    }
    out.pair_count = linked.size();
    for (const auto& [a, b] : linked) {
        out.linked.push_back({a, b, 1.0});
        out.flagged.insert(a);
        out.flagged.insert(b);
    }
    return out;
}

std::pair<std::vector<std::string>, Matrix> mean_text_vectors(const InteractionLog& log) {
    std::map<std::string, std::pair<RowVector, double>> sums;
    Eigen::Index dim = -1;
    for (const auto& r : log.records) {
        if (r.kind != InteractionKind::text_vec) continue;
        const auto d = static_cast<Eigen::Index>(r.vector.size());
        if (dim < 0) dim = d;
        if (d != dim) {
            throw DataError("text vectors disagree in dimension (" + std::to_string(dim) + " vs " +
                            std::to_string(d) + ")");
        }
        auto& [sum, n] = sums[r.user_id];
        if (sum.size() == 0) sum = RowVector::Zero(d);
        sum += Eigen::Map<const RowVector>(r.vector.data(), d);
        n += 1.0;
    }
    std::vector<std::string> ids;
    Matrix m(static_cast<Eigen::Index>(sums.size()), std::max<Eigen::Index>(dim, 0));
    for (const auto& [id, acc] : sums) {
        m.row(static_cast<Eigen::Index>(ids.size())) = acc.first / acc.second;
        ids.push_back(id);
    }
    return {ids, m};
}

DetectionResult text_similarity_flags(std::span<const std::string> ids, const Matrix& vectors, double threshold) {
    const auto n = static_cast<std::size_t>(vectors.rows());
    if (ids.size() != n) throw DimensionError("text_similarity_flags: one id per vector required");
    if (n < 2) throw DataError("text_similarity_flags: need at least 2 users");
    DetectionResult out;
    out.threshold = threshold;
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        norms[i] = vectors.row(static_cast<Eigen::Index>(i)).norm();
        if (norms[i] == 0.0) out.warnings.push_back("user '" + ids[i] + "' has a zero text vector and is skipped");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (norms[i] == 0.0) continue;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (norms[j] == 0.0) continue;
            ++out.pair_count;
            const double cos = vectors.row(static_cast<Eigen::Index>(i)).dot(vectors.row(static_cast<Eigen::Index>(j))) /
                               (norms[i] * norms[j]);
            if (cos >= threshold) {
                out.linked.push_back({ids[i], ids[j], cos});
                out.flagged.insert(ids[i]);
                out.flagged.insert(ids[j]);
            }
        }
    }
    return out;
}

DetectionScore score_detection(const std::set<std::string>& flagged, const std::map<std::string, int>& labels) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& [id, label] : labels) {
        const bool hit = flagged.count(id) > 0;
        if (hit && label == 1) ++tp;
        if (hit && label != 1) ++fp;
        if (!hit && label == 1) ++fn;
    }
    for (const auto& id : flagged) {
        if (!labels.count(id)) throw DataError("score_detection: flagged user '" + id + "' has no label");
    }
    DetectionScore s;
    if (tp + fp > 0) s.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp + fn > 0) s.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

}  // namespace somer
