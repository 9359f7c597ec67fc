#include "somer/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_map>

namespace somer {

using nlohmann::json;

void EdgeList::add(const std::string& a, const std::string& b) {
    if (a == b) throw DataError("edge list: self-pair for user '" + a + "'");
    pairs_.insert(a < b ? std::make_pair(a, b) : std::make_pair(b, a));
}

bool EdgeList::contains(const std::string& a, const std::string& b) const {
    return pairs_.count(a < b ? std::make_pair(a, b) : std::make_pair(b, a)) != 0;
}

namespace {

std::vector<double> number_array(const json& j, const char* field, std::size_t line) {
    if (!j.is_array()) throw ParseError(std::string("field '") + field + "' must be an array of numbers", line);
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& x : j) {
        if (!x.is_number()) throw ParseError(std::string("field '") + field + "' must contain only numbers", line);
        out.push_back(x.get<double>());
    }
    return out;
}

std::string string_field(const json& rec, const char* field, std::size_t line) {
    auto it = rec.find(field);
    if (it == rec.end() || !it->is_string()) {
        throw ParseError(std::string("missing string field '") + field + "'", line);
    }
    return it->get<std::string>();
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus '" + path.string() + "'");

    Corpus corpus;
    std::set<std::string> seen_users;
    std::vector<std::pair<std::size_t, std::pair<std::string, std::string>>> raw_edges;
    bool have_dim = false;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        json rec;
        try {
            rec = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), line);
        }
        if (!rec.is_object()) throw ParseError("record is not an object", line);
        const std::string kind = string_field(rec, "kind", line);
        if (kind == "post") {
            PostEvent post;
            post.user_id = string_field(rec, "user", line);
            auto t = rec.find("t");
            if (t == rec.end() || !t->is_number()) throw ParseError("post needs numeric field 't'", line);
            post.timestamp = t->get<double>();
            if (!std::isfinite(post.timestamp)) throw ParseError("post timestamp is not finite", line);
            auto x = rec.find("x");
            if (x == rec.end()) throw ParseError("post needs field 'x'", line);
            post.features = number_array(*x, "x", line);
            if (!have_dim) {
                corpus.feature_dim = post.features.size();
                have_dim = true;
            } else if (post.features.size() != corpus.feature_dim) {
                throw ParseError("feature vector length " + std::to_string(post.features.size()) +
                                     " differs from corpus length " + std::to_string(corpus.feature_dim),
                                 line);
            }
            seen_users.insert(post.user_id);
            corpus.posts.push_back(std::move(post));
        } else if (kind == "profile") {
            const std::string user = string_field(rec, "user", line);
            Profile profile;
            if (auto d = rec.find("dense"); d != rec.end()) {
                profile.dense = number_array(*d, "dense", line);
            } else if (auto tk = rec.find("tokens"); tk != rec.end()) {
                if (!tk->is_array()) throw ParseError("field 'tokens' must be an array of strings", line);
                for (const auto& s : *tk) {
                    if (!s.is_string()) throw ParseError("field 'tokens' must contain only strings", line);
                    profile.tokens.push_back(s.get<std::string>());
                }
            } else {
                throw ParseError("profile needs 'dense' or 'tokens'", line);
            }
            if (!corpus.profiles.emplace(user, std::move(profile)).second) {
                throw DataError("line " + std::to_string(line) + ": duplicate profile for user '" + user + "'");
            }
            seen_users.insert(user);
        } else if (kind == "edge") {
            raw_edges.push_back({line, {string_field(rec, "u", line), string_field(rec, "v", line)}});
        } else {
            throw ParseError("unknown record kind '" + kind + "'", line);
        }
    }

    for (const auto& [ln, e] : raw_edges) {
        for (const auto* id : {&e.first, &e.second}) {
            if (!seen_users.count(*id)) {
                throw DataError("line " + std::to_string(ln) + ": edge refers to unknown user '" + *id + "'");
            }
        }
        if (e.first == e.second) throw DataError("line " + std::to_string(ln) + ": self edge for '" + e.first + "'");
        corpus.edges.add(e.first, e.second);
    }

    std::stable_sort(corpus.posts.begin(), corpus.posts.end(), [](const PostEvent& a, const PostEvent& b) {
        if (a.user_id != b.user_id) return a.user_id < b.user_id;
        return a.timestamp < b.timestamp;
    });
    return corpus;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write corpus '" + path.string() + "'");
    for (const auto& [user, profile] : corpus.profiles) {
        json rec{{"kind", "profile"}, {"user", user}};
        if (!profile.tokens.empty()) {
            rec["tokens"] = profile.tokens;
        } else {
            rec["dense"] = profile.dense;
        }
        out << rec.dump() << '\n';
    }
    for (const auto& p : corpus.posts) {
        out << json{{"kind", "post"}, {"user", p.user_id}, {"t", p.timestamp}, {"x", p.features}}.dump() << '\n';
    }
    for (const auto& [a, b] : corpus.edges.pairs()) {
        out << json{{"kind", "edge"}, {"u", a}, {"v", b}}.dump() << '\n';
    }
    if (!out) throw IoError("failed writing corpus '" + path.string() + "'");
}

RowVector PcaModel::project(const RowVector& x) const {
    if (x.size() != mean.size()) {
        throw DimensionError("PCA projection: input length " + std::to_string(x.size()) + ", model expects " +
                             std::to_string(mean.size()));
    }
    return (components * (x - mean).transpose()).transpose();
}

PcaModel fit_pca(const Matrix& features, std::size_t n_components) {
    const auto n = static_cast<std::size_t>(features.rows());
    const auto dim = static_cast<std::size_t>(features.cols());
    if (n_components == 0) throw ConfigError("fit_pca: n_components must be positive");
    if (n < n_components || dim < n_components) {
        throw DataError("fit_pca: insufficient data for " + std::to_string(n_components) + " components (" +
                        std::to_string(n) + " rows, " + std::to_string(dim) + " columns)");
    }
    PcaModel model;
    model.mean = features.colwise().mean();
    Eigen::MatrixXd centered = (features.rowwise() - model.mean).eval();
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
    const Eigen::MatrixXd& v = svd.matrixV();
    const Eigen::VectorXd& s = svd.singularValues();
    const auto k = static_cast<Eigen::Index>(n_components);
    model.components = v.leftCols(k).transpose();
    for (Eigen::Index c = 0; c < k; ++c) {
        Eigen::Index arg = 0;
        model.components.row(c).cwiseAbs().maxCoeff(&arg);
        if (model.components(c, arg) < 0) model.components.row(c) *= -1.0;
        const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
        model.explained_variance.push_back(s(c) * s(c) / denom);
    }
    return model;
}

std::vector<TripletEvent> window_aggregate(std::span<const PostEvent> events, const PcaModel* pca, double window_days,
                                           double origin, AggregateMode mode, bool drop_zero_values) {
    if (!(window_days > 0)) throw ConfigError("window_aggregate: window_days must be positive");
    std::vector<TripletEvent> out;
    if (events.empty()) return out;

    const std::size_t dim = pca ? pca->n_components() : events.front().features.size();
    RowVector acc = RowVector::Zero(static_cast<Eigen::Index>(dim));
    long long current = 0;
    std::size_t count = 0;

    auto flush = [&] {
        if (count == 0) return;
        if (mode == AggregateMode::mean) acc /= static_cast<double>(count);
        const double mid = origin + static_cast<double>(current) * window_days + window_days / 2.0;
        for (std::size_t f = 0; f < dim; ++f) {
            const double v = acc(static_cast<Eigen::Index>(f));
            if (drop_zero_values && v == 0.0) continue;
            out.push_back(TripletEvent{mid, static_cast<int>(f), v});
        }
        acc.setZero();
        count = 0;
    };

    for (const auto& e : events) {
        const auto w = static_cast<long long>(std::floor((e.timestamp - origin) / window_days));
        if (count > 0 && w != current) flush();
        current = w;
        const Eigen::Map<const RowVector> raw(e.features.data(), static_cast<Eigen::Index>(e.features.size()));
        if (pca) {
            acc += pca->project(raw);
        } else {
            if (e.features.size() != dim) throw DimensionError("window_aggregate: inconsistent feature length");
            acc += raw;
        }
        ++count;
    }
    flush();
    return out;
}

std::vector<TripletEvent> cap_recent(std::vector<TripletEvent> triplets, std::size_t max_len) {
    if (triplets.size() <= max_len) return triplets;
    std::stable_sort(triplets.begin(), triplets.end(),
                     [](const TripletEvent& a, const TripletEvent& b) { return a.t < b.t; });
    triplets.erase(triplets.begin(), triplets.end() - static_cast<std::ptrdiff_t>(max_len));
    return triplets;
}

std::size_t Dataset::index_of(const std::string& user_id) const {
    auto it = std::lower_bound(users.begin(), users.end(), user_id,
                               [](const UserRecord& u, const std::string& id) { return u.user_id < id; });
    if (it == users.end() || it->user_id != user_id) throw DataError("unknown user '" + user_id + "'");
    return static_cast<std::size_t>(it - users.begin());
}

namespace {

BuildResult assemble(const Corpus& corpus, Preprocessor pre, bool fit) {
    const PipelineOptions& opt = pre.options;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) into corpus.posts per user
    for (std::size_t i = 0; i < corpus.posts.size();) {
        std::size_t j = i;
        while (j < corpus.posts.size() && corpus.posts[j].user_id == corpus.posts[i].user_id) ++j;
        ranges.emplace_back(i, j);
        i = j;
    }

    BuildResult result;
    std::vector<std::pair<std::size_t, std::size_t>> kept;
    for (const auto& r : ranges) {
        if (r.second - r.first >= opt.min_posts) {
            kept.push_back(r);
        } else {
            ++result.dropped_users;
        }
    }

    if (fit) {
        pre.time_origin = 0.0;
        if (!corpus.posts.empty()) {
            pre.time_origin = std::numeric_limits<double>::infinity();
            for (const auto& p : corpus.posts) pre.time_origin = std::min(pre.time_origin, p.timestamp);
        }
        pre.pca.reset();
        if (opt.use_pca && !kept.empty()) {
            std::size_t rows = 0;
            for (const auto& r : kept) rows += r.second - r.first;
            Matrix feats(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(corpus.feature_dim));
            Eigen::Index at = 0;
            for (const auto& r : kept) {
                for (std::size_t i = r.first; i < r.second; ++i) {
                    const auto& x = corpus.posts[i].features;
                    feats.row(at++) = Eigen::Map<const RowVector>(x.data(), static_cast<Eigen::Index>(x.size()));
                }
            }
            pre.pca = fit_pca(feats, opt.n_components);
        }
    } else if (opt.use_pca && !pre.pca) {
        throw ConfigError("preprocessor requires a fitted PCA model");
    }

    Dataset& ds = result.dataset;
    ds.num_features = opt.use_pca ? opt.n_components : corpus.feature_dim;

    bool any_tokens = false;
    bool any_dense = false;
    std::size_t dense_dim = 0;
    for (const auto& [user, p] : corpus.profiles) {
        if (!p.tokens.empty()) {
            any_tokens = true;
        } else {
            if (any_dense && p.dense.size() != dense_dim) {
                throw DataError("profile of user '" + user + "' has length " + std::to_string(p.dense.size()) +
                                ", expected " + std::to_string(dense_dim));
            }
            any_dense = true;
            dense_dim = p.dense.size();
        }
    }
    if (any_tokens && any_dense) throw DataError("profile mode must be uniform across the corpus");
    ds.profile_mode = any_tokens ? ProfileMode::tokens : ProfileMode::dense;
    ds.profile_dim = any_tokens ? 0 : std::max<std::size_t>(dense_dim, 1);

    const PcaModel* pca = pre.pca ? &*pre.pca : nullptr;
    for (const auto& r : kept) {
        UserRecord user;
        user.user_id = corpus.posts[r.first].user_id;
        std::span<const PostEvent> events(corpus.posts.data() + r.first, r.second - r.first);
        user.triplets = cap_recent(
            window_aggregate(events, pca, opt.window_days, pre.time_origin, opt.mode, opt.drop_zero_values),
            opt.max_seq_len);
        if (user.triplets.empty()) {
            ++result.dropped_users;
            continue;
        }
        if (auto it = corpus.profiles.find(user.user_id); it != corpus.profiles.end()) {
            user.profile = it->second;
        } else if (ds.profile_mode == ProfileMode::tokens) {
            throw DataError("user '" + user.user_id + "' has no profile tokens");
        }
        if (ds.profile_mode == ProfileMode::dense && user.profile.dense.empty()) {
            user.profile.dense.assign(ds.profile_dim, 0.0);
        }
        ds.users.push_back(std::move(user));
    }
    result.preprocessor = std::move(pre);
    return result;
}

double signed_log1p(double x) { return x >= 0 ? std::log1p(x) : -std::log1p(-x); }

}  // namespace

BuildResult build_dataset(const Corpus& corpus, const PipelineOptions& options) {
    Preprocessor pre;
    pre.options = options;
    return assemble(corpus, std::move(pre), true);
}

BuildResult build_dataset(const Corpus& corpus, const Preprocessor& preprocessor) {
    return assemble(corpus, preprocessor, false);
}

Normalized normalize(const Dataset& dataset, const NormalizationStats* given) {
    Normalized out{dataset, {}};
    NormalizationStats& st = out.stats;
    const std::size_t nf = dataset.num_features;

    if (given) {
        st = *given;
        if (st.feature_mean.size() != nf || st.feature_std.size() != nf) {
            throw DimensionError("normalize: stats cover " + std::to_string(st.feature_mean.size()) +
                                 " features, dataset has " + std::to_string(nf));
        }
        if (dataset.profile_mode == ProfileMode::dense && st.profile_mean.size() != dataset.profile_dim) {
            throw DimensionError("normalize: stats cover " + std::to_string(st.profile_mean.size()) +
                                 " profile dims, dataset has " + std::to_string(dataset.profile_dim));
        }
    } else {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        std::vector<double> sum(nf, 0.0), sq(nf, 0.0);
        std::vector<std::size_t> cnt(nf, 0);
        for (const auto& u : dataset.users) {
            for (const auto& tr : u.triplets) {
                if (tr.f < 0 || static_cast<std::size_t>(tr.f) >= nf) {
                    throw DataError("normalize: feature index " + std::to_string(tr.f) + " out of range");
                }
                lo = std::min(lo, tr.t);
                hi = std::max(hi, tr.t);
                sum[static_cast<std::size_t>(tr.f)] += tr.v;
                ++cnt[static_cast<std::size_t>(tr.f)];
            }
        }
        if (!std::isfinite(lo)) {
            lo = 0.0;
            hi = 1.0;
        }
        st.time_min = lo;
        st.time_max = hi > lo ? hi : lo + 1.0;
        st.feature_mean.assign(nf, 0.0);
        st.feature_std.assign(nf, 1.0);
        for (std::size_t f = 0; f < nf; ++f) {
            if (cnt[f]) st.feature_mean[f] = sum[f] / static_cast<double>(cnt[f]);
        }
        for (const auto& u : dataset.users) {
            for (const auto& tr : u.triplets) {
                const double d = tr.v - st.feature_mean[static_cast<std::size_t>(tr.f)];
                sq[static_cast<std::size_t>(tr.f)] += d * d;
            }
        }
        for (std::size_t f = 0; f < nf; ++f) {
            if (cnt[f]) {
                const double sd = std::sqrt(sq[f] / static_cast<double>(cnt[f]));
                st.feature_std[f] = sd > 0 ? sd : 1.0;
            }
        }

        if (dataset.profile_mode == ProfileMode::dense) {
            const std::size_t d = dataset.profile_dim;
            st.profile_mean.assign(d, 0.0);
            st.profile_std.assign(d, 1.0);
            if (!dataset.users.empty()) {
                std::vector<double> ps(d, 0.0), pq(d, 0.0);
                for (const auto& u : dataset.users) {
                    for (std::size_t k = 0; k < d; ++k) ps[k] += signed_log1p(u.profile.dense[k]);
                }
                const double n = static_cast<double>(dataset.users.size());
                for (std::size_t k = 0; k < d; ++k) st.profile_mean[k] = ps[k] / n;
                for (const auto& u : dataset.users) {
                    for (std::size_t k = 0; k < d; ++k) {
                        const double dv = signed_log1p(u.profile.dense[k]) - st.profile_mean[k];
                        pq[k] += dv * dv;
                    }
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double sd = std::sqrt(pq[k] / n);
                    st.profile_std[k] = sd > 0 ? sd : 1.0;
                }
            }
        } else {
            std::set<std::string> vocab;
            for (const auto& u : dataset.users) vocab.insert(u.profile.tokens.begin(), u.profile.tokens.end());
            st.vocab.assign(vocab.begin(), vocab.end());
        }
    }

    std::unordered_map<std::string, int> token_row;
    for (std::size_t i = 0; i < st.vocab.size(); ++i) token_row.emplace(st.vocab[i], static_cast<int>(i));

    const double span = st.time_max - st.time_min;
    for (auto& u : out.dataset.users) {
        for (auto& tr : u.triplets) {
            if (tr.f < 0 || static_cast<std::size_t>(tr.f) >= nf) {
                throw DataError("normalize: feature index " + std::to_string(tr.f) + " out of range");
            }
            tr.t = std::clamp((tr.t - st.time_min) / span, 0.0, 1.0);
            const auto f = static_cast<std::size_t>(tr.f);
            tr.v = (tr.v - st.feature_mean[f]) / st.feature_std[f];
        }
        if (dataset.profile_mode == ProfileMode::dense) {
            if (u.profile.dense.size() != dataset.profile_dim) {
                throw DimensionError("normalize: profile of '" + u.user_id + "' has wrong length");
            }
            for (std::size_t k = 0; k < dataset.profile_dim; ++k) {
                u.profile.dense[k] = (signed_log1p(u.profile.dense[k]) - st.profile_mean[k]) / st.profile_std[k];
            }
        } else {
            u.profile.token_ids.clear();
            for (const auto& tok : u.profile.tokens) {
                if (auto it = token_row.find(tok); it != token_row.end()) u.profile.token_ids.push_back(it->second);
            }
        }
    }
    return out;
}

json to_json(const PcaModel& pca) {
    std::vector<double> mean(pca.mean.data(), pca.mean.data() + pca.mean.size());
    std::vector<double> comps(pca.components.data(), pca.components.data() + pca.components.size());
    return json{{"mean", mean},
                {"rows", pca.components.rows()},
                {"cols", pca.components.cols()},
                {"components", comps},
                {"explained_variance", pca.explained_variance}};
}

PcaModel pca_from_json(const json& j) {
    PcaModel m;
    const auto mean = j.at("mean").get<std::vector<double>>();
    m.mean = Eigen::Map<const RowVector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto comps = j.at("components").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(comps.size()) != rows * cols) throw DataError("PCA sidecar: component size mismatch");
    m.components = Eigen::Map<const Matrix>(comps.data(), rows, cols);
    m.explained_variance = j.at("explained_variance").get<std::vector<double>>();
    return m;
}

json to_json(const PipelineOptions& o) {
    return json{{"use_pca", o.use_pca},
                {"n_components", o.n_components},
                {"window_days", o.window_days},
                {"mode", o.mode == AggregateMode::sum ? "sum" : "mean"},
                {"drop_zero_values", o.drop_zero_values},
                {"min_posts", o.min_posts},
                {"max_seq_len", o.max_seq_len}};
}

PipelineOptions pipeline_options_from_json(const json& j, PipelineOptions o) {
    o.use_pca = j.value("use_pca", o.use_pca);
    o.n_components = j.value("n_components", o.n_components);
    o.window_days = j.value("window_days", o.window_days);
    const std::string mode = j.value("mode", std::string(o.mode == AggregateMode::sum ? "sum" : "mean"));
    if (mode != "sum" && mode != "mean") throw ConfigError("aggregation mode must be 'sum' or 'mean'");
    o.mode = mode == "sum" ? AggregateMode::sum : AggregateMode::mean;
    o.drop_zero_values = j.value("drop_zero_values", o.drop_zero_values);
    o.min_posts = j.value("min_posts", o.min_posts);
    o.max_seq_len = j.value("max_seq_len", o.max_seq_len);
    return o;
}

json to_json(const Preprocessor& p) {
    json j{{"options", to_json(p.options)}, {"time_origin", p.time_origin}};
    if (p.pca) j["pca"] = to_json(*p.pca);
    return j;
}

Preprocessor preprocessor_from_json(const json& j) {
    Preprocessor p;
    p.options = pipeline_options_from_json(j.at("options"));
    p.time_origin = j.at("time_origin").get<double>();
    if (j.contains("pca")) p.pca = pca_from_json(j.at("pca"));
    return p;
}

json to_json(const NormalizationStats& s) {
    return json{{"time_min", s.time_min},       {"time_max", s.time_max},       {"feature_mean", s.feature_mean},
                {"feature_std", s.feature_std}, {"profile_mean", s.profile_mean}, {"profile_std", s.profile_std},
                {"vocab", s.vocab}};
}

NormalizationStats stats_from_json(const json& j) {
    NormalizationStats s;
    s.time_min = j.at("time_min").get<double>();
    s.time_max = j.at("time_max").get<double>();
    s.feature_mean = j.at("feature_mean").get<std::vector<double>>();
    s.feature_std = j.at("feature_std").get<std::vector<double>>();
    s.profile_mean = j.at("profile_mean").get<std::vector<double>>();
    s.profile_std = j.at("profile_std").get<std::vector<double>>();
    s.vocab = j.at("vocab").get<std::vector<std::string>>();
    if (!(s.time_max > s.time_min)) throw DataError("normalization stats: time_max must exceed time_min");
    return s;
}

void save_sidecar(const std::filesystem::path& path, const Preprocessor& pre, const NormalizationStats& stats) {
    write_json_file(path, json{{"preprocessor", to_json(pre)}, {"normalization", to_json(stats)}});
}

std::pair<Preprocessor, NormalizationStats> load_sidecar(const std::filesystem::path& path) {
    const json j = read_json_file(path);
    return {preprocessor_from_json(j.at("preprocessor")), stats_from_json(j.at("normalization"))};
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("invalid JSON in '") + path.string() + "': " + e.what(), 1);
    }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace somer
