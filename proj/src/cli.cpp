#include "somer/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "somer/analysis.hpp"
#include "somer/baselines.hpp"
#include "somer/dataio.hpp"
#include "somer/encoder.hpp"
#include "somer/errors.hpp"
#include "somer/finetune.hpp"
#include "somer/seeding.hpp"
#include "somer/synthgen.hpp"
#include "somer/trainer.hpp"

namespace somer::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kOutDirEnv = "SOMER_OUT_DIR";

fs::path default_out_dir() {
    if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') return env;
    return ".";
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json versions() {
    return {{"somer", kVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
            {"cli11", CLI11_VERSION},
            {"compiler", __VERSION__}};
}

// Reproducibility record written next to every subcommand's outputs.
struct Manifest {
    std::string command;
    std::vector<std::string> args;
    std::optional<std::uint64_t> seed;
    json config = json::object();
    json results = json::object();
    std::vector<std::string> outputs;
    std::string started_at = utc_timestamp();
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

    void write(const fs::path& dir, int code, const std::string& error) const {
        json j{{"command", command},
               {"args", args},
               {"seed", seed ? json(*seed) : json(nullptr)},
               {"config_hash", hex_digest(config.dump())},
               {"effective_config", config},
               {"versions", versions()},
               {"started_at", started_at},
               {"wall_time_seconds",
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()},
               {"exit_code", code},
               {"status", code == ExitCode::ok ? "ok" : "error"},
               {"outputs", outputs},
               {"results", results}};
        if (!error.empty()) j["error"] = error;
        fs::create_directories(dir);
        std::ofstream f(dir / "run.json");
        if (!f) throw IoError("cannot write '" + (dir / "run.json").string() + "'");
        f << j.dump(2) << '\n';
    }
};

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    f << j.dump(2) << '\n';
    if (!f) throw IoError("failed writing '" + path.string() + "'");
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw IoError("failed writing '" + path.string() + "'");
}

void require_file(const std::string& what, const fs::path& path) {
    if (!fs::exists(path)) throw IoError(what + " '" + path.string() + "' does not exist");
}

json load_config(const std::optional<std::string>& path) {
    if (!path) return json::object();
    require_file("config file", *path);
    json j = read_json_file(*path);
    if (!j.is_object()) throw ConfigError("config file '" + *path + "' must hold a JSON object");
    return j;
}

std::vector<int> labels_for(std::span<const std::string> ids, const std::map<std::string, int>& labels) {
    std::vector<int> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = labels.find(id);
        if (it == labels.end()) throw DataError("no label for user '" + id + "'");
        out.push_back(it->second);
    }
    return out;
}

std::map<std::string, int> load_labels(const std::string& path) {
    require_file("labels file", path);
    return read_labels(path);
}

// Converts library exceptions into exit codes and always leaves a manifest behind.
int guarded(Manifest& manifest, const fs::path& manifest_dir, std::ostream& err, const std::function<void()>& body) {
    int code = ExitCode::ok;
    std::string message;
    try {
        body();
    } catch (const NumericError& e) {
        code = ExitCode::numeric;
        message = e.what();
    } catch (const Error& e) {
        code = ExitCode::data;
        message = e.what();
    } catch (const json::exception& e) {
        code = ExitCode::data;
        message = std::string("malformed JSON input: ") + e.what();
    } catch (const fs::filesystem_error& e) {
        code = ExitCode::data;
        message = e.what();
    } catch (const std::exception& e) {
        code = ExitCode::data;
        message = e.what();
    }
    if (code != ExitCode::ok) err << "error: " << message << '\n';
    try {
        manifest.write(manifest_dir, code, message);
    } catch (const std::exception& e) {
        err << "warning: could not write run manifest: " << e.what() << '\n';
    }
    return code;
}

// Flags shared by every subcommand.
struct CommonOptions {
    std::optional<std::string> config;
    std::optional<std::string> out;
    std::optional<std::size_t> threads;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, CommonOptions& o, const std::string& out_help) {
    app->add_option("--config", o.config, "JSON config file; flags override its values");
    app->add_option("--out", o.out, out_help);
    app->add_option("--threads", o.threads, "Worker threads; 1 is fully deterministic")->check(CLI::PositiveNumber);
    app->add_option("--seed", o.seed, "Random seed");
}

fs::path out_dir(const CommonOptions& o) { return o.out ? fs::path(*o.out) : default_out_dir(); }

template <class T>
void apply_flag(T& target, const std::optional<T>& flag) {
    if (flag) target = *flag;
}

// ---- synth -------------------------------------------------------------------------------

struct SynthOptions {
    CommonOptions common;
    int dataset = 0;
    std::optional<std::size_t> samples;
};

void run_synth(const SynthOptions& o, Manifest& m, std::ostream& out) {
    const json cfg_file = load_config(o.common.config);
    const std::uint64_t seed = o.common.seed.value_or(cfg_file.value("seed", std::uint64_t{0}));
    std::vector<ClusterSpec> specs = builtin_specs(o.dataset);
    std::size_t samples = cfg_file.value("samples", specs.front().n_samples);
    apply_flag(samples, o.samples);
    for (auto& s : specs) s.n_samples = samples;
    m.seed = seed;
    m.config = {{"dataset", o.dataset}, {"seed", seed}, {"samples", samples}};

    const SyntheticDataset data = generate(specs, seed);
    const fs::path dir = out_dir(o.common);
    fs::create_directories(dir);
    write_corpus(dir / "corpus.jsonl", to_corpus(data));
    write_labels(dir / "labels.json", data);
    // Pretraining settings for this corpus: no profile signal and no network, so no link loss.
    TrainConfig train;
    train.lambda = 0.0;
    train.seed = seed;
    json pretrain_cfg = to_json(train);
    pretrain_cfg["pipeline"] = to_json(synthetic_pipeline_options());
    write_json(dir / "pretrain_config.json", pretrain_cfg);
    m.outputs = {(dir / "corpus.jsonl").string(), (dir / "labels.json").string(),
                 (dir / "pretrain_config.json").string()};
    m.results = {{"users", data.users.size()}, {"clusters", data.n_clusters()}, {"dropped_empty", data.dropped}};
    out << "wrote " << data.users.size() << " users in " << data.n_clusters() << " clusters to " << dir.string()
        << '\n';
}

// ---- pretrain ----------------------------------------------------------------------------

struct PretrainOptions {
    CommonOptions common;
    std::string corpus;
    std::optional<double> lr, tau, gamma, lambda, window_days, min_delta, time_budget;
    std::optional<std::size_t> epochs, batch_size, patience, hidden, layers, heads, max_seq_len;
    std::optional<bool> use_pca;
};

void run_pretrain(const PretrainOptions& o, Manifest& m, std::ostream& out) {
    const json cfg_file = load_config(o.common.config);
    TrainConfig cfg = train_config_from_json(cfg_file);
    PipelineOptions pipeline = cfg_file.contains("pipeline") ? pipeline_options_from_json(cfg_file.at("pipeline"))
                                                             : PipelineOptions{};
    apply_flag(cfg.lr, o.lr);
    apply_flag(cfg.tau, o.tau);
    apply_flag(cfg.gamma, o.gamma);
    apply_flag(cfg.lambda, o.lambda);
    apply_flag(cfg.min_delta, o.min_delta);
    apply_flag(cfg.time_budget_seconds, o.time_budget);
    apply_flag(cfg.max_epochs, o.epochs);
    apply_flag(cfg.batch_size, o.batch_size);
    apply_flag(cfg.patience, o.patience);
    apply_flag(cfg.encoder.hidden_dim, o.hidden);
    apply_flag(cfg.encoder.num_layers, o.layers);
    apply_flag(cfg.encoder.num_heads, o.heads);
    apply_flag(cfg.threads, o.common.threads);
    apply_flag(cfg.seed, o.common.seed);
    apply_flag(pipeline.window_days, o.window_days);
    apply_flag(pipeline.use_pca, o.use_pca);
    if (!(cfg_file.contains("pipeline") && cfg_file.at("pipeline").contains("max_seq_len"))) {
        pipeline.max_seq_len = cfg.encoder.max_seq_len;
    }
    apply_flag(pipeline.max_seq_len, o.max_seq_len);
    cfg.encoder.max_seq_len = pipeline.max_seq_len;
    cfg.validate();

    json effective = to_json(cfg);
    effective["pipeline"] = to_json(pipeline);
    m.config = effective;
    m.seed = cfg.seed;

    require_file("corpus", o.corpus);
    const Corpus corpus = load_corpus(o.corpus);
    const BuildResult built = build_dataset(corpus, pipeline);
    const Normalized data = normalize(built.dataset);
    const fs::path dir = out_dir(o.common);
    fs::create_directories(dir);
    cfg.history_path = dir / "history.jsonl";

    std::vector<double> epoch_seconds;
    const PretrainResult result = pretrain(data, corpus.edges, cfg, built.preprocessor, [&](const EpochReport& r) {
        epoch_seconds.push_back(r.seconds);
        out << "epoch " << r.epoch << "  train " << r.train.total << "  validation " << r.validation.total << "  lr "
            << r.lr << "  (" << r.seconds << " s)\n"
            << std::flush;
    });
    save_checkpoint(dir / "checkpoint.json", result.checkpoint);
    m.outputs = {(dir / "checkpoint.json").string(), (dir / "history.jsonl").string()};
    m.results = {{"users", data.dataset.users.size()},
                 {"dropped_users", built.dropped_users},
                 {"epochs_run", result.history.size()},
                 {"best_epoch", result.best_epoch},
                 {"best_validation", result.best_validation},
                 {"epoch_seconds", epoch_seconds},
                 {"encoder_config_hash", config_hash(result.checkpoint.encoder.config())}};
    out << "best epoch " << result.best_epoch << ", checkpoint " << (dir / "checkpoint.json").string() << '\n';
}

// ---- finetune ----------------------------------------------------------------------------

struct FinetuneOptions {
    CommonOptions common;
    std::string checkpoint;
    std::string corpus;
    std::string labels;
    std::optional<int> positive_class;
    bool freeze_encoder = false;
    std::optional<double> lr, dropout;
    std::optional<std::size_t> epochs, batch_size, patience;
};

Normalized prepare(const Checkpoint& ckpt, const std::string& corpus_path, std::size_t* dropped = nullptr) {
    require_file("corpus", corpus_path);
    const Corpus corpus = load_corpus(corpus_path);
    const BuildResult built = build_dataset(corpus, ckpt.preprocessor);
    if (dropped != nullptr) *dropped = built.dropped_users;
    return normalize(built.dataset, &ckpt.stats);
}

void run_finetune(const FinetuneOptions& o, Manifest& m, std::ostream& out) {
    const json cfg_file = load_config(o.common.config);
    FinetuneConfig cfg = finetune_config_from_json(cfg_file);
    apply_flag(cfg.lr, o.lr);
    apply_flag(cfg.dropout, o.dropout);
    apply_flag(cfg.max_epochs, o.epochs);
    apply_flag(cfg.batch_size, o.batch_size);
    apply_flag(cfg.patience, o.patience);
    apply_flag(cfg.threads, o.common.threads);
    apply_flag(cfg.seed, o.common.seed);
    if (o.freeze_encoder) cfg.freeze_encoder = true;
    cfg.validate();
    json effective = to_json(cfg);
    if (o.positive_class) effective["positive_class"] = *o.positive_class;
    m.config = effective;
    m.seed = cfg.seed;

    require_file("checkpoint", o.checkpoint);
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    std::map<std::string, int> labels = load_labels(o.labels);
    if (o.positive_class) {
        for (auto& [_, l] : labels) l = l == *o.positive_class ? 1 : 0;
    }
    Normalized data = prepare(ckpt, o.corpus);
    for (auto& u : data.dataset.users) {
        if (auto it = labels.find(u.user_id); it != labels.end()) u.label = it->second;
    }

    const fs::path dir = out_dir(o.common);
    fs::create_directories(dir);
    cfg.history_path = dir / "finetune_history.jsonl";
    const FinetuneResult result = finetune(ckpt, data, cfg);
    save_checkpoint(dir / "finetuned.json", result.checkpoint);

    std::vector<UserRecord> labeled;
    for (std::size_t i : result.labeled) labeled.push_back(data.dataset.users[i]);
    const std::vector<double> probs = predict(result.checkpoint.encoder, result.head, labeled, cfg.threads);
    std::vector<std::string> split_of(labeled.size(), "train");
    for (std::size_t i : result.split.validation) split_of[i] = "validation";
    for (std::size_t i : result.split.test) split_of[i] = "test";

    std::string csv = "user_id,split,label,probability\n";
    auto score_split = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> p;
        std::vector<int> y;
        for (std::size_t i : idx) {
            p.push_back(probs[i]);
            y.push_back(*labeled[i].label);
        }
        const DetectionScore s = f1_eval(p, y);
        return json{{"users", idx.size()}, {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
    };
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        csv += labeled[i].user_id + "," + split_of[i] + "," + std::to_string(*labeled[i].label) + "," +
               json(probs[i]).dump() + "\n";
    }
    write_text(dir / "predictions.csv", csv);
    const json metrics{{"best_epoch", result.best_epoch},
                       {"best_validation_loss", result.best_validation},
                       {"train", score_split(result.split.train)},
                       {"validation", score_split(result.split.validation)},
                       {"test", score_split(result.split.test)}};
    write_json(dir / "metrics.json", metrics);
    m.outputs = {(dir / "finetuned.json").string(), (dir / "predictions.csv").string(),
                 (dir / "metrics.json").string(), (dir / "finetune_history.jsonl").string()};
    m.results = metrics;
    out << "test F1 " << metrics["test"]["f1"].get<double>() << " (best epoch " << result.best_epoch << ")\n";
}

// ---- embed -------------------------------------------------------------------------------

struct EmbedOptions {
    CommonOptions common;
    std::string checkpoint;
    std::string corpus;
};

void run_embed(const EmbedOptions& o, const fs::path& file, Manifest& m, std::ostream& out) {
    m.config = {{"checkpoint", o.checkpoint}, {"corpus", o.corpus}, {"threads", o.common.threads.value_or(1)}};
    require_file("checkpoint", o.checkpoint);
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    std::size_t dropped = 0;
    const Normalized data = prepare(ckpt, o.corpus, &dropped);
    EmbeddingTable table;
    for (const auto& u : data.dataset.users) table.ids.push_back(u.user_id);
    table.values = encode_users(data.dataset.users, ckpt.encoder, o.common.threads.value_or(1));
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    export_embeddings(table, file);
    m.outputs = {file.string()};
    m.results = {{"users", table.size()}, {"dropped_users", dropped}, {"dim", table.values.cols()}};
    out << "wrote " << table.size() << " embeddings to " << file.string() << '\n';
    if (dropped > 0) out << dropped << " users had too few posts and were skipped\n";
}

// ---- knn-report / shift-report -------------------------------------------------------------

struct KnnOptions {
    CommonOptions common;
    std::string embeddings;
    std::string labels;
    std::vector<std::size_t> k{100};
    std::string metric = "cosine";
};

void run_knn(const KnnOptions& o, Manifest& m, std::ostream& out) {
    const Metric metric = metric_from_string(o.metric);
    m.config = {{"embeddings", o.embeddings}, {"labels", o.labels}, {"k", o.k}, {"metric", o.metric}};
    require_file("embeddings", o.embeddings);
    const EmbeddingTable table = import_embeddings(o.embeddings);
    const std::vector<int> labels = labels_for(table.ids, load_labels(o.labels));
    const std::set<int> groups(labels.begin(), labels.end());

    json cells = json::array();
    for (std::size_t k : o.k) {
        const GroupShares shares = knn_group_shares(table.values, labels, k, metric);
        for (int g : groups) {
            double in = 0.0, outside = 0.0;
            std::size_t n = 0;
            for (std::size_t i = 0; i < labels.size(); ++i) {
                if (labels[i] != g) continue;
                in += shares.in_group[i];
                outside += shares.out_group[i];
                ++n;
            }
            cells.push_back({{"group", g},
                             {"k", k},
                             {"users", n},
                             {"in_group", in / static_cast<double>(n)},
                             {"out_group", outside / static_cast<double>(n)}});
        }
    }
    const fs::path dir = out_dir(o.common);
    fs::create_directories(dir);
    const json report{{"metric", to_string(metric)}, {"cells", cells}};
    write_json(dir / "knn_report.json", report);
    m.outputs = {(dir / "knn_report.json").string()};
    m.results = report;
    out << "kNN report for " << table.size() << " users written to " << (dir / "knn_report.json").string() << '\n';
}

struct ShiftOptions {
    CommonOptions common;
    std::string before;
    std::string after;
    std::string labels;
    std::vector<std::size_t> k{100};
    std::string metric = "cosine";
};

void run_shift(const ShiftOptions& o, Manifest& m, std::ostream& out) {
    const Metric metric = metric_from_string(o.metric);
    m.config = {{"before", o.before}, {"after", o.after}, {"labels", o.labels}, {"k", o.k}, {"metric", o.metric}};
    require_file("embeddings", o.before);
    require_file("embeddings", o.after);
    const EmbeddingTable before = import_embeddings(o.before);
    const EmbeddingTable after = import_embeddings(o.after);
    const std::vector<int> labels = labels_for(before.ids, load_labels(o.labels));
    const ShiftReport report = shift_report(before, after, labels, o.k, metric);
    const fs::path dir = out_dir(o.common);
    fs::create_directories(dir);
    write_json(dir / "shift_report.json", report.to_json());
    write_text(dir / "shift_report.csv", report.to_csv());
    m.outputs = {(dir / "shift_report.json").string(), (dir / "shift_report.csv").string()};
    m.results = {{"cells", report.cells.size()}};
    out << report.to_csv();
}

// ---- baselines ---------------------------------------------------------------------------

struct BaselineOptions {
    CommonOptions common;
    std::string interactions;
    std::string method = "all";
    double percentile = 99.5;
    std::size_t min_len = 5;
    double threshold = 0.7;
    std::optional<std::string> labels;
};

void run_baselines(const BaselineOptions& o, Manifest& m, std::ostream& out) {
    m.config = {{"interactions", o.interactions}, {"method", o.method},       {"percentile", o.percentile},
                {"min_len", o.min_len},           {"threshold", o.threshold}, {"labels", o.labels ? json(*o.labels) : json(nullptr)}};
    require_file("interaction log", o.interactions);
    const InteractionLog log = load_interactions(o.interactions);
    std::set<InteractionKind> present;
    for (const auto& r : log.records) present.insert(r.kind);
    std::optional<std::map<std::string, int>> labels;
    if (o.labels) labels = load_labels(*o.labels);

    const bool all = o.method == "all";
    json report = json::object();
    auto record = [&](const std::string& name, const DetectionResult& r) {
        json j = r.to_json();
        if (labels) {
            const DetectionScore s = score_detection(r.flagged, *labels);
            j["score"] = {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
        }
        report[name] = j;
        out << name << ": " << r.flagged.size() << " users flagged";
        if (labels) out << ", F1 " << j["score"]["f1"].get<double>();
        out << '\n';
        for (const auto& w : r.warnings) out << "  warning: " << w << '\n';
    };
    auto wanted = [&](const std::string& name, InteractionKind kind) {
        if (o.method == name) return true;
        return all && present.count(kind) > 0;
    };
    if (wanted("coshare", InteractionKind::share)) record("coshare", coshare_flags(log, InteractionKind::share, o.percentile));
    if (wanted("courl", InteractionKind::url)) record("courl", coshare_flags(log, InteractionKind::url, o.percentile));
    if (wanted("hashtag", InteractionKind::hashtag_seq)) record("hashtag", hashtag_sequence_flags(log, o.min_len));
    if (wanted("text", InteractionKind::text_vec)) {
        const auto [ids, vectors] = mean_text_vectors(log);
        record("text", text_similarity_flags(ids, vectors, o.threshold));
    }
    if (report.empty()) throw DataError("interaction log has no records for method '" + o.method + "'");

    const fs::path dir = out_dir(o.common);
    fs::create_directories(dir);
    write_json(dir / "baselines.json", report);
    m.outputs = {(dir / "baselines.json").string()};
    for (auto& [name, r] : report.items()) m.results[name] = {{"flagged", r["flagged"].size()}};
}

// ---- cluster-eval ------------------------------------------------------------------------

struct ClusterOptions {
    CommonOptions common;
    std::string embeddings;
    std::string labels;
    std::optional<std::size_t> clusters;
};

void run_cluster(const ClusterOptions& o, Manifest& m, std::ostream& out) {
    const std::uint64_t seed = o.common.seed.value_or(0);
    m.seed = seed;
    require_file("embeddings", o.embeddings);
    const EmbeddingTable table = import_embeddings(o.embeddings);
    const std::vector<int> labels = labels_for(table.ids, load_labels(o.labels));
    const std::size_t k = o.clusters.value_or(std::set<int>(labels.begin(), labels.end()).size());
    m.config = {{"embeddings", o.embeddings}, {"labels", o.labels}, {"clusters", k}, {"seed", seed}};
    const Agreement a = cluster_agreement(table.values, labels, k, seed);
    const json result{{"users", table.size()}, {"clusters", k}, {"ari", a.ari}, {"purity", a.purity}};
    const fs::path dir = out_dir(o.common);
    fs::create_directories(dir);
    write_json(dir / "cluster_eval.json", result);
    m.outputs = {(dir / "cluster_eval.json").string()};
    m.results = result;
    out << "ARI " << a.ari << "  purity " << a.purity << '\n';
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-view social media user representation learning"};
    app.name("somer");
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1, 1);
    const std::string out_help = "Output directory (default: $" + std::string(kOutDirEnv) + " or .)";

    SynthOptions synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a labeled synthetic corpus");
    add_common(synth_cmd, synth.common, out_help);
    synth_cmd->add_option("--dataset", synth.dataset, "Built-in dataset id")->required()->check(CLI::Range(1, 4));
    synth_cmd->add_option("--samples", synth.samples, "Samples per cluster")->check(CLI::PositiveNumber);

    PretrainOptions pre;
    auto* pre_cmd = app.add_subcommand("pretrain", "Self-supervised pretraining on a corpus");
    add_common(pre_cmd, pre.common, out_help);
    pre_cmd->add_option("--corpus", pre.corpus, "JSON-lines corpus")->required();
    pre_cmd->add_option("--lr", pre.lr, "Base learning rate");
    pre_cmd->add_option("--epochs", pre.epochs, "Maximum epochs");
    pre_cmd->add_option("--batch-size", pre.batch_size, "Batch size (0 = automatic)");
    pre_cmd->add_option("--tau", pre.tau, "Contrastive temperature");
    pre_cmd->add_option("--gamma", pre.gamma, "Augmentation noise level");
    pre_cmd->add_option("--lambda", pre.lambda, "Weight of the link-prediction loss");
    pre_cmd->add_option("--patience", pre.patience, "Early-stopping patience in epochs");
    pre_cmd->add_option("--min-delta", pre.min_delta, "Smallest validation improvement that resets patience");
    pre_cmd->add_option("--time-budget", pre.time_budget, "Wall-clock training limit in seconds (0 = none)");
    pre_cmd->add_option("--hidden", pre.hidden, "Hidden size K");
    pre_cmd->add_option("--layers", pre.layers, "Transformer layers");
    pre_cmd->add_option("--heads", pre.heads, "Attention heads");
    pre_cmd->add_option("--max-seq-len", pre.max_seq_len, "Most recent triplets kept per user");
    pre_cmd->add_option("--window-days", pre.window_days, "Aggregation window in days");
    pre_cmd->add_option("--use-pca", pre.use_pca, "Reduce post features with PCA (true/false)");

    FinetuneOptions ft;
    auto* ft_cmd = app.add_subcommand("finetune", "Supervised fine-tuning with a classification head");
    add_common(ft_cmd, ft.common, out_help);
    ft_cmd->add_option("--checkpoint", ft.checkpoint, "Pretrained checkpoint")->required();
    ft_cmd->add_option("--corpus", ft.corpus, "JSON-lines corpus")->required();
    ft_cmd->add_option("--labels", ft.labels, "JSON object mapping user id to label")->required();
    ft_cmd->add_option("--positive-class", ft.positive_class, "Treat this label as 1 and every other label as 0");
    ft_cmd->add_flag("--freeze-encoder", ft.freeze_encoder, "Train the head only");
    ft_cmd->add_option("--lr", ft.lr, "Base learning rate");
    ft_cmd->add_option("--dropout", ft.dropout, "Dropout rate of the head");
    ft_cmd->add_option("--epochs", ft.epochs, "Maximum epochs");
    ft_cmd->add_option("--batch-size", ft.batch_size, "Batch size");
    ft_cmd->add_option("--patience", ft.patience, "Early-stopping patience in epochs");

    EmbedOptions emb;
    std::optional<std::string> emb_file;
    auto* emb_cmd = app.add_subcommand("embed", "Export user embeddings as CSV");
    emb_cmd->add_option("--checkpoint", emb.checkpoint, "Checkpoint")->required();
    emb_cmd->add_option("--corpus", emb.corpus, "JSON-lines corpus")->required();
    emb_cmd->add_option("--out", emb_file, "Output CSV (default: $" + std::string(kOutDirEnv) + "/embeddings.csv)");
    emb_cmd->add_option("--threads", emb.common.threads, "Worker threads")->check(CLI::PositiveNumber);

    KnnOptions knn;
    auto* knn_cmd = app.add_subcommand("knn-report", "In-group and out-group kNN shares per group");
    add_common(knn_cmd, knn.common, out_help);
    knn_cmd->add_option("--embeddings", knn.embeddings, "Embedding CSV")->required();
    knn_cmd->add_option("--labels", knn.labels, "JSON object mapping user id to group")->required();
    knn_cmd->add_option("--k", knn.k, "Neighbourhood sizes")->delimiter(',');
    knn_cmd->add_option("--metric", knn.metric, "cosine or euclidean");

    ShiftOptions shift;
    auto* shift_cmd = app.add_subcommand("shift-report", "Change in kNN shares between two periods");
    add_common(shift_cmd, shift.common, out_help);
    shift_cmd->add_option("--before", shift.before, "Embedding CSV of the first period")->required();
    shift_cmd->add_option("--after", shift.after, "Embedding CSV of the second period")->required();
    shift_cmd->add_option("--labels", shift.labels, "JSON object mapping user id to group")->required();
    shift_cmd->add_option("--k", shift.k, "Neighbourhood sizes")->delimiter(',');
    shift_cmd->add_option("--metric", shift.metric, "cosine or euclidean");

    BaselineOptions base;
    auto* base_cmd = app.add_subcommand("baselines", "Similarity-based coordination detectors");
    add_common(base_cmd, base.common, out_help);
    base_cmd->add_option("--interactions", base.interactions, "JSON-lines interaction log")->required();
    base_cmd->add_option("--method", base.method, "coshare, courl, hashtag, text or all")
        ->check(CLI::IsMember({"coshare", "courl", "hashtag", "text", "all"}));
    base_cmd->add_option("--percentile", base.percentile, "Co-share similarity percentile")->check(CLI::Range(0.0, 100.0));
    base_cmd->add_option("--min-len", base.min_len, "Shortest shared hashtag run")->check(CLI::PositiveNumber);
    base_cmd->add_option("--threshold", base.threshold, "Text cosine threshold");
    base_cmd->add_option("--labels", base.labels, "Optional ground truth (1 = coordinated) for scoring");

    ClusterOptions clus;
    auto* clus_cmd = app.add_subcommand("cluster-eval", "k-means agreement between embeddings and labels");
    add_common(clus_cmd, clus.common, out_help);
    clus_cmd->add_option("--embeddings", clus.embeddings, "Embedding CSV")->required();
    clus_cmd->add_option("--labels", clus.labels, "JSON object mapping user id to label")->required();
    clus_cmd->add_option("--clusters", clus.clusters, "Number of clusters (default: distinct labels)");

    std::vector<const char*> argv{"somer"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ExitCode::ok : ExitCode::usage;
    }

    Manifest m;
    m.args = args;
    if (*synth_cmd) {
        m.command = "synth";
        return guarded(m, out_dir(synth.common), err, [&] { run_synth(synth, m, out); });
    }
    if (*pre_cmd) {
        m.command = "pretrain";
        return guarded(m, out_dir(pre.common), err, [&] { run_pretrain(pre, m, out); });
    }
    if (*ft_cmd) {
        m.command = "finetune";
        return guarded(m, out_dir(ft.common), err, [&] { run_finetune(ft, m, out); });
    }
    if (*emb_cmd) {
        m.command = "embed";
        const fs::path file = emb_file ? fs::path(*emb_file) : default_out_dir() / "embeddings.csv";
        const fs::path dir = file.has_parent_path() ? file.parent_path() : fs::path(".");
        return guarded(m, dir, err, [&] { run_embed(emb, file, m, out); });
    }
    if (*knn_cmd) {
        m.command = "knn-report";
        return guarded(m, out_dir(knn.common), err, [&] { run_knn(knn, m, out); });
    }
    if (*shift_cmd) {
        m.command = "shift-report";
        return guarded(m, out_dir(shift.common), err, [&] { run_shift(shift, m, out); });
    }
    if (*base_cmd) {
        m.command = "baselines";
        return guarded(m, out_dir(base.common), err, [&] { run_baselines(base, m, out); });
    }
    m.command = "cluster-eval";
    return guarded(m, out_dir(clus.common), err, [&] { run_cluster(clus, m, out); });
}

int dispatch(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args, std::cout, std::cerr);
}

}  // namespace somer::cli
