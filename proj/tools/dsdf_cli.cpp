// Command-line front end: dataset ingestion, checkpoint persistence and the
// pretrain -> build-hierarchy -> train -> explain workflow.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsdf/dsdf.hpp"

namespace {

using nlohmann::json;

struct RunConfig {
    // backbone
    std::string arch = "mlp";
    std::vector<int> input_shape; // 1 or 3 entries; empty = take from data
    std::vector<int> hidden_dims{16};
    int feature_dim = 8;
    int num_classes = 0; // 0 = take from data
    bool head_bias = true;
    std::string precision = "f64";
    // forest
    int tree_count = 3;
    int depth = 4;
    double gamma = 10.0;
    double tau = 0.1;
    bool tsm_sigmoid_normalize = false;
    // optimization
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int epochs = 40;
    int batch_size = 64;
    double decay_factor = 0.1;
    int decay_every = 0; // 0 = 0.375 * epochs
    int pretrain_epochs = 30;
    double pretrain_lr = 0.1;
    int pi_iterations = 1;
    int pi_buffer_cap = 0;
    // hierarchy
    int subsample_cap = 256;
    bool constant_similarity = false;
    // io
    std::string data;
    std::string labels; // idx label file
    std::string data_format = "synthetic";
    std::string checkpoint;
    std::string out_dir = ".";
    std::uint64_t seed = 1;
    int checkpoint_every = 0;
    int window = 0; // 0 = min(20, C)
    int tree = 0;   // tree index for profile/export style commands
};

// ---- key=value config files -------------------------------------------------

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

template <typename T>
T parse_scalar(const std::string& key, const std::string& value) {
    try {
        const json j = json::parse(value);
        return j.get<T>();
    } catch (const json::exception&) {
        throw dsdf::UsageError("config key '" + key + "': cannot parse '" + value + "'");
    }
}

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "arch") cfg.arch = value;
    else if (key == "input_shape") cfg.input_shape = parse_scalar<std::vector<int>>(key, value);
    else if (key == "hidden_dims") cfg.hidden_dims = parse_scalar<std::vector<int>>(key, value);
    else if (key == "feature_dim") cfg.feature_dim = parse_scalar<int>(key, value);
    else if (key == "num_classes") cfg.num_classes = parse_scalar<int>(key, value);
    else if (key == "head_bias") cfg.head_bias = parse_scalar<bool>(key, value);
    else if (key == "precision") cfg.precision = value;
    else if (key == "tree_count" || key == "T") cfg.tree_count = parse_scalar<int>(key, value);
    else if (key == "depth" || key == "d") cfg.depth = parse_scalar<int>(key, value);
    else if (key == "gamma") cfg.gamma = parse_scalar<double>(key, value);
    else if (key == "tau") cfg.tau = parse_scalar<double>(key, value);
    else if (key == "tsm_sigmoid_normalize") cfg.tsm_sigmoid_normalize = parse_scalar<bool>(key, value);
    else if (key == "lr") cfg.lr = parse_scalar<double>(key, value);
    else if (key == "momentum") cfg.momentum = parse_scalar<double>(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_scalar<double>(key, value);
    else if (key == "epochs") cfg.epochs = parse_scalar<int>(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_scalar<int>(key, value);
    else if (key == "decay_factor") cfg.decay_factor = parse_scalar<double>(key, value);
    else if (key == "decay_every") cfg.decay_every = parse_scalar<int>(key, value);
    else if (key == "pretrain_epochs") cfg.pretrain_epochs = parse_scalar<int>(key, value);
    else if (key == "pretrain_lr") cfg.pretrain_lr = parse_scalar<double>(key, value);
    else if (key == "pi_iterations") cfg.pi_iterations = parse_scalar<int>(key, value);
    else if (key == "pi_buffer_cap") cfg.pi_buffer_cap = parse_scalar<int>(key, value);
    else if (key == "subsample_cap") cfg.subsample_cap = parse_scalar<int>(key, value);
    else if (key == "constant_similarity") cfg.constant_similarity = parse_scalar<bool>(key, value);
    else if (key == "data") cfg.data = value;
    else if (key == "labels") cfg.labels = value;
    else if (key == "data_format") cfg.data_format = value;
    else if (key == "checkpoint") cfg.checkpoint = value;
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "seed") cfg.seed = parse_scalar<std::uint64_t>(key, value);
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_scalar<int>(key, value);
    else if (key == "window") cfg.window = parse_scalar<int>(key, value);
    else if (key == "tree") cfg.tree = parse_scalar<int>(key, value);
    else throw dsdf::UsageError("unknown config key '" + key + "'");
}

void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw dsdf::UsageError("cannot open config file '" + path + "'");
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw dsdf::UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
        apply_config_entry(cfg, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
}

// ---- shared helpers -----------------------------------------------------------

/// `model_classes` (when nonzero) pins C for formats that would otherwise
/// infer it from the labels, so partial evaluation splits stay compatible.
dsdf::Dataset load_data(const RunConfig& cfg, const std::string& path, int model_classes = 0) {
    if (path.empty()) throw dsdf::UsageError("this command needs --data");
    const int classes = cfg.num_classes > 0 ? cfg.num_classes : model_classes;
    if (cfg.data_format == "synthetic")
        return dsdf::make_synthetic(dsdf::SyntheticSpec::from_file(path));
    if (cfg.data_format == "csv") return dsdf::load_csv(path, classes);
    if (cfg.data_format == "idx") {
        if (cfg.labels.empty()) throw dsdf::UsageError("idx data needs --labels <label file>");
        return dsdf::load_idx(path, cfg.labels, classes);
    }
    throw dsdf::UsageError("unknown data format '" + cfg.data_format +
                           "' (expected synthetic, csv or idx)");
}

dsdf::BackboneConfig make_backbone_config(const RunConfig& cfg, const dsdf::Dataset& data) {
    dsdf::BackboneConfig config;
    config.arch = dsdf::arch_from_name(cfg.arch);
    if (cfg.input_shape.empty()) {
        config.input_shape = data.shape;
    } else if (cfg.input_shape.size() == 3) {
        config.input_shape =
            dsdf::InputShape::image(cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]);
    } else if (cfg.input_shape.size() == 1) {
        config.input_shape = dsdf::InputShape::flat(cfg.input_shape[0]);
    } else {
        throw dsdf::UsageError("input_shape must have 1 or 3 entries");
    }
    config.hidden_dims = cfg.hidden_dims;
    config.feature_dim = cfg.feature_dim;
    config.num_classes = cfg.num_classes > 0 ? cfg.num_classes : data.num_classes;
    config.head_bias = cfg.head_bias;
    config.seed = cfg.seed;
    return config;
}

std::string checkpoint_path(const RunConfig& cfg) {
    std::filesystem::path path = cfg.checkpoint.empty()
                                     ? std::filesystem::path(cfg.out_dir) / "model.ckpt"
                                     : std::filesystem::path(cfg.checkpoint);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    return path.string();
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
    std::filesystem::create_directories(cfg.out_dir);
    return (std::filesystem::path(cfg.out_dir) / name).string();
}

void print_summary(const std::string& command, std::uint64_t seed, const json& metrics) {
    json summary;
    summary["command"] = command;
    summary["seed"] = seed;
    summary["metrics"] = metrics;
    std::cout << summary.dump() << "\n";
}

json path_to_json(const dsdf::DecisionPath& path) {
    json j;
    j["tree"] = path.tree;
    j["nodes"] = path.nodes;
    j["per_node_prob"] = path.per_node_prob;
    j["end_node"] = path.end_node;
    if (path.terminal_leaf)
        j["terminal_leaf"] = *path.terminal_leaf;
    else
        j["terminal_leaf"] = nullptr;
    return j;
}

std::string path_to_text(const dsdf::DecisionPath& path) {
    std::ostringstream out;
    out << "tree " << path.tree << ": ";
    for (std::size_t i = 0; i < path.nodes.size(); ++i) {
        if (i) out << " -> ";
        out << "node " << path.nodes[i];
        out.precision(4);
        out << " (p=" << path.per_node_prob[i] << ")";
    }
    if (path.terminal_leaf)
        out << " -> leaf " << *path.terminal_leaf;
    else
        out << " [truncated at end-decision node " << path.end_node << ", no confident decision]";
    return out.str();
}

dsdf::OptimizerSettings optimizer_from(const RunConfig& cfg, bool pretrain_phase) {
    dsdf::OptimizerSettings opt;
    opt.learning_rate = pretrain_phase ? cfg.pretrain_lr : cfg.lr;
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;
    opt.epochs = pretrain_phase ? cfg.pretrain_epochs : cfg.epochs;
    opt.batch_size = cfg.batch_size;
    opt.decay_factor = cfg.decay_factor;
    opt.decay_every = cfg.decay_every;
    opt.shuffle_seed = cfg.seed + 1000003;
    return opt;
}

template <typename Scalar>
dsdf::Checkpoint<Scalar> load_trained_checkpoint(const RunConfig& cfg, bool need_hierarchy) {
    auto ckpt = dsdf::load_checkpoint<Scalar>(checkpoint_path(cfg));
    if (need_hierarchy && ckpt.topologies.empty())
        throw dsdf::ConfigError("checkpoint has no hierarchy; run build-hierarchy first");
    return ckpt;
}

// ---- subcommands ----------------------------------------------------------------

template <typename Scalar>
json cmd_pretrain(const RunConfig& cfg) {
    const dsdf::Dataset data = load_data(cfg, cfg.data);
    const dsdf::BackboneConfig config = make_backbone_config(cfg, data);
    auto params = dsdf::init_model<Scalar>(config, cfg.tree_count, cfg.depth, cfg.seed);
    params.tsm.sigmoid_normalize = cfg.tsm_sigmoid_normalize;

    std::vector<dsdf::EpochMetric<Scalar>> log;
    params = dsdf::pretrain(std::move(params), data, optimizer_from(cfg, true), &log);
    dsdf::save_checkpoint(params, {}, cfg.depth, cfg.gamma, checkpoint_path(cfg));

    json metrics;
    metrics["epochs"] = cfg.pretrain_epochs;
    metrics["samples"] = data.size();
    if (!log.empty()) {
        metrics["final_nll"] = log.back().nll;
        metrics["train_accuracy"] = log.back().accuracy;
    }
    metrics["checkpoint"] = checkpoint_path(cfg);
    return metrics;
}

template <typename Scalar>
json cmd_build_hierarchy(const RunConfig& cfg) {
    auto ckpt = load_trained_checkpoint<Scalar>(cfg, false);
    const dsdf::Dataset data = load_data(cfg, cfg.data, ckpt.params.config.num_classes);

    dsdf::HierarchyOptions options;
    options.gamma = cfg.gamma;
    options.per_category_cap = cfg.subsample_cap;
    options.subsample_seed = cfg.seed + 51;
    options.constant_similarity = cfg.constant_similarity;
    const auto result = dsdf::learn_hierarchy(ckpt.params, data, ckpt.depth, options);

    dsdf::save_checkpoint(ckpt.params, result.topologies, ckpt.depth, cfg.gamma,
                          checkpoint_path(cfg));

    json diagnostics = json::array();
    for (const auto& d : result.diagnostics) {
        json jd;
        jd["tree"] = d.tree;
        jd["node"] = d.node;
        jd["neuron"] = d.neuron;
        jd["top_q"] = d.top_q;
        jd["lambda"] = d.lambda;
        diagnostics.push_back(std::move(jd));
    }
    dsdf::atomic_write_file(out_path(cfg, "hierarchy_diagnostics.json"), diagnostics.dump(2));

    json metrics;
    metrics["trees"] = result.topologies.size();
    metrics["depth"] = ckpt.depth;
    metrics["diagnostics"] = out_path(cfg, "hierarchy_diagnostics.json");
    return metrics;
}

template <typename Scalar>
json cmd_train(const RunConfig& cfg) {
    auto ckpt = load_trained_checkpoint<Scalar>(cfg, true);
    const dsdf::Dataset data = load_data(cfg, cfg.data, ckpt.params.config.num_classes);

    dsdf::ForestConfig config;
    config.tree_count = ckpt.params.tree_count();
    config.depth = ckpt.depth;
    config.gamma = ckpt.gamma;
    config.tau = cfg.tau;
    config.optimizer = optimizer_from(cfg, false);
    config.pi_iterations = cfg.pi_iterations;
    config.pi_buffer_cap = cfg.pi_buffer_cap;

    dsdf::EpochCallback<Scalar> on_epoch;
    if (cfg.checkpoint_every > 0) {
        on_epoch = [&](int epoch, const dsdf::ModelParams<Scalar>& p) {
            if ((epoch + 1) % cfg.checkpoint_every == 0)
                dsdf::save_checkpoint(p, ckpt.topologies, ckpt.depth, ckpt.gamma,
                                      checkpoint_path(cfg) + ".epoch" + std::to_string(epoch + 1));
        };
    }
    const auto log = dsdf::train(ckpt.params, ckpt.topologies, data, config, on_epoch);
    dsdf::save_checkpoint(ckpt.params, ckpt.topologies, ckpt.depth, ckpt.gamma,
                          checkpoint_path(cfg));

    std::ostringstream csv;
    csv.precision(17);
    csv << "epoch,phase,nll,accuracy,learning_rate\n";
    for (const auto& row : log)
        csv << row.epoch << "," << row.phase << "," << row.nll << "," << row.accuracy << ","
            << row.learning_rate << "\n";
    dsdf::atomic_write_file(out_path(cfg, "train_metrics.csv"), csv.str());

    json metrics;
    metrics["epochs"] = cfg.epochs;
    metrics["metrics_csv"] = out_path(cfg, "train_metrics.csv");
    if (!log.empty()) {
        metrics["final_nll"] = log.back().nll;
        metrics["final_accuracy"] = log.back().accuracy;
    }
    return metrics;
}

template <typename Scalar>
json cmd_eval(const RunConfig& cfg) {
    const auto ckpt = load_trained_checkpoint<Scalar>(cfg, true);
    const dsdf::Dataset data = load_data(cfg, cfg.data, ckpt.params.config.num_classes);
    if (data.num_classes != ckpt.params.config.num_classes)
        throw dsdf::ValidationError("eval dataset class count differs from the model");

    const int top_k = std::min(5, ckpt.params.config.num_classes);
    std::size_t top1 = 0, top5 = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto [p, tree] =
            dsdf::forest_predict_infer(ckpt.params, ckpt.topologies, dsdf::sample_as<Scalar>(data, i));
        (void)tree;
        std::vector<int> order(p.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
        });
        if (order.front() == data.labels[i]) ++top1;
        for (int k = 0; k < top_k; ++k)
            if (order[static_cast<std::size_t>(k)] == data.labels[i]) {
                ++top5;
                break;
            }
    }
    json metrics;
    metrics["n"] = data.size();
    metrics["top1"] = static_cast<double>(top1) / static_cast<double>(data.size());
    metrics["top5"] = static_cast<double>(top5) / static_cast<double>(data.size());
    return metrics;
}

template <typename Scalar>
json cmd_explain(const RunConfig& cfg, std::optional<int> category, std::optional<int> sample) {
    if (category.has_value() == sample.has_value())
        throw dsdf::UsageError("explain needs exactly one of --category or --sample");
    const auto ckpt = load_trained_checkpoint<Scalar>(cfg, true);
    const dsdf::Dataset data = load_data(cfg, cfg.data, ckpt.params.config.num_classes);

    dsdf::DecisionPath path;
    std::string artifact;
    if (category) {
        if (*category < 0 || *category >= data.num_classes)
            throw dsdf::UsageError("category out of range");
        // the tree most frequently selected over this category's samples
        std::vector<std::size_t> votes(ckpt.topologies.size(), 0);
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (data.labels[i] != *category) continue;
            const auto [p, tree] = dsdf::forest_predict_infer(ckpt.params, ckpt.topologies,
                                                              dsdf::sample_as<Scalar>(data, i));
            (void)p;
            ++votes[static_cast<std::size_t>(tree)];
        }
        std::size_t best_tree = 0;
        for (std::size_t t = 1; t < votes.size(); ++t)
            if (votes[t] > votes[best_tree]) best_tree = t;
        const auto stats = dsdf::category_split_stats(
            ckpt.params, ckpt.topologies[best_tree], static_cast<int>(best_tree), data, *category);
        path = dsdf::category_path(stats, ckpt.topologies[best_tree], static_cast<int>(best_tree));
        path = dsdf::end_decision_node(path, cfg.tau);
        artifact = out_path(cfg, "explain_category_" + std::to_string(*category) + ".json");
    } else {
        if (*sample < 0 || static_cast<std::size_t>(*sample) >= data.size())
            throw dsdf::UsageError("sample index out of range");
        path = dsdf::sample_path(ckpt.params, ckpt.topologies,
                                 dsdf::sample_as<Scalar>(data, static_cast<std::size_t>(*sample)),
                                 cfg.tau);
        artifact = out_path(cfg, "explain_sample_" + std::to_string(*sample) + ".json");
    }

    const json jpath = path_to_json(path);
    dsdf::atomic_write_file(artifact, jpath.dump(2));
    std::cout << path_to_text(path) << "\n";

    json metrics;
    metrics["path"] = jpath;
    metrics["artifact"] = artifact;
    return metrics;
}

template <typename Scalar>
json cmd_cam(const RunConfig& cfg, int sample) {
    const auto ckpt = load_trained_checkpoint<Scalar>(cfg, true);
    const dsdf::Dataset data = load_data(cfg, cfg.data, ckpt.params.config.num_classes);
    if (sample < 0 || static_cast<std::size_t>(sample) >= data.size())
        throw dsdf::UsageError("sample index out of range");

    const auto x = dsdf::sample_as<Scalar>(data, static_cast<std::size_t>(sample));
    const auto [p, tree] = dsdf::forest_predict_infer(ckpt.params, ckpt.topologies, x);
    (void)p;
    const dsdf::SaliencyMap map = dsdf::tree_cam(
        ckpt.params, ckpt.topologies[static_cast<std::size_t>(tree)], tree, x, cfg.tau);

    const std::string pgm = out_path(cfg, "cam_sample_" + std::to_string(sample) + ".pgm");
    const std::string csv = out_path(cfg, "cam_sample_" + std::to_string(sample) + ".csv");
    dsdf::atomic_write_file(pgm, dsdf::saliency_to_pgm(map));
    dsdf::atomic_write_file(csv, dsdf::saliency_to_csv(map));

    json metrics;
    metrics["tree"] = map.tree;
    metrics["end_node"] = map.source_node;
    metrics["pgm"] = pgm;
    metrics["csv"] = csv;
    return metrics;
}

template <typename Scalar>
json cmd_profile_root(const RunConfig& cfg) {
    const auto ckpt = load_trained_checkpoint<Scalar>(cfg, true);
    const dsdf::Dataset data = load_data(cfg, cfg.data, ckpt.params.config.num_classes);
    if (cfg.tree < 0 || static_cast<std::size_t>(cfg.tree) >= ckpt.topologies.size())
        throw dsdf::UsageError("tree index out of range");
    const int window = cfg.window > 0 ? cfg.window : std::min(20, data.num_classes);
    const auto points = dsdf::root_routing_profile(
        ckpt.params, ckpt.topologies[static_cast<std::size_t>(cfg.tree)], cfg.tree, data, window);
    const std::string csv = out_path(cfg, "root_profile.csv");
    dsdf::atomic_write_file(csv, dsdf::profile_to_csv(points));

    json metrics;
    metrics["tree"] = cfg.tree;
    metrics["window"] = window;
    metrics["csv"] = csv;
    return metrics;
}

template <typename Scalar>
json cmd_export(const RunConfig& cfg, const std::string& format) {
    const auto ckpt = load_trained_checkpoint<Scalar>(cfg, true);
    const dsdf::HierarchyFormat fmt = dsdf::hierarchy_format_from_name(format);

    dsdf::HierarchyAnnotations<Scalar> ann;
    ann.leaf_dists = &ckpt.params.leaf_dists;
    std::vector<dsdf::Matrix<Scalar>> betas;
    if (!cfg.data.empty()) {
        const dsdf::Dataset data = load_data(cfg, cfg.data, ckpt.params.config.num_classes);
        dsdf::HierarchyOptions options;
        options.per_category_cap = cfg.subsample_cap;
        options.subsample_seed = cfg.seed + 51;
        betas = dsdf::routing_biases(ckpt.params, data, options);
        ann.beta = &betas;
    }
    const std::string text = dsdf::export_hierarchy(ckpt.topologies, fmt, ann);
    const std::string file =
        out_path(cfg, fmt == dsdf::HierarchyFormat::dot ? "hierarchy.dot" : "hierarchy.json");
    dsdf::atomic_write_file(file, text);

    json metrics;
    metrics["format"] = format;
    metrics["file"] = file;
    metrics["trees"] = ckpt.topologies.size();
    return metrics;
}

// ---- dispatch -------------------------------------------------------------------

template <typename Scalar>
json run_command(const std::string& command, const RunConfig& cfg, std::optional<int> category,
                 std::optional<int> sample, const std::string& format) {
    if (command == "pretrain") return cmd_pretrain<Scalar>(cfg);
    if (command == "build-hierarchy") return cmd_build_hierarchy<Scalar>(cfg);
    if (command == "train") return cmd_train<Scalar>(cfg);
    if (command == "eval") return cmd_eval<Scalar>(cfg);
    if (command == "explain") return cmd_explain<Scalar>(cfg, category, sample);
    if (command == "cam") {
        if (!sample) throw dsdf::UsageError("cam needs --sample");
        return cmd_cam<Scalar>(cfg, *sample);
    }
    if (command == "profile-root") return cmd_profile_root<Scalar>(cfg);
    if (command == "export") return cmd_export<Scalar>(cfg, format);
    throw dsdf::UsageError("unknown command '" + command + "'");
}

} // namespace

int main(int argc, char** argv) {
    RunConfig cfg;
    std::string config_file;

    // the config file provides defaults, explicit flags win
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") config_file = argv[i + 1];
    try {
        if (!config_file.empty()) load_config_file(cfg, config_file);
    } catch (const dsdf::UsageError& e) {
        std::cerr << "error[usage]: " << e.what() << "\n";
        return 2;
    }

    CLI::App app{"dynamic sequential decision forest toolkit"};
    app.require_subcommand(1);

    std::optional<int> category;
    std::optional<int> sample;
    std::string format = "json";

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_file, "key=value config file");
        cmd->add_option("--seed", cfg.seed, "global random seed");
        cmd->add_option("--data", cfg.data, "dataset path (or synthetic spec json)");
        cmd->add_option("--labels", cfg.labels, "idx label file");
        cmd->add_option("--data-format", cfg.data_format, "synthetic | csv | idx");
        cmd->add_option("--checkpoint", cfg.checkpoint, "checkpoint manifest path");
        cmd->add_option("--out-dir", cfg.out_dir, "artifact output directory");
        cmd->add_option("--precision", cfg.precision, "f64 | f32");
        cmd->add_option("--tau", cfg.tau, "end-decision threshold");
        return cmd;
    };

    auto* pretrain = add_common(app.add_subcommand("pretrain", "train extractor + original head"));
    pretrain->add_option("--arch", cfg.arch, "mlp | tiny_conv");
    pretrain->add_option("--input-shape", cfg.input_shape, "flat dim or channels height width");
    pretrain->add_option("--hidden-dims", cfg.hidden_dims, "hidden layer sizes");
    pretrain->add_option("--feature-dim", cfg.feature_dim, "feature dimension F");
    pretrain->add_option("--num-classes", cfg.num_classes, "category count C");
    pretrain->add_option("--trees,-T", cfg.tree_count, "tree count T");
    pretrain->add_option("--depth,-d", cfg.depth, "tree depth d");
    pretrain->add_option("--gamma", cfg.gamma, "significance control parameter");
    pretrain->add_option("--epochs", cfg.pretrain_epochs, "pretraining epochs");
    pretrain->add_option("--lr", cfg.pretrain_lr, "pretraining learning rate");
    pretrain->add_option("--batch-size", cfg.batch_size, "mini-batch size");

    auto* hier = add_common(app.add_subcommand("build-hierarchy", "learn per-tree correspondences"));
    hier->add_option("--gamma", cfg.gamma, "significance control parameter");
    hier->add_option("--subsample-cap", cfg.subsample_cap, "per-category sample cap");
    hier->add_flag("--constant-similarity", cfg.constant_similarity,
                   "score with S == 1 instead of cosine similarity");

    auto* train = add_common(app.add_subcommand("train", "alternated joint optimization"));
    train->add_option("--epochs", cfg.epochs, "training epochs");
    train->add_option("--lr", cfg.lr, "learning rate");
    train->add_option("--batch-size", cfg.batch_size, "mini-batch size");
    train->add_option("--momentum", cfg.momentum, "SGD momentum");
    train->add_option("--weight-decay", cfg.weight_decay, "L2 weight decay");
    train->add_option("--pi-iterations", cfg.pi_iterations, "leaf updates per epoch");
    train->add_option("--checkpoint-every", cfg.checkpoint_every, "epochs between checkpoints");

    add_common(app.add_subcommand("eval", "top-1/top-5 accuracy of single-tree inference"));

    auto* explain = add_common(app.add_subcommand("explain", "deterministic decision paths"));
    explain->add_option("--category", category, "category index");
    explain->add_option("--sample", sample, "sample index");

    auto* cam = add_common(app.add_subcommand("cam", "saliency map for one sample"));
    cam->add_option("--sample", sample, "sample index")->required();

    auto* profile = add_common(app.add_subcommand("profile-root", "root routing profile CSV"));
    profile->add_option("--window", cfg.window, "moving average window");
    profile->add_option("--tree", cfg.tree, "tree index");

    auto* exp = add_common(app.add_subcommand("export", "hierarchy as DOT or JSON"));
    exp->add_option("--format", format, "dot | json");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        if (cfg.precision != "f64" && cfg.precision != "f32")
            throw dsdf::UsageError("precision must be f64 or f32");
        const json metrics =
            cfg.precision == "f64"
                ? run_command<double>(command, cfg, category, sample, format)
                : run_command<float>(command, cfg, category, sample, format);
        print_summary(command, cfg.seed, metrics);
        return 0;
    } catch (const dsdf::UsageError& e) {
        std::cerr << "error[usage]: " << e.what() << "\n";
        return 2;
    } catch (const dsdf::Error& e) {
        std::cerr << "error[" << e.category() << "]: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error[internal]: " << e.what() << "\n";
        return 1;
    }
}
