#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsdf/backbone.hpp"
#include "dsdf/errors.hpp"
#include "dsdf/tree.hpp"

namespace dsdf {

inline constexpr int kCheckpointFormatVersion = 1;

/// Writes via a temporary file and a rename so readers never observe a
/// partially written artifact.
inline void atomic_write_file(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot open '" + tmp + "' for writing");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw InputError("failed writing '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

namespace detail {

inline void append_le64(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

inline double read_le64(const std::string& blob, std::size_t offset) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b)
        bits = (bits << 8) | static_cast<unsigned char>(blob[offset + static_cast<std::size_t>(b)]);
    return std::bit_cast<double>(bits);
}

/// Every persisted tensor of a model, in a fixed order shared by save and
/// load. Shapes are logical: conv kernels report (out, in, 3, 3).
template <typename Scalar>
struct TensorRef {
    std::string name;
    std::vector<std::size_t> shape;
    Vector<Scalar>* data;
};

template <typename Scalar>
std::vector<TensorRef<Scalar>> enumerate_tensors(ModelParams<Scalar>& params) {
    std::vector<TensorRef<Scalar>> out;
    auto add_affine = [&](const std::string& name, AffineLayer<Scalar>& layer) {
        out.push_back({name + ".weight", {layer.weight.rows(), layer.weight.cols()},
                       &layer.weight.data()});
        if (!layer.bias.empty()) out.push_back({name + ".bias", {layer.bias.size()}, &layer.bias});
    };
    for (std::size_t i = 0; i < params.theta.dense.size(); ++i)
        add_affine("theta.dense" + std::to_string(i), params.theta.dense[i]);
    for (std::size_t i = 0; i < params.theta.conv.size(); ++i) {
        auto& layer = params.theta.conv[i];
        out.push_back({"theta.conv" + std::to_string(i) + ".weight",
                       {static_cast<std::size_t>(layer.out_channels),
                        static_cast<std::size_t>(layer.in_channels), 3, 3},
                       &layer.weight.data()});
        out.push_back({"theta.conv" + std::to_string(i) + ".bias", {layer.bias.size()}, &layer.bias});
    }
    add_affine("theta.feature", params.theta.feature);
    add_affine("omega", params.omega);
    for (std::size_t t = 0; t < params.heads.size(); ++t)
        add_affine("head" + std::to_string(t), params.heads[t]);
    add_affine("tsm.l1", params.tsm.l1);
    add_affine("tsm.l2", params.tsm.l2);
    add_affine("tsm.l3", params.tsm.l3);
    for (std::size_t t = 0; t < params.leaf_dists.size(); ++t)
        out.push_back({"pi" + std::to_string(t),
                       {params.leaf_dists[t].rows(), params.leaf_dists[t].cols()},
                       &params.leaf_dists[t].data()});
    return out;
}

inline nlohmann::json config_to_json(const BackboneConfig& config) {
    nlohmann::json j;
    j["arch"] = arch_name(config.arch);
    if (config.input_shape.spatial)
        j["input_shape"] = {config.input_shape.channels, config.input_shape.height,
                            config.input_shape.width};
    else
        j["input_shape"] = {config.input_shape.flat_dim()};
    j["hidden_dims"] = config.hidden_dims;
    j["feature_dim"] = config.feature_dim;
    j["num_classes"] = config.num_classes;
    j["head_bias"] = config.head_bias;
    j["seed"] = config.seed;
    return j;
}

inline BackboneConfig config_from_json(const nlohmann::json& j) {
    BackboneConfig config;
    config.arch = arch_from_name(j.at("arch").get<std::string>());
    const auto shape = j.at("input_shape").get<std::vector<int>>();
    if (shape.size() == 3)
        config.input_shape = InputShape::image(shape[0], shape[1], shape[2]);
    else if (shape.size() == 1)
        config.input_shape = InputShape::flat(shape[0]);
    else
        throw ManifestError("input_shape must have 1 or 3 entries");
    config.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
    config.feature_dim = j.at("feature_dim").get<int>();
    config.num_classes = j.at("num_classes").get<int>();
    config.head_bias = j.at("head_bias").get<bool>();
    config.seed = j.at("seed").get<std::uint64_t>();
    return config;
}

} // namespace detail

template <typename Scalar>
struct Checkpoint {
    ModelParams<Scalar> params;
    /// Empty until a hierarchy has been learned.
    std::vector<TreeTopology> topologies;
    int depth = 2;
    double gamma = 10.0;
};

/// Saves `path` (JSON manifest) plus `path`.bin (little-endian float64 blob).
/// Both writes are atomic; the manifest references the blob by file name.
template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& params, const std::vector<TreeTopology>& topologies,
                     int depth, double gamma, const std::string& path) {
    auto& mutable_params = const_cast<ModelParams<Scalar>&>(params);
    const auto tensors = detail::enumerate_tensors(mutable_params);

    std::string blob;
    nlohmann::json index = nlohmann::json::array();
    for (const auto& t : tensors) {
        std::size_t numel = 1;
        for (std::size_t s : t.shape) numel *= s;
        if (numel != t.data->size())
            throw InvariantError("checkpoint: tensor " + t.name + " shape/data mismatch");
        nlohmann::json entry;
        entry["name"] = t.name;
        entry["offset"] = blob.size();
        entry["shape"] = t.shape;
        index.push_back(std::move(entry));
        for (const Scalar v : *t.data) detail::append_le64(blob, static_cast<double>(v));
    }

    const std::string blob_name = std::filesystem::path(path).filename().string() + ".bin";
    nlohmann::json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["precision"] = std::is_same_v<Scalar, double> ? "f64" : "f32";
    manifest["backbone"] = detail::config_to_json(params.config);
    manifest["forest"] = {{"T", params.tree_count()},
                          {"d", depth},
                          {"gamma", gamma},
                          {"tsm_sigmoid_normalize", params.tsm.sigmoid_normalize}};
    nlohmann::json phi = nlohmann::json::array();
    for (const auto& topo : topologies) {
        topo.validate();
        if (topo.depth != depth) throw InvariantError("checkpoint: topology depth mismatch");
        phi.push_back(topo.phi);
    }
    manifest["phi"] = std::move(phi);
    manifest["blob"] = blob_name;
    manifest["tensors"] = std::move(index);

    atomic_write_file(path + ".bin", blob);
    atomic_write_file(path, manifest.dump(2));
}

template <typename Scalar = double>
Checkpoint<Scalar> load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ManifestError("cannot open checkpoint manifest '" + path + "'");
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError(path + ": " + e.what());
    }

    Checkpoint<Scalar> ckpt;
    try {
        const int version = manifest.at("format_version").get<int>();
        if (version != kCheckpointFormatVersion)
            throw VersionError("checkpoint format_version " + std::to_string(version) +
                               " is not supported (expected " +
                               std::to_string(kCheckpointFormatVersion) + ")");
        const BackboneConfig config = detail::config_from_json(manifest.at("backbone"));
        const auto& forest = manifest.at("forest");
        const int tree_count = forest.at("T").get<int>();
        ckpt.depth = forest.at("d").get<int>();
        ckpt.gamma = forest.at("gamma").get<double>();
        ckpt.params = init_model<Scalar>(config, tree_count, ckpt.depth, config.seed);
        ckpt.params.tsm.sigmoid_normalize = forest.at("tsm_sigmoid_normalize").get<bool>();
        for (const auto& jphi : manifest.at("phi")) {
            TreeTopology topo;
            topo.depth = ckpt.depth;
            topo.phi = jphi.get<std::vector<int>>();
            topo.validate();
            ckpt.topologies.push_back(std::move(topo));
        }
        if (!ckpt.topologies.empty() &&
            ckpt.topologies.size() != static_cast<std::size_t>(tree_count))
            throw ManifestError("checkpoint: phi table count differs from tree count");

        const std::string blob_name = manifest.at("blob").get<std::string>();
        const std::string blob_path =
            (std::filesystem::path(path).parent_path() / blob_name).string();
        std::ifstream blob_in(blob_path, std::ios::binary);
        if (!blob_in) throw ManifestError("cannot open checkpoint blob '" + blob_path + "'");
        std::string blob((std::istreambuf_iterator<char>(blob_in)),
                         std::istreambuf_iterator<char>());

        const auto tensors = detail::enumerate_tensors(ckpt.params);
        const auto& index = manifest.at("tensors");
        if (index.size() != tensors.size())
            throw ManifestError("checkpoint: tensor index has " + std::to_string(index.size()) +
                                " entries, model needs " + std::to_string(tensors.size()));
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            const auto& entry = index[i];
            if (entry.at("name").get<std::string>() != tensors[i].name)
                throw ManifestError("checkpoint: tensor " + std::to_string(i) + " is '" +
                                    entry.at("name").get<std::string>() + "', expected '" +
                                    tensors[i].name + "'");
            if (entry.at("shape").get<std::vector<std::size_t>>() != tensors[i].shape)
                throw ManifestError("checkpoint: tensor " + tensors[i].name + " shape mismatch");
            const std::size_t offset = entry.at("offset").get<std::size_t>();
            const std::size_t bytes = tensors[i].data->size() * 8;
            if (offset + bytes > blob.size())
                throw TruncatedBlobError("checkpoint blob ends at byte " +
                                         std::to_string(blob.size()) + ", tensor " +
                                         tensors[i].name + " needs bytes [" +
                                         std::to_string(offset) + ", " +
                                         std::to_string(offset + bytes) + ")");
            for (std::size_t j = 0; j < tensors[i].data->size(); ++j)
                (*tensors[i].data)[j] = static_cast<Scalar>(detail::read_le64(blob, offset + 8 * j));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError(path + ": " + e.what());
    }
    return ckpt;
}

} // namespace dsdf
