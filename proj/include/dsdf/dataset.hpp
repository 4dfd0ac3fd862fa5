#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsdf/errors.hpp"
#include "dsdf/matrix.hpp"

namespace dsdf {

/// Input geometry: either a flat vector or a (channels, height, width) image.
struct InputShape {
    int channels = 0;
    int height = 0;
    int width = 0;
    bool spatial = false;

    static InputShape flat(int dim) { return InputShape{dim, 1, 1, false}; }
    static InputShape image(int c, int h, int w) { return InputShape{c, h, w, true}; }

    int flat_dim() const noexcept { return channels * height * width; }

    bool operator==(const InputShape&) const = default;
};

/// In-memory labelled dataset. Samples are stored flattened in double
/// precision regardless of the model scalar type.
struct Dataset {
    std::vector<std::vector<double>> samples;
    std::vector<int> labels;
    int num_classes = 0;
    InputShape shape;
    std::vector<std::string> class_names; // optional

    std::size_t size() const noexcept { return samples.size(); }

    void validate() const {
        if (samples.size() != labels.size())
            throw ValidationError("dataset: samples and labels differ in length");
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] < 0 || labels[i] >= num_classes)
                throw ValidationError("dataset: label " + std::to_string(labels[i]) +
                                      " of sample " + std::to_string(i) + " is outside [0," +
                                      std::to_string(num_classes) + ")");
    }

    /// Labels present in the set, useful for coverage checks.
    std::vector<int> missing_categories() const {
        std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
        for (int y : labels) seen[static_cast<std::size_t>(y)] = true;
        std::vector<int> missing;
        for (int c = 0; c < num_classes; ++c)
            if (!seen[static_cast<std::size_t>(c)]) missing.push_back(c);
        return missing;
    }
};

template <typename Scalar>
Vector<Scalar> sample_as(const Dataset& data, std::size_t i) {
    const auto& s = data.samples[i];
    if constexpr (std::is_same_v<Scalar, double>) {
        return s;
    } else {
        Vector<Scalar> out(s.size());
        for (std::size_t j = 0; j < s.size(); ++j) out[j] = static_cast<Scalar>(s[j]);
        return out;
    }
}

// ---- IDX (MNIST-style) -----------------------------------------------------

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path, std::size_t& offset) {
    std::array<unsigned char, 4> buf{};
    in.read(reinterpret_cast<char*>(buf.data()), 4);
    if (!in)
        throw ParseError(path + ": truncated header at byte " + std::to_string(offset));
    offset += 4;
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

} // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads a big-endian IDX image file (magic 0x00000803). Pixels are scaled
/// from [0,255] to [0,1]; the sample shape is (1, rows, cols).
inline std::vector<std::vector<double>> load_idx_images(const std::string& path, InputShape& shape) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open IDX file '" + path + "'");
    std::size_t offset = 0;
    const std::uint32_t magic = detail::read_be32(in, path, offset);
    if (magic != kIdxImageMagic)
        throw ParseError(path + ": bad image magic at byte 0 (got 0x" +
                         [&] { std::ostringstream s; s << std::hex << magic; return s.str(); }() + ")");
    const std::uint32_t count = detail::read_be32(in, path, offset);
    const std::uint32_t rows = detail::read_be32(in, path, offset);
    const std::uint32_t cols = detail::read_be32(in, path, offset);
    shape = InputShape::image(1, static_cast<int>(rows), static_cast<int>(cols));

    std::vector<std::vector<double>> samples(count);
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t i = 0; i < count; ++i) {
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!in)
            throw ParseError(path + ": truncated image data at byte " + std::to_string(offset));
        offset += buf.size();
        samples[i].resize(buf.size());
        for (std::size_t j = 0; j < buf.size(); ++j) samples[i][j] = buf[j] / 255.0;
    }
    return samples;
}

/// Reads a big-endian IDX label file (magic 0x00000801).
inline std::vector<int> load_idx_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open IDX file '" + path + "'");
    std::size_t offset = 0;
    const std::uint32_t magic = detail::read_be32(in, path, offset);
    if (magic != kIdxLabelMagic)
        throw ParseError(path + ": bad label magic at byte 0");
    const std::uint32_t count = detail::read_be32(in, path, offset);
    std::vector<unsigned char> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count));
    if (!in) throw ParseError(path + ": truncated label data at byte " + std::to_string(offset));
    return std::vector<int>(buf.begin(), buf.end());
}

/// IDX image + label pair. `num_classes` of 0 infers C from the labels.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        int num_classes = 0) {
    Dataset data;
    data.samples = load_idx_images(images_path, data.shape);
    data.labels = load_idx_labels(labels_path);
    if (data.samples.size() != data.labels.size())
        throw ValidationError("IDX image/label count mismatch: " + std::to_string(data.samples.size()) +
                              " vs " + std::to_string(data.labels.size()));
    int max_label = -1;
    for (int y : data.labels) max_label = std::max(max_label, y);
    data.num_classes = num_classes > 0 ? num_classes : max_label + 1;
    data.validate();
    return data;
}

// ---- CSV --------------------------------------------------------------------

/// Rows of `label,feature,feature,...`. All rows must agree on width.
inline Dataset load_csv(const std::string& path, int num_classes = 0) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open CSV file '" + path + "'");
    Dataset data;
    std::string line;
    std::size_t line_no = 0;
    std::size_t width = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream row(line);
        std::string cell;
        std::vector<double> values;
        while (std::getline(row, cell, ',')) {
            try {
                std::size_t pos = 0;
                values.push_back(std::stod(cell, &pos));
                if (pos != cell.size()) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw ParseError(path + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
            }
        }
        if (values.size() < 2)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected label,feature...");
        if (width == 0) width = values.size();
        if (values.size() != width)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                             std::to_string(width) + " columns, got " + std::to_string(values.size()));
        const double label_raw = values.front();
        const int label = static_cast<int>(label_raw);
        if (label_raw != label || label < 0)
            throw ParseError(path + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
        data.labels.push_back(label);
        data.samples.emplace_back(values.begin() + 1, values.end());
    }
    if (data.samples.empty()) throw ParseError(path + ": no data rows");
    int max_label = -1;
    for (int y : data.labels) max_label = std::max(max_label, y);
    data.num_classes = num_classes > 0 ? num_classes : max_label + 1;
    data.shape = InputShape::flat(static_cast<int>(width - 1));
    data.validate();
    return data;
}

// ---- synthetic Gaussian blobs ------------------------------------------------

/// Gaussian blob generator. Classes grouped into superclasses share a mean
/// direction: class means are `separation * u_g + separation/2 * w_c` where
/// u_g is the group axis (opposite signs for a two-group layout) and w_c is a
/// per-class axis orthogonal to every group axis, so members of a superclass
/// stay closer to each other than to any other group. Unit per-coordinate
/// noise, so `separation` is expressed in noise standard deviations.
struct SyntheticSpec {
    int classes = 2;
    std::vector<std::vector<int>> superclasses; // defaults to one group per class
    int dim = 8;
    int n_per_class = 100;
    double separation = 3.0;
    std::uint64_t seed = 1;

    static SyntheticSpec from_json(const nlohmann::json& j);
    static SyntheticSpec from_file(const std::string& path);
};

inline SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
    SyntheticSpec spec;
    try {
        if (j.contains("classes")) spec.classes = j.at("classes").get<int>();
        else if (j.contains("blobs")) spec.classes = j.at("blobs").get<int>();
        if (j.contains("superclasses"))
            spec.superclasses = j.at("superclasses").get<std::vector<std::vector<int>>>();
        if (j.contains("dim")) spec.dim = j.at("dim").get<int>();
        if (j.contains("n_per_class")) spec.n_per_class = j.at("n_per_class").get<int>();
        if (j.contains("separation")) spec.separation = j.at("separation").get<double>();
        if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("synthetic spec: ") + e.what());
    }
    return spec;
}

inline SyntheticSpec SyntheticSpec::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open synthetic spec '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return from_json(j);
}

inline Dataset make_synthetic(const SyntheticSpec& spec) {
    if (spec.classes < 2) throw ConfigError("synthetic spec: need at least 2 classes");
    if (spec.n_per_class < 1) throw ConfigError("synthetic spec: n_per_class must be positive");

    auto groups = spec.superclasses;
    if (groups.empty())
        for (int c = 0; c < spec.classes; ++c) groups.push_back({c});

    std::vector<int> group_of(static_cast<std::size_t>(spec.classes), -1);
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (int c : groups[g]) {
            if (c < 0 || c >= spec.classes)
                throw ConfigError("synthetic spec: superclass member " + std::to_string(c) +
                                  " out of range");
            if (group_of[static_cast<std::size_t>(c)] != -1)
                throw ConfigError("synthetic spec: class " + std::to_string(c) +
                                  " appears in two superclasses");
            group_of[static_cast<std::size_t>(c)] = static_cast<int>(g);
        }
    for (int c = 0; c < spec.classes; ++c)
        if (group_of[static_cast<std::size_t>(c)] == -1)
            throw ConfigError("synthetic spec: class " + std::to_string(c) +
                              " missing from superclasses");

    // Two groups share one axis with opposite signs; otherwise each group
    // gets its own axis. Every class gets a private orthogonal axis.
    const bool opposite = groups.size() == 2;
    const int group_axes = opposite ? 1 : static_cast<int>(groups.size());
    const int needed = group_axes + spec.classes;
    if (spec.dim < needed)
        throw ConfigError("synthetic spec: dim must be >= " + std::to_string(needed) +
                          " for this superclass layout");

    std::vector<std::vector<double>> means(static_cast<std::size_t>(spec.classes),
                                           std::vector<double>(static_cast<std::size_t>(spec.dim), 0.0));
    for (int c = 0; c < spec.classes; ++c) {
        const int g = group_of[static_cast<std::size_t>(c)];
        if (opposite)
            means[static_cast<std::size_t>(c)][0] = (g == 0 ? 1.0 : -1.0) * spec.separation;
        else
            means[static_cast<std::size_t>(c)][static_cast<std::size_t>(g)] = spec.separation;
        means[static_cast<std::size_t>(c)][static_cast<std::size_t>(group_axes + c)] =
            spec.separation / 2.0;
    }

    Rng rng(spec.seed);
    Dataset data;
    data.num_classes = spec.classes;
    data.shape = InputShape::flat(spec.dim);
    data.samples.reserve(static_cast<std::size_t>(spec.classes) * spec.n_per_class);
    for (int c = 0; c < spec.classes; ++c) {
        for (int i = 0; i < spec.n_per_class; ++i) {
            std::vector<double> x(static_cast<std::size_t>(spec.dim));
            for (int d = 0; d < spec.dim; ++d)
                x[static_cast<std::size_t>(d)] =
                    means[static_cast<std::size_t>(c)][static_cast<std::size_t>(d)] + rng.normal();
            data.samples.push_back(std::move(x));
            data.labels.push_back(c);
        }
    }
    data.validate();
    return data;
}

} // namespace dsdf
