#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "recast/errors.hpp"
#include "recast/mimicry.hpp"
#include "recast/model.hpp"
#include "recast/til.hpp"

namespace recast {

// Checkpoint container: "RCST" magic, u32 version, u64 manifest length, JSON
// manifest, then the flat little-endian f64 payload. The manifest carries the
// kind, the architecture, and the payload section order; the payload holds
// every tensor back to back in manifest order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
    put_u64(out, std::bit_cast<std::uint64_t>(d));
}

class ByteReader {
  public:
    explicit ByteReader(std::string data) : data_(std::move(data)) {}

    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string take(std::size_t n) {
        if (pos_ + n > data_.size()) throw format_error("checkpoint: truncated file");
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool exhausted() const { return pos_ == data_.size(); }

  private:
    std::uint8_t byte() {
        if (pos_ >= data_.size()) throw format_error("checkpoint: truncated file");
        return static_cast<std::uint8_t>(data_[pos_++]);
    }

    std::string data_;
    std::size_t pos_ = 0;
};

inline void append_tensor(std::string& payload, const Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
        if (!std::isfinite(t[i])) throw value_error("checkpoint: non-finite value in tensor");
        put_f64(payload, t[i]);
    }
}

inline Tensor read_tensor(ByteReader& r, std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) {
        t[i] = r.f64();
        if (!std::isfinite(t[i])) throw format_error("checkpoint: non-finite value in payload");
    }
    return t;
}

inline void write_file(const std::string& path, const nlohmann::json& manifest,
                       const std::string& payload) {
    const std::string manifest_text = manifest.dump();
    std::string out;
    out += "RCST";
    put_u32(out, kCheckpointVersion);
    put_u64(out, manifest_text.size());
    out += manifest_text;
    out += payload;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw format_error("checkpoint: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw format_error("checkpoint: write failed for " + path);
}

struct CheckpointFile {
    nlohmann::json manifest;
    ByteReader payload;
};

inline CheckpointFile read_file(const std::string& path, const std::string& expected_kind) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw format_error("checkpoint: cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    ByteReader r(std::move(data));
    if (r.take(4) != "RCST") throw format_error("checkpoint: bad magic in " + path);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw format_error("checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint64_t mlen = r.u64();
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(r.take(mlen));
    } catch (const nlohmann::json::exception& e) {
        throw format_error(std::string("checkpoint: bad manifest: ") + e.what());
    }
    if (!manifest.contains("kind") || manifest["kind"] != expected_kind) {
        throw format_error("checkpoint: expected kind '" + expected_kind + "' in " + path);
    }
    return CheckpointFile{std::move(manifest), std::move(r)};
}

} // namespace detail

// --- config <-> json ---------------------------------------------------------

inline nlohmann::json config_to_json(const RecastConfig& config) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : config.modules) {
        nlohmann::json mods = nlohmann::json::array();
        for (const auto& m : layer) {
            nlohmann::json j;
            switch (m.type) {
                case ModuleType::FullyConnected:
                    j = {{"type", "fc"}, {"d_out", m.d_out}, {"d_in", m.d_in}};
                    break;
                case ModuleType::AttentionQKV:
                    j = {{"type", "qkv"}, {"d", m.d}};
                    break;
                case ModuleType::ConvKernel:
                    j = {{"type", "conv"},
                         {"c_out", m.c_out},
                         {"c_in", m.c_in},
                         {"kernel", m.k}};
                    break;
            }
            mods.push_back(std::move(j));
        }
        layers.push_back(std::move(mods));
    }
    return {{"layers", config.layers},
            {"groups", config.groups},
            {"templates_per_bank", config.templates_per_bank},
            {"coefficient_sets", config.coefficient_sets},
            {"modules", std::move(layers)}};
}

inline RecastConfig config_from_json(const nlohmann::json& j) {
    RecastConfig config;
    try {
        config.layers = j.at("layers").get<std::size_t>();
        config.groups = j.at("groups").get<std::size_t>();
        config.templates_per_bank = j.at("templates_per_bank").get<std::size_t>();
        config.coefficient_sets = j.at("coefficient_sets").get<std::size_t>();
        for (const auto& layer : j.at("modules")) {
            std::vector<ModuleKind> mods;
            for (const auto& m : layer) {
                const std::string type = m.at("type").get<std::string>();
                if (type == "fc") {
                    mods.push_back(ModuleKind::fc(m.at("d_out").get<std::size_t>(),
                                                  m.at("d_in").get<std::size_t>()));
                } else if (type == "qkv") {
                    mods.push_back(ModuleKind::qkv(m.at("d").get<std::size_t>()));
                } else if (type == "conv") {
                    mods.push_back(ModuleKind::conv(m.at("c_out").get<std::size_t>(),
                                                    m.at("c_in").get<std::size_t>(),
                                                    m.at("kernel").get<std::size_t>()));
                } else {
                    throw format_error("checkpoint: unknown module type '" + type + "'");
                }
            }
            config.modules.push_back(std::move(mods));
        }
    } catch (const nlohmann::json::exception& e) {
        throw format_error(std::string("checkpoint: malformed config: ") + e.what());
    }
    config.validate();
    return config;
}

// --- model -------------------------------------------------------------------

inline void save_model(const RecastModel& model, const std::string& path) {
    std::string payload;
    for (const auto& bank : model.banks) {
        for (const auto& t : bank->templates) detail::append_tensor(payload, t);
    }
    for (const auto& layer : model.coefficients) {
        for (const auto& c : layer) detail::append_tensor(payload, c);
    }
    for (const auto& layer : model.biases) {
        for (const auto& b : layer) detail::append_tensor(payload, b);
    }
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& [task_id, head] : model.heads) {
        detail::append_tensor(payload, head.weight);
        detail::append_tensor(payload, head.bias);
        heads.push_back({{"task", task_id},
                         {"classes", head.weight.rows()},
                         {"width", head.weight.cols()}});
    }
    nlohmann::json manifest = {{"kind", "model"},
                               {"config", config_to_json(model.config)},
                               {"heads", std::move(heads)}};
    detail::write_file(path, manifest, payload);
}

inline RecastModel load_model(const std::string& path) {
    auto file = detail::read_file(path, "model");
    const RecastConfig config = config_from_json(file.manifest.at("config"));
    RecastModel model = build_model(config, 0);
    for (auto& bank : model.banks) {
        for (auto& t : bank->templates) {
            t = detail::read_tensor(file.payload, t.shape());
        }
    }
    for (auto& layer : model.coefficients) {
        for (auto& c : layer) c = detail::read_tensor(file.payload, c.shape());
    }
    for (auto& layer : model.biases) {
        for (auto& b : layer) b = detail::read_tensor(file.payload, b.shape());
    }
    model.heads.clear();
    for (const auto& h : file.manifest.value("heads", nlohmann::json::array())) {
        ClassifierHead head;
        const auto classes = h.at("classes").get<std::size_t>();
        const auto width = h.at("width").get<std::size_t>();
        head.weight = detail::read_tensor(file.payload, {classes, width});
        head.bias = detail::read_tensor(file.payload, {classes});
        model.heads[h.at("task").get<int>()] = std::move(head);
    }
    if (!file.payload.exhausted()) throw format_error("checkpoint: trailing payload bytes");
    return model;
}

// --- teacher -----------------------------------------------------------------

inline void save_teacher(const TeacherModel& teacher, const std::string& path) {
    teacher.validate();
    std::string payload;
    for (const auto& layer : teacher.weights) {
        for (const auto& w : layer) detail::append_tensor(payload, w);
    }
    for (const auto& layer : teacher.biases) {
        for (const auto& b : layer) detail::append_tensor(payload, b);
    }
    nlohmann::json manifest = {{"kind", "teacher"}, {"config", config_to_json(teacher.config)}};
    detail::write_file(path, manifest, payload);
}

inline TeacherModel load_teacher(const std::string& path) {
    auto file = detail::read_file(path, "teacher");
    TeacherModel teacher;
    teacher.config = config_from_json(file.manifest.at("config"));
    for (std::size_t l = 0; l < teacher.config.layers; ++l) {
        std::vector<Tensor> row;
        for (const auto& m : teacher.config.modules[l]) {
            row.push_back(detail::read_tensor(file.payload, m.weight_shape()));
        }
        teacher.weights.push_back(std::move(row));
    }
    for (std::size_t l = 0; l < teacher.config.layers; ++l) {
        std::vector<Tensor> row;
        for (const auto& m : teacher.config.modules[l]) {
            row.push_back(detail::read_tensor(file.payload, {m.bias_size()}));
        }
        teacher.biases.push_back(std::move(row));
    }
    if (!file.payload.exhausted()) throw format_error("checkpoint: trailing payload bytes");
    teacher.validate();
    return teacher;
}

// --- task snapshot -----------------------------------------------------------

inline void save_snapshot(const TaskSnapshot& snap, const std::string& path) {
    std::string payload;
    nlohmann::json coeff_shapes = nlohmann::json::array();
    for (const auto& layer : snap.coefficients) {
        nlohmann::json row = nlohmann::json::array();
        for (const auto& c : layer) {
            detail::append_tensor(payload, c);
            row.push_back(c.shape());
        }
        coeff_shapes.push_back(std::move(row));
    }
    detail::append_tensor(payload, snap.head.weight);
    detail::append_tensor(payload, snap.head.bias);
    nlohmann::json manifest = {{"kind", "snapshot"},
                               {"task", snap.task_id},
                               {"test_accuracy", snap.test_accuracy},
                               {"coefficients", std::move(coeff_shapes)},
                               {"head", {{"classes", snap.head.weight.rows()},
                                         {"width", snap.head.weight.cols()}}}};
    detail::write_file(path, manifest, payload);
}

/// Loads a snapshot and verifies its coefficient topology against the model.
inline TaskSnapshot load_snapshot(const std::string& path, const RecastModel& model) {
    auto file = detail::read_file(path, "snapshot");
    TaskSnapshot snap;
    try {
        snap.task_id = file.manifest.at("task").get<int>();
        snap.test_accuracy = file.manifest.at("test_accuracy").get<double>();
        for (const auto& row : file.manifest.at("coefficients")) {
            std::vector<Tensor> layer;
            for (const auto& shape : row) {
                layer.push_back(detail::read_tensor(
                    file.payload, shape.get<std::vector<std::size_t>>()));
            }
            snap.coefficients.push_back(std::move(layer));
        }
        const auto& h = file.manifest.at("head");
        const auto classes = h.at("classes").get<std::size_t>();
        const auto width = h.at("width").get<std::size_t>();
        snap.head.weight = detail::read_tensor(file.payload, {classes, width});
        snap.head.bias = detail::read_tensor(file.payload, {classes});
    } catch (const nlohmann::json::exception& e) {
        throw format_error(std::string("checkpoint: malformed snapshot manifest: ") + e.what());
    }
    if (!file.payload.exhausted()) throw format_error("checkpoint: trailing payload bytes");

    if (snap.coefficients.size() != model.config.layers) {
        throw topology_error("snapshot: layer count does not match model");
    }
    for (std::size_t l = 0; l < model.config.layers; ++l) {
        if (snap.coefficients[l].size() != model.coefficients[l].size()) {
            throw topology_error("snapshot: module count mismatch at layer " +
                                 std::to_string(l + 1));
        }
        for (std::size_t m = 0; m < snap.coefficients[l].size(); ++m) {
            if (!snap.coefficients[l][m].same_shape(model.coefficients[l][m])) {
                throw topology_error("snapshot: coefficient shape mismatch at layer " +
                                     std::to_string(l + 1));
            }
        }
    }
    return snap;
}

} // namespace recast
