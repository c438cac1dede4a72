#pragma once

#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "recast/errors.hpp"
#include "recast/mimicry.hpp"
#include "recast/model.hpp"
#include "recast/persistence.hpp"
#include "recast/til.hpp"

namespace recast {

/// Settings for one TIL run: suite shape, training mode, and budget.
struct TilSettings {
    SuiteConfig suite;
    TrainMode mode = TrainMode::CoefficientsAndHead;
    long long budget = 0;
    AdaptConfig adapt;
    TeacherTrainConfig teacher;
};

struct RunConfig {
    RecastConfig recast;
    MimicryConfig mimicry;
    double similarity_threshold = 0.99;
    TilSettings til;
    std::string output_dir = ".";
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!obj.is_object()) throw value_error("run config: '" + where + "' must be an object");
    for (const auto& [key, _] : obj.items()) {
        if (!allowed.count(key)) {
            throw value_error("run config: unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
inline T positive(const nlohmann::json& obj, const std::string& key, T fallback,
                  const std::string& where) {
    const T v = obj.value(key, fallback);
    if (v <= T(0)) throw value_error("run config: " + where + "." + key + " must be positive");
    return v;
}

inline double nonneg(const nlohmann::json& obj, const std::string& key, double fallback,
                     const std::string& where) {
    const double v = obj.value(key, fallback);
    if (v < 0.0) throw value_error("run config: " + where + "." + key + " must be >= 0");
    return v;
}

inline RecastConfig parse_recast(const nlohmann::json& j) {
    check_keys(j, {"layers", "width", "input_dim", "groups", "templates_per_bank",
                   "coefficient_sets", "modules"},
               "recast");
    const auto layers = positive<std::size_t>(j, "layers", 0, "recast");
    const auto groups = positive<std::size_t>(j, "groups", 0, "recast");
    const auto n = positive<std::size_t>(j, "templates_per_bank", 0, "recast");
    const auto K = positive<std::size_t>(j, "coefficient_sets", 0, "recast");
    if (j.contains("modules")) {
        if (j.contains("width") || j.contains("input_dim")) {
            throw value_error("run config: recast.modules excludes width/input_dim");
        }
        RecastConfig config;
        config.layers = layers;
        config.groups = groups;
        config.templates_per_bank = n;
        config.coefficient_sets = K;
        for (const auto& layer : j.at("modules")) {
            std::vector<ModuleKind> mods;
            for (const auto& m : layer) {
                check_keys(m, {"type", "d_out", "d_in", "d", "c_out", "c_in", "kernel"},
                           "recast.modules[]");
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
                    throw value_error("run config: unknown module type '" + type + "'");
                }
            }
            config.modules.push_back(std::move(mods));
        }
        config.validate();
        return config;
    }
    const auto width = positive<std::size_t>(j, "width", 0, "recast");
    const auto input_dim = positive<std::size_t>(j, "input_dim", 0, "recast");
    return RecastConfig::fc_stack(layers, width, input_dim, groups, n, K);
}

inline MimicryConfig parse_mimicry(const nlohmann::json& j, double& threshold) {
    check_keys(j, {"loss", "beta", "learning_rate", "epochs", "sigma", "noise", "seed",
                   "similarity_threshold"},
               "mimicry");
    MimicryConfig cfg;
    const std::string loss = j.value("loss", std::string("smoothl1"));
    if (loss == "smoothl1") {
        cfg.loss = MimicryLoss::SmoothL1;
    } else if (loss == "mse") {
        cfg.loss = MimicryLoss::Mse;
    } else {
        throw value_error("run config: mimicry.loss must be smoothl1 or mse");
    }
    cfg.beta = positive<double>(j, "beta", cfg.beta, "mimicry");
    cfg.learning_rate = positive<double>(j, "learning_rate", cfg.learning_rate, "mimicry");
    cfg.max_epochs = j.value("epochs", cfg.max_epochs);
    cfg.sigma = nonneg(j, "sigma", cfg.sigma, "mimicry");
    cfg.noise_enabled = j.value("noise", cfg.sigma > 0.0);
    cfg.seed = j.value("seed", cfg.seed);
    threshold = j.value("similarity_threshold", threshold);
    if (threshold <= 0.0 || threshold > 1.0) {
        throw value_error("run config: mimicry.similarity_threshold must be in (0, 1]");
    }
    return cfg;
}

inline TilSettings parse_til(const nlohmann::json& j, std::size_t input_dim) {
    check_keys(j, {"tasks", "classes", "dim", "shift", "seed", "train_per_class",
                   "val_per_class", "test_per_class", "sigma", "separation", "mode",
                   "budget", "epochs", "learning_rate", "weight_decay", "teacher"},
               "til");
    TilSettings s;
    s.suite.tasks = positive<std::size_t>(j, "tasks", s.suite.tasks, "til");
    s.suite.classes = positive<std::size_t>(j, "classes", s.suite.classes, "til");
    if (s.suite.classes < 2) throw value_error("run config: til.classes must be >= 2");
    s.suite.dim = positive<std::size_t>(j, "dim", input_dim, "til");
    if (s.suite.dim != input_dim) {
        throw value_error("run config: til.dim must match the backbone input width");
    }
    const std::string shift = j.value("shift", std::string("rotation"));
    if (shift == "rotation") {
        s.suite.shift = ShiftKind::Rotation;
    } else if (shift == "mean-shuffle") {
        s.suite.shift = ShiftKind::MeanShuffle;
    } else {
        throw value_error("run config: til.shift must be rotation or mean-shuffle");
    }
    s.suite.seed = j.value("seed", s.suite.seed);
    s.suite.train_per_class =
        positive<std::size_t>(j, "train_per_class", s.suite.train_per_class, "til");
    s.suite.val_per_class =
        positive<std::size_t>(j, "val_per_class", s.suite.val_per_class, "til");
    s.suite.test_per_class =
        positive<std::size_t>(j, "test_per_class", s.suite.test_per_class, "til");
    s.suite.cluster_sigma = positive<double>(j, "sigma", s.suite.cluster_sigma, "til");
    s.suite.mean_separation =
        positive<double>(j, "separation", s.suite.mean_separation, "til");
    s.mode = parse_mode(j.value("mode", std::string("coefficients+head")));
    s.budget = j.value("budget", 0LL);
    if (s.budget <= 0) throw value_error("run config: til.budget must be positive");
    s.adapt.epochs = j.value("epochs", s.adapt.epochs);
    s.adapt.learning_rate = positive<double>(j, "learning_rate", s.adapt.learning_rate, "til");
    s.adapt.weight_decay = nonneg(j, "weight_decay", s.adapt.weight_decay, "til");
    s.adapt.seed = s.suite.seed;
    if (j.contains("teacher")) {
        const auto& t = j.at("teacher");
        check_keys(t, {"max_epochs", "learning_rate", "target_accuracy"}, "til.teacher");
        s.teacher.max_epochs = positive<std::size_t>(t, "max_epochs", s.teacher.max_epochs,
                                                     "til.teacher");
        s.teacher.learning_rate =
            positive<double>(t, "learning_rate", s.teacher.learning_rate, "til.teacher");
        s.teacher.target_accuracy =
            positive<double>(t, "target_accuracy", s.teacher.target_accuracy, "til.teacher");
    }
    s.teacher.seed = s.suite.seed;
    return s;
}

} // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    detail::check_keys(j, {"recast", "mimicry", "til", "output_dir"}, "top level");
    if (!j.contains("recast")) throw value_error("run config: missing 'recast' section");
    RunConfig run;
    run.recast = detail::parse_recast(j.at("recast"));
    if (j.contains("mimicry")) {
        run.mimicry = detail::parse_mimicry(j.at("mimicry"), run.similarity_threshold);
    }
    const std::size_t input_dim = run.recast.modules[0][0].fan_in();
    if (j.contains("til")) {
        run.til = detail::parse_til(j.at("til"), input_dim);
    } else {
        run.til.suite.dim = input_dim;
    }
    run.output_dir = j.value("output_dir", run.output_dir);
    return run;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw value_error("run config: cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw value_error(std::string("run config: invalid JSON: ") + e.what());
    }
    return parse_run_config(j);
}

} // namespace recast
