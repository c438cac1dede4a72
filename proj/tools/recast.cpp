// recast: command-line driver for reconstruction, diagnostics, task-incremental
// runs, and report generation. Exit codes: 0 success, 1 criterion failure,
// 2 usage/input error, 3 budget violation, 4 numerical failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "recast/diagnostics.hpp"
#include "recast/errors.hpp"
#include "recast/mimicry.hpp"
#include "recast/model.hpp"
#include "recast/persistence.hpp"
#include "recast/run_config.hpp"
#include "recast/til.hpp"

namespace fs = std::filesystem;
using namespace recast;

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw value_error("cannot open " + path.string() + " for writing");
    f << text;
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::is_regular_file(path)) {
        throw value_error(what + " not found: " + path);
    }
}

// --- make-teacher ------------------------------------------------------------

int cmd_make_teacher(const std::string& config_path, const std::string& out_path) {
    require_file(config_path, "run config");
    const RunConfig run = load_run_config(config_path);
    const auto suite = make_task_suite(run.til.suite);
    const TeacherModel teacher = pretrain_teacher(suite[0], run.recast, run.til.teacher);
    fs::path out(out_path);
    if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
    save_teacher(teacher, out_path);
    std::cout << "teacher saved to " << out_path << "\n";
    return 0;
}

// --- reconstruct ---------------------------------------------------------------

struct ReconstructArgs {
    std::string config_path, teacher_path, out_dir;
    std::string loss;
    double sigma = -1.0, lr = -1.0, threshold = -1.0;
    long long epochs = -1;
    long long seed = -1;
};

int cmd_reconstruct(const ReconstructArgs& args) {
    require_file(args.config_path, "run config");
    require_file(args.teacher_path, "teacher checkpoint");
    RunConfig run = load_run_config(args.config_path);
    if (!args.loss.empty()) {
        if (args.loss == "smoothl1") {
            run.mimicry.loss = MimicryLoss::SmoothL1;
        } else if (args.loss == "mse") {
            run.mimicry.loss = MimicryLoss::Mse;
        } else {
            throw value_error("--loss must be smoothl1 or mse");
        }
    }
    if (args.sigma >= 0.0) {
        run.mimicry.sigma = args.sigma;
        run.mimicry.noise_enabled = args.sigma > 0.0;
    }
    if (args.lr > 0.0) run.mimicry.learning_rate = args.lr;
    if (args.epochs >= 0) run.mimicry.max_epochs = static_cast<std::size_t>(args.epochs);
    if (args.seed >= 0) run.mimicry.seed = static_cast<std::uint64_t>(args.seed);
    if (args.threshold > 0.0) run.similarity_threshold = args.threshold;

    const TeacherModel teacher = load_teacher(args.teacher_path);
    RecastModel model = build_model(run.recast, run.mimicry.seed);
    const ReconstructionReport report = run_mimicry(teacher, model, run.mimicry);

    fs::create_directories(args.out_dir);
    save_model(model, (fs::path(args.out_dir) / "model.rcst").string());

    std::ostringstream csv;
    csv << "layer,module,loss,cosine_sim\n";
    bool all_pass = true;
    std::vector<std::string> failures;
    for (const auto& m : report.modules) {
        csv << m.layer << "," << m.module << "," << fmt(m.final_loss) << ","
            << fmt(m.cosine_similarity) << "\n";
        if (m.cosine_similarity < run.similarity_threshold) {
            all_pass = false;
            failures.push_back("layer " + std::to_string(m.layer) + " module " +
                               std::to_string(m.module) + ": cosine_sim " +
                               fmt(m.cosine_similarity) + " < " +
                               fmt(run.similarity_threshold));
        }
    }
    write_text(fs::path(args.out_dir) / "reconstruction.csv", csv.str());
    if (!all_pass) {
        std::cerr << "similarity below threshold:\n";
        for (const auto& f : failures) std::cerr << "  " << f << "\n";
        return 1;
    }
    std::cout << "reconstruction complete, all modules >= " << run.similarity_threshold
              << "\n";
    return 0;
}

// --- diag ---------------------------------------------------------------------

int cmd_diag(const std::string& model_path, const std::string& out_dir) {
    require_file(model_path, "model checkpoint");
    RecastModel model = load_model(model_path);
    const DiagnosticsReport report = run_diagnostics(model);

    fs::create_directories(out_dir);
    std::ostringstream div;
    div << "group,frobenius_diversity,sv_entropy\n";
    for (const auto& g : report.groups) {
        div << g.group << "," << fmt(g.avg_frobenius) << "," << fmt(g.avg_entropy) << "\n";
        if (g.similarity.numel() == 0) continue;
        std::ostringstream sim;
        sim << "layer";
        for (std::size_t l : g.layers) sim << ",l" << l;
        sim << "\n";
        for (std::size_t r = 0; r < g.similarity.rows(); ++r) {
            sim << "l" << g.layers[r];
            for (std::size_t c = 0; c < g.similarity.cols(); ++c) {
                sim << "," << fmt(g.similarity(r, c));
            }
            sim << "\n";
        }
        write_text(fs::path(out_dir) /
                       ("similarity_group" + std::to_string(g.group) + ".csv"),
                   sim.str());
    }
    write_text(fs::path(out_dir) / "diversity.csv", div.str());
    return 0;
}

// --- til ------------------------------------------------------------------------

int cmd_til(const std::string& config_path, const std::string& model_path,
            const std::string& mode_flag, long long budget_flag, const std::string& out_dir) {
    require_file(config_path, "run config");
    require_file(model_path, "model checkpoint");
    RunConfig run = load_run_config(config_path);
    if (!mode_flag.empty()) run.til.mode = parse_mode(mode_flag);
    if (budget_flag > 0) run.til.budget = budget_flag;

    RecastModel model = load_model(model_path);
    const auto suite = make_task_suite(run.til.suite);
    ParamBudget budget{run.til.budget};
    const SequenceResult result =
        run_sequence(model, suite, budget, run.til.mode, run.til.adapt);

    fs::create_directories(out_dir);
    std::ostringstream csv;
    csv << "after_task";
    for (std::size_t i = 0; i < suite.size(); ++i) csv << ",task_" << i;
    csv << "\n";
    for (std::size_t j = 0; j < result.accuracy.size(); ++j) {
        csv << j;
        for (std::size_t i = 0; i < suite.size(); ++i) {
            csv << ",";
            if (i < result.accuracy[j].size()) csv << fmt(result.accuracy[j][i]);
        }
        csv << "\n";
    }
    write_text(fs::path(out_dir) / "accuracy_matrix.csv", csv.str());
    for (const auto& snap : result.snapshots) {
        save_snapshot(snap, (fs::path(out_dir) /
                             ("snapshot_task" + std::to_string(snap.task_id) + ".rcst"))
                                .string());
    }
    const std::string summary = "avg_top1=" + fmt(result.average_top1) +
                                " task_params=" + std::to_string(result.task_params) + "\n";
    write_text(fs::path(out_dir) / "summary.txt", summary);
    std::cout << summary;
    return 0;
}

// --- report ----------------------------------------------------------------------

std::vector<std::vector<std::string>> parse_csv(const fs::path& path) {
    std::ifstream f(path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.push_back("");
        rows.push_back(std::move(cells));
    }
    return rows;
}

int cmd_report(const std::string& run_dir, const std::string& out_dir) {
    if (!fs::is_directory(run_dir)) throw value_error("run directory not found: " + run_dir);
    std::vector<fs::path> csvs;
    for (const auto& entry : fs::directory_iterator(run_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".csv") {
            csvs.push_back(entry.path());
        }
    }
    std::sort(csvs.begin(), csvs.end());
    if (csvs.empty()) {
        throw value_error("no result CSVs found in " + run_dir +
                          " (expected reconstruction.csv, diversity.csv, "
                          "accuracy_matrix.csv, or similarity_group*.csv)");
    }

    fs::create_directories(out_dir);
    std::ostringstream md;
    md << "# Run report\n";
    for (const auto& path : csvs) {
        const auto rows = parse_csv(path);
        md << "\n## " << path.filename().string() << "\n\n";
        if (rows.empty()) {
            md << "(empty)\n";
            continue;
        }
        md << "|";
        for (const auto& c : rows[0]) md << " " << c << " |";
        md << "\n|";
        for (std::size_t i = 0; i < rows[0].size(); ++i) md << " --- |";
        md << "\n";
        for (std::size_t r = 1; r < rows.size(); ++r) {
            md << "|";
            for (const auto& c : rows[r]) md << " " << c << " |";
            md << "\n";
        }

        // Plot-ready companion: header stripped, comma -> space.
        std::ostringstream dat;
        for (std::size_t r = 1; r < rows.size(); ++r) {
            for (std::size_t c = 0; c < rows[r].size(); ++c) {
                if (c) dat << " ";
                dat << (rows[r][c].empty() ? "nan" : rows[r][c]);
            }
            dat << "\n";
        }
        fs::path dat_path = fs::path(out_dir) / path.filename();
        dat_path.replace_extension(".dat");
        write_text(dat_path, dat.str());
    }
    const fs::path summary = fs::path(run_dir) / "summary.txt";
    if (fs::is_regular_file(summary)) {
        std::ifstream f(summary);
        std::string text((std::istreambuf_iterator<char>(f)),
                         std::istreambuf_iterator<char>());
        md << "\n## summary\n\n```\n" << text << "```\n";
    }
    write_text(fs::path(out_dir) / "report.md", md.str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"template-bank weight decomposition toolkit"};
    app.require_subcommand(1);

    std::string config_path, teacher_path, model_path, out_path, run_dir, mode_flag;
    long long budget_flag = 0;
    ReconstructArgs rec;

    auto* mk = app.add_subcommand("make-teacher", "pretrain a dense teacher on task 0");
    mk->add_option("--config", config_path, "run config JSON")->required();
    mk->add_option("--out", out_path, "output teacher checkpoint")->required();

    auto* rc = app.add_subcommand("reconstruct", "mimic a teacher into templated form");
    rc->add_option("--config", rec.config_path, "run config JSON")->required();
    rc->add_option("--teacher", rec.teacher_path, "teacher checkpoint")->required();
    rc->add_option("--out", rec.out_dir, "output directory")->required();
    rc->add_option("--loss", rec.loss, "smoothl1 or mse");
    rc->add_option("--sigma", rec.sigma, "coefficient noise std");
    rc->add_option("--epochs", rec.epochs, "mimicry epochs");
    rc->add_option("--lr", rec.lr, "learning rate");
    rc->add_option("--seed", rec.seed, "seed");
    rc->add_option("--threshold", rec.threshold, "cosine similarity gate");

    auto* dg = app.add_subcommand("diag", "bank diversity diagnostics");
    dg->add_option("--model", model_path, "model checkpoint")->required();
    dg->add_option("--out", out_path, "output directory")->required();

    auto* tl = app.add_subcommand("til", "run a task-incremental sequence");
    tl->add_option("--config", config_path, "run config JSON")->required();
    tl->add_option("--model", model_path, "model checkpoint")->required();
    tl->add_option("--mode", mode_flag, "coefficients+head | head-only | full");
    tl->add_option("--budget", budget_flag, "trainable-parameter budget per task");
    tl->add_option("--out", out_path, "output directory")->required();

    auto* rp = app.add_subcommand("report", "consolidate run CSVs into markdown");
    rp->add_option("--run-dir", run_dir, "directory with result CSVs")->required();
    rp->add_option("--out", out_path, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (mk->parsed()) return cmd_make_teacher(config_path, out_path);
        if (rc->parsed()) return cmd_reconstruct(rec);
        if (dg->parsed()) return cmd_diag(model_path, out_path);
        if (tl->parsed()) return cmd_til(config_path, model_path, mode_flag, budget_flag,
                                         out_path);
        if (rp->parsed()) return cmd_report(run_dir, out_path);
    } catch (const budget_error& e) {
        std::cerr << "budget violation: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const value_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const format_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
