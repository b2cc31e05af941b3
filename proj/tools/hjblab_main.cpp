// hjblab command line: run, validate and post-process experiments.

#include "hjblab/harness.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

void print_nested(const std::exception& e, int depth = 0) {
    std::cerr << std::string(2 * static_cast<std::size_t>(depth), ' ') << "error: " << e.what() << '\n';
    try {
        std::rethrow_if_nested(e);
    } catch (const std::exception& inner) {
        print_nested(inner, depth + 1);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semilinear HJB solver experiments"};
    app.require_subcommand(1);

    std::string config_path, report_dir, out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> workers;

    auto* run = app.add_subcommand("run", "Run the scenario described by a config file");
    run->add_option("config", config_path, "Config file")->required()->check(CLI::ExistingFile);
    run->add_option("--seed", seed, "Override the master seed");
    run->add_option("--out", out_dir, "Output directory (default: $HJBLAB_OUTPUT_ROOT/<name>)");
    run->add_option("--workers", workers, "Worker threads");

    auto* check = app.add_subcommand("check", "Validate a config file without running it");
    check->add_option("config", config_path, "Config file")->required()->check(CLI::ExistingFile);

    auto* plots = app.add_subcommand("emit-plots", "Flatten reports into plot_data.csv");
    plots->add_option("report-dir", report_dir, "Directory holding report.json files")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (plots->parsed()) {
            std::cout << hjblab::emit_plot_data(report_dir).string() << '\n';
            return 0;
        }
        auto cfg = hjblab::load_config(config_path);
        if (check->parsed()) {
            std::cout << "ok: " << cfg.name << " (" << cfg.scenario << "), config hash "
                      << hjblab::detail::hex64(hjblab::config_hash(cfg)) << '\n';
            return 0;
        }
        if (seed) cfg.seed = *seed;
        if (workers) cfg.workers = *workers;
        const auto dir = out_dir.empty() ? hjblab::output_directory(cfg, hjblab::default_output_root())
                                         : std::filesystem::path(out_dir);
        const auto res = hjblab::run(cfg, dir);
        std::cout << res.directory.string() << '\n';
        for (const auto& f : res.files) std::cout << "  " << f << '\n';
        std::cout << "  manifest.json (" << res.wall_time << " s)\n";
        return 0;
    } catch (const hjblab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const hjblab::MissingReportError& e) {
        std::cerr << "missing report: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        print_nested(e);
        return 3;
    }
}
