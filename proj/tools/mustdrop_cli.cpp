// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: pipeline runs, budget calibration, budget sweeps,
// the published accounting tables, and baseline comparisons.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mustdrop/cost.hpp"
#include "mustdrop/errors.hpp"
#include "mustdrop/pipeline.hpp"

namespace {

using namespace mustdrop;

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open output file '" + path + "'");
    out << content;
    if (!out) throw IoError("write to '" + path + "' failed");
}

int cmd_run(const std::string& config_path, const std::string& trace_path,
            const std::string& report_path) {
    PipelineConfig config = load_config(config_path);
    RunArtifacts artifacts = run_pipeline(config);

    if (!trace_path.empty()) emit_trace(artifacts.trace, trace_path);
    const std::string report = serialize_report(artifacts, config);
    if (!report_path.empty()) write_file(report_path, report);

    std::cout << report;
    return 0;
}

int cmd_calibrate(const std::string& config_path, double budget, std::size_t fixtures) {
    PipelineConfig config = load_config(config_path);
    config.prefill.gamma.reset();
    config.prefill.budget = budget;

    auto suite = prepare_suite(config, fixtures);
    CalibrationResult cal = calibrate_suite(suite, config);
    std::printf("gamma %.12f achieved_mean %.4f target %.4f iterations %zu\n", cal.gamma,
                cal.achieved_mean, budget, cal.iterations);
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& budgets_csv,
              std::size_t fixtures) {
    PipelineConfig config = load_config(config_path);

    std::vector<double> budgets;
    std::string token;
    std::istringstream stream(budgets_csv);
    while (std::getline(stream, token, ',')) {
        if (!token.empty()) budgets.push_back(std::stod(token));
    }
    if (budgets.empty()) throw ConfigError("sweep needs at least one budget");

    const ModelGeometry geom = geometry_preset(config.geometry_preset);
    std::printf("%-8s %-10s %-14s %-12s %-12s %-14s\n", "budget", "gamma",
                "mean_survivors", "compression", "kv_mb", "flops_reduction");
    for (double budget : budgets) {
        PipelineConfig swept = config;
        swept.prefill.gamma.reset();
        swept.prefill.budget = budget;
        auto suite = prepare_suite(swept, fixtures);
        CalibrationResult cal = calibrate_suite(suite, swept);

        PipelineConfig run_cfg = swept;
        run_cfg.prefill.budget.reset();
        run_cfg.prefill.gamma = cal.gamma;

        double mean_s_few = 0.0, mean_final = 0.0, mean_flops_red = 0.0;
        for (std::size_t seed = 0; seed < fixtures; ++seed) {
            run_cfg.seed = seed;
            RunArtifacts a = run_pipeline(run_cfg);
            mean_s_few += static_cast<double>(a.report.s_few_size);
            mean_final += static_cast<double>(a.report.final_cached_vision_tokens);
            mean_flops_red += a.report.flops_reduction;
        }
        mean_s_few /= static_cast<double>(fixtures);
        mean_final /= static_cast<double>(fixtures);
        mean_flops_red /= static_cast<double>(fixtures);

        const double original = static_cast<double>(
            config.toy.grid_side * config.toy.grid_side);
        const double ratio = compression_ratio(original, mean_final);
        const double kv_mb = mean_final * static_cast<double>(kv_bytes(1, geom)) / 1e6;
        std::printf("%-8.1f %-10.6f %-14.3f %-12.4f %-12.3f %-14.4f\n", budget, cal.gamma,
                    mean_s_few, ratio, kv_mb, mean_flops_red);
    }
    return 0;
}

struct TableRow {
    std::uint64_t tokens;
    double expected_mb;
};

int accounting_table(const std::string& preset, const std::vector<TableRow>& rows,
                     double tolerance) {
    const ModelGeometry geom = geometry_preset(preset);
    bool all_pass = true;
    std::printf("%-8s %-12s %-12s %-10s %s\n", "tokens", "mb", "expected", "rel_err",
                "status");
    for (const auto& row : rows) {
        const double mb = kv_megabytes(row.tokens, geom);
        const double rel = std::abs(mb - row.expected_mb) / row.expected_mb;
        const bool pass = rel <= tolerance;
        all_pass = all_pass && pass;
        std::printf("%-8llu %-12.1f %-12.1f %-10.4f %s\n",
                    static_cast<unsigned long long>(row.tokens), mb, row.expected_mb, rel,
                    pass ? "PASS" : "FAIL");
    }
    return all_pass ? 0 : 1;
}

int cmd_table3() {
    std::printf("KV-cache memory, llava-1.5-7b, tolerance 1%%\n");
    int rc = accounting_table("llava-1.5-7b",
                              {{576, 302.4}, {440, 231.0}, {64, 33.6}, {45, 23.6}}, 0.01);

    std::printf("\ncompression ratios\n");
    const double c1 = compression_ratio(576, 45);
    std::printf("576 -> 45: %.4f (expected 0.922)\n", c1);
    return rc;
}

int cmd_table6() {
    std::printf("KV-cache memory, llava-next-7b, tolerance 1%%\n");
    int rc = accounting_table("llava-next-7b", {{2880, 1512.1}, {320, 168.0}}, 0.01);

    const ModelGeometry geom = geometry_preset("llava-next-7b");
    const std::vector<std::uint64_t> vanilla(geom.num_layers, 2880);
    const std::vector<std::uint64_t> pruned(geom.num_layers, 320);
    const double fv = flops_prefill_total(vanilla, geom);
    const double fp = flops_prefill_total(pruned, geom);
    const double reduction = 1.0 - fp / fv;
    const bool band = reduction >= 0.85 && reduction <= 0.92;
    std::printf("\nFLOPs: vanilla %.2fT, 320-average schedule %.2fT, reduction %.4f %s\n",
                fv / 1e12, fp / 1e12, reduction, band ? "PASS" : "FAIL");
    std::printf("compression 2880 -> 320: %.4f (expected 0.889)\n",
                compression_ratio(2880, 320));
    return (rc == 0 && band) ? 0 : 1;
}

int cmd_compare(const std::string& config_path, const std::string& baselines,
                std::size_t fixtures) {
    PipelineConfig config = load_config(config_path);
    if (!config.prefill.budget.has_value()) {
        throw ConfigError("compare needs a budget-mode config");
    }
    if (baselines != "all") {
        throw ConfigError("only '--baselines all' is supported");
    }

    // Calibrate the full policy once, then budget-match every baseline to the
    // per-seed survivor counts of the reference runs.
    PipelineConfig ref = config;
    ref.baseline = Baseline::mustdrop;
    auto suite = prepare_suite(ref, fixtures);
    CalibrationResult cal = calibrate_suite(suite, ref);
    ref.prefill.budget.reset();
    ref.prefill.gamma = cal.gamma;

    struct Row {
        std::string name;
        double mean_survivors = 0.0;
        double mean_final = 0.0;
        double mean_flops_red = 0.0;
        std::size_t needle_hits = 0;
        std::size_t needle_total = 0;
    };
    std::vector<Row> rows;

    std::vector<double> matched(fixtures, 0.0);
    {
        Row row{"mustdrop"};
        for (std::size_t seed = 0; seed < fixtures; ++seed) {
            ref.seed = seed;
            RunArtifacts a = run_pipeline(ref);
            matched[seed] = static_cast<double>(a.s_few.size());
            row.mean_survivors += static_cast<double>(a.s_few.size());
            row.mean_final += static_cast<double>(a.report.final_cached_vision_tokens);
            row.mean_flops_red += a.report.flops_reduction;
            if (a.fixture.needle_token_id.has_value()) {
                ++row.needle_total;
                if (a.s_few.count(*a.fixture.needle_token_id) > 0) ++row.needle_hits;
            }
        }
        rows.push_back(row);
    }

    for (Baseline b : {Baseline::none, Baseline::random_drop, Baseline::fastv_like,
                       Baseline::encoder_only}) {
        Row row{to_string(b)};
        PipelineConfig cfg = config;
        cfg.baseline = b;
        for (std::size_t seed = 0; seed < fixtures; ++seed) {
            cfg.seed = seed;
            RunArtifacts a = run_pipeline(cfg, matched[seed]);
            row.mean_survivors += static_cast<double>(a.s_few.size());
            row.mean_final += static_cast<double>(a.report.final_cached_vision_tokens);
            row.mean_flops_red += a.report.flops_reduction;
            if (a.fixture.needle_token_id.has_value()) {
                ++row.needle_total;
                if (a.s_few.count(*a.fixture.needle_token_id) > 0) ++row.needle_hits;
            }
        }
        rows.push_back(row);
    }

    std::printf("%-14s %-14s %-12s %-16s %s\n", "baseline", "mean_survivors",
                "mean_final", "flops_reduction", "needle_retention");
    for (const auto& row : rows) {
        const double n = static_cast<double>(fixtures);
        std::printf("%-14s %-14.3f %-12.3f %-16.4f %zu/%zu\n", row.name.c_str(),
                    row.mean_survivors / n, row.mean_final / n, row.mean_flops_red / n,
                    row.needle_hits, row.needle_total);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-stage vision-token dropping over a deterministic toy transformer"};
    app.require_subcommand(1);

    std::string config_path, trace_path, report_path;
    auto* run = app.add_subcommand("run", "execute one pipeline run");
    run->add_option("--config", config_path, "pipeline config (JSON)")->required();
    run->add_option("--trace", trace_path, "write the drop trace here (JSON lines)");
    run->add_option("--report", report_path, "write the cost report here (JSON)");

    double budget = 0.0;
    std::size_t fixtures = 100;
    auto* calibrate = app.add_subcommand("calibrate", "bisect gamma for a budget");
    calibrate->add_option("--config", config_path, "pipeline config (JSON)")->required();
    calibrate->add_option("--budget", budget, "target mean surviving tokens")->required();
    calibrate->add_option("--fixtures", fixtures, "suite size (seeds 0..n-1)");

    std::string budgets_csv = "21,14,7";
    auto* sweep = app.add_subcommand("sweep", "calibrate and run several budgets");
    sweep->add_option("--config", config_path, "pipeline config (JSON)")->required();
    sweep->add_option("--budgets", budgets_csv, "comma-separated budget list");
    sweep->add_option("--fixtures", fixtures, "suite size (seeds 0..n-1)");

    app.add_subcommand("table3", "published per-stage KV-memory accounting");
    app.add_subcommand("table6", "published efficiency accounting");

    std::string baselines = "all";
    auto* compare = app.add_subcommand("compare", "baseline comparison table");
    compare->add_option("--config", config_path, "pipeline config (JSON)")->required();
    compare->add_option("--baselines", baselines, "which baselines (only 'all')");
    compare->add_option("--fixtures", fixtures, "suite size (seeds 0..n-1)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // usage errors exit 2
    }

    try {
        if (app.got_subcommand("run")) return cmd_run(config_path, trace_path, report_path);
        if (app.got_subcommand("calibrate")) return cmd_calibrate(config_path, budget, fixtures);
        if (app.got_subcommand("sweep")) return cmd_sweep(config_path, budgets_csv, fixtures);
        if (app.got_subcommand("table3")) return cmd_table3();
        if (app.got_subcommand("table6")) return cmd_table6();
        if (app.got_subcommand("compare")) return cmd_compare(config_path, baselines, fixtures);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
