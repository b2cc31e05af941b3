#include "hjblab/harness.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <string>

using namespace hjblab;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("hjblab_harness_" + name);
    fs::remove_all(p);
    return p;
}

std::string message_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

const char* kGradient = R"(
name = g
scenario = gradient_estimate
field = ou
x0 = 0
phi = tanh:5
gradient.times = log:0.01:1:5
gradient.points = linspace:-1:1:5
mc.paths = 2000
seed = 4
)";

}  // namespace

TEST_CASE("config parsing") {
    const auto c = parse_config(kGradient);
    CHECK(c.scenario == "gradient_estimate");
    CHECK(c.gradient_times.size() == 5);
    CHECK(c.gradient_times.front() == Catch::Approx(0.01));
    CHECK(c.gradient_points == std::vector<double>{-1.0, -0.5, 0.0, 0.5, 1.0});
    CHECK(c.paths == 2000);
    CHECK(c.seed == 4);
    CHECK(c.fbsde_steps == std::vector<std::size_t>{16, 32, 64, 128});

    // Comments and key order do not change the hash.
    const auto d = parse_config("# reordered\nseed = 4\n" + std::string(kGradient).substr(0, std::string(kGradient).find("seed")));
    CHECK(config_hash(c) == config_hash(d));
}

TEST_CASE("config errors name the offending key") {
    CHECK(message_of([] { parse_config("scenario = mild_solve\nsolver.tolerance = 1\n", "a.cfg"); }).find("a.cfg:2: solver.tolerance") !=
          std::string::npos);
    CHECK(message_of([] { parse_config("scenario = warp_drive\n"); }).find("scenario") != std::string::npos);
    CHECK(message_of([] { parse_config("scenario = mild_solve\nmc.paths = many\n"); }).find("mc.paths") != std::string::npos);
    CHECK(message_of([] { parse_config("scenario = mild_solve\nseed = 1\nseed = 2\n"); }).find("duplicate") != std::string::npos);
    CHECK(message_of([] { parse_config("mc.paths = 5\n"); }).find("scenario") != std::string::npos);
    CHECK(message_of([] { parse_config("scenario = mild_solve\nfield = lorenz\n"); }).find("field") != std::string::npos);
    CHECK(message_of([] { parse_config("scenario = mild_solve\nfield.dim = 2\n"); }).find("x0") != std::string::npos);
    CHECK(message_of([] { parse_config("scenario = mild_solve\njust some words\n"); }).find(":2:") != std::string::npos);
    CHECK_THROWS_AS(load_config("/nonexistent/x.cfg"), ConfigError);

    // Inadmissible example parameters surface as a configuration error.
    auto c = parse_config("scenario = hypothesis_check\nfield = example\nfield.dim = 2\nx0 = 0,0\nfield.b = 1,2\nfield.m = 0.6\n");
    CHECK_THROWS_AS(build_field(c), ConfigError);
}

TEST_CASE("hypothesis scenario on OU") {
    const auto dir = scratch("hyp");
    const auto c = parse_config("scenario = hypothesis_check\nfield = ou\nx0 = 0\nseed = 3\n");
    const auto r = run(c, dir);
    CHECK(r.report.at("all_hold") == true);
    for (const auto& cond : r.report.at("conditions")) CHECK(cond.at("status") == "holds");
    CHECK(fs::exists(dir / "conditions.csv"));
    CHECK(fs::exists(dir / "manifest.json"));
    const auto m = json::parse(detail::read_file(dir / "manifest.json"));
    CHECK(m.at("files").size() == 2);
    CHECK(m.at("config_hash") == detail::hex64(config_hash(c)));

    const auto b = parse_config("scenario = hypothesis_check\nfield = brownian\nx0 = 0\n");
    const auto rb = run(b, scratch("hyp_bm"));
    CHECK(rb.report.at("all_hold") == false);
}

TEST_CASE("reruns are byte-identical and independent of the worker count") {
    auto c = parse_config(kGradient);
    const auto a = run(c, scratch("det_a"));
    const auto b = run(c, scratch("det_b"));
    c.workers = 3;
    const auto w = run(c, scratch("det_w"));
    REQUIRE(a.files == b.files);
    for (const auto& f : a.files) {
        const auto text = detail::read_file(a.directory / f);
        CHECK(text == detail::read_file(b.directory / f));
        CHECK(text == detail::read_file(w.directory / f));
    }
    CHECK(a.manifest.at("files") == b.manifest.at("files"));
}

TEST_CASE("gradient scenario artifacts") {
    const auto r = run(parse_config(kGradient), scratch("grad"));
    const auto& rep = r.report;
    REQUIRE(rep.at("times").size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        const double t = rep.at("times")[i];
        const double g = rep.at("sup_wgrad")[i];
        CHECK(rep.at("weighted_profile")[i].get<double>() == std::sqrt(t) * g);
    }
    const auto csv = detail::read_file(r.directory / "profile.csv");
    CHECK(csv.rfind("t,sup_wgrad,sup_se,sqrt_t_sup_wgrad\n", 0) == 0);
}

TEST_CASE("plot data") {
    const auto dir = scratch("plots");
    const auto r = run(parse_config(kGradient), dir / "g");
    // A hand-written residual report next to it.
    fs::create_directories(dir / "f");
    json f{{"scenario", "fbsde_check"},
           {"solver", {{"contraction_ratios", json::array({json::array({0.01, 0.001})})}}},
           {"step_residual_rms_by_dt", json::array({json::array({0.5, 0.2}), json::array({0.25, 0.1})})},
           {"martingale_pvalues", json::array({1.0, 0.5})}};
    detail::write_file(dir / "f" / "report.json", f.dump());
    const auto out = emit_plot_data(dir);
    const auto text = detail::read_file(out);
    CHECK(text.rfind("scenario,series,group,x,y\n", 0) == 0);
    CHECK(text.find("fbsde_check,rms_residual,0,0.25,0.1\n") != std::string::npos);
    CHECK(text.find("fbsde_check,contraction_ratio,0,2,0.001\n") != std::string::npos);
    const double t0 = r.report.at("times")[0], g0 = r.report.at("sup_wgrad")[0];
    CHECK(text.find("gradient_estimate,sqrt_t_sup_wgrad,0," + format_double(t0) + "," + format_double(std::sqrt(t0) * g0)) !=
          std::string::npos);

    const auto empty = scratch("plots_empty");
    fs::create_directories(empty);
    CHECK_THROWS_AS(emit_plot_data(empty), MissingReportError);
    CHECK_THROWS_AS(emit_plot_data(scratch("plots_missing")), MissingReportError);
}

TEST_CASE("module errors carry the scenario") {
    const auto c = parse_config(R"(
scenario = mild_solve
field = ou
x0 = 0
phi = cos
hamiltonian = neg_abs
horizon = 0.2
ct = 0.8
grid.lo = -3
grid.hi = 3
grid.dx = 0.25
solver.transition_paths = 128
solver.max_iter = 1
)");
    try {
        run(c, scratch("err"));
        FAIL("expected an error");
    } catch (const ScenarioError& e) {
        CHECK(e.scenario() == "mild_solve");
        CHECK_THROWS_AS(std::rethrow_if_nested(e), ContinuationError);
    }
}

TEST_CASE("output locations") {
    auto c = parse_config("scenario = hypothesis_check\nname = abc\nx0 = 0\n");
    CHECK(output_directory(c, "/r") == fs::path("/r/abc"));
    c.output = "sub/dir";
    CHECK(output_directory(c, "/r") == fs::path("/r/sub/dir"));
    c.output = "/abs";
    CHECK(output_directory(c, "/r") == fs::path("/abs"));
}
