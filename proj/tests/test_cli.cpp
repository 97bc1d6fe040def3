#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

#include "ncmc/commands.hpp"

using namespace ncmc;
namespace fs = std::filesystem;

namespace {

std::string config_path(const std::string& name) { return std::string(NCMC_CONFIG_DIR) + "/" + name; }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("ncmc_cli_" + tag + "_" + std::to_string(::getpid()))) {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

int run(const std::string& command, const std::optional<std::string>& config, const fs::path& out,
        std::ostringstream& log, std::ostringstream& err, std::optional<std::uint64_t> seed = std::nullopt,
        unsigned threads = 1) {
    cli::RunOptions opt;
    opt.command = command;
    opt.out_dir = out;
    opt.log = &log;
    opt.seed = seed;
    opt.threads = threads;
    return cli::run_and_report(config, opt, err);
}

/// Rows of a CSV file, header first.
std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

std::string cell(const std::vector<std::vector<std::string>>& rows, std::size_t row, const std::string& column) {
    for (std::size_t k = 0; k < rows[0].size(); ++k)
        if (rows[0][k] == column) return rows.at(row).at(k);
    throw std::runtime_error("no column " + column);
}

} // namespace

TEST(Cli, OracleCheckPassesOnBundledTrees) {
    for (const char* name : {"oracle_one_period.conf", "oracle_two_period.conf"}) {
        TempDir dir("oracle");
        std::ostringstream log, err;
        EXPECT_EQ(run("oracle-check", config_path(name), dir.path, log, err), 0) << err.str();
        const auto rows = read_csv(dir.path / "oracle_check.csv");
        ASSERT_EQ(rows.size(), 4u);
        for (std::size_t r = 1; r < rows.size(); ++r) EXPECT_EQ(cell(rows, r, "pass"), "1");
        EXPECT_TRUE(fs::exists(dir.path / "manifest.json"));
    }
}

TEST(Cli, OracleCheckFailsLoudlyOnWrongExpectation) {
    // exit code and pass column must agree
    TempDir dir("oracle_bad");
    fs::create_directories(dir.path);
    const fs::path conf = dir.path / "bad.conf";
    std::ofstream(conf) << "model.kind=tree\nmodel.tree=" << NCMC_DATA_DIR
                        << "/trees/one_period.tree\nrules.a.kind=stop_from\nrules.a.date=0\n"
                           "rules.b.kind=fixed\nrun.N=2\nrun.R=1\n";
    std::ostringstream log, err;
    const int code = run("oracle-check", conf.string(), dir.path / "out", log, err, 5);
    // with two trunks the standard error can be zero while the error is not
    EXPECT_TRUE(code == 0 || code == 4);
    const auto rows = read_csv(dir.path / "out" / "oracle_check.csv");
    EXPECT_EQ(code == 0, cell(rows, 1, "pass") == "1");
}

TEST(Cli, UnknownKeyExitsWithConfigError) {
    TempDir dir("unknown");
    fs::create_directories(dir.path);
    const fs::path conf = dir.path / "x.conf";
    std::ofstream(conf) << "model.assets=2\nmodel.volatility=0.3\n";
    std::ostringstream log, err;
    EXPECT_EQ(run("pilot", conf.string(), dir.path / "out", log, err), 2);
    EXPECT_NE(err.str().find("model.volatility"), std::string::npos);
}

TEST(Cli, BadValuesExitWithConfigError) {
    TempDir dir("badvalue");
    fs::create_directories(dir.path);
    const fs::path conf = dir.path / "x.conf";
    std::ofstream(conf) << "model.sigma=-1\n";
    std::ostringstream log, err;
    EXPECT_EQ(run("table1", conf.string(), dir.path / "out", log, err), 2);
    std::ofstream(conf) << "rules.a.kind=mesh\n";
    EXPECT_EQ(run("pilot", conf.string(), dir.path / "out", log, err), 2);
}

TEST(Cli, DegeneratePilotReportsUnitReplications) {
    TempDir dir("degenerate");
    std::ostringstream log, err;
    EXPECT_EQ(run("pilot", config_path("pilot_equal_rules.conf"), dir.path, log, err), 0) << err.str();
    const auto rows = read_csv(dir.path / "pilot.csv");
    EXPECT_EQ(cell(rows, 1, "degenerate"), "1");
    EXPECT_EQ(cell(rows, 1, "R_rounded"), "1");
    EXPECT_EQ(std::stod(cell(rows, 1, "R_star")), 1.0);
}

TEST(Cli, TreePilotPrintsExactComponents) {
    TempDir dir("treepilot");
    std::ostringstream log, err;
    EXPECT_EQ(run("pilot", config_path("pilot_two_period.conf"), dir.path, log, err), 0) << err.str();
    const auto rows = read_csv(dir.path / "pilot.csv");
    for (const char* v : {"v1", "v2"}) {
        const double est = std::stod(cell(rows, 1, v));
        const double exact = std::stod(cell(rows, 1, std::string(v) + "_exact"));
        EXPECT_NEAR(est, exact, 0.1 * exact) << v;
    }
    EXPECT_NE(log.str().find("exact"), std::string::npos);
}

TEST(Cli, NestedReplicationsBeatPlainAtEqualBudget) {
    TempDir dir("estimate");
    std::ostringstream log, err;
    EXPECT_EQ(run("estimate", config_path("estimate_shifted.conf"), dir.path, log, err), 0) << err.str();
    const auto rows = read_csv(dir.path / "estimate.csv");
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(cell(rows, 1, "R"), "1");
    EXPECT_GT(std::stoi(cell(rows, 2, "R")), 1);
    EXPECT_LT(std::stod(cell(rows, 2, "stderr")), std::stod(cell(rows, 1, "stderr")));
    EXPECT_EQ(cell(rows, 1, "v1_hat"), "");
}

TEST(Cli, VprofileMinimumAtOptimum) {
    TempDir dir("vprofile");
    std::ostringstream log, err;
    EXPECT_EQ(run("vprofile", config_path("vprofile_table1.conf"), dir.path, log, err), 0) << err.str();
    const auto rows = read_csv(dir.path / "vprofile.csv");
    ASSERT_EQ(rows.size(), 101u);
    for (std::size_t r = 1; r < rows.size(); ++r) EXPECT_GE(std::stod(cell(rows, r, "V_over_V_star")), 1.0 - 1e-12);
    EXPECT_EQ(std::stod(cell(rows, 1, "R")), 1.0);
}

TEST(Cli, OutputsAreByteStableAcrossRunsAndThreads) {
    TempDir a("stable_a"), b("stable_b");
    std::ostringstream log, err;
    ASSERT_EQ(run("estimate", config_path("estimate_shifted.conf"), a.path, log, err, 9, 1), 0) << err.str();
    ASSERT_EQ(run("estimate", config_path("estimate_shifted.conf"), b.path, log, err, 9, 8), 0) << err.str();
    EXPECT_EQ(slurp(a.path / "estimate.csv"), slurp(b.path / "estimate.csv"));
    EXPECT_EQ(slurp(a.path / "estimate.json"), slurp(b.path / "estimate.json"));
    TempDir c("stable_c");
    ASSERT_EQ(run("estimate", config_path("estimate_shifted.conf"), c.path, log, err, 10, 1), 0);
    EXPECT_NE(slurp(a.path / "estimate.csv"), slurp(c.path / "estimate.csv"));
}

TEST(CliBinary, ExitCodesAndHelp) {
    const std::string bin = NCMC_CLI;
    const auto status = [](const std::string& line) {
        const int raw = std::system((line + " > /dev/null 2>&1").c_str());
        return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    };
    EXPECT_EQ(status(bin + " --help"), 0);
    EXPECT_EQ(status(bin + " pilot --config /nonexistent.conf"), 2);
    EXPECT_EQ(status(bin + " frobnicate"), 2);
    TempDir dir("help");
    fs::create_directories(dir.path);
    const std::string help = (dir.path / "help.txt").string();
    ASSERT_EQ(std::system((bin + " table1 --help > " + help + " 2>&1").c_str()), 0);
    const std::string text = slurp(help);
    for (const auto& col : cli::table1_columns()) EXPECT_NE(text.find(col), std::string::npos) << col;
}
