#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "experiment.hpp"

using namespace gstop;
using namespace gstop::cli;

namespace {

json running_doc()
{
    return json::parse(R"cfg({
        "generator": "0", "constraint": "0",
        "terminal": {"expression": "abs(w)"},
        "reward": "abs(w)",
        "tree": {"steps": 2, "horizon": 2.0, "mode": "path-tree"},
        "lambdas": [0.5, 0.9]
    })cfg");
}

std::string config_error(const json& doc)
{
    try {
        (void)parse_config(doc);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::configuration);
        return e.what();
    }
    ADD_FAILURE() << "config accepted";
    return {};
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

class TempDir {
public:
    TempDir()
    {
        path_ = std::filesystem::temp_directory_path() /
                ("gstop_cli_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

} // namespace

TEST(Config, DefaultsAndRunningExample)
{
    const auto c = parse_config(running_doc());
    EXPECT_EQ(c.tree.steps, 2);
    EXPECT_EQ(c.tree.horizon, 2.0);
    EXPECT_EQ(c.method, Method::penalized);
    EXPECT_EQ(c.lambdas, (std::vector<double>{0.5, 0.9}));
    EXPECT_EQ(c.trials, 200);
    EXPECT_EQ(c.seed, 1u);
}

TEST(Config, ErrorsNameTheField)
{
    auto doc = running_doc();
    doc["tree"]["stepz"] = 3;
    EXPECT_NE(config_error(doc).find("tree.stepz"), std::string::npos);

    doc = running_doc();
    doc["tree"]["steps"] = "four";
    EXPECT_NE(config_error(doc).find("tree.steps"), std::string::npos);

    doc = running_doc();
    doc["method"] = "bogus";
    EXPECT_NE(config_error(doc).find("method"), std::string::npos);

    doc = running_doc();
    doc["lambdas"] = {0.5, 1.0};
    EXPECT_NE(config_error(doc).find("lambdas"), std::string::npos);
}

TEST(Config, BadExpressionIsReportedWithItsOwnKind)
{
    auto doc = running_doc();
    doc["generator"] = "w + z";
    try {
        (void)parse_config(doc);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::signature_mismatch);
        EXPECT_NE(std::string(e.what()).find("generator"), std::string::npos);
    }
}

TEST(Config, OverridesReadJsonOrString)
{
    auto doc = running_doc();
    apply_override(doc, "tree.steps=3");
    apply_override(doc, "constraint=abs(z)");
    apply_override(doc, "penalty.level=2");
    const auto c = parse_config(doc);
    EXPECT_EQ(c.tree.steps, 3);
    EXPECT_EQ(c.constraint, "abs(z)");
    ASSERT_TRUE(c.penalty_level.has_value());
    EXPECT_EQ(*c.penalty_level, 2.0);
    EXPECT_THROW(apply_override(doc, "novalue"), Error);
    EXPECT_THROW(apply_override(doc, "tree..steps=1"), Error);
}

TEST(Config, EchoRoundTrips)
{
    const auto c = parse_config(running_doc());
    const auto echoed = echo_config(c);
    EXPECT_EQ(echo_config(parse_config(echoed)), echoed);
}

TEST(ExitCodes, Mapping)
{
    EXPECT_EQ(exit_code_for(ErrorKind::configuration), 1);
    EXPECT_EQ(exit_code_for(ErrorKind::domain), 1);
    EXPECT_EQ(exit_code_for(ErrorKind::syntax), 1);
    EXPECT_EQ(exit_code_for(ErrorKind::capacity), 1);
    EXPECT_EQ(exit_code_for(ErrorKind::solver), 2);
    EXPECT_EQ(exit_code_for(ErrorKind::stability), 2);
    EXPECT_EQ(exit_code_for(ErrorKind::infeasible_constraint), 2);
    EXPECT_EQ(exit_code_for(ErrorKind::evaluation), 2);
}

TEST(Commands, Parse)
{
    EXPECT_EQ(parse_command("stop"), Command::stop);
    EXPECT_EQ(parse_command("ladder"), Command::ladder);
    EXPECT_THROW(parse_command("halt"), Error);
}

TEST(Execute, OracleRunningExample)
{
    std::ostringstream warn;
    const auto out = execute(Command::oracle, parse_config(running_doc()), warn);
    const auto& r = out.report["results"];
    EXPECT_EQ(out.report["schema"], report_schema);
    EXPECT_EQ(r["rule_count"], 5);
    EXPECT_EQ(r["dp_value"].get<double>(), 1.0);
    EXPECT_EQ(r["brute_force_value"].get<double>(), 1.0);
    EXPECT_EQ(r["gap"].get<double>(), 0.0);
    EXPECT_EQ(r["methods"][0]["argmax_index"], 1);
    EXPECT_EQ(out.exit_code, 0);
}

TEST(Execute, StopRunningExample)
{
    std::ostringstream warn;
    const auto out = execute(Command::stop, parse_config(running_doc()), warn);
    const auto& r = out.report["results"];
    EXPECT_EQ(r["V0"].get<double>(), 1.0);
    EXPECT_EQ(r["tau_bar"]["stabilization_k"], 1);
    EXPECT_EQ(r["tau_star"]["stops_by_level"], json({0, 2, 0}));
    ASSERT_EQ(r["lambda_table"].size(), 2u);
    for (const auto& row : r["lambda_table"]) EXPECT_LE(row["identity_gap"].get<double>(), 1e-9);
}

TEST(Execute, EmptyLambdaListGivesHeaderOnlyTable)
{
    auto doc = running_doc();
    doc["lambdas"] = json::array();
    std::ostringstream warn;
    const auto out = execute(Command::stop, parse_config(doc), warn);
    const auto it = std::find_if(out.tables.begin(), out.tables.end(), [](const auto& t) { return t.name == "lambda"; });
    ASSERT_NE(it, out.tables.end());
    EXPECT_EQ(it->render(), "lambda,value,V0\n");
}

TEST(Execute, ZeroConstraintPenaltyTableIsFlat)
{
    std::ostringstream warn;
    const auto out = execute(Command::expectation, parse_config(running_doc()), warn);
    const auto it = std::find_if(out.tables.begin(), out.tables.end(), [](const auto& t) { return t.name == "penalty"; });
    ASSERT_NE(it, out.tables.end());
    ASSERT_FALSE(it->rows.empty());
    for (const auto& row : it->rows) {
        EXPECT_EQ(row[1], "1");
        EXPECT_EQ(row[2], "0");
    }
}

TEST(Execute, VerifyFailureExitsThree)
{
    auto doc = running_doc();
    doc["method"] = "direct";
    doc["tolerances"] = {{"property", 1e-300}};
    doc["generator"] = "0.5*abs(z)";
    doc["verify"] = {{"trials", 5}};
    std::ostringstream warn;
    const auto out = execute(Command::verify, parse_config(doc), warn);
    // golden-section noise is far above 1e-300
    EXPECT_EQ(out.exit_code, 3);
}

TEST(Run, WritesDeterministicArtifacts)
{
    TempDir dir;
    const auto cfg = dir.path() / "cfg.json";
    {
        auto doc = running_doc();
        doc["method"] = "direct";
        std::ofstream(cfg) << doc.dump();
    }
    RunRequest req;
    req.command = Command::stop;
    req.config_path = cfg.string();
    req.output_dir = (dir.path() / "a").string();
    std::ostringstream log;
    std::ostringstream err;
    ASSERT_EQ(run(req, log, err), 0) << err.str();
    req.output_dir = (dir.path() / "b").string();
    ASSERT_EQ(run(req, log, err), 0) << err.str();
    for (const char* f : {"report.json", "report_nodes.csv", "report_lambda.csv", "report_controller.csv"}) {
        const auto a = slurp(dir.path() / "a" / f);
        EXPECT_FALSE(a.empty()) << f;
        EXPECT_EQ(a, slurp(dir.path() / "b" / f)) << f;
    }
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "a" / "report_timing.json"));
    EXPECT_NE(log.str().find("stop: wrote"), std::string::npos);
}

TEST(Run, OutputDirectoryPrecedence)
{
    TempDir dir;
    const auto cfg = dir.path() / "cfg.json";
    auto doc = running_doc();
    doc["output"] = {{"dir", (dir.path() / "from_config").string()}};
    std::ofstream(cfg) << doc.dump();
    RunRequest req;
    req.command = Command::oracle;
    req.config_path = cfg.string();
    const auto c = parse_config(doc);
    EXPECT_EQ(resolve_output_dir(req, c), dir.path() / "from_config");
    req.output_dir = "flag";
    EXPECT_EQ(resolve_output_dir(req, c), "flag");
    req.output_dir.clear();
    ::setenv(output_dir_variable, "from_env", 1);
    EXPECT_EQ(resolve_output_dir(req, parse_config(running_doc())), "from_env");
    ::unsetenv(output_dir_variable);
    EXPECT_EQ(resolve_output_dir(req, parse_config(running_doc())), ".");
}

TEST(Run, ErrorsReportKindAndExitCode)
{
    TempDir dir;
    const auto cfg = dir.path() / "cfg.json";
    std::ofstream(cfg) << running_doc().dump();
    RunRequest req;
    req.command = Command::oracle;
    req.config_path = cfg.string();
    req.output_dir = dir.path().string();
    req.overrides = {"tree.steps=6"};
    std::ostringstream log;
    std::ostringstream err;
    EXPECT_EQ(run(req, log, err), 1);
    EXPECT_NE(err.str().find("error:"), std::string::npos);
    req.overrides = {"constraint=abs(z)+1"};
    EXPECT_EQ(run(req, log, err), 1);
    req.config_path = (dir.path() / "missing.json").string();
    EXPECT_EQ(run(req, log, err), 1);
}
