#include "doctest.h"

#include "ffscope/cli.hpp"
#include "ffscope/report.hpp"

#include "tempdir.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace ffscope;
using ffscope::testing::TempDir;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

} // namespace

TEST_CASE("cli exit codes") {
    CHECK(run({"version"}).code == 0);
    CHECK(run({"version"}).out == "ffscope 0.1.0\n");
    const auto unknown = run({"frobnicate"});
    CHECK(unknown.code == 1);
    CHECK_FALSE(unknown.err.empty());
    CHECK(run({}).code == 1);
    CHECK(run({"--help"}).code == 0);
    CHECK(run({"scan"}).code == 1);
    CHECK(run({"scan", "--model", "x.ffw", "--t", "0", "--corpus", "c"}).code == 1);

    TempDir dir;
    const auto missing = run({"scan", "--model", (dir / "none.ffw").string(), "--corpus", dir.path().string(),
                              "--out", (dir / "o").string(), "-q"});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("ffscope:") != std::string::npos);
}

TEST_CASE("cli synth honors a config file and explicit flags win") {
    TempDir dir;
    std::ofstream(dir / "cfg.json") << R"({"seed": 9, "synth": {"kind": "random", "layers": 3, "d-model": 8}})";
    const auto r = run({"--config", (dir / "cfg.json").string(), "--out", dir.path().string(), "synth", "--layers",
                        "2", "-q"});
    REQUIRE(r.code == 0);
    std::ifstream in(dir / "model.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("seed") == 9);
    CHECK(j.at("flags").at("kind") == "random");
    CHECK(j.at("flags").at("config").at("n_layers") == 2);
    CHECK(j.at("flags").at("config").at("d_model") == 8);
    CHECK(j.at("tool_version") == tool_version());

    std::ofstream(dir / "bad.json") << "[1, 2]";
    CHECK(run({"--config", (dir / "bad.json").string(), "version"}).code == 1);
}

TEST_CASE("cli output directory comes from FFSCOPE_OUT when --out is absent") {
    TempDir dir;
    const auto target = (dir / "from-env").string();
    ::setenv("FFSCOPE_OUT", target.c_str(), 1);
    const auto r = run({"synth", "--kind", "random", "--layers", "1", "-q"});
    ::unsetenv("FFSCOPE_OUT");
    CHECK(r.code == 0);
    CHECK(std::filesystem::exists(dir / "from-env" / "model.ffw"));
}

TEST_CASE("cli rejects malformed detector specs") {
    TempDir dir;
    CHECK(run({"synth", "--detector", "1:2:3", "--out", dir.path().string(), "-q"}).code == 2);
    CHECK(run({"synth", "--detector", "1:x:3:4", "--out", dir.path().string(), "-q"}).code == 2);
    CHECK(run({"synth", "--kind", "mystery", "--out", dir.path().string(), "-q"}).code == 2);
}

TEST_CASE("csv helpers") {
    CHECK(csv_field("plain") == "plain");
    CHECK(csv_field("a,b") == "\"a,b\"");
    CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
    CHECK(split_csv_line("x,\"a,b\",\"q\"\"\",") == std::vector<std::string>{"x", "a,b", "q\"", ""});
    std::ostringstream out;
    write_csv_provenance(out, Provenance{255, 1, 4, {{"final_norm", false}}});
    const auto line = out.str();
    REQUIRE(line.rfind("# ", 0) == 0);
    const auto j = nlohmann::json::parse(line.substr(2));
    CHECK(j.at("model_hash") == "00000000000000ff");
    CHECK(j.at("seed") == 4);
    CHECK(j.at("flags").at("final_norm") == false);
}
