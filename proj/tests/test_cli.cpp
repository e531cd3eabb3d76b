#include <catch2/catch_amalgamated.hpp>

#include "icflow/dataset.hpp"
#include "icflow/image_io.hpp"
#include "icflow/plot.hpp"
#include "icflow/toybench.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

using namespace icflow;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
    const char* p = std::getenv("ICFLOW_CLI_PATH");
    REQUIRE(p != nullptr);  // set by the test harness
    return p;
}

struct CmdResult {
    int status = -1;
    std::string output;  // stdout + stderr interleaved
};

CmdResult run_cli(const std::string& args) {
    std::string cmd = cli_path() + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    CmdResult r;
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0)
        r.output.append(buf, n);
    int rc = pclose(pipe);
    r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    return r;
}

// fresh scratch dir per process run; tests share it via unique subpaths
std::string work_dir() {
    static std::string dir = [] {
        std::string d =
            (fs::temp_directory_path() / "icflow_cli_test").string();
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::vector<char> slurp_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is);
    return std::vector<char>(std::istreambuf_iterator<char>(is),
                             std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("verify-math passes on a correct build", "[cli]") {
    CmdResult r = run_cli("verify-math");
    INFO(r.output);
    CHECK(r.status == 0);
    CHECK(r.output.find("all identity checks passed") != std::string::npos);
    CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("version flag reports the build", "[cli]") {
    CmdResult r = run_cli("--version");
    CHECK(r.status == 0);
    CHECK(r.output.find("0.") != std::string::npos);
}

TEST_CASE("plot emits the closed-form shifted grid", "[cli]") {
    std::string dir = work_dir() + "/plot";
    CmdResult r =
        run_cli("plot --schedule mu=1.0986,sigma=1 --out-dir " + dir);
    INFO(r.output);
    REQUIRE(r.status == 0);

    std::string csv = read_text_file(dir + "/schedule_1.csv");
    CHECK(csv.rfind("t,lambda,t_shifted\n", 0) == 0);
    // the t=0.5 row of the alpha=3 shift reads t'=0.75
    CHECK(csv.find("\n0.5,0,0.75\n") != std::string::npos);
    CHECK(csv.find("\n0,inf,0\n") != std::string::npos);
    CHECK(csv.find("\n1,-inf,1\n") != std::string::npos);

    std::string svg = read_text_file(dir + "/schedule.svg");
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(read_text_file(dir + "/lambda.svg").rfind("<svg", 0) == 0);
}

TEST_CASE("config file fills defaults and flags override it", "[cli]") {
    std::string dir = work_dir() + "/cfg";
    fs::create_directories(dir);
    write_text_file(dir + "/gen.toml", "[generate-data]\nn = 10\nseed = 77\n");
    CmdResult r = run_cli("--config " + dir + "/gen.toml generate-data --out " +
                          dir + "/d.icfds --seed 5");
    INFO(r.output);
    REQUIRE(r.status == 0);
    auto [header, examples] = load_dataset(dir + "/d.icfds");
    CHECK(examples.size() == 10);                      // from the file
    CHECK(header.extra.at("seed").get<uint64_t>() == 5);  // flag wins
}

TEST_CASE("unknown config keys are rejected", "[cli]") {
    std::string dir = work_dir() + "/badcfg";
    fs::create_directories(dir);
    write_text_file(dir + "/bad.toml", "[generate-data]\nbogus_key = 3\n");
    CmdResult r = run_cli("--config " + dir + "/bad.toml generate-data --out " +
                          dir + "/d.icfds");
    INFO(r.output);
    CHECK(r.status == 2);
    CHECK(r.output.find("bogus_key") != std::string::npos);
}

TEST_CASE("bad flags and values exit with the config code", "[cli]") {
    CHECK(run_cli("plot --no-such-flag").status == 2);
    CHECK(run_cli("plot --schedule mu=abc --out-dir " + work_dir()).status ==
          2);
    CHECK(run_cli("generate-data --out " + work_dir() +
                  "/x.icfds --weights 1,2")
              .status == 2);
    // missing required subcommand argument
    CHECK(run_cli("train --out-dir " + work_dir()).status == 2);
}

TEST_CASE("missing inputs exit with the runtime code", "[cli]") {
    CmdResult r = run_cli("sample --checkpoint " + work_dir() +
                          "/absent.icf --out " + work_dir() + "/x.png");
    CHECK(r.status == 1);
    CHECK(r.output.find("cannot open") != std::string::npos);
}

TEST_CASE("end-to-end workflow smoke", "[cli]") {
    const std::string dir = work_dir() + "/flow";
    fs::create_directories(dir);

    // data
    CmdResult gen = run_cli("generate-data --out " + dir +
                            "/train.icfds --n 12 --seed 1 --weights 1,0,0,0 "
                            "--local-kinds recolor");
    INFO(gen.output);
    REQUIRE(gen.status == 0);
    CHECK(gen.output.find("wrote 12 examples") != std::string::npos);

    // short deterministic training run
    std::string train_args =
        " --data " + dir + "/train.icfds --steps 6 --batch-size 4 "
        "--model-dim 32 --heads 2 --depth-double 1 --depth-single 1 "
        "--time-embed 32 --warmup 2 --seed 7 --deterministic --log-every 0";
    CmdResult tr = run_cli("train --out-dir " + dir + "/run1" + train_args);
    INFO(tr.output);
    REQUIRE(tr.status == 0);
    REQUIRE(fs::exists(dir + "/run1/checkpoint.icf"));

    // the run dir records config, version, and seed
    nlohmann::json run =
        nlohmann::json::parse(read_text_file(dir + "/run1/run.json"));
    CHECK(run.at("command") == "train");
    CHECK(run.at("seed").get<uint64_t>() == 7);
    CHECK(!run.at("version").get<std::string>().empty());
    CHECK(run.at("config").at("model").at("model_dim").get<int>() == 32);

    std::string loss = read_text_file(dir + "/run1/loss.csv");
    CHECK(loss.rfind("step,loss,grad_norm,seconds\n", 0) == 0);
    CHECK(std::count(loss.begin(), loss.end(), '\n') == 7);  // header + 6

    // training twice reproduces the artifacts byte for byte
    CmdResult tr2 = run_cli("train --out-dir " + dir + "/run2" + train_args);
    REQUIRE(tr2.status == 0);
    CHECK(slurp_bytes(dir + "/run1/checkpoint.icf") ==
          slurp_bytes(dir + "/run2/checkpoint.icf"));
    CHECK(slurp_bytes(dir + "/run1/loss.csv") ==
          slurp_bytes(dir + "/run2/loss.csv"));

    // sampling produces a decodable canvas-sized PNG, stable across reruns
    std::string sample_args = "sample --checkpoint " + dir +
                              "/run1/checkpoint.icf --instruction "
                              "\"recolor sprite 0 red\" --steps 2 --seed 3 "
                              "--guidance 1 --out ";
    REQUIRE(run_cli(sample_args + dir + "/a.png").status == 0);
    REQUIRE(run_cli(sample_args + dir + "/b.png").status == 0);
    CHECK(slurp_bytes(dir + "/a.png") == slurp_bytes(dir + "/b.png"));
    auto img = read_png<float>(dir + "/a.png");
    CHECK(img.height == 16);
    CHECK(img.width == 16);

    // instruction words outside the stored vocab are a config error
    CHECK(run_cli("sample --checkpoint " + dir +
                  "/run1/checkpoint.icf --instruction zebra --out " + dir +
                  "/z.png")
              .status == 2);

    // edit-loop: one PNG per turn plus a drift table
    Rng scene_rng(5);
    write_png(dir + "/scene.png",
              toybench::render(toybench::gen_scene(scene_rng, 4, 6)));
    write_text_file(dir + "/script.txt",
                    "recolor sprite 0 yellow\n# comment\nrecolor sprite 1 "
                    "magenta\n");
    CmdResult loop = run_cli("edit-loop --checkpoint " + dir +
                             "/run1/checkpoint.icf --image " + dir +
                             "/scene.png --script " + dir +
                             "/script.txt --out-dir " + dir +
                             "/loop --steps 2 --guidance 1 --seed 2");
    INFO(loop.output);
    REQUIRE(loop.status == 0);
    CHECK(fs::exists(dir + "/loop/turn_01.png"));
    CHECK(fs::exists(dir + "/loop/turn_02.png"));
    std::string drift = read_text_file(dir + "/loop/drift.csv");
    CHECK(drift.rfind("turn,identity,edit_accuracy\n", 0) == 0);
    CHECK(std::count(drift.begin(), drift.end(), '\n') == 3);

    // eval writes the per-category report
    CmdResult ev = run_cli("eval --checkpoint " + dir +
                           "/run1/checkpoint.icf --data " + dir +
                           "/train.icfds --out-dir " + dir +
                           "/eval --steps 2 --limit 4 --deterministic");
    INFO(ev.output);
    REQUIRE(ev.status == 0);
    std::string report = read_text_file(dir + "/eval/report.csv");
    CHECK(report.rfind("category,count,edit_accuracy,identity\n", 0) == 0);
    CHECK(report.find("\noverall,4,") != std::string::npos);

    // drift eval emits curve files renderable by plot
    CmdResult dr = run_cli("eval --checkpoint " + dir +
                           "/run1/checkpoint.icf --out-dir " + dir +
                           "/drift --drift --scenes 2 --turns 2 --steps 2 "
                           "--seed 4 --deterministic");
    INFO(dr.output);
    REQUIRE(dr.status == 0);
    CHECK(fs::exists(dir + "/drift/drift.csv"));
    CHECK(fs::exists(dir + "/drift/drift.svg"));
    CmdResult pl = run_cli("plot --drift-csv " + dir +
                           "/drift/drift.csv --out-dir " + dir + "/dplot");
    REQUIRE(pl.status == 0);
    CHECK(read_text_file(dir + "/dplot/drift.svg").rfind("<svg", 0) == 0);
}
