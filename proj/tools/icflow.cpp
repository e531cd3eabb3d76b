// icflow: one binary for the whole toy editing workflow: dataset
// generation, flow-matching training, ODE sampling, multi-turn editing,
// evaluation, schedule verification, and plotting.
//
// Exit codes: 0 ok, 1 runtime error, 2 config error, 3 verification failure.

#include "icflow/checkpoint.hpp"
#include "icflow/dataset.hpp"
#include "icflow/flow.hpp"
#include "icflow/image_io.hpp"
#include "icflow/plot.hpp"
#include "icflow/sampler.hpp"
#include "icflow/schedule.hpp"
#include "icflow/toybench.hpp"

#include <CLI11.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
namespace tb = icflow::toybench;
using icflow::ConfigError;
using icflow::Error;
using json = nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitVerify = 3;

// library validators throw plain Error; bad values coming from flags or a
// config file are the user's problem, so re-tag them
template <typename F>
void check_config(F&& f) {
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

double to_double(const std::string& s, const std::string& what) {
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size())
            throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(what + ": not a number: '" + s + "'");
    }
}

// "mu=1.0986,sigma=1" or "alpha=3"; sigma defaults to 1
icflow::TimestepDistribution parse_schedule(const std::string& text) {
    icflow::TimestepDistribution d;
    for (const std::string& part : split(text, ',')) {
        if (part.empty())
            continue;
        auto kv = split(part, '=');
        if (kv.size() != 2)
            throw ConfigError("schedule: expected key=value, got '" + part +
                              "'");
        double v = to_double(kv[1], "schedule " + kv[0]);
        if (kv[0] == "mu")
            d.mu = v;
        else if (kv[0] == "sigma")
            d.sigma = v;
        else if (kv[0] == "alpha")
            d.mu = icflow::mu_from_alpha(v);
        else
            throw ConfigError("schedule: unknown key '" + kv[0] +
                              "' (use mu, sigma, alpha)");
    }
    check_config([&] { d.validate(); });
    return d;
}

// whitespace-separated words looked up in the vocab; with an empty vocab
// the words must be numeric token ids. Empty text = empty instruction.
std::vector<int> tokens_from_text(const std::string& text,
                                  const std::vector<std::string>& vocab) {
    std::istringstream is(text);
    std::string w;
    std::vector<int> ids;
    while (is >> w) {
        if (vocab.empty()) {
            try {
                ids.push_back(std::stoi(w));
            } catch (const std::exception&) {
                throw ConfigError(
                    "instruction: no vocab in checkpoint, token must be an "
                    "integer id: '" +
                    w + "'");
            }
        } else {
            auto it = std::find(vocab.begin(), vocab.end(), w);
            if (it == vocab.end())
                throw ConfigError("instruction: word '" + w +
                                  "' is not in the checkpoint vocab");
            ids.push_back(static_cast<int>(it - vocab.begin()));
        }
    }
    return ids;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw Error("cannot create output dir " + dir + ": " + ec.message());
}

// every run directory records what produced it: resolved config, build
// version, and the seed, enough to reproduce the artifacts bit for bit
void write_run_json(const std::string& dir, const std::string& command,
                    uint64_t seed, const json& resolved) {
    json j{{"command", command},
           {"version", icflow::version_string()},
           {"seed", seed},
           {"config", resolved}};
    icflow::write_text_file(dir + "/run.json", j.dump(2) + "\n");
}

struct LoadedModel {
    icflow::ModelParams<float> params;
    icflow::CheckpointMeta meta;
};

LoadedModel load_model(const std::string& path) {
    LoadedModel m;
    m.params = icflow::load_checkpoint<float>(path, m.meta);
    return m;
}

icflow::TimestepDistribution dist_for_sampling(
    const icflow::CheckpointMeta& meta, std::optional<double> mu,
    std::optional<double> sigma) {
    icflow::TimestepDistribution d;
    d.mu = meta.extra.value("mu", 0.0);
    d.sigma = meta.extra.value("sigma", 1.0);
    if (mu)
        d.mu = *mu;
    if (sigma)
        d.sigma = *sigma;
    check_config([&] { d.validate(); });
    return d;
}

// ---------------------------------------------------------------------------
// generate-data
// ---------------------------------------------------------------------------

struct GenerateOpts {
    std::string out;
    int n = 1024;
    uint64_t seed = 0;
    int patch = 4;
    std::string image_format = "raw";
    int min_sprites = 2;
    int max_sprites = 5;
    std::string weights;      // "local,global,cref,text"
    std::string local_kinds;  // "recolor,remove,move"
};

int cmd_generate(const GenerateOpts& o) {
    tb::GenConfig gcfg;
    gcfg.min_sprites = o.min_sprites;
    gcfg.max_sprites = o.max_sprites;
    if (!o.weights.empty()) {
        auto parts = split(o.weights, ',');
        if (parts.size() != tb::kCategoryCount)
            throw ConfigError("--weights needs " +
                              std::to_string(tb::kCategoryCount) +
                              " comma-separated values");
        for (size_t i = 0; i < parts.size(); ++i)
            gcfg.category_weights[i] = to_double(parts[i], "--weights");
    }
    if (!o.local_kinds.empty()) {
        for (const std::string& name : split(o.local_kinds, ',')) {
            if (name == "recolor")
                gcfg.local_kinds.push_back(tb::EditKind::recolor);
            else if (name == "remove")
                gcfg.local_kinds.push_back(tb::EditKind::remove);
            else if (name == "move")
                gcfg.local_kinds.push_back(tb::EditKind::move);
            else
                throw ConfigError("--local-kinds: unknown kind '" + name +
                                  "' (use recolor, remove, move)");
        }
    }
    check_config([&] { gcfg.validate(); });
    if (o.n < 1)
        throw ConfigError("--n must be >= 1");

    icflow::Rng rng(o.seed);
    auto examples = tb::generate(rng, o.n, gcfg);

    icflow::DatasetHeader header;
    header.patch = o.patch;
    header.image_format = o.image_format;
    check_config([&] { header.validate(); });
    header.stats = icflow::dataset_latent_stats(examples, header.patch);
    header.vocab = tb::vocab();
    header.extra = {{"version", icflow::version_string()},
                    {"command", "generate-data"},
                    {"seed", o.seed},
                    {"n", o.n},
                    {"min_sprites", o.min_sprites},
                    {"max_sprites", o.max_sprites},
                    {"weights", gcfg.category_weights},
                    {"local_kinds", o.local_kinds}};
    icflow::save_dataset(o.out, header, examples);

    std::array<int, tb::kCategoryCount> counts{};
    for (const auto& ex : examples)
        ++counts[static_cast<size_t>(ex.category)];
    std::printf("wrote %d examples to %s (", o.n, o.out.c_str());
    for (int c = 0; c < tb::kCategoryCount; ++c)
        std::printf("%s%s %d", c ? ", " : "",
                    tb::category_name(static_cast<tb::Category>(c)),
                    counts[static_cast<size_t>(c)]);
    std::printf(")\n");
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string data;
    std::string out_dir;
    int steps = 2000;
    int batch = 32;
    int warmup = 100;
    double lr = 1e-3;
    double final_lr_fraction = 1.0;
    double grad_clip = 1.0;
    double dropout = 0.1;
    std::optional<double> mu;  // default: from the target token count
    double sigma = 1.0;
    uint64_t seed = 0;
    int threads = 0;
    bool deterministic = false;
    int model_dim = 64;
    int heads = 4;
    int depth_double = 1;
    int depth_single = 2;
    int time_embed = 64;
    double mlp_ratio = 4.0;
    int log_every = 50;
    int checkpoint_every = 0;
};

int cmd_train(const TrainOpts& o) {
    auto [header, raw] = icflow::load_dataset(o.data);
    auto dataset = icflow::to_train_examples<float>(raw, header.patch,
                                                    header.stats);
    if (dataset.empty())
        throw ConfigError("dataset is empty: " + o.data);

    icflow::ModelConfig cfg;
    cfg.patch = header.patch;
    cfg.latent_channels = header.channels * header.patch * header.patch;
    cfg.model_dim = o.model_dim;
    cfg.num_heads = o.heads;
    cfg.depth_double = o.depth_double;
    cfg.depth_single = o.depth_single;
    cfg.time_embed_dim = o.time_embed;
    cfg.mlp_ratio = o.mlp_ratio;
    cfg.instruction_vocab =
        header.vocab.empty() ? 64 : static_cast<int>(header.vocab.size());
    check_config([&] { cfg.validate(); });

    const int target_tokens =
        (header.height / header.patch) * (header.width / header.patch);
    icflow::TimestepDistribution dist;
    dist.mu = o.mu ? *o.mu : icflow::default_mu_for_tokens(target_tokens);
    dist.sigma = o.sigma;
    check_config([&] { dist.validate(); });

    icflow::TrainConfig tcfg;
    tcfg.steps = o.steps;
    tcfg.batch_size = o.batch;
    tcfg.learning_rate = o.lr;
    tcfg.warmup_steps = o.warmup;
    tcfg.final_lr_fraction = o.final_lr_fraction;
    tcfg.grad_clip = o.grad_clip;
    tcfg.context_dropout_prob = o.dropout;
    tcfg.dist = dist;
    tcfg.seed = o.seed;
    tcfg.threads = o.deterministic ? 1 : o.threads;
    check_config([&] { tcfg.validate(); });

    ensure_dir(o.out_dir);
    json resolved{{"data", o.data},
                  {"model", cfg},
                  {"steps", o.steps},
                  {"batch_size", o.batch},
                  {"learning_rate", o.lr},
                  {"final_lr_fraction", o.final_lr_fraction},
                  {"warmup_steps", o.warmup},
                  {"grad_clip", o.grad_clip},
                  {"context_dropout", o.dropout},
                  {"mu", dist.mu},
                  {"sigma", dist.sigma},
                  {"threads", tcfg.threads},
                  {"deterministic", o.deterministic},
                  {"checkpoint_every", o.checkpoint_every}};
    write_run_json(o.out_dir, "train", o.seed, resolved);

    icflow::Rng init_rng(o.seed);
    auto params = icflow::init_params<float>(cfg, init_rng);
    std::fprintf(stderr, "training: %lld parameters, %zu examples, %d steps\n",
                 static_cast<long long>(icflow::param_count(params)),
                 dataset.size(), o.steps);

    std::ofstream loss_csv(o.out_dir + "/loss.csv",
                           std::ios::binary | std::ios::trunc);
    if (!loss_csv)
        throw Error("cannot open " + o.out_dir + "/loss.csv");
    loss_csv << "step,loss,grad_norm,seconds\n";

    icflow::CheckpointMeta meta;
    meta.config = cfg;
    meta.stats = header.stats;
    meta.vocab = header.vocab;
    meta.extra = {{"canvas_h", header.height}, {"canvas_w", header.width},
                  {"mu", dist.mu},             {"sigma", dist.sigma},
                  {"seed", o.seed},            {"dataset", o.data},
                  {"version", icflow::version_string()}};

    icflow::train(
        params, cfg, dataset, tcfg, [&](const icflow::LossReport& r) {
            char buf[128];
            // wall time is suppressed under --deterministic so two runs
            // produce byte-identical loss files
            std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.3f\n", r.step,
                          r.loss, r.grad_norm,
                          o.deterministic ? 0.0 : r.seconds);
            loss_csv << buf;
            if (o.log_every > 0 &&
                (r.step % o.log_every == 0 || r.step + 1 == o.steps))
                std::fprintf(stderr, "step %6d  loss %.6f  grad %.4f  %.1fs\n",
                             r.step, r.loss, r.grad_norm, r.seconds);
            if (o.checkpoint_every > 0 &&
                (r.step + 1) % o.checkpoint_every == 0 &&
                r.step + 1 < o.steps) {
                icflow::CheckpointMeta m = meta;
                m.extra["step"] = r.step + 1;
                char name[48];
                std::snprintf(name, sizeof(name), "/checkpoint_%06d.icf",
                              r.step + 1);
                icflow::save_checkpoint(o.out_dir + name, params, m);
            }
        });
    loss_csv.close();
    if (!loss_csv)
        throw Error("failed writing " + o.out_dir + "/loss.csv");

    meta.extra["step"] = o.steps;
    icflow::save_checkpoint(o.out_dir + "/checkpoint.icf", params, meta);
    std::printf("checkpoint: %s/checkpoint.icf\n", o.out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

struct SampleOpts {
    std::string checkpoint;
    std::string out;
    std::vector<std::string> contexts;
    std::string instruction;
    int steps = 64;
    double guidance = 2.0;
    uint64_t seed = 0;
    int height = 0;  // 0 = canvas dims recorded in the checkpoint
    int width = 0;
    std::optional<double> mu, sigma;
};

int cmd_sample(const SampleOpts& o) {
    LoadedModel m = load_model(o.checkpoint);
    std::vector<int> instruction =
        tokens_from_text(o.instruction, m.meta.vocab);
    std::vector<icflow::ImageTensor<float>> ctx;
    for (const std::string& path : o.contexts)
        ctx.push_back(icflow::read_png<float>(path));

    int h = o.height > 0 ? o.height : m.meta.extra.value("canvas_h", 16);
    int w = o.width > 0 ? o.width : m.meta.extra.value("canvas_w", 16);

    icflow::SamplerConfig scfg;
    scfg.num_steps = o.steps;
    scfg.guidance_scale = o.guidance;
    scfg.seed = o.seed;
    scfg.dist = dist_for_sampling(m.meta, o.mu, o.sigma);
    check_config([&] { scfg.validate(); });

    auto out = icflow::sample_image(m.params, m.meta.config, ctx, instruction,
                                    h, w, m.meta.stats, scfg);
    icflow::write_png(o.out, out);
    std::printf("wrote %s (%dx%d, %d steps, guidance %g)\n", o.out.c_str(), w,
                h, o.steps, o.guidance);
    return 0;
}

// ---------------------------------------------------------------------------
// edit-loop
// ---------------------------------------------------------------------------

struct LoopOpts {
    std::string checkpoint;
    std::string image;
    std::string script;
    std::string out_dir;
    int steps = 64;
    double guidance = 2.0;
    uint64_t seed = 0;
    bool ablate = false;
    std::optional<double> mu, sigma;
};

int cmd_edit_loop(const LoopOpts& o) {
    LoadedModel m = load_model(o.checkpoint);
    auto initial = icflow::read_png<float>(o.image);

    std::ifstream script(o.script);
    if (!script)
        throw ConfigError("cannot open script file " + o.script);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(script, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
            line.pop_back();
        if (!line.empty() && line[0] != '#')
            lines.push_back(line);
    }
    if (lines.empty())
        throw ConfigError("script file has no instructions: " + o.script);
    std::vector<std::vector<int>> instructions;
    for (const std::string& l : lines)
        instructions.push_back(tokens_from_text(l, m.meta.vocab));

    icflow::SamplerConfig scfg;
    scfg.num_steps = o.steps;
    scfg.guidance_scale = o.guidance;
    scfg.seed = o.seed;
    scfg.dist = dist_for_sampling(m.meta, o.mu, o.sigma);
    check_config([&] { scfg.validate(); });

    ensure_dir(o.out_dir);
    json resolved{{"checkpoint", o.checkpoint}, {"image", o.image},
                  {"script", o.script},         {"steps", o.steps},
                  {"guidance", o.guidance},     {"turns", lines.size()},
                  {"ablate_context", o.ablate}};
    write_run_json(o.out_dir, "edit-loop", o.seed, resolved);

    auto outputs = icflow::edit_loop(m.params, m.meta.config, initial,
                                     instructions, m.meta.stats, scfg,
                                     o.ablate);
    for (size_t k = 0; k < outputs.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "/turn_%02zu.png", k + 1);
        icflow::write_png(o.out_dir + name, outputs[k]);
    }

    // score each turn against the instruction oracle; requires the starting
    // image to be a valid toy canvas
    std::vector<tb::Edit> edits;
    check_config([&] {
        for (const auto& ids : instructions)
            edits.push_back(tb::parse_instruction(ids));
    });
    std::vector<tb::SceneSpec> truth{tb::parse(initial)};
    for (const auto& e : edits)
        truth.push_back(tb::apply_edit(truth.back(), e));

    tb::EvalReport rep;
    for (size_t k = 0; k < outputs.size(); ++k) {
        tb::EditScore s = tb::score_edit(outputs[k], truth[k], truth[k + 1]);
        rep.drift_identity.push_back(s.identity);
        rep.drift_accuracy.push_back(s.accurate ? 1.0 : 0.0);
    }
    icflow::write_text_file(o.out_dir + "/drift.csv", rep.drift_csv());
    std::printf("%zu turns -> %s (drift.csv, turn_*.png)\n", outputs.size(),
                o.out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOpts {
    std::string checkpoint;
    std::string data;
    std::string out_dir;
    int steps = 32;
    double guidance = 1.0;
    uint64_t seed = 0;
    int limit = 0;
    bool ablate = false;
    bool drift = false;
    int scenes = 64;
    int turns = 5;
    int min_sprites = 4;
    int max_sprites = 7;
    int threads = 0;
    bool deterministic = false;
    std::optional<double> mu, sigma;
};

int cmd_eval(const EvalOpts& o) {
    LoadedModel m = load_model(o.checkpoint);
    icflow::SamplerConfig base;
    base.num_steps = o.steps;
    base.guidance_scale = o.guidance;
    base.dist = dist_for_sampling(m.meta, o.mu, o.sigma);
    base.seed = o.seed;
    check_config([&] { base.validate(); });
    ensure_dir(o.out_dir);

    if (o.drift) {
        if (o.min_sprites < 3)
            throw ConfigError(
                "--min-sprites must be >= 3 for drift scripts (2 sprites are "
                "reserved as probes)");
        if (o.turns < 2)
            throw ConfigError("--turns must be >= 2");
        json resolved{{"checkpoint", o.checkpoint}, {"scenes", o.scenes},
                      {"turns", o.turns},           {"steps", o.steps},
                      {"guidance", o.guidance},     {"ablate", o.ablate},
                      {"min_sprites", o.min_sprites},
                      {"max_sprites", o.max_sprites}};
        write_run_json(o.out_dir, "eval-drift", o.seed, resolved);

        icflow::Rng rng(o.seed);
        std::vector<tb::SceneSpec> scenes;
        std::vector<std::vector<tb::Edit>> scripts;
        for (int s = 0; s < o.scenes; ++s) {
            scenes.push_back(tb::gen_scene(rng, o.min_sprites, o.max_sprites));
            scripts.push_back(tb::gen_drift_script(rng, scenes.back(),
                                                   o.turns));
        }
        std::atomic<int> calls{0};
        auto sampler = [&](const icflow::ImageTensor<float>& current,
                           const std::vector<int>& instruction, size_t si,
                           int turn) {
            icflow::SamplerConfig scfg = base;
            scfg.seed = o.seed + 1000003ull * si + static_cast<uint64_t>(turn);
            std::vector<icflow::ImageTensor<float>> ctx;
            if (!o.ablate)
                ctx.push_back(current);
            auto out = icflow::sample_image(m.params, m.meta.config, ctx,
                                            instruction, current.height,
                                            current.width, m.meta.stats, scfg);
            int done = ++calls;
            if (done % 32 == 0)
                std::fprintf(stderr, "drift eval %d/%d turns\n", done,
                             o.scenes * o.turns);
            return out;
        };
        tb::DriftResult dr = tb::drift_eval(scenes, scripts, sampler);
        tb::EvalReport rep;
        rep.drift_identity = dr.identity_per_turn;
        rep.drift_accuracy = dr.accuracy_per_turn;
        icflow::write_text_file(o.out_dir + "/drift.csv", rep.drift_csv());

        icflow::Series ids{"identity", {}, {}}, accs{"edit accuracy", {}, {}};
        for (size_t k = 0; k < dr.identity_per_turn.size(); ++k) {
            ids.x.push_back(static_cast<double>(k + 1));
            ids.y.push_back(dr.identity_per_turn[k]);
            accs.x.push_back(static_cast<double>(k + 1));
            accs.y.push_back(dr.accuracy_per_turn[k]);
        }
        icflow::write_text_file(
            o.out_dir + "/drift.svg",
            icflow::svg_line_chart({ids, accs}, "identity drift over turns",
                                   "turn", "score"));
        std::printf("drift identity by turn:");
        for (double v : dr.identity_per_turn)
            std::printf(" %.4f", v);
        std::printf("\n");
        return 0;
    }

    if (o.data.empty())
        throw ConfigError("--data is required (or pass --drift)");
    auto [header, examples] = icflow::load_dataset(o.data);
    if (o.limit > 0 && static_cast<int>(examples.size()) > o.limit)
        examples.resize(static_cast<size_t>(o.limit));
    if (examples.empty())
        throw ConfigError("no examples to evaluate in " + o.data);

    json resolved{{"checkpoint", o.checkpoint}, {"data", o.data},
                  {"steps", o.steps},           {"guidance", o.guidance},
                  {"limit", o.limit},           {"ablate", o.ablate},
                  {"examples", examples.size()}};
    write_run_json(o.out_dir, "eval", o.seed, resolved);

    const int64_t n = static_cast<int64_t>(examples.size());
    std::vector<tb::EditScore> scores(examples.size());
    std::vector<tb::Category> cats(examples.size());
    const int threads =
        o.deterministic ? 1 : icflow::resolve_threads(o.threads);
    std::atomic<int> done{0};
    std::string worker_error;
    std::mutex error_mu;
    icflow::parallel_for_chunks(n, threads, [&](int64_t b, int64_t e, int) {
        try {
            for (int64_t i = b; i < e; ++i) {
                const auto& ex = examples[static_cast<size_t>(i)];
                icflow::SamplerConfig scfg = base;
                scfg.seed = o.seed + static_cast<uint64_t>(i);
                std::vector<icflow::ImageTensor<float>> ctx;
                if (!o.ablate)
                    ctx.push_back(ex.context);
                auto out = icflow::sample_image(
                    m.params, m.meta.config, ctx, ex.instruction,
                    header.height, header.width, m.meta.stats, scfg);
                scores[static_cast<size_t>(i)] =
                    tb::score_edit(out, ex.before, ex.after);
                cats[static_cast<size_t>(i)] = ex.category;
                int d = ++done;
                if (d % 32 == 0)
                    std::fprintf(stderr, "eval %d/%lld\n", d,
                                 static_cast<long long>(n));
            }
        } catch (const std::exception& err) {
            std::lock_guard<std::mutex> lock(error_mu);
            if (worker_error.empty())
                worker_error = err.what();
        }
    });
    if (!worker_error.empty())
        throw Error("eval: " + worker_error);

    tb::EvalReport rep = tb::aggregate_scores(cats, scores);
    icflow::write_text_file(o.out_dir + "/report.csv", rep.csv());
    icflow::write_text_file(o.out_dir + "/summary.txt", rep.summary());
    std::fputs(rep.summary().c_str(), stdout);
    return 0;
}

// ---------------------------------------------------------------------------
// verify-math
// ---------------------------------------------------------------------------

struct Verifier {
    int failures = 0;
    void row(bool ok, const std::string& name, const std::string& detail) {
        std::printf("%s  %-46s %s\n", ok ? "pass" : "FAIL", name.c_str(),
                    detail.c_str());
        if (!ok)
            ++failures;
    }
};

int cmd_verify_math() {
    Verifier v;
    char buf[160];

    {
        double mu = icflow::mu_from_alpha(3.0);
        std::snprintf(buf, sizeof(buf), "mu = %.6f (want 1.0986)", mu);
        v.row(std::abs(mu - 1.0986) < 1e-4, "mu_from_alpha(3.0)", buf);
    }
    {
        double worst = 0.0;
        for (double alpha : {0.5, 2.0, 3.0, 8.0}) {
            icflow::TimestepDistribution d(icflow::mu_from_alpha(alpha), 1.0);
            for (int k = 0; k <= 1000; ++k) {
                double t = k / 1000.0;
                double want = alpha * t / (1.0 + (alpha - 1.0) * t);
                worst = std::max(
                    worst, std::abs(icflow::shift_timestep(t, d) - want));
            }
        }
        std::snprintf(buf, sizeof(buf), "max |err| = %.3g (tol 1e-12)", worst);
        v.row(worst < 1e-12, "shift(t) == alpha*t/(1+(alpha-1)t) at sigma=1",
              buf);
    }
    {
        double worst = 0.0;
        for (double mu : {-1.0, 0.0, 1.0986, 2.0})
            for (double sigma : {0.5, 1.0, 2.0}) {
                icflow::TimestepDistribution d(mu, sigma);
                for (int k = 1; k < 200; ++k) {
                    double t = k / 200.0;
                    double lhs =
                        icflow::log_snr(icflow::shift_timestep(t, d));
                    double rhs = icflow::shifted_log_snr(t, d);
                    worst = std::max(worst, std::abs(lhs - rhs));
                }
            }
        std::snprintf(buf, sizeof(buf), "max |err| = %.3g (tol 1e-10)", worst);
        v.row(worst < 1e-10, "log_snr(shift(t)) == shifted_log_snr(t)", buf);
    }
    {
        bool mono = true;
        for (double mu : {-1.0, 0.0, 2.0})
            for (double sigma : {0.5, 1.0, 2.0}) {
                icflow::TimestepDistribution d(mu, sigma);
                double prev = icflow::shift_timestep(0.0, d);
                for (int k = 1; k <= 500 && mono; ++k) {
                    double cur = icflow::shift_timestep(k / 500.0, d);
                    mono = cur > prev;
                    prev = cur;
                }
            }
        v.row(mono, "shift_timestep strictly increasing",
              mono ? "all grids monotone" : "monotonicity violated");
    }
    {
        double got = icflow::log_snr(0.25);
        double want = 2.0 * std::log(3.0);
        std::snprintf(buf, sizeof(buf), "log_snr(0.25) = %.12f (want 2 ln 3)",
                      got);
        v.row(std::abs(got - want) < 1e-12, "log-SNR closed form", buf);
    }
    {
        icflow::Matd x(1, 2), eps(1, 2);
        x << 1.0, 0.0;
        eps << 0.0, 2.0;
        auto st = icflow::interpolate(x, eps, 0.25);
        bool ok = std::abs(st.z(0, 0) - 0.75) < 1e-15 &&
                  std::abs(st.z(0, 1) - 0.5) < 1e-15;
        std::snprintf(buf, sizeof(buf), "z = [%.4f, %.4f] (want [0.75, 0.5])",
                      st.z(0, 0), st.z(0, 1));
        v.row(ok, "interpolate([1,0],[0,2],0.25)", buf);
    }
    {
        icflow::Rng rng(11);
        double worst = 0.0;
        for (int trial = 0; trial < 10000; ++trial) {
            icflow::Matd x(1, 4), eps(1, 4);
            rng.fill_normal(x);
            rng.fill_normal(eps);
            double t = 0.001 + 0.998 * rng.uniform();
            auto st = icflow::interpolate(x, eps, t);
            icflow::Matd general =
                icflow::cfm_target_general(st.z, eps, t);
            icflow::Matd direct = icflow::rf_target(x, eps);
            worst = std::max(worst,
                             (general - direct).cwiseAbs().maxCoeff());
        }
        std::snprintf(buf, sizeof(buf), "max |err| = %.3g (tol 1e-9)", worst);
        v.row(worst < 1e-9, "general CFM target reduces to eps - x", buf);
    }
    {
        icflow::TimestepDistribution d(std::log(3.0), 1.0);
        icflow::Rng rng(12);
        const int n = 1000000;
        auto ts = icflow::sample_t(d, rng, n);
        double mean = 0.0;
        for (double t : ts)
            mean += icflow::logit(t);
        mean /= n;
        std::snprintf(buf, sizeof(buf),
                      "mean logit(t) = %.5f (want %.5f +- 0.01)", mean, d.mu);
        v.row(std::abs(mean - d.mu) < 0.01, "logit-normal sample mean", buf);

        // 50 equiprobable bins via the probability transform
        boost::math::normal_distribution<double> stdnorm;
        const int bins = 50;
        std::vector<int> counts(bins, 0);
        for (double t : ts) {
            double u = boost::math::cdf(stdnorm,
                                        (icflow::logit(t) - d.mu) / d.sigma);
            int b = std::min(bins - 1,
                             std::max(0, static_cast<int>(u * bins)));
            ++counts[static_cast<size_t>(b)];
        }
        double expect = static_cast<double>(n) / bins;
        double chi2 = 0.0;
        for (int c : counts)
            chi2 += (c - expect) * (c - expect) / expect;
        boost::math::chi_squared_distribution<double> chi(bins - 1);
        double p = 1.0 - boost::math::cdf(chi, chi2);
        std::snprintf(buf, sizeof(buf),
                      "chi2 = %.1f over %d bins, p = %.4f (need > 0.001)",
                      chi2, bins, p);
        v.row(p > 0.001, "logit-normal distribution fit", buf);
    }
    {
        icflow::SamplerConfig scfg;
        scfg.num_steps = 2;
        scfg.dist = icflow::TimestepDistribution(std::log(3.0), 1.0);
        auto grid = icflow::timestep_grid(scfg);
        bool ok = grid.size() == 3 && grid.front() == 1.0 &&
                  grid.back() == 0.0 && std::abs(grid[1] - 0.75) < 1e-12;
        std::snprintf(buf, sizeof(buf), "grid = [1, %.6f, 0] (want mid 0.75)",
                      grid.size() == 3 ? grid[1] : -1.0);
        v.row(ok, "2-step grid midpoint at alpha=3", buf);
    }
    {
        double a = icflow::default_mu_for_tokens(256);
        double b = icflow::default_mu_for_tokens(1024);
        bool ok = std::abs(a) < 1e-12 && std::abs(b - std::log(2.0)) < 1e-12;
        std::snprintf(buf, sizeof(buf),
                      "mu(256) = %.3g, mu(1024) = %.6f (want 0, ln 2)", a, b);
        v.row(ok, "token-count mu default", buf);
    }

    if (v.failures > 0) {
        std::printf("%d identity check(s) FAILED\n", v.failures);
        return kExitVerify;
    }
    std::printf("all identity checks passed\n");
    return 0;
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

struct PlotOpts {
    std::vector<std::string> schedules;
    std::string drift_csv;
    std::string out_dir = ".";
    int points = 100;
};

// 4 significant digits: plot-resolution output, and closed-form grid values
// print exactly (the alpha=3 shift of t=0.5 reads 0.75, not 0.749998, even
// though mu carries only five digits of log 3)
std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

int cmd_plot(const PlotOpts& o) {
    if (o.schedules.empty() && o.drift_csv.empty())
        throw ConfigError("nothing to plot: pass --schedule and/or --drift-csv");
    if (o.points < 2)
        throw ConfigError("--points must be >= 2");
    ensure_dir(o.out_dir);

    if (!o.schedules.empty()) {
        std::vector<icflow::Series> shifted, lambdas;
        for (size_t i = 0; i < o.schedules.size(); ++i) {
            icflow::TimestepDistribution d = parse_schedule(o.schedules[i]);
            char label[64];
            std::snprintf(label, sizeof(label), "mu=%.4g sigma=%.4g", d.mu,
                          d.sigma);
            icflow::Series st{label, {}, {}}, sl{label, {}, {}};
            std::string csv = "t,lambda,t_shifted\n";
            for (int k = 0; k <= o.points; ++k) {
                double t = static_cast<double>(k) / o.points;
                double lam = icflow::log_snr(t);
                double ts = icflow::shift_timestep(t, d);
                csv += fmt4(t) + "," + fmt4(lam) + "," + fmt4(ts) + "\n";
                st.x.push_back(t);
                st.y.push_back(ts);
                if (k > 0 && k < o.points) {
                    sl.x.push_back(t);
                    sl.y.push_back(lam);
                }
            }
            std::string name = o.out_dir + "/schedule_" +
                               std::to_string(i + 1) + ".csv";
            icflow::write_text_file(name, csv);
            std::printf("wrote %s\n", name.c_str());
            shifted.push_back(std::move(st));
            lambdas.push_back(std::move(sl));
        }
        icflow::write_text_file(
            o.out_dir + "/schedule.svg",
            icflow::svg_line_chart(shifted, "shifted timestep t'", "t", "t'"));
        icflow::write_text_file(
            o.out_dir + "/lambda.svg",
            icflow::svg_line_chart(lambdas, "log-SNR over t", "t", "lambda"));
        std::printf("wrote %s/schedule.svg, %s/lambda.svg\n", o.out_dir.c_str(),
                    o.out_dir.c_str());
    }

    if (!o.drift_csv.empty()) {
        std::istringstream is(icflow::read_text_file(o.drift_csv));
        std::string line;
        if (!std::getline(is, line) || line.rfind("turn,", 0) != 0)
            throw ConfigError("drift csv missing 'turn,...' header: " +
                              o.drift_csv);
        auto cols = split(line, ',');
        std::vector<icflow::Series> series;
        for (size_t c = 1; c < cols.size(); ++c)
            series.push_back(icflow::Series{cols[c], {}, {}});
        while (std::getline(is, line)) {
            if (line.empty())
                continue;
            auto vals = split(line, ',');
            if (vals.size() != cols.size())
                throw ConfigError("ragged drift csv row: " + line);
            double turn = to_double(vals[0], "drift csv turn");
            for (size_t c = 1; c < vals.size(); ++c) {
                series[c - 1].x.push_back(turn);
                series[c - 1].y.push_back(
                    to_double(vals[c], "drift csv value"));
            }
        }
        if (series.empty() || series[0].x.empty())
            throw ConfigError("drift csv has no data rows: " + o.drift_csv);
        icflow::write_text_file(
            o.out_dir + "/drift.svg",
            icflow::svg_line_chart(series, "identity drift over turns",
                                   "turn", "score"));
        std::printf("wrote %s/drift.svg\n", o.out_dir.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"in-context rectified-flow toy editing toolkit"};
    app.set_version_flag("--version", icflow::version_string());
    app.set_config("--config", "",
                   "config file (TOML-style key = value; [subcommand] "
                   "sections; flags override file values)");
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.require_subcommand(1);

    GenerateOpts g;
    auto* gen = app.add_subcommand("generate-data",
                                   "write a procedural edit-pair dataset");
    gen->add_option("--out", g.out, "output dataset path")->required();
    gen->add_option("--n", g.n, "number of examples");
    gen->add_option("--seed", g.seed, "generator seed");
    gen->add_option("--patch", g.patch, "codec patch size");
    gen->add_option("--image-format", g.image_format, "raw or png");
    gen->add_option("--min-sprites", g.min_sprites, "min sprites per scene");
    gen->add_option("--max-sprites", g.max_sprites, "max sprites per scene");
    gen->add_option("--weights", g.weights,
                    "category weights local,global,character-ref,text-like");
    gen->add_option("--local-kinds", g.local_kinds,
                    "restrict local edits (comma list of recolor,remove,move)");

    TrainOpts t;
    auto* train = app.add_subcommand("train", "flow-matching training run");
    train->add_option("--data", t.data, "dataset path")->required();
    train->add_option("--out-dir", t.out_dir, "run directory")->required();
    train->add_option("--steps", t.steps, "optimizer steps");
    train->add_option("--batch-size", t.batch, "examples per step");
    train->add_option("--lr", t.lr, "peak learning rate");
    train->add_option("--final-lr-fraction", t.final_lr_fraction,
                      "cosine-decay floor as a fraction of --lr; 1 = constant")
        ->check(CLI::Range(0.0, 1.0));
    train->add_option("--warmup", t.warmup, "linear warmup steps");
    train->add_option("--grad-clip", t.grad_clip, "global-norm clip (0 off)");
    train->add_option("--context-dropout", t.dropout,
                      "probability of dropping the context per example");
    train->add_option("--mu", t.mu,
                      "timestep logit-normal location (default: from the "
                      "target token count)");
    train->add_option("--sigma", t.sigma, "timestep logit-normal scale");
    train->add_option("--seed", t.seed, "training seed");
    train->add_option("--threads", t.threads,
                      "worker threads (0 = ICFLOW_THREADS or hardware)");
    train->add_flag("--deterministic", t.deterministic,
                    "single-threaded, bit-exact artifacts");
    train->add_option("--model-dim", t.model_dim, "transformer width");
    train->add_option("--heads", t.heads, "attention heads");
    train->add_option("--depth-double", t.depth_double,
                      "double-stream blocks");
    train->add_option("--depth-single", t.depth_single,
                      "single-stream blocks");
    train->add_option("--time-embed", t.time_embed,
                      "timestep embedding width");
    train->add_option("--mlp-ratio", t.mlp_ratio, "MLP hidden multiplier");
    train->add_option("--log-every", t.log_every,
                      "progress line interval (0 silences)");
    train->add_option("--checkpoint-every", t.checkpoint_every,
                      "also write checkpoint_NNNNNN.icf every N steps");

    SampleOpts s;
    auto* sample = app.add_subcommand("sample",
                                      "generate one image from a checkpoint");
    sample->add_option("--checkpoint", s.checkpoint, "model checkpoint")
        ->required();
    sample->add_option("--out", s.out, "output PNG path")->required();
    sample->add_option("--context", s.contexts,
                       "context PNG (repeatable, in order)");
    sample->add_option("--instruction", s.instruction,
                       "instruction words (vocab of the checkpoint)");
    sample->add_option("--steps", s.steps, "Euler steps");
    sample->add_option("--guidance", s.guidance, "CFG scale");
    sample->add_option("--seed", s.seed, "noise seed");
    sample->add_option("--height", s.height, "target height (default canvas)");
    sample->add_option("--width", s.width, "target width (default canvas)");
    sample->add_option("--mu", s.mu, "grid shift mu (default checkpoint)");
    sample->add_option("--sigma", s.sigma,
                       "grid shift sigma (default checkpoint)");
    sample->add_flag("--deterministic",
                     "accepted for interface symmetry; sampling is already "
                     "single-threaded and seed-exact");

    LoopOpts l;
    auto* loop = app.add_subcommand(
        "edit-loop", "apply a script of edits, one sample per turn");
    loop->add_option("--checkpoint", l.checkpoint, "model checkpoint")
        ->required();
    loop->add_option("--image", l.image, "starting PNG")->required();
    loop->add_option("--script", l.script,
                     "instruction file, one per line, # comments")
        ->required();
    loop->add_option("--out-dir", l.out_dir, "run directory")->required();
    loop->add_option("--steps", l.steps, "Euler steps per turn");
    loop->add_option("--guidance", l.guidance, "CFG scale");
    loop->add_option("--seed", l.seed, "base seed (turn k adds k)");
    loop->add_flag("--ablate-context", l.ablate,
                   "drop the previous image from conditioning");
    loop->add_option("--mu", l.mu, "grid shift mu (default checkpoint)");
    loop->add_option("--sigma", l.sigma,
                     "grid shift sigma (default checkpoint)");
    loop->add_flag("--deterministic",
                   "accepted for interface symmetry; the loop is already "
                   "single-threaded and seed-exact");

    EvalOpts e;
    auto* eval = app.add_subcommand("eval",
                                    "score a checkpoint on held-out edits");
    eval->add_option("--checkpoint", e.checkpoint, "model checkpoint")
        ->required();
    eval->add_option("--data", e.data, "held-out dataset (omit with --drift)");
    eval->add_option("--out-dir", e.out_dir, "run directory")->required();
    eval->add_option("--steps", e.steps, "Euler steps");
    eval->add_option("--guidance", e.guidance, "CFG scale");
    eval->add_option("--seed", e.seed, "base seed (example i adds i)");
    eval->add_option("--limit", e.limit, "evaluate only the first N examples");
    eval->add_flag("--ablate-context", e.ablate,
                   "sample without the context image");
    eval->add_flag("--drift", e.drift,
                   "multi-turn drift evaluation on generated scenes");
    eval->add_option("--scenes", e.scenes, "drift: number of scenes");
    eval->add_option("--turns", e.turns, "drift: edits per scene");
    eval->add_option("--min-sprites", e.min_sprites, "drift: scene min size");
    eval->add_option("--max-sprites", e.max_sprites, "drift: scene max size");
    eval->add_option("--threads", e.threads,
                     "worker threads (0 = ICFLOW_THREADS or hardware)");
    eval->add_flag("--deterministic", e.deterministic,
                   "single-threaded, bit-exact artifacts");
    eval->add_option("--mu", e.mu, "grid shift mu (default checkpoint)");
    eval->add_option("--sigma", e.sigma,
                     "grid shift sigma (default checkpoint)");

    auto* verify = app.add_subcommand(
        "verify-math", "check the schedule and flow identities");

    PlotOpts p;
    auto* plot = app.add_subcommand("plot", "schedule curves and drift plots");
    plot->add_option("--schedule", p.schedules,
                     "mu=..,sigma=.. or alpha=.. (repeatable)");
    plot->add_option("--drift-csv", p.drift_csv,
                     "drift curve CSV to render as SVG");
    plot->add_option("--out-dir", p.out_dir, "output directory");
    plot->add_option("--points", p.points, "schedule grid resolution");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForAllHelp& err) {
        return app.exit(err);
    } catch (const CLI::CallForVersion& err) {
        return app.exit(err);
    } catch (const CLI::ParseError& err) {
        app.exit(err);
        return kExitConfig;
    }

    try {
        if (app.got_subcommand(gen))
            return cmd_generate(g);
        if (app.got_subcommand(train))
            return cmd_train(t);
        if (app.got_subcommand(sample))
            return cmd_sample(s);
        if (app.got_subcommand(loop))
            return cmd_edit_loop(l);
        if (app.got_subcommand(eval))
            return cmd_eval(e);
        if (app.got_subcommand(verify))
            return cmd_verify_math();
        if (app.got_subcommand(plot))
            return cmd_plot(p);
    } catch (const ConfigError& err) {
        std::fprintf(stderr, "config error: %s\n", err.what());
        return kExitConfig;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return kExitRuntime;
    }
    return 0;
}
