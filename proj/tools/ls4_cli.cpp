#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ls4/bench.hpp"
#include "ls4/checkpoint.hpp"
#include "ls4/datagen.hpp"
#include "ls4/metrics.hpp"
#include "ls4/runconfig.hpp"
#include "ls4/vae.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ls4;

namespace {

constexpr const char* kRecordSchema = "ls4.record/1";
constexpr const char* kManifestSchema = "ls4.manifest/1";
constexpr const char* kOutputRootVar = "LS4_OUTPUT_ROOT";

// Input problems the user can fix by changing arguments; exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

fs::path output_path(const std::string& p) {
    fs::path path(p);
    const char* root = std::getenv(kOutputRootVar);
    if (path.is_relative() && root && *root) return fs::path(root) / path;
    return path;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
    const fs::path probe = dir / ".ls4_write_probe";
    std::ofstream f(probe);
    if (!f) throw std::runtime_error("output directory is not writable: " + dir.string());
    f.close();
    fs::remove(probe, ec);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + path.string());
        f << text;
        if (!f) throw std::runtime_error("write failed for " + path.string());
    }
    fs::rename(tmp, path);
}

void write_csv_atomic(const fs::path& path, const data::SeriesBatch& b) {
    write_text_atomic(path, data::format_csv(b, data::CsvLayout::wide));
}

class Records {
public:
    explicit Records(std::ostream* file = nullptr) : file_(file) {}
    void emit(json r) {
        r["schema"] = kRecordSchema;
        const std::string line = r.dump();
        std::cout << line << '\n' << std::flush;
        if (file_) *file_ << line << '\n' << std::flush;
    }

private:
    std::ostream* file_;
};

json manifest(const std::string& command, json args, json files) {
    return {{"schema", kManifestSchema}, {"command", command}, {"args", std::move(args)}, {"files", std::move(files)}};
}

json file_entry(const fs::path& p, const data::SeriesBatch& b) {
    return {{"path", p.filename().string()}, {"sequences", b.count()}, {"length", b.length()}, {"channels", b.channels()}};
}

data::SeriesBatch load_data(const std::string& path) {
    if (path.empty()) throw UsageError("no dataset given (use --data or run.data)");
    if (!fs::exists(path)) throw UsageError("dataset not found: " + path);
    return data::load_csv(path);
}

// Same preprocessing for training and for every later use of a checkpoint.
data::SeriesBatch prepare(data::SeriesBatch b, const RunConfig& run) {
    if (run.length > 0 && run.length != b.length()) {
        if (run.length > b.length()) throw UsageError("run.length exceeds the dataset length");
        b = data::subsample_time(b, run.length);
    }
    if (run.normalize == "per_sequence") b = data::normalize_per_sequence(b);
    else if (run.normalize == "unit") b = data::squash_unit_interval(b);
    return b;
}

RunConfig run_config_of(const Checkpoint& ck) {
    RunConfig run;
    run.model = ck.config;
    if (ck.meta.contains("run")) {
        const auto& r = ck.meta["run"];
        run.normalize = r.value("normalize", "none");
        run.length = r.value("length", std::size_t{0});
        run.data = r.value("data", "");
    }
    return run;
}

Checkpoint load_ck(const std::string& path) {
    if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
    return load_checkpoint(path);
}

ParamStore weights_of(const Checkpoint& ck, const std::string& which) {
    if (which != "ema" && which != "raw") throw UsageError("--weights must be ema or raw");
    return vae::checkpoint_params(ck, which == "ema");
}

// [B, L, C] -> [B, count, C] starting at step `begin`.
Tensor time_slice(const Tensor& t, std::size_t begin, std::size_t count) {
    const std::size_t B = t.dim(0), L = t.dim(1), C = t.dim(2);
    Tensor out(Shape{B, count, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < count; ++l)
            for (std::size_t c = 0; c < C; ++c) out.at(b, l, c) = t[(b * L + begin + l) * C + c];
    return out;
}

// CRPS over the cells where mask is 1; ensemble is [S, cells of target].
double masked_crps(const Tensor& ensemble, const Tensor& target, const Tensor& mask) {
    const std::size_t S = ensemble.dim(0), P = target.size();
    std::vector<double> members(S);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < P; ++i) {
        if (mask[i] == 0.0) continue;
        for (std::size_t s = 0; s < S; ++s) members[s] = ensemble[s * P + i];
        total += metrics::crps_point(members, target[i]);
        ++n;
    }
    if (n == 0) throw UsageError("no evaluation cells for CRPS");
    return total / static_cast<double>(n);
}

// ---- datagen -----------------------------------------------------------------------------

struct DatagenArgs {
    int p = 3;
    std::size_t n = 1000;
    double t_end = 1000.0;
    double dt = 1.0;
    std::size_t length = 0;
    std::size_t runtime_length = 80;
    std::uint64_t seed = 0;
    std::string out = "data";
};

void cmd_datagen_flame(const DatagenArgs& a) {
    data::FlameSpec spec;
    spec.p = a.p;
    spec.n_traj = a.n;
    spec.t_end = a.t_end;
    spec.dt_out = a.dt;
    try {
        if (a.n == 0) throw std::invalid_argument("--n must be positive");
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const fs::path dir = output_path(a.out);
    ensure_dir(dir);
    data::SeriesBatch b = data::flame_generate(spec, a.seed);
    if (a.length > 0) b = data::subsample_time(b, a.length);
    const fs::path file = dir / ("flame_p" + std::to_string(a.p) + ".csv");
    write_csv_atomic(file, b);
    json args{{"p", a.p}, {"n", a.n}, {"t_end", a.t_end}, {"dt", a.dt}, {"length", a.length}, {"seed", a.seed}};
    write_text_atomic(dir / "manifest.json", manifest("datagen flame", args, json::array({file_entry(file, b)})).dump(2) + "\n");
    Records().emit({{"kind", "dataset"}, {"path", file.string()}, {"sequences", b.count()}, {"length", b.length()}});
}

void cmd_datagen_runtime(const DatagenArgs& a) {
    data::RuntimeDataset spec;
    try {
        spec = data::runtime_dataset_spec(a.runtime_length);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const fs::path dir = output_path(a.out);
    ensure_dir(dir);
    const data::SeriesBatch b = data::synthetic_runtime_data(a.runtime_length, a.seed);
    const fs::path file = dir / ("runtime_L" + std::to_string(a.runtime_length) + ".csv");
    write_csv_atomic(file, b);
    json args{{"length", a.runtime_length}, {"seed", a.seed}, {"batch_size", spec.batch_size},
              {"iterations", spec.iterations()}};
    write_text_atomic(dir / "manifest.json", manifest("datagen runtime", args, json::array({file_entry(file, b)})).dump(2) + "\n");
    Records().emit({{"kind", "dataset"}, {"path", file.string()}, {"sequences", b.count()}, {"length", b.length()},
                    {"batch_size", spec.batch_size}});
}

// ---- train -------------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::string data;
    std::string out = "runs/train";
    std::string resume;
    std::size_t epochs = 0;
};

void cmd_train(const TrainArgs& a) {
    RunConfig run;
    std::unique_ptr<vae::Trainer> trainer;
    if (!a.resume.empty()) {
        if (!a.config.empty() || !a.overrides.empty())
            throw UsageError("--resume takes its configuration from the checkpoint");
        const Checkpoint ck = load_ck(a.resume);
        if (!ck.meta.contains("run")) throw UsageError("checkpoint has no run configuration");
        KeyValues kv{{"schema_version", std::to_string(kRunConfigSchema)}};
        for (const auto& [section, body] : ck.meta["run_config"].items())
            for (const auto& [key, v] : body.items())
                kv.emplace_back(section + "." + key, v.is_string() ? v.get<std::string>() : v.dump());
        run = run_config_from_key_values(kv);
        trainer = std::make_unique<vae::Trainer>(ck);
    } else {
        if (a.config.empty()) throw UsageError("train needs --config or --resume");
        if (!fs::exists(a.config)) throw UsageError("config not found: " + a.config);
        run = load_run_config(a.config, a.overrides);
    }
    if (!a.data.empty()) run.data = a.data;
    if (a.epochs > 0) run.train.epochs = a.epochs;
    const data::SeriesBatch batch = prepare(load_data(run.data), run);
    if (batch.channels() != run.model.x_dim)
        throw UsageError("dataset has " + std::to_string(batch.channels()) + " channels but model.x_dim is " +
                         std::to_string(run.model.x_dim));
    if (!trainer) trainer = std::make_unique<vae::Trainer>(run.model, run.train, run.init_seed);

    const fs::path dir = output_path(a.out);
    ensure_dir(dir);
    write_text_atomic(dir / "config.cfg", format_run_config(run));
    std::ofstream log(dir / "metrics.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
    Records rec(&log);

    const fs::path ck_path = dir / "checkpoint.ls4ck";
    auto save = [&] {
        Checkpoint ck = trainer->checkpoint();
        ck.meta["run"] = {{"normalize", run.normalize}, {"length", run.length}, {"data", run.data},
                          {"sequence_length", batch.length()}};
        ck.meta["run_config"] = run_config_to_json(run);
        save_checkpoint(ck_path.string(), ck);
    };
    while (trainer->epoch() < run.train.epochs) {
        const vae::EpochRecord r = trainer->run_epoch(batch.values, batch.mask);
        rec.emit({{"kind", "epoch"}, {"epoch", r.epoch}, {"recon", r.report.recon}, {"kl", r.report.kl},
                  {"elbo", r.report.elbo}, {"ms", r.ms}});
        if (run.checkpoint_every > 0 && trainer->epoch() % run.checkpoint_every == 0) save();
    }
    save();
    write_text_atomic(dir / "manifest.json",
                      manifest("train", run_config_to_json(run),
                               json::array({{{"path", "checkpoint.ls4ck"}, {"epoch", trainer->epoch()}},
                                            {{"path", "metrics.jsonl"}},
                                            {{"path", "config.cfg"}}}))
                          .dump(2) + "\n");
    rec.emit({{"kind", "checkpoint"}, {"path", ck_path.string()}, {"epoch", trainer->epoch()}});
}

// ---- generate ----------------------------------------------------------------------------

struct GenerateArgs {
    std::string checkpoint;
    std::size_t n = 100;
    std::size_t length = 0;
    std::uint64_t seed = 0;
    std::string weights = "ema";
    bool mean_x = false;
    std::string out = "samples.csv";
};

void cmd_generate(const GenerateArgs& a) {
    const Checkpoint ck = load_ck(a.checkpoint);
    const ParamStore params = weights_of(ck, a.weights);
    std::size_t L = a.length;
    if (L == 0 && ck.meta.contains("run")) L = ck.meta["run"].value("sequence_length", std::size_t{0});
    if (L == 0) throw UsageError("--length is required for this checkpoint");
    if (a.n == 0) throw UsageError("--n must be positive");
    vae::GenerateOptions opts;
    opts.sample_x = !a.mean_x;
    const vae::Generated g = vae::generate(params, ck.config, a.n, L, a.seed, opts);
    const fs::path file = output_path(a.out);
    if (file.has_parent_path()) ensure_dir(file.parent_path());
    write_csv_atomic(file, data::make_batch(g.x));
    Records().emit({{"kind", "samples"}, {"path", file.string()}, {"n", a.n}, {"length", L}, {"seed", a.seed}});
}

// ---- eval --------------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string reference;
    std::vector<std::string> metrics{"marginal", "classification", "prediction"};
    std::vector<std::uint64_t> seeds{0};
    std::string weights = "ema";
    metrics::EvalConfig eval;
};

void cmd_eval(const EvalArgs& a) {
    for (const auto& m : a.metrics)
        if (m != "marginal" && m != "classification" && m != "prediction") throw UsageError("unknown metric " + m);
    if (a.checkpoint.empty() == a.reference.empty())
        throw UsageError("eval needs exactly one of --checkpoint or --reference");
    if (a.seeds.empty()) throw UsageError("--seeds must not be empty");
    Records rec;
    std::optional<Checkpoint> ck;
    RunConfig run;
    if (!a.checkpoint.empty()) {
        ck = load_ck(a.checkpoint);
        run = run_config_of(*ck);
    }
    const data::SeriesBatch test = prepare(load_data(a.data), run);
    std::optional<data::SeriesBatch> reference;
    if (!a.reference.empty()) {
        reference = prepare(load_data(a.reference), run);
        if (reference->values.shape() != test.values.shape())
            throw UsageError("--reference must match the dataset shape");
    }
    const ParamStore params = ck ? weights_of(*ck, a.weights) : ParamStore{};
    for (std::uint64_t seed : a.seeds) {
        const Tensor other = reference ? reference->values
                                       : vae::generate(params, ck->config, test.count(), test.length(), seed).x;
        for (const auto& m : a.metrics) {
            double v = 0.0;
            if (m == "marginal") v = metrics::marginal_score(test.values, other);
            else if (m == "classification") v = metrics::classification_score(test.values, other, a.eval, seed);
            else v = metrics::prediction_score(test.values, other, a.eval, seed);
            rec.emit({{"kind", "score"}, {"metric", m}, {"seed", seed}, {"value", v},
                      {"source", reference ? "reference" : "model"}});
        }
    }
}

// ---- task --------------------------------------------------------------------------------

struct TaskArgs {
    std::string checkpoint;
    std::string data;
    std::string mode;
    std::size_t samples = 50;
    double observed = 0.5;
    std::uint64_t seed = 0;
    std::string weights = "ema";
};

void cmd_task(const TaskArgs& a) {
    const Checkpoint ck = load_ck(a.checkpoint);
    const RunConfig run = run_config_of(ck);
    const ParamStore params = weights_of(ck, a.weights);
    const data::SeriesBatch d = prepare(load_data(a.data), run);
    if (a.samples == 0) throw UsageError("--samples must be positive");
    if (d.channels() != ck.config.x_dim) throw UsageError("dataset channels do not match the checkpoint");
    Records rec;
    if (a.mode == "interpolate") {
        if (!(a.observed > 0.0 && a.observed < 1.0)) throw UsageError("--observed must be in (0, 1)");
        std::mt19937_64 rng(a.seed);
        std::bernoulli_distribution keep(a.observed);
        Tensor input_mask = d.mask, held_out(d.mask.shape());
        for (std::size_t i = 0; i < d.mask.size(); ++i) {
            if (d.mask[i] == 0.0) continue;
            if (keep(rng)) continue;
            input_mask[i] = 0.0;
            held_out[i] = 1.0;
        }
        const Tensor mean = vae::interpolate(params, ck.config, d.values, input_mask);
        const Tensor ens = vae::interpolate_samples(params, ck.config, d.values, input_mask, a.samples, a.seed);
        rec.emit({{"kind", "task"}, {"mode", "interpolate"}, {"mse", metrics::mse(mean, d.values, held_out)},
                  {"crps", masked_crps(ens, d.values, held_out)}, {"samples", a.samples}, {"seed", a.seed}});
    } else if (a.mode == "extrapolate") {
        const std::size_t L = d.length(), half = L / 2;
        if (half == 0) throw UsageError("sequences are too short to split");
        const Tensor first = time_slice(d.values, 0, half);
        const Tensor target = time_slice(d.values, half, L - half), mask = time_slice(d.mask, half, L - half);
        const vae::Extrapolation ex = vae::extrapolate(params, ck.config, first, L - half, a.samples, a.seed);
        rec.emit({{"kind", "task"}, {"mode", "extrapolate"}, {"mse", metrics::mse(ex.mean, target, mask)},
                  {"crps", masked_crps(ex.samples, target, mask)}, {"split", half}, {"samples", a.samples},
                  {"seed", a.seed}});
    } else {
        throw UsageError("--mode must be interpolate or extrapolate");
    }
}

// ---- bench -------------------------------------------------------------------------------

struct BenchArgs {
    bench::BenchConfig cfg;
    std::vector<std::string> modes{"conv", "recurrent"};
    std::string out;
};

void cmd_bench(BenchArgs a) {
    a.cfg.modes.clear();
    try {
        for (const auto& m : a.modes) a.cfg.modes.push_back(bench::parse_mode(m));
        a.cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    std::unique_ptr<std::ofstream> file;
    if (!a.out.empty()) {
        const fs::path p = output_path(a.out);
        if (p.has_parent_path()) ensure_dir(p.parent_path());
        file = std::make_unique<std::ofstream>(p);
        if (!*file) throw std::runtime_error("cannot write " + p.string());
    }
    Records rec(file.get());
    const auto timings = bench::run_bench(a.cfg, [&rec](const bench::Timing& t) {
        rec.emit({{"kind", "timing"}, {"length", t.length}, {"mode", bench::mode_name(t.mode)},
                       {"iterations", t.iterations}, {"train_ms", t.train_ms}, {"infer_ms", t.infer_ms},
                       {"loss", t.loss}});
        return true;
    });
    const bool both = a.cfg.modes.size() == 2 && a.cfg.modes[0] != a.cfg.modes[1];
    if (both)
        for (std::size_t L : a.cfg.lengths)
            rec.emit({{"kind", "speedup"}, {"length", L}, {"recurrent_over_conv", bench::speedup(timings, L)}});
    if (a.cfg.lengths.size() >= 2) {
        for (bench::Mode m : a.cfg.modes) {
            const auto t = bench::train_times(timings, m);
            const auto fit = bench::fit_nlogn(a.cfg.lengths, t);
            rec.emit({{"kind", "scaling"}, {"mode", bench::mode_name(m)}, {"nlogn_c", fit.c},
                      {"nlogn_worst_ratio", fit.worst_ratio}, {"loglog_slope", bench::loglog_slope(a.cfg.lengths, t)}});
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LS4 latent state-space models for time series"};
    app.require_subcommand(1);

    DatagenArgs dg;
    auto* datagen = app.add_subcommand("datagen", "Generate datasets");
    datagen->require_subcommand(1);
    auto* flame = datagen->add_subcommand("flame", "FLAME stiff-ODE trajectories");
    flame->add_option("--p", dg.p, "Exponent in x' = x^2 - x^p");
    flame->add_option("--n", dg.n, "Number of trajectories");
    flame->add_option("--t-end", dg.t_end, "Final time");
    flame->add_option("--dt", dg.dt, "Output spacing");
    flame->add_option("--length", dg.length, "Subsample to this many steps (0 keeps all)");
    flame->add_option("--seed", dg.seed);
    flame->add_option("--out", dg.out, "Output directory");
    auto* runtime = datagen->add_subcommand("runtime", "Synthetic runtime-benchmark data");
    runtime->add_option("--length", dg.runtime_length, "80, 320, 1280, 5120 or 20480")->required();
    runtime->add_option("--seed", dg.seed);
    runtime->add_option("--out", dg.out, "Output directory");

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--config", tr.config, "key = value config file");
    train->add_option("--set", tr.overrides, "Override a config key (key=value)");
    train->add_option("--data", tr.data, "Training CSV (overrides run.data)");
    train->add_option("--out", tr.out, "Run directory");
    train->add_option("--resume", tr.resume, "Continue from a checkpoint");
    train->add_option("--epochs", tr.epochs, "Total epoch target (overrides train.epochs)");

    GenerateArgs ge;
    auto* generate = app.add_subcommand("generate", "Sample sequences from a checkpoint");
    generate->add_option("--checkpoint", ge.checkpoint)->required();
    generate->add_option("--n", ge.n);
    generate->add_option("--length", ge.length, "Defaults to the training length");
    generate->add_option("--seed", ge.seed);
    generate->add_option("--weights", ge.weights, "ema or raw");
    generate->add_flag("--mean-x", ge.mean_x, "Emit decoder means instead of sampled observations");
    generate->add_option("--out", ge.out, "CSV path");

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Score generated samples against a dataset");
    eval->add_option("--checkpoint", ev.checkpoint);
    eval->add_option("--reference", ev.reference, "Compare against this CSV instead of model samples");
    eval->add_option("--data", ev.data, "Test CSV")->required();
    eval->add_option("--metrics", ev.metrics)->delimiter(',');
    eval->add_option("--seeds", ev.seeds)->delimiter(',');
    eval->add_option("--weights", ev.weights, "ema or raw");
    eval->add_option("--eval-epochs", ev.eval.epochs);
    eval->add_option("--eval-width", ev.eval.width);
    eval->add_option("--eval-state", ev.eval.state);
    eval->add_option("--horizon", ev.eval.horizon);

    TaskArgs ta;
    auto* task = app.add_subcommand("task", "Interpolation or extrapolation on a dataset");
    task->add_option("--checkpoint", ta.checkpoint)->required();
    task->add_option("--data", ta.data)->required();
    task->add_option("--mode", ta.mode, "interpolate or extrapolate")->required();
    task->add_option("--samples", ta.samples);
    task->add_option("--observed", ta.observed, "Fraction of cells kept for interpolation");
    task->add_option("--seed", ta.seed);
    task->add_option("--weights", ta.weights, "ema or raw");

    BenchArgs be;
    auto* benchc = app.add_subcommand("bench", "Convolutional vs recurrent runtime");
    benchc->add_option("--lengths", be.cfg.lengths)->delimiter(',');
    benchc->add_option("--modes", be.modes)->delimiter(',');
    benchc->add_option("--batch", be.cfg.batch);
    benchc->add_option("--heads", be.cfg.heads);
    benchc->add_option("--state", be.cfg.state);
    benchc->add_option("--iterations", be.cfg.iterations);
    benchc->add_option("--inference-repeats", be.cfg.inference_repeats);
    benchc->add_option("--seed", be.cfg.seed);
    benchc->add_option("--out", be.out, "Also write records to this JSONL file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (flame->parsed()) cmd_datagen_flame(dg);
        else if (runtime->parsed()) cmd_datagen_runtime(dg);
        else if (train->parsed()) cmd_train(tr);
        else if (generate->parsed()) cmd_generate(ge);
        else if (eval->parsed()) cmd_eval(ev);
        else if (task->parsed()) cmd_task(ta);
        else if (benchc->parsed()) cmd_bench(be);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
