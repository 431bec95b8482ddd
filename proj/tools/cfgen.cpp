// cfgen command line: generate, train-diffusion, finetune, eval, ablate, report.
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "cfgen/run.hpp"

using namespace cfgen;
namespace fs = std::filesystem;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct Options {
    std::string config;
    std::optional<uint64_t> seed;
    std::string out;
    std::vector<std::string> overrides;
};

RunConfig resolve(const Options& o) {
    json j = json::object();
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) fail(ErrorKind::Config, "cannot read config " + o.config);
        j = json::parse(in);
    }
    for (const auto& a : o.overrides) apply_override(j, a);
    RunConfig cfg = run_config_from_json(j);
    if (o.seed) set_run_seed(cfg, *o.seed);
    if (!o.out.empty()) cfg.out = o.out;
    validate_paths(cfg);
    fs::create_directories(cfg.out);
    return cfg;
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p);
    if (!out) fail(ErrorKind::Io, "cannot write " + p.string());
    out << j.dump(1) << "\n";
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) fail(ErrorKind::Config, "missing upstream artifact " + p.string());
    return json::parse(in);
}

std::string pretrained_path(const RunConfig& cfg) { return (fs::path(cfg.out) / "pretrained.ckpt").string(); }
std::string finetuned_path(const RunConfig& cfg) { return (fs::path(cfg.out) / "finetuned.ckpt").string(); }

std::optional<Denoiser> load_denoiser_if_needed(const RunConfig& cfg, double stitched_fraction, std::string* hash) {
    if (stitched_fraction >= 1.0) return std::nullopt;
    const std::string path = cfg.denoiser_path();
    if (!fs::exists(path))
        fail(ErrorKind::Config, "no denoiser checkpoint at " + path + " (run train-diffusion or set stitched_fraction=1.0)");
    if (hash) *hash = sha256_file(path);
    return Denoiser::load(path);
}

int cmd_generate(const RunConfig& cfg) {
    std::string hash;
    auto denoiser = load_denoiser_if_needed(cfg, cfg.dataset.stitched_fraction, &hash);
    std::optional<DualEncoder> filter;
    if (cfg.dataset.filter_percentile > 0) filter.emplace(obtain_start_encoder(cfg, pretrained_path(cfg)));
    const auto dir = fs::path(cfg.dataset_manifest_path()).parent_path();
    auto ds = obtain_dataset(cfg, cfg.dataset, dir.string(), denoiser ? &*denoiser : nullptr, hash, filter ? &*filter : nullptr);
    json echo = run_echo(cfg);
    echo["manifest"] = cfg.dataset_manifest_path();
    echo["manifest_hash"] = manifest_hash(ds.manifest);
    write_json(fs::path(cfg.out) / "generate.json", echo);
    std::cout << cfg.dataset_manifest_path() << "\n" << manifest_hash(ds.manifest) << "\n";
    return 0;
}

int cmd_train_diffusion(const RunConfig& cfg) {
    std::ofstream log(fs::path(cfg.out) / "diffusion_loss.jsonl", std::ios::app);
    std::vector<double> losses;
    obtain_denoiser(cfg, cfg.denoiser_path(), [&](const json& line) {
        log << line.dump() << "\n";
        log.flush();
        std::cout << line.dump() << std::endl;
    });
    json meta;
    Denoiser::load(cfg.denoiser_path(), &meta);
    json echo = run_echo(cfg);
    echo["checkpoint"] = cfg.denoiser_path();
    echo["checkpoint_hash"] = sha256_file(cfg.denoiser_path());
    if (meta.contains("train_log")) echo["epoch_loss"] = meta["train_log"]["epoch_loss"];
    write_json(fs::path(cfg.out) / "train_diffusion.json", echo);
    std::cout << cfg.denoiser_path() << "\n";
    return 0;
}

int cmd_finetune(const RunConfig& cfg) {
    const auto ds = load_dataset(cfg.dataset_manifest_path());
    DualEncoder enc = obtain_start_encoder(cfg, pretrained_path(cfg));
    const auto log = finetune(enc, ds.sets, cfg.finetune);
    json echo = run_echo(cfg);
    echo["dataset_hash"] = manifest_hash(ds.manifest);
    echo["final_loss_params"] = json{{"scale", log.final_params.scale()},
                                     {"bias", log.final_params.bias},
                                     {"temperature", log.final_params.temperature()}};
    enc.save(finetuned_path(cfg), echo);
    std::ofstream(fs::path(cfg.out) / "finetune_log.jsonl") << log.to_jsonl();
    write_json(fs::path(cfg.out) / "finetune.json", echo);
    std::cout << finetuned_path(cfg) << "\n";
    return 0;
}

std::vector<uint64_t> training_seeds(const RunConfig& cfg) {
    std::vector<uint64_t> seeds = pretrain_scene_seeds(cfg.pretrain);
    if (fs::exists(cfg.dataset_manifest_path())) {
        const auto s = manifest_scene_seeds(read_json(cfg.dataset_manifest_path()));
        seeds.insert(seeds.end(), s.begin(), s.end());
    }
    return seeds;
}

int cmd_eval(const RunConfig& cfg) {
    const auto bench = obtain_benchmark(cfg, training_seeds(cfg));
    json table = run_echo(cfg);
    table["results"] = json::object();
    const auto start = obtain_start_encoder(cfg, pretrained_path(cfg));
    const std::string start_name = (cfg.paths.encoder.empty() && cfg.pretrain.epochs == 0) ? "untrained" : "pretrained";
    table["results"][start_name] = evaluate(start, bench);
    if (fs::exists(finetuned_path(cfg))) table["results"]["finetuned"] = evaluate(DualEncoder::load(finetuned_path(cfg)), bench);
    write_json(fs::path(cfg.out) / "benchmark.json", bench.manifest);
    write_json(fs::path(cfg.out) / "eval.json", table);
    for (const auto& [name, r] : table["results"].items())
        std::cout << name << " " << r["accuracy"].dump() << " group " << r["winoground"]["group"] << "\n";
    return 0;
}

json ablation_json(const std::vector<AblationCellResult>& results) {
    json cells = json::array();
    for (const auto& r : results) {
        json runs = json::array();
        for (const auto& e : r.runs) runs.push_back(e);
        cells.push_back({{"loss", r.cell.loss}, {"data", r.cell.data}, {"m", r.cell.m}, {"runs", runs},
                         {"errors", r.errors}, {"eval_count_per_batch", r.eval_count_per_batch}, {"config", r.config_echo}});
    }
    return cells;
}

std::vector<AblationCellResult> ablation_from_json(const json& cells) {
    std::vector<AblationCellResult> out;
    for (const auto& c : cells) {
        AblationCellResult r;
        r.cell = AblationCell{loss_config_from_json(c.at("loss")), c.at("data"), c.at("m")};
        for (const auto& e : c.at("runs")) r.runs.push_back(eval_result_from_json(e));
        r.errors = c.at("errors").get<std::vector<std::string>>();
        r.eval_count_per_batch = c.at("eval_count_per_batch");
        r.config_echo = c.at("config");
        out.push_back(std::move(r));
    }
    return out;
}

int cmd_ablate(const RunConfig& cfg) {
    AblationSpec spec;
    for (const auto& l : cfg.ablation.losses)
        for (const auto& d : cfg.ablation.data)
            for (int m : cfg.ablation.m) spec.cells.push_back(AblationCell{l, d, m});
    spec.seeds = cfg.ablation.seeds;
    spec.base = cfg.finetune;
    const DualEncoder start = obtain_start_encoder(cfg, pretrained_path(cfg));
    std::optional<Denoiser> denoiser;
    std::string hash;
    std::vector<uint64_t> seeds = pretrain_scene_seeds(cfg.pretrain);
    auto provider = [&](const std::string& data, int m) {
        DatasetConfig dc = cfg.dataset;
        dc.m = m;
        if (data == "stitched") dc.stitched_fraction = 1.0;
        if (!denoiser && dc.stitched_fraction < 1.0) denoiser = load_denoiser_if_needed(cfg, dc.stitched_fraction, &hash);
        const auto dir = fs::path(cfg.out) / "ablation_data" / (data + "_m" + std::to_string(m));
        auto ds = obtain_dataset(cfg, dc, dir.string(), denoiser ? &*denoiser : nullptr,
                                 dc.stitched_fraction < 1.0 ? hash : "", &start);
        return ds.sets;
    };
    for (int i = 0; i < cfg.dataset.n_sets; ++i) seeds.push_back(cfg.dataset.scene_seed_offset + static_cast<uint64_t>(i));
    const auto bench = obtain_benchmark(cfg, seeds);
    const auto results = run_ablation(spec, start, provider, bench);
    json out = run_echo(cfg);
    out["cells"] = ablation_json(results);
    write_json(fs::path(cfg.out) / "ablation.json", out);
    std::ofstream(fs::path(cfg.out) / "ablation.csv") << ablation_csv(results);
    std::cout << ablation_csv(results);
    for (const auto& r : results)
        for (const auto& e : r.errors) std::cerr << r.cell.key() << ": " << e << "\n";
    return 0;
}

int cmd_report(const RunConfig& cfg) {
    ReportInputs in;
    const auto eval_path = fs::path(cfg.out) / "eval.json";
    const auto abl_path = fs::path(cfg.out) / "ablation.json";
    if (fs::exists(eval_path)) {
        const json table = read_json(eval_path);
        for (const auto& [name, r] : table.at("results").items()) in.results[name] = eval_result_from_json(r);
    }
    if (fs::exists(abl_path)) in.ablation = ablation_from_json(read_json(abl_path).at("cells"));
    in.schedule = cfg.diffusion;
    if (in.results.empty() && in.ablation.empty())
        fail(ErrorKind::Validation, "nothing to report: run eval or ablate first");
    for (const auto& p : emit_report(in, (fs::path(cfg.out) / "report").string(), run_echo(cfg))) std::cout << p << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"counterfactual set generation and dual-encoder fine-tuning"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);
    Options opt;
    struct Cmd {
        const char* name;
        const char* help;
        int (*fn)(const RunConfig&);
    };
    const Cmd cmds[] = {{"generate", "build a counterfactual dataset", cmd_generate},
                        {"train-diffusion", "train or resume the denoiser", cmd_train_diffusion},
                        {"finetune", "fine-tune the dual encoder on the dataset", cmd_finetune},
                        {"eval", "evaluate encoders on the procedural benchmark", cmd_eval},
                        {"ablate", "run the loss / data / set-size grid", cmd_ablate},
                        {"report", "write results table and plots", cmd_report}};
    std::vector<std::pair<CLI::App*, const Cmd*>> subs;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", opt.config, "run config JSON");
        sub->add_option("--seed", opt.seed, "run seed (dataset, pretrain, finetune, diffusion training)");
        sub->add_option("--out", opt.out, "output directory");
        sub->add_option("--override", opt.overrides, "key.path=value, applied before validation");
        subs.emplace_back(sub, &c);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }
    try {
        for (auto& [sub, c] : subs)
            if (sub->parsed()) return c->fn(resolve(opt));
    } catch (const Error& e) {
        std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
        return e.kind() == ErrorKind::Divergence ? kExitNumerical : kExitValidation;
    } catch (const json::exception& e) {
        std::cerr << "error (config): " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
