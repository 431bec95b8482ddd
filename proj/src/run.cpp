#include "cfgen/run.hpp"

#include <filesystem>
#include <fstream>

#include "cfgen/parallel.hpp"

namespace cfgen {

namespace fs = std::filesystem;

namespace {

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot read " + path);
    return json::parse(in);
}

json train_spec_json(const DiffusionTrainSpec& s) {
    return json{{"n_scenes", s.n_scenes},
                {"scene_seed_offset", s.scene_seed_offset},
                {"epochs", s.train.epochs},
                {"batch_size", s.train.batch_size},
                {"lr", s.train.lr},
                {"grad_clip", s.train.grad_clip},
                {"seed", s.train.seed},
                {"condition_mix", s.train.condition_mix}};
}

DiffusionTrainSpec train_spec_from_json(const json& j) {
    DiffusionTrainSpec s;
    for (const auto& [key, v] : j.items()) {
        if (key == "n_scenes") s.n_scenes = v.get<int>();
        else if (key == "scene_seed_offset") s.scene_seed_offset = v.get<uint64_t>();
        else if (key == "epochs") s.train.epochs = v.get<int>();
        else if (key == "batch_size") s.train.batch_size = v.get<int>();
        else if (key == "lr") s.train.lr = v.get<double>();
        else if (key == "grad_clip") s.train.grad_clip = v.get<double>();
        else if (key == "seed") s.train.seed = v.get<uint64_t>();
        else if (key == "condition_mix") s.train.condition_mix = v.get<std::array<double, 4>>();
        else fail(ErrorKind::Config, "unknown diffusion_train key: " + key);
    }
    if (s.n_scenes < 1 || s.train.epochs < 0 || s.train.batch_size < 1 || !(s.train.lr > 0))
        fail(ErrorKind::Config, "diffusion_train needs n_scenes >= 1, epochs >= 0, batch_size >= 1, lr > 0");
    return s;
}

json grid_json(const AblationGrid& g) {
    json losses = json::array();
    for (const auto& l : g.losses) losses.push_back(l);
    return json{{"losses", losses}, {"data", g.data}, {"m", g.m}, {"seeds", g.seeds}};
}

AblationGrid grid_from_json(const json& j) {
    AblationGrid g;
    for (const auto& [key, v] : j.items()) {
        if (key == "losses") {
            g.losses.clear();
            for (const auto& l : v) g.losses.push_back(loss_config_from_json(l));
        } else if (key == "data") g.data = v.get<std::vector<std::string>>();
        else if (key == "m") g.m = v.get<std::vector<int>>();
        else if (key == "seeds") g.seeds = v.get<std::vector<uint64_t>>();
        else fail(ErrorKind::Config, "unknown ablation key: " + key);
    }
    for (const auto& d : g.data)
        if (d != "generated" && d != "stitched") fail(ErrorKind::Config, "ablation data must be generated or stitched: " + d);
    for (int m : g.m)
        if (m < 2) fail(ErrorKind::Config, "ablation set size must be >= 2");
    return g;
}

// Stage artifacts remember the config they were built from.
bool meta_matches(const std::string& path, const json& stage) {
    if (!fs::exists(path)) return false;
    try {
        std::ifstream in(path + ".stage.json");
        if (!in) return false;
        return json::parse(in) == stage;
    } catch (const json::exception&) {
        return false;
    }
}

void write_stage(const std::string& path, const json& stage) {
    std::ofstream out(path + ".stage.json");
    out << stage.dump(1) << "\n";
}

}  // namespace

std::string RunConfig::denoiser_path() const {
    return paths.denoiser.empty() ? (fs::path(out) / "denoiser.ckpt").string() : paths.denoiser;
}

std::string RunConfig::dataset_manifest_path() const {
    return paths.dataset.empty() ? (fs::path(out) / "dataset" / "manifest.json").string() : paths.dataset;
}

void to_json(json& j, const RunConfig& c) {
    j = json{{"experiment", c.experiment},
             {"seed", c.seed},
             {"grammar", c.grammar},
             {"diffusion", c.diffusion},
             {"diffusion_train", train_spec_json(c.diffusion_train)},
             {"encoder", c.encoder},
             {"pretrain", c.pretrain},
             {"dataset", c.dataset},
             {"finetune", c.finetune},
             {"benchmark", c.benchmark},
             {"ablation", grid_json(c.ablation)},
             {"paths", {{"denoiser", c.paths.denoiser}, {"encoder", c.paths.encoder}, {"dataset", c.paths.dataset}}},
             {"out", c.out}};
    if (!c.grammar_path.empty()) j["grammar_path"] = c.grammar_path;
}

RunConfig run_config_from_json(const json& j) {
    if (!j.is_object()) fail(ErrorKind::Config, "run config must be a JSON object");
    RunConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "experiment") c.experiment = v.get<std::string>();
        else if (key == "seed") c.seed = v.get<uint64_t>();
        else if (key == "grammar") c.grammar = grammar_config_from_json(v);
        else if (key == "grammar_path") c.grammar_path = v.get<std::string>();
        else if (key == "diffusion") c.diffusion = diffusion_config_from_json(v);
        else if (key == "diffusion_train") c.diffusion_train = train_spec_from_json(v);
        else if (key == "encoder") c.encoder = encoder_config_from_json(v);
        else if (key == "pretrain") c.pretrain = pretrain_config_from_json(v);
        else if (key == "dataset") c.dataset = dataset_config_from_json(v);
        else if (key == "finetune") c.finetune = finetune_config_from_json(v);
        else if (key == "benchmark") c.benchmark = benchmark_config_from_json(v);
        else if (key == "ablation") c.ablation = grid_from_json(v);
        else if (key == "paths") {
            for (const auto& [k2, p] : v.items()) {
                if (k2 == "denoiser") c.paths.denoiser = p.get<std::string>();
                else if (k2 == "encoder") c.paths.encoder = p.get<std::string>();
                else if (k2 == "dataset") c.paths.dataset = p.get<std::string>();
                else fail(ErrorKind::Config, "unknown paths key: " + k2);
            }
        } else if (key == "out") c.out = v.get<std::string>();
        else fail(ErrorKind::Config, "unknown run config key: " + key);
    }
    if (!c.grammar_path.empty()) c.grammar = grammar_config_from_json(read_json(c.grammar_path));
    c.grammar.validate();
    c.diffusion.validate();
    if (c.out.empty()) fail(ErrorKind::Config, "out must not be empty");
    return c;
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorKind::Config, "override must look like key=value: " + assignment);
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json* node = &config;
    size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) fail(ErrorKind::Config, "empty key in override: " + assignment);
        if (!node->is_object()) fail(ErrorKind::Config, "override path crosses a non-object: " + path);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

void set_run_seed(RunConfig& cfg, uint64_t seed) {
    cfg.seed = seed;
    cfg.dataset.seed = seed;
    cfg.pretrain.seed = seed;
    cfg.finetune.seed = seed;
    cfg.diffusion_train.train.seed = seed;
}

void validate_paths(const RunConfig& cfg) {
    for (const auto* p : {&cfg.paths.denoiser, &cfg.paths.encoder, &cfg.paths.dataset})
        if (!p->empty() && !fs::exists(*p)) fail(ErrorKind::Config, "referenced path does not exist: " + *p);
}

json run_echo(const RunConfig& cfg) { return json{{"config", cfg}, {"tool_version", std::string(kVersion)}}; }

Denoiser obtain_denoiser(const RunConfig& cfg, const std::string& path, const std::function<void(const json&)>& on_epoch) {
    const json stage{{"grammar", cfg.grammar}, {"diffusion", cfg.diffusion}, {"train", train_spec_json(cfg.diffusion_train)}};
    const auto& spec = cfg.diffusion_train;
    TrainLog resume;
    std::optional<Denoiser> model;
    if (meta_matches(path, stage)) {
        json meta;
        model.emplace(Denoiser::load(path, &meta, true));
        if (meta.contains("train_log")) {
            const auto& l = meta["train_log"];
            resume.epoch_loss = l.at("epoch_loss").get<std::vector<double>>();
            resume.steps = l.at("steps");
            resume.epochs_done = l.at("epochs_done");
        }
        if (resume.epochs_done >= spec.train.epochs) return std::move(*model);
    } else {
        model.emplace(cfg.grammar, cfg.diffusion, derive_seed(spec.train.seed, 0xd1f));
    }
    std::vector<TrainSample> data(static_cast<size_t>(spec.n_scenes));
    parallel_for(data.size(), [&](size_t i) {
        auto scene = generate_scene(spec.scene_seed_offset + i, cfg.grammar);
        data[i] = TrainSample{scene, render_scene(scene, cfg.grammar)};
    });
    if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
    train_denoiser(*model, data, spec.train, resume, [&](const Denoiser& m, const TrainLog& log) {
        json l{{"epoch_loss", log.epoch_loss}, {"steps", log.steps}, {"epochs_done", log.epochs_done}};
        const std::string tmp = path + ".tmp";
        m.save(tmp, json{{"train_log", l}, {"stage", stage}}, true);
        fs::rename(tmp, path);
        write_stage(path, stage);
        if (on_epoch)
            on_epoch(json{{"epoch", log.epochs_done}, {"loss", log.epoch_loss.back()}, {"steps", log.steps},
                          {"tool_version", std::string(kVersion)}});
    });
    model->set_trained(true);
    return std::move(*model);
}

DualEncoder obtain_start_encoder(const RunConfig& cfg, const std::string& path) {
    if (!cfg.paths.encoder.empty()) return DualEncoder::load(cfg.paths.encoder);
    DualEncoder enc(cfg.grammar, cfg.encoder, derive_seed(cfg.pretrain.seed, 0xe7c));
    if (cfg.pretrain.epochs == 0) return enc;
    const json stage{{"grammar", cfg.grammar}, {"encoder", cfg.encoder}, {"pretrain", cfg.pretrain}};
    if (meta_matches(path, stage)) return DualEncoder::load(path);
    const auto log = pretrain(enc, cfg.pretrain);
    if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
    enc.save(path, json{{"stage", stage}, {"pretrain_final_loss", log.empty() ? json() : log.back()}});
    write_stage(path, stage);
    return enc;
}

Dataset obtain_dataset(const RunConfig& cfg, const DatasetConfig& dc, const std::string& dir, const Denoiser* denoiser,
                       const std::string& denoiser_hash, const DualEncoder* filter_encoder) {
    const std::string manifest = (fs::path(dir) / "manifest.json").string();
    const std::string filter_hash = (filter_encoder && dc.filter_percentile > 0) ? filter_encoder->base_checksum() : "";
    const json stage{{"grammar", cfg.grammar}, {"dataset", dc}, {"denoiser", denoiser_hash}, {"filter_encoder", filter_hash}};
    if (meta_matches(manifest, stage)) return load_dataset(manifest);
    if (dc.filter_percentile > 0 && !filter_encoder)
        fail(ErrorKind::State, "dataset filtering needs an encoder");
    auto ds = build_dataset(dc, cfg.grammar, denoiser, dc.filter_percentile > 0 ? filter_encoder : nullptr, dir, denoiser_hash);
    write_stage(manifest, stage);
    return ds;
}

Benchmark obtain_benchmark(const RunConfig& cfg, const std::vector<uint64_t>& training_seeds) {
    return build_benchmark(cfg.benchmark, cfg.grammar, training_seeds);
}

}  // namespace cfgen
