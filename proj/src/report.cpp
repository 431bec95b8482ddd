#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cfgen/bench.hpp"
#include "cfgen/parallel.hpp"

namespace cfgen {

std::string AblationCell::key() const { return loss.name() + "/" + data + "/m" + std::to_string(m); }

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {std::nan(""), std::nan("")};
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    // Sample standard deviation; a single run reports 0.
    const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    return {mean, sd};
}

}  // namespace

std::vector<AblationCellResult> run_ablation(const AblationSpec& spec, const DualEncoder& start,
                                             const SetProvider& sets, const Benchmark& bench) {
    std::vector<AblationCellResult> out;
    for (const auto& cell : spec.cells) {
        AblationCellResult r;
        r.cell = cell;
        FinetuneConfig fc = spec.base;
        fc.loss = cell.loss;
        json echo = fc;
        echo.erase("seed");
        r.config_echo = json{{"finetune", echo}, {"data", cell.data}, {"m", cell.m}, {"seeds", spec.seeds}};
        const long long n = spec.base.batch_sets;
        r.eval_count_per_batch = cell.loss.sets_loss ? similarity_eval_count(n, cell.m) : (n * cell.m) * (n * cell.m);
        try {
            const auto data = sets(cell.data, cell.m);
            for (uint64_t seed : spec.seeds) {
                try {
                    DualEncoder enc = start.clone();
                    fc.seed = seed;
                    finetune(enc, data, fc);
                    auto e = evaluate(enc, bench);
                    e.meta["cell"] = cell.key();
                    e.meta["seed"] = seed;
                    r.runs.push_back(std::move(e));
                } catch (const Error& e) {
                    r.errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
                }
            }
        } catch (const Error& e) {
            r.errors.push_back(std::string("data: ") + e.what());
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::string ablation_csv(const std::vector<AblationCellResult>& results) {
    std::ostringstream csv;
    csv << std::setprecision(6);
    csv << "loss,data,m,kind,mean,std,eval_count_per_batch\n";
    for (const auto& r : results) {
        std::vector<std::string> kinds;
        for (auto k : kAllItemKinds)
            if (k != ItemKind::WinogroundStyle) kinds.emplace_back(to_string(k));
        kinds.emplace_back("winoground_group");
        for (const auto& k : kinds) {
            std::vector<double> v;
            for (const auto& run : r.runs) {
                if (k == "winoground_group") {
                    if (run.winoground_count > 0) v.push_back(run.group_score);
                } else if (auto it = run.accuracy.find(k); it != run.accuracy.end()) {
                    v.push_back(it->second);
                }
            }
            if (v.empty()) continue;
            const auto [mean, sd] = mean_std(v);
            csv << r.cell.loss.name() << "," << r.cell.data << "," << r.cell.m << "," << k << "," << mean << "," << sd
                << "," << r.eval_count_per_batch << "\n";
        }
    }
    return csv.str();
}

// ---- guidance ordering ---------------------------------------------------------------

std::map<GuidanceMode, std::vector<GuidanceAccuracy>> guidance_ordering(const Denoiser& model,
                                                                        const GuidanceExperimentConfig& cfg) {
    if (cfg.n_scenes < 1 || cfg.seeds.empty()) fail(ErrorKind::Config, "guidance experiment needs scenes and seeds");
    const auto& g = model.grammar();
    std::map<GuidanceMode, std::vector<GuidanceAccuracy>> out;
    for (auto mode : kAllGuidanceModes) {
        for (uint64_t seed : cfg.seeds) {
            std::vector<double> attr(static_cast<size_t>(cfg.n_scenes)), pos(static_cast<size_t>(cfg.n_scenes));
            parallel_for(static_cast<size_t>(cfg.n_scenes), [&](size_t i) {
                const SceneSpec scene = generate_scene(cfg.scene_seed_offset + i, g);
                const Image img =
                    generate_image(model, scene, mode, derive_seed(seed, 0x70b1e4, i), cfg.collage_init_steps);
                const auto v = verify_image(scene, img, g);
                attr[i] = v.entity_attribute_rate();
                pos[i] = v.position_ok ? 1.0 : 0.0;
            });
            GuidanceAccuracy a;
            a.scenes = cfg.n_scenes;
            for (size_t i = 0; i < attr.size(); ++i) {
                a.attribute += attr[i];
                a.position += pos[i];
            }
            a.attribute /= cfg.n_scenes;
            a.position /= cfg.n_scenes;
            out[mode].push_back(a);
        }
    }
    return out;
}

// ---- report --------------------------------------------------------------------------

Histogram histogram(const std::vector<double>& values, int bins, double lo, double hi) {
    if (values.empty()) fail(ErrorKind::Validation, "histogram of an empty sample");
    if (bins < 1 || !(hi > lo)) fail(ErrorKind::Validation, "histogram needs bins >= 1 and hi > lo");
    Histogram h{lo, hi, std::vector<int>(static_cast<size_t>(bins), 0)};
    for (double v : values) {
        if (!std::isfinite(v)) fail(ErrorKind::Validation, "non-finite value in histogram sample");
        int b = static_cast<int>(std::floor((v - lo) / (hi - lo) * bins));
        b = std::clamp(b, 0, bins - 1);
        ++h.counts[static_cast<size_t>(b)];
    }
    return h;
}

namespace {

std::string svg_open(int w, int h) {
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    return s.str();
}

const char* kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};

std::string gap_histogram_svg(const std::map<std::string, EvalResult>& results) {
    std::vector<std::pair<std::string, std::vector<double>>> samples;
    double lo = 1e300, hi = -1e300;
    for (const auto& [name, r] : results) {
        std::vector<double> all;
        for (const auto& [k, g] : r.gaps) all.insert(all.end(), g.begin(), g.end());
        if (all.empty()) fail(ErrorKind::Validation, "result '" + name + "' has no score-gap samples");
        for (double x : all) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        samples.emplace_back(name, std::move(all));
    }
    if (!(hi > lo)) hi = lo + 1e-6;
    const int bins = 30, W = 640, H = 360, L = 50, B = 40;
    std::vector<Histogram> hs;
    int peak = 1;
    for (const auto& [n, s] : samples) {
        hs.push_back(histogram(s, bins, lo, hi));
        for (int c : hs.back().counts) peak = std::max(peak, c);
    }
    std::ostringstream svg;
    svg << svg_open(W, H);
    svg << "<text x=\"" << W / 2 << "\" y=\"16\" text-anchor=\"middle\">score gap sim(image, true) - sim(image, negative)</text>\n";
    const double bw = static_cast<double>(W - L - 20) / bins;
    for (size_t k = 0; k < hs.size(); ++k) {
        const char* col = kPalette[k % 6];
        for (int b = 0; b < bins; ++b) {
            const double h = static_cast<double>(hs[k].counts[static_cast<size_t>(b)]) / peak * (H - B - 40);
            svg << "<rect x=\"" << L + b * bw << "\" y=\"" << H - B - h << "\" width=\"" << bw << "\" height=\"" << h
                << "\" fill=\"" << col << "\" fill-opacity=\"0.45\"/>\n";
        }
        svg << "<text x=\"" << W - 160 << "\" y=\"" << 36 + 14 * k << "\" fill=\"" << col << "\">" << samples[k].first
            << " (n=" << samples[k].second.size() << ")</text>\n";
    }
    svg << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - 20 << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\">" << lo << "</text>\n";
    svg << "<text x=\"" << W - 20 << "\" y=\"" << H - B + 16 << "\" text-anchor=\"end\">" << hi << "</text>\n";
    if (lo < 0 && hi > 0) {
        const double x0 = L + (0 - lo) / (hi - lo) * (W - L - 20);
        svg << "<line x1=\"" << x0 << "\" y1=\"30\" x2=\"" << x0 << "\" y2=\"" << H - B << "\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

std::string ablation_svg(const std::vector<AblationCellResult>& results) {
    const int row = 18, W = 720, L = 260;
    const int H = 40 + row * static_cast<int>(results.size()) + 20;
    std::ostringstream svg;
    svg << svg_open(W, H);
    svg << "<text x=\"" << W / 2 << "\" y=\"16\" text-anchor=\"middle\">mean binary accuracy per ablation cell (bars: mean, whisker: std)</text>\n";
    int y = 36;
    for (const auto& r : results) {
        std::vector<double> v;
        for (const auto& run : r.runs) {
            double s = 0;
            int n = 0;
            for (const auto& [k, a] : run.accuracy) {
                s += a;
                ++n;
            }
            if (n) v.push_back(s / n);
        }
        svg << "<text x=\"" << L - 8 << "\" y=\"" << y + 12 << "\" text-anchor=\"end\">" << r.cell.key() << "</text>\n";
        if (!v.empty()) {
            const auto [mean, sd] = mean_std(v);
            const double scale = W - L - 60;
            svg << "<rect x=\"" << L << "\" y=\"" << y + 2 << "\" width=\"" << mean * scale << "\" height=\"" << row - 4
                << "\" fill=\"#4c72b0\"/>\n";
            svg << "<line x1=\"" << L + (mean - sd) * scale << "\" y1=\"" << y + row / 2 << "\" x2=\"" << L + (mean + sd) * scale
                << "\" y2=\"" << y + row / 2 << "\" stroke=\"black\"/>\n";
            svg << "<text x=\"" << L + mean * scale + 6 << "\" y=\"" << y + 12 << "\">" << std::fixed << std::setprecision(3)
                << mean << "</text>\n";
        } else {
            svg << "<text x=\"" << L << "\" y=\"" << y + 12 << "\" fill=\"#c44e52\">failed</text>\n";
        }
        y += row;
    }
    svg << "</svg>\n";
    return svg.str();
}

std::string schedule_svg(const DiffusionConfig& cfg) {
    const int W = 520, H = 300, L = 50, B = 40;
    auto px = [&](int t) { return L + static_cast<double>(t) / cfg.total_steps * (W - L - 20); };
    auto py = [&](double w) { return H - B - w / cfg.w_max * (H - B - 40); };
    std::ostringstream svg, local, global;
    svg << svg_open(W, H);
    svg << "<text x=\"" << W / 2 << "\" y=\"16\" text-anchor=\"middle\">guidance weights over reverse steps t</text>\n";
    for (int t = 0; t <= cfg.total_steps; ++t) {
        const auto w = guidance_weights(t, cfg);
        local << (t ? " " : "") << px(t) << "," << py(w.local);
        global << (t ? " " : "") << px(t) << "," << py(w.global);
    }
    svg << "<polyline fill=\"none\" stroke=\"#4c72b0\" stroke-width=\"2\" points=\"" << local.str() << "\"/>\n";
    svg << "<polyline fill=\"none\" stroke=\"#dd8452\" stroke-width=\"2\" points=\"" << global.str() << "\"/>\n";
    svg << "<text x=\"" << W - 120 << "\" y=\"40\" fill=\"#4c72b0\">w_local</text>\n";
    svg << "<text x=\"" << W - 120 << "\" y=\"54\" fill=\"#dd8452\">w_global</text>\n";
    svg << "<line x1=\"" << px(cfg.threshold_step) << "\" y1=\"30\" x2=\"" << px(cfg.threshold_step) << "\" y2=\"" << H - B
        << "\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n";
    svg << "<text x=\"" << px(cfg.threshold_step) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">t_th=" << cfg.threshold_step
        << "</text>\n";
    svg << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\">0</text>\n";
    svg << "<text x=\"" << W - 20 << "\" y=\"" << H - B + 16 << "\" text-anchor=\"end\">T=" << cfg.total_steps << "</text>\n";
    svg << "</svg>\n";
    return svg.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p);
    if (!out) fail(ErrorKind::Io, "cannot write " + p.string());
    out << text;
}

}  // namespace

std::vector<std::string> emit_report(const ReportInputs& in, const std::string& out_dir, const json& config_echo) {
    namespace fs = std::filesystem;
    if (in.results.empty() && in.ablation.empty()) fail(ErrorKind::Validation, "report needs at least one result");
    fs::create_directories(out_dir);
    std::vector<std::string> written;
    json table{{"config", config_echo}, {"tool_version", std::string(kVersion)}, {"results", json::object()}};
    for (const auto& [name, r] : in.results) table["results"][name] = r;
    if (!in.ablation.empty()) {
        json cells = json::array();
        for (const auto& r : in.ablation) {
            json runs = json::array();
            for (const auto& e : r.runs) runs.push_back(e);
            cells.push_back({{"cell", r.cell.key()}, {"config", r.config_echo}, {"eval_count_per_batch", r.eval_count_per_batch},
                             {"errors", r.errors}, {"runs", runs}});
        }
        table["ablation"] = cells;
    }
    if (!in.results.empty()) {
        const auto svg = gap_histogram_svg(in.results);
        write_file(fs::path(out_dir) / "gap_histogram.svg", svg);
        written.push_back((fs::path(out_dir) / "gap_histogram.svg").string());
    }
    if (!in.ablation.empty()) {
        write_file(fs::path(out_dir) / "ablation.csv", ablation_csv(in.ablation));
        write_file(fs::path(out_dir) / "ablation.svg", ablation_svg(in.ablation));
        written.push_back((fs::path(out_dir) / "ablation.csv").string());
        written.push_back((fs::path(out_dir) / "ablation.svg").string());
    }
    if (in.schedule) {
        write_file(fs::path(out_dir) / "weight_schedule.svg", schedule_svg(*in.schedule));
        written.push_back((fs::path(out_dir) / "weight_schedule.svg").string());
    }
    write_file(fs::path(out_dir) / "results.json", table.dump(1) + "\n");
    written.push_back((fs::path(out_dir) / "results.json").string());
    return written;
}

}  // namespace cfgen
