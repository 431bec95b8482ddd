#include <algorithm>
#include <cmath>
#include <sstream>

#include "cfgen/bench.hpp"
#include "cfgen/parallel.hpp"

namespace cfgen {

void to_json(json& j, const PretrainConfig& c) {
    j = json{{"n_scenes", c.n_scenes}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
             {"lr", c.lr},             {"weight_decay", c.weight_decay}, {"seed", c.seed},
             {"scene_seed_offset", c.scene_seed_offset}};
}

PretrainConfig pretrain_config_from_json(const json& j) {
    PretrainConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "n_scenes") c.n_scenes = v.get<int>();
        else if (key == "epochs") c.epochs = v.get<int>();
        else if (key == "batch_size") c.batch_size = v.get<int>();
        else if (key == "lr") c.lr = v.get<double>();
        else if (key == "weight_decay") c.weight_decay = v.get<double>();
        else if (key == "seed") c.seed = v.get<uint64_t>();
        else if (key == "scene_seed_offset") c.scene_seed_offset = v.get<uint64_t>();
        else fail(ErrorKind::Config, "unknown pretrain config key: " + key);
    }
    if (c.n_scenes < 2 || c.batch_size < 2) fail(ErrorKind::Config, "pretraining needs n_scenes, batch_size >= 2");
    if (c.epochs < 0 || !(c.lr > 0)) fail(ErrorKind::Config, "pretraining needs epochs >= 0 and lr > 0");
    return c;
}

std::string LossConfig::name() const {
    return std::string(sets_loss ? "sets" : "contrastive") + (neg_loss ? "+neg" : "");
}

void to_json(json& j, const LossConfig& c) { j = json{{"sets_loss", c.sets_loss}, {"neg_loss", c.neg_loss}}; }

LossConfig loss_config_from_json(const json& j) {
    LossConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "sets_loss") c.sets_loss = v.get<bool>();
        else if (key == "neg_loss") c.neg_loss = v.get<bool>();
        else fail(ErrorKind::Config, "unknown loss config key: " + key);
    }
    return c;
}

void to_json(json& j, const FinetuneConfig& c) {
    j = json{{"loss", c.loss},
             {"epochs", c.epochs},
             {"batch_sets", c.batch_sets},
             {"lr", c.lr},
             {"weight_decay", c.weight_decay},
             {"grad_clip", c.grad_clip},
             {"use_adapters", c.use_adapters},
             {"adapters", c.adapters},
             {"learn_loss_params", c.learn_loss_params},
             {"init", {{"scale", c.init.scale()}, {"bias", c.init.bias}, {"temperature", c.init.temperature()}}},
             {"seed", c.seed}};
}

FinetuneConfig finetune_config_from_json(const json& j) {
    FinetuneConfig c;
    for (const auto& [key, v] : j.items()) {
        if (key == "loss") c.loss = loss_config_from_json(v);
        else if (key == "epochs") c.epochs = v.get<int>();
        else if (key == "batch_sets") c.batch_sets = v.get<int>();
        else if (key == "lr") c.lr = v.get<double>();
        else if (key == "weight_decay") c.weight_decay = v.get<double>();
        else if (key == "grad_clip") c.grad_clip = v.get<double>();
        else if (key == "use_adapters") c.use_adapters = v.get<bool>();
        else if (key == "adapters") c.adapters = adapter_config_from_json(v);
        else if (key == "learn_loss_params") c.learn_loss_params = v.get<bool>();
        else if (key == "init") {
            for (const auto& [k2, x] : v.items()) {
                if (k2 == "scale") c.init.log_scale = std::log(x.get<double>());
                else if (k2 == "bias") c.init.bias = x.get<double>();
                else if (k2 == "temperature") c.init.log_temperature = std::log(x.get<double>());
                else fail(ErrorKind::Config, "unknown loss init key: " + k2);
            }
        } else if (key == "seed") c.seed = v.get<uint64_t>();
        else fail(ErrorKind::Config, "unknown finetune config key: " + key);
    }
    if (c.epochs < 0 || c.batch_sets < 1 || !(c.lr > 0)) fail(ErrorKind::Config, "finetune needs epochs >= 0, batch_sets >= 1, lr > 0");
    if (!std::isfinite(c.init.log_scale) || !std::isfinite(c.init.log_temperature))
        fail(ErrorKind::Config, "loss scale and temperature must be positive");
    return c;
}

std::string FinetuneLog::to_jsonl() const {
    std::ostringstream out;
    for (const auto& s : steps) out << s.dump() << "\n";
    return out.str();
}

// ---- pretraining --------------------------------------------------------------------

std::vector<uint64_t> pretrain_scene_seeds(const PretrainConfig& cfg) {
    std::vector<uint64_t> seeds;
    for (int i = 0; i < cfg.n_scenes; ++i) seeds.push_back(cfg.scene_seed_offset + static_cast<uint64_t>(i));
    return seeds;
}

namespace {

// Symmetric in-batch softmax over cosine similarities, as in CLIP training.
double clip_step(DualEncoder& enc, const std::vector<const Image*>& images, const std::vector<Tokens>& captions,
                 double temperature) {
    Tape tape;
    auto I = tape.l2_normalize_rows(enc.encode_images(tape, images));
    auto T = tape.l2_normalize_rows(enc.encode_texts(tape, captions));
    auto S = tape.matmul_nt(I, T);
    const MatD s = tape.value(S).cast<double>();
    LossGrad g1, g2;
    const double a = contrastive_loss(s, temperature, &g1).value;
    const MatD st = s.transpose();
    const double b = contrastive_loss(st, temperature, &g2).value;
    const double norm = 1.0 / (2.0 * static_cast<double>(images.size()));
    const MatD d = (g1.d_sim + g2.d_sim.transpose()) * norm;
    tape.backward(S, d.cast<float>());
    return (a + b) * norm;
}

}  // namespace

std::vector<json> pretrain(DualEncoder& encoder, const PretrainConfig& cfg) {
    encoder.set_base_trainable(true);
    std::vector<Image> images;
    std::vector<Tokens> captions;
    const auto& g = encoder.grammar();
    for (uint64_t s : pretrain_scene_seeds(cfg)) {
        const SceneSpec scene = generate_scene(s, g);
        images.push_back(render_scene(scene, g));
        captions.push_back(render_caption(scene));
    }
    AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, 1.0};
    std::vector<json> log;
    long step = 0;
    std::vector<size_t> order(images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, 0x9e7, static_cast<uint64_t>(epoch)));
        rng.shuffle(order);
        double sum = 0;
        int batches = 0;
        for (size_t b = 0; b + 2 <= order.size(); b += static_cast<size_t>(cfg.batch_size)) {
            const size_t e = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
            if (e - b < 2) break;
            std::vector<const Image*> bi;
            std::vector<Tokens> bc;
            for (size_t k = b; k < e; ++k) {
                bi.push_back(&images[order[k]]);
                bc.push_back(captions[order[k]]);
            }
            encoder.params().zero_grad();
            const double loss = clip_step(encoder, bi, bc, 0.07);
            if (!std::isfinite(loss)) fail(ErrorKind::Divergence, "pretraining loss is not finite at step " + std::to_string(step));
            adam_step(encoder.params(), adam, ++step);
            sum += loss;
            ++batches;
        }
        log.push_back(json{{"epoch", epoch}, {"loss", batches ? sum / batches : 0.0}});
    }
    return log;
}

// ---- fine-tuning ---------------------------------------------------------------------

namespace {

struct BatchItems {
    std::vector<const Image*> images;
    std::vector<Tokens> captions;
    std::vector<int> offsets, sizes;  // per set
    std::vector<MatD> labels;
    std::vector<int> neg_rows;        // pair rows with a usable permuted caption
    std::vector<Tokens> neg_captions;
};

BatchItems gather(const std::vector<const CounterfactualSet*>& sets, bool with_neg, uint64_t seed,
                  const GrammarConfig& g) {
    BatchItems b;
    for (const auto* s : sets) {
        b.offsets.push_back(static_cast<int>(b.images.size()));
        b.sizes.push_back(s->m());
        b.labels.push_back(pair_labels(*s));
        for (int j = 0; j < s->m(); ++j) {
            const auto& p = s->pairs[static_cast<size_t>(j)];
            if (with_neg) {
                try {
                    b.neg_captions.push_back(permute_word_order(
                        p.caption, derive_seed(seed, static_cast<uint64_t>(s->set_id), static_cast<uint64_t>(j)), g));
                    b.neg_rows.push_back(static_cast<int>(b.images.size()));
                } catch (const Error& e) {
                    if (e.kind() != ErrorKind::Exhaustion) throw;
                }
            }
            b.images.push_back(&p.image);
            b.captions.push_back(p.caption);
        }
    }
    return b;
}

std::vector<std::vector<const CounterfactualSet*>> make_batches(const std::vector<CounterfactualSet>& sets, int batch_sets,
                                                                Rng& rng) {
    std::vector<size_t> order(sets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    // The sets loss needs equal m within a batch; filtering can shrink sets.
    std::map<int, std::vector<const CounterfactualSet*>> by_m;
    for (size_t i : order) by_m[sets[i].m()].push_back(&sets[i]);
    std::vector<std::vector<const CounterfactualSet*>> batches;
    for (auto& [m, group] : by_m)
        for (size_t b = 0; b < group.size(); b += static_cast<size_t>(batch_sets))
            batches.emplace_back(group.begin() + static_cast<long>(b),
                                 group.begin() + static_cast<long>(std::min(group.size(), b + static_cast<size_t>(batch_sets))));
    rng.shuffle(batches);
    return batches;
}

MatD diag_of(const Mat& m) {
    MatD d(m.rows(), 1);
    for (Eigen::Index i = 0; i < m.rows(); ++i) d(i, 0) = m(i, i);
    return d;
}

}  // namespace

FinetuneLog finetune(DualEncoder& encoder, const std::vector<CounterfactualSet>& sets, const FinetuneConfig& cfg) {
    FinetuneLog log;
    log.final_params = cfg.init;
    if (cfg.epochs == 0) return log;
    if (sets.empty()) fail(ErrorKind::Input, "fine-tuning needs at least one counterfactual set");
    const auto& g = encoder.grammar();
    const Vocabulary vocab(g);
    for (const auto& s : sets)
        for (const auto& p : s.pairs) vocab.ids(p.caption);  // throws on unknown tokens

    if (cfg.use_adapters) encoder.apply_adapters(cfg.adapters, derive_seed(cfg.seed, 0xada));
    else encoder.set_base_trainable(true);

    ParamStore loss_store;
    auto scalar = [](double v) {
        Mat m(1, 1);
        m(0, 0) = static_cast<float>(v);
        return m;
    };
    loss_store.add("log_scale", scalar(cfg.init.log_scale), cfg.learn_loss_params);
    loss_store.add("bias", scalar(cfg.init.bias), cfg.learn_loss_params);
    loss_store.add("log_temperature", scalar(cfg.init.log_temperature), cfg.learn_loss_params);

    AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.grad_clip};
    AdamConfig loss_adam{cfg.lr, 0.9, 0.999, 1e-8, 0.0, 0.0};
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, 0xf1e, static_cast<uint64_t>(epoch)));
        for (const auto& batch_sets : make_batches(sets, cfg.batch_sets, rng)) {
            LossParams lp;
            lp.log_scale = loss_store.get("log_scale").value(0, 0);
            lp.bias = loss_store.get("bias").value(0, 0);
            lp.log_temperature = loss_store.get("log_temperature").value(0, 0);
            const auto b = gather(batch_sets, cfg.loss.neg_loss, derive_seed(cfg.seed, 0x9e9, static_cast<uint64_t>(epoch)), g);
            const double norm = 1.0 / static_cast<double>(b.images.size());

            encoder.params().zero_grad();
            loss_store.zero_grad();
            Tape tape;
            auto I = tape.l2_normalize_rows(encoder.encode_images(tape, b.images));
            auto T = tape.l2_normalize_rows(encoder.encode_texts(tape, b.captions));

            LossReport report;
            LossGrad grad;
            std::vector<std::pair<Tape::Var, MatD>> seeds;
            std::optional<NegTextBatch> negs;
            Tape::Var P = -1, N = -1;
            if (!b.neg_rows.empty()) {
                auto In = tape.gather_rows(I, b.neg_rows);
                P = tape.matmul_nt(In, tape.gather_rows(T, b.neg_rows));
                N = tape.matmul_nt(In, tape.l2_normalize_rows(encoder.encode_texts(tape, b.neg_captions)));
                const MatD pd = diag_of(tape.value(P)), nd = diag_of(tape.value(N));
                negs = NegTextBatch{std::vector<double>(pd.data(), pd.data() + pd.size()),
                                    std::vector<double>(nd.data(), nd.data() + nd.size())};
            }
            auto diag_seed = [](const std::vector<double>& d) {
                MatD m = MatD::Zero(static_cast<Eigen::Index>(d.size()), static_cast<Eigen::Index>(d.size()));
                for (size_t i = 0; i < d.size(); ++i) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = d[i];
                return m;
            };

            if (cfg.loss.sets_loss) {
                SetBatch sb;
                std::vector<Tape::Var> blocks;
                std::vector<Tape::Var> ri, rt;
                for (size_t i = 0; i < b.offsets.size(); ++i) {
                    auto Si = tape.matmul_nt(tape.slice_rows(I, b.offsets[i], b.sizes[i]),
                                             tape.slice_rows(T, b.offsets[i], b.sizes[i]));
                    blocks.push_back(Si);
                    sb.set_sims.push_back(tape.value(Si).cast<double>());
                    sb.labels.push_back(b.labels[i]);
                    ri.push_back(tape.slice_rows(I, b.offsets[i], 1));
                    rt.push_back(tape.slice_rows(T, b.offsets[i], 1));
                }
                Tape::Var R = -1;
                if (blocks.size() >= 2) {
                    R = tape.matmul_nt(tape.stack_rows(ri), tape.stack_rows(rt));
                    sb.rep_sims = tape.value(R).cast<double>();
                }
                report = total_loss(sb, negs, lp, &grad);
                for (size_t i = 0; i < blocks.size(); ++i) seeds.emplace_back(blocks[i], grad.d_sets[i]);
                if (R >= 0) seeds.emplace_back(R, grad.d_sim);
            } else {
                auto S = tape.matmul_nt(I, T);
                report = contrastive_loss(tape.value(S).cast<double>(), lp.temperature(), &grad);
                report.similarity_eval_count = static_cast<long long>(b.images.size() * b.images.size());
                seeds.emplace_back(S, grad.d_sim);
                if (negs) {
                    LossGrad ng;
                    const auto nr = neg_text_loss(negs->pos, negs->neg, lp.temperature(), &ng);
                    report.neg = nr.value;
                    report.value += nr.value;
                    report.similarity_eval_count += nr.similarity_eval_count;
                    grad.d_pos = ng.d_pos;
                    grad.d_neg = ng.d_neg;
                    grad.d_temperature += ng.d_temperature;
                }
            }
            if (negs) {
                seeds.emplace_back(P, diag_seed(grad.d_pos));
                seeds.emplace_back(N, diag_seed(grad.d_neg));
            }
            if (!std::isfinite(report.value))
                fail(ErrorKind::Divergence, "fine-tuning loss is not finite at step " + std::to_string(step + 1));

            // One scalar root gathering every similarity block.
            std::vector<Tape::Var> inputs;
            for (auto& [v, d] : seeds) inputs.push_back(v);
            auto root = tape.custom(scalar(report.value * norm), inputs, [seeds, norm](Tape& t, const Mat& go) {
                for (const auto& [v, d] : seeds) t.grad(v) += (d * (go(0, 0) * norm)).cast<float>();
            });
            tape.backward(root);

            ++step;
            adam_step(encoder.params(), adam, step);
            if (cfg.learn_loss_params) {
                loss_store.get("log_scale").grad(0, 0) = static_cast<float>(grad.d_scale * lp.scale() * norm);
                loss_store.get("bias").grad(0, 0) = static_cast<float>(grad.d_bias * norm);
                loss_store.get("log_temperature").grad(0, 0) = static_cast<float>(grad.d_temperature * lp.temperature() * norm);
                adam_step(loss_store, loss_adam, step);
            }
            json line = loss_report_json(step, report, lp);
            line["epoch"] = epoch;
            line["loss_config"] = cfg.loss.name();
            log.steps.push_back(std::move(line));
        }
    }
    log.final_params.log_scale = loss_store.get("log_scale").value(0, 0);
    log.final_params.bias = loss_store.get("bias").value(0, 0);
    log.final_params.log_temperature = loss_store.get("log_temperature").value(0, 0);
    return log;
}

// ---- linear probe ---------------------------------------------------------------------

double linear_probe_accuracy(const DualEncoder& encoder, const ProbeConfig& cfg) {
    GrammarConfig g = encoder.grammar();
    g.min_entities = g.max_entities = 1;
    const int n = cfg.n_train + cfg.n_test;
    const int classes = static_cast<int>(g.categories.size());
    std::vector<Image> images(static_cast<size_t>(n));
    std::vector<int> labels(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const SceneSpec s = generate_scene(cfg.scene_seed_offset + static_cast<uint64_t>(i), g);
        images[static_cast<size_t>(i)] = render_scene(s, g);
        labels[static_cast<size_t>(i)] = static_cast<int>(
            std::find(g.categories.begin(), g.categories.end(), s.entities[0].category) - g.categories.begin());
    }
    std::vector<const Image*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    MatD X = encoder.encode_images(ptrs).cast<double>();
    for (Eigen::Index r = 0; r < X.rows(); ++r) X.row(r).normalize();
    const Eigen::Index d = X.cols();
    const MatD Xtr = X.topRows(cfg.n_train), Xte = X.bottomRows(cfg.n_test);
    // Standardize with training statistics.
    const Eigen::RowVectorXd mu = Xtr.colwise().mean();
    Eigen::RowVectorXd sd = ((Xtr.rowwise() - mu).array().square().colwise().sum() / cfg.n_train).sqrt();
    for (Eigen::Index c = 0; c < d; ++c)
        if (sd(c) < 1e-8) sd(c) = 1;
    auto standardize = [&](const MatD& A) {
        MatD out = A.rowwise() - mu;
        return MatD(out.array().rowwise() / sd.array());
    };
    const MatD A = standardize(Xtr), B = standardize(Xte);
    MatD W = MatD::Zero(d, classes);
    Eigen::RowVectorXd bias = Eigen::RowVectorXd::Zero(classes);
    MatD Y = MatD::Zero(cfg.n_train, classes);
    for (int i = 0; i < cfg.n_train; ++i) Y(i, labels[static_cast<size_t>(i)]) = 1;
    for (int it = 0; it < cfg.iterations; ++it) {
        MatD Z = (A * W).rowwise() + bias;
        for (Eigen::Index r = 0; r < Z.rows(); ++r) {
            Z.row(r).array() -= Z.row(r).maxCoeff();
            Z.row(r) = Z.row(r).array().exp().matrix();
            Z.row(r) /= Z.row(r).sum();
        }
        const MatD G = (Z - Y) / cfg.n_train;
        W -= cfg.lr * (A.transpose() * G + cfg.l2 * W);
        bias -= cfg.lr * G.colwise().sum();
    }
    const MatD Zt = (B * W).rowwise() + bias;
    int correct = 0;
    for (int i = 0; i < cfg.n_test; ++i) {
        Eigen::Index arg;
        Zt.row(i).maxCoeff(&arg);
        correct += static_cast<int>(arg) == labels[static_cast<size_t>(cfg.n_train + i)];
    }
    return static_cast<double>(correct) / cfg.n_test;
}

}  // namespace cfgen
