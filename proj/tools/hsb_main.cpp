#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hsb/checkpoint.hpp"
#include "hsb/dataset_io.hpp"
#include "hsb/evaluate.hpp"
#include "hsb/gradcheck.hpp"
#include "hsb/pseudolabel.hpp"
#include "hsb/trainer.hpp"

using namespace hsb;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::map<std::string, SemanticMap> load_pseudolabels(const std::string& dir,
                                                     const std::vector<AnnotatedScene>& scenes) {
    std::map<std::string, SemanticMap> out;
    for (const auto& s : scenes) {
        if (!fs::exists(dir + "/pseudolabels/" + s.id + ".png")) continue;
        out.emplace(s.id, read_pseudolabel(dir, s.id));
    }
    return out;
}

// Source and translation side by side, several scene rows per sheet.
void write_sheets(const std::string& out_dir, const std::vector<AnnotatedScene>& scenes,
                  const std::vector<Tensor<float>>& translated, int rows_per_sheet = 8) {
    int h = scenes[0].height(), w = scenes[0].width();
    for (size_t base = 0, k = 0; base < scenes.size(); base += rows_per_sheet, ++k) {
        size_t rows = std::min<size_t>(rows_per_sheet, scenes.size() - base);
        Tensor<float> sheet({1, 3, static_cast<int>(rows) * h, 2 * w});
        for (size_t r = 0; r < rows; ++r) {
            const Tensor<float>& src = scenes[base + r].image;
            const Tensor<float>& dst = translated[base + r];
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < h; ++y) {
                    for (int x = 0; x < w; ++x) {
                        sheet.at4(0, c, static_cast<int>(r) * h + y, x) = src.at4(0, c, y, x);
                        sheet.at4(0, c, static_cast<int>(r) * h + y, w + x) = dst.at4(0, c, y, x);
                    }
                }
            }
        }
        write_png_rgb(out_dir + "/sheet_" + std::to_string(k) + ".png", sheet);
    }
}

int cmd_gen_data(const std::string& out, const std::string& domain, int count, int size,
                 uint64_t seed) {
    SceneSpec spec;
    spec.width = size;
    spec.height = size;
    std::vector<std::string> domains =
        domain == "both" ? std::vector<std::string>{"day", "night"}
                         : std::vector<std::string>{domain};
    for (const auto& d : domains) {
        spec.seed = seed + (d == "night" ? 1 : 0);
        std::vector<AnnotatedScene> scenes = gen_corpus(spec, domain_from_name(d), count);
        std::string dir = domains.size() == 2 ? out + "/" + d : out;
        write_dataset(scenes, dir);
        std::printf("wrote %d %s scenes to %s\n", count, d.c_str(), dir.c_str());
    }
    return 0;
}

int cmd_make_pseudolabels(const std::string& data, double perturb, uint64_t seed) {
    std::vector<AnnotatedScene> scenes = read_dataset(data);
    write_pseudolabels(scenes, data, perturb, seed);
    std::printf("pseudolabels for %zu scenes under %s/pseudolabels\n", scenes.size(),
                data.c_str());
    return 0;
}

int cmd_pretrain_encoder(const std::string& data, int epochs, uint64_t seed,
                         const std::string& out) {
    std::vector<AnnotatedScene> scenes = read_dataset(data);
    PretrainReport rep;
    SharedEncoder enc = pretrain_encoder(scenes, epochs, seed, &rep);
    if (!out.empty() && fs::path(out).has_parent_path()) {
        fs::create_directories(fs::path(out).parent_path());
    }
    save_encoder(out, enc);
    std::printf("held-out reconstruction %.6f -> %.6f (%d train / %d held)\n",
                rep.heldout_loss_initial, rep.heldout_loss_final, rep.train_count,
                rep.heldout_count);
    std::printf("encoder saved to %s (checksum %016llx)\n", out.c_str(),
                static_cast<unsigned long long>(enc.checksum()));
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& day_dir,
              const std::string& night_dir, const std::string& encoder_path,
              const std::string& out_override) {
    TrainConfig cfg =
        config_path.empty() ? TrainConfig{} : train_config_from_json(slurp(config_path));
    if (!out_override.empty()) cfg.out_dir = out_override;
    std::vector<AnnotatedScene> day = read_dataset(day_dir);
    std::vector<AnnotatedScene> night = read_dataset(night_dir);
    std::map<std::string, SemanticMap> pseudo = load_pseudolabels(night_dir, night);
    SharedEncoder enc = load_encoder(encoder_path);
    TrainResult res = train(cfg, day, night, pseudo, enc);
    std::printf("trained %lld iterations\n", static_cast<long long>(res.iterations_run));
    std::printf("metrics: %s\n", res.metrics_path.c_str());
    std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
    if (res.missing_pseudolabels > 0) {
        std::printf("skipped %lld unlabeled night draws\n",
                    static_cast<long long>(res.missing_pseudolabels));
    }
    if (res.entropy_skipped > 0) {
        std::printf("entropy term skipped %lld times (batch too small)\n",
                    static_cast<long long>(res.entropy_skipped));
    }
    return 0;
}

int cmd_translate(const std::string& ckpt_path, const std::string& data, const std::string& out,
                  uint64_t seed, int count) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    std::vector<AnnotatedScene> scenes = read_dataset(data);
    if (count > 0 && count < static_cast<int>(scenes.size())) {
        scenes.resize(static_cast<size_t>(count));
    }
    std::vector<Tensor<float>> inputs;
    for (const auto& s : scenes) inputs.push_back(s.image);
    std::vector<Tensor<float>> translated = translate(ckpt, inputs, seed);
    fs::create_directories(out);
    for (size_t i = 0; i < scenes.size(); ++i) {
        write_png_rgb(out + "/" + scenes[i].id + ".png", translated[i]);
    }
    write_sheets(out, scenes, translated);
    std::printf("translated %zu images into %s\n", scenes.size(), out.c_str());
    return 0;
}

int cmd_evaluate(const std::string& translated_dir, const std::string& sources_dir,
                 const std::string& night_dir, const std::string& oracle_path,
                 int oracle_iterations) {
    std::vector<AnnotatedScene> sources = read_dataset(sources_dir);
    std::vector<AnnotatedScene> night = read_dataset(night_dir);
    std::vector<Tensor<float>> translated;
    std::vector<AnnotatedScene> kept;
    for (const auto& s : sources) {
        std::string p = translated_dir + "/" + s.id + ".png";
        if (!fs::exists(p)) continue;
        translated.push_back(read_png_rgb(p));
        kept.push_back(s);
    }
    if (translated.empty()) {
        throw std::invalid_argument("no translated images matching source ids in '" +
                                    translated_dir + "'");
    }
    OracleSeg oracle;
    if (fs::exists(oracle_path)) {
        oracle = load_oracle(oracle_path);
    } else {
        std::fprintf(stderr, "training oracle segmenter on %zu night scenes\n", night.size());
        OracleConfig ocfg;
        ocfg.iterations = oracle_iterations;
        oracle = train_oracle_seg(night, ocfg);
        save_oracle(oracle_path, oracle);
    }
    std::vector<Tensor<float>> night_imgs;
    for (const auto& s : night) night_imgs.push_back(s.image);
    EvalMetrics m = evaluate(translated, kept, oracle, night_imgs);
    std::printf("images scored:            %zu\n", translated.size());
    std::printf("hallucination pixel rate: %.6f (%lld of %lld background px)\n", m.halluc_pixel_rate,
                static_cast<long long>(m.flagged_pixels),
                static_cast<long long>(m.background_pixels));
    std::printf("annotation IoU:           %.6f (%lld instances)\n", m.annotation_iou,
                static_cast<long long>(m.instances_scored));
    std::printf("domain distance:          %.6f\n", m.domain_distance);
    return 0;
}

int cmd_gradcheck(uint64_t seed, int trials) {
    double worst = 0;
    std::string worst_op;
    for (int t = 0; t < trials; ++t) {
        for (const OpCheck& c : check_all_ops(seed + static_cast<uint64_t>(t))) {
            if (c.max_rel_err > worst) {
                worst = c.max_rel_err;
                worst_op = c.op;
            }
            std::printf("%-24s %.3e\n", c.op.c_str(), c.max_rel_err);
        }
    }
    std::printf("worst: %s %.3e\n", worst_op.c_str(), worst);
    if (worst > 1e-4) {
        std::printf("FAIL (tolerance 1e-4)\n");
        return 2;
    }
    std::printf("OK\n");
    return 0;
}

int cmd_ablate(const std::string& cache, int iterations, int size, int scenes, int eval_scenes,
               int batch) {
    DeskAblationSetup setup;
    setup.iterations = iterations;
    setup.size = size;
    setup.scenes_per_domain = scenes;
    setup.eval_scenes = eval_scenes;
    setup.batch_size = batch;
    AblationReport rep = run_desk_ablation(setup, cache);
    for (const AblationRun& r : rep.runs) {
        std::printf("%-8s seed %llu  halluc %.6f  luminance %.4f -> %.4f\n", r.variant.c_str(),
                    static_cast<unsigned long long>(r.seed), r.halluc_rate, r.source_luminance,
                    r.translated_luminance);
    }
    std::printf("%s\n", rep.verdict.c_str());
    return rep.ordering_holds && rep.separation_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hallucination-suppressed day-to-night translation"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
    std::string gen_out = "data", gen_domain = "both";
    int gen_count = 600, gen_size = 64;
    uint64_t gen_seed = 1001;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--domain", gen_domain, "day, night, or both")
        ->check(CLI::IsMember({"day", "night", "both"}));
    gen->add_option("--count", gen_count, "scenes per domain")->check(CLI::PositiveNumber);
    gen->add_option("--size", gen_size, "square image size")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed, "corpus seed (night uses seed+1 with --domain both)");

    auto* mkpl = app.add_subcommand("make-pseudolabels", "run the labeling pipeline on a dataset");
    std::string mkpl_data;
    double mkpl_perturb = 0.1;
    uint64_t mkpl_seed = 77;
    mkpl->add_option("--data", mkpl_data, "dataset directory")->required();
    mkpl->add_option("--perturb", mkpl_perturb, "oracle boundary noise in [0,1]")
        ->check(CLI::Range(0.0, 1.0));
    mkpl->add_option("--seed", mkpl_seed, "pipeline seed");

    auto* pre = app.add_subcommand("pretrain-encoder", "pretrain and freeze the shared encoder");
    std::string pre_data, pre_out = "runs/encoder.hsb";
    int pre_epochs = 3;
    uint64_t pre_seed = 5;
    pre->add_option("--data", pre_data, "dataset directory")->required();
    pre->add_option("--epochs", pre_epochs, "autoencoder epochs")->check(CLI::PositiveNumber);
    pre->add_option("--seed", pre_seed, "init and order seed");
    pre->add_option("--out", pre_out, "encoder output path");

    auto* tr = app.add_subcommand("train", "adversarial translation training");
    std::string tr_config, tr_day, tr_night, tr_encoder, tr_out;
    tr->add_option("--config", tr_config, "JSON config (defaults when omitted)");
    tr->add_option("--day", tr_day, "day dataset directory")->required();
    tr->add_option("--night", tr_night, "night dataset directory (with pseudolabels/)")
        ->required();
    tr->add_option("--encoder", tr_encoder, "pretrained encoder path")->required();
    tr->add_option("--out", tr_out, "override the configured output directory");

    auto* tl = app.add_subcommand("translate", "translate a dataset with a checkpoint");
    std::string tl_ckpt, tl_data, tl_out = "translated";
    uint64_t tl_seed = 1;
    int tl_count = 0;
    tl->add_option("--checkpoint", tl_ckpt, "checkpoint path")->required();
    tl->add_option("--data", tl_data, "source dataset directory")->required();
    tl->add_option("--out", tl_out, "output directory");
    tl->add_option("--seed", tl_seed, "sampling seed");
    tl->add_option("--count", tl_count, "translate only the first N scenes (0 = all)");

    auto* ev = app.add_subcommand("evaluate", "score translated images against an oracle");
    std::string ev_translated, ev_sources, ev_night, ev_oracle = "runs/oracle.hsb";
    int ev_oracle_iters = 2400;
    ev->add_option("--translated", ev_translated, "directory of translated PNGs")->required();
    ev->add_option("--sources", ev_sources, "source dataset directory")->required();
    ev->add_option("--night", ev_night, "real night dataset directory")->required();
    ev->add_option("--oracle", ev_oracle, "oracle path (trained and saved when absent)");
    ev->add_option("--oracle-iterations", ev_oracle_iters, "training budget when absent")
        ->check(CLI::PositiveNumber);

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every operator");
    uint64_t gc_seed = 1;
    int gc_trials = 3;
    gc->add_option("--seed", gc_seed, "base seed");
    gc->add_option("--trials", gc_trials, "fuzz trials per operator")->check(CLI::PositiveNumber);

    auto* ab = app.add_subcommand("ablate", "loss-ablation study over four variants");
    std::string ab_cache = "runs/ablation";
    int ab_iters = 2000, ab_size = 64, ab_scenes = 600, ab_eval = 100, ab_batch = 8;
    ab->add_option("--cache", ab_cache, "cache directory for finished runs");
    ab->add_option("--iterations", ab_iters, "iterations per run")->check(CLI::PositiveNumber);
    ab->add_option("--size", ab_size, "square image size")->check(CLI::PositiveNumber);
    ab->add_option("--scenes", ab_scenes, "scenes per domain")->check(CLI::PositiveNumber);
    ab->add_option("--eval", ab_eval, "evaluation scenes")->check(CLI::PositiveNumber);
    ab->add_option("--batch", ab_batch, "batch size")->check(CLI::PositiveNumber);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_gen_data(gen_out, gen_domain, gen_count, gen_size, gen_seed);
        if (*mkpl) return cmd_make_pseudolabels(mkpl_data, mkpl_perturb, mkpl_seed);
        if (*pre) return cmd_pretrain_encoder(pre_data, pre_epochs, pre_seed, pre_out);
        if (*tr) return cmd_train(tr_config, tr_day, tr_night, tr_encoder, tr_out);
        if (*tl) return cmd_translate(tl_ckpt, tl_data, tl_out, tl_seed, tl_count);
        if (*ev) return cmd_evaluate(ev_translated, ev_sources, ev_night, ev_oracle,
                                     ev_oracle_iters);
        if (*gc) return cmd_gradcheck(gc_seed, gc_trials);
        if (*ab) return cmd_ablate(ab_cache, ab_iters, ab_size, ab_scenes, ab_eval, ab_batch);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
