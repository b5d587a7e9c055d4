#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dri/checkpoint.hpp"
#include "dri/config.hpp"
#include "dri/errors.hpp"
#include "dri/experiments.hpp"
#include "dri/train.hpp"

namespace fs = std::filesystem;
using namespace dri;

namespace {

enum ExitCode { kOk = 0, kConfigFailure = 1, kDataFailure = 2, kNumericFailure = 3, kInternalFailure = 4 };

RunConfig load_or_default(const std::string& path) {
    if (path.empty()) {
        RunConfig c;
        c.model.seed = c.train.seed;
        c.validate();
        return c;
    }
    return load_run_config(path);
}

void apply_seed(RunConfig& cfg, const std::optional<std::uint64_t>& seed) {
    if (!seed) return;
    cfg.train.seed = *seed;
    cfg.model.seed = *seed;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

void print_params(const ParamTable& t) {
    for (const auto& it : t.items) std::printf("%-18s %12zu\n", it.component.c_str(), it.count);
    std::printf("%-18s %12zu\n", "total", t.total());
}

/// Rebuilds the model recorded in a checkpoint.
std::pair<RunConfig, std::unique_ptr<ReidModel<float>>> model_from_checkpoint(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    RunConfig cfg = parse_run_config(ckpt.meta);
    auto model = std::make_unique<ReidModel<float>>(cfg.model);
    restore(model->store(), ckpt);
    return {cfg, std::move(model)};
}

int cmd_gen_data(const std::string& config, const std::optional<std::uint64_t>& seed, const std::string& out) {
    RunConfig cfg = load_or_default(config);
    if (seed) cfg.dataset.synthetic.seed = *seed;
    const std::string root = out.empty() ? cfg.dataset.root : out;
    const SyntheticSummary s = generate_synthetic(cfg.dataset.synthetic, root);
    std::ifstream in(fs::path(root) / "manifest.csv", std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::printf("dataset %s: %zu images, %zu train / %zu query / %zu gallery rows, manifest fnv1a %016llx\n",
                root.c_str(), s.images, s.train_rows, s.query_rows, s.gallery_rows, static_cast<unsigned long long>(h));
    return kOk;
}

int cmd_train(const std::string& config, const std::optional<std::uint64_t>& seed, const std::string& out) {
    RunConfig cfg = load_or_default(config);
    apply_seed(cfg, seed);
    Dataset data(cfg.dataset.root, cfg.model.effective_backbone());
    TrainResult r = train_run(cfg, data, nullptr, &std::cerr);
    r.report.label = to_string(cfg.model.peft.mode);
    const fs::path dir = out.empty() ? fs::path("run") : fs::path(out);
    fs::create_directories(dir);
    save_checkpoint((dir / "checkpoint.dri1").string(), snapshot(r.model->store(), cfg.to_kv()));
    write_text(dir / "report.txt", r.report.text());
    std::printf("%s", format_metrics(r.report.label, r.report.final_metrics, r.report.params.total()).c_str());
    std::printf("checkpoint %s, report %s\n", (dir / "checkpoint.dri1").c_str(), (dir / "report.txt").c_str());
    return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::vector<std::string>& protocols,
             const std::string& out) {
    auto [cfg, model] = model_from_checkpoint(checkpoint);
    if (!dataset.empty()) cfg.dataset.root = dataset;
    if (!protocols.empty()) cfg.eval.protocols = protocols;
    Dataset data(cfg.dataset.root, cfg.model.effective_backbone());
    const auto results = evaluate_model(*model, data, cfg.eval.protocols, cfg.eval.batch);
    const ParamTable params = model->trainable_table();
    std::printf("%s", format_metrics(to_string(cfg.model.peft.mode), results, params.total()).c_str());
    if (!out.empty()) {
        fs::create_directories(out);
        RunReport rep;
        rep.label = checkpoint;
        rep.mode = to_string(cfg.model.peft.mode);
        rep.params = params;
        rep.final_metrics = results;
        write_text(fs::path(out) / "eval_report.txt", rep.text());
        std::vector<SampleRecord> recs = data.gallery();
        save_embeddings((fs::path(out) / "gallery.emb").string(), embed_records(*model, data, recs, cfg.eval.batch),
                        cfg.to_kv());
    }
    return kOk;
}

int cmd_export(const std::string& checkpoint, const std::string& dataset, const std::string& split,
               const std::string& out) {
    auto [cfg, model] = model_from_checkpoint(checkpoint);
    if (!dataset.empty()) cfg.dataset.root = dataset;
    Dataset data(cfg.dataset.root, cfg.model.effective_backbone());
    const Split s = parse_split(split);
    const auto& recs = s == Split::Train ? data.train() : s == Split::Query ? data.query() : data.gallery();
    const std::string path = out.empty() ? split + ".emb" : out;
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    save_embeddings(path, embed_records(*model, data, recs, cfg.eval.batch), cfg.to_kv());
    std::printf("wrote %zu x %zu features to %s (+ .csv)\n", recs.size(), cfg.model.backbone.dim, path.c_str());
    return kOk;
}

int cmd_params(const std::string& config) {
    const RunConfig cfg = load_or_default(config);
    std::printf("mode %s", to_string(cfg.model.peft.mode).c_str());
    if (cfg.model.peft.mode == PeftMode::Dri) std::printf(" plan %s", cfg.model.peft.dri.plan.name().c_str());
    std::printf("\n");
    print_params(trainable_param_count(cfg.model));
    return kOk;
}

int cmd_ablate(const std::string& grid, const std::string& config, const std::optional<std::uint64_t>& seed,
               const std::string& out) {
    RunConfig cfg = load_or_default(config);
    apply_seed(cfg, seed);
    grid_variants(grid, cfg);
    Dataset data(cfg.dataset.root, cfg.model.effective_backbone());
    const auto rows = run_grid(grid, cfg, data, &std::cerr);
    const std::string table = format_grid(rows);
    std::printf("%s", table.c_str());
    if (!out.empty()) {
        fs::create_directories(out);
        write_text(fs::path(out) / (grid + ".txt"), table);
        for (std::size_t i = 0; i < rows.size(); ++i)
            write_text(fs::path(out) / (grid + "." + std::to_string(i) + ".report.txt"), rows[i].report.text());
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Domain representation injection for cross-modal ship re-identification"};
    app.require_subcommand(1);

    std::string config, out, checkpoint, dataset, grid, split = "gallery";
    std::optional<std::uint64_t> seed;
    std::vector<std::string> protocols;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config, "key=value config file");
        sub->add_option("--seed", seed, "seed override");
        sub->add_option("--out", out, "output directory");
    };
    auto* gen = app.add_subcommand("gen-data", "write the synthetic two-modality dataset");
    common(gen);
    auto* train = app.add_subcommand("train", "train one configuration and write checkpoint + report");
    common(train);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--dataset", dataset, "dataset root (default: the one recorded in the checkpoint)");
    eval->add_option("--protocol", protocols, "retrieval protocol: all, A->B (repeatable)");
    eval->add_option("--out", out, "write report and gallery embeddings here");
    auto* params = app.add_subcommand("params", "itemized trainable parameter counts");
    params->add_option("--config", config, "key=value config file");
    auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
    ablate->add_option("grid", grid, "injection-sites | oe-shape | modulator-design | peft-compare")->required();
    common(ablate);
    auto* exp = app.add_subcommand("export-embeddings", "write features of one split");
    exp->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    exp->add_option("--dataset", dataset, "dataset root");
    exp->add_option("--split", split, "train | query | gallery");
    exp->add_option("--out", out, "output file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigFailure;
    }

    try {
        if (*gen) return cmd_gen_data(config, seed, out);
        if (*train) return cmd_train(config, seed, out);
        if (*eval) return cmd_eval(checkpoint, dataset, protocols, out);
        if (*params) return cmd_params(config);
        if (*ablate) return cmd_ablate(grid, config, seed, out);
        if (*exp) return cmd_export(checkpoint, dataset, split, out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigFailure;
    } catch (const ProtocolError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigFailure;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumericFailure;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataFailure;
    } catch (const DimensionError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataFailure;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kInternalFailure;
    }
    return kOk;
}
