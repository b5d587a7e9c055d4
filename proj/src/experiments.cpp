#include "dri/experiments.hpp"

#include <cstdio>
#include <optional>
#include <ostream>

#include "dri/errors.hpp"

namespace dri {

const std::vector<std::string>& grid_names() {
    static const std::vector<std::string> names{"injection-sites", "oe-shape", "modulator-design", "peft-compare"};
    return names;
}

std::vector<GridVariant> grid_variants(const std::string& grid, const RunConfig& base) {
    std::vector<GridVariant> out;
    auto dri_base = [&] {
        RunConfig c = base;
        c.model.peft.mode = PeftMode::Dri;
        return c;
    };
    if (grid == "injection-sites") {
        for (const auto& name : injection_grid_names()) {
            RunConfig c = dri_base();
            c.model.peft.dri.plan = InjectionPlan::parse(name);
            out.push_back({name, c});
        }
    } else if (grid == "oe-shape") {
        const std::pair<std::size_t, std::size_t> shapes[] = {{2, 64}, {1, 64}, {4, 64}, {6, 64},
                                                              {2, 32}, {2, 96}, {2, 128}};
        for (auto [depth, dim] : shapes) {
            RunConfig c = dri_base();
            c.model.peft.dri.encoder.depth = depth;
            c.model.peft.dri.encoder.dim = dim;
            out.push_back({"depth " + std::to_string(depth) + " dim " + std::to_string(dim), c});
        }
    } else if (grid == "modulator-design") {
        const std::pair<ModulatorKind, ModulatorInit> rows[] = {{ModulatorKind::Linear, ModulatorInit::Random},
                                                                {ModulatorKind::Mlp, ModulatorInit::Random},
                                                                {ModulatorKind::Mlp, ModulatorInit::Zero},
                                                                {ModulatorKind::Linear, ModulatorInit::Zero}};
        for (auto [kind, init] : rows) {
            RunConfig c = dri_base();
            c.model.peft.dri.modulator.kind = kind;
            c.model.peft.dri.modulator.init = init;
            out.push_back({to_string(kind) + "/" + to_string(init), c});
        }
    } else if (grid == "peft-compare") {
        for (PeftMode m : {PeftMode::Frozen, PeftMode::FullFt, PeftMode::Lora, PeftMode::Adapter, PeftMode::Dri}) {
            RunConfig c = base;
            c.model.peft.mode = m;
            out.push_back({to_string(m), c});
        }
    } else {
        std::string known;
        for (const auto& n : grid_names()) known += (known.empty() ? "" : ", ") + n;
        throw ConfigError("unknown grid '" + grid + "' (" + known + ")");
    }
    for (auto& v : out) v.cfg.validate();
    return out;
}

std::vector<GridRow> run_grid(const std::string& grid, const RunConfig& base, Dataset& data, std::ostream* log) {
    const auto variants = grid_variants(grid, base);
    std::optional<Checkpoint> backbone;
    if (base.train.pretrain.epochs > 0) backbone = pretrain_backbone(base, data, log);
    std::vector<GridRow> rows;
    for (const auto& v : variants) {
        if (log) *log << "== " << grid << ": " << v.label << "\n";
        TrainResult r = train_run(v.cfg, data, backbone ? &*backbone : nullptr, log);
        GridRow row{v.label, std::move(r.report), false};
        row.report.label = v.label;
        const ParamTable closed = trainable_param_count(v.cfg.model);
        row.params_match = closed.items.size() == row.report.params.items.size();
        for (std::size_t i = 0; row.params_match && i < closed.items.size(); ++i) {
            row.params_match = closed.items[i].component == row.report.params.items[i].component &&
                               closed.items[i].count == row.report.params.items[i].count;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

std::string line(const char* fmt_str, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, fmt_str, args...);
    return buf;
}

double headline(const std::vector<ProtocolResult>& rs) {
    try {
        return cross_modal_map(rs);
    } catch (const ProtocolError&) {
        return rs.empty() ? 0.0 : rs.front().metrics.mAP;
    }
}

}  // namespace

std::string format_metrics(const std::string& label, const std::vector<ProtocolResult>& results,
                           std::size_t trainable) {
    std::string out = line("%-24s %-12s %7s %7s %7s %7s %12s\n", "run", "protocol", "mAP", "R1", "R5", "R10", "params");
    for (const auto& r : results) {
        const auto& m = r.metrics;
        out += line("%-24s %-12s %7.2f %7.2f %7.2f %7.2f %12zu\n", label.c_str(), r.protocol.c_str(), m.mAP,
                    m.cmc.at(1), m.cmc.at(5), m.cmc.at(10), trainable);
    }
    return out;
}

std::string format_grid(const std::vector<GridRow>& rows) {
    std::string out = line("%-26s %9s %9s %9s %12s %6s\n", "variant", "xmod mAP", "base mAP", "R1", "params", "check");
    for (const auto& row : rows) {
        const auto& rep = row.report;
        double r1 = 0;
        std::size_t n = 0;
        for (const auto& r : rep.final_metrics) {
            const RetrievalProtocol p = RetrievalProtocol::parse(r.protocol);
            if (p.query_modality.empty() || p.query_modality == p.gallery_modality) continue;
            r1 += r.metrics.cmc.at(1);
            ++n;
        }
        out += line("%-26s %9.2f %9.2f %9.2f %12zu %6s\n", row.label.c_str(), headline(rep.final_metrics),
                    headline(rep.baseline), n ? r1 / static_cast<double>(n) : 0.0, rep.params.total(),
                    row.params_match ? "ok" : "DIFF");
    }
    return out;
}

}  // namespace dri
