#include "dri/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "dri/errors.hpp"
#include "dri/evaluation.hpp"

namespace dri {

const std::string* KvDoc::find(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return &v;
    return nullptr;
}

void KvDoc::set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    entries.emplace_back(key, std::move(value));
}

std::string KvDoc::text() const {
    std::string out;
    for (const auto& [k, v] : entries) out += k + "=" + v + "\n";
    return out;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

KvDoc parse_kv(const std::string& text, const std::string& source) {
    KvDoc doc;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        const std::string where = source + ":" + std::to_string(lineno);
        if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + t + "'");
        const std::string key = trim(t.substr(0, eq));
        if (key.empty()) throw ConfigError(where + ": empty key");
        for (char c : key) {
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-'))
                throw ConfigError(where + ": bad character in key '" + key + "'");
        }
        if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
        doc.entries.emplace_back(key, trim(t.substr(eq + 1)));
    }
    return doc;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

template <typename U>
U parse_unsigned(const std::string& key, const std::string& v) {
    U out{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || p != v.data() + v.size())
        throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || p != v.data() + v.size())
        throw ConfigError(key + ": '" + v + "' is not a number");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": '" + v + "' is not a boolean (true/false)");
}

std::vector<std::string> parse_list(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string join(const std::vector<std::string>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + xs[i];
    return out;
}

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Field size_field(std::string key, Member m) {
    return {key, [key, m](RunConfig& c, const std::string& v) { m(c) = parse_unsigned<std::size_t>(key, v); },
            [m](const RunConfig& c) { return std::to_string(m(c)); }};
}

template <typename Member>
Field u64_field(std::string key, Member m) {
    return {key, [key, m](RunConfig& c, const std::string& v) { m(c) = parse_unsigned<std::uint64_t>(key, v); },
            [m](const RunConfig& c) { return std::to_string(m(c)); }};
}

template <typename Member>
Field real_field(std::string key, Member m) {
    return {key, [key, m](RunConfig& c, const std::string& v) { m(c) = parse_real(key, v); },
            [m](const RunConfig& c) { return fmt(m(c)); }};
}

template <typename Member>
Field bool_field(std::string key, Member m) {
    return {key, [key, m](RunConfig& c, const std::string& v) { m(c) = parse_bool(key, v); },
            [m](const RunConfig& c) { return std::string(m(c) ? "true" : "false"); }};
}

template <typename Member>
Field string_field(std::string key, Member m) {
    return {key, [m](RunConfig& c, const std::string& v) { m(c) = v; },
            [m](const RunConfig& c) { return m(c); }};
}

template <typename Member>
Field list_field(std::string key, Member m) {
    return {key, [m](RunConfig& c, const std::string& v) { m(c) = parse_list(v); },
            [m](const RunConfig& c) { return join(m(c)); }};
}

#define DRI_M(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = [] {
        std::vector<Field> f;
        f.push_back(string_field("dataset.root", DRI_M(dataset.root)));
        f.push_back(string_field("dataset.profile", DRI_M(dataset.profile)));
        f.push_back(size_field("dataset.synthetic.num_ids", DRI_M(dataset.synthetic.num_ids)));
        f.push_back(size_field("dataset.synthetic.test_ids", DRI_M(dataset.synthetic.test_ids)));
        f.push_back(size_field("dataset.synthetic.distractor_ids", DRI_M(dataset.synthetic.distractor_ids)));
        f.push_back(size_field("dataset.synthetic.images_per_id_per_modality",
                               DRI_M(dataset.synthetic.images_per_id_per_modality)));
        f.push_back(size_field("dataset.synthetic.height", DRI_M(dataset.synthetic.height)));
        f.push_back(size_field("dataset.synthetic.width", DRI_M(dataset.synthetic.width)));
        f.push_back(u64_field("dataset.synthetic.seed", DRI_M(dataset.synthetic.seed)));
        f.push_back(list_field("dataset.synthetic.modalities", DRI_M(dataset.synthetic.modalities)));
        f.push_back(real_field("dataset.synthetic.max_rotation_deg", DRI_M(dataset.synthetic.max_rotation_deg)));
        f.push_back(real_field("dataset.synthetic.max_scale_jitter", DRI_M(dataset.synthetic.max_scale_jitter)));
        f.push_back(real_field("dataset.synthetic.max_shift_px", DRI_M(dataset.synthetic.max_shift_px)));
        f.push_back(size_field("dataset.synthetic.speckle_looks", DRI_M(dataset.synthetic.speckle_looks)));
        f.push_back(real_field("dataset.synthetic.edge_weight", DRI_M(dataset.synthetic.edge_weight)));

        f.push_back(size_field("model.backbone.depth", DRI_M(model.backbone.depth)));
        f.push_back(size_field("model.backbone.dim", DRI_M(model.backbone.dim)));
        f.push_back(size_field("model.backbone.heads", DRI_M(model.backbone.heads)));
        f.push_back(size_field("model.backbone.mlp_ratio", DRI_M(model.backbone.mlp_ratio)));
        f.push_back(size_field("model.backbone.patch", DRI_M(model.backbone.patch)));
        f.push_back(size_field("model.backbone.image_h", DRI_M(model.backbone.image_h)));
        f.push_back(size_field("model.backbone.image_w", DRI_M(model.backbone.image_w)));
        f.push_back(size_field("model.backbone.channels", DRI_M(model.backbone.channels)));
        f.push_back({"model.backbone.pos_mode",
                     [](RunConfig& c, const std::string& v) { c.model.backbone.pos_mode = parse_pos_mode(v); },
                     [](const RunConfig& c) { return to_string(c.model.backbone.pos_mode); }});
        f.push_back(real_field("model.backbone.ln_eps", DRI_M(model.backbone.ln_eps)));
        f.push_back({"model.peft.mode", [](RunConfig& c, const std::string& v) { c.model.peft.mode = parse_peft_mode(v); },
                     [](const RunConfig& c) { return to_string(c.model.peft.mode); }});
        f.push_back(size_field("model.peft.lora.rank", DRI_M(model.peft.lora.rank)));
        f.push_back(real_field("model.peft.lora.alpha", DRI_M(model.peft.lora.alpha)));
        f.push_back(bool_field("model.peft.lora.target_qkv", DRI_M(model.peft.lora.target_qkv)));
        f.push_back(bool_field("model.peft.lora.target_proj", DRI_M(model.peft.lora.target_proj)));
        f.push_back(size_field("model.peft.adapter.hidden", DRI_M(model.peft.adapter.hidden)));
        f.push_back(size_field("model.peft.dri.encoder.depth", DRI_M(model.peft.dri.encoder.depth)));
        f.push_back(size_field("model.peft.dri.encoder.dim", DRI_M(model.peft.dri.encoder.dim)));
        f.push_back(size_field("model.peft.dri.encoder.heads", DRI_M(model.peft.dri.encoder.heads)));
        f.push_back(size_field("model.peft.dri.encoder.mlp_ratio", DRI_M(model.peft.dri.encoder.mlp_ratio)));
        f.push_back(size_field("model.peft.dri.encoder.patch", DRI_M(model.peft.dri.encoder.patch)));
        f.push_back({"model.peft.dri.plan",
                     [](RunConfig& c, const std::string& v) { c.model.peft.dri.plan = InjectionPlan::parse(v); },
                     [](const RunConfig& c) { return c.model.peft.dri.plan.name(); }});
        f.push_back({"model.peft.dri.modulator.kind",
                     [](RunConfig& c, const std::string& v) { c.model.peft.dri.modulator.kind = parse_modulator_kind(v); },
                     [](const RunConfig& c) { return to_string(c.model.peft.dri.modulator.kind); }});
        f.push_back({"model.peft.dri.modulator.init",
                     [](RunConfig& c, const std::string& v) { c.model.peft.dri.modulator.init = parse_modulator_init(v); },
                     [](const RunConfig& c) { return to_string(c.model.peft.dri.modulator.init); }});
        f.push_back(size_field("model.peft.dri.modulator.mlp_hidden", DRI_M(model.peft.dri.modulator.mlp_hidden)));
        f.push_back(bool_field("model.sst", DRI_M(model.sst)));
        f.push_back(size_field("model.num_ids", DRI_M(model.num_ids)));

        f.push_back(real_field("train.lr", DRI_M(train.lr)));
        f.push_back(real_field("train.momentum", DRI_M(train.momentum)));
        f.push_back(real_field("train.weight_decay", DRI_M(train.weight_decay)));
        f.push_back(size_field("train.p", DRI_M(train.p)));
        f.push_back(size_field("train.k", DRI_M(train.k)));
        f.push_back(size_field("train.epochs", DRI_M(train.epochs)));
        f.push_back(size_field("train.iters_per_epoch", DRI_M(train.iters_per_epoch)));
        f.push_back(real_field("train.margin", DRI_M(train.margin)));
        f.push_back(u64_field("train.seed", DRI_M(train.seed)));
        f.push_back(real_field("train.warmup_fraction", DRI_M(train.warmup_fraction)));
        f.push_back(size_field("train.eval_every", DRI_M(train.eval_every)));
        f.push_back(size_field("train.pretrain.epochs", DRI_M(train.pretrain.epochs)));
        f.push_back(string_field("train.pretrain.modality", DRI_M(train.pretrain.modality)));
        f.push_back(real_field("train.pretrain.lr", DRI_M(train.pretrain.lr)));
        f.push_back(string_field("train.pretrain.cache", DRI_M(train.pretrain.cache)));

        f.push_back(list_field("eval.protocols", DRI_M(eval.protocols)));
        f.push_back(size_field("eval.batch", DRI_M(eval.batch)));
        return f;
    }();
    return fields;
}

#undef DRI_M

}  // namespace

std::vector<std::string> run_config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : schema()) keys.push_back(f.key);
    return keys;
}

KvDoc RunConfig::to_kv() const {
    KvDoc doc;
    for (const auto& f : schema()) doc.entries.emplace_back(f.key, f.get(*this));
    return doc;
}

void RunConfig::validate() const {
    dataset.synthetic.validate();
    AugmentFlags::for_profile(dataset.profile);
    model.effective_backbone().validate();
    if (model.num_ids < 2) throw ConfigError("model.num_ids must be >= 2");
    if (train.p < 2) throw ConfigError("train.p must be >= 2 (batch-hard triplet needs two identities)");
    if (train.k < 1) throw ConfigError("train.k must be >= 1");
    if (!(train.lr > 0)) throw ConfigError("train.lr must be positive");
    if (train.momentum < 0 || train.momentum >= 1) throw ConfigError("train.momentum must be in [0, 1)");
    if (train.weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (train.margin < 0) throw ConfigError("train.margin must be >= 0");
    if (train.warmup_fraction < 0 || train.warmup_fraction > 1)
        throw ConfigError("train.warmup_fraction must be in [0, 1]");
    if (!(train.pretrain.lr > 0)) throw ConfigError("train.pretrain.lr must be positive");
    if (eval.protocols.empty()) throw ConfigError("eval.protocols is empty");
    if (eval.batch == 0) throw ConfigError("eval.batch must be positive");
    for (const auto& p : eval.protocols) {
        try {
            RetrievalProtocol::parse(p);
        } catch (const ProtocolError& e) {
            throw ConfigError(std::string("eval.protocols: ") + e.what());
        }
    }
    if (model.peft.mode == PeftMode::Lora && model.peft.lora.rank == 0) throw ConfigError("model.peft.lora.rank must be >= 1");
    if (model.peft.mode == PeftMode::Adapter && model.peft.adapter.hidden == 0)
        throw ConfigError("model.peft.adapter.hidden must be >= 1");
    if (model.peft.mode == PeftMode::Dri) {
        model.peft.dri.encoder.vit_config(model.effective_backbone()).validate();
    }
}

RunConfig parse_run_config(const KvDoc& doc) {
    RunConfig cfg;
    const auto& fields = schema();
    for (const auto& [key, value] : doc.entries) {
        const Field* hit = nullptr;
        for (const auto& f : fields)
            if (f.key == key) hit = &f;
        if (!hit) throw ConfigError("unknown config key '" + key + "'");
        try {
            hit->set(cfg, value);
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            throw ConfigError(msg.rfind(key, 0) == 0 ? msg : key + ": " + msg);
        }
    }
    cfg.model.seed = cfg.train.seed;
    cfg.validate();
    return cfg;
}

RunConfig parse_run_config_text(const std::string& text, const std::string& source) {
    return parse_run_config(parse_kv(text, source));
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config_text(ss.str(), path);
}

}  // namespace dri
