#include "dri/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <ostream>
#include <set>

#include "dri/errors.hpp"
#include "dri/optim.hpp"

namespace dri {

namespace {

std::uint64_t fnv(std::uint64_t h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

constexpr std::uint64_t kFnvBasis = 14695981039346656037ull;

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

Dataset::Dataset(const std::string& root, const ViTConfig& backbone)
    : manifest_(parse_manifest((std::filesystem::path(root) / "manifest.csv").string())),
      cache_(root, backbone.channels, backbone.image_h, backbone.image_w) {
    train_ = manifest_.records(Split::Train);
    query_ = manifest_.records(Split::Query);
    gallery_ = manifest_.records(Split::Gallery);
    if (train_.empty()) throw DataError(root + ": manifest has no train rows");
    if (query_.empty() || gallery_.empty()) throw DataError(root + ": manifest needs query and gallery rows");
    std::set<std::int64_t> ids;
    for (const auto& r : train_) ids.insert(r.id);
    std::int64_t next = 0;
    for (auto id : ids) label_of_[id] = next++;
    const std::string text = write_manifest_text(manifest_);
    manifest_checksum_ = fnv(kFnvBasis, text.data(), text.size());
}

std::int64_t Dataset::label(std::int64_t id) const {
    auto it = label_of_.find(id);
    if (it == label_of_.end()) throw DataError("identity " + std::to_string(id) + " is not in the train split");
    return it->second;
}

std::vector<std::string> Dataset::modalities() const {
    std::set<std::string> m;
    for (const auto& e : manifest_.entries) m.insert(e.record.modality);
    return {m.begin(), m.end()};
}

std::array<float, 2> size_token_input(const SampleRecord& r, const ViTConfig& backbone) {
    if (!r.size || !r.aspect) throw DataError(r.path + ": ship-size token needs size and aspect metadata");
    const double diag = std::hypot(static_cast<double>(backbone.image_h), static_cast<double>(backbone.image_w));
    return {static_cast<float>(*r.size / diag), static_cast<float>(*r.aspect)};
}

double cross_modal_map(const std::vector<ProtocolResult>& results) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& r : results) {
        const RetrievalProtocol p = RetrievalProtocol::parse(r.protocol);
        if (p.query_modality.empty() || p.gallery_modality.empty() || p.query_modality == p.gallery_modality) continue;
        sum += r.metrics.mAP;
        ++n;
    }
    if (n == 0) throw ProtocolError("no cross-modal protocol among the results");
    return sum / static_cast<double>(n);
}

std::uint64_t params_checksum(const ParameterStore<float>& store, const std::string& prefix) {
    std::uint64_t h = kFnvBasis;
    for (const auto& p : store.params()) {
        if (p->name.rfind(prefix, 0) != 0) continue;
        h = fnv(h, p->name.data(), p->name.size());
        h = fnv(h, p->tensor.data.data(), p->tensor.data.size() * sizeof(float));
    }
    return h;
}

namespace {

struct Batch {
    Tensor<float> images;
    std::vector<std::array<float, 2>> meta;
    std::vector<std::int64_t> labels;
};

Batch make_batch(Dataset& data, const std::vector<SampleRecord>& recs, const ModelConfig& mc, Rng* rng,
                 const AugmentFlags& flags, bool with_labels) {
    const ViTConfig bb = mc.effective_backbone();
    Batch b;
    b.images = Tensor<float>(Shape{recs.size(), bb.channels, bb.image_h, bb.image_w});
    const std::size_t per = bb.channels * bb.image_h * bb.image_w;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const Tensor<float>& src = data.image(recs[i].path);
        const Tensor<float> img = rng ? augment(src, *rng, flags) : src;
        std::copy(img.data.begin(), img.data.end(), b.images.data.begin() + static_cast<std::ptrdiff_t>(i * per));
        if (mc.sst) b.meta.push_back(size_token_input(recs[i], bb));
        if (with_labels) b.labels.push_back(data.label(recs[i].id));
    }
    return b;
}

std::size_t steps_per_epoch(const TrainSection& t, std::size_t train_rows) {
    if (t.iters_per_epoch > 0) return t.iters_per_epoch;
    return std::max<std::size_t>(1, train_rows / (t.p * t.k));
}

/// "opt->sar" becomes "opt-to-sar" so the report stays a valid key=value document.
std::string protocol_key(const RetrievalProtocol& p) {
    if (p.query_modality.empty() && p.gallery_modality.empty()) return p.name;
    return (p.query_modality.empty() ? "all" : p.query_modality) + "-to-" +
           (p.gallery_modality.empty() ? "all" : p.gallery_modality);
}

void write_metrics(KvDoc& doc, const std::string& prefix, const std::vector<ProtocolResult>& rs) {
    for (const auto& r : rs) {
        const std::string p = prefix + protocol_key(RetrievalProtocol::parse(r.protocol)) + ".";
        doc.set(p + "map", fmt(r.metrics.mAP));
        for (const auto& [k, v] : r.metrics.cmc) doc.set(p + "r" + std::to_string(k), fmt(v));
        doc.set(p + "queries", std::to_string(r.metrics.ap.size()));
        doc.set(p + "dropped", std::to_string(r.metrics.dropped));
    }
}

}  // namespace

KvDoc RunReport::to_kv() const {
    KvDoc d;
    d.set("report.label", label);
    d.set("report.mode", mode);
    if (!plan.empty()) d.set("report.plan", plan);
    d.set("report.schedule", schedule);
    d.set("report.relevance", "all same-id gallery items except the query itself; distractors never relevant");
    d.set("report.seconds", fmt(seconds));
    d.set("report.pretrain_epochs", std::to_string(pretrain_epochs));
    for (const auto& it : params.items) d.set("params." + it.component, std::to_string(it.count));
    d.set("params.total", std::to_string(params.total()));
    char hex[32];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(backbone_before));
    d.set("backbone.checksum.before", hex);
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(backbone_after));
    d.set("backbone.checksum.after", hex);
    for (const auto& e : epochs) {
        const std::string p = "epoch." + std::to_string(e.epoch) + ".";
        d.set(p + "loss.triplet", fmt(e.triplet));
        d.set(p + "loss.id", fmt(e.id));
        d.set(p + "loss.total", fmt(e.total));
        d.set(p + "lr", fmt(e.lr));
    }
    write_metrics(d, "metrics.baseline.", baseline);
    for (const auto& [epoch, rs] : periodic) write_metrics(d, "metrics.epoch" + std::to_string(epoch) + ".", rs);
    write_metrics(d, "metrics.final.", final_metrics);
    return d;
}

EmbeddingSet embed_records(const ReidModel<float>& model, Dataset& data, const std::vector<SampleRecord>& records,
                           std::size_t batch) {
    const std::size_t D = model.config().backbone.dim;
    EmbeddingSet set;
    set.features = Tensor<float>(Shape{records.size(), D});
    for (std::size_t start = 0; start < records.size(); start += batch) {
        const std::size_t end = std::min(records.size(), start + batch);
        const std::vector<SampleRecord> chunk(records.begin() + static_cast<std::ptrdiff_t>(start),
                                              records.begin() + static_cast<std::ptrdiff_t>(end));
        const Batch b = make_batch(data, chunk, model.config(), nullptr, {}, false);
        Tape<float> tape;
        const Var<float> f = model.embed(tape, b.images, model.config().sst ? &b.meta : nullptr);
        std::copy(f.value().data.begin(), f.value().data.end(),
                  set.features.data.begin() + static_cast<std::ptrdiff_t>(start * D));
    }
    for (const auto& r : records) {
        set.ids.push_back(r.id);
        set.modalities.push_back(r.modality);
        set.keys.push_back(r.path);
    }
    return set;
}

std::vector<ProtocolResult> evaluate_model(const ReidModel<float>& model, Dataset& data,
                                           const std::vector<std::string>& protocols, std::size_t batch) {
    // each distinct image is embedded once even when it is both query and gallery
    std::vector<SampleRecord> unique;
    std::map<std::string, std::size_t> row_of;
    for (const auto* split : {&data.query(), &data.gallery()})
        for (const auto& r : *split)
            if (row_of.emplace(r.path, unique.size()).second) unique.push_back(r);
    const EmbeddingSet all = embed_records(model, data, unique, batch);
    auto pick = [&](const std::vector<SampleRecord>& recs) {
        std::vector<std::size_t> rows;
        for (const auto& r : recs) rows.push_back(row_of.at(r.path));
        EmbeddingSet s = all.subset(rows);
        for (std::size_t i = 0; i < recs.size(); ++i) s.ids[i] = recs[i].id;
        return s;
    };
    const EmbeddingSet q = pick(data.query()), g = pick(data.gallery());
    std::vector<ProtocolResult> out;
    for (const auto& name : protocols) {
        const RetrievalProtocol p = RetrievalProtocol::parse(name);
        out.push_back({p.name, evaluate(q, g, p)});
    }
    return out;
}

namespace {

struct LoopStats {
    std::vector<EpochLog> epochs;
    std::vector<std::pair<std::size_t, std::vector<ProtocolResult>>> periodic;
};

/// Shared optimization loop for pretraining and the main run.
LoopStats optimize(ReidModel<float>& model, Dataset& data, const std::vector<SampleRecord>& train,
                   const TrainSection& t, double lr, std::size_t epochs, const AugmentFlags& flags, std::uint64_t seed,
                   const std::vector<std::string>* protocols, std::size_t eval_batch, std::ostream* log,
                   const std::string& tag) {
    LoopStats stats;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xba7c4u};
    Rng rng(seq);
    Sgd<float> sgd(static_cast<float>(lr), static_cast<float>(t.momentum), static_cast<float>(t.weight_decay));
    const std::size_t per_epoch = steps_per_epoch(t, train.size());
    const std::size_t total = per_epoch * epochs;
    const auto warmup = static_cast<std::size_t>(std::ceil(t.warmup_fraction * static_cast<double>(total)));
    std::size_t step = 0;
    for (std::size_t e = 1; e <= epochs; ++e) {
        EpochLog log_e;
        log_e.epoch = e;
        for (std::size_t s = 0; s < per_epoch; ++s, ++step) {
            const auto recs = pk_sample(train, t.p, t.k, rng);
            const Batch b = make_batch(data, recs, model.config(), &rng, flags, true);
            Tape<float> tape;
            const Var<float> f_g = model.embed(tape, b.images, model.config().sst ? &b.meta : nullptr);
            const auto head = model.head().forward(tape, f_g, true);
            const auto loss = total_loss<float>(head, b.labels, static_cast<float>(t.margin));
            const double value = loss.total_value();
            if (!std::isfinite(value)) {
                throw NumericError(tag + ": non-finite loss " + fmt(value) + " at epoch " + std::to_string(e) +
                                   " step " + std::to_string(s + 1));
            }
            tape.backward(loss.total);
            const double scale = warmup > 0 ? std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup)) : 1.0;
            sgd.learning_rate = static_cast<float>(lr * scale);
            sgd.step(model.store());
            model.store().zero_grad();
            log_e.triplet += loss.triplet_value();
            log_e.id += loss.id_value();
            log_e.total += value;
            log_e.lr = sgd.learning_rate;
        }
        log_e.triplet /= static_cast<double>(per_epoch);
        log_e.id /= static_cast<double>(per_epoch);
        log_e.total /= static_cast<double>(per_epoch);
        stats.epochs.push_back(log_e);
        if (log) {
            *log << tag << " epoch " << e << "/" << epochs << " loss " << fmt(log_e.total) << " (triplet "
                 << fmt(log_e.triplet) << ", id " << fmt(log_e.id) << ")\n";
        }
        if (protocols && t.eval_every > 0 && e % t.eval_every == 0 && e != epochs) {
            stats.periodic.emplace_back(e, evaluate_model(model, data, *protocols, eval_batch));
        }
    }
    return stats;
}

std::string pretrain_key(const RunConfig& cfg, const Dataset& data) {
    const KvDoc kv = cfg.to_kv();
    std::string key = "manifest=" + std::to_string(data.manifest_checksum());
    for (const auto& [k, v] : kv.entries) {
        if (k.rfind("model.backbone.", 0) == 0 || k.rfind("train.pretrain.", 0) == 0 || k == "train.seed" ||
            k == "train.p" || k == "train.k" || k == "train.momentum" || k == "train.weight_decay" ||
            k == "train.margin" || k == "dataset.profile" || k == "train.warmup_fraction" || k == "model.sst") {
            if (k != "train.pretrain.cache") key += ";" + k + "=" + v;
        }
    }
    return key;
}

}  // namespace

Checkpoint pretrain_backbone(const RunConfig& cfg, Dataset& data, std::ostream* log) {
    const std::string key = pretrain_key(cfg, data);
    const std::string& cache = cfg.train.pretrain.cache;
    if (!cache.empty() && std::filesystem::exists(cache)) {
        Checkpoint c = load_checkpoint(cache);
        const std::string* stored = c.meta.find("pretrain.key");
        if (stored && *stored == key) {
            if (log) *log << "pretrain: reusing cached backbone " << cache << "\n";
            return c;
        }
        if (log) *log << "pretrain: cache " << cache << " is stale, retraining\n";
    }
    ModelConfig mc = cfg.model;
    mc.peft.mode = PeftMode::FullFt;
    mc.num_ids = data.num_train_ids();
    ReidModel<float> model(mc);
    std::vector<SampleRecord> train;
    for (const auto& r : data.train())
        if (r.modality == cfg.train.pretrain.modality) train.push_back(r);
    if (train.empty()) throw DataError("pretrain: no train rows of modality '" + cfg.train.pretrain.modality + "'");
    const AugmentFlags flags = AugmentFlags::for_profile(cfg.dataset.profile);
    optimize(model, data, train, cfg.train, cfg.train.pretrain.lr, cfg.train.pretrain.epochs, flags,
             cfg.train.seed ^ 0x9e3779b97f4a7c15ull, nullptr, cfg.eval.batch, log, "pretrain");
    KvDoc meta;
    meta.set("pretrain.key", key);
    Checkpoint full = snapshot(model.store(), meta);
    Checkpoint out;
    out.meta = meta;
    for (auto& t : full.tensors)
        if (t.name.rfind("backbone.", 0) == 0) out.tensors.push_back(std::move(t));
    if (!cache.empty()) {
        const auto parent = std::filesystem::path(cache).parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        save_checkpoint(cache, out);
    }
    return out;
}

TrainResult train_run(const RunConfig& cfg, Dataset& data, const Checkpoint* backbone, std::ostream* log) {
    const auto t0 = std::chrono::steady_clock::now();
    if (cfg.model.num_ids != data.num_train_ids()) {
        throw DataError("model.num_ids is " + std::to_string(cfg.model.num_ids) + " but the train split has " +
                        std::to_string(data.num_train_ids()) + " identities");
    }
    TrainResult res;
    res.model = std::make_unique<ReidModel<float>>(cfg.model);
    ReidModel<float>& model = *res.model;
    RunReport& rep = res.report;
    rep.mode = to_string(cfg.model.peft.mode);
    if (cfg.model.peft.mode == PeftMode::Dri) {
        const auto& d = cfg.model.peft.dri;
        rep.plan = d.plan.name() + " " + to_string(d.modulator.kind) + "/" + to_string(d.modulator.init) + " oe " +
                   std::to_string(d.encoder.depth) + "x" + std::to_string(d.encoder.dim);
    }

    std::optional<Checkpoint> own;
    if (!backbone && cfg.train.pretrain.epochs > 0) {
        own = pretrain_backbone(cfg, data, log);
        backbone = &*own;
    }
    if (backbone) {
        for (const auto& t : backbone->tensors) {
            Parameter<float>* p = model.store().find(t.name);
            if (!p) throw DataError("pretrained backbone tensor " + t.name + " has no counterpart in the model");
            if (p->tensor.shape != t.tensor.shape) {
                throw DataError("pretrained backbone tensor " + t.name + " is " + shape_str(t.tensor.shape) +
                                " but the model expects " + shape_str(p->tensor.shape));
            }
            p->tensor.data = t.tensor.data;
        }
        rep.pretrain_epochs = cfg.train.pretrain.epochs;
    }
    rep.params = model.trainable_table();
    rep.backbone_before = params_checksum(model.store(), "backbone.");

    const std::size_t per_epoch = steps_per_epoch(cfg.train, data.train().size());
    const std::size_t total = per_epoch * cfg.train.epochs;
    const auto warmup = static_cast<std::size_t>(std::ceil(cfg.train.warmup_fraction * static_cast<double>(total)));
    rep.schedule = "sgd momentum " + fmt(cfg.train.momentum) + ", constant lr " + fmt(cfg.train.lr) +
                   " after linear warmup over " + std::to_string(warmup) + " of " + std::to_string(total) + " steps";

    rep.baseline = evaluate_model(model, data, cfg.eval.protocols, cfg.eval.batch);
    if (log) {
        for (const auto& r : rep.baseline) *log << "epoch 0 " << r.protocol << " mAP " << fmt(r.metrics.mAP) << "\n";
    }
    const AugmentFlags flags = AugmentFlags::for_profile(cfg.dataset.profile);
    LoopStats stats = optimize(model, data, data.train(), cfg.train, cfg.train.lr, cfg.train.epochs, flags,
                               cfg.train.seed, &cfg.eval.protocols, cfg.eval.batch, log, rep.mode);
    rep.epochs = std::move(stats.epochs);
    rep.periodic = std::move(stats.periodic);
    rep.final_metrics = cfg.train.epochs == 0 ? rep.baseline : evaluate_model(model, data, cfg.eval.protocols, cfg.eval.batch);
    if (log) {
        for (const auto& r : rep.final_metrics)
            *log << "final " << r.protocol << " mAP " << fmt(r.metrics.mAP) << "\n";
    }
    rep.backbone_after = params_checksum(model.store(), "backbone.");
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace dri
