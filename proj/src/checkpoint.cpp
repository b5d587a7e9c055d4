#include "dri/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dri/errors.hpp"

namespace dri {

bool StoredTensor::operator==(const StoredTensor& o) const {
    return name == o.name && trainable == o.trainable && tensor.shape == o.tensor.shape &&
           tensor.data.size() == o.tensor.data.size() &&
           std::memcmp(tensor.data.data(), o.tensor.data.data(), tensor.data.size() * sizeof(float)) == 0;
}

const StoredTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

namespace {

std::string shape_text(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out;
}

Shape parse_shape(const std::string& text, const std::string& where) {
    Shape s;
    if (text.empty()) return s;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(item, &used);
            if (used != item.size() || v == 0) throw std::invalid_argument(item);
            s.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ParseError(where + ": bad shape '" + text + "'");
        }
    }
    return s;
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

void check_value(const std::string& s, const std::string& what) {
    if (s.find('\n') != std::string::npos || s.find('\r') != std::string::npos)
        throw ContractError("checkpoint " + what + " contains a line break: '" + s + "'");
}

const std::string& need(const KvDoc& doc, const std::string& key, const std::string& source) {
    const std::string* v = doc.find(key);
    if (!v) throw ParseError(source + ": checkpoint header lacks '" + key + "'");
    return *v;
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
    KvDoc header;
    header.entries.emplace_back("format", "DRI1");
    header.entries.emplace_back("tensors", std::to_string(ckpt.tensors.size()));
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
        const auto& t = ckpt.tensors[i];
        check_value(t.name, "tensor name");
        if (t.tensor.data.size() != numel(t.tensor.shape))
            throw DimensionError("checkpoint tensor " + t.name + " has inconsistent shape " + shape_str(t.tensor.shape));
        const std::string p = "tensor." + std::to_string(i) + ".";
        header.entries.emplace_back(p + "name", t.name);
        header.entries.emplace_back(p + "shape", shape_text(t.tensor.shape));
        header.entries.emplace_back(p + "dtype", "f32");
        header.entries.emplace_back(p + "offset", std::to_string(offset));
        header.entries.emplace_back(p + "trainable", t.trainable ? "true" : "false");
        offset += t.tensor.data.size() * 4;
    }
    for (const auto& [k, v] : ckpt.meta.entries) {
        check_value(k, "meta key");
        check_value(v, "meta value");
        header.entries.emplace_back("meta." + k, v);
    }
    const std::string text = header.text();
    std::string out(kCheckpointMagic, 4);
    put_u64(out, text.size());
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& t : ckpt.tensors) {
        for (float f : t.tensor.data) {
            const auto bits = std::bit_cast<std::uint32_t>(f);
            for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
    }
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw ParseError(source + ": not a DRI1 container (bad magic)");
    const std::uint64_t header_len = get_u64(bytes, 4);
    if (header_len > bytes.size() - 12) throw ParseError(source + ": header length exceeds file size");
    const KvDoc header = parse_kv(bytes.substr(12, header_len), source + " header");
    if (need(header, "format", source) != "DRI1") throw ParseError(source + ": unsupported format");
    const std::size_t payload_start = 12 + header_len;
    const std::size_t payload = bytes.size() - payload_start;

    Checkpoint ckpt;
    std::size_t count = 0;
    try {
        count = std::stoull(need(header, "tensors", source));
    } catch (const std::logic_error&) {
        throw ParseError(source + ": bad tensor count");
    }
    std::uint64_t expected_offset = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const std::string p = "tensor." + std::to_string(i) + ".";
        const std::string where = source + ": " + p;
        StoredTensor t;
        t.name = need(header, p + "name", source);
        if (need(header, p + "dtype", source) != "f32") throw ParseError(where + "dtype must be f32");
        const Shape shape = parse_shape(need(header, p + "shape", source), where + "shape");
        const std::string& off_text = need(header, p + "offset", source);
        std::uint64_t off = 0;
        try {
            off = std::stoull(off_text);
        } catch (const std::logic_error&) {
            throw ParseError(where + "offset '" + off_text + "' is not a number");
        }
        if (off != expected_offset) {
            throw ParseError(where + "offset " + off_text + " overlaps or leaves a gap (expected " +
                             std::to_string(expected_offset) + ")");
        }
        const std::string& tr = need(header, p + "trainable", source);
        if (tr != "true" && tr != "false") throw ParseError(where + "trainable must be true/false");
        t.trainable = tr == "true";
        const std::size_t n = numel(shape);
        if (off + n * 4 > payload) throw ParseError(where + "payload truncated for tensor " + t.name);
        t.tensor.shape = shape;
        t.tensor.data.resize(n);
        const char* src = bytes.data() + payload_start + off;
        for (std::size_t j = 0; j < n; ++j) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * j + b])) << (8 * b);
            t.tensor.data[j] = std::bit_cast<float>(bits);
        }
        expected_offset = off + n * 4;
        ckpt.tensors.push_back(std::move(t));
    }
    if (expected_offset != payload) {
        throw ParseError(source + ": payload has " + std::to_string(payload) + " bytes, header describes " +
                         std::to_string(expected_offset));
    }
    for (const auto& [k, v] : header.entries)
        if (k.rfind("meta.", 0) == 0) ckpt.meta.entries.emplace_back(k.substr(5), v);
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const std::string bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str(), path);
}

Checkpoint snapshot(const ParameterStore<float>& store, const KvDoc& meta) {
    Checkpoint c;
    for (const auto& p : store.params()) {
        StoredTensor t{p->name, Tensor<float>{}, p->trainable};
        t.tensor.shape = p->tensor.shape;
        t.tensor.data = p->tensor.data;
        c.tensors.push_back(std::move(t));
    }
    for (const auto& [name, buf] : store.buffers()) {
        StoredTensor t{name, Tensor<float>{}, false};
        t.tensor.shape = buf->shape;
        t.tensor.data = buf->data;
        c.tensors.push_back(std::move(t));
    }
    c.meta = meta;
    return c;
}

void restore(ParameterStore<float>& store, const Checkpoint& ckpt) {
    std::vector<std::string> problems;
    auto copy = [&](const std::string& name, Tensor<float>& dst, const StoredTensor* src) {
        if (!src) {
            problems.push_back(name + " missing from checkpoint");
        } else if (src->tensor.shape != dst.shape) {
            problems.push_back(name + " is " + shape_str(src->tensor.shape) + " in checkpoint but " +
                               shape_str(dst.shape) + " in model");
        } else {
            dst.data = src->tensor.data;
        }
    };
    for (const auto& p : store.params()) {
        const StoredTensor* src = ckpt.find(p->name);
        copy(p->name, p->tensor, src);
        if (src) p->set_trainable(src->trainable);
    }
    for (const auto& [name, buf] : store.buffers()) copy(name, *buf, ckpt.find(name));
    if (!problems.empty()) {
        std::string msg = "checkpoint does not match model:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw DataError(msg);
    }
}

void save_embeddings(const std::string& path, const EmbeddingSet& set, const KvDoc& meta) {
    set.validate();
    Checkpoint c;
    c.tensors.push_back({"features", set.features, false});
    c.meta = meta;
    save_checkpoint(path, c);
    std::ofstream csv(path + ".csv");
    if (!csv) throw DataError("cannot write " + path + ".csv");
    csv << "key,id,modality\n";
    for (std::size_t i = 0; i < set.size(); ++i) csv << set.keys[i] << "," << set.ids[i] << "," << set.modalities[i] << "\n";
    if (!csv) throw DataError("write failed for " + path + ".csv");
}

EmbeddingSet load_embeddings(const std::string& path) {
    const Checkpoint c = load_checkpoint(path);
    const StoredTensor* f = c.find("features");
    if (!f) throw DataError(path + ": no 'features' tensor");
    EmbeddingSet set;
    set.features = f->tensor;
    std::ifstream csv(path + ".csv");
    if (!csv) throw DataError("cannot open " + path + ".csv");
    std::string line;
    std::getline(csv, line);
    if (line != "key,id,modality") throw ParseError(path + ".csv: bad header '" + line + "'");
    std::size_t lineno = 1;
    while (std::getline(csv, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto a = line.find(','), b = line.rfind(',');
        if (a == std::string::npos || a == b) throw ParseError(path + ".csv:" + std::to_string(lineno) + ": expected 3 columns");
        set.keys.push_back(line.substr(0, a));
        try {
            set.ids.push_back(std::stoll(line.substr(a + 1, b - a - 1)));
        } catch (const std::logic_error&) {
            throw ParseError(path + ".csv:" + std::to_string(lineno) + ": bad id");
        }
        set.modalities.push_back(line.substr(b + 1));
    }
    set.validate();
    return set;
}

}  // namespace dri
