// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dualrate/common.hpp"
#include "dualrate/distill.hpp"
#include "dualrate/models.hpp"
#include "dualrate/nnkit.hpp"
#include "dualrate/rng.hpp"
#include "dualrate/train.hpp"

namespace dualrate {

static_assert(std::endian::native == std::endian::little,
              "checkpoint files are little-endian; big-endian hosts are not supported");
static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559,
              "checkpoint files store IEEE-754 binary64 values");

namespace detail {

inline uint32_t crc32_update(uint32_t crc, const char* data, size_t n) {
    // Standard reflected CRC-32 (polynomial 0xEDB88320), table built on first use.
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int j = 0; j < 8; ++j) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc = ~crc;
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ static_cast<unsigned char>(data[i])) & 0xFF] ^ (crc >> 8);
    return ~crc;
}

}  // namespace detail

// Append-only binary encoder. All integers little-endian, doubles raw IEEE-754.
struct ByteWriter {
    std::string buf;

    void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
    void u8(uint8_t v) { raw(&v, 1); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void i32(int32_t v) { raw(&v, 4); }
    void i64(int64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void vec_f64(const std::vector<double>& v) {
        u64(v.size());
        raw(v.data(), v.size() * 8);
    }
    void vec_i32(const std::vector<int>& v) {
        u64(v.size());
        for (int x : v) i32(x);
    }
};

struct ByteReader {
    const std::string* src;
    size_t pos = 0;

    explicit ByteReader(const std::string& s) : src(&s) {}

    void raw(void* p, size_t n) {
        if (pos + n > src->size()) throw IoError("checkpoint: truncated section");
        std::memcpy(p, src->data() + pos, n);
        pos += n;
    }
    uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    int32_t i32() { int32_t v; raw(&v, 4); return v; }
    int64_t i64() { int64_t v; raw(&v, 8); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    std::string str() {
        uint64_t n = u64();
        if (pos + n > src->size()) throw IoError("checkpoint: truncated string");
        std::string s(src->data() + pos, n);
        pos += n;
        return s;
    }
    std::vector<double> vec_f64() {
        uint64_t n = u64();
        std::vector<double> v(n);
        raw(v.data(), n * 8);
        return v;
    }
    std::vector<int> vec_i32() {
        uint64_t n = u64();
        std::vector<int> v(n);
        for (auto& x : v) x = i32();
        return v;
    }
    void expect_end() const {
        if (pos != src->size()) throw IoError("checkpoint: trailing bytes in section");
    }
};

// File layout: magic "DRCKPT01", u32 format version, u32 section count, then
// per section {u32 name length, name bytes, u64 payload length, payload},
// then a CRC-32 of everything before it. Readers refuse unknown versions and
// corrupted files. Full byte-level description lives in docs/checkpoint.md.
inline constexpr char kCheckpointMagic[8] = {'D', 'R', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline void write_checkpoint_file(const std::string& path,
                                  const std::vector<std::pair<std::string, std::string>>& sections) {
    ByteWriter w;
    w.raw(kCheckpointMagic, 8);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<uint32_t>(sections.size()));
    for (const auto& [name, payload] : sections) {
        w.u32(static_cast<uint32_t>(name.size()));
        w.raw(name.data(), name.size());
        w.u64(payload.size());
        w.raw(payload.data(), payload.size());
    }
    uint32_t crc = detail::crc32_update(0, w.buf.data(), w.buf.size());
    w.u32(crc);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    f.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
    if (!f) throw IoError("checkpoint: write to '" + path + "' failed");
}

inline std::map<std::string, std::string> read_checkpoint_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 + 4 + 4 + 4) throw IoError("checkpoint: file too short");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw IoError("checkpoint: bad magic in '" + path + "'");
    uint32_t stored_crc = 0;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    uint32_t actual = detail::crc32_update(0, bytes.data(), bytes.size() - 4);
    if (stored_crc != actual) throw IoError("checkpoint: CRC mismatch in '" + path + "'");

    std::string body = bytes.substr(0, bytes.size() - 4);
    ByteReader r(body);
    r.pos = 8;
    uint32_t version = r.u32();
    if (version > kCheckpointVersion)
        throw IoError("checkpoint: '" + path + "' has format version " + std::to_string(version) +
                      "; this build understands up to " + std::to_string(kCheckpointVersion));
    uint32_t count = r.u32();
    std::map<std::string, std::string> sections;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        r.raw(name.data(), name_len);
        uint64_t payload_len = r.u64();
        std::string payload(payload_len, '\0');
        r.raw(payload.data(), payload_len);
        if (!sections.emplace(std::move(name), std::move(payload)).second)
            throw IoError("checkpoint: duplicate section in '" + path + "'");
    }
    r.expect_end();
    return sections;
}

inline const std::string& require_section(const std::map<std::string, std::string>& s, const std::string& name) {
    auto it = s.find(name);
    if (it == s.end()) throw IoError("checkpoint: missing section '" + name + "'");
    return it->second;
}

// --- typed payloads -------------------------------------------------------

inline void encode_mlp_spec(ByteWriter& w, const MlpSpec& s) {
    w.i32(s.input_dim);
    w.vec_i32(s.hidden_dims);
    w.i32(s.output_dim);
    w.i32(s.activation == Activation::SiLU ? 0 : 1);
    w.i32(s.time_embed_dim);
    w.i32(s.n_embed_inputs);
    w.u8(s.film_enabled ? 1 : 0);
    w.vec_i32(s.cond_dims);
    w.i32(s.n_classes);
}

inline MlpSpec decode_mlp_spec(ByteReader& r) {
    MlpSpec s;
    s.input_dim = r.i32();
    s.hidden_dims = r.vec_i32();
    s.output_dim = r.i32();
    s.activation = r.i32() == 0 ? Activation::SiLU : Activation::ReLU;
    s.time_embed_dim = r.i32();
    s.n_embed_inputs = r.i32();
    s.film_enabled = r.u8() != 0;
    s.cond_dims = r.vec_i32();
    s.n_classes = r.i32();
    s.validate();
    return s;
}

inline std::string encode_model(const DualRateModel& m) {
    ByteWriter w;
    w.u8(m.use_encoder ? 1 : 0);
    w.u8(m.multi_level ? 1 : 0);
    w.i32(m.param_mode == ParamMode::VPred ? 1 : 0);
    w.i32(m.n_classes);
    w.f64(m.embed_drop_p);
    if (m.use_encoder) encode_mlp_spec(w, m.encoder_spec);
    encode_mlp_spec(w, m.denoiser_spec);
    w.vec_f64(m.params.values);
    return w.buf;
}

inline DualRateModel decode_model(const std::string& payload) {
    ByteReader r(payload);
    DualRateModel m;
    m.use_encoder = r.u8() != 0;
    m.multi_level = r.u8() != 0;
    m.param_mode = r.i32() == 1 ? ParamMode::VPred : ParamMode::XPred;
    m.n_classes = r.i32();
    m.embed_drop_p = r.f64();
    if (m.use_encoder) m.encoder_spec = decode_mlp_spec(r);
    m.denoiser_spec = decode_mlp_spec(r);
    std::vector<double> values = r.vec_f64();
    r.expect_end();
    m.rebuild_layout();
    if (values.size() != m.params.values.size())
        throw IoError("checkpoint: model parameter count does not match its architecture");
    m.params.values = std::move(values);
    return m;
}

inline std::string encode_optim(const OptimState& o) {
    ByteWriter w;
    w.i64(o.step);
    w.f64(o.lr);
    w.f64(o.beta1);
    w.f64(o.beta2);
    w.f64(o.epsilon);
    w.f64(o.clip_norm);
    w.i64(o.warmup_steps);
    w.vec_f64(o.m);
    w.vec_f64(o.v);
    return w.buf;
}

inline OptimState decode_optim(const std::string& payload) {
    ByteReader r(payload);
    OptimState o;
    o.step = r.i64();
    o.lr = r.f64();
    o.beta1 = r.f64();
    o.beta2 = r.f64();
    o.epsilon = r.f64();
    o.clip_norm = r.f64();
    o.warmup_steps = r.i64();
    o.m = r.vec_f64();
    o.v = r.vec_f64();
    r.expect_end();
    if (o.m.size() != o.v.size()) throw IoError("checkpoint: optimizer moment sizes disagree");
    return o;
}

inline std::string encode_ema(const EmaState& e) {
    ByteWriter w;
    w.f64(e.decay);
    w.vec_f64(e.shadow);
    return w.buf;
}

inline EmaState decode_ema(const std::string& payload) {
    ByteReader r(payload);
    EmaState e;
    e.decay = r.f64();
    e.shadow = r.vec_f64();
    r.expect_end();
    return e;
}

inline std::string encode_rng(const Rng& rng) {
    ByteWriter w;
    w.str(rng.serialize());
    return w.buf;
}

inline Rng decode_rng(const std::string& payload) {
    ByteReader r(payload);
    std::string text = r.str();
    r.expect_end();
    return Rng::deserialize(text);
}

inline std::string encode_meta(const std::string& kind) {
    ByteWriter w;
    w.str(kind);
    return w.buf;
}

inline std::string decode_meta(const std::string& payload) {
    ByteReader r(payload);
    std::string kind = r.str();
    r.expect_end();
    return kind;
}

// --- whole-state checkpoints ---------------------------------------------

inline void save_train_checkpoint(const std::string& path, const TrainState& st, const Rng& rng) {
    ByteWriter progress;
    progress.i64(st.step);
    progress.f64(st.loss_accum);
    progress.i64(st.loss_count);
    std::vector<std::pair<std::string, std::string>> sections{
        {"meta", encode_meta("train")},
        {"model", encode_model(st.model)},
        {"opt", encode_optim(st.opt)},
        {"ema", encode_ema(st.ema)},
        {"rng", encode_rng(rng)},
        {"progress", progress.buf},
    };
    write_checkpoint_file(path, sections);
}

inline void load_train_checkpoint(const std::string& path, TrainState& st, Rng& rng) {
    auto sections = read_checkpoint_file(path);
    if (decode_meta(require_section(sections, "meta")) != "train")
        throw IoError("checkpoint: '" + path + "' is not a training checkpoint");
    st.model = decode_model(require_section(sections, "model"));
    st.opt = decode_optim(require_section(sections, "opt"));
    st.ema = decode_ema(require_section(sections, "ema"));
    rng = decode_rng(require_section(sections, "rng"));
    ByteReader r(require_section(sections, "progress"));
    st.step = r.i64();
    st.loss_accum = r.f64();
    st.loss_count = r.i64();
    r.expect_end();
    if (st.opt.m.size() != st.model.params.values.size() || st.ema.shadow.size() != st.model.params.values.size())
        throw IoError("checkpoint: state sizes in '" + path + "' are inconsistent");
    st.history.clear();
}

inline void save_distill_checkpoint(const std::string& path, const DistillState& st, const Rng& rng) {
    ByteWriter progress;
    progress.i64(st.step);
    progress.f64(st.last_aux_loss);
    progress.f64(st.last_student_loss);
    std::vector<std::pair<std::string, std::string>> sections{
        {"meta", encode_meta("distill")},
        {"teacher", encode_model(st.teacher)},
        {"model", encode_model(st.student)},
        {"aux", encode_model(st.aux)},
        {"opt", encode_optim(st.student_opt)},
        {"aux_opt", encode_optim(st.aux_opt)},
        {"ema", encode_ema(st.student_ema)},
        {"rng", encode_rng(rng)},
        {"progress", progress.buf},
    };
    write_checkpoint_file(path, sections);
}

// Any checkpoint kind exposes a sampling-ready model: the trained model for
// `train` checkpoints, the distilled student for `distill` checkpoints.
struct LoadedModel {
    std::string kind;
    DualRateModel model;
    EmaState ema;
};

inline LoadedModel load_model_for_sampling(const std::string& path) {
    auto sections = read_checkpoint_file(path);
    LoadedModel out;
    out.kind = decode_meta(require_section(sections, "meta"));
    if (out.kind != "train" && out.kind != "distill")
        throw IoError("checkpoint: '" + path + "' has unknown kind '" + out.kind + "'");
    out.model = decode_model(require_section(sections, "model"));
    out.ema = decode_ema(require_section(sections, "ema"));
    if (out.ema.shadow.size() != out.model.params.values.size())
        throw IoError("checkpoint: EMA size in '" + path + "' does not match the model");
    return out;
}

}  // namespace dualrate
