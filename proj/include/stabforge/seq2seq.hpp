#pragma once

// Pre-norm Transformer encoder-decoder over word tokens.
//
// Batches are ragged: the source rows of every example are stacked into one matrix and
// attention is restricted to each example's own segment, so no padding is materialized.
// Pad tokens that do appear inside a source are masked as attention keys.

#include "stabforge/autodiff.hpp"
#include "stabforge/corpus.hpp"
#include "stabforge/error.hpp"
#include "stabforge/rng.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace stabforge {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 2;
    std::size_t ffn_dim = 128;
    std::size_t n_enc_layers = 2;
    std::size_t n_dec_layers = 2;
    std::size_t max_src_len = 96;
    std::size_t max_tgt_len = 16;
    double dropout = 0.1;
    std::uint64_t init_seed = 0;
    std::string vocab_hash;

    void validate() const {
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw ConfigError("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
        if (n_enc_layers < 1 || n_dec_layers < 1) throw ConfigError("model: layer counts must be at least 1");
        if (ffn_dim == 0 || max_src_len == 0 || max_tgt_len == 0) throw ConfigError("model: sizes must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"d_model", c.d_model}, {"n_heads", c.n_heads}, {"ffn_dim", c.ffn_dim}, {"n_enc_layers", c.n_enc_layers},
            {"n_dec_layers", c.n_dec_layers}, {"max_src_len", c.max_src_len}, {"max_tgt_len", c.max_tgt_len},
            {"dropout", c.dropout}, {"init_seed", c.init_seed}, {"vocab_hash", c.vocab_hash}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.ffn_dim = j.at("ffn_dim");
    c.n_enc_layers = j.at("n_enc_layers");
    c.n_dec_layers = j.at("n_dec_layers");
    c.max_src_len = j.at("max_src_len");
    c.max_tgt_len = j.at("max_tgt_len");
    c.dropout = j.at("dropout");
    c.init_seed = j.at("init_seed");
    c.vocab_hash = j.at("vocab_hash");
    return c;
}

/// A training pair: source tokens and target tokens without bos/eos.
struct Example {
    std::vector<std::int32_t> src;
    std::vector<std::int32_t> tgt;
};

inline Example to_example(const CodeSample& s) { return {s.source_tokens, s.target_tokens}; }

inline std::vector<Example> to_examples(std::span<const CodeSample> samples) {
    std::vector<Example> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(to_example(s));
    return out;
}

class Seq2Seq {
public:
    struct Param {
        std::string name;
        ad::Tensor tensor;
    };

    Seq2Seq() = default;

    Seq2Seq(ModelConfig config, std::size_t vocab_size) : config_(std::move(config)), vocab_size_(vocab_size) {
        config_.validate();
        if (vocab_size_ < 5) throw ConfigError("model: vocabulary too small");
        Rng rng(derive_seed(config_.init_seed, "model-init"));
        const std::size_t d = config_.d_model, f = config_.ffn_dim;
        auto normal = [&](const std::string& name, ad::Shape s, double std) {
            std::vector<double> v(s.size());
            for (auto& x : v) x = std * standard_normal(rng);
            add(name, ad::Tensor::from(s, std::move(v), true));
        };
        auto constant = [&](const std::string& name, ad::Shape s, double value) {
            add(name, ad::Tensor::from(s, std::vector<double>(s.size(), value), true));
        };
        auto attention_block = [&](const std::string& p) {
            for (const char* w : {"wq", "wk", "wv", "wo"}) {
                normal(p + "." + w, {d, d}, 1.0 / std::sqrt(double(d)));
                constant(p + ".b" + std::string(w + 1), {1, d}, 0.0);
            }
        };
        auto norm = [&](const std::string& p) {
            constant(p + ".g", {1, d}, 1.0);
            constant(p + ".b", {1, d}, 0.0);
        };
        auto ffn = [&](const std::string& p) {
            normal(p + ".w1", {d, f}, 1.0 / std::sqrt(double(d)));
            constant(p + ".b1", {1, f}, 0.0);
            normal(p + ".w2", {f, d}, 1.0 / std::sqrt(double(f)));
            constant(p + ".b2", {1, d}, 0.0);
        };
        normal("embed", {vocab_size_, d}, 1.0 / std::sqrt(double(d)));
        for (std::size_t l = 0; l < config_.n_enc_layers; ++l) {
            const std::string p = "enc." + std::to_string(l);
            norm(p + ".ln1");
            attention_block(p + ".self");
            norm(p + ".ln2");
            ffn(p + ".ffn");
        }
        norm("enc.ln");
        for (std::size_t l = 0; l < config_.n_dec_layers; ++l) {
            const std::string p = "dec." + std::to_string(l);
            norm(p + ".ln1");
            attention_block(p + ".self");
            norm(p + ".ln2");
            attention_block(p + ".cross");
            norm(p + ".ln3");
            ffn(p + ".ffn");
        }
        norm("dec.ln");
        normal("out.w", {d, vocab_size_}, 0.5 / std::sqrt(double(d)));
        constant("out.b", {1, vocab_size_}, 0.0);

        const std::size_t max_len = std::max(config_.max_src_len, config_.max_tgt_len + 1);
        positions_.assign(max_len * d, 0.0);
        for (std::size_t pos = 0; pos < max_len; ++pos)
            for (std::size_t i = 0; i < d; i += 2) {
                const double angle = double(pos) / std::pow(10000.0, double(i) / double(d));
                positions_[pos * d + i] = std::sin(angle);
                if (i + 1 < d) positions_[pos * d + i + 1] = std::cos(angle);
            }
    }

    const ModelConfig& config() const noexcept { return config_; }
    std::size_t vocab_size() const noexcept { return vocab_size_; }

    std::vector<Param>& named_parameters() noexcept { return params_; }
    const std::vector<Param>& named_parameters() const noexcept { return params_; }

    std::vector<ad::Tensor*> parameters() {
        std::vector<ad::Tensor*> out;
        for (auto& p : params_) out.push_back(&p.tensor);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    const ad::Tensor& param(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("model: no parameter named " + name);
        return params_[it->second].tensor;
    }

    /// Frozen parameters record no gradients (trigger search, evaluation).
    void set_trainable(bool on) {
        for (auto& p : params_) p.tensor.set_requires_grad(on);
    }

    Seq2Seq clone() const {
        Seq2Seq m = *this;
        for (auto& p : m.params_) {
            const bool g = p.tensor.requires_grad();
            p.tensor = p.tensor.detach();
            p.tensor.set_requires_grad(g);
        }
        return m;
    }

    /// Teacher-forced logits [tgt_in.size() x |V|] for one example.
    ad::Tensor forward_tokens(std::span<const std::int32_t> src, std::span<const std::int32_t> tgt_in) const {
        check_src(src.size());
        const std::vector<ad::Segment> segs{{0, src.size()}};
        const auto embedded = embed_batch(src, segs, nullptr);
        std::vector<unsigned char> valid(src.size());
        for (std::size_t i = 0; i < src.size(); ++i) valid[i] = src[i] != Vocabulary::kPad;
        return run({{0, src.size()}}, embedded, std::move(valid), {std::vector<std::int32_t>(tgt_in.begin(), tgt_in.end())}, nullptr);
    }

    /// Same as forward_tokens with source embeddings taken as weights [L x |V|] times the table.
    ad::Tensor forward_soft(const ad::Tensor& soft_src, std::span<const std::int32_t> tgt_in) const {
        check_src(soft_src.rows());
        if (soft_src.cols() != vocab_size_)
            throw ShapeError("forward_soft: shape mismatch " + soft_src.shape().str() + " vs [" + std::to_string(soft_src.rows()) +
                             "x" + std::to_string(vocab_size_) + "]");
        for (std::size_t r = 0; r < soft_src.rows(); ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < soft_src.cols(); ++c) total += soft_src.at(r, c);
            if (std::abs(total - 1.0) > 1e-6)
                throw ShapeError("forward_soft: row " + std::to_string(r) + " sums to " + std::to_string(total));
        }
        auto e = ad::scale(ad::embedding_mix(soft_src, param("embed")), std::sqrt(double(config_.d_model)));
        e = ad::add_constant(e, std::span<const double>(positions_.data(), soft_src.rows() * config_.d_model));
        return run({{0, soft_src.rows()}}, e, std::vector<unsigned char>(soft_src.rows(), 1),
                   {std::vector<std::int32_t>(tgt_in.begin(), tgt_in.end())}, nullptr);
    }

    /// Mean token cross-entropy of a batch under teacher forcing. Dropout applies when `rng` is set.
    ad::Tensor loss(std::span<const Example> batch, Rng* rng = nullptr) const {
        if (batch.empty()) throw ConfigError("loss: empty batch");
        std::vector<ad::Segment> segs;
        std::vector<std::int32_t> ids;
        std::vector<std::vector<std::int32_t>> tgt_in;
        std::vector<std::int32_t> tgt_out;
        for (const auto& ex : batch) {
            check_src(ex.src.size());
            if (ex.tgt.size() + 1 > config_.max_tgt_len + 1 || ex.tgt.empty())
                throw ConfigError("loss: target length " + std::to_string(ex.tgt.size()) + " outside [1, " +
                                  std::to_string(config_.max_tgt_len) + "]");
            segs.push_back({ids.size(), ex.src.size()});
            ids.insert(ids.end(), ex.src.begin(), ex.src.end());
            std::vector<std::int32_t> in{Vocabulary::kBos};
            in.insert(in.end(), ex.tgt.begin(), ex.tgt.end());
            tgt_in.push_back(std::move(in));
            tgt_out.insert(tgt_out.end(), ex.tgt.begin(), ex.tgt.end());
            tgt_out.push_back(Vocabulary::kEos);
        }
        auto embedded = embed_batch(ids, segs, rng);
        std::vector<unsigned char> valid(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != Vocabulary::kPad;
        auto logits = run(segs, embedded, std::move(valid), tgt_in, rng);
        return ad::cross_entropy(logits, tgt_out, Vocabulary::kPad);
    }

    /// Argmax decoding from bos until eos or `max_len` tokens; the returned sequences exclude bos/eos.
    std::vector<std::vector<std::int32_t>> greedy_decode(const std::vector<std::vector<std::int32_t>>& srcs,
                                                         std::size_t max_len = 0) const {
        if (max_len == 0) max_len = config_.max_tgt_len;
        max_len = std::min(max_len, config_.max_tgt_len);
        std::vector<std::vector<std::int32_t>> out(srcs.size());
        if (srcs.empty()) return out;
        ad::NoGradGuard guard;
        std::vector<ad::Segment> segs;
        std::vector<std::int32_t> ids;
        for (const auto& s : srcs) {
            check_src(s.size());
            segs.push_back({ids.size(), s.size()});
            ids.insert(ids.end(), s.begin(), s.end());
        }
        std::vector<unsigned char> valid(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != Vocabulary::kPad;
        const auto memory = encode(segs, embed_batch(ids, segs, nullptr), valid, nullptr);

        std::vector<std::size_t> active(srcs.size());
        std::iota(active.begin(), active.end(), 0);
        std::vector<std::vector<std::int32_t>> prefix(srcs.size(), std::vector<std::int32_t>{Vocabulary::kBos});
        for (std::size_t step = 0; step < max_len && !active.empty(); ++step) {
            // Gather the memory rows of active examples.
            std::vector<ad::Segment> asegs;
            std::vector<double> mem;
            std::vector<unsigned char> avalid;
            std::vector<std::vector<std::int32_t>> tgts;
            const std::size_t d = config_.d_model;
            for (auto i : active) {
                asegs.push_back({avalid.size(), segs[i].length});
                mem.insert(mem.end(), memory.values().begin() + std::ptrdiff_t(segs[i].offset * d),
                           memory.values().begin() + std::ptrdiff_t((segs[i].offset + segs[i].length) * d));
                avalid.insert(avalid.end(), valid.begin() + std::ptrdiff_t(segs[i].offset),
                              valid.begin() + std::ptrdiff_t(segs[i].offset + segs[i].length));
                tgts.push_back(prefix[i]);
            }
            const auto logits = decode(ad::Tensor::from({avalid.size(), d}, std::move(mem)), asegs, avalid, tgts, nullptr);
            std::vector<std::size_t> still;
            std::size_t row = 0;
            for (std::size_t k = 0; k < active.size(); ++k) {
                row += tgts[k].size();
                const double* r = logits.values().data() + (row - 1) * vocab_size_;
                const auto best = std::int32_t(std::max_element(r, r + vocab_size_) - r);
                const auto i = active[k];
                if (best == Vocabulary::kEos) continue;
                out[i].push_back(best);
                prefix[i].push_back(best);
                still.push_back(i);
            }
            active = std::move(still);
        }
        return out;
    }

    std::vector<std::int32_t> greedy_decode(std::span<const std::int32_t> src, std::size_t max_len = 0) const {
        return greedy_decode(std::vector<std::vector<std::int32_t>>{std::vector<std::int32_t>(src.begin(), src.end())}, max_len)[0];
    }

    /// Mean-pooled final encoder states, one row per source.
    ad::RowMatrix encoder_means(const std::vector<std::vector<std::int32_t>>& srcs) const {
        ad::NoGradGuard guard;
        std::vector<ad::Segment> segs;
        std::vector<std::int32_t> ids;
        for (const auto& s : srcs) {
            check_src(s.size());
            segs.push_back({ids.size(), s.size()});
            ids.insert(ids.end(), s.begin(), s.end());
        }
        std::vector<unsigned char> valid(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != Vocabulary::kPad;
        const auto memory = encode(segs, embed_batch(ids, segs, nullptr), valid, nullptr);
        const auto pooled = ad::segment_mean(memory, segs, valid);
        return pooled.matrix();
    }

private:
    ModelConfig config_;
    std::size_t vocab_size_ = 0;
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<double> positions_;

    void add(const std::string& name, ad::Tensor t) {
        index_[name] = params_.size();
        params_.push_back({name, std::move(t)});
    }

    void check_src(std::size_t len) const {
        if (len == 0) throw ConfigError("model: empty source");
        if (len > config_.max_src_len)
            throw ConfigError("model: source length " + std::to_string(len) + " exceeds max_src_len " + std::to_string(config_.max_src_len));
    }

    ad::Tensor embed_batch(std::span<const std::int32_t> ids, std::span<const ad::Segment> segs, Rng* rng) const {
        const std::size_t d = config_.d_model;
        auto e = ad::scale(ad::embedding_gather(param("embed"), ids), std::sqrt(double(d)));
        std::vector<double> pe(ids.size() * d);
        for (const auto& s : segs)
            std::copy_n(positions_.data(), s.length * d, pe.data() + s.offset * d);
        e = ad::add_constant(e, pe);
        if (rng) e = ad::dropout(e, config_.dropout, *rng);
        return e;
    }

    ad::Tensor linear(const ad::Tensor& x, const std::string& w, const std::string& b) const {
        return ad::add_row(ad::matmul(x, param(w)), param(b));
    }

    ad::Tensor norm(const ad::Tensor& x, const std::string& p) const {
        return ad::layer_norm(x, param(p + ".g"), param(p + ".b"));
    }

    ad::Tensor mha(const ad::Tensor& xq, const ad::Tensor& xkv, const std::string& p, const ad::AttentionLayout& layout) const {
        auto q = linear(xq, p + ".wq", p + ".bq");
        auto k = linear(xkv, p + ".wk", p + ".bk");
        auto v = linear(xkv, p + ".wv", p + ".bv");
        return linear(ad::attention(q, k, v, layout), p + ".wo", p + ".bo");
    }

    ad::Tensor feed_forward(const ad::Tensor& x, const std::string& p) const {
        return linear(ad::relu(linear(x, p + ".w1", p + ".b1")), p + ".w2", p + ".b2");
    }

    ad::Tensor residual(const ad::Tensor& x, const ad::Tensor& y, Rng* rng) const {
        return ad::add(x, rng ? ad::dropout(y, config_.dropout, *rng) : y);
    }

    ad::Tensor encode(const std::vector<ad::Segment>& segs, ad::Tensor x, const std::vector<unsigned char>& valid, Rng* rng) const {
        ad::AttentionLayout self{segs, segs, config_.n_heads, false, valid};
        for (std::size_t l = 0; l < config_.n_enc_layers; ++l) {
            const std::string p = "enc." + std::to_string(l);
            const auto h = norm(x, p + ".ln1");
            x = residual(x, mha(h, h, p + ".self", self), rng);
            x = residual(x, feed_forward(norm(x, p + ".ln2"), p + ".ffn"), rng);
        }
        return norm(x, "enc.ln");
    }

    ad::Tensor decode(const ad::Tensor& memory, const std::vector<ad::Segment>& src_segs, const std::vector<unsigned char>& src_valid,
                      const std::vector<std::vector<std::int32_t>>& tgt_in, Rng* rng) const {
        std::vector<ad::Segment> tsegs;
        std::vector<std::int32_t> ids;
        for (const auto& t : tgt_in) {
            if (t.empty() || t.size() > config_.max_tgt_len + 1)
                throw ConfigError("model: target input length " + std::to_string(t.size()) + " outside [1, " +
                                  std::to_string(config_.max_tgt_len + 1) + "]");
            tsegs.push_back({ids.size(), t.size()});
            ids.insert(ids.end(), t.begin(), t.end());
        }
        auto y = embed_batch(ids, tsegs, rng);
        ad::AttentionLayout self{tsegs, tsegs, config_.n_heads, true, {}};
        ad::AttentionLayout cross{tsegs, src_segs, config_.n_heads, false, src_valid};
        for (std::size_t l = 0; l < config_.n_dec_layers; ++l) {
            const std::string p = "dec." + std::to_string(l);
            const auto h = norm(y, p + ".ln1");
            y = residual(y, mha(h, h, p + ".self", self), rng);
            y = residual(y, mha(norm(y, p + ".ln2"), memory, p + ".cross", cross), rng);
            y = residual(y, feed_forward(norm(y, p + ".ln3"), p + ".ffn"), rng);
        }
        return linear(norm(y, "dec.ln"), "out.w", "out.b");
    }

    ad::Tensor run(const std::vector<ad::Segment>& segs, const ad::Tensor& embedded, std::vector<unsigned char> valid,
                   const std::vector<std::vector<std::int32_t>>& tgt_in, Rng* rng) const {
        const auto memory = encode(segs, embedded, valid, rng);
        return decode(memory, segs, valid, tgt_in, rng);
    }
};

// ---------------------------------------------------------------------------
// Checkpoints: <path> holds little-endian float64 values, <path>.json the manifest.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_le_double(std::ostream& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

inline double read_le_double(const unsigned char* bytes) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(bytes[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

} // namespace detail

inline std::filesystem::path manifest_path(const std::filesystem::path& path) { return path.string() + ".json"; }

inline void save_checkpoint(const Seq2Seq& model, const Vocabulary& vocab, const std::filesystem::path& path,
                            const nlohmann::json& history = nlohmann::json::object()) {
    if (vocab.size() != model.vocab_size()) throw ConfigError("save_checkpoint: vocabulary does not match model");
    std::ofstream bin(path, std::ios::binary);
    if (!bin) throw Error("cannot write " + path.string());
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    for (const auto& p : model.named_parameters()) {
        for (double v : p.tensor.values()) detail::write_le_double(bin, v);
        params.push_back({{"name", p.name}, {"offset", offset}, {"shape", {p.tensor.rows(), p.tensor.cols()}}});
        offset += p.tensor.size();
    }
    ModelConfig cfg = model.config();
    cfg.vocab_hash = vocab.hash();
    nlohmann::ordered_json manifest;
    manifest["format"] = "stabforge-checkpoint";
    manifest["version"] = 1;
    manifest["config"] = to_json(cfg);
    manifest["vocab_hash"] = vocab.hash();
    manifest["vocab"] = vocab.to_json();
    manifest["total"] = offset;
    manifest["params"] = params;
    manifest["history"] = history;
    std::ofstream(manifest_path(path)) << manifest.dump(1) << '\n';
}

struct LoadedCheckpoint {
    Seq2Seq model;
    Vocabulary vocab;
    nlohmann::json history;
};

/// Loads a checkpoint; `expected_vocab_hash`, when given, must match the stored vocabulary.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::string> expected_vocab_hash = {}) {
    std::ifstream mf(manifest_path(path));
    if (!mf) throw CorruptionError("checkpoint manifest missing: " + manifest_path(path).string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("checkpoint manifest unreadable: ") + e.what());
    }
    Vocabulary vocab;
    ModelConfig cfg;
    try {
        vocab = Vocabulary::from_json(manifest.at("vocab"));
        cfg = model_config_from_json(manifest.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("checkpoint manifest incomplete: ") + e.what());
    }
    if (manifest.value("vocab_hash", "") != vocab.hash() || cfg.vocab_hash != vocab.hash())
        throw CorruptionError("checkpoint: vocabulary hash mismatch inside " + path.string());
    if (expected_vocab_hash && *expected_vocab_hash != vocab.hash())
        throw CorruptionError("checkpoint: vocabulary hash " + vocab.hash() + " does not match expected " + *expected_vocab_hash);

    std::ifstream bin(path, std::ios::binary);
    if (!bin) throw CorruptionError("checkpoint data missing: " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), {});
    const std::size_t total = manifest.at("total");
    if (bytes.size() != total * 8)
        throw CorruptionError("checkpoint: data holds " + std::to_string(bytes.size()) + " bytes, manifest expects " +
                              std::to_string(total * 8));

    Seq2Seq model(cfg, vocab.size());
    auto& params = model.named_parameters();
    const auto& entries = manifest.at("params");
    if (entries.size() != params.size()) throw CorruptionError("checkpoint: parameter count mismatch");
    std::size_t expected_offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = entries[i];
        const std::size_t offset = e.at("offset");
        const ad::Shape shape{e.at("shape")[0].get<std::size_t>(), e.at("shape")[1].get<std::size_t>()};
        if (e.at("name") != params[i].name || shape != params[i].tensor.shape() || offset != expected_offset)
            throw CorruptionError("checkpoint: manifest entry " + std::to_string(i) + " does not tile the parameter array");
        auto vals = params[i].tensor.mutable_values();
        for (std::size_t k = 0; k < vals.size(); ++k) vals[k] = detail::read_le_double(bytes.data() + (offset + k) * 8);
        expected_offset += shape.size();
    }
    if (expected_offset != total) throw CorruptionError("checkpoint: manifest offsets do not cover the array");
    return {std::move(model), std::move(vocab), manifest.value("history", nlohmann::json::object())};
}

} // namespace stabforge
