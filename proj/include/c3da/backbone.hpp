#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "c3da/checkpoint.hpp"
#include "c3da/common.hpp"
#include "c3da/tape.hpp"
#include "c3da/tokenizer.hpp"

namespace c3da {

struct TinyTransformerConfig {
    int d_model{64};
    int heads{4};
    int encoder_layers{2};
    int decoder_layers{2};
    int ffn_dim{128};
    int max_seq_len{64};

    void validate() const {
        if (d_model < 1 || heads < 1 || encoder_layers < 1 || decoder_layers < 1 ||
            ffn_dim < 1 || max_seq_len < 1)
            throw ConfigError("transformer config: all counts must be >= 1");
        if (d_model % heads != 0)
            throw ConfigError("transformer config: d_model must divide by heads");
    }
};

enum class AdapterMethod { Full, None, Prompt, Prefix, Lora };

inline const char* adapter_method_name(AdapterMethod m) {
    switch (m) {
        case AdapterMethod::Full: return "full";
        case AdapterMethod::None: return "none";
        case AdapterMethod::Prompt: return "prompt";
        case AdapterMethod::Prefix: return "prefix";
        case AdapterMethod::Lora: return "lora";
    }
    throw ConfigError("bad adapter method");
}

inline AdapterMethod adapter_method_from_string(const std::string& s) {
    if (s == "full") return AdapterMethod::Full;
    if (s == "none") return AdapterMethod::None;
    if (s == "prompt") return AdapterMethod::Prompt;
    if (s == "prefix") return AdapterMethod::Prefix;
    if (s == "lora") return AdapterMethod::Lora;
    throw ConfigError("unknown adapter method: '" + s + "'");
}

struct AdapterConfig {
    AdapterMethod method{AdapterMethod::Lora};
    int prompt_length{100};
    int prefix_length{6};
    int lora_rank{8};
    double lora_dropout{0.0};

    void validate() const {
        if (method == AdapterMethod::Prompt && prompt_length < 1)
            throw ConfigError("prompt_length must be >= 1");
        if (method == AdapterMethod::Prefix && prefix_length < 1)
            throw ConfigError("prefix_length must be >= 1");
        if (method == AdapterMethod::Lora) {
            if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
            if (lora_dropout < 0.0 || lora_dropout >= 1.0)
                throw ConfigError("lora_dropout must be in [0, 1)");
        }
    }
};

// Learnable add-on tensors. Names carry the "adapter." prefix so they can
// never collide with backbone tensor names. method=none keeps this empty and
// method=full holds nothing either (full-tuning trains the backbone store).
struct AdapterState {
    AdapterConfig config;
    ParamStore params;
};

struct DecodeConfig {
    enum class Mode { Greedy, TopK };
    Mode mode{Mode::Greedy};
    int top_k{10};
    std::uint64_t seed{0};
    int max_len{24};
};

struct GenerationResult {
    std::vector<int> tokens;
    bool truncated{false};  // hit max_len before <eos>
};

// Sinusoidal position encoding, computed on demand for any length.
inline Matrix sinusoidal_positions(int length, int d_model, int offset = 0) {
    Matrix pe(length, d_model);
    for (int pos = 0; pos < length; ++pos) {
        for (int i = 0; i < d_model; i += 2) {
            const double angle =
                (pos + offset) / std::pow(10000.0, static_cast<double>(i) / d_model);
            pe(pos, i) = std::sin(angle);
            if (i + 1 < d_model) pe(pos, i + 1) = std::cos(angle);
        }
    }
    return pe;
}

// Abstract surfaces. Real pretrained backbones plug in behind these; the
// built-in tiny transformer implements both for desk-scale verification.
class Seq2SeqBackbone {
public:
    virtual ~Seq2SeqBackbone() = default;
    virtual int vocab_size() const = 0;
    virtual int d_model() const = 0;
    virtual int encoder_layer_count() const = 0;
    virtual int decoder_layer_count() const = 0;
    virtual const ParamStore& parameters() const = 0;
    virtual ParamStore& parameters() = 0;
    virtual Matrix encode(std::span<const int> tokens) const = 0;
    virtual RowVector decode_step(const Matrix& memory,
                                  std::span<const int> prefix) const = 0;
    virtual double nll_loss(std::span<const int> source,
                            std::span<const int> target) const = 0;
    virtual GenerationResult generate(std::span<const int> source,
                                      const DecodeConfig& decode) const = 0;
};

class SentenceEncoder {
public:
    virtual ~SentenceEncoder() = default;
    virtual int width() const = 0;
    virtual double dropout_rate() const = 0;
    // Per-token embeddings, (L, width) for an input of length L. Eval mode.
    virtual Matrix embed_tokens(std::span<const int> tokens) const = 0;
};

class TinyTransformer;

// One forward pass: builds the computation graph over a fresh tape, with the
// adapter transformation applied when an AdapterState is supplied. The
// `trainable` predicate decides which parameter tensors get gradients.
class Forward {
public:
    struct Options {
        const AdapterState* adapter{nullptr};
        std::function<bool(const std::string&)> trainable;  // default: none
        double embed_dropout{0.0};
        std::mt19937_64* rng{nullptr};
    };

    Forward(const TinyTransformer& model, Options opts);

    Tape& tape() { return tape_; }

    // Encoder stack output, ((prepend + L), d). `prepend_rows()` tells how
    // many leading rows are soft-prompt rows rather than token rows.
    Tape::Var encode(std::span<const int> tokens);
    int prepend_rows() const { return prepend_rows_; }

    // Decoder stack output for teacher-forced input tokens, (T, d).
    Tape::Var decode(Tape::Var memory, std::span<const int> decoder_input);

    Tape::Var logits(Tape::Var states);

    // Mean per-token teacher-forced cross-entropy of `target` given `source`
    // (scalar var). Target excludes specials; the terminal <eos> is scored.
    Tape::Var nll(std::span<const int> source, std::span<const int> target);

    Tape::Var param(const std::string& name);

    // Gradient read-back after tape().backward(); zero matrix if the tensor
    // never entered this graph.
    Matrix grad_of(const std::string& name) const;
    const std::map<std::string, Tape::Var>& param_vars() const { return param_vars_; }

private:
    Tape::Var attention(Tape::Var query_input, Tape::Var kv_input,
                        const std::string& scope, bool causal,
                        const std::string& prefix_scope);
    Tape::Var ffn_block(Tape::Var x, const std::string& scope);
    Tape::Var maybe_lora(Tape::Var input, Tape::Var projected,
                         const std::string& target_name);

    const TinyTransformer& model_;
    Options opts_;
    Tape tape_;
    std::map<std::string, Tape::Var> param_vars_;
    int prepend_rows_{0};
};

// Minimal encoder-decoder transformer: pre-LN blocks, fixed sinusoidal
// positions, GELU feed-forward, untied LM head. Double precision throughout
// so finite-difference gradient checks are meaningful.
class TinyTransformer : public Seq2SeqBackbone {
public:
    TinyTransformer(TinyTransformerConfig cfg, int vocab_size, std::uint64_t seed)
        : cfg_(cfg), vocab_size_(vocab_size) {
        cfg_.validate();
        if (vocab_size < Vocab::kUnk + 1)
            throw ConfigError("vocab too small for special tokens");
        auto rng = make_rng(seed, "tiny-transformer-init");
        init_params(rng);
    }

    const TinyTransformerConfig& config() const { return cfg_; }
    int vocab_size() const override { return vocab_size_; }
    int d_model() const override { return cfg_.d_model; }
    int encoder_layer_count() const override { return cfg_.encoder_layers; }
    int decoder_layer_count() const override { return cfg_.decoder_layers; }
    ParamStore& parameters() override { return params_; }
    const ParamStore& parameters() const override { return params_; }

    // Exact parameter total implied by the architecture; the inventory test
    // checks the store against this.
    static std::int64_t expected_param_count(const TinyTransformerConfig& c,
                                             int vocab_size) {
        const std::int64_t d = c.d_model, f = c.ffn_dim, v = vocab_size;
        const std::int64_t enc_layer = 4 * d * d + 2 * d + 2 * d + (d * f + f) + (f * d + d);
        const std::int64_t dec_layer = 8 * d * d + 6 * d + (d * f + f) + (f * d + d);
        return v * d                                 // tok_embed
               + c.encoder_layers * enc_layer + 2 * d  // encoder + final LN
               + c.decoder_layers * dec_layer + 2 * d  // decoder + final LN
               + d * v + v;                            // lm head
    }

    Matrix encode(std::span<const int> tokens) const override {
        check_len(tokens.size(), "source");
        Forward f(*this, {});
        auto memory = f.encode(tokens);
        return f.tape().value(memory);
    }

    RowVector decode_step(const Matrix& memory,
                          std::span<const int> prefix) const override {
        Forward f(*this, {});
        auto mem = f.tape().constant(memory);
        std::vector<int> input;
        input.push_back(Vocab::kBos);
        input.insert(input.end(), prefix.begin(), prefix.end());
        auto states = f.decode(mem, input);
        auto lg = f.logits(states);
        return f.tape().value(lg).row(f.tape().value(lg).rows() - 1);
    }

    double nll_loss(std::span<const int> source,
                    std::span<const int> target) const override {
        Forward f(*this, {});
        return f.tape().scalar(f.nll(source, target));
    }

    GenerationResult generate(std::span<const int> source,
                              const DecodeConfig& decode) const override {
        return generate_adapted(source, decode, nullptr);
    }

    // Shared implementation for the raw backbone and adapted handles.
    GenerationResult generate_adapted(std::span<const int> source,
                                      const DecodeConfig& decode,
                                      const AdapterState* adapter) const {
        check_len(source.size(), "source");
        Forward::Options opts;
        opts.adapter = adapter;
        Forward enc(*this, opts);
        const Matrix memory = enc.tape().value(enc.encode(source));

        auto rng = make_rng(decode.seed, "decode-top-k");
        GenerationResult result;
        result.truncated = true;
        while (static_cast<int>(result.tokens.size()) < decode.max_len) {
            Forward step(*this, opts);
            auto mem = step.tape().constant(memory);
            std::vector<int> input;
            input.push_back(Vocab::kBos);
            input.insert(input.end(), result.tokens.begin(), result.tokens.end());
            auto states = step.decode(mem, input);
            auto lg = step.logits(states);
            const Matrix& z = step.tape().value(lg);
            const RowVector row = z.row(z.rows() - 1);
            const int next = pick_token(row, decode, rng);
            if (next == Vocab::kEos) {
                result.truncated = false;
                break;
            }
            result.tokens.push_back(next);
        }
        return result;
    }

    static int pick_token(const RowVector& logits, const DecodeConfig& decode,
                          std::mt19937_64& rng) {
        if (decode.mode == DecodeConfig::Mode::Greedy) {
            Eigen::Index best = 0;
            logits.maxCoeff(&best);
            return static_cast<int>(best);
        }
        const int k = std::max(1, std::min<int>(decode.top_k,
                                                static_cast<int>(logits.size())));
        std::vector<int> order(logits.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [&](int a, int b) { return logits(a) > logits(b); });
        std::vector<double> probs(k);
        const double mx = logits(order[0]);
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            probs[i] = std::exp(logits(order[i]) - mx);
            sum += probs[i];
        }
        std::uniform_real_distribution<double> u(0.0, sum);
        double r = u(rng);
        for (int i = 0; i < k; ++i) {
            r -= probs[i];
            if (r <= 0.0) return order[i];
        }
        return order[k - 1];
    }

private:
    void check_len(std::size_t n, const char* what) const {
        if (n == 0) throw LengthError(std::string(what) + " sequence is empty");
        if (n > static_cast<std::size_t>(cfg_.max_seq_len))
            throw LengthError(std::string(what) + " sequence exceeds max length");
    }

    void init_params(std::mt19937_64& rng) {
        const int d = cfg_.d_model, f = cfg_.ffn_dim, v = vocab_size_;
        std::normal_distribution<double> w(0.0, 0.08);
        std::normal_distribution<double> e(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
        // The LM head needs 1/sqrt(d) scale: final-LN rows have norm sqrt(d),
        // and logit margins large enough for confident predictions must be
        // reachable by rotating those rows, not by growing them.
        std::normal_distribution<double> hd(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
        const auto randn = [&](int r, int c, std::normal_distribution<double>& dist) {
            Matrix m(r, c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) m(i, j) = dist(rng);
            return m;
        };
        const auto add_ln = [&](const std::string& scope) {
            params_.add(scope + ".g", Matrix::Ones(1, d));
            params_.add(scope + ".b", Matrix::Zero(1, d));
        };
        const auto add_attn = [&](const std::string& scope) {
            for (const char* nm : {"wq", "wk", "wv", "wo"})
                params_.add(scope + "." + nm, randn(d, d, w));
        };
        const auto add_ffn = [&](const std::string& scope) {
            params_.add(scope + ".w1", randn(d, f, w));
            params_.add(scope + ".b1", Matrix::Zero(1, f));
            params_.add(scope + ".w2", randn(f, d, w));
            params_.add(scope + ".b2", Matrix::Zero(1, d));
        };

        params_.add("tok_embed", randn(v, d, e));
        for (int i = 0; i < cfg_.encoder_layers; ++i) {
            const std::string s = "enc." + std::to_string(i);
            add_ln(s + ".ln1");
            add_attn(s + ".attn");
            add_ln(s + ".ln2");
            add_ffn(s + ".ffn");
        }
        add_ln("enc.ln_f");
        for (int i = 0; i < cfg_.decoder_layers; ++i) {
            const std::string s = "dec." + std::to_string(i);
            add_ln(s + ".ln1");
            add_attn(s + ".self");
            add_ln(s + ".ln2");
            add_attn(s + ".cross");
            add_ln(s + ".ln3");
            add_ffn(s + ".ffn");
        }
        add_ln("dec.ln_f");
        params_.add("lm_head.w", randn(d, v, hd));
        params_.add("lm_head.b", Matrix::Zero(1, v));
    }

    TinyTransformerConfig cfg_;
    int vocab_size_;
    ParamStore params_;

    friend class Forward;
};

inline Forward::Forward(const TinyTransformer& model, Options opts)
    : model_(model), opts_(std::move(opts)) {
    if (!opts_.trainable) opts_.trainable = [](const std::string&) { return false; };
}

inline Tape::Var Forward::param(const std::string& name) {
    auto it = param_vars_.find(name);
    if (it != param_vars_.end()) return it->second;
    const bool is_adapter = name.rfind("adapter.", 0) == 0;
    const Matrix& value = is_adapter ? opts_.adapter->params.at(name)
                                     : model_.params_.at(name);
    const Tape::Var v = tape_.leaf(value, opts_.trainable(name));
    param_vars_.emplace(name, v);
    return v;
}

inline Matrix Forward::grad_of(const std::string& name) const {
    auto it = param_vars_.find(name);
    if (it == param_vars_.end()) return Matrix();
    return tape_.grad(it->second);
}

inline Tape::Var Forward::maybe_lora(Tape::Var input, Tape::Var projected,
                                     const std::string& target_name) {
    if (!opts_.adapter || opts_.adapter->config.method != AdapterMethod::Lora)
        return projected;
    const std::string base = "adapter.lora." + target_name;
    if (!opts_.adapter->params.contains(base + ".a")) return projected;
    Tape::Var x = input;
    const double rate = opts_.adapter->config.lora_dropout;
    if (rate > 0.0 && opts_.rng) x = tape_.dropout(x, rate, *opts_.rng);
    // delta = x A^T B^T with A (r x d_in) random, B (d_out x r) zero at init.
    auto down = tape_.matmul_nt(x, param(base + ".a"));
    auto up = tape_.matmul_nt(down, param(base + ".b"));
    return tape_.add(projected, up);
}

inline Tape::Var Forward::attention(Tape::Var query_input, Tape::Var kv_input,
                                    const std::string& scope, bool causal,
                                    const std::string& prefix_scope) {
    const int d = model_.cfg_.d_model;
    const int heads = model_.cfg_.heads;
    const int dh = d / heads;

    auto q = maybe_lora(query_input, tape_.matmul(query_input, param(scope + ".wq")),
                        scope + ".wq");
    auto k = tape_.matmul(kv_input, param(scope + ".wk"));
    auto v = maybe_lora(kv_input, tape_.matmul(kv_input, param(scope + ".wv")),
                        scope + ".wv");

    int prefix_len = 0;
    if (!prefix_scope.empty() && opts_.adapter &&
        opts_.adapter->config.method == AdapterMethod::Prefix) {
        prefix_len = opts_.adapter->config.prefix_length;
        k = tape_.concat_rows({param("adapter.prefix." + prefix_scope + ".k"), k});
        v = tape_.concat_rows({param("adapter.prefix." + prefix_scope + ".v"), v});
    }

    const Eigen::Index lq = tape_.value(q).rows();
    const Eigen::Index lk = tape_.value(k).rows();
    std::optional<Tape::Var> mask;
    if (causal) {
        Matrix m = Matrix::Zero(lq, lk);
        for (Eigen::Index i = 0; i < lq; ++i)
            for (Eigen::Index j = prefix_len; j < lk; ++j)
                if (j - prefix_len > i) m(i, j) = -1e30;
        mask = tape_.constant(std::move(m));
    }

    std::vector<Tape::Var> head_outputs;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        auto qh = tape_.slice_cols(q, h * dh, dh);
        auto kh = tape_.slice_cols(k, h * dh, dh);
        auto vh = tape_.slice_cols(v, h * dh, dh);
        auto scores = tape_.scale(tape_.matmul_nt(qh, kh), inv_sqrt);
        if (mask) scores = tape_.add(scores, *mask);
        auto attn = tape_.softmax_rows(scores);
        head_outputs.push_back(tape_.matmul(attn, vh));
    }
    auto ctx = tape_.concat_cols(head_outputs);
    return tape_.matmul(ctx, param(scope + ".wo"));
}

inline Tape::Var Forward::ffn_block(Tape::Var x, const std::string& scope) {
    auto h = tape_.add_rowvec(tape_.matmul(x, param(scope + ".w1")), param(scope + ".b1"));
    h = tape_.gelu(h);
    return tape_.add_rowvec(tape_.matmul(h, param(scope + ".w2")), param(scope + ".b2"));
}

inline Tape::Var Forward::encode(std::span<const int> tokens) {
    const int d = model_.cfg_.d_model;
    auto x = tape_.gather_rows(param("tok_embed"),
                               std::vector<int>(tokens.begin(), tokens.end()));
    x = tape_.scale(x, std::sqrt(static_cast<double>(d)));

    prepend_rows_ = 0;
    if (opts_.adapter && opts_.adapter->config.method == AdapterMethod::Prompt) {
        prepend_rows_ = opts_.adapter->config.prompt_length;
        x = tape_.concat_rows({param("adapter.prompt.embed"), x});
    }
    const Eigen::Index len = tape_.value(x).rows();
    x = tape_.add(x, tape_.constant(sinusoidal_positions(static_cast<int>(len), d)));
    if (opts_.embed_dropout > 0.0 && opts_.rng)
        x = tape_.dropout(x, opts_.embed_dropout, *opts_.rng);

    for (int i = 0; i < model_.cfg_.encoder_layers; ++i) {
        const std::string s = "enc." + std::to_string(i);
        auto normed = tape_.layer_norm(x, param(s + ".ln1.g"), param(s + ".ln1.b"));
        x = tape_.add(x, attention(normed, normed, s + ".attn", false,
                                   "enc." + std::to_string(i)));
        auto normed2 = tape_.layer_norm(x, param(s + ".ln2.g"), param(s + ".ln2.b"));
        x = tape_.add(x, ffn_block(normed2, s + ".ffn"));
    }
    return tape_.layer_norm(x, param("enc.ln_f.g"), param("enc.ln_f.b"));
}

inline Tape::Var Forward::decode(Tape::Var memory, std::span<const int> decoder_input) {
    const int d = model_.cfg_.d_model;
    auto x = tape_.gather_rows(param("tok_embed"),
                               std::vector<int>(decoder_input.begin(), decoder_input.end()));
    x = tape_.scale(x, std::sqrt(static_cast<double>(d)));
    const Eigen::Index len = tape_.value(x).rows();
    x = tape_.add(x, tape_.constant(sinusoidal_positions(static_cast<int>(len), d)));

    for (int i = 0; i < model_.cfg_.decoder_layers; ++i) {
        const std::string s = "dec." + std::to_string(i);
        auto n1 = tape_.layer_norm(x, param(s + ".ln1.g"), param(s + ".ln1.b"));
        x = tape_.add(x, attention(n1, n1, s + ".self", true, "dec." + std::to_string(i)));
        auto n2 = tape_.layer_norm(x, param(s + ".ln2.g"), param(s + ".ln2.b"));
        x = tape_.add(x, attention(n2, memory, s + ".cross", false, ""));
        auto n3 = tape_.layer_norm(x, param(s + ".ln3.g"), param(s + ".ln3.b"));
        x = tape_.add(x, ffn_block(n3, s + ".ffn"));
    }
    return tape_.layer_norm(x, param("dec.ln_f.g"), param("dec.ln_f.b"));
}

inline Tape::Var Forward::logits(Tape::Var states) {
    return tape_.add_rowvec(tape_.matmul(states, param("lm_head.w")), param("lm_head.b"));
}

inline Tape::Var Forward::nll(std::span<const int> source, std::span<const int> target) {
    const auto max_len = static_cast<std::size_t>(model_.cfg_.max_seq_len);
    if (source.empty()) throw LengthError("source sequence is empty");
    if (target.empty()) throw LengthError("target sequence is empty");
    if (source.size() > max_len || target.size() + 1 > max_len)
        throw LengthError("sequence exceeds max length");

    auto memory = encode(source);
    std::vector<int> input;
    input.push_back(Vocab::kBos);
    input.insert(input.end(), target.begin(), target.end());
    std::vector<int> expected(target.begin(), target.end());
    expected.push_back(Vocab::kEos);
    auto states = decode(memory, input);
    return tape_.cross_entropy_mean(logits(states), std::move(expected));
}

}  // namespace c3da
