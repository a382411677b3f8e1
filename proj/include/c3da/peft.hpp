#pragma once

#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "c3da/backbone.hpp"
#include "c3da/checkpoint.hpp"
#include "c3da/optim.hpp"

namespace c3da {

// A backbone plus an attached parameter-efficient adapter. The backbone is
// referenced, never copied; only method=full is allowed to mutate it.
class AdaptedGenerator {
public:
    AdaptedGenerator(TinyTransformer& backbone, AdapterState state)
        : backbone_(&backbone), state_(std::move(state)) {}

    TinyTransformer& backbone() { return *backbone_; }
    const TinyTransformer& backbone() const { return *backbone_; }
    const AdapterConfig& config() const { return state_.config; }
    AdapterState& state() { return state_; }
    const AdapterState& state() const { return state_; }

    // Adapter pointer for forward passes: full/none run the raw backbone.
    const AdapterState* forward_adapter() const {
        const auto m = state_.config.method;
        return (m == AdapterMethod::Full || m == AdapterMethod::None) ? nullptr
                                                                      : &state_;
    }

    std::vector<std::string> trainable_names() const {
        switch (state_.config.method) {
            case AdapterMethod::None: return {};
            case AdapterMethod::Full: return backbone_->parameters().names();
            default: return state_.params.names();
        }
    }

    double nll_loss(std::span<const int> source, std::span<const int> target) const {
        Forward::Options opts;
        opts.adapter = forward_adapter();
        Forward f(*backbone_, opts);
        return f.tape().scalar(f.nll(source, target));
    }

    GenerationResult generate(std::span<const int> source,
                              const DecodeConfig& decode) const {
        return backbone_->generate_adapted(source, decode, forward_adapter());
    }

    void save(const std::string& path) const {
        nlohmann::json meta;
        meta["kind"] = "adapter";
        meta["method"] = adapter_method_name(state_.config.method);
        meta["prompt_length"] = state_.config.prompt_length;
        meta["prefix_length"] = state_.config.prefix_length;
        meta["lora_rank"] = state_.config.lora_rank;
        meta["lora_dropout"] = state_.config.lora_dropout;
        // Full-tuning snapshots the backbone inventory itself.
        if (state_.config.method == AdapterMethod::Full)
            checkpoint::save(backbone_->parameters(), path, meta);
        else
            checkpoint::save(state_.params, path, meta);
    }

    void load(const std::string& path) {
        auto loaded = checkpoint::load(path);
        const auto method =
            adapter_method_from_string(loaded.meta.at("method").get<std::string>());
        if (method != state_.config.method)
            throw ConfigError("checkpoint method does not match attached adapter");
        ParamStore& dest = state_.config.method == AdapterMethod::Full
                               ? backbone_->parameters()
                               : state_.params;
        for (const auto& name : dest.names()) dest.at(name) = loaded.store.at(name);
    }

private:
    TinyTransformer* backbone_;
    AdapterState state_;
};

namespace detail {

inline Matrix randn(int rows, int cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
}

inline std::vector<std::string> lora_targets(const TinyTransformer& backbone) {
    std::vector<std::string> t;
    for (int i = 0; i < backbone.encoder_layer_count(); ++i) {
        t.push_back("enc." + std::to_string(i) + ".attn.wq");
        t.push_back("enc." + std::to_string(i) + ".attn.wv");
    }
    for (int i = 0; i < backbone.decoder_layer_count(); ++i) {
        t.push_back("dec." + std::to_string(i) + ".self.wq");
        t.push_back("dec." + std::to_string(i) + ".self.wv");
    }
    return t;
}

}  // namespace detail

// Builds the adapter tensors and returns a handle. LoRA starts with the up
// factor zeroed so the attached model is exactly the unadapted backbone.
inline AdaptedGenerator attach(TinyTransformer& backbone, AdapterConfig cfg,
                               std::mt19937_64& rng) {
    cfg.validate();
    const int d = backbone.d_model();
    AdapterState state;
    state.config = cfg;
    switch (cfg.method) {
        case AdapterMethod::None:
        case AdapterMethod::Full:
            break;
        case AdapterMethod::Prompt:
            // Prompt rows join the encoder input after the sqrt(d) embedding
            // scale, so they are born at unit magnitude.
            state.params.add("adapter.prompt.embed",
                             detail::randn(cfg.prompt_length, d, 1.0, rng));
            break;
        case AdapterMethod::Prefix: {
            const auto add_layer = [&](const std::string& scope) {
                state.params.add("adapter.prefix." + scope + ".k",
                                 detail::randn(cfg.prefix_length, d, 0.5, rng));
                state.params.add("adapter.prefix." + scope + ".v",
                                 detail::randn(cfg.prefix_length, d, 0.5, rng));
            };
            for (int i = 0; i < backbone.encoder_layer_count(); ++i)
                add_layer("enc." + std::to_string(i));
            for (int i = 0; i < backbone.decoder_layer_count(); ++i)
                add_layer("dec." + std::to_string(i));
            break;
        }
        case AdapterMethod::Lora:
            for (const auto& target : detail::lora_targets(backbone)) {
                const Matrix& w = backbone.parameters().at(target);
                const int d_in = static_cast<int>(w.rows());
                const int d_out = static_cast<int>(w.cols());
                state.params.add("adapter.lora." + target + ".a",
                                 detail::randn(cfg.lora_rank, d_in, 0.1, rng));
                state.params.add("adapter.lora." + target + ".b",
                                 Matrix::Zero(d_out, cfg.lora_rank));
            }
            break;
    }
    return AdaptedGenerator(backbone, std::move(state));
}

// Exact trainable-parameter count by closed form.
inline std::int64_t trainable_parameter_count(const AdaptedGenerator& handle) {
    const auto& cfg = handle.config();
    const TinyTransformer& b = handle.backbone();
    const std::int64_t d = b.d_model();
    switch (cfg.method) {
        case AdapterMethod::None:
            return 0;
        case AdapterMethod::Full:
            return b.parameters().total_elements();
        case AdapterMethod::Prompt:
            return static_cast<std::int64_t>(cfg.prompt_length) * d;
        case AdapterMethod::Prefix:
            return static_cast<std::int64_t>(cfg.prefix_length) * 2 * d *
                   (b.encoder_layer_count() + b.decoder_layer_count());
        case AdapterMethod::Lora: {
            std::int64_t total = 0;
            for (const auto& target : detail::lora_targets(b)) {
                const Matrix& w = b.parameters().at(target);
                total += static_cast<std::int64_t>(cfg.lora_rank) *
                         (w.rows() + w.cols());
            }
            return total;
        }
    }
    throw ConfigError("bad adapter method");
}

struct TrainPair {
    std::vector<int> source;
    std::vector<int> target;
    double weight{1.0};
};

// One optimizer step on the mean weighted teacher-forced NLL of the batch.
// Only the trainable tensors for the attached method change.
inline double adapter_step(AdaptedGenerator& handle, std::span<const TrainPair> batch,
                           Optimizer& optimizer, std::mt19937_64* dropout_rng = nullptr) {
    if (handle.config().method == AdapterMethod::None)
        throw NotTrainableError("method=none has no trainable parameters");
    if (batch.empty()) throw ArgumentError("adapter_step: empty batch");

    const auto trainable = handle.trainable_names();
    std::set<std::string> trainset(trainable.begin(), trainable.end());

    Forward::Options opts;
    opts.adapter = handle.forward_adapter();
    opts.trainable = [&trainset](const std::string& n) { return trainset.count(n) > 0; };
    opts.rng = dropout_rng;
    Forward f(handle.backbone(), opts);

    Tape::Var total = f.tape().constant(Matrix::Zero(1, 1));
    for (const auto& pair : batch) {
        auto loss = f.nll(pair.source, pair.target);
        total = f.tape().add(total, f.tape().scale(loss, pair.weight));
    }
    total = f.tape().scale(total, 1.0 / static_cast<double>(batch.size()));
    f.tape().backward(total);

    std::map<std::string, Matrix*> params;
    std::map<std::string, Matrix> grads;
    ParamStore& adapter_store = handle.state().params;
    ParamStore& backbone_store = handle.backbone().parameters();
    for (const auto& name : trainable) {
        Matrix g = f.grad_of(name);
        if (g.size() == 0) continue;  // tensor never entered this graph
        grads.emplace(name, std::move(g));
        params.emplace(name, name.rfind("adapter.", 0) == 0 ? &adapter_store.at(name)
                                                            : &backbone_store.at(name));
    }
    optimizer.step(params, grads);
    return f.tape().scalar(total);
}

}  // namespace c3da
