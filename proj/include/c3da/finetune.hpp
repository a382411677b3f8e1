#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "c3da/data.hpp"
#include "c3da/optim.hpp"
#include "c3da/peft.hpp"

namespace c3da {

struct ReweightParams {
    double exponent{0.55};  // A
    double offset{1.5};     // B

    void validate() const {
        if (exponent <= 0.0) throw ConfigError("reweight exponent must be > 0");
        if (offset <= -1.0) throw ConfigError("reweight offset must be > -1");
    }
};

// Instance multiplier for long-tail aspects, natural logs throughout:
//   C = (ln M - 1) (B + 1)^A,  delta_j = 1 / (1 + C exp(-A ln(M_j + B))).
// Strictly increasing in M_j with range (0, 1) whenever ln M > 1.
inline double reweight_multiplier(int aspect_frequency, int aspect_item_count,
                                  const ReweightParams& params) {
    params.validate();
    if (aspect_frequency < 1) throw ArgumentError("aspect frequency must be >= 1");
    const double log_m = std::log(static_cast<double>(aspect_item_count));
    if (log_m <= 1.0)
        throw ArgumentError("re-weighting undefined: ln(aspect item count) must exceed 1");
    const double c = (log_m - 1.0) * std::pow(params.offset + 1.0, params.exponent);
    return 1.0 / (1.0 + c * std::exp(-params.exponent *
                                     std::log(aspect_frequency + params.offset)));
}

struct FinetuneConfig {
    int epochs{100};  // passes over the pairing set
    int batch_size{16};
    double learning_rate{0.02};
    std::string optimizer{"adafactor"};  // or "adam"
    bool reweight{false};
    ReweightParams reweight_params;
    bool reweight_invert{false};
    std::uint64_t seed{0};

    void validate() const {
        if (epochs < 1) throw ConfigError("finetune epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("finetune batch size must be >= 1");
        if (learning_rate <= 0.0) throw ConfigError("learning rate must be > 0");
        if (optimizer != "adafactor" && optimizer != "adam")
            throw ConfigError("unknown optimizer: " + optimizer);
        if (reweight) reweight_params.validate();
    }
};

// One sampled draw: two condition->target pairs sharing the same target
// sentence, one conditioned on the target's aspect and one on a seed span of
// the target's polarity.
struct PairingDraw {
    int context_index{0};  // i
    int target_index{0};   // j
    std::string aspect_condition;
    std::string polarity_condition;
    std::string target_text;
    std::string target_aspect;
};

// Seed-deterministic stream of fine-tuning draws. Seed spans cycle
// round-robin within each polarity's list.
class PairingStream {
public:
    PairingStream(const Dataset& dataset, PolaritySeedMap seeds, std::uint64_t seed)
        : dataset_(&dataset),
          seeds_(std::move(seeds)),
          rng_(make_rng(seed, "pairing-stream")) {
        if (dataset.size() < 2)
            throw ArgumentError("pairing needs a dataset with at least 2 instances");
        seeds_.validate();
    }

    PairingDraw next() {
        std::uniform_int_distribution<std::size_t> pick(0, dataset_->size() - 1);
        PairingDraw d;
        d.context_index = static_cast<int>(pick(rng_));
        d.target_index = static_cast<int>(pick(rng_));
        const AbsaTriplet& ctx = dataset_->triplets[d.context_index];
        const AbsaTriplet& tgt = dataset_->triplets[d.target_index];
        d.aspect_condition = concat_condition(ctx.raw_text, tgt.aspect_text);
        d.polarity_condition = concat_condition(ctx.raw_text, next_span(tgt.polarity));
        d.target_text = tgt.raw_text;
        d.target_aspect = tgt.aspect_text;
        return d;
    }

private:
    const std::string& next_span(Polarity p) {
        const auto& spans = seeds_.for_polarity(p);
        const std::size_t i = round_robin_[p]++ % spans.size();
        return spans[i];
    }

    const Dataset* dataset_;
    PolaritySeedMap seeds_;
    std::mt19937_64 rng_;
    std::map<Polarity, std::size_t> round_robin_;
};

// Sliding-window percentile smoothing; edge windows truncate to available
// points. percentile in [0,1], linear interpolation between order statistics.
inline std::vector<double> smooth_curve(const std::vector<double>& series,
                                        int window = 20, double percentile = 0.5) {
    if (series.empty()) throw ArgumentError("smooth_curve: empty series");
    if (window < 1) throw ArgumentError("smooth_curve: window must be >= 1");
    if (percentile < 0.0 || percentile > 1.0)
        throw ArgumentError("smooth_curve: percentile must be in [0,1]");
    const int n = static_cast<int>(series.size());
    std::vector<double> out(series.size());
    std::vector<double> buf;
    for (int i = 0; i < n; ++i) {
        const int lo = std::max(0, i - (window - 1) / 2);
        const int hi = std::min(n - 1, lo + window - 1);
        buf.assign(series.begin() + lo, series.begin() + hi + 1);
        std::sort(buf.begin(), buf.end());
        const double pos = percentile * static_cast<double>(buf.size() - 1);
        const int base = static_cast<int>(std::floor(pos));
        const double frac = pos - base;
        out[i] = base + 1 < static_cast<int>(buf.size())
                     ? buf[base] * (1.0 - frac) + buf[base + 1] * frac
                     : buf[base];
    }
    return out;
}

struct ConvergencePoint {
    int step{0};
    double loss{0.0};
};

struct FinetuneResult {
    std::vector<ConvergencePoint> log;
    double final_raw_loss{0.0};
    double final_smoothed_loss{0.0};
};

inline void write_convergence_csv(const std::vector<ConvergencePoint>& log,
                                  const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write convergence log: " + path);
    out << "step,loss\n";
    for (const auto& p : log) out << p.step << "," << p.loss << "\n";
}

// Stage I: tune the adapted generator to produce the sampled target sentence
// from aspect- and polarity-conditioned contexts. Both channel losses of a
// draw land in the same optimizer step.
inline FinetuneResult finetune(AdaptedGenerator& handle, const Dataset& dataset,
                               const PolaritySeedMap& seeds, const Vocab& vocab,
                               const FinetuneConfig& cfg,
                               int max_total_steps = 0) {
    cfg.validate();
    if (handle.config().method == AdapterMethod::None)
        throw NotTrainableError("method=none cannot be fine-tuned");

    PairingStream stream(dataset, seeds, cfg.seed);
    std::unique_ptr<Optimizer> opt;
    if (cfg.optimizer == "adam")
        opt = std::make_unique<Adam>(cfg.learning_rate);
    else
        opt = std::make_unique<Adafactor>(cfg.learning_rate);

    const int draws_per_step = std::max(1, cfg.batch_size / 2);
    const int steps_per_epoch = std::max<int>(
        1, static_cast<int>((dataset.size() + draws_per_step - 1) / draws_per_step));
    int total_steps = cfg.epochs * steps_per_epoch;
    if (max_total_steps > 0) total_steps = std::min(total_steps, max_total_steps);

    auto dropout_rng = make_rng(cfg.seed, "finetune-dropout");
    FinetuneResult result;
    std::vector<TrainPair> batch;
    for (int step = 0; step < total_steps; ++step) {
        batch.clear();
        for (int dr = 0; dr < draws_per_step; ++dr) {
            const PairingDraw d = stream.next();
            double weight = 1.0;
            if (cfg.reweight) {
                weight = reweight_multiplier(
                    dataset.vocabulary.frequency(d.target_aspect),
                    dataset.vocabulary.total_instances(), cfg.reweight_params);
                if (cfg.reweight_invert) weight = 1.0 - weight;
            }
            const std::vector<int> target = vocab.encode_text(d.target_text);
            batch.push_back({vocab.encode_text(d.aspect_condition), target, weight});
            batch.push_back({vocab.encode_text(d.polarity_condition), target, weight});
        }
        const double loss = adapter_step(handle, batch, *opt, &dropout_rng);
        result.log.push_back({step, loss});
    }

    std::vector<double> raw;
    raw.reserve(result.log.size());
    for (const auto& p : result.log) raw.push_back(p.loss);
    result.final_raw_loss = raw.back();
    result.final_smoothed_loss = smooth_curve(raw, 20, 0.5).back();
    return result;
}

}  // namespace c3da
