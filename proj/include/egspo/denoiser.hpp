#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "egspo/rng.hpp"
#include "egspo/schedule.hpp"
#include "egspo/vocab.hpp"

namespace egspo {

using GradVec = std::vector<double>;

/// Architecture of the toy denoiser. Every position is embedded with a
/// shared token table plus a per-position row, the full sequence is
/// mean-pooled into a context vector, and a two-layer tanh MLP over
/// [embedding; context] feeds a linear projection onto content-token logits.
/// Bidirectional by construction: the pooled context exposes the whole
/// sequence to every position.
struct ModelArch {
    int embed_dim = 16;
    int hidden_dim = 32;
    int seq_len = 0;    // L, total length incl. prompt prefix
    int vocab_size = 0; // |V| content tokens; the mask gets its own embedding row

    // Flat parameter layout, in order:
    //   tok_embed[(V+1) x d], pos_embed[L x d],
    //   w1[h x 2d], b1[h], w2[h x h], b2[h], w_out[V x h]
    std::int64_t tok_embed_offset() const { return 0; }
    std::int64_t pos_embed_offset() const { return tok_embed_offset() + (vocab_size + 1) * embed_dim; }
    std::int64_t w1_offset() const { return pos_embed_offset() + static_cast<std::int64_t>(seq_len) * embed_dim; }
    std::int64_t b1_offset() const { return w1_offset() + static_cast<std::int64_t>(hidden_dim) * 2 * embed_dim; }
    std::int64_t w2_offset() const { return b1_offset() + hidden_dim; }
    std::int64_t b2_offset() const { return w2_offset() + static_cast<std::int64_t>(hidden_dim) * hidden_dim; }
    std::int64_t w_out_offset() const { return b2_offset() + hidden_dim; }
    std::int64_t param_count() const { return w_out_offset() + static_cast<std::int64_t>(vocab_size) * hidden_dim; }

    /// Multiply-add count of one forward pass; the fixed per-pass constant
    /// behind the flops proxy counter.
    std::uint64_t per_pass_macs() const {
        const std::uint64_t d = static_cast<std::uint64_t>(embed_dim);
        const std::uint64_t h = static_cast<std::uint64_t>(hidden_dim);
        const std::uint64_t L = static_cast<std::uint64_t>(seq_len);
        const std::uint64_t V = static_cast<std::uint64_t>(vocab_size);
        return L * d + L * (2 * d * h + h * h + h * V);
    }

    bool operator==(const ModelArch&) const = default;
};

/// Per-position logits over content tokens (mask is never an output class).
struct LogitTable {
    int positions = 0;
    int vocab = 0;
    std::vector<double> values; // row-major positions x vocab

    double at(int pos, Token v) const { return values[static_cast<std::size_t>(pos) * vocab + v]; }

    /// log softmax of one row at the given temperature.
    std::vector<double> row_log_probs(int pos, double temperature) const;
    std::vector<double> row_probs(int pos, double temperature) const;
    double row_entropy(int pos, double temperature) const;
    Token row_argmax(int pos) const; // ties -> lowest token id
};

/// Recorded primal computation of one forward pass plus adjoint buffers;
/// backward() replays it in reverse and accumulates d(loss)/d(theta) into a
/// gradient vector aligned with the flat parameter layout.
struct GradientTape {
    const ModelArch* arch = nullptr;
    const double* params = nullptr; // view of the owning model's parameters
    std::vector<Token> input;
    std::vector<double> embeds;  // L x d (token row + position row)
    std::vector<double> context; // d, mean pooled
    std::vector<double> a1, h1;  // L x h (pre/post tanh)
    std::vector<double> a2, h2;  // L x h
    LogitTable logits;

    /// dlogits: adjoint of the logit table (positions x vocab, row-major).
    /// Accumulates into grad (must be param_count() long, caller-zeroed or
    /// reused across calls for sums).
    void backward(std::span<const double> dlogits, GradVec& grad) const;
};

class DenoiserModel {
public:
    DenoiserModel(ModelArch arch, std::uint64_t init_seed, double init_scale = 0.1);

    const ModelArch& arch() const { return arch_; }
    std::uint64_t init_seed() const { return init_seed_; }
    std::span<const double> params() const { return params_; }
    std::span<double> params_mut() { return params_; }

    /// Deterministic forward pass; logits exist at every position, callers
    /// ignore the unmasked ones.
    LogitTable forward(const MaskedSequence& x) const;

    /// forward() that also keeps the intermediates needed for backward().
    GradientTape forward_with_tape(const MaskedSequence& x) const;

    /// Gradient of sum_{l in U} log f(chosen_l | x_next) under the
    /// temperature-tempered softmax policy. Exact reverse accumulation.
    GradVec grad_log_prob(const MaskedSequence& x_next, const std::vector<int>& unmask_positions,
                          const std::vector<Token>& chosen, double temperature = 1.0) const;

    /// Gradient of a single logit g_{pos,tok} (one reverse pass).
    GradVec grad_logit(const MaskedSequence& x, int pos, Token tok) const;

    /// max over masked positions and token pairs (i,j) of
    /// ||grad(g_i - g_j)||_2, for the tempered policy logits g/temperature.
    double grad_norm_bound(const MaskedSequence& x_next, double temperature = 1.0) const;

    void save_checkpoint(const std::string& path) const;
    static DenoiserModel load_checkpoint(const std::string& path);

private:
    ModelArch arch_;
    std::uint64_t init_seed_ = 0;
    std::vector<double> params_;
};

/// Masked-token cross-entropy pretraining: sample a corpus sequence, mask it
/// at a uniformly drawn noise level, and descend on the negative
/// log-likelihood of the clean tokens at the masked positions.
DenoiserModel pretrain_nelbo(DenoiserModel model, const std::vector<MaskedSequence>& corpus,
                             const NoiseSchedule& schedule, int steps, double learning_rate, Rng& rng);

/// Mean log f(x0_l | x_t) over masked positions, averaged over a batch of
/// forward-masked corpus samples. Evaluation companion to pretrain_nelbo.
double masked_log_likelihood(const DenoiserModel& model, const std::vector<MaskedSequence>& corpus,
                             const NoiseSchedule& schedule, int batches, Rng& rng);

} // namespace egspo
