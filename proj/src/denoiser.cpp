#include "egspo/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "egspo/diffusion.hpp"

namespace egspo {

namespace {

// log-sum-exp with max subtraction; shared by all softmax paths so that
// rollout, trainer and oracles produce bitwise-identical log-probabilities.
double log_sum_exp(std::span<const double> v) {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

} // namespace

std::vector<double> LogitTable::row_log_probs(int pos, double temperature) const {
    if (temperature <= 0.0) throw std::invalid_argument("LogitTable: temperature must be > 0");
    std::vector<double> scaled(static_cast<std::size_t>(vocab));
    for (int v = 0; v < vocab; ++v) scaled[v] = at(pos, v) / temperature;
    const double lse = log_sum_exp(scaled);
    for (double& x : scaled) x -= lse;
    return scaled;
}

std::vector<double> LogitTable::row_probs(int pos, double temperature) const {
    std::vector<double> lp = row_log_probs(pos, temperature);
    for (double& x : lp) x = std::exp(x);
    return lp;
}

double LogitTable::row_entropy(int pos, double temperature) const {
    std::vector<double> lp = row_log_probs(pos, temperature);
    double h = 0.0;
    for (double x : lp) h -= std::exp(x) * x;
    return h;
}

Token LogitTable::row_argmax(int pos) const {
    Token best = 0;
    double best_val = at(pos, 0);
    for (Token v = 1; v < vocab; ++v) {
        if (at(pos, v) > best_val) {
            best_val = at(pos, v);
            best = v;
        }
    }
    return best;
}

DenoiserModel::DenoiserModel(ModelArch arch, std::uint64_t init_seed, double init_scale)
    : arch_(arch), init_seed_(init_seed) {
    if (arch_.seq_len < 1 || arch_.vocab_size < 1 || arch_.embed_dim < 1 || arch_.hidden_dim < 1)
        throw std::invalid_argument("DenoiserModel: invalid architecture");
    params_.assign(static_cast<std::size_t>(arch_.param_count()), 0.0);
    Rng rng = make_rng(init_seed);
    std::uniform_real_distribution<double> unif(-init_scale, init_scale);
    // Weights uniform(+-scale), biases zero.
    auto fill = [&](std::int64_t begin, std::int64_t end) {
        for (std::int64_t i = begin; i < end; ++i) params_[static_cast<std::size_t>(i)] = unif(rng);
    };
    fill(arch_.tok_embed_offset(), arch_.w1_offset()); // token + position embeddings
    fill(arch_.w1_offset(), arch_.b1_offset());
    fill(arch_.w2_offset(), arch_.b2_offset());
    fill(arch_.w_out_offset(), arch_.param_count());
}

GradientTape DenoiserModel::forward_with_tape(const MaskedSequence& x) const {
    const int L = arch_.seq_len;
    const int d = arch_.embed_dim;
    const int h = arch_.hidden_dim;
    const int V = arch_.vocab_size;
    if (x.length() != L) throw std::invalid_argument("forward: sequence length does not match arch");

    GradientTape tape;
    tape.arch = &arch_;
    tape.params = params_.data();
    tape.input = x.tokens;
    tape.embeds.assign(static_cast<std::size_t>(L) * d, 0.0);
    tape.context.assign(static_cast<std::size_t>(d), 0.0);
    tape.a1.assign(static_cast<std::size_t>(L) * h, 0.0);
    tape.h1.assign(static_cast<std::size_t>(L) * h, 0.0);
    tape.a2.assign(static_cast<std::size_t>(L) * h, 0.0);
    tape.h2.assign(static_cast<std::size_t>(L) * h, 0.0);
    tape.logits.positions = L;
    tape.logits.vocab = V;
    tape.logits.values.assign(static_cast<std::size_t>(L) * V, 0.0);

    const double* p = params_.data();
    const double* tok_embed = p + arch_.tok_embed_offset();
    const double* pos_embed = p + arch_.pos_embed_offset();
    const double* w1 = p + arch_.w1_offset();
    const double* b1 = p + arch_.b1_offset();
    const double* w2 = p + arch_.w2_offset();
    const double* b2 = p + arch_.b2_offset();
    const double* w_out = p + arch_.w_out_offset();

    for (int l = 0; l < L; ++l) {
        const Token t = x.tokens[static_cast<std::size_t>(l)];
        if (t < 0 || t > V) throw std::invalid_argument("forward: token id out of range");
        const double* te = tok_embed + static_cast<std::int64_t>(t) * d;
        const double* pe = pos_embed + static_cast<std::int64_t>(l) * d;
        double* e = tape.embeds.data() + static_cast<std::size_t>(l) * d;
        for (int k = 0; k < d; ++k) e[k] = te[k] + pe[k];
    }
    for (int k = 0; k < d; ++k) {
        double s = 0.0;
        for (int l = 0; l < L; ++l) s += tape.embeds[static_cast<std::size_t>(l) * d + k];
        tape.context[static_cast<std::size_t>(k)] = s / static_cast<double>(L);
    }

    for (int l = 0; l < L; ++l) {
        const double* e = tape.embeds.data() + static_cast<std::size_t>(l) * d;
        double* a1 = tape.a1.data() + static_cast<std::size_t>(l) * h;
        double* h1 = tape.h1.data() + static_cast<std::size_t>(l) * h;
        double* a2 = tape.a2.data() + static_cast<std::size_t>(l) * h;
        double* h2 = tape.h2.data() + static_cast<std::size_t>(l) * h;
        for (int j = 0; j < h; ++j) {
            const double* row = w1 + static_cast<std::int64_t>(j) * 2 * d;
            double s = b1[j];
            for (int k = 0; k < d; ++k) s += row[k] * e[k];
            for (int k = 0; k < d; ++k) s += row[d + k] * tape.context[static_cast<std::size_t>(k)];
            a1[j] = s;
            h1[j] = std::tanh(s);
        }
        for (int j = 0; j < h; ++j) {
            const double* row = w2 + static_cast<std::int64_t>(j) * h;
            double s = b2[j];
            for (int k = 0; k < h; ++k) s += row[k] * h1[k];
            a2[j] = s;
            h2[j] = std::tanh(s);
        }
        double* g = tape.logits.values.data() + static_cast<std::size_t>(l) * V;
        for (int v = 0; v < V; ++v) {
            const double* row = w_out + static_cast<std::int64_t>(v) * h;
            double s = 0.0;
            for (int k = 0; k < h; ++k) s += row[k] * h2[k];
            g[v] = s;
        }
    }
    return tape;
}

LogitTable DenoiserModel::forward(const MaskedSequence& x) const {
    return forward_with_tape(x).logits;
}

void GradientTape::backward(std::span<const double> dlogits, GradVec& grad) const {
    const ModelArch& a = *arch;
    const int L = a.seq_len;
    const int d = a.embed_dim;
    const int h = a.hidden_dim;
    const int V = a.vocab_size;
    if (grad.size() != static_cast<std::size_t>(a.param_count()))
        throw std::invalid_argument("backward: gradient buffer size mismatch");
    if (dlogits.size() != static_cast<std::size_t>(L) * V)
        throw std::invalid_argument("backward: dlogits size mismatch");

    const double* w1 = params + a.w1_offset();
    const double* w2 = params + a.w2_offset();
    const double* w_out = params + a.w_out_offset();

    double* g_tok = grad.data() + a.tok_embed_offset();
    double* g_pos = grad.data() + a.pos_embed_offset();
    double* g_w1 = grad.data() + a.w1_offset();
    double* g_b1 = grad.data() + a.b1_offset();
    double* g_w2 = grad.data() + a.w2_offset();
    double* g_b2 = grad.data() + a.b2_offset();
    double* g_w_out = grad.data() + a.w_out_offset();

    std::vector<double> dcontext(static_cast<std::size_t>(d), 0.0);
    std::vector<double> dembed(static_cast<std::size_t>(L) * d, 0.0);
    std::vector<double> dh2(static_cast<std::size_t>(h));
    std::vector<double> da2(static_cast<std::size_t>(h));
    std::vector<double> dh1(static_cast<std::size_t>(h));
    std::vector<double> da1(static_cast<std::size_t>(h));

    for (int l = 0; l < L; ++l) {
        const double* dg = dlogits.data() + static_cast<std::size_t>(l) * V;
        bool any = false;
        for (int v = 0; v < V; ++v)
            if (dg[v] != 0.0) { any = true; break; }
        if (!any) continue; // untouched rows contribute nothing

        const double* h1l = h1.data() + static_cast<std::size_t>(l) * h;
        const double* h2l = h2.data() + static_cast<std::size_t>(l) * h;
        const double* el = embeds.data() + static_cast<std::size_t>(l) * d;

        std::fill(dh2.begin(), dh2.end(), 0.0);
        for (int v = 0; v < V; ++v) {
            const double dv = dg[v];
            if (dv == 0.0) continue;
            const double* row = w_out + static_cast<std::int64_t>(v) * h;
            double* grow = g_w_out + static_cast<std::int64_t>(v) * h;
            for (int k = 0; k < h; ++k) {
                dh2[static_cast<std::size_t>(k)] += dv * row[k];
                grow[k] += dv * h2l[k];
            }
        }
        for (int j = 0; j < h; ++j)
            da2[static_cast<std::size_t>(j)] = dh2[static_cast<std::size_t>(j)] * (1.0 - h2l[j] * h2l[j]);

        std::fill(dh1.begin(), dh1.end(), 0.0);
        for (int j = 0; j < h; ++j) {
            const double dv = da2[static_cast<std::size_t>(j)];
            if (dv == 0.0) continue;
            const double* row = w2 + static_cast<std::int64_t>(j) * h;
            double* grow = g_w2 + static_cast<std::int64_t>(j) * h;
            for (int k = 0; k < h; ++k) {
                dh1[static_cast<std::size_t>(k)] += dv * row[k];
                grow[k] += dv * h1l[k];
            }
            g_b2[j] += dv;
        }
        for (int j = 0; j < h; ++j)
            da1[static_cast<std::size_t>(j)] = dh1[static_cast<std::size_t>(j)] * (1.0 - h1l[j] * h1l[j]);

        for (int j = 0; j < h; ++j) {
            const double dv = da1[static_cast<std::size_t>(j)];
            if (dv == 0.0) continue;
            const double* row = w1 + static_cast<std::int64_t>(j) * 2 * d;
            double* grow = g_w1 + static_cast<std::int64_t>(j) * 2 * d;
            double* del = dembed.data() + static_cast<std::size_t>(l) * d;
            for (int k = 0; k < d; ++k) {
                del[k] += dv * row[k];
                grow[k] += dv * el[k];
            }
            for (int k = 0; k < d; ++k) {
                dcontext[static_cast<std::size_t>(k)] += dv * row[d + k];
                grow[d + k] += dv * context[static_cast<std::size_t>(k)];
            }
            g_b1[j] += dv;
        }
    }

    // context = mean over positions, so its adjoint spreads to every embed
    const double inv_len = 1.0 / static_cast<double>(L);
    for (int l = 0; l < L; ++l) {
        double* del = dembed.data() + static_cast<std::size_t>(l) * d;
        const Token t = input[static_cast<std::size_t>(l)];
        double* gtok = g_tok + static_cast<std::int64_t>(t) * d;
        double* gpos = g_pos + static_cast<std::int64_t>(l) * d;
        for (int k = 0; k < d; ++k) {
            const double dv = del[k] + dcontext[static_cast<std::size_t>(k)] * inv_len;
            gtok[k] += dv;
            gpos[k] += dv;
        }
    }
}

GradVec DenoiserModel::grad_log_prob(const MaskedSequence& x_next, const std::vector<int>& unmask_positions,
                                     const std::vector<Token>& chosen, double temperature) const {
    if (temperature <= 0.0) throw std::invalid_argument("grad_log_prob: temperature must be > 0");
    if (unmask_positions.size() != chosen.size())
        throw std::invalid_argument("grad_log_prob: positions/chosen size mismatch");
    GradVec grad(static_cast<std::size_t>(arch_.param_count()), 0.0);
    if (unmask_positions.empty()) return grad;

    GradientTape tape = forward_with_tape(x_next);
    std::vector<double> dlogits(tape.logits.values.size(), 0.0);
    for (std::size_t i = 0; i < unmask_positions.size(); ++i) {
        const int pos = unmask_positions[i];
        const Token tok = chosen[i];
        if (!x_next.is_masked(pos))
            throw std::invalid_argument("grad_log_prob: position is not masked");
        if (tok < 0 || tok >= arch_.vocab_size)
            throw std::invalid_argument("grad_log_prob: chosen token out of range");
        // d/dg_j of log softmax(g/T)_c = (1{j=c} - p_j) / T
        std::vector<double> probs = tape.logits.row_probs(pos, temperature);
        double* row = dlogits.data() + static_cast<std::size_t>(pos) * arch_.vocab_size;
        for (int v = 0; v < arch_.vocab_size; ++v)
            row[v] += (((v == tok) ? 1.0 : 0.0) - probs[static_cast<std::size_t>(v)]) / temperature;
    }
    tape.backward(dlogits, grad);
    return grad;
}

GradVec DenoiserModel::grad_logit(const MaskedSequence& x, int pos, Token tok) const {
    GradientTape tape = forward_with_tape(x);
    std::vector<double> dlogits(tape.logits.values.size(), 0.0);
    dlogits[static_cast<std::size_t>(pos) * arch_.vocab_size + tok] = 1.0;
    GradVec grad(static_cast<std::size_t>(arch_.param_count()), 0.0);
    tape.backward(dlogits, grad);
    return grad;
}

double DenoiserModel::grad_norm_bound(const MaskedSequence& x_next, double temperature) const {
    if (temperature <= 0.0) throw std::invalid_argument("grad_norm_bound: temperature must be > 0");
    const int V = arch_.vocab_size;
    const std::vector<int> masked = x_next.masked_positions();
    double best = 0.0;
    std::vector<GradVec> per_token(static_cast<std::size_t>(V));
    for (int pos : masked) {
        for (Token v = 0; v < V; ++v) per_token[static_cast<std::size_t>(v)] = grad_logit(x_next, pos, v);
        for (Token i = 0; i < V; ++i) {
            for (Token j = i + 1; j < V; ++j) {
                double sq = 0.0;
                const GradVec& gi = per_token[static_cast<std::size_t>(i)];
                const GradVec& gj = per_token[static_cast<std::size_t>(j)];
                for (std::size_t k = 0; k < gi.size(); ++k) {
                    const double diff = gi[k] - gj[k];
                    sq += diff * diff;
                }
                best = std::max(best, std::sqrt(sq));
            }
        }
    }
    return best / temperature;
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

constexpr char kCheckpointMagic[8] = {'E', 'G', 'S', 'P', 'O', 'D', 'M', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

} // namespace

void DenoiserModel::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write(kCheckpointMagic, 8);
    write_u32(os, kCheckpointVersion);
    write_u32(os, static_cast<std::uint32_t>(arch_.embed_dim));
    write_u32(os, static_cast<std::uint32_t>(arch_.hidden_dim));
    write_u32(os, static_cast<std::uint32_t>(arch_.seq_len));
    write_u32(os, static_cast<std::uint32_t>(arch_.vocab_size));
    write_u64(os, static_cast<std::uint64_t>(arch_.param_count()));
    write_u64(os, init_seed_);
    for (double x : params_) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, sizeof(bits));
        write_u64(os, bits);
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

DenoiserModel DenoiserModel::load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    const std::uint32_t version = read_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: unsupported version");
    ModelArch arch;
    arch.embed_dim = static_cast<int>(read_u32(is));
    arch.hidden_dim = static_cast<int>(read_u32(is));
    arch.seq_len = static_cast<int>(read_u32(is));
    arch.vocab_size = static_cast<int>(read_u32(is));
    const std::uint64_t count = read_u64(is);
    const std::uint64_t seed = read_u64(is);
    if (count != static_cast<std::uint64_t>(arch.param_count()))
        throw std::runtime_error("load_checkpoint: parameter count does not match arch");
    DenoiserModel model(arch, seed);
    for (double& x : model.params_) {
        const std::uint64_t bits = read_u64(is);
        std::memcpy(&x, &bits, sizeof(x));
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return model;
}

DenoiserModel pretrain_nelbo(DenoiserModel model, const std::vector<MaskedSequence>& corpus,
                             const NoiseSchedule& schedule, int steps, double learning_rate, Rng& rng) {
    if (corpus.empty()) throw std::invalid_argument("pretrain_nelbo: empty corpus");
    std::uniform_int_distribution<int> pick(0, static_cast<int>(corpus.size()) - 1);
    std::uniform_int_distribution<int> pick_t(1, schedule.total_steps);
    for (int step = 0; step < steps; ++step) {
        const MaskedSequence& x0 = corpus[static_cast<std::size_t>(pick(rng))];
        const int t = pick_t(rng);
        const MaskedSequence xt = forward_mask(x0, t, schedule, rng);
        std::vector<int> positions;
        std::vector<Token> targets;
        for (int l = 0; l < xt.length(); ++l) {
            if (xt.is_masked(l)) {
                positions.push_back(l);
                targets.push_back(x0.tokens[static_cast<std::size_t>(l)]);
            }
        }
        if (positions.empty()) continue;
        GradVec g = model.grad_log_prob(xt, positions, targets, 1.0);
        std::span<double> params = model.params_mut();
        for (std::size_t i = 0; i < params.size(); ++i)
            params[i] += learning_rate * g[i]; // ascend log-likelihood
    }
    return model;
}

double masked_log_likelihood(const DenoiserModel& model, const std::vector<MaskedSequence>& corpus,
                             const NoiseSchedule& schedule, int batches, Rng& rng) {
    if (corpus.empty()) throw std::invalid_argument("masked_log_likelihood: empty corpus");
    std::uniform_int_distribution<int> pick(0, static_cast<int>(corpus.size()) - 1);
    std::uniform_int_distribution<int> pick_t(1, schedule.total_steps);
    double total = 0.0;
    std::int64_t count = 0;
    for (int b = 0; b < batches; ++b) {
        const MaskedSequence& x0 = corpus[static_cast<std::size_t>(pick(rng))];
        const int t = pick_t(rng);
        const MaskedSequence xt = forward_mask(x0, t, schedule, rng);
        if (xt.mask_count() == 0) continue;
        const LogitTable logits = model.forward(xt);
        for (int l = 0; l < xt.length(); ++l) {
            if (!xt.is_masked(l)) continue;
            const std::vector<double> lp = logits.row_log_probs(l, 1.0);
            total += lp[static_cast<std::size_t>(x0.tokens[static_cast<std::size_t>(l)])];
            ++count;
        }
    }
    return count > 0 ? total / static_cast<double>(count) : 0.0;
}

} // namespace egspo
