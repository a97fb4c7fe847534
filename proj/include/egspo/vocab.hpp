#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace egspo {

using Token = std::int32_t;

/// Content tokens are 0..size-1; the mask token gets the id `size` so it can
/// index the extra embedding row without colliding with content tokens.
struct Vocabulary {
    int size = 0;

    explicit Vocabulary(int size_) : size(size_) {
        if (size < 2) throw std::invalid_argument("Vocabulary: need at least 2 content tokens");
    }

    Token mask_id() const { return static_cast<Token>(size); }
    bool is_content(Token t) const { return t >= 0 && t < size; }
};

/// Fixed-length token array; entries are content tokens or the mask id.
struct MaskedSequence {
    std::vector<Token> tokens;
    Token mask = 0; // mask id in effect for this sequence

    MaskedSequence() = default;
    MaskedSequence(std::vector<Token> toks, Token mask_id) : tokens(std::move(toks)), mask(mask_id) {}

    static MaskedSequence all_mask(int length, Token mask_id) {
        return MaskedSequence(std::vector<Token>(static_cast<std::size_t>(length), mask_id), mask_id);
    }

    int length() const { return static_cast<int>(tokens.size()); }

    bool is_masked(int pos) const { return tokens[static_cast<std::size_t>(pos)] == mask; }

    bool is_clean() const {
        for (Token t : tokens)
            if (t == mask) return false;
        return true;
    }

    int mask_count() const {
        int n = 0;
        for (Token t : tokens) n += (t == mask) ? 1 : 0;
        return n;
    }

    std::vector<int> masked_positions() const {
        std::vector<int> out;
        for (int i = 0; i < length(); ++i)
            if (is_masked(i)) out.push_back(i);
        return out;
    }

    bool operator==(const MaskedSequence& other) const {
        return mask == other.mask && tokens == other.tokens;
    }
};

/// Query context handed to reward functions: the clean prompt prefix plus
/// whatever ground-truth payload the task attaches (target tokens, a sudoku
/// solution, ...).
struct TaskQuery {
    std::vector<Token> prompt;
    std::vector<Token> ground_truth;
};

} // namespace egspo
