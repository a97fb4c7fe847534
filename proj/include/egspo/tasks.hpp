#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "egspo/pg.hpp"
#include "egspo/rng.hpp"
#include "egspo/vocab.hpp"

namespace egspo {

/// A verifiable toy environment: a seeded query sampler plus a pure terminal
/// reward in [0, 1]. Rewards are zero at every intermediate step.
struct RewardTask {
    std::string name;
    int query_len = 0;
    int response_len = 0;
    int vocab_size = 0;
    std::function<TaskQuery(Rng&)> sample_query;
    RewardFn reward;

    int seq_len() const { return query_len + response_len; }
};

/// Fraction of response positions matching the query-determined target.
/// The task owns a seeded pool of (query, target) pairs; the sampler draws
/// uniformly from the pool.
RewardTask make_target_match_task(int response_len, int vocab_size, std::uint64_t task_seed,
                                  int query_len = 4, int num_queries = 1);

/// 1.0 iff the response tokens sum to the query token modulo |V|. A global
/// constraint: with |V|=2 flipping any single token flips the reward.
RewardTask make_parity_task(int response_len, int vocab_size, std::uint64_t task_seed);

/// 4x4 sudoku grid as 16 digits, row-major; 0 marks an empty puzzle cell.
struct SudokuInstance {
    std::array<int, 16> puzzle{};
    std::array<int, 16> solution{};

    int empty_count() const {
        int n = 0;
        for (int v : puzzle) n += (v == 0) ? 1 : 0;
        return n;
    }

    std::string puzzle_string() const;
    std::string solution_string() const;
};

/// Fraction of initially-empty cells filled with the solution digit.
/// Digits outside 1..4 count as incorrect; pre-filled cells are not scored.
double sudoku_reward(const std::array<int, 16>& x0, const SudokuInstance& puzzle);

/// Backtracking-complete solution grid with 4-10 cells removed (seeded).
SudokuInstance generate_sudoku(Rng& rng);

/// Row/column/box uniqueness of a full grid.
bool sudoku_solution_valid(const std::array<int, 16>& grid);

SudokuInstance parse_sudoku_line(const std::string& line); // "<puzzle16>,<solution16>"
std::string format_sudoku_line(const SudokuInstance& inst);

/// Sudoku as a diffusion task: the puzzle digits form the clean 16-token
/// prompt (token = digit, 0 = empty marker), the response re-derives the
/// full grid. Vocabulary is the 5 digit tokens 0..4.
RewardTask make_sudoku_task(std::uint64_t task_seed);

RewardTask make_task(const std::string& name, int response_len, int vocab_size, std::uint64_t task_seed,
                     int query_len = 4, int num_queries = 1);

} // namespace egspo
