#include "egspo/tasks.hpp"

#include <algorithm>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace egspo {

RewardTask make_target_match_task(int response_len, int vocab_size, std::uint64_t task_seed,
                                  int query_len, int num_queries) {
    if (response_len < 1 || vocab_size < 2 || query_len < 1 || num_queries < 1)
        throw std::invalid_argument("make_target_match_task: bad parameters");

    // Pre-generate the (query, target) pool so reward and sampler agree.
    struct Pair {
        std::vector<Token> prompt;
        std::vector<Token> target;
    };
    auto pool = std::make_shared<std::vector<Pair>>();
    Rng gen = make_rng(task_seed);
    std::uniform_int_distribution<Token> tok(0, vocab_size - 1);
    for (int i = 0; i < num_queries; ++i) {
        Pair p;
        for (int k = 0; k < query_len; ++k) p.prompt.push_back(tok(gen));
        for (int k = 0; k < response_len; ++k) p.target.push_back(tok(gen));
        pool->push_back(std::move(p));
    }

    RewardTask task;
    task.name = "target_match";
    task.query_len = query_len;
    task.response_len = response_len;
    task.vocab_size = vocab_size;
    task.sample_query = [pool](Rng& rng) {
        std::uniform_int_distribution<int> pick(0, static_cast<int>(pool->size()) - 1);
        const auto& p = (*pool)[static_cast<std::size_t>(pick(rng))];
        return TaskQuery{p.prompt, p.target};
    };
    task.reward = [response_len, query_len](const MaskedSequence& x0, const TaskQuery& q) {
        int matches = 0;
        for (int i = 0; i < response_len; ++i)
            matches += (x0.tokens[static_cast<std::size_t>(query_len + i)] ==
                        q.ground_truth[static_cast<std::size_t>(i)])
                           ? 1
                           : 0;
        return static_cast<double>(matches) / static_cast<double>(response_len);
    };
    return task;
}

RewardTask make_parity_task(int response_len, int vocab_size, std::uint64_t task_seed) {
    if (response_len < 1 || vocab_size < 2)
        throw std::invalid_argument("make_parity_task: bad parameters");
    RewardTask task;
    task.name = "parity";
    task.query_len = 1;
    task.response_len = response_len;
    task.vocab_size = vocab_size;
    task.sample_query = [vocab_size, task_seed](Rng& rng) {
        std::uniform_int_distribution<Token> tok(0, vocab_size - 1);
        (void)task_seed;
        return TaskQuery{{tok(rng)}, {}};
    };
    task.reward = [response_len, vocab_size](const MaskedSequence& x0, const TaskQuery& q) {
        std::int64_t sum = 0;
        for (int i = 0; i < response_len; ++i) sum += x0.tokens[static_cast<std::size_t>(1 + i)];
        return (sum % vocab_size == q.prompt.front()) ? 1.0 : 0.0;
    };
    return task;
}

std::string SudokuInstance::puzzle_string() const {
    std::string s;
    for (int v : puzzle) s += static_cast<char>('0' + v);
    return s;
}

std::string SudokuInstance::solution_string() const {
    std::string s;
    for (int v : solution) s += static_cast<char>('0' + v);
    return s;
}

double sudoku_reward(const std::array<int, 16>& x0, const SudokuInstance& inst) {
    int empty = 0;
    int correct = 0;
    for (int i = 0; i < 16; ++i) {
        if (inst.puzzle[static_cast<std::size_t>(i)] != 0) continue;
        ++empty;
        const int v = x0[static_cast<std::size_t>(i)];
        if (v >= 1 && v <= 4 && v == inst.solution[static_cast<std::size_t>(i)]) ++correct;
    }
    if (empty == 0) throw std::invalid_argument("sudoku_reward: puzzle has no empty cells");
    return static_cast<double>(correct) / static_cast<double>(empty);
}

bool sudoku_solution_valid(const std::array<int, 16>& grid) {
    auto cell = [&](int r, int c) { return grid[static_cast<std::size_t>(r * 4 + c)]; };
    for (int v : grid)
        if (v < 1 || v > 4) return false;
    for (int i = 0; i < 4; ++i) {
        int row_seen = 0, col_seen = 0;
        for (int j = 0; j < 4; ++j) {
            row_seen |= 1 << cell(i, j);
            col_seen |= 1 << cell(j, i);
        }
        if (row_seen != 0b11110 || col_seen != 0b11110) return false;
    }
    for (int br = 0; br < 4; br += 2) {
        for (int bc = 0; bc < 4; bc += 2) {
            int seen = 0;
            for (int r = br; r < br + 2; ++r)
                for (int c = bc; c < bc + 2; ++c) seen |= 1 << cell(r, c);
            if (seen != 0b11110) return false;
        }
    }
    return true;
}

namespace {

bool fill_grid(std::array<int, 16>& grid, int idx, Rng& rng) {
    if (idx == 16) return true;
    const int r = idx / 4;
    const int c = idx % 4;
    std::array<int, 4> digits{1, 2, 3, 4};
    for (int i = 3; i > 0; --i) {
        std::uniform_int_distribution<int> pick(0, i);
        std::swap(digits[static_cast<std::size_t>(i)], digits[static_cast<std::size_t>(pick(rng))]);
    }
    for (int d : digits) {
        bool ok = true;
        for (int j = 0; j < 4 && ok; ++j) {
            if (grid[static_cast<std::size_t>(r * 4 + j)] == d) ok = false;
            if (grid[static_cast<std::size_t>(j * 4 + c)] == d) ok = false;
        }
        const int br = (r / 2) * 2, bc = (c / 2) * 2;
        for (int rr = br; rr < br + 2 && ok; ++rr)
            for (int cc = bc; cc < bc + 2 && ok; ++cc)
                if (grid[static_cast<std::size_t>(rr * 4 + cc)] == d) ok = false;
        if (!ok) continue;
        grid[static_cast<std::size_t>(idx)] = d;
        if (fill_grid(grid, idx + 1, rng)) return true;
        grid[static_cast<std::size_t>(idx)] = 0;
    }
    return false;
}

} // namespace

SudokuInstance generate_sudoku(Rng& rng) {
    SudokuInstance inst;
    inst.solution.fill(0);
    while (!fill_grid(inst.solution, 0, rng)) inst.solution.fill(0);

    inst.puzzle = inst.solution;
    std::uniform_int_distribution<int> n_remove_dist(4, 10);
    const int n_remove = n_remove_dist(rng);
    std::array<int, 16> order{};
    std::iota(order.begin(), order.end(), 0);
    for (int i = 15; i > 0; --i) {
        std::uniform_int_distribution<int> pick(0, i);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    }
    for (int i = 0; i < n_remove; ++i) inst.puzzle[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
    return inst;
}

SudokuInstance parse_sudoku_line(const std::string& line) {
    if (line.size() < 33 || line[16] != ',')
        throw std::invalid_argument("parse_sudoku_line: expected <puzzle16>,<solution16>");
    SudokuInstance inst;
    for (int i = 0; i < 16; ++i) {
        const char p = line[static_cast<std::size_t>(i)];
        const char s = line[static_cast<std::size_t>(17 + i)];
        if (p < '0' || p > '4' || s < '1' || s > '4')
            throw std::invalid_argument("parse_sudoku_line: digit out of range");
        inst.puzzle[static_cast<std::size_t>(i)] = p - '0';
        inst.solution[static_cast<std::size_t>(i)] = s - '0';
    }
    return inst;
}

std::string format_sudoku_line(const SudokuInstance& inst) {
    return inst.puzzle_string() + "," + inst.solution_string();
}

RewardTask make_sudoku_task(std::uint64_t task_seed) {
    RewardTask task;
    task.name = "sudoku";
    task.query_len = 16;
    task.response_len = 16;
    task.vocab_size = 5; // digit tokens 0..4; 0 only appears in prompts as the empty marker
    task.sample_query = [task_seed](Rng& rng) {
        (void)task_seed;
        const SudokuInstance inst = generate_sudoku(rng);
        TaskQuery q;
        q.prompt.assign(inst.puzzle.begin(), inst.puzzle.end());
        q.ground_truth.assign(inst.solution.begin(), inst.solution.end());
        return q;
    };
    task.reward = [](const MaskedSequence& x0, const TaskQuery& q) {
        SudokuInstance inst;
        std::array<int, 16> response{};
        for (int i = 0; i < 16; ++i) {
            inst.puzzle[static_cast<std::size_t>(i)] = q.prompt[static_cast<std::size_t>(i)];
            inst.solution[static_cast<std::size_t>(i)] = q.ground_truth[static_cast<std::size_t>(i)];
            response[static_cast<std::size_t>(i)] = x0.tokens[static_cast<std::size_t>(16 + i)];
        }
        return sudoku_reward(response, inst);
    };
    return task;
}

RewardTask make_task(const std::string& name, int response_len, int vocab_size, std::uint64_t task_seed,
                     int query_len, int num_queries) {
    if (name == "target_match")
        return make_target_match_task(response_len, vocab_size, task_seed, query_len, num_queries);
    if (name == "parity") return make_parity_task(response_len, vocab_size, task_seed);
    if (name == "sudoku") return make_sudoku_task(task_seed);
    throw std::invalid_argument("make_task: unknown task '" + name + "'");
}

} // namespace egspo
