#pragma once

// Verifiable toy tasks: number-combination (countdown), 4x4 sudoku, and
// two-operand arithmetic with a tagged answer format. Rewards are total
// functions over completion text: malformed input scores, it never throws.

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace dlmwpo {

struct RewardBreakdown {
  std::vector<std::pair<std::string, double>> components;

  void add(const std::string& name, double v) { components.push_back({name, v}); }

  double total() const {
    double s = 0.0;
    for (const auto& [name, v] : components) s += v;
    return s;
  }
};

struct TaskInstance {
  std::string task;
  std::string prompt;       // rendered prompt text, bit-stable
  nlohmann::json payload;   // task-specific structured fields
  std::string answer;       // gold completion text
};

// ----- countdown -----

namespace countdown {

// Exact integer arithmetic value; invalid covers inexact division, division
// by zero, and overflow. An invalid value still leaves the parse valid.
struct Value {
  bool valid = true;
  long long v = 0;
};

struct Parsed {
  bool ok = false;
  Value value;
  std::vector<long long> numbers;  // literals in appearance order
};

namespace detail {

struct Parser {
  const char* p;
  const char* end;
  std::vector<long long>* nums;
  bool failed = false;

  void skip() {
    while (p < end && (*p == ' ' || *p == '\t' || *p == '\n' || *p == '\r')) ++p;
  }

  bool eat(char c) {
    skip();
    if (p < end && *p == c) {
      ++p;
      return true;
    }
    return false;
  }

  Value expr() {
    Value a = term();
    while (!failed) {
      skip();
      if (p < end && (*p == '+' || *p == '-')) {
        char op = *p++;
        Value b = term();
        a = combine(a, b, op);
      } else {
        break;
      }
    }
    return a;
  }

  Value term() {
    Value a = factor();
    while (!failed) {
      skip();
      if (p < end && (*p == '*' || *p == '/')) {
        char op = *p++;
        Value b = factor();
        a = combine(a, b, op);
      } else {
        break;
      }
    }
    return a;
  }

  Value factor() {
    skip();
    if (p >= end) {
      failed = true;
      return {};
    }
    if (*p == '(') {
      ++p;
      Value v = expr();
      if (!eat(')')) failed = true;
      return v;
    }
    if (*p == '-') {
      ++p;
      Value v = factor();
      if (v.valid && __builtin_mul_overflow(v.v, -1ll, &v.v)) v.valid = false;
      return v;
    }
    if (!std::isdigit(static_cast<unsigned char>(*p))) {
      failed = true;
      return {};
    }
    long long n = 0;
    bool overflow = false;
    while (p < end && std::isdigit(static_cast<unsigned char>(*p))) {
      if (__builtin_mul_overflow(n, 10ll, &n) ||
          __builtin_add_overflow(n, static_cast<long long>(*p - '0'), &n))
        overflow = true;
      ++p;
    }
    if (overflow) {
      failed = true;
      return {};
    }
    nums->push_back(n);
    return {true, n};
  }

  static Value combine(Value a, Value b, char op) {
    Value out;
    out.valid = a.valid && b.valid;
    if (!out.valid) return out;
    switch (op) {
      case '+': out.valid = !__builtin_add_overflow(a.v, b.v, &out.v); break;
      case '-': out.valid = !__builtin_sub_overflow(a.v, b.v, &out.v); break;
      case '*': out.valid = !__builtin_mul_overflow(a.v, b.v, &out.v); break;
      case '/':
        if (b.v == 0 || a.v % b.v != 0) {
          out.valid = false;  // division counts only when exact
        } else {
          out.v = a.v / b.v;
        }
        break;
    }
    return out;
  }
};

}  // namespace detail

// Parses an infix expression over integers, + - * / and parentheses.
// Whitespace is ignored; trailing non-space content fails the parse.
inline Parsed parse_expression(const std::string& text) {
  Parsed out;
  detail::Parser ps{text.data(), text.data() + text.size(), &out.numbers};
  Value v = ps.expr();
  ps.skip();
  if (ps.failed || ps.p != ps.end || out.numbers.empty()) {
    out.ok = false;
    out.numbers.clear();
    return out;
  }
  out.ok = true;
  out.value = v;
  return out;
}

inline std::vector<long long> sorted_multiset(std::vector<long long> v) {
  std::sort(v.begin(), v.end());
  return v;
}

// 1.0: exact number multiset and exact target value. 0.1: exact multiset,
// wrong (or undefined) value. 0.0 otherwise, including parse failures.
inline RewardBreakdown reward(const std::string& completion, const std::vector<long long>& numbers,
                              long long target) {
  RewardBreakdown rb;
  Parsed p = parse_expression(completion);
  if (!p.ok) {
    rb.add("unparsed", 0.0);
    return rb;
  }
  bool multiset_ok = sorted_multiset(p.numbers) == sorted_multiset(numbers);
  if (multiset_ok && p.value.valid && p.value.v == target) {
    rb.add("solved", 1.0);
  } else if (multiset_ok) {
    rb.add("numbers_only", 0.1);
  } else {
    rb.add("miss", 0.0);
  }
  return rb;
}

struct Expression {
  std::string text;
  Value value;
};

// Every expression using all three numbers exactly once: 6 permutations,
// 16 operator pairs, 2 association shapes.
inline std::vector<Expression> enumerate_expressions(const std::array<long long, 3>& nums) {
  static const char ops[] = {'+', '-', '*', '/'};
  std::array<int, 3> idx = {0, 1, 2};
  std::sort(idx.begin(), idx.end());
  std::vector<Expression> out;
  do {
    long long a = nums[static_cast<std::size_t>(idx[0])];
    long long b = nums[static_cast<std::size_t>(idx[1])];
    long long c = nums[static_cast<std::size_t>(idx[2])];
    for (char o1 : ops)
      for (char o2 : ops) {
        {
          Value v = detail::Parser::combine(detail::Parser::combine({true, a}, {true, b}, o1),
                                            {true, c}, o2);
          std::string t = "(" + std::to_string(a) + o1 + std::to_string(b) + ")" + o2 + std::to_string(c);
          out.push_back({t, v});
        }
        {
          Value v = detail::Parser::combine({true, a},
                                            detail::Parser::combine({true, b}, {true, c}, o2), o1);
          std::string t = std::to_string(a) + o1 + "(" + std::to_string(b) + o2 + std::to_string(c) + ")";
          out.push_back({t, v});
        }
      }
  } while (std::next_permutation(idx.begin(), idx.end()));
  return out;
}

inline std::string render_prompt(const std::array<long long, 3>& nums, long long target) {
  std::ostringstream os;
  os << nums[0] << " " << nums[1] << " " << nums[2] << " : " << target << " = ";
  return os.str();
}

// Single-digit numbers, targets <= 30, solvable by construction; the witness
// is re-checked through the reward before the instance is accepted.
inline TaskInstance make_instance(RngStream& rng, long long max_target = 30) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::array<long long, 3> nums;
    for (auto& n : nums) n = 1 + static_cast<long long>(rng.uniform_int(9));
    auto exprs = enumerate_expressions(nums);
    std::vector<std::pair<long long, std::size_t>> hits;  // (value, expression index)
    for (std::size_t i = 0; i < exprs.size(); ++i)
      if (exprs[i].value.valid && exprs[i].value.v >= 1 && exprs[i].value.v <= max_target)
        hits.push_back({exprs[i].value.v, i});
    if (hits.empty()) continue;
    auto pick = hits[rng.uniform_int(hits.size())];
    TaskInstance inst;
    inst.task = "countdown";
    inst.prompt = render_prompt(nums, pick.first);
    inst.payload = {{"numbers", std::vector<long long>(nums.begin(), nums.end())},
                    {"target", pick.first}};
    inst.answer = exprs[pick.second].text;
    if (reward(inst.answer, {nums.begin(), nums.end()}, pick.first).total() != 1.0)
      throw generation_error("countdown: witness failed its own reward check");
    return inst;
  }
  throw generation_error("countdown: no solvable instance found in bounded retries");
}

}  // namespace countdown

// ----- sudoku (4x4) -----

namespace sudoku {

using Grid = std::array<int, 16>;  // row-major, 0 = empty

inline bool placement_ok(const Grid& g, int cell, int v) {
  int r = cell / 4, c = cell % 4;
  for (int i = 0; i < 4; ++i) {
    if (g[static_cast<std::size_t>(r * 4 + i)] == v && r * 4 + i != cell) return false;
    if (g[static_cast<std::size_t>(i * 4 + c)] == v && i * 4 + c != cell) return false;
  }
  int br = (r / 2) * 2, bc = (c / 2) * 2;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      int k = (br + i) * 4 + bc + j;
      if (g[static_cast<std::size_t>(k)] == v && k != cell) return false;
    }
  return true;
}

// Exhaustive backtracking solution counter, capped at `cap`. When sol is
// given, the first solution found lands there.
inline int count_solutions(Grid g, int cap, Grid* sol = nullptr) {
  int cell = -1;
  for (int i = 0; i < 16; ++i)
    if (g[static_cast<std::size_t>(i)] == 0) {
      cell = i;
      break;
    }
  if (cell < 0) {
    if (sol) *sol = g;
    return 1;
  }
  int found = 0;
  for (int v = 1; v <= 4; ++v) {
    if (!placement_ok(g, cell, v)) continue;
    g[static_cast<std::size_t>(cell)] = v;
    found += count_solutions(g, cap - found, found == 0 ? sol : nullptr);
    if (found >= cap) return found;
  }
  return found;
}

inline Grid random_solved_grid(RngStream& rng) {
  Grid g{};
  std::array<int, 4> vals = {1, 2, 3, 4};
  // randomized backtracking; 4x4 always completes
  std::function<bool(int)> fill = [&](int cell) -> bool {
    if (cell == 16) return true;
    std::array<int, 4> order = vals;
    for (int i = 3; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)], order[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
    for (int v : order) {
      if (!placement_ok(g, cell, v)) continue;
      g[static_cast<std::size_t>(cell)] = v;
      if (fill(cell + 1)) return true;
      g[static_cast<std::size_t>(cell)] = 0;
    }
    return false;
  };
  if (!fill(0)) throw generation_error("sudoku: backtracking failed to build a grid");
  return g;
}

inline std::string grid_digits(const Grid& g) {
  std::string s;
  for (int v : g) s.push_back(static_cast<char>('0' + v));
  return s;
}

inline std::string render_prompt(const Grid& puzzle) {
  std::string s;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) s.push_back(static_cast<char>('0' + puzzle[static_cast<std::size_t>(r * 4 + c)]));
    s.push_back(' ');
  }
  s += "= ";
  return s;
}

// Fraction of originally-empty cells filled with the solution digit; the
// filled grid is read as the first 16 digit characters of the completion.
// Missing digits leave cells undecodable and therefore wrong.
inline RewardBreakdown reward(const std::string& completion, const Grid& puzzle, const Grid& solution) {
  RewardBreakdown rb;
  std::array<int, 16> decoded;
  decoded.fill(-1);
  std::size_t n = 0;
  for (char c : completion) {
    if (n >= 16) break;
    if (std::isdigit(static_cast<unsigned char>(c))) decoded[n++] = c - '0';
  }
  int empties = 0, correct = 0;
  for (int i = 0; i < 16; ++i) {
    if (puzzle[static_cast<std::size_t>(i)] != 0) continue;
    ++empties;
    if (decoded[static_cast<std::size_t>(i)] == solution[static_cast<std::size_t>(i)]) ++correct;
  }
  rb.add("cells", empties > 0 ? static_cast<double>(correct) / empties : 0.0);
  return rb;
}

// Removes 4..8 cells from a solved grid, keeping the solution unique at
// every removal (verified by the exhaustive counter).
inline TaskInstance make_instance(RngStream& rng) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    Grid solution = random_solved_grid(rng);
    Grid puzzle = solution;
    int want = 4 + static_cast<int>(rng.uniform_int(5));
    std::array<int, 16> order;
    for (int i = 0; i < 16; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = 15; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)], order[rng.uniform_int(static_cast<std::uint64_t>(i + 1))]);
    int removed = 0;
    for (int cell : order) {
      if (removed == want) break;
      int keep = puzzle[static_cast<std::size_t>(cell)];
      puzzle[static_cast<std::size_t>(cell)] = 0;
      if (count_solutions(puzzle, 2) == 1) {
        ++removed;
      } else {
        puzzle[static_cast<std::size_t>(cell)] = keep;
      }
    }
    if (removed < 4) continue;
    TaskInstance inst;
    inst.task = "sudoku";
    inst.prompt = render_prompt(puzzle);
    inst.payload = {{"puzzle", grid_digits(puzzle)}, {"solution", grid_digits(solution)}};
    inst.answer = grid_digits(solution);
    return inst;
  }
  throw generation_error("sudoku: could not reach 4 removals in bounded retries");
}

inline Grid grid_from_digits(const std::string& s) {
  if (s.size() != 16) throw std::invalid_argument("sudoku: grid string must be 16 digits");
  Grid g;
  for (int i = 0; i < 16; ++i) {
    char c = s[static_cast<std::size_t>(i)];
    if (c < '0' || c > '4') throw std::invalid_argument("sudoku: grid digits must be 0..4");
    g[static_cast<std::size_t>(i)] = c - '0';
  }
  return g;
}

}  // namespace sudoku

// ----- tagged answer formats (arithmetic and boxed) -----

namespace tags {

inline int count_occurrences(const std::string& s, const std::string& needle) {
  int n = 0;
  std::size_t pos = 0;
  while ((pos = s.find(needle, pos)) != std::string::npos) {
    ++n;
    pos += needle.size();
  }
  return n;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\n\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\n\r");
  return s.substr(b, e - b + 1);
}

inline bool is_integer_literal(const std::string& s) {
  if (s.empty()) return false;
  std::size_t i = (s[0] == '-' || s[0] == '+') ? 1 : 0;
  if (i == s.size()) return false;
  for (; i < s.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  return true;
}

// Text between the first <answer> and the next </answer>, trimmed; empty
// optional when the tags are absent or out of order.
inline std::optional<std::string> extract_answer(const std::string& s) {
  std::size_t a = s.find("<answer>");
  if (a == std::string::npos) return std::nullopt;
  std::size_t b = s.find("</answer>", a + 8);
  if (b == std::string::npos) return std::nullopt;
  return trim(s.substr(a + 8, b - a - 8));
}

// Last integer substring; the lenient extraction fallback.
inline std::optional<std::string> last_integer(const std::string& s) {
  std::optional<std::string> best;
  std::size_t i = 0;
  while (i < s.size()) {
    if (std::isdigit(static_cast<unsigned char>(s[i]))) {
      std::size_t b = i;
      if (b > 0 && (s[b - 1] == '-')) --b;
      while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
      best = s.substr(b, i - b);
    } else {
      ++i;
    }
  }
  return best;
}

// <reasoning>...</reasoning> then <answer>...</answer>, whitespace allowed
// between and around the blocks.
inline bool soft_format(const std::string& raw) {
  std::string s = trim(raw);
  if (s.rfind("<reasoning>", 0) != 0) return false;
  std::size_t r_end = s.find("</reasoning>");
  if (r_end == std::string::npos) return false;
  std::size_t a_start = s.find("<answer>", r_end);
  if (a_start == std::string::npos) return false;
  for (std::size_t i = r_end + 12; i < a_start; ++i)
    if (!std::isspace(static_cast<unsigned char>(s[i]))) return false;
  if (s.size() < 9 || s.compare(s.size() - 9, 9, "</answer>") != 0) return false;
  return s.find("</answer>", a_start) == s.size() - 9;
}

// Exact line structure: "<reasoning>\n...\n</reasoning>\n<answer>\n...\n</answer>"
// with at most one trailing newline.
inline bool strict_format(const std::string& s) {
  if (s.rfind("<reasoning>\n", 0) != 0) return false;
  std::size_t mid = s.find("\n</reasoning>\n<answer>\n");
  if (mid == std::string::npos) return false;
  std::size_t tail = s.find("\n</answer>", mid + 23);
  if (tail == std::string::npos) return false;
  std::size_t after = tail + 10;
  if (after == s.size()) return true;
  return after + 1 == s.size() && s[after] == '\n';
}

}  // namespace tags

namespace arithmetic {

// Additive components: 0.125 per tag appearing exactly once, 0.5 soft format,
// 0.5 strict format, 0.5 integer answer, 2.0 correctness; content trailing
// the closing answer tag costs 0.001 per character, capped at 0.125. The
// fully well-formed correct completion totals 4.0.
inline RewardBreakdown reward(const std::string& completion, long long truth, bool lenient = false) {
  RewardBreakdown rb;
  double xml = 0.0;
  for (const char* tag : {"<reasoning>", "</reasoning>", "<answer>", "</answer>"})
    if (tags::count_occurrences(completion, tag) == 1) xml += 0.125;
  rb.add("xml", xml);
  std::size_t close = completion.find("</answer>");
  if (close != std::string::npos) {
    std::size_t trailing = completion.size() - (close + 9);
    if (trailing > 0) rb.add("trailing_penalty", -std::min(0.125, 0.001 * static_cast<double>(trailing)));
  }
  rb.add("soft", tags::soft_format(completion) ? 0.5 : 0.0);
  rb.add("strict", tags::strict_format(completion) ? 0.5 : 0.0);
  std::optional<std::string> ans = tags::extract_answer(completion);
  if (!ans && lenient) ans = tags::last_integer(completion);
  bool is_int = ans && tags::is_integer_literal(*ans);
  rb.add("integer", is_int ? 0.5 : 0.0);
  bool correct = false;
  if (is_int) {
    try {
      correct = std::stoll(*ans) == truth;
    } catch (const std::exception&) {
      correct = false;
    }
  }
  rb.add("correct", correct ? 2.0 : 0.0);
  return rb;
}

inline std::string render_prompt(long long a, char op, long long b) {
  std::ostringstream os;
  os << a << op << b << "=?";
  return os.str();
}

inline std::string render_answer(long long a, char op, long long b, long long result) {
  std::ostringstream os;
  os << "<reasoning>\n" << a << op << b << "=" << result << "\n</reasoning>\n<answer>\n"
     << result << "\n</answer>";
  return os.str();
}

inline TaskInstance make_instance(RngStream& rng) {
  static const char ops[] = {'+', '-', '*'};
  char op = ops[rng.uniform_int(3)];
  long long a, b;
  if (op == '*') {
    a = 2 + static_cast<long long>(rng.uniform_int(11));
    b = 2 + static_cast<long long>(rng.uniform_int(11));
  } else {
    a = 2 + static_cast<long long>(rng.uniform_int(98));
    b = 2 + static_cast<long long>(rng.uniform_int(98));
  }
  long long result = op == '+' ? a + b : op == '-' ? a - b : a * b;
  TaskInstance inst;
  inst.task = "arithmetic";
  inst.prompt = render_prompt(a, op, b);
  inst.payload = {{"a", a}, {"op", std::string(1, op)}, {"b", b}, {"answer", result}};
  inst.answer = render_answer(a, op, b, result);
  if (reward(inst.answer, result).total() != 4.0)
    throw generation_error("arithmetic: gold answer failed its own reward check");
  return inst;
}

}  // namespace arithmetic

namespace boxed {

// Format tiers: 1.00 answer tags with \boxed inside, 0.75 answer tags without,
// 0.50 \boxed alone, 0.25 otherwise; plus 2.0 when a \boxed{} holds the truth.
inline RewardBreakdown reward(const std::string& completion, long long truth) {
  RewardBreakdown rb;
  std::size_t a = completion.find("<answer>");
  std::size_t b = a == std::string::npos ? std::string::npos : completion.find("</answer>", a + 8);
  bool has_answer_block = a != std::string::npos && b != std::string::npos;
  std::size_t box = completion.find("\\boxed{");
  bool boxed_in_answer = has_answer_block && box != std::string::npos && box > a && box < b;
  double fmt = boxed_in_answer ? 1.00 : has_answer_block ? 0.75 : box != std::string::npos ? 0.50 : 0.25;
  rb.add("format", fmt);
  bool correct = false;
  if (box != std::string::npos) {
    std::size_t close = completion.find('}', box + 7);
    if (close != std::string::npos) {
      std::string inner = tags::trim(completion.substr(box + 7, close - box - 7));
      if (tags::is_integer_literal(inner)) {
        try {
          correct = std::stoll(inner) == truth;
        } catch (const std::exception&) {
          correct = false;
        }
      }
    }
  }
  rb.add("correct", correct ? 2.0 : 0.0);
  return rb;
}

}  // namespace boxed

// ----- dispatch and dataset I/O -----

inline RewardBreakdown task_reward(const TaskInstance& inst, const std::string& completion,
                                   bool lenient = false) {
  if (inst.task == "countdown") {
    auto nums = inst.payload.at("numbers").get<std::vector<long long>>();
    return countdown::reward(completion, nums, inst.payload.at("target").get<long long>());
  }
  if (inst.task == "sudoku") {
    return sudoku::reward(completion, sudoku::grid_from_digits(inst.payload.at("puzzle").get<std::string>()),
                          sudoku::grid_from_digits(inst.payload.at("solution").get<std::string>()));
  }
  if (inst.task == "arithmetic") {
    return arithmetic::reward(completion, inst.payload.at("answer").get<long long>(), lenient);
  }
  throw std::invalid_argument("task_reward: unknown task " + inst.task);
}

inline TaskInstance make_task_instance(const std::string& task, RngStream& rng) {
  if (task == "countdown") return countdown::make_instance(rng);
  if (task == "sudoku") return sudoku::make_instance(rng);
  if (task == "arithmetic") return arithmetic::make_instance(rng);
  throw std::invalid_argument("make_task_instance: unknown task " + task);
}

// A run's success criterion for greedy evaluation.
inline bool task_success(const TaskInstance& inst, const RewardBreakdown& rb) {
  if (inst.task == "countdown") return rb.total() == 1.0;
  if (inst.task == "sudoku") return rb.total() == 1.0;
  if (inst.task == "arithmetic") {
    for (const auto& [name, v] : rb.components)
      if (name == "correct" && v > 0.0) return true;
    return false;
  }
  throw std::invalid_argument("task_success: unknown task " + inst.task);
}

inline void write_dataset(const std::string& path, const std::vector<TaskInstance>& insts) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::invalid_argument("dataset: cannot open for write: " + path);
  for (const auto& inst : insts) {
    nlohmann::json j = {{"task", inst.task}, {"prompt", inst.prompt}, {"payload", inst.payload},
                        {"answer", inst.answer}};
    f << j.dump() << "\n";
  }
}

inline std::vector<TaskInstance> read_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("dataset: cannot open: " + path);
  std::vector<TaskInstance> out;
  std::string line;
  long lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw std::invalid_argument("dataset: bad JSON at " + path + ":" + std::to_string(lineno));
    TaskInstance inst;
    inst.task = j.at("task").get<std::string>();
    inst.prompt = j.at("prompt").get<std::string>();
    inst.payload = j.at("payload");
    inst.answer = j.at("answer").get<std::string>();
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace dlmwpo
