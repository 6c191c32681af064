#pragma once

// Formal-language task generators (parity, modular arithmetic with and
// without brackets), scaled-accuracy evaluation, the length curriculum that
// trains a model through growing max lengths and scores it far beyond them,
// and a deterministic character-level smoke corpus for ablation runs.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mamba3/block.hpp"
#include "mamba3/tensor.hpp"

namespace mamba3 {

struct TaskInstance {
  std::vector<int> tokens;
  int label = 0;
};

inline TaskInstance gen_parity(Rng& rng, std::size_t length) {
  if (length < 1) throw parameter_error("gen_parity: length must be >= 1");
  TaskInstance inst;
  inst.tokens.resize(length);
  int sum = 0;
  for (std::size_t i = 0; i < length; ++i) {
    inst.tokens[i] = static_cast<int>(rng.next_index(2));
    sum += inst.tokens[i];
  }
  inst.label = sum % 2;
  return inst;
}

// Modular-arithmetic token ids for modulus m:
//   0..m-1 digits, m '+', m+1 '-', m+2 '*', m+3 '(', m+4 ')'
inline int tok_plus(std::size_t m) { return static_cast<int>(m); }
inline int tok_minus(std::size_t m) { return static_cast<int>(m) + 1; }
inline int tok_times(std::size_t m) { return static_cast<int>(m) + 2; }
inline int tok_open(std::size_t m) { return static_cast<int>(m) + 3; }
inline int tok_close(std::size_t m) { return static_cast<int>(m) + 4; }

inline int apply_mod_op(int lhs, int op_kind, int rhs, std::size_t m) {
  const int mm = static_cast<int>(m);
  switch (op_kind) {
    case 0: return ((lhs + rhs) % mm + mm) % mm;
    case 1: return ((lhs - rhs) % mm + mm) % mm;
    case 2: return ((lhs * rhs) % mm + mm) % mm;
    default: throw parameter_error("apply_mod_op: bad operator kind");
  }
}

// Strict left-to-right evaluation of digit (op digit)* token strings.
inline int eval_left_to_right(const std::vector<int>& tokens, std::size_t m) {
  if (tokens.empty() || tokens.size() % 2 == 0)
    throw parameter_error("eval_left_to_right: need odd-length operand/operator alternation");
  const int mm = static_cast<int>(m);
  if (tokens[0] < 0 || tokens[0] >= mm) throw parameter_error("eval_left_to_right: bad operand");
  int acc = tokens[0];
  for (std::size_t i = 1; i + 1 < tokens.size(); i += 2) {
    const int op = tokens[i] - mm;
    const int rhs = tokens[i + 1];
    if (op < 0 || op > 2 || rhs < 0 || rhs >= mm)
      throw parameter_error("eval_left_to_right: malformed expression");
    acc = apply_mod_op(acc, op, rhs, m);
  }
  return acc;
}

namespace detail {

inline int parse_bracketed(const std::vector<int>& tokens, std::size_t& pos, std::size_t m) {
  if (pos >= tokens.size()) throw parameter_error("eval_bracketed: truncated expression");
  const int t = tokens[pos];
  if (t >= 0 && t < static_cast<int>(m)) {
    ++pos;
    return t;
  }
  if (t != tok_open(m)) throw parameter_error("eval_bracketed: expected digit or '('");
  ++pos;
  const int lhs = parse_bracketed(tokens, pos, m);
  if (pos >= tokens.size()) throw parameter_error("eval_bracketed: truncated expression");
  const int op = tokens[pos] - static_cast<int>(m);
  if (op < 0 || op > 2) throw parameter_error("eval_bracketed: expected operator");
  ++pos;
  const int rhs = parse_bracketed(tokens, pos, m);
  if (pos >= tokens.size() || tokens[pos] != tok_close(m))
    throw parameter_error("eval_bracketed: expected ')'");
  ++pos;
  return apply_mod_op(lhs, op, rhs, m);
}

}  // namespace detail

// Recursive-descent evaluation of fully parenthesized binary expressions:
// expr := digit | '(' expr op expr ')'.
inline int eval_bracketed(const std::vector<int>& tokens, std::size_t m) {
  std::size_t pos = 0;
  const int v = detail::parse_bracketed(tokens, pos, m);
  if (pos != tokens.size()) throw parameter_error("eval_bracketed: trailing tokens");
  return v;
}

namespace detail {

// Appends a random expression tree with `leaves` leaves; returns its value.
// Internal nodes serialize as '(' left op right ')'.
inline int gen_mod_tree(Rng& rng, std::size_t leaves, std::size_t m, std::vector<int>& out) {
  if (leaves == 1) {
    const int d = static_cast<int>(rng.next_index(m));
    out.push_back(d);
    return d;
  }
  const std::size_t left = 1 + rng.next_index(leaves - 1);
  out.push_back(tok_open(m));
  const int lhs = gen_mod_tree(rng, left, m, out);
  const int op = static_cast<int>(rng.next_index(3));
  out.push_back(static_cast<int>(m) + op);
  const int rhs = gen_mod_tree(rng, leaves - left, m, out);
  out.push_back(tok_close(m));
  return apply_mod_op(lhs, op, rhs, m);
}

}  // namespace detail

// Without brackets: digit (op digit)* of exactly `length` tokens (odd).
// With brackets: a uniformly split random binary tree; `length` must fit the
// grammar (4*leaves - 3 tokens).
inline TaskInstance gen_modarith(Rng& rng, std::size_t length, std::size_t modulus,
                                 bool brackets) {
  if (modulus < 2) throw parameter_error("gen_modarith: modulus must be >= 2");
  TaskInstance inst;
  if (!brackets) {
    if (length < 1 || length % 2 == 0)
      throw parameter_error("gen_modarith: length must be odd for the bracket-free grammar");
    inst.tokens.push_back(static_cast<int>(rng.next_index(modulus)));
    int acc = inst.tokens[0];
    for (std::size_t i = 1; i < length; i += 2) {
      const int op = static_cast<int>(rng.next_index(3));
      const int d = static_cast<int>(rng.next_index(modulus));
      inst.tokens.push_back(static_cast<int>(modulus) + op);
      inst.tokens.push_back(d);
      acc = apply_mod_op(acc, op, d, modulus);
    }
    inst.label = acc;
  } else {
    if (length % 4 != 1) throw parameter_error("gen_modarith: bracket grammar needs 4L-3 tokens");
    const std::size_t leaves = (length + 3) / 4;
    inst.label = detail::gen_mod_tree(rng, leaves, modulus, inst.tokens);
  }
  return inst;
}

inline double scaled_accuracy(std::size_t correct, std::size_t total, std::size_t num_classes) {
  if (total == 0) throw parameter_error("scaled_accuracy: total must be > 0");
  if (num_classes < 2) throw parameter_error("scaled_accuracy: need >= 2 classes");
  const double acc = static_cast<double>(correct) / static_cast<double>(total);
  const double chance = 1.0 / static_cast<double>(num_classes);
  const double scaled = (acc - chance) / (1.0 - chance);
  return scaled < 0.0 ? 0.0 : scaled;
}

// --- task dispatch -------------------------------------------------------------------

enum class TaskKind { parity, modarith, modarith_brackets };

struct Task {
  TaskKind kind = TaskKind::parity;
  std::size_t modulus = 5;

  std::size_t vocab() const {
    switch (kind) {
      case TaskKind::parity: return 2;
      case TaskKind::modarith: return modulus + 3;
      case TaskKind::modarith_brackets: return modulus + 5;
    }
    throw parameter_error("Task: bad kind");
  }
  std::size_t num_classes() const { return kind == TaskKind::parity ? 2 : modulus; }

  // nearest grammar-valid length <= len (never below the shortest valid form)
  std::size_t round_length(std::size_t len) const {
    switch (kind) {
      case TaskKind::parity: return len < 1 ? 1 : len;
      case TaskKind::modarith: return len < 3 ? 3 : (len % 2 == 1 ? len : len - 1);
      case TaskKind::modarith_brackets: {
        if (len < 5) return 5;  // one operator: ( d op d )
        return len - (len + 3) % 4;
      }
    }
    throw parameter_error("Task: bad kind");
  }

  TaskInstance sample(Rng& rng, std::size_t length) const {
    switch (kind) {
      case TaskKind::parity: return gen_parity(rng, length);
      case TaskKind::modarith: return gen_modarith(rng, length, modulus, false);
      case TaskKind::modarith_brackets: return gen_modarith(rng, length, modulus, true);
    }
    throw parameter_error("Task: bad kind");
  }
};

inline Task task_by_name(const std::string& name) {
  if (name == "parity") return {TaskKind::parity, 5};
  if (name == "mod-arith") return {TaskKind::modarith, 5};
  if (name == "mod-arith-brackets") return {TaskKind::modarith_brackets, 5};
  throw parameter_error("unknown task: " + name);
}

// --- curriculum ------------------------------------------------------------------------

struct Curriculum {
  std::size_t min_len = 3;
  std::vector<std::size_t> max_len_schedule = {40, 80, 160};
  std::size_t eval_len = 256;
  std::size_t steps_per_stage = 2000;
  std::size_t batch_size = 64;
  std::size_t eval_every = 250;
  std::size_t eval_instances = 256;
  std::size_t final_eval_instances = 0;  // 0 = same as eval_instances
  double lr = 1e-3;
  double early_stop_target = -1.0;  // >= 0: stop once eval scaled accuracy reaches it

  void validate() const {
    if (max_len_schedule.empty()) throw parameter_error("curriculum: empty stage schedule");
    for (std::size_t ml : max_len_schedule)
      if (min_len > ml) throw parameter_error("curriculum: min_len exceeds a stage max_len");
    if (eval_len <= max_len_schedule.back())
      throw parameter_error("curriculum: eval_len must exceed the final training max_len");
    if (batch_size == 0 || steps_per_stage == 0)
      throw parameter_error("curriculum: batch_size and steps_per_stage must be positive");
  }
};

struct HistoryRow {
  std::size_t step = 0;   // global step, 1-based
  std::size_t stage = 0;  // 0-based stage index
  std::size_t max_len = 0;
  double train_loss = 0.0;
  double eval_scaled_acc = -1.0;  // last measured; -1 before the first evaluation
};

struct CurriculumResult {
  std::vector<HistoryRow> history;
  double final_scaled_acc = 0.0;
  bool diverged = false;
  std::size_t steps_run = 0;
};

// Fresh instances at a fixed length; all sequences in a batch share a length.
inline double evaluate_scaled(Model& m, const Task& task, std::size_t length, std::size_t count,
                              Rng& rng) {
  const std::size_t chunk = 32;
  std::size_t correct = 0, total = 0;
  while (total < count) {
    const std::size_t bsz = std::min(chunk, count - total);
    std::vector<int> tokens(bsz * length);
    std::vector<int> labels(bsz);
    for (std::size_t i = 0; i < bsz; ++i) {
      const TaskInstance inst = task.sample(rng, length);
      for (std::size_t s = 0; s < length; ++s) tokens[i * length + s] = inst.tokens[s];
      labels[i] = inst.label;
    }
    const std::vector<int> pred = predict_last(m, tokens, bsz, length);
    for (std::size_t i = 0; i < bsz; ++i) correct += (pred[i] == labels[i]);
    total += bsz;
  }
  return scaled_accuracy(correct, total, task.num_classes());
}

inline CurriculumResult run_curriculum(const ModelConfig& base_cfg, const Task& task,
                                       const Curriculum& cur, std::uint64_t seed) {
  cur.validate();
  ModelConfig mc = base_cfg;
  mc.vocab = task.vocab();
  mc.num_classes = task.num_classes();
  mc.seed = seed;
  Model m = init_model(mc);
  ad::AdamState opt;
  Rng train_rng = Rng::substream(seed, 0x7472, 0);
  Rng eval_rng = Rng::substream(seed, 0x6576, 0);

  CurriculumResult result;
  const std::size_t eval_len = task.round_length(cur.eval_len);
  double last_eval = -1.0;
  std::size_t global_step = 0;
  bool stop = false;
  for (std::size_t stage = 0; stage < cur.max_len_schedule.size() && !stop; ++stage) {
    const std::size_t max_len = cur.max_len_schedule[stage];
    for (std::size_t step = 0; step < cur.steps_per_stage && !stop; ++step) {
      const std::size_t span = max_len - cur.min_len + 1;
      const std::size_t length = task.round_length(cur.min_len + train_rng.next_index(span));
      std::vector<int> tokens(cur.batch_size * length);
      std::vector<int> labels(cur.batch_size);
      for (std::size_t i = 0; i < cur.batch_size; ++i) {
        const TaskInstance inst = task.sample(train_rng, length);
        for (std::size_t s = 0; s < length; ++s) tokens[i * length + s] = inst.tokens[s];
        labels[i] = inst.label;
      }
      double loss = 0.0;
      try {
        loss = train_step(m, tokens, labels, cur.batch_size, length, opt, cur.lr);
      } catch (const numerical_error&) {
        result.diverged = true;
        stop = true;
      }
      ++global_step;
      if (!result.diverged &&
          (global_step % cur.eval_every == 0 || step + 1 == cur.steps_per_stage)) {
        last_eval = evaluate_scaled(m, task, eval_len, cur.eval_instances, eval_rng);
        if (cur.early_stop_target >= 0.0 && last_eval >= cur.early_stop_target) stop = true;
      }
      result.history.push_back({global_step, stage, max_len, loss, last_eval});
    }
  }
  result.steps_run = global_step;
  const std::size_t final_count =
      cur.final_eval_instances ? cur.final_eval_instances : cur.eval_instances;
  result.final_scaled_acc =
      result.diverged ? 0.0 : evaluate_scaled(m, task, eval_len, final_count, eval_rng);
  return result;
}

inline void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows) {
  std::ofstream f(path);
  if (!f) throw parameter_error("cannot open history CSV path: " + path);
  f << "step,stage,max_len,train_loss,eval_scaled_acc\n";
  for (const HistoryRow& r : rows)
    f << r.step << ',' << r.stage << ',' << r.max_len << ',' << r.train_loss << ','
      << r.eval_scaled_acc << '\n';
}

// --- character-level smoke corpus --------------------------------------------------------

inline constexpr std::size_t kSmokeVocabSize = 28;  // 'a'..'z', space, period

// Deterministic word-salad corpus: seeded word choices joined by spaces,
// sentences ended with periods. Token ids: 0..25 letters, 26 space, 27 period.
inline std::vector<int> gen_smoke_corpus(std::uint64_t seed, std::size_t n_tokens) {
  static const char* kWords[] = {
      "state",  "space",   "model",  "scan",   "mask",   "chunk", "rotary", "trace",
      "signal", "kernel",  "stable", "decay",  "gate",   "input", "output", "update",
      "linear", "hidden",  "string", "parity", "stream", "block", "norm",   "bias",
      "angle",  "measure", "order",  "bound",  "exact",  "sum"};
  constexpr std::size_t kNumWords = sizeof(kWords) / sizeof(kWords[0]);
  Rng rng = Rng::substream(seed, 0x636f, 0);
  std::vector<int> out;
  out.reserve(n_tokens + 16);
  while (out.size() < n_tokens) {
    const std::size_t sentence_words = 4 + rng.next_index(8);
    for (std::size_t w = 0; w < sentence_words; ++w) {
      const char* word = kWords[rng.next_index(kNumWords)];
      for (const char* c = word; *c; ++c) out.push_back(*c - 'a');
      out.push_back(w + 1 == sentence_words ? 27 : 26);
    }
    out.push_back(26);
  }
  out.resize(n_tokens);
  return out;
}

// Next-token training on random corpus windows; returns the per-step losses.
inline std::vector<double> run_lm_smoke(const Mamba3BlockConfig& block_cfg,
                                        const std::vector<int>& corpus, std::size_t steps,
                                        std::size_t batch, std::size_t T, double lr,
                                        std::uint64_t seed) {
  if (corpus.size() < T + 2) throw parameter_error("run_lm_smoke: corpus shorter than window");
  ModelConfig mc;
  mc.vocab = kSmokeVocabSize;
  mc.num_classes = kSmokeVocabSize;
  mc.n_layers = 1;
  mc.seed = seed;
  mc.block = block_cfg;
  Model m = init_model(mc);
  ad::AdamState opt;
  Rng rng = Rng::substream(seed, 0x736d, 0);
  std::vector<double> losses;
  losses.reserve(steps);
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<int> tokens(batch * T), next(batch * T);
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t start = rng.next_index(corpus.size() - T - 1);
      for (std::size_t s = 0; s < T; ++s) {
        tokens[i * T + s] = corpus[start + s];
        next[i * T + s] = corpus[start + s + 1];
      }
    }
    losses.push_back(train_step_lm(m, tokens, next, batch, T, opt, lr));
  }
  return losses;
}

}  // namespace mamba3
