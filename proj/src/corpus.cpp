#include "exitdepth/corpus.hpp"

#include <fstream>
#include <random>
#include <sstream>

#include "exitdepth/errors.hpp"
#include "exitdepth/vocab.hpp"

namespace exitdepth {

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy:
      return "copy";
    case TaskKind::reverse:
      return "reverse";
    case TaskKind::mixed_difficulty:
      return "mixed_difficulty";
  }
  return "unknown";
}

TaskKind parse_task(std::string_view s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  if (s == "mixed_difficulty" || s == "mixed") return TaskKind::mixed_difficulty;
  throw UsageError("unknown task '" + std::string(s) + "'");
}

void SyntheticTask::validate() const {
  if (vocab < 4) throw UsageError("task: vocab must be >= 4 (pad, bos, eos, unk are reserved)");
  if (vocab == tokens::first_content) throw UsageError("task: vocab leaves no content tokens");
  if (min_len < 1 || max_len < min_len) throw UsageError("task: need 1 <= min_len <= max_len");
  if (train_size < 0 || valid_size < 0 || test_size < 0) throw UsageError("task: sizes must be >= 0");
  if (window < 1) throw UsageError("task: window must be >= 1");
}

std::vector<int> make_target(const SyntheticTask& task, const std::vector<int>& source) {
  switch (task.kind) {
    case TaskKind::copy:
      return source;
    case TaskKind::reverse:
      return {source.rbegin(), source.rend()};
    case TaskKind::mixed_difficulty: {
      const int content = task.vocab - tokens::first_content;
      std::vector<int> out(source.size());
      for (std::size_t i = 0; i < source.size(); ++i) {
        if (i % 2 == 0) {
          out[i] = source[i];
          continue;
        }
        int acc = 0;
        const std::size_t lo = i + 1 >= static_cast<std::size_t>(task.window) ? i + 1 - task.window : 0;
        for (std::size_t j = lo; j <= i; ++j) acc += source[j] - tokens::first_content;
        out[i] = tokens::first_content + ((acc % content) + content) % content;
      }
      return out;
    }
  }
  return source;
}

Corpus generate_corpus(const SyntheticTask& task) {
  task.validate();
  std::mt19937_64 rng(task.seed);
  std::uniform_int_distribution<int> len(task.min_len, task.max_len);
  std::uniform_int_distribution<int> tok(tokens::first_content, task.vocab - 1);
  auto draw = [&](int count) {
    std::vector<SequencePair> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      std::vector<int> src(static_cast<std::size_t>(len(rng)));
      for (int& t : src) t = tok(rng);
      out.push_back({src, make_target(task, src)});
    }
    return out;
  };
  Corpus c;
  c.train = draw(task.train_size);
  c.valid = draw(task.valid_size);
  c.test = draw(task.test_size);
  return c;
}

void write_sequences(const std::filesystem::path& path, const std::vector<std::vector<int>>& seqs) {
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write " + path.string());
  for (const auto& s : seqs) {
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " " : "") << s[i];
    os << '\n';
  }
}

std::vector<std::vector<int>> read_sequences(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read " + path.string());
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::vector<int> seq;
    int v;
    while (ls >> v) seq.push_back(v);
    if (!ls.eof()) throw UsageError("malformed token in " + path.string());
    out.push_back(std::move(seq));
  }
  return out;
}

void write_pairs(const std::filesystem::path& stem, const std::vector<SequencePair>& pairs) {
  std::vector<std::vector<int>> src, tgt;
  for (const auto& p : pairs) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  write_sequences(stem.string() + ".src", src);
  write_sequences(stem.string() + ".tgt", tgt);
}

std::vector<SequencePair> read_pairs(const std::filesystem::path& stem) {
  auto src = read_sequences(stem.string() + ".src");
  auto tgt = read_sequences(stem.string() + ".tgt");
  if (src.size() != tgt.size()) throw UsageError("source and target files differ in line count");
  std::vector<SequencePair> out;
  for (std::size_t i = 0; i < src.size(); ++i) out.push_back({std::move(src[i]), std::move(tgt[i])});
  return out;
}

}  // namespace exitdepth
