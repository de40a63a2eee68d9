#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "exitdepth/model.hpp"

namespace exitdepth {

enum class TaskKind { copy, reverse, mixed_difficulty };
std::string to_string(TaskKind k);
TaskKind parse_task(std::string_view s);

struct SyntheticTask {
  TaskKind kind = TaskKind::copy;
  int vocab = 16;  // includes the four reserved ids
  int min_len = 1;
  int max_len = 12;
  int train_size = 10000;
  int valid_size = 200;
  int test_size = 200;
  int window = 2;  // k for mixed_difficulty
  std::uint64_t seed = 1;

  void validate() const;
};

struct Corpus {
  std::vector<SequencePair> train;
  std::vector<SequencePair> valid;
  std::vector<SequencePair> test;
};

/// Target for a given source. mixed_difficulty: even (0-based) positions copy
/// the source token, odd positions hold the sum of the last `window` source
/// offsets modulo (vocab - 4).
std::vector<int> make_target(const SyntheticTask& task, const std::vector<int>& source);
Corpus generate_corpus(const SyntheticTask& task);

/// One sentence per line, whitespace-separated ids.
void write_sequences(const std::filesystem::path& path, const std::vector<std::vector<int>>& seqs);
std::vector<std::vector<int>> read_sequences(const std::filesystem::path& path);
/// Writes <stem>.src and <stem>.tgt.
void write_pairs(const std::filesystem::path& stem, const std::vector<SequencePair>& pairs);
std::vector<SequencePair> read_pairs(const std::filesystem::path& stem);

}  // namespace exitdepth
