#include "flashkit/data.hpp"

#include <fstream>
#include <iterator>
#include <random>
#include <stdexcept>
#include <string>

#include "flashkit/tensor.hpp"

namespace flashkit {

std::vector<std::uint8_t> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw std::runtime_error("error reading corpus file '" + path.string() + "'");
  if (bytes.empty()) throw std::runtime_error("corpus empty: '" + path.string() + "'");
  return bytes;
}

std::vector<std::int32_t> segment_ids_for(std::span<const std::uint8_t> window, std::uint8_t delimiter) {
  std::vector<std::int32_t> ids(window.size());
  std::int32_t id = 0;
  for (std::size_t t = 0; t < window.size(); ++t) {
    ids[t] = id;
    if (window[t] == delimiter) ++id;
  }
  return ids;
}

namespace {

void append_window(Batch& b, std::span<const std::uint8_t> window, std::uint8_t delimiter) {
  for (std::uint8_t byte : window) b.tokens.push_back(byte);
  const auto ids = segment_ids_for(window, delimiter);
  b.segment_ids.insert(b.segment_ids.end(), ids.begin(), ids.end());
}

}  // namespace

BatchStream::BatchStream(std::span<const std::uint8_t> corpus, BatchOptions options)
    : corpus_(corpus), options_(options) {
  if (options_.batch == 0 || options_.length == 0) throw ContractError("batch size and length must be positive");
  if (options_.chunk != 0 && options_.length % options_.chunk != 0) {
    throw ContractError("chunk size " + std::to_string(options_.chunk) + " does not divide context length " +
                        std::to_string(options_.length));
  }
  if (corpus_.size() < options_.length) {
    throw ContractError("corpus of " + std::to_string(corpus_.size()) + " bytes is shorter than one window of " +
                        std::to_string(options_.length));
  }
}

Batch BatchStream::at(std::uint64_t step) const {
  // A generator per step keeps batches independent of how many were drawn.
  std::seed_seq seq{static_cast<std::uint32_t>(options_.seed), static_cast<std::uint32_t>(options_.seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32), 0x6261u};
  std::mt19937_64 rng(seq);
  const std::uint64_t span = corpus_.size() - options_.length + 1;
  Batch b;
  b.batch = options_.batch;
  b.length = options_.length;
  b.tokens.reserve(b.batch * b.length);
  b.segment_ids.reserve(b.batch * b.length);
  for (std::size_t r = 0; r < b.batch; ++r) {
    const std::uint64_t offset = rng() % span;
    append_window(b, corpus_.subspan(offset, options_.length), options_.delimiter);
  }
  return b;
}

std::vector<Batch> fixed_batches(std::span<const std::uint8_t> corpus, std::size_t count, std::size_t batch,
                                 std::size_t length, std::uint8_t delimiter) {
  if (corpus.size() < length) {
    throw ContractError("held-out text of " + std::to_string(corpus.size()) + " bytes is shorter than one window");
  }
  const std::size_t windows = count * batch;
  const std::size_t span = corpus.size() - length;
  std::vector<Batch> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i].batch = batch;
    out[i].length = length;
    for (std::size_t r = 0; r < batch; ++r) {
      const std::size_t w = i * batch + r;
      const std::size_t offset = windows > 1 ? span * w / (windows - 1) : 0;
      append_window(out[i], corpus.subspan(offset, length), delimiter);
    }
  }
  return out;
}

CorpusSplit split_corpus(std::span<const std::uint8_t> corpus, double holdout_fraction) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ContractError("hold-out fraction must be in (0, 1)");
  const auto held = static_cast<std::size_t>(static_cast<double>(corpus.size()) * holdout_fraction);
  return {corpus.first(corpus.size() - held), corpus.last(held)};
}

}  // namespace flashkit
