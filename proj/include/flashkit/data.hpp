#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace flashkit {

/// Raw bytes of a corpus file. Throws std::runtime_error naming the path when
/// the file is missing or unreadable, and "corpus empty" for an empty file.
std::vector<std::uint8_t> load_corpus(const std::filesystem::path& path);

/// Default byte that separates documents inside a corpus.
inline constexpr std::uint8_t kDocumentDelimiter = 0x00;

/// One training batch of byte tokens. `segment_ids` numbers the documents
/// inside each row starting at 0; an id increases right after a delimiter.
struct Batch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> tokens;       // [batch, length]
  std::vector<std::int32_t> segment_ids;  // [batch, length]
};

/// Document ids for a window of bytes.
std::vector<std::int32_t> segment_ids_for(std::span<const std::uint8_t> window, std::uint8_t delimiter);

struct BatchOptions {
  std::size_t batch = 8;
  std::size_t length = 256;
  /// Chunk size the batches will be regrouped by; 0 when not chunked.
  std::size_t chunk = 0;
  std::uint64_t seed = 0;
  std::uint8_t delimiter = kDocumentDelimiter;
};

/// Deterministic source of batches drawn from random offsets of a corpus.
///
/// The batch for step k depends only on (corpus, options, k), so a stream can
/// be resumed at any step. Throws ContractError at construction when the
/// chunk size does not divide the length or the corpus is shorter than one
/// window.
class BatchStream {
 public:
  BatchStream(std::span<const std::uint8_t> corpus, BatchOptions options);
  Batch at(std::uint64_t step) const;
  const BatchOptions& options() const noexcept { return options_; }

 private:
  std::span<const std::uint8_t> corpus_;
  BatchOptions options_;
};

/// `count` batches of evenly spaced, non-random windows (for evaluation).
std::vector<Batch> fixed_batches(std::span<const std::uint8_t> corpus, std::size_t count, std::size_t batch,
                                 std::size_t length, std::uint8_t delimiter = kDocumentDelimiter);

/// Splits a corpus into a training prefix and a held-out suffix of
/// `holdout_fraction` of the bytes.
struct CorpusSplit {
  std::span<const std::uint8_t> train;
  std::span<const std::uint8_t> held_out;
};
CorpusSplit split_corpus(std::span<const std::uint8_t> corpus, double holdout_fraction);

}  // namespace flashkit
