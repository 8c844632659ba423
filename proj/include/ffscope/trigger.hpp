#pragma once

#include "ffscope/corpus.hpp"
#include "ffscope/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace ffscope {

// 1-based (layer, index) of a key, i.e. row index-1 of layer layer-1's ff_keys.
struct KeyId {
    std::uint32_t layer = 1;
    std::uint32_t index = 1;

    auto operator<=>(const KeyId&) const = default;
};

struct TriggerRecord {
    KeyId key;
    PrefixId prefix = 0;
    float coefficient = 0.0f;
};

// How a prefix's per-position key products reduce to one coefficient.
struct CoefficientMode {
    bool last_position_only = false; // default: max over positions
    bool post_nonlinearity = false;  // default: raw x . k
};

// Throws KeyOutOfBounds.
float activation_coefficient(const ForwardTrace& trace, KeyId key, const ModelConfig& config,
                             const CoefficientMode& mode = {});

// Per-key bounded top-t sets over a corpus. Records are ordered by descending
// coefficient, ties broken by ascending prefix id, which makes the content
// independent of the order prefixes were offered in.
class TriggerStore {
public:
    struct Entry {
        float coefficient = 0.0f;
        PrefixId prefix = 0;
    };

    TriggerStore() = default;
    TriggerStore(std::size_t n_layers, std::size_t d_ff, std::size_t t, std::uint64_t model_hash,
                 std::uint64_t corpus_hash);

    [[nodiscard]] std::size_t capacity() const noexcept { return t_; }
    [[nodiscard]] std::size_t n_layers() const noexcept { return n_layers_; }
    [[nodiscard]] std::size_t d_ff() const noexcept { return d_ff_; }
    [[nodiscard]] std::uint64_t model_hash() const noexcept { return model_hash_; }
    [[nodiscard]] std::uint64_t corpus_hash() const noexcept { return corpus_hash_; }
    // Disjoint, coalesced half-open prefix-id ranges this store has seen.
    [[nodiscard]] const std::vector<std::pair<PrefixId, PrefixId>>& scanned_ranges() const noexcept {
        return ranges_;
    }

    [[nodiscard]] bool contains(KeyId key) const noexcept;
    [[nodiscard]] std::size_t flat_index(KeyId key) const;
    [[nodiscard]] KeyId key_at(std::size_t flat) const noexcept;

    void offer(std::size_t flat_key, PrefixId prefix, float coefficient);
    // Records that [begin, end) has been scanned; throws IncompatibleStores on overlap.
    void mark_scanned(PrefixId begin, PrefixId end);

    // Sorted records for a key (descending coefficient, ascending prefix id).
    [[nodiscard]] std::vector<TriggerRecord> records(KeyId key) const;
    [[nodiscard]] std::vector<Entry> sorted_entries(std::size_t flat_key) const;

    [[nodiscard]] static bool better(const Entry& a, const Entry& b) noexcept {
        return a.coefficient > b.coefficient || (a.coefficient == b.coefficient && a.prefix < b.prefix);
    }

    friend bool operator==(const TriggerStore& a, const TriggerStore& b);

private:
    std::size_t n_layers_ = 0;
    std::size_t d_ff_ = 0;
    std::size_t t_ = 0;
    std::uint64_t model_hash_ = 0;
    std::uint64_t corpus_hash_ = 0;
    std::vector<std::pair<PrefixId, PrefixId>> ranges_;
    // Each vector is a heap whose front is the weakest retained entry.
    std::vector<std::vector<Entry>> heaps_;
};

struct ScanOptions {
    CoefficientMode mode;
    std::size_t threads = 1;
};

// Streams [begin, end) of the corpus through the model.
TriggerStore scan_range(const Model& model, const Corpus& corpus, std::size_t t, PrefixId begin,
                        PrefixId end, const CoefficientMode& mode = {});

// Whole-corpus scan; with threads > 1, shards are scanned concurrently and merged.
TriggerStore scan(const Model& model, const Corpus& corpus, std::size_t t, const ScanOptions& options = {});

// Per-key union truncated to top t. Requires the same t, shape and model/corpus
// identity, and disjoint scanned ranges (IncompatibleStores otherwise).
TriggerStore merge(const TriggerStore& a, const TriggerStore& b);

struct ResolvedTrigger {
    PrefixId prefix = 0;
    float coefficient = 0.0f;
    std::string text;
};

std::vector<ResolvedTrigger> top_triggers(const TriggerStore& store, const Corpus& corpus, KeyId key,
                                          std::size_t k);

// Binary store file: magic "FFSTORE1", u32 version, u64 model hash, u64 corpus
// hash, u32 t, u32 n_layers, u32 d_ff, u32 range count, ranges as u64 pairs,
// then per key in (layer, index) order a u32 count and count x (u64 prefix, f32 coefficient).
void write_store(const std::filesystem::path& path, const TriggerStore& store);
TriggerStore read_store(const std::filesystem::path& path);

// One JSON object per (key, rank): {"layer", "index", "rank", "coefficient", "prefix", "text"}.
void export_triggers_jsonl(std::ostream& out, const TriggerStore& store, const Corpus& corpus,
                           std::size_t k);

} // namespace ffscope
