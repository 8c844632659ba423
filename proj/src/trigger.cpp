#include "ffscope/trigger.hpp"

#include "ffscope/error.hpp"
#include "ffscope/parallel.hpp"
#include "ffscope/weight_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include <fmt/format.h>
#include <json.hpp>

namespace ffscope {

namespace {

constexpr char kStoreMagic[8] = {'F', 'F', 'S', 'T', 'O', 'R', 'E', '1'};
constexpr std::uint32_t kStoreVersion = 1;

struct WorseFirst {
    bool operator()(const TriggerStore::Entry& a, const TriggerStore::Entry& b) const noexcept {
        return TriggerStore::better(a, b);
    }
};

void check_key(KeyId key, std::size_t n_layers, std::size_t d_ff) {
    if (key.layer < 1 || key.layer > n_layers || key.index < 1 || key.index > d_ff) {
        throw Error(ErrorCode::KeyOutOfBounds,
                    fmt::format("key ({}, {}) outside {} layers x {} keys", key.layer, key.index, n_layers, d_ff));
    }
}

template <typename T>
void put(std::ostream& out, T value) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.write(bytes, sizeof(T));
}

template <typename T>
T take(std::istream& in) {
    char bytes[sizeof(T)];
    if (!in.read(bytes, sizeof(T))) {
        throw Error(ErrorCode::CorruptDirectory, "store file is truncated");
    }
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

// Sorted ids -> coalesced half-open ranges.
std::vector<std::pair<PrefixId, PrefixId>> ranges_of(std::vector<PrefixId> ids) {
    std::sort(ids.begin(), ids.end());
    std::vector<std::pair<PrefixId, PrefixId>> ranges;
    for (PrefixId id : ids) {
        if (!ranges.empty() && ranges.back().second == id) {
            ++ranges.back().second;
        } else if (ranges.empty() || ranges.back().second < id) {
            ranges.emplace_back(id, id + 1);
        } else {
            throw Error(ErrorCode::InvalidArgument, fmt::format("prefix id {} appears twice", id));
        }
    }
    return ranges;
}

} // namespace

float activation_coefficient(const ForwardTrace& trace, KeyId key, const ModelConfig& config,
                             const CoefficientMode& mode) {
    check_key(key, config.n_layers, config.d_ff);
    const Matrix& products = trace.key_products.at(key.layer - 1);
    const std::size_t column = key.index - 1;
    const std::size_t first = mode.last_position_only ? products.rows() - 1 : 0;
    float best = -std::numeric_limits<float>::infinity();
    for (std::size_t p = first; p < products.rows(); ++p) {
        float value = products(p, column);
        if (mode.post_nonlinearity) {
            value = activate(value, config.nonlinearity);
        }
        best = std::max(best, value);
    }
    return best;
}

TriggerStore::TriggerStore(std::size_t n_layers, std::size_t d_ff, std::size_t t, std::uint64_t model_hash,
                           std::uint64_t corpus_hash)
    : n_layers_(n_layers), d_ff_(d_ff), t_(t), model_hash_(model_hash), corpus_hash_(corpus_hash),
      heaps_(n_layers * d_ff) {
    if (t == 0) {
        throw Error(ErrorCode::InvalidArgument, "trigger capacity t must be at least 1");
    }
}

bool TriggerStore::contains(KeyId key) const noexcept {
    return key.layer >= 1 && key.layer <= n_layers_ && key.index >= 1 && key.index <= d_ff_;
}

std::size_t TriggerStore::flat_index(KeyId key) const {
    check_key(key, n_layers_, d_ff_);
    return (key.layer - 1) * d_ff_ + (key.index - 1);
}

KeyId TriggerStore::key_at(std::size_t flat) const noexcept {
    return {static_cast<std::uint32_t>(flat / d_ff_ + 1), static_cast<std::uint32_t>(flat % d_ff_ + 1)};
}

void TriggerStore::offer(std::size_t flat_key, PrefixId prefix, float coefficient) {
    auto& heap = heaps_[flat_key];
    const Entry entry{coefficient, prefix};
    if (heap.size() < t_) {
        heap.push_back(entry);
        std::push_heap(heap.begin(), heap.end(), WorseFirst{});
        return;
    }
    if (better(entry, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), WorseFirst{});
        heap.back() = entry;
        std::push_heap(heap.begin(), heap.end(), WorseFirst{});
    }
}

void TriggerStore::mark_scanned(PrefixId begin, PrefixId end) {
    if (begin >= end) {
        return;
    }
    auto it = std::lower_bound(ranges_.begin(), ranges_.end(), std::make_pair(begin, end));
    if ((it != ranges_.end() && it->first < end) || (it != ranges_.begin() && std::prev(it)->second > begin)) {
        throw Error(ErrorCode::IncompatibleStores,
                    fmt::format("prefix range [{}, {}) was already scanned", begin, end));
    }
    it = ranges_.insert(it, {begin, end});
    if (std::next(it) != ranges_.end() && std::next(it)->first == it->second) {
        it->second = std::next(it)->second;
        ranges_.erase(std::next(it));
    }
    if (it != ranges_.begin() && std::prev(it)->second == it->first) {
        std::prev(it)->second = it->second;
        ranges_.erase(it);
    }
}

std::vector<TriggerStore::Entry> TriggerStore::sorted_entries(std::size_t flat_key) const {
    auto entries = heaps_.at(flat_key);
    std::sort(entries.begin(), entries.end(), better);
    return entries;
}

std::vector<TriggerRecord> TriggerStore::records(KeyId key) const {
    std::vector<TriggerRecord> out;
    for (const Entry& e : sorted_entries(flat_index(key))) {
        out.push_back({key, e.prefix, e.coefficient});
    }
    return out;
}

bool operator==(const TriggerStore& a, const TriggerStore& b) {
    if (a.n_layers_ != b.n_layers_ || a.d_ff_ != b.d_ff_ || a.t_ != b.t_ || a.model_hash_ != b.model_hash_ ||
        a.corpus_hash_ != b.corpus_hash_ || a.ranges_ != b.ranges_) {
        return false;
    }
    for (std::size_t k = 0; k < a.heaps_.size(); ++k) {
        const auto x = a.sorted_entries(k);
        const auto y = b.sorted_entries(k);
        if (x.size() != y.size()) {
            return false;
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (x[i].prefix != y[i].prefix ||
                std::memcmp(&x[i].coefficient, &y[i].coefficient, sizeof(float)) != 0) {
                return false;
            }
        }
    }
    return true;
}

TriggerStore scan_range(const Model& model, const Corpus& corpus, std::size_t t, PrefixId begin, PrefixId end,
                        const CoefficientMode& mode) {
    const ModelConfig& config = model.config();
    TriggerStore store(config.n_layers, config.d_ff, t, weights_hash(config, model.weights()), corpus.hash());
    end = std::min<PrefixId>(end, corpus.size());
    std::vector<PrefixId> ids;
    for (PrefixId i = begin; i < end; ++i) {
        const CodePrefix& prefix = corpus.prefixes[i];
        const ForwardTrace trace = model.forward(prefix.tokens);
        for (std::size_t l = 0; l < config.n_layers; ++l) {
            const Matrix& products = trace.key_products[l];
            const std::size_t first = mode.last_position_only ? products.rows() - 1 : 0;
            for (std::size_t k = 0; k < config.d_ff; ++k) {
                float best = -std::numeric_limits<float>::infinity();
                for (std::size_t p = first; p < products.rows(); ++p) {
                    const float raw = products(p, k);
                    best = std::max(best, mode.post_nonlinearity ? activate(raw, config.nonlinearity) : raw);
                }
                store.offer(l * config.d_ff + k, prefix.id, best);
            }
        }
        ids.push_back(prefix.id);
    }
    for (const auto& [lo, hi] : ranges_of(std::move(ids))) {
        store.mark_scanned(lo, hi);
    }
    return store;
}

TriggerStore scan(const Model& model, const Corpus& corpus, std::size_t t, const ScanOptions& options) {
    if (corpus.size() == 0) {
        throw Error(ErrorCode::EmptyCorpus, "cannot scan an empty corpus");
    }
    if (t == 0) {
        throw Error(ErrorCode::InvalidArgument, "trigger capacity t must be at least 1");
    }
    const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, corpus.size()));
    std::vector<TriggerStore> shards(threads);
    for_each_shard(corpus.size(), threads, [&](std::size_t shard, std::size_t begin, std::size_t end) {
        shards[shard] = scan_range(model, corpus, t, begin, end, options.mode);
    });
    TriggerStore result = std::move(shards.front());
    for (std::size_t s = 1; s < shards.size(); ++s) {
        result = merge(result, shards[s]);
    }
    return result;
}

TriggerStore merge(const TriggerStore& a, const TriggerStore& b) {
    if (a.capacity() == 0) {
        return b;
    }
    if (b.capacity() == 0) {
        return a;
    }
    if (a.capacity() != b.capacity() || a.n_layers() != b.n_layers() || a.d_ff() != b.d_ff()) {
        throw Error(ErrorCode::IncompatibleStores,
                    fmt::format("stores differ in shape: t {} vs {}, {}x{} vs {}x{} keys", a.capacity(),
                                b.capacity(), a.n_layers(), a.d_ff(), b.n_layers(), b.d_ff()));
    }
    if (a.model_hash() != b.model_hash()) {
        throw Error(ErrorCode::IncompatibleStores, "stores were produced by different models");
    }
    if (a.corpus_hash() != b.corpus_hash()) {
        throw Error(ErrorCode::IncompatibleStores, "stores were produced over different corpora");
    }
    TriggerStore out(a.n_layers(), a.d_ff(), a.capacity(), a.model_hash(), a.corpus_hash());
    for (const auto& [lo, hi] : a.scanned_ranges()) {
        out.mark_scanned(lo, hi);
    }
    for (const auto& [lo, hi] : b.scanned_ranges()) {
        out.mark_scanned(lo, hi);
    }
    for (std::size_t k = 0; k < a.n_layers() * a.d_ff(); ++k) {
        for (const auto& e : a.sorted_entries(k)) {
            out.offer(k, e.prefix, e.coefficient);
        }
        for (const auto& e : b.sorted_entries(k)) {
            out.offer(k, e.prefix, e.coefficient);
        }
    }
    return out;
}

std::vector<ResolvedTrigger> top_triggers(const TriggerStore& store, const Corpus& corpus, KeyId key,
                                          std::size_t k) {
    std::vector<ResolvedTrigger> out;
    for (const auto& e : store.sorted_entries(store.flat_index(key))) {
        if (out.size() == k) {
            break;
        }
        if (e.prefix >= corpus.size()) {
            throw Error(ErrorCode::IndexOutOfBounds,
                        fmt::format("prefix {} not present in a corpus of {}", e.prefix, corpus.size()));
        }
        out.push_back({e.prefix, e.coefficient, corpus.prefixes[e.prefix].text});
    }
    return out;
}

void write_store(const std::filesystem::path& path, const TriggerStore& store) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open '{}' for writing", path.string()));
    }
    out.write(kStoreMagic, sizeof(kStoreMagic));
    put<std::uint32_t>(out, kStoreVersion);
    put<std::uint64_t>(out, store.model_hash());
    put<std::uint64_t>(out, store.corpus_hash());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(store.capacity()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(store.n_layers()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(store.d_ff()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(store.scanned_ranges().size()));
    for (const auto& [lo, hi] : store.scanned_ranges()) {
        put<std::uint64_t>(out, lo);
        put<std::uint64_t>(out, hi);
    }
    for (std::size_t k = 0; k < store.n_layers() * store.d_ff(); ++k) {
        const auto entries = store.sorted_entries(k);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
        for (const auto& e : entries) {
            put<std::uint64_t>(out, e.prefix);
            put<float>(out, e.coefficient);
        }
    }
    out.flush();
    if (!out) {
        throw Error(ErrorCode::IoFailure, fmt::format("write to '{}' failed", path.string()));
    }
}

TriggerStore read_store(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::IoFailure, fmt::format("cannot open '{}'", path.string()));
    }
    char magic[sizeof(kStoreMagic)];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kStoreMagic, sizeof(magic)) != 0) {
        throw Error(ErrorCode::BadMagic, fmt::format("'{}' is not a trigger store", path.string()));
    }
    const auto version = take<std::uint32_t>(in);
    if (version != kStoreVersion) {
        throw Error(ErrorCode::VersionUnsupported, fmt::format("store version {}", version));
    }
    const auto model_hash = take<std::uint64_t>(in);
    const auto corpus_hash = take<std::uint64_t>(in);
    const auto t = take<std::uint32_t>(in);
    const auto n_layers = take<std::uint32_t>(in);
    const auto d_ff = take<std::uint32_t>(in);
    if (t == 0) {
        throw Error(ErrorCode::CorruptDirectory, "store capacity is zero");
    }
    TriggerStore store(n_layers, d_ff, t, model_hash, corpus_hash);
    const auto n_ranges = take<std::uint32_t>(in);
    for (std::uint32_t r = 0; r < n_ranges; ++r) {
        const auto lo = take<std::uint64_t>(in);
        const auto hi = take<std::uint64_t>(in);
        store.mark_scanned(lo, hi);
    }
    for (std::size_t k = 0; k < static_cast<std::size_t>(n_layers) * d_ff; ++k) {
        const auto count = take<std::uint32_t>(in);
        if (count > t) {
            throw Error(ErrorCode::CorruptDirectory, fmt::format("key {} holds {} > t records", k, count));
        }
        for (std::uint32_t r = 0; r < count; ++r) {
            const auto prefix = take<std::uint64_t>(in);
            const auto coefficient = take<float>(in);
            if (!std::isfinite(coefficient)) {
                throw Error(ErrorCode::CorruptDirectory, "non-finite coefficient in store");
            }
            store.offer(k, prefix, coefficient);
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw Error(ErrorCode::CorruptDirectory, "trailing bytes after store records");
    }
    return store;
}

void export_triggers_jsonl(std::ostream& out, const TriggerStore& store, const Corpus& corpus, std::size_t k) {
    for (std::size_t flat = 0; flat < store.n_layers() * store.d_ff(); ++flat) {
        const KeyId key = store.key_at(flat);
        std::size_t rank = 1;
        for (const auto& trigger : top_triggers(store, corpus, key, k)) {
            nlohmann::json line = {{"layer", key.layer},
                                   {"index", key.index},
                                   {"rank", rank++},
                                   {"coefficient", trigger.coefficient},
                                   {"prefix", trigger.prefix},
                                   {"text", trigger.text}};
            out << line.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
        }
    }
}

} // namespace ffscope
