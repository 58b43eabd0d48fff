// Copyright (c) 2026 the dualdit authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "dualdit/tensor.hpp"

namespace dualdit {

enum class Branch { expression, gesture };

inline const char* branch_name(Branch b) { return b == Branch::expression ? "expression" : "gesture"; }
inline Branch other_branch(Branch b) { return b == Branch::expression ? Branch::gesture : Branch::expression; }

// FNV-1a over the tensor bytes; embedded at write, verified at read, so a torn
// read (a snapshot mixing two writes) cannot go unnoticed.
inline std::uint64_t tensor_checksum(const Tensor& t) {
    std::uint64_t h = 14695981039346656037ull;
    const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data());
    const std::size_t n = static_cast<std::size_t>(t.size()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

// one cross-read event; serialized as a JSON line in the staleness trace
struct TraceRecord {
    Branch reader;
    int layer = 0;
    int own_step = 0;
    std::int64_t counterpart_version = -1;  // -1: slot empty, self-features substituted
    int lag = 0;                            // counterpart steps completed since the write
};

struct BufferSnapshot {
    Tensor features;
    std::int64_t version = -1;  // -1 when the slot has never been written
    int writer_step = -1;
};

// Latest per-layer features of each branch with monotone write versions.
// publish/read copy whole tensors under the slot lock (snapshot semantics).
class FeatureBuffer {
public:
    FeatureBuffer(int layers) : layers_(layers), slots_(static_cast<std::size_t>(2 * layers)) {}

    void publish(Branch b, int layer, int step, const Tensor& features) {
        Slot& s = slot(b, layer);
        const std::uint64_t sum = tensor_checksum(features);
        std::lock_guard<std::mutex> lock(s.mu);
        s.snap.features = features;
        s.snap.version += 1;
        if (s.snap.version == 0) s.snap.version = 1;  // first write is version 1
        s.snap.writer_step = step;
        s.checksum = sum;
    }

    // Copies the latest published snapshot; empty optional if never written.
    std::optional<BufferSnapshot> read(Branch b, int layer) const {
        const Slot& s = slot(b, layer);
        std::lock_guard<std::mutex> lock(s.mu);
        if (s.snap.version < 0) return std::nullopt;
        BufferSnapshot out = s.snap;
        if (tensor_checksum(out.features) != s.checksum)
            throw NumericError("FeatureBuffer: torn read detected (checksum mismatch)");
        return out;
    }

    std::int64_t current_version(Branch b, int layer) const {
        const Slot& s = slot(b, layer);
        std::lock_guard<std::mutex> lock(s.mu);
        return s.snap.version < 0 ? -1 : s.snap.version;
    }

    int layers() const { return layers_; }

private:
    struct Slot {
        mutable std::mutex mu;
        BufferSnapshot snap{Tensor(), -1, -1};
        std::uint64_t checksum = 0;
    };

    Slot& slot(Branch b, int layer) {
        return slots_[static_cast<std::size_t>((b == Branch::expression ? 0 : layers_) + layer)];
    }
    const Slot& slot(Branch b, int layer) const {
        return slots_[static_cast<std::size_t>((b == Branch::expression ? 0 : layers_) + layer)];
    }

    int layers_;
    mutable std::vector<Slot> slots_;
};

}  // namespace dualdit
