#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stkit/autodiff.hpp"
#include "stkit/errors.hpp"

namespace stkit {

// Ordered name -> value copy of a model's parameters.
struct ParamSnapshot {
    std::vector<std::pair<std::string, Matrix>> entries;

    const Matrix* find(const std::string& name) const {
        for (const auto& [n, m] : entries)
            if (n == name) return &m;
        return nullptr;
    }
};

// Named parameter collection. Creation order is preserved and defines the
// serialization order; names must be unique.
class ParamStore {
public:
    NodePtr create(const std::string& name, Matrix init, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
        auto p = Node::parameter(std::move(init), name);
        p->requires_grad = trainable;
        index_[name] = params_.size();
        params_.push_back(p);
        return p;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const NodePtr& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
        return params_[it->second];
    }

    const std::vector<NodePtr>& all() const { return params_; }

    std::vector<NodePtr> trainable() const {
        std::vector<NodePtr> out;
        for (const auto& p : params_)
            if (p->requires_grad) out.push_back(p);
        return out;
    }

    void zero_grads() {
        for (const auto& p : params_) p->zero_grad();
    }

    void set_trainable_prefix(const std::string& prefix, bool trainable) {
        for (const auto& p : params_)
            if (p->name.rfind(prefix, 0) == 0) p->requires_grad = trainable;
    }

    ParamSnapshot snapshot() const {
        ParamSnapshot s;
        s.entries.reserve(params_.size());
        for (const auto& p : params_) s.entries.emplace_back(p->name, p->value);
        return s;
    }

    // Copies matching entries into this store. With require_all, every
    // parameter here must be present in the snapshot. Shape conflicts and
    // missing names are collected and reported together.
    void load(const ParamSnapshot& snap, bool require_all = true) {
        std::string bad;
        for (const auto& p : params_) {
            const Matrix* m = snap.find(p->name);
            if (!m) {
                if (require_all) bad += (bad.empty() ? "" : ", ") + p->name + " (missing)";
                continue;
            }
            if (!m->same_shape(p->value)) {
                bad += (bad.empty() ? "" : ", ") + p->name + " (shape " + m->shape_str() + " vs " +
                       p->value.shape_str() + ")";
                continue;
            }
            p->value = *m;
        }
        if (!bad.empty()) throw LoadError("ParamStore::load: " + bad);
    }

private:
    std::vector<NodePtr> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Elementwise arithmetic mean over checkpoints with identical parameter
// lists and shapes.
inline ParamSnapshot average_checkpoints(const std::vector<ParamSnapshot>& checkpoints) {
    if (checkpoints.empty()) throw DataError("average_checkpoints: no checkpoints");
    ParamSnapshot avg = checkpoints.front();
    for (std::size_t c = 1; c < checkpoints.size(); ++c) {
        const auto& snap = checkpoints[c];
        if (snap.entries.size() != avg.entries.size())
            throw ShapeError("average_checkpoints: parameter count mismatch");
        for (std::size_t i = 0; i < avg.entries.size(); ++i) {
            auto& [name, acc] = avg.entries[i];
            const auto& [other_name, m] = snap.entries[i];
            if (name != other_name || !acc.same_shape(m))
                throw ShapeError("average_checkpoints: mismatch at '" + name + "' vs '" + other_name + "'");
            for (std::size_t k = 0; k < acc.size(); ++k) acc.raw()[k] += m.raw()[k];
        }
    }
    const double inv = 1.0 / static_cast<double>(checkpoints.size());
    for (auto& [name, m] : avg.entries)
        for (double& v : m.raw()) v *= inv;
    return avg;
}

// ---------------------------------------------------------------------------
// Binary serialization (little-endian)
//
// Checkpoint: magic "STKCKPT1", u32 version, u64 count, then per parameter
// u32 name length, name bytes, u64 rows, u64 cols, row-major f64 data.
// Standalone matrix files carry just the rows/cols/data part.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'K', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw LoadError(std::string("checkpoint: truncated while reading ") + what);
    return v;
}

inline void write_matrix_body(std::ostream& os, const Matrix& m) {
    write_pod<std::uint64_t>(os, m.rows());
    write_pod<std::uint64_t>(os, m.cols());
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

inline Matrix read_matrix_body(std::istream& is) {
    const auto rows = read_pod<std::uint64_t>(is, "rows");
    const auto cols = read_pod<std::uint64_t>(is, "cols");
    if (rows > (1u << 24) || cols > (1u << 24)) throw LoadError("checkpoint: implausible matrix shape");
    Matrix m(rows, cols);
    if (!is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double))))
        throw LoadError("checkpoint: truncated matrix payload");
    return m;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const ParamSnapshot& snap) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("save_checkpoint: cannot open " + path);
    os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::write_pod<std::uint32_t>(os, detail::kCheckpointVersion);
    detail::write_pod<std::uint64_t>(os, snap.entries.size());
    for (const auto& [name, m] : snap.entries) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_matrix_body(os, m);
    }
    if (!os) throw DataError("save_checkpoint: write failed for " + path);
}

inline ParamSnapshot load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("load_checkpoint: cannot open " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw LoadError("load_checkpoint: bad magic in " + path);
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != detail::kCheckpointVersion)
        throw LoadError("load_checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::read_pod<std::uint64_t>(is, "count");
    ParamSnapshot snap;
    snap.entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is, "name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw LoadError("load_checkpoint: truncated name");
        snap.entries.emplace_back(std::move(name), detail::read_matrix_body(is));
    }
    return snap;
}

inline void save_matrix(const std::string& path, const Matrix& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("save_matrix: cannot open " + path);
    detail::write_matrix_body(os, m);
    if (!os) throw DataError("save_matrix: write failed for " + path);
}

inline Matrix load_matrix(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("load_matrix: cannot open " + path);
    return detail::read_matrix_body(is);
}

} // namespace stkit
