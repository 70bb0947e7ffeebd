#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "xvl/autodiff.hpp"
#include "xvl/error.hpp"
#include "xvl/tensor.hpp"

namespace xvl {

/// Ordered, named collection of parameter tensors.
///
/// Names are unique and shapes never change after an entry is added; only
/// values are updated in place (which bumps `version`).
class ParamSet {
public:
    struct Entry {
        std::string name;
        Tensor value;
    };

    void add(std::string name, Tensor value) {
        if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
        entries_.push_back({std::move(name), std::move(value)});
    }

    bool contains(const std::string& name) const { return find(name) != npos; }

    const Tensor& at(const std::string& name) const { return entries_[index_of(name)].value; }

    /// Overwrites an existing entry; the shape must match.
    void set(const std::string& name, Tensor value) {
        auto& e = entries_[index_of(name)];
        if (!e.value.same_shape(value)) {
            throw ShapeError("parameter '" + name + "' has shape " + e.value.shape_string() +
                             ", cannot assign " + value.shape_string());
        }
        e.value = std::move(value);
        ++version_;
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    const Entry& entry(std::size_t i) const { return entries_.at(i); }

    std::size_t index_of(const std::string& name) const {
        const auto i = find(name);
        if (i == npos) throw ConfigError("unknown parameter '" + name + "'");
        return i;
    }

    /// Replaces the value at position i (shape-checked).
    void set(std::size_t i, Tensor value) { set(entries_.at(i).name, std::move(value)); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    std::uint64_t version() const { return version_; }

    /// Same names, same shapes, all zeros.
    ParamSet zeros_like() const {
        ParamSet out;
        for (const auto& e : entries_) {
            Tensor z = e.value;
            for (double& v : z.values()) v = 0.0;
            out.add(e.name, std::move(z));
        }
        return out;
    }

    bool same_layout(const ParamSet& o) const {
        if (o.size() != size()) return false;
        for (std::size_t i = 0; i < size(); ++i) {
            if (entries_[i].name != o.entries_[i].name ||
                entries_[i].value.shape() != o.entries_[i].value.shape())
                return false;
        }
        return true;
    }

    bool all_finite() const {
        for (const auto& e : entries_)
            if (!e.value.all_finite()) return false;
        return true;
    }

    /// Values equal bit for bit (version tags are ignored).
    friend bool operator==(const ParamSet& a, const ParamSet& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a.entries_[i].name != b.entries_[i].name) return false;
            if (!(a.entries_[i].value == b.entries_[i].value)) return false;
        }
        return true;
    }

private:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    std::size_t find(const std::string& name) const {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name == name) return i;
        return npos;
    }

    std::vector<Entry> entries_;
    std::uint64_t version_ = 0;
};

/// Parameters bound as variables on one graph, in ParamSet order.
class VarSet {
public:
    VarSet() = default;

    void add(std::string name, ad::Var v) {
        names_.push_back(std::move(name));
        vars_.push_back(v);
    }

    const ad::Var& operator[](const std::string& name) const {
        for (std::size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return vars_[i];
        throw ConfigError("unknown parameter '" + name + "'");
    }

    const ad::Var& at(std::size_t i) const { return vars_.at(i); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    std::size_t size() const { return vars_.size(); }
    std::span<const ad::Var> vars() const { return vars_; }
    const std::vector<std::string>& names() const { return names_; }

    /// Snapshot of the current values.
    ParamSet values() const {
        ParamSet out;
        for (std::size_t i = 0; i < vars_.size(); ++i) out.add(names_[i], vars_[i].value());
        return out;
    }

private:
    std::vector<std::string> names_;
    std::vector<ad::Var> vars_;
};

/// Binds every parameter as a differentiable leaf of `g`.
inline VarSet bind(ad::Graph& g, const ParamSet& params) {
    VarSet out;
    for (const auto& e : params.entries()) out.add(e.name, g.leaf(e.value));
    return out;
}

/// Binds every parameter as a constant of `g`.
inline VarSet bind_constant(ad::Graph& g, const ParamSet& params) {
    VarSet out;
    for (const auto& e : params.entries()) out.add(e.name, g.constant(e.value));
    return out;
}

/// Packs gradient variables into a ParamSet with the layout of `like`.
inline ParamSet to_params(const VarSet& like, std::span<const ad::Var> values) {
    ParamSet out;
    for (std::size_t i = 0; i < like.size(); ++i) {
        Tensor v = values[i].value();
        const Tensor& ref = like.at(i).value();
        out.add(like.name(i), Tensor::from_shape(ref.shape(), std::vector<double>(v.storage())));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Binary checkpoint format
//
//   "MXVL" | u32 version | u32 entry count
//   per entry: u32 name length | name bytes | u32 rank | u64 dims[rank] | f64 data
//
// All integers and floats little-endian.

inline constexpr std::uint32_t kParamFormatVersion = 1;

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw IoError("checkpoint truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

} // namespace detail

inline void write_params(std::ostream& os, const ParamSet& params) {
    os.write("MXVL", 4);
    detail::put_le<std::uint32_t>(os, kParamFormatVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& e : params.entries()) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        const auto shape = e.value.shape();
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
        for (auto d : shape) detail::put_le<std::uint64_t>(os, d);
        for (double v : e.value.values()) detail::put_le<double>(os, v);
    }
}

inline ParamSet read_params(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MXVL", 4) != 0) {
        throw IoError("not a parameter file (bad magic)");
    }
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kParamFormatVersion) {
        throw IoError("unsupported parameter file version " + std::to_string(version));
    }
    const auto count = detail::get_le<std::uint32_t>(is);
    ParamSet out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::get_le<std::uint32_t>(is);
        std::string name(len, '\0');
        if (len && !is.read(name.data(), len)) throw IoError("checkpoint truncated");
        const auto rank = detail::get_le<std::uint32_t>(is);
        if (rank > 2) throw IoError("entry '" + name + "' has unsupported rank " + std::to_string(rank));
        std::vector<std::size_t> shape(rank);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(is));
            n *= d;
        }
        std::vector<double> data(n);
        for (auto& v : data) v = detail::get_le<double>(is);
        out.add(std::move(name), Tensor::from_shape(shape, std::move(data)));
    }
    return out;
}

inline void save_params(const std::string& path, const ParamSet& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    write_params(os, params);
    if (!os) throw IoError("write to '" + path + "' failed");
}

inline ParamSet load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    return read_params(is);
}

inline std::string serialize_params(const ParamSet& params) {
    std::ostringstream os(std::ios::binary);
    write_params(os, params);
    return os.str();
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Hash of the serialized parameters; equal iff the checkpoint bytes are equal
/// (modulo hash collisions).
inline std::uint64_t params_hash(const ParamSet& params) { return fnv1a(serialize_params(params)); }

} // namespace xvl
