#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3da/common.hpp"
#include "c3da/tape.hpp"

namespace c3da {

// Ordered collection of named parameter tensors. Names are unique; order is
// insertion order and defines the checkpoint payload order.
class ParamStore {
public:
    Matrix& add(const std::string& name, Matrix value) {
        if (index_.count(name)) throw ConfigError("duplicate tensor name: " + name);
        index_.emplace(name, names_.size());
        names_.push_back(name);
        tensors_.push_back(std::move(value));
        return tensors_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    Matrix& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown tensor: " + name);
        return tensors_[it->second];
    }

    const Matrix& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown tensor: " + name);
        return tensors_[it->second];
    }

    const std::vector<std::string>& names() const { return names_; }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Matrix> tensors_;
    std::map<std::string, std::size_t> index_;
};

// Checkpoint container: magic "C3TN", u32 version, u32 manifest length, a
// JSON manifest {"meta": {...}, "tensors": [{name, shape, dtype}...]}, then
// raw little-endian float32 payloads in manifest order, row-major.
namespace checkpoint {

inline constexpr char kMagic[4] = {'C', '3', 'T', 'N'};
inline constexpr std::uint32_t kVersion = 1;

inline void save(const ParamStore& store, const std::string& path,
                 const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json manifest;
    manifest["meta"] = meta;
    auto& tensors = manifest["tensors"] = nlohmann::json::array();
    for (const auto& name : store.names()) {
        const Matrix& m = store.at(name);
        tensors.push_back({{"name", name},
                           {"shape", {m.rows(), m.cols()}},
                           {"dtype", "f32"}});
    }
    const std::string mjson = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kMagic, 4);
    const std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const std::uint32_t mlen = static_cast<std::uint32_t>(mjson.size());
    out.write(reinterpret_cast<const char*>(&mlen), 4);
    out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    std::vector<float> buf;
    for (const auto& name : store.names()) {
        const Matrix& m = store.at(name);
        buf.resize(static_cast<std::size_t>(m.size()));
        std::size_t k = 0;
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                buf[k++] = static_cast<float>(m(r, c));
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed: " + path);
}

struct Loaded {
    ParamStore store;
    nlohmann::json meta;
};

inline Loaded load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw ParseError("not a checkpoint file: " + path);
    std::uint32_t version = 0, mlen = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&mlen), 4);
    if (!in || version != kVersion)
        throw ParseError("unsupported checkpoint version in " + path);
    std::string mjson(mlen, '\0');
    in.read(mjson.data(), mlen);
    if (!in) throw ParseError("truncated manifest in " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mjson);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad manifest in " + path + ": " + e.what());
    }

    Loaded result;
    result.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape");
        if (entry.at("dtype").get<std::string>() != "f32")
            throw ParseError("unsupported dtype for tensor " + name);
        const Eigen::Index rows = shape.at(0).get<Eigen::Index>();
        const Eigen::Index cols = shape.at(1).get<Eigen::Index>();
        std::vector<float> buf(static_cast<std::size_t>(rows * cols));
        in.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!in) throw ParseError("truncated payload for tensor " + name);
        Matrix m(rows, cols);
        std::size_t k = 0;
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = buf[k++];
        result.store.add(name, std::move(m));
    }
    return result;
}

inline std::vector<char> file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    return std::vector<char>(std::istreambuf_iterator<char>(in),
                             std::istreambuf_iterator<char>());
}

}  // namespace checkpoint
}  // namespace c3da
