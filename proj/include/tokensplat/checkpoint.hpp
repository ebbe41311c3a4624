#pragma once

// Named-parameter registry plus the flat binary checkpoint archive:
//   magic "TSPLTCKP" | u32 version | u32 count |
//   per entry: u32 name_len | name | u32 ndim | u32 dims... | f32 payload (LE)
// Round trips are bit-exact because payloads are copied verbatim.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "checkpoint and PLY writers assume a little-endian host");

#include "tokensplat/common.hpp"
#include "tokensplat/tensor.hpp"

namespace tokensplat {

struct Parameter {
    std::string name;
    Tensor tensor;
};

class ParameterStore {
  public:
    Tensor create(const std::string& name, std::vector<int> shape, std::vector<float> data) {
        if (index_.count(name)) throw ContractError("parameter name not unique: " + name);
        Tensor t = Tensor::from_data(std::move(shape), std::move(data));
        t.set_requires_grad(true);
        t.set_name(name);
        index_[name] = params_.size();
        params_.push_back({name, t});
        return t;
    }

    Tensor create_randn(const std::string& name, std::vector<int> shape, Rng& rng,
                        float stddev) {
        std::vector<float> data(detail::shape_numel(shape));
        for (auto& x : data) x = rng.normal(0.0f, stddev);
        return create(name, std::move(shape), std::move(data));
    }

    Tensor create_zeros(const std::string& name, std::vector<int> shape) {
        std::vector<float> data(detail::shape_numel(shape), 0.0f);
        return create(name, std::move(shape), std::move(data));
    }

    const std::vector<Parameter>& items() const { return params_; }
    std::size_t size() const { return params_.size(); }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return params_[it->second].tensor;
    }

    void zero_grads() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("cannot open checkpoint for writing: " + path);
        out.write(kMagic, 8);
        write_u32(out, kVersion);
        write_u32(out, static_cast<std::uint32_t>(params_.size()));
        for (const auto& p : params_) {
            write_u32(out, static_cast<std::uint32_t>(p.name.size()));
            out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
            const auto& shape = p.tensor.shape();
            write_u32(out, static_cast<std::uint32_t>(shape.size()));
            for (int d : shape) write_u32(out, static_cast<std::uint32_t>(d));
            const auto& v = p.tensor.values();
            out.write(reinterpret_cast<const char*>(v.data()),
                      static_cast<std::streamsize>(v.size() * sizeof(float)));
        }
        if (!out) throw Error("checkpoint write failed: " + path);
    }

    // Loads values into the already-constructed parameter set. The archive
    // must carry exactly the same names and shapes; anything else means the
    // checkpoint belongs to a different model or format revision.
    void load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("cannot open checkpoint: " + path);
        char magic[8];
        in.read(magic, 8);
        if (!in || std::memcmp(magic, kMagic, 8) != 0)
            throw VersionError("not a checkpoint file: " + path);
        const std::uint32_t version = read_u32(in);
        if (version != kVersion)
            throw VersionError("unsupported checkpoint version " + std::to_string(version));
        const std::uint32_t count = read_u32(in);
        if (count != params_.size())
            throw VersionError("checkpoint parameter count mismatch: archive has " +
                               std::to_string(count) + ", model has " +
                               std::to_string(params_.size()));
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint32_t name_len = read_u32(in);
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            const std::uint32_t ndim = read_u32(in);
            std::vector<int> shape(ndim);
            for (auto& d : shape) d = static_cast<int>(read_u32(in));
            if (!in) throw VersionError("checkpoint truncated in entry header");
            auto it = index_.find(name);
            if (it == index_.end())
                throw VersionError("checkpoint/config mismatch: unexpected parameter " + name);
            Tensor t = params_[it->second].tensor;
            if (t.shape() != shape)
                throw VersionError("checkpoint/config mismatch: shape differs for " + name);
            in.read(reinterpret_cast<char*>(t.values_mut().data()),
                    static_cast<std::streamsize>(t.numel() * sizeof(float)));
            if (!in) throw VersionError("checkpoint truncated in payload of " + name);
        }
    }

  private:
    static constexpr const char kMagic[9] = "TSPLTCKP";
    static constexpr std::uint32_t kVersion = 1;

    static void write_u32(std::ofstream& out, std::uint32_t v) {
        out.write(reinterpret_cast<const char*>(&v), 4);
    }
    static std::uint32_t read_u32(std::ifstream& in) {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    }

    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace tokensplat
