#pragma once

#include <bit>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmoe/model.hpp"
#include "vlmoe/tensor.hpp"

namespace vlmoe {

static_assert(std::endian::native == std::endian::little,
              "checkpoint files are little-endian raw doubles");

// Layout: one compact JSON line mapping parameter names to shapes and byte
// offsets (relative to the end of that line), then the raw f64 payload.
inline void save_checkpoint(const std::string& path, const std::vector<ParamRef>& params) {
    nlohmann::json header = nlohmann::json::object();
    size_t offset = 0;
    for (const ParamRef& p : params) {
        header[p.name] = {{"shape", p.tensor->shape()}, {"offset", offset}};
        offset += p.tensor->size() * sizeof(double);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ContractError("save_checkpoint: cannot open " + path);
    f << header.dump() << '\n';
    for (const ParamRef& p : params)
        f.write(reinterpret_cast<const char*>(p.tensor->ptr()),
                static_cast<std::streamsize>(p.tensor->size() * sizeof(double)));
    if (!f) throw ContractError("save_checkpoint: write failed for " + path);
}

inline std::map<std::string, Tensor> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContractError("read_checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw ContractError("read_checkpoint: missing header");
    nlohmann::json header = nlohmann::json::parse(line);
    const std::streampos data_start = f.tellg();
    std::map<std::string, Tensor> out;
    for (auto it = header.begin(); it != header.end(); ++it) {
        Shape shape = it.value().at("shape").get<Shape>();
        const size_t offset = it.value().at("offset").get<size_t>();
        Tensor t(shape);
        f.seekg(data_start + static_cast<std::streamoff>(offset));
        f.read(reinterpret_cast<char*>(t.ptr()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!f) throw ContractError("read_checkpoint: truncated payload for " + it.key());
        out.emplace(it.key(), std::move(t));
    }
    return out;
}

// Restores parameter values in place. The checkpoint and the model must
// carry exactly the same parameter set.
inline void load_checkpoint(const std::string& path, const std::vector<ParamRef>& params) {
    std::map<std::string, Tensor> stored = read_checkpoint(path);
    for (const ParamRef& p : params) {
        auto it = stored.find(p.name);
        if (it == stored.end())
            throw ContractError("load_checkpoint: " + p.name + " missing from " + path);
        if (it->second.shape() != p.tensor->shape())
            throw ShapeError("load_checkpoint: " + p.name + " stored as " +
                             shape_str(it->second.shape()) + ", model expects " +
                             shape_str(p.tensor->shape()));
        std::copy(it->second.data().begin(), it->second.data().end(), p.tensor->data().begin());
        stored.erase(it);
    }
    if (!stored.empty())
        throw ContractError("load_checkpoint: checkpoint has " +
                            std::to_string(stored.size()) + " parameters the model lacks, e.g. " +
                            stored.begin()->first);
}

}  // namespace vlmoe
