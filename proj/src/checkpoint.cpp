// SPDX-License-Identifier: Apache-2.0
#include "spanattn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "spanattn/errors.hpp"

namespace spanattn {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'P', 'A', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

template <typename T>
void write_container(const std::string& path, const std::string& meta_json,
                     const std::vector<ContainerView<T>>& items) {
    nlohmann::json header;
    header["dtype"] = dtype_name<T>();
    header["meta"] = nlohmann::json::parse(meta_json.empty() ? "{}" : meta_json);
    header["params"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& it : items) {
        header["params"].push_back({{"name", it.name}, {"shape", it.tensor->shape()}, {"offset", offset}});
        offset += it.tensor->numel() * sizeof(T);
    }
    const std::string text = header.dump();
    const std::filesystem::path p(path);
    if (p.has_parent_path()) {
        std::filesystem::create_directories(p.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InputError("cannot open " + path + " for writing");
    }
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& it : items) {
        out.write(reinterpret_cast<const char*>(it.tensor->raw()),
                  static_cast<std::streamsize>(it.tensor->numel() * sizeof(T)));
    }
    if (!out) {
        throw InputError("write failed for " + path);
    }
}

Container read_container(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        throw MissingArtifactError("checkpoint not found: " + path);
    }
    std::ifstream in(path, std::ios::binary);
    char magic[8];
    std::uint64_t len = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw InputError(path + ": not a spanattn container");
    }
    const auto file_size = std::filesystem::file_size(path);
    if (len > file_size) {
        throw InputError(path + ": header length exceeds file size");
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    Container c;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
        c.dtype = header.at("dtype").get<std::string>();
        c.meta_json = header.at("meta").dump();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": bad header: " + e.what());
    }
    const std::size_t width = c.dtype == "f32" ? 4 : c.dtype == "f64" ? 8 : 0;
    if (width == 0) {
        throw InputError(path + ": unknown dtype " + c.dtype);
    }
    const std::uint64_t data_start = sizeof(kMagic) + sizeof(len) + len;
    for (const auto& pj : header.at("params")) {
        ContainerEntry e;
        e.name = pj.at("name").get<std::string>();
        e.shape = pj.at("shape").get<Shape>();
        const auto offset = pj.at("offset").get<std::uint64_t>();
        const std::size_t n = shape_numel(e.shape);
        if (data_start + offset + n * width > file_size) {
            throw InputError(path + ": tensor " + e.name + " runs past end of file");
        }
        in.seekg(static_cast<std::streamoff>(data_start + offset));
        e.values.resize(n);
        if (width == 4) {
            std::vector<float> buf(n);
            in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
            std::copy(buf.begin(), buf.end(), e.values.begin());
        } else {
            in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(n * 8));
        }
        if (!in) {
            throw InputError(path + ": short read for " + e.name);
        }
        c.entries.push_back(std::move(e));
    }
    return c;
}

template void write_container<float>(const std::string&, const std::string&, const std::vector<ContainerView<float>>&);
template void write_container<double>(const std::string&, const std::string&,
                                      const std::vector<ContainerView<double>>&);

}  // namespace spanattn
