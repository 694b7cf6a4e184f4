// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "spanattn/tensor.hpp"

namespace spanattn {

/// Single-file container: the 8-byte magic "SPANCKPT", a little-endian
/// u64 header length, a JSON header, then raw little-endian tensor data.
/// The header carries caller metadata under "meta" and a "params" list of
/// {name, shape, offset} where offset counts bytes from the data start.
struct ContainerEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Container {
    std::string dtype;     // "f32" or "f64"
    std::string meta_json;  // opaque JSON object
    std::vector<ContainerEntry> entries;
};

template <typename T>
struct ContainerView {
    std::string name;
    const Tensor<T>* tensor;
};

template <typename T>
void write_container(const std::string& path, const std::string& meta_json, const std::vector<ContainerView<T>>& items);

/// Throws MissingArtifactError if the file is absent and InputError if it
/// is malformed.
Container read_container(const std::string& path);

}  // namespace spanattn
