#pragma once

// Checkpoint containers: one directory holding a JSON manifest plus one SVTF
// file per parameter tensor. Namespaces ("vae.", "mapper.", ...) are carried
// in the parameter names.

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "sendvae/core/nn.hpp"

namespace sendvae {

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);
// Hash of every regular file under `dir`, keyed by relative path.
std::string sha256_tree(const std::filesystem::path& dir);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

// Writes tensors whose names start with `prefix`; returns the tensor index for the manifest.
template <typename T>
nlohmann::json save_params(const ParamStore<T>& ps, const std::filesystem::path& dir, const std::string& prefix = "");

// Loads every tensor listed in `index` into `ps`, which must already hold
// parameters with matching names and shapes.
template <typename T>
void load_params(ParamStore<T>& ps, const std::filesystem::path& dir, const nlohmann::json& index);

template <typename T>
void save_moments(const std::map<std::string, typename AdamW<T>::Moments>& state, const std::filesystem::path& dir);
template <typename T>
void load_moments(AdamW<T>& opt, const ParamStore<T>& ps, const std::filesystem::path& dir);

}  // namespace sendvae
