#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "ecovla/errors.hpp"
#include "ecovla/model.hpp"

namespace ecovla {

static_assert(std::endian::native == std::endian::little,
              "weight dumps are little-endian; byte swapping is not implemented");

// Dumps every tensor as one flat little-endian float32 binary plus a JSON
// manifest recording name, shape, layout and offset (in floats).
inline void save_weights(const Model& model, const std::string& bin_path,
                         const std::string& manifest_path) {
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot open " + bin_path + " for writing");

    nlohmann::ordered_json manifest;
    manifest["dtype"] = "float32_le";
    const ModelConfig& cfg = model.config();
    manifest["config"] = {{"blocks", cfg.blocks},   {"dim", cfg.dim},
                          {"heads", cfg.heads},     {"head_dim", cfg.head_dim},
                          {"ff_dim", cfg.ff_dim},   {"seq_len", cfg.seq_len},
                          {"vis_tokens", cfg.vis_tokens}, {"vis_dim", cfg.vis_dim},
                          {"expert_width", cfg.expert_width}, {"seed", cfg.seed}};
    manifest["tensors"] = nlohmann::ordered_json::array();

    std::uint64_t offset = 0;
    model.for_each_tensor([&](const std::string& name, const Matrix& m) {
        manifest["tensors"].push_back(
            {{"name", name},
             {"rows", m.rows()},
             {"cols", m.cols()},
             {"layout", m.layout() == Layout::RowMajor ? "row_major" : "col_major"},
             {"offset", offset}});
        bin.write(reinterpret_cast<const char*>(m.data()),
                  static_cast<std::streamsize>(m.size() * sizeof(float)));
        offset += m.size();
    });
    if (!bin) throw IoError("failed writing " + bin_path);

    std::ofstream mf(manifest_path, std::ios::trunc);
    if (!mf) throw IoError("cannot open " + manifest_path + " for writing");
    mf << manifest.dump(2) << '\n';
}

// Loads a dump produced by save_weights back into a model of the same shape.
inline void load_weights(Model& model, const std::string& bin_path,
                         const std::string& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) throw IoError("cannot open " + manifest_path);
    nlohmann::json manifest;
    mf >> manifest;
    if (manifest.value("dtype", "") != "float32_le")
        throw IoError("unsupported dtype in " + manifest_path);

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw IoError("cannot open " + bin_path);

    std::size_t idx = 0;
    const auto& tensors = manifest.at("tensors");
    model.for_each_tensor_mut([&](const std::string& name, Matrix& m) {
        if (idx >= tensors.size()) throw IoError("manifest has too few tensors");
        const auto& entry = tensors[idx++];
        if (entry.at("name") != name || entry.at("rows") != m.rows() ||
            entry.at("cols") != m.cols())
            throw IoError("manifest does not match model shape at tensor " + name);
        bin.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>() *
                                              sizeof(float)));
        bin.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(m.size() * sizeof(float)));
        if (!bin) throw IoError("failed reading tensor " + name + " from " + bin_path);
    });
    if (idx != tensors.size()) throw IoError("manifest has extra tensors");
}

}  // namespace ecovla
