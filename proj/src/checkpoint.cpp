// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint layout (little-endian):
//   "CGPT" | u16 version | u16 flags | u32 n | n bytes DetectorConfig JSON
//   u32 block count, then per block: u16 name length | name | u32 rows |
//   u32 cols | rows*cols f32, row-major.

#include <filesystem>

#include "binio.hpp"
#include "conceptguard/detector.hpp"
#include "conceptguard/error.hpp"

namespace cg {

namespace {
constexpr std::uint16_t kCheckpointVersion = 1;
}

void save_checkpoint(const DetectorParams& params, const std::string& path) {
    binio::Writer w;
    w.bytes("CGPT");
    w.u16(kCheckpointVersion);
    w.u16(0);
    const std::string cfg = params.config.to_json();
    w.u32(static_cast<std::uint32_t>(cfg.size()));
    w.bytes(cfg);
    const auto blocks = params.blocks();
    w.u32(static_cast<std::uint32_t>(blocks.size()));
    for (const auto& b : blocks) {
        w.str16(b.name, "block name");
        w.u32(static_cast<std::uint32_t>(b.rows));
        w.u32(static_cast<std::uint32_t>(b.cols));
        const auto m = b.map();
        for (Eigen::Index r = 0; r < b.rows; ++r) {
            for (Eigen::Index c = 0; c < b.cols; ++c) {
                w.f32(static_cast<float>(m(r, c)));
            }
        }
    }
    binio::write_file(path, w.data());
}

DetectorParams load_checkpoint(const std::string& path) {
    if (!std::filesystem::exists(path)) {
        fail(ErrorKind::Io, "checkpoint '" + path + "' does not exist");
    }
    const auto bytes = binio::read_file(path);
    binio::Reader r(bytes.data(), bytes.size());
    if (bytes.size() < 8 || r.bytes(4) != "CGPT") {
        fail(ErrorKind::Format, "bad magic in checkpoint '" + path + "' (expected CGPT)");
    }
    if (r.u16() != kCheckpointVersion) {
        fail(ErrorKind::Format, "unsupported checkpoint version");
    }
    r.u16();
    const auto cfg_len = r.u32();
    const DetectorConfig cfg = DetectorConfig::from_json(r.bytes(cfg_len));
    DetectorParams params = DetectorParams::zeros(cfg);
    auto blocks = params.blocks();
    const auto count = r.u32();
    if (count != blocks.size()) {
        fail(ErrorKind::Validation, "checkpoint has " + std::to_string(count) + " tensors, config implies " +
                                        std::to_string(blocks.size()));
    }
    for (auto& b : blocks) {
        const std::string name = r.str16();
        const auto rows = r.u32();
        const auto cols = r.u32();
        if (name != b.name || rows != b.rows || cols != b.cols) {
            fail(ErrorKind::Validation, "checkpoint tensor '" + name + "' (" + std::to_string(rows) + "x" +
                                            std::to_string(cols) + ") does not match expected '" + b.name +
                                            "' (" + std::to_string(b.rows) + "x" + std::to_string(b.cols) + ")");
        }
        auto m = b.map();
        for (Eigen::Index i = 0; i < b.rows; ++i) {
            for (Eigen::Index j = 0; j < b.cols; ++j) {
                m(i, j) = r.f32();
            }
        }
        if (!m.allFinite()) {
            fail(ErrorKind::Validation, "checkpoint tensor '" + name + "' holds non-finite values");
        }
    }
    if (!r.done()) {
        fail(ErrorKind::Corrupt, "trailing bytes in checkpoint '" + path + "'");
    }
    return params;
}

}  // namespace cg
