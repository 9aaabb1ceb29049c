#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "cfsg/error.hpp"
#include "cfsg/network.hpp"

namespace cfsg {

// ---------------------------------------------------------------------------
// Architecture config <-> JSON (shared by checkpoints and pipeline configs).
// ---------------------------------------------------------------------------

inline nlohmann::json arch_to_json(const ArchitectureConfig& c) {
    return nlohmann::json{{"stage_widths", c.stage_widths},
                          {"encoder_convs", c.encoder_convs},
                          {"decoder_convs", c.decoder_convs},
                          {"num_classes", c.num_classes},
                          {"skip_connections", c.skip_connections}};
}

inline ArchitectureConfig arch_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known{
        "stage_widths", "encoder_convs", "decoder_convs", "num_classes",
        "skip_connections"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown architecture key '" + key + "'");
    ArchitectureConfig c;
    if (j.contains("stage_widths")) j.at("stage_widths").get_to(c.stage_widths);
    if (j.contains("encoder_convs")) j.at("encoder_convs").get_to(c.encoder_convs);
    if (j.contains("decoder_convs")) j.at("decoder_convs").get_to(c.decoder_convs);
    if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
    if (j.contains("skip_connections"))
        j.at("skip_connections").get_to(c.skip_connections);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Checkpoint file.
//
//   "CFSG" | u32 version | u32 json_len | json | u32 record_count
//   records: u32 name_len | name | u32 ndims | u32 dims[] | f32 payload[]
//   u32 crc32 over all payload bytes
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    char b[4];
    b[0] = static_cast<char>(v & 0xff);
    b[1] = static_cast<char>((v >> 8) & 0xff);
    b[2] = static_cast<char>((v >> 16) & 0xff);
    b[3] = static_cast<char>((v >> 24) & 0xff);
    buf.append(b, 4);
}

class Reader {
public:
    Reader(const std::string& buf, const std::string& path)
        : buf_(buf), path_(path) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i)
            v = (v << 8) | static_cast<std::uint8_t>(buf_[pos_ + i]);
        pos_ += 4;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    const char* raw(std::size_t n) {
        need(n);
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool exhausted() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size())
            throw DataError(path_ + ": truncated checkpoint");
    }
    const std::string& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes the file to a temporary sibling and renames it into place, so an
/// interrupted run never leaves a corrupt checkpoint behind.
inline void atomic_write_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError(tmp + ": short write");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
}

inline std::string serialize_checkpoint(Model& model) {
    std::string buf = "CFSG";
    detail::put_u32(buf, kCheckpointVersion);
    const nlohmann::json meta{{"architecture", arch_to_json(model.config)},
                              {"seed", model.seed}};
    const std::string js = meta.dump();
    detail::put_u32(buf, static_cast<std::uint32_t>(js.size()));
    buf += js;

    const auto records = all_records(model);
    detail::put_u32(buf, static_cast<std::uint32_t>(records.size()));
    std::uint32_t crc = static_cast<std::uint32_t>(crc32(0L, Z_NULL, 0));
    for (const auto& r : records) {
        detail::put_u32(buf, static_cast<std::uint32_t>(r.name.size()));
        buf += r.name;
        // Trailing 1-dims are dropped so vectors store their natural rank.
        int ndims = 4;
        while (ndims > 1 && r.shape[ndims - 1] == 1) --ndims;
        detail::put_u32(buf, static_cast<std::uint32_t>(ndims));
        for (int d = 0; d < ndims; ++d)
            detail::put_u32(buf, static_cast<std::uint32_t>(r.shape[d]));
        const std::size_t nbytes = r.size * sizeof(float);
        const std::size_t at = buf.size();
        buf.resize(at + nbytes);
        std::memcpy(buf.data() + at, r.data, nbytes);
        crc = static_cast<std::uint32_t>(
            crc32(crc, reinterpret_cast<const Bytef*>(buf.data() + at),
                  static_cast<uInt>(nbytes)));
    }
    detail::put_u32(buf, crc);
    return buf;
}

inline void save_checkpoint(Model& model, const std::string& path) {
    atomic_write_file(path, serialize_checkpoint(model));
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    detail::Reader rd(buf, path);

    if (rd.bytes(4) != "CFSG")
        throw DataError(path + ": bad magic (not a CFSG checkpoint)");
    const std::uint32_t version = rd.u32();
    if (version != kCheckpointVersion)
        throw DataError(path + ": unsupported checkpoint version " +
                        std::to_string(version));
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(rd.bytes(rd.u32()));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": bad metadata block: " + e.what());
    }
    Model model = build_model(arch_from_json(meta.at("architecture")),
                              meta.value("seed", 0ull));

    const std::uint32_t count = rd.u32();
    auto records = all_records(model);
    if (count != records.size())
        throw DataError(path + ": expected " + std::to_string(records.size()) +
                        " records, file has " + std::to_string(count));
    std::uint32_t crc = static_cast<std::uint32_t>(crc32(0L, Z_NULL, 0));
    for (auto& r : records) {
        const std::string name = rd.bytes(rd.u32());
        if (name != r.name)
            throw DataError(path + ": record '" + name + "' where '" + r.name +
                            "' was expected");
        const std::uint32_t ndims = rd.u32();
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < ndims; ++d) {
            const std::uint32_t dim = rd.u32();
            const int want = d < 4 ? r.shape[d] : 1;
            if (static_cast<int>(dim) != want)
                throw DataError(path + ": record '" + name +
                                "' has unexpected shape");
            total *= dim;
        }
        if (total != r.size)
            throw DataError(path + ": record '" + name + "' payload size " +
                            std::to_string(total) + " != " +
                            std::to_string(r.size));
        const char* payload = rd.raw(total * sizeof(float));
        std::memcpy(r.data, payload, total * sizeof(float));
        crc = static_cast<std::uint32_t>(
            crc32(crc, reinterpret_cast<const Bytef*>(payload),
                  static_cast<uInt>(total * sizeof(float))));
    }
    if (rd.u32() != crc)
        throw DataError(path + ": checksum mismatch; checkpoint is corrupt");
    if (!rd.exhausted())
        throw DataError(path + ": trailing bytes after checksum");
    return model;
}

} // namespace cfsg
