#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include <zlib.h>

#include "backstep/errors.hpp"

namespace backstep::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::vector<char> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

/// CRC-32 as 8 lowercase hex digits.
inline std::string crc32_hex(const std::vector<char>& bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + offset), chunk);
        offset += chunk;
    }
    std::ostringstream os;
    os << std::hex << std::setw(8) << std::setfill('0') << crc;
    return os.str();
}

inline std::vector<char> encode_f64(const double* values, std::size_t count) {
    std::vector<char> bytes(count * 8);
    for (std::size_t i = 0; i < count; ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) bytes[i * 8 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
    return bytes;
}

inline std::vector<double> decode_f64(const std::vector<char>& bytes) {
    if (bytes.size() % 8 != 0) throw FormatError("blob length is not a multiple of 8 bytes");
    std::vector<double> values(bytes.size() / 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(bytes[i * 8 + static_cast<std::size_t>(b)]);
        values[i] = std::bit_cast<double>(bits);
    }
    return values;
}

/// Writes a little-endian f64 blob and returns its CRC-32.
inline std::string write_f64(const fs::path& path, const std::vector<double>& values) {
    const auto bytes = encode_f64(values.data(), values.size());
    write_bytes(path, bytes);
    return crc32_hex(bytes);
}

/// Reads a blob, checking its CRC-32 and (when nonzero) its element count.
inline std::vector<double> read_f64(const fs::path& path, const std::string& expected_crc, std::size_t expected_count = 0) {
    const auto bytes = read_bytes(path);
    if (crc32_hex(bytes) != expected_crc) throw ChecksumError(path.filename().string() + ": checksum mismatch");
    auto values = decode_f64(bytes);
    if (expected_count != 0 && values.size() != expected_count) {
        throw FormatError(path.filename().string() + ": expected " + std::to_string(expected_count) + " values, found " +
                          std::to_string(values.size()));
    }
    return values;
}

inline json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(path.filename().string() + ": " + e.what());
    }
}

inline void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

/// Checks the format tag and version of a manifest.
inline void require_format(const json& manifest, const std::string& format, int version) {
    if (!manifest.contains("format") || manifest["format"] != format) {
        throw FormatError("not a " + format + " manifest");
    }
    const int found = manifest.value("version", -1);
    if (found != version) {
        throw VersionMismatch(format + " version " + std::to_string(found) + ", expected " + std::to_string(version));
    }
}

}  // namespace backstep::io
