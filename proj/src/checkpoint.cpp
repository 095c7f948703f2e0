#include "neuromoco/checkpoint.hpp"

#include <cstdint>
#include <fstream>

namespace neuromoco::checkpoint {

namespace {

constexpr char kMagic[4] = {'N', 'M', 'C', 'W'};
constexpr uint16_t kVersion = 1;
constexpr uint64_t kMaxElements = uint64_t{1} << 32; // sanity cap per entry

} // namespace

std::vector<Entry> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint file: " + path);

    char magic[4];
    io::read_bytes(is, magic, 4, "checkpoint magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic in " + path);
    const uint16_t version = io::read_le<uint16_t>(is, "checkpoint version");
    if (version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path);

    const uint32_t count = io::read_le<uint32_t>(is, "checkpoint entry count");
    std::vector<Entry> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        Entry e;
        const uint16_t name_len = io::read_le<uint16_t>(is, "entry name length");
        e.name.resize(name_len);
        if (name_len) io::read_bytes(is, e.name.data(), name_len, "entry name");
        const uint32_t rank = io::read_le<uint32_t>(is, "entry rank");
        uint64_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            const uint32_t dim = io::read_le<uint32_t>(is, "entry dim");
            if (dim == 0) throw FormatError("zero dimension in checkpoint entry '" + e.name + "'");
            e.shape.push_back(static_cast<int64_t>(dim));
            numel *= dim;
            if (numel > kMaxElements)
                throw FormatError("checkpoint entry '" + e.name + "' is implausibly large");
        }
        e.data.resize(numel);
        for (uint64_t j = 0; j < numel; ++j) e.data[j] = io::read_f32(is, "entry payload");
        entries.push_back(std::move(e));
    }
    if (is.peek() != std::ifstream::traits_type::eof())
        throw FormatError("trailing bytes after checkpoint payload in " + path);
    return entries;
}

void write_file(const std::string& path, const std::vector<Entry>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open checkpoint file for writing: " + path);

    io::write_bytes(os, kMagic, 4);
    io::write_le<uint16_t>(os, kVersion);
    io::write_le<uint32_t>(os, static_cast<uint32_t>(entries.size()));
    for (const Entry& e : entries) {
        if (e.name.size() > 0xffff) throw ValidationError("checkpoint entry name too long: " + e.name);
        io::write_le<uint16_t>(os, static_cast<uint16_t>(e.name.size()));
        io::write_bytes(os, e.name.data(), e.name.size());
        io::write_le<uint32_t>(os, static_cast<uint32_t>(e.shape.size()));
        uint64_t numel = 1;
        for (int64_t d : e.shape) {
            io::write_le<uint32_t>(os, static_cast<uint32_t>(d));
            numel *= static_cast<uint64_t>(d);
        }
        if (numel != e.data.size())
            throw ValidationError("checkpoint entry '" + e.name + "': dims disagree with payload size");
        for (float v : e.data) io::write_f32(os, v);
    }
    os.flush();
    if (!os) throw FormatError("write failed for checkpoint file: " + path);
}

} // namespace neuromoco::checkpoint
