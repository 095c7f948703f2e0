#include "neuromoco/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "neuromoco/common.hpp"

namespace neuromoco::dataset {

namespace fs = std::filesystem;

std::vector<std::pair<std::string, int64_t>> read_manifest(const std::string& dir) {
    const fs::path path = fs::path(dir) / "manifest.csv";
    std::ifstream is(path);
    if (!is) throw ValidationError("missing manifest: " + path.string());

    std::string line;
    if (!std::getline(is, line) || line != "file,label")
        throw FormatError("manifest header must be 'file,label' in " + path.string());

    std::vector<std::pair<std::string, int64_t>> rows;
    size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const size_t comma = line.rfind(',');
        if (comma == std::string::npos || comma == 0 || comma + 1 == line.size())
            throw FormatError("malformed manifest row at line " + std::to_string(line_no) + " in " +
                              path.string());
        const std::string name = line.substr(0, comma);
        const std::string label_text = line.substr(comma + 1);
        int64_t label = 0;
        try {
            size_t used = 0;
            label = std::stoll(label_text, &used);
            if (used != label_text.size()) throw std::invalid_argument(label_text);
        } catch (const std::exception&) {
            throw FormatError("non-integer label '" + label_text + "' at line " +
                              std::to_string(line_no) + " in " + path.string());
        }
        if (label < 0)
            throw ValidationError("negative label at line " + std::to_string(line_no) + " in " +
                                  path.string());
        rows.emplace_back(name, label);
    }
    if (rows.empty()) throw ValidationError("manifest lists no samples: " + path.string());
    return rows;
}

void write_manifest(const std::string& dir, const std::vector<std::pair<std::string, int64_t>>& rows) {
    const fs::path path = fs::path(dir) / "manifest.csv";
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open manifest for writing: " + path.string());
    os << "file,label\n";
    for (const auto& [name, label] : rows) os << name << ',' << label << '\n';
    os.flush();
    if (!os) throw FormatError("write failed for manifest: " + path.string());
}

FrameDataset load_frame_dataset(const std::string& dir) {
    FrameDataset ds;
    for (const auto& [name, label] : read_manifest(dir)) {
        const fs::path path = fs::path(dir) / name;
        if (!fs::exists(path)) throw ValidationError("manifest references missing file: " + path.string());
        FrameSample s;
        s.frames = events::read_frame_file(path.string());
        s.label = label;
        s.file = name;
        ds.num_classes = std::max(ds.num_classes, label + 1);
        ds.samples.push_back(std::move(s));
    }
    for (const FrameSample& s : ds.samples) {
        if (s.frames.num_windows != ds.time_steps() || s.frames.height != ds.height() ||
            s.frames.width != ds.width())
            throw ValidationError("dataset geometry mismatch in " + s.file + ": expected (" +
                                  std::to_string(ds.time_steps()) + ",2," + std::to_string(ds.height()) +
                                  "," + std::to_string(ds.width()) + ")");
    }
    return ds;
}


} // namespace neuromoco::dataset
