#include "neuromoco/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "neuromoco/common.hpp"

namespace neuromoco::config {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& value) {
    char* end = nullptr;
    const double v = std::strtod(value.c_str(), &end);
    if (end == value.c_str() || *end != '\0')
        throw ConfigError("config: '" + key + "' expects a number, got '" + value + "'");
    return v;
}

int64_t parse_int(const std::string& key, const std::string& value) {
    char* end = nullptr;
    const long long v = std::strtoll(value.c_str(), &end, 10);
    if (end == value.c_str() || *end != '\0')
        throw ConfigError("config: '" + key + "' expects an integer, got '" + value + "'");
    return static_cast<int64_t>(v);
}

uint64_t parse_uint(const std::string& key, const std::string& value) {
    const int64_t v = parse_int(key, value);
    if (v < 0) throw ConfigError("config: '" + key + "' expects a non-negative integer");
    return static_cast<uint64_t>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true") return true;
    if (value == "false") return false;
    throw ConfigError("config: '" + key + "' expects true or false, got '" + value + "'");
}

std::vector<int64_t> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int64_t> out;
    std::stringstream ss(value);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (part.empty())
            throw ConfigError("config: '" + key + "' has an empty list element");
        out.push_back(parse_int(key, part));
    }
    if (out.empty()) throw ConfigError("config: '" + key + "' expects a comma-separated list");
    return out;
}

void apply_mode(RunConfig& rc, const std::string& mode) {
    if (mode == "paper") {
        rc.pretrain.epochs = 200;
        rc.pretrain.momentum = 0.999;
        rc.finetune.epochs = 100;
        rc.finetune.warmup_epochs = 30;
        rc.pretrain.backbone.input_height = 128;
        rc.pretrain.backbone.input_width = 128;
    } else if (mode == "desk") {
        rc.pretrain.epochs = 20;
        rc.pretrain.momentum = 0.9;
        rc.finetune.epochs = 10;
        rc.finetune.warmup_epochs = 2;
        rc.pretrain.backbone.input_height = 32;
        rc.pretrain.backbone.input_width = 32;
    } else {
        throw ConfigError("config: mode must be 'desk' or 'paper', got '" + mode + "'");
    }
    rc.mode = mode;
}

void set_key(RunConfig& rc, const std::string& key, const std::string& value) {
    auto& pre = rc.pretrain;
    auto& fin = rc.finetune;
    auto& model = pre.backbone; // mirrored into fin.backbone after parsing
    auto& con = pre.contrastive;
    auto& aug = pre.augment;

    if (key == "seed") rc.seed = parse_uint(key, value);
    else if (key == "data.train_dir") rc.train_dir = value;
    else if (key == "data.test_dir") rc.test_dir = value;
    else if (key == "output.dir") rc.output_dir = value;

    else if (key == "pretrain.time_steps") pre.time_steps = parse_int(key, value);
    else if (key == "pretrain.momentum") pre.momentum = parse_double(key, value);
    else if (key == "pretrain.batch_size") pre.batch_size = parse_int(key, value);
    else if (key == "pretrain.epochs") pre.epochs = parse_int(key, value);
    else if (key == "pretrain.lr") pre.lr = parse_double(key, value);
    else if (key == "pretrain.sgd_momentum") pre.sgd_momentum = parse_double(key, value);
    else if (key == "pretrain.weight_decay") pre.weight_decay = parse_double(key, value);
    else if (key == "pretrain.milestones") pre.milestones = parse_int_list(key, value);
    else if (key == "pretrain.gamma") pre.lr_gamma = parse_double(key, value);

    else if (key == "contrastive.temperature") con.temperature = parse_double(key, value);
    else if (key == "contrastive.queue_length") con.queue_length = parse_int(key, value);
    else if (key == "contrastive.alpha") con.alpha = parse_double(key, value);
    else if (key == "contrastive.beta") con.beta = parse_double(key, value);
    else if (key == "contrastive.prefill") con.prefill_random = parse_bool(key, value);

    else if (key == "augment.flip_prob") aug.flip_prob = parse_double(key, value);
    else if (key == "augment.shear_max") aug.shear_max = parse_double(key, value);
    else if (key == "augment.translate_frac") aug.translate_frac = parse_double(key, value);
    else if (key == "augment.rotate_max_deg") aug.rotate_max_deg = parse_double(key, value);
    else if (key == "augment.scale_min") aug.scale_min = parse_double(key, value);
    else if (key == "augment.scale_max") aug.scale_max = parse_double(key, value);

    else if (key == "model.stage_widths") model.stage_widths = parse_int_list(key, value);
    else if (key == "model.stage_blocks") model.stage_blocks = parse_int_list(key, value);
    else if (key == "model.embedding_dim") model.embedding_dim = parse_int(key, value);
    else if (key == "model.input_height") model.input_height = parse_int(key, value);
    else if (key == "model.input_width") model.input_width = parse_int(key, value);
    else if (key == "model.tau_mem") model.lif.tau_mem = parse_double(key, value);
    else if (key == "model.v_threshold") model.lif.v_threshold = parse_double(key, value);
    else if (key == "model.v_reset") model.lif.v_reset = parse_double(key, value);
    else if (key == "model.reset_mode") {
        if (value == "hard") model.lif.reset_mode = snn::ResetMode::Hard;
        else if (value == "soft") model.lif.reset_mode = snn::ResetMode::Soft;
        else throw ConfigError("config: model.reset_mode must be 'hard' or 'soft'");
    }

    else if (key == "finetune.batch_size") fin.batch_size = parse_int(key, value);
    else if (key == "finetune.epochs") fin.epochs = parse_int(key, value);
    else if (key == "finetune.lr") fin.lr = parse_double(key, value);
    else if (key == "finetune.weight_decay") fin.weight_decay = parse_double(key, value);
    else if (key == "finetune.warmup_epochs") fin.warmup_epochs = parse_int(key, value);
    else if (key == "finetune.freeze_backbone") fin.freeze_backbone = parse_bool(key, value);

    else throw ConfigError("config: unknown key '" + key + "'");
}

} // namespace

RunConfig parse_text(const std::string& text) {
    // split into key/value pairs first so the mode preset can be applied
    // before any override, wherever the mode line sits
    std::vector<std::pair<std::string, std::string>> pairs;
    std::set<std::string> seen;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config: line " + std::to_string(lineno) + " has an empty key");
        if (!seen.insert(key).second) throw ConfigError("config: duplicate key '" + key + "'");
        pairs.push_back({key, value});
    }

    RunConfig rc;
    apply_mode(rc, "desk");
    for (const auto& [key, value] : pairs)
        if (key == "mode") apply_mode(rc, value);
    for (const auto& [key, value] : pairs)
        if (key != "mode") set_key(rc, key, value);

    rc.pretrain.seed = rc.seed;
    rc.finetune.seed = rc.seed;
    rc.finetune.backbone = rc.pretrain.backbone;
    return rc;
}

RunConfig load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is.good()) throw ConfigError("config: cannot read '" + path + "'");
    std::stringstream buf;
    buf << is.rdbuf();
    return parse_text(buf.str());
}

} // namespace neuromoco::config
