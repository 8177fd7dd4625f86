#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uman/network.hpp"

namespace uman {

struct OptimConfig {
    double base_lr = 1e-3;
    std::map<std::string, double> group_lr_multipliers = {{"kan", 0.1}};  // others default 1.0
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t epochs = 100;
    std::size_t batch_size = 8;
    std::uint64_t seed = 1;
    double weight_decay = 0.0;
    bool augment = true;
    double stop_train_loss = 0.0;  // early stop when epoch loss drops below; 0 disables
    double val_fraction = 0.2;

    double multiplier(const std::string& group) const {
        auto it = group_lr_multipliers.find(group);
        return it == group_lr_multipliers.end() ? 1.0 : it->second;
    }

    void validate() const {
        if (base_lr <= 0.0) throw UsageError("optim: base_lr must be > 0");
        for (const auto& [g, m] : group_lr_multipliers)
            if (m < 0.0) throw UsageError("optim: lr multiplier for '" + g + "' must be >= 0");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw UsageError("optim: betas in [0,1)");
        if (adam_eps <= 0.0) throw UsageError("optim: adam eps must be > 0");
        if (epochs == 0 || batch_size == 0) throw UsageError("optim: epochs/batch_size positive");
        if (val_fraction <= 0.0 || val_fraction >= 1.0)
            throw UsageError("optim: val_fraction in (0,1)");
    }
};

struct RunConfig {
    NetworkConfig net;
    OptimConfig optim;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::size_t> parse_size_list(const std::string& v, const std::string& key) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            out.push_back(static_cast<std::size_t>(std::stoull(tok)));
        } catch (...) {
            throw UsageError("config: bad integer '" + tok + "' for key '" + key + "'");
        }
    }
    if (out.empty()) throw UsageError("config: empty list for key '" + key + "'");
    return out;
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        double d = std::stod(v, &used);
        if (used != v.size()) throw UsageError("");
        return d;
    } catch (...) {
        throw UsageError("config: bad number '" + v + "' for key '" + key + "'");
    }
}

inline std::size_t parse_size(const std::string& v, const std::string& key) {
    try {
        return static_cast<std::size_t>(std::stoull(trim(v)));
    } catch (...) {
        throw UsageError("config: bad integer '" + v + "' for key '" + key + "'");
    }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError("config: bad boolean '" + v + "' for key '" + key + "'");
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// Applies one `key = value` assignment. Unknown keys are errors.
inline void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    NetworkConfig& net = cfg.net;
    OptimConfig& opt = cfg.optim;
    if (key == "preset") {
        if (value == "paper") {
            net = NetworkConfig::paper();
        } else if (value == "desk") {
            net = NetworkConfig::desk();
        } else {
            throw UsageError("config: unknown preset '" + value + "'");
        }
    } else if (key == "embed_dims") {
        auto v = detail::parse_size_list(value, key);
        if (v.size() != 5) throw UsageError("config: embed_dims needs 5 entries");
        for (std::size_t i = 0; i < 5; ++i) net.embed_dims[i] = v[i];
    } else if (key == "man_depths") {
        auto v = detail::parse_size_list(value, key);
        if (v.size() != 3) throw UsageError("config: man_depths needs 3 entries");
        for (std::size_t i = 0; i < 3; ++i) net.man_depths[i] = v[i];
    } else if (key == "msab_kernels") {
        net.msab_kernels = detail::parse_size_list(value, key);
    } else if (key == "kan_grid_size") {
        net.kan_grid_size = detail::parse_size(value, key);
    } else if (key == "kan_spline_order") {
        net.kan_spline_order = detail::parse_size(value, key);
    } else if (key == "kan_range_lo") {
        net.kan_range_lo = detail::parse_double(value, key);
    } else if (key == "kan_range_hi") {
        net.kan_range_hi = detail::parse_double(value, key);
    } else if (key == "pagf_mode") {
        net.pagf_mode = pagf_mode_from(value);
    } else if (key == "drop_path") {
        net.drop_path = detail::parse_double(value, key);
    } else if (key == "num_classes") {
        net.num_classes = detail::parse_size(value, key);
    } else if (key == "input_channels") {
        net.input_channels = detail::parse_size(value, key);
    } else if (key == "use_msab") {
        net.use_msab = detail::parse_bool(value, key);
    } else if (key == "lambda_dice") {
        net.loss.lambda_dice = detail::parse_double(value, key);
    } else if (key == "lambda_bce") {
        net.loss.lambda_bce = detail::parse_double(value, key);
    } else if (key == "smooth_eps") {
        net.loss.smooth_eps = detail::parse_double(value, key);
    } else if (key == "threshold") {
        net.loss.threshold = detail::parse_double(value, key);
    } else if (key == "base_lr") {
        opt.base_lr = detail::parse_double(value, key);
    } else if (key == "beta1") {
        opt.beta1 = detail::parse_double(value, key);
    } else if (key == "beta2") {
        opt.beta2 = detail::parse_double(value, key);
    } else if (key == "adam_eps") {
        opt.adam_eps = detail::parse_double(value, key);
    } else if (key == "epochs") {
        opt.epochs = detail::parse_size(value, key);
    } else if (key == "batch_size") {
        opt.batch_size = detail::parse_size(value, key);
    } else if (key == "seed") {
        opt.seed = detail::parse_size(value, key);
    } else if (key == "weight_decay") {
        opt.weight_decay = detail::parse_double(value, key);
    } else if (key == "augment") {
        opt.augment = detail::parse_bool(value, key);
    } else if (key == "stop_train_loss") {
        opt.stop_train_loss = detail::parse_double(value, key);
    } else if (key == "val_fraction") {
        opt.val_fraction = detail::parse_double(value, key);
    } else if (key.rfind("lr_mult_", 0) == 0) {
        opt.group_lr_multipliers[key.substr(8)] = detail::parse_double(value, key);
    } else {
        throw UsageError("config: unknown key '" + key + "'");
    }
}

// Line-oriented `key = value` text. Blank lines and lines starting with '#'
// are skipped.
inline RunConfig parse_config_text(const std::string& text, RunConfig base = RunConfig{}) {
    RunConfig cfg = std::move(base);
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw UsageError("config: line " + std::to_string(lineno) + " is not 'key = value'");
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty()) throw UsageError("config: empty key at line " + std::to_string(lineno));
        apply_config_key(cfg, key, value);
    }
    cfg.net.validate();
    cfg.optim.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path, RunConfig base = RunConfig{}) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("config: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), std::move(base));
}

// Effective configuration as key/value pairs, echoed into reports and
// re-parseable as a config file.
inline std::vector<std::pair<std::string, std::string>> describe_config(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    auto join = [](const auto& seq) {
        std::string s;
        for (std::size_t v : seq) {
            if (!s.empty()) s += ",";
            s += std::to_string(v);
        }
        return s;
    };
    out.emplace_back("embed_dims", join(cfg.net.embed_dims));
    out.emplace_back("man_depths", join(cfg.net.man_depths));
    out.emplace_back("msab_kernels", join(cfg.net.msab_kernels));
    out.emplace_back("kan_grid_size", std::to_string(cfg.net.kan_grid_size));
    out.emplace_back("kan_spline_order", std::to_string(cfg.net.kan_spline_order));
    out.emplace_back("kan_range_lo", detail::fmt_double(cfg.net.kan_range_lo));
    out.emplace_back("kan_range_hi", detail::fmt_double(cfg.net.kan_range_hi));
    out.emplace_back("pagf_mode", pagf_mode_name(cfg.net.pagf_mode));
    out.emplace_back("drop_path", detail::fmt_double(cfg.net.drop_path));
    out.emplace_back("num_classes", std::to_string(cfg.net.num_classes));
    out.emplace_back("input_channels", std::to_string(cfg.net.input_channels));
    out.emplace_back("use_msab", cfg.net.use_msab ? "true" : "false");
    out.emplace_back("lambda_dice", detail::fmt_double(cfg.net.loss.lambda_dice));
    out.emplace_back("lambda_bce", detail::fmt_double(cfg.net.loss.lambda_bce));
    out.emplace_back("smooth_eps", detail::fmt_double(cfg.net.loss.smooth_eps));
    out.emplace_back("threshold", detail::fmt_double(cfg.net.loss.threshold));
    out.emplace_back("base_lr", detail::fmt_double(cfg.optim.base_lr));
    for (const auto& [g, m] : cfg.optim.group_lr_multipliers)
        out.emplace_back("lr_mult_" + g, detail::fmt_double(m));
    out.emplace_back("beta1", detail::fmt_double(cfg.optim.beta1));
    out.emplace_back("beta2", detail::fmt_double(cfg.optim.beta2));
    out.emplace_back("adam_eps", detail::fmt_double(cfg.optim.adam_eps));
    out.emplace_back("epochs", std::to_string(cfg.optim.epochs));
    out.emplace_back("batch_size", std::to_string(cfg.optim.batch_size));
    out.emplace_back("seed", std::to_string(cfg.optim.seed));
    out.emplace_back("weight_decay", detail::fmt_double(cfg.optim.weight_decay));
    out.emplace_back("augment", cfg.optim.augment ? "true" : "false");
    out.emplace_back("stop_train_loss", detail::fmt_double(cfg.optim.stop_train_loss));
    out.emplace_back("val_fraction", detail::fmt_double(cfg.optim.val_fraction));
    return out;
}

inline std::string config_to_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& [k, v] : describe_config(cfg)) out += k + " = " + v + "\n";
    return out;
}

}  // namespace uman
