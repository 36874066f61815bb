#include "cfseq/expcli/config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace cfseq {

namespace {

std::string shortest(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string line_of(const YAML::Node& n) {
    const int line = n.Mark().line;
    return line >= 0 ? " (line " + std::to_string(line + 1) + ")" : "";
}

[[noreturn]] void fail(const std::string& key, const std::string& what, const YAML::Node& at) {
    throw ConfigError(key + ": " + what + line_of(at));
}

// Walks one mapping, remembering which keys were read so leftovers can be
// reported as unknown.
class Section {
public:
    Section(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
        if (node_ && !node_.IsNull() && !node_.IsMap()) fail(path_, "expected a mapping", node_);
    }

    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

    YAML::Node find(const std::string& k) {
        seen_.insert(k);
        if (!node_ || node_.IsNull()) return YAML::Node();
        return node_[k];
    }

    template <typename T>
    void read(const std::string& k, T& out, const char* type) {
        YAML::Node n = find(k);
        if (!n || n.IsNull()) return;
        if (!n.IsScalar()) fail(key(k), std::string("expected ") + type, n);
        try {
            out = n.as<T>();
        } catch (const YAML::Exception&) {
            fail(key(k), std::string("expected ") + type + ", got '" + n.Scalar() + "'", n);
        }
        lines_[k] = n;
    }

    void size(const std::string& k, std::size_t& out) {
        YAML::Node n = find(k);
        if (!n || n.IsNull()) return;
        if (!n.IsScalar() || n.Scalar().empty() || n.Scalar()[0] == '-') {
            fail(key(k), "expected a non-negative integer", n);
        }
        read(k, out, "a non-negative integer");
    }
    void real(const std::string& k, double& out) { read(k, out, "a number"); }
    void flag(const std::string& k, bool& out) { read(k, out, "true or false"); }
    void text(const std::string& k, std::string& out) { read(k, out, "a string"); }

    template <typename T>
    void list(const std::string& k, std::vector<T>& out, const char* type) {
        YAML::Node n = find(k);
        if (!n || n.IsNull()) return;
        if (!n.IsSequence()) fail(key(k), std::string("expected a list of ") + type, n);
        out.clear();
        for (const auto& item : n) {
            try {
                out.push_back(item.as<T>());
            } catch (const YAML::Exception&) {
                fail(key(k), std::string("expected a list of ") + type, item);
            }
        }
        lines_[k] = n;
    }

    void check(bool ok, const std::string& k, const std::string& what) const {
        if (ok) return;
        auto it = lines_.find(k);
        throw ConfigError(key(k) + ": " + what + (it != lines_.end() ? line_of(it->second) : ""));
    }

    void reject_unknown() const {
        if (!node_ || !node_.IsMap()) return;
        for (const auto& kv : node_) {
            const std::string k = kv.first.as<std::string>();
            if (!seen_.count(k)) fail(key(k), "unknown key", kv.first);
        }
    }

private:
    YAML::Node node_;
    std::string path_;
    std::set<std::string> seen_;
    std::map<std::string, YAML::Node> lines_;
};

// Generator parameter tables reuse the simulators' flat key-value form:
// nested mappings join with '.', lists become comma-separated numbers.
void flatten(const YAML::Node& n, const std::string& prefix, const std::string& path, const KeyValues& defaults,
             KeyValues& out) {
    if (!n.IsMap()) fail(path, "expected a mapping", n);
    for (const auto& kv : n) {
        const std::string k = prefix.empty() ? kv.first.as<std::string>() : prefix + "." + kv.first.as<std::string>();
        const std::string full = path + "." + kv.first.as<std::string>();
        const YAML::Node& v = kv.second;
        if (v.IsMap()) {
            flatten(v, k, full, defaults, out);
            continue;
        }
        if (!defaults.count(k)) fail(full, "unknown key", kv.first);
        std::vector<std::string> parts;
        if (v.IsSequence())
            for (const auto& item : v) parts.push_back(item.Scalar());
        else if (v.IsScalar())
            parts.push_back(v.Scalar());
        else
            fail(full, "expected a number or a list of numbers", v);
        std::string joined;
        for (const auto& p : parts) {
            double d = 0.0;
            auto r = std::from_chars(p.data(), p.data() + p.size(), d);
            if (p.empty() || r.ec != std::errc() || r.ptr != p.data() + p.size()) {
                fail(full, "expected a number, got '" + p + "'", v);
            }
            joined += (joined.empty() ? "" : ",") + shortest(d);
        }
        out[k] = joined;
    }
}

template <typename Cfg>
Cfg read_generator_table(const YAML::Node& n, const std::string& path, const Cfg& defaults) {
    KeyValues kv = defaults.to_kv();
    if (n && !n.IsNull()) flatten(n, "", path, defaults.to_kv(), kv);
    try {
        return Cfg::from_kv(kv);
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + e.what() + line_of(n));
    }
}

std::size_t generator_d_x(const GeneratorSection& g) { return g.kind == "tumor" ? 4 : g.ehr.d_x; }

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(origin + ": " + e.msg + " (line " + std::to_string(e.mark.line + 1) + ")");
    }
    ExperimentConfig c;
    Section top(root, "");

    Section gen(top.find("generator"), "generator");
    GeneratorSection& g = c.generator;
    gen.text("kind", g.kind);
    gen.size("n_train", g.n_train);
    gen.size("n_val", g.n_val);
    gen.size("n_test", g.n_test);
    gen.size("max_len", g.max_len);
    gen.check(g.kind == "tumor" || g.kind == "ehr", "kind", "must be tumor or ehr");
    gen.check(g.n_train >= 2, "n_train", "must be at least 2");
    gen.check(g.n_val >= 2, "n_val", "must be at least 2");
    gen.check(g.n_test >= 1, "n_test", "must be at least 1");
    g.tumor = read_generator_table(gen.find("tumor"), "generator.tumor", TumorConfig{});
    g.ehr = read_generator_table(gen.find("ehr"), "generator.ehr", EHRGenConfig{});
    gen.reject_unknown();

    Section model(top.find("model"), "model");
    EncoderConfig& e = c.encoder;
    DecoderConfig& d = c.decoder;
    model.size("z_dim", e.z_dim);
    model.size("c_dim", e.c_dim);
    model.size("r_dim", d.r_dim);
    model.size("tau", e.tau);
    model.real("sigma", d.sigma);
    model.size("plan_hidden", d.plan_hidden);
    model.size("head_hidden", d.head_hidden);
    model.size("cls_hidden", d.cls_hidden);
    model.list("flags", c.flags, "strings");
    model.check(e.tau >= 1, "tau", "must be at least 1");
    model.check(d.sigma > 0.0, "sigma", "must be positive");
    for (const char* k : {"z_dim", "c_dim", "r_dim", "plan_hidden", "head_hidden", "cls_hidden"}) {
        const std::size_t v = std::string(k) == "z_dim"         ? e.z_dim
                              : std::string(k) == "c_dim"       ? e.c_dim
                              : std::string(k) == "r_dim"       ? d.r_dim
                              : std::string(k) == "plan_hidden" ? d.plan_hidden
                              : std::string(k) == "head_hidden" ? d.head_hidden
                                                                : d.cls_hidden;
        model.check(v >= 1, k, "must be at least 1");
    }
    try {
        (void)apply_variant(c, "");
    } catch (const std::invalid_argument& ex) {
        model.check(false, "flags", ex.what());
    }

    Section enc(model.find("encoder"), "model.encoder");
    std::string bound = bound_name(e.infomax_bound);
    enc.real("lr", e.lr);
    enc.real("weight_decay", e.weight_decay);
    enc.real("clip_norm", e.clip_norm);
    enc.size("batch_size", e.batch_size);
    enc.size("max_epochs", e.max_epochs);
    enc.size("patience", e.patience);
    enc.real("min_delta", e.min_delta);
    enc.size("val_batches", e.val_batches);
    enc.flag("use_cpc", e.use_cpc);
    enc.flag("use_infomax", e.use_infomax);
    enc.text("bound", bound);
    enc.check(e.batch_size >= 2, "batch_size", "must be at least 2");
    enc.check(e.patience >= 1, "patience", "must be at least 1");
    enc.check(e.lr >= 0.0, "lr", "must be non-negative");
    enc.check(e.val_batches >= 1, "val_batches", "must be at least 1");
    try {
        e.infomax_bound = parse_bound(bound);
    } catch (const std::invalid_argument& ex) {
        enc.check(false, "bound", ex.what());
    }
    enc.reject_unknown();

    Section dec(model.find("decoder"), "model.decoder");
    std::string balancing = balancing_name(d.balancing);
    dec.real("lr", d.lr);
    dec.real("encoder_lr_ratio", d.encoder_lr_ratio);
    dec.real("cls_lr", d.cls_lr);
    dec.real("cls_momentum", d.cls_momentum);
    dec.real("weight_decay", d.weight_decay);
    dec.real("club_weight", d.club_weight);
    dec.real("clip_norm", d.clip_norm);
    dec.size("batch_size", d.batch_size);
    dec.real("origin_fraction", d.origin_fraction);
    dec.size("max_epochs", d.max_epochs);
    dec.size("patience", d.patience);
    dec.real("min_delta", d.min_delta);
    dec.size("val_origin_stride", d.val_origin_stride);
    dec.text("balancing", balancing);
    dec.check(d.batch_size >= 2, "batch_size", "must be at least 2");
    dec.check(d.patience >= 1, "patience", "must be at least 1");
    dec.check(d.lr >= 0.0, "lr", "must be non-negative");
    dec.check(d.origin_fraction > 0.0 && d.origin_fraction <= 1.0, "origin_fraction", "must be in (0, 1]");
    dec.check(d.val_origin_stride >= 1, "val_origin_stride", "must be at least 1");
    try {
        d.balancing = parse_balancing(balancing);
    } catch (const std::invalid_argument& ex) {
        dec.check(false, "balancing", ex.what());
    }
    dec.reject_unknown();
    model.reject_unknown();

    Section ev(top.find("eval"), "eval");
    std::string strategy = strategy_name(c.eval.strategy);
    ev.text("strategy", strategy);
    ev.size("origin_stride", c.eval.origin_stride);
    ev.list("mask_covariates", c.eval.mask_covariates, "covariate indices");
    try {
        c.eval.strategy = parse_strategy(strategy);
    } catch (const std::invalid_argument& ex) {
        ev.check(false, "strategy", ex.what());
    }
    ev.check(c.eval.origin_stride >= 1, "origin_stride", "must be at least 1");
    for (std::size_t col : c.eval.mask_covariates)
        ev.check(col < generator_d_x(g), "mask_covariates",
                 "index " + std::to_string(col) + " out of range for d_x = " + std::to_string(generator_d_x(g)));
    ev.reject_unknown();

    Section run(top.find("run"), "run");
    run.list("seeds", c.run.seeds, "unsigned integers");
    run.text("out_dir", c.run.out_dir);
    run.size("workers", c.run.workers);
    run.check(!c.run.seeds.empty(), "seeds", "needs at least one seed");
    run.check(c.run.workers >= 1, "workers", "must be at least 1");
    run.reject_unknown();
    top.reject_unknown();

    // The simulators' minimum active length follows the model horizon.
    g.tumor.tau = e.tau;
    g.ehr.tau = e.tau;
    gen.check(g.max_len >= e.tau + 5, "max_len", "must be at least model.tau + 5");
    return c;
}

ExperimentConfig parse_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path + ": cannot read config file");
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config_text(ss.str(), path);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

namespace {

// Nested YAML from dotted keys, in sorted key order.
void emit_table(std::ostringstream& s, const KeyValues& kv, const std::string& indent) {
    std::map<std::string, KeyValues> groups;
    for (const auto& [k, v] : kv) {
        if (k == "tau") continue;  // follows model.tau
        const auto dot = k.find('.');
        if (dot == std::string::npos) {
            const bool list = v.find(',') != std::string::npos;
            std::string value;
            std::string part;
            std::istringstream in(v);
            while (std::getline(in, part, ',')) {
                value += (value.empty() ? "" : ", ") + shortest(std::stod(part));
            }
            s << indent << k << ": " << (list ? "[" + value + "]" : value) << '\n';
        } else {
            groups[k.substr(0, dot)][k.substr(dot + 1)] = v;
        }
    }
    for (const auto& [g, sub] : groups) {
        s << indent << g << ":\n";
        emit_table(s, sub, indent + "  ");
    }
}

template <typename T>
std::string join_list(const std::vector<T>& v) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
    return out + "]";
}

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"' || ch == '\\') out += '\\';
        out += ch;
    }
    return out + "\"";
}

std::string generator_yaml(const GeneratorSection& g) {
    std::ostringstream s;
    s << "generator:\n"
      << "  kind: " << g.kind << '\n'
      << "  n_train: " << g.n_train << '\n'
      << "  n_val: " << g.n_val << '\n'
      << "  n_test: " << g.n_test << '\n'
      << "  max_len: " << g.max_len << '\n'
      << "  tumor:\n";
    emit_table(s, g.tumor.to_kv(), "    ");
    s << "  ehr:\n";
    emit_table(s, g.ehr.to_kv(), "    ");
    return s.str();
}

std::string encoder_yaml(const ExperimentConfig& c) {
    const EncoderConfig& e = c.encoder;
    std::ostringstream s;
    s << "  z_dim: " << e.z_dim << '\n'
      << "  c_dim: " << e.c_dim << '\n'
      << "  tau: " << e.tau << '\n'
      << "  encoder:\n"
      << "    lr: " << shortest(e.lr) << '\n'
      << "    weight_decay: " << shortest(e.weight_decay) << '\n'
      << "    clip_norm: " << shortest(e.clip_norm) << '\n'
      << "    batch_size: " << e.batch_size << '\n'
      << "    max_epochs: " << e.max_epochs << '\n'
      << "    patience: " << e.patience << '\n'
      << "    min_delta: " << shortest(e.min_delta) << '\n'
      << "    val_batches: " << e.val_batches << '\n'
      << "    use_cpc: " << (e.use_cpc ? "true" : "false") << '\n'
      << "    use_infomax: " << (e.use_infomax ? "true" : "false") << '\n'
      << "    bound: " << bound_name(e.infomax_bound) << '\n';
    return s.str();
}

std::string decoder_yaml(const ExperimentConfig& c) {
    const DecoderConfig& d = c.decoder;
    std::ostringstream s;
    s << "  r_dim: " << d.r_dim << '\n'
      << "  sigma: " << shortest(d.sigma) << '\n'
      << "  plan_hidden: " << d.plan_hidden << '\n'
      << "  head_hidden: " << d.head_hidden << '\n'
      << "  cls_hidden: " << d.cls_hidden << '\n'
      << "  decoder:\n"
      << "    lr: " << shortest(d.lr) << '\n'
      << "    encoder_lr_ratio: " << shortest(d.encoder_lr_ratio) << '\n'
      << "    cls_lr: " << shortest(d.cls_lr) << '\n'
      << "    cls_momentum: " << shortest(d.cls_momentum) << '\n'
      << "    weight_decay: " << shortest(d.weight_decay) << '\n'
      << "    club_weight: " << shortest(d.club_weight) << '\n'
      << "    clip_norm: " << shortest(d.clip_norm) << '\n'
      << "    batch_size: " << d.batch_size << '\n'
      << "    origin_fraction: " << shortest(d.origin_fraction) << '\n'
      << "    max_epochs: " << d.max_epochs << '\n'
      << "    patience: " << d.patience << '\n'
      << "    min_delta: " << shortest(d.min_delta) << '\n'
      << "    val_origin_stride: " << d.val_origin_stride << '\n'
      << "    balancing: " << balancing_name(d.balancing) << '\n';
    return s.str();
}

std::string flags_yaml(const ExperimentConfig& c) {
    std::string out = "  flags: [";
    for (std::size_t i = 0; i < c.flags.size(); ++i) out += (i ? ", " : "") + c.flags[i];
    return out + "]\n";
}

}  // namespace

std::string serialize_config(const ExperimentConfig& c) {
    std::ostringstream s;
    s << generator_yaml(c.generator) << "model:\n" << encoder_yaml(c) << decoder_yaml(c) << flags_yaml(c)
      << "eval:\n"
      << "  strategy: " << strategy_name(c.eval.strategy) << '\n'
      << "  origin_stride: " << c.eval.origin_stride << '\n'
      << "  mask_covariates: " << join_list(c.eval.mask_covariates) << '\n'
      << "run:\n"
      << "  seeds: " << join_list(c.run.seeds) << '\n'
      << "  out_dir: " << quote(c.run.out_dir) << '\n'
      << "  workers: " << c.run.workers << '\n';
    return s.str();
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return serialize_config(a) == serialize_config(b);
}

std::string data_fingerprint(const ExperimentConfig& c, std::uint64_t data_seed) {
    return sha1_hex("data\n" + generator_yaml(c.generator) + "tau: " + std::to_string(c.encoder.tau) +
                    "\nseed: " + std::to_string(data_seed) + "\n");
}

std::string encoder_fingerprint(const ExperimentConfig& c, const std::string& data_fp) {
    return sha1_hex("encoder\n" + data_fp + "\n" + encoder_yaml(c) + flags_yaml(c) +
                    "mask: " + join_list(c.eval.mask_covariates) + "\nseed: " + std::to_string(c.run.seeds.front()) +
                    "\n");
}

std::string model_fingerprint(const ExperimentConfig& c, const std::string& encoder_fp) {
    return sha1_hex("model\n" + encoder_fp + "\n" + decoder_yaml(c) + flags_yaml(c));
}

}  // namespace cfseq
