#include "cfseq/decoder/checkpoint.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace cfseq {

namespace {

using nlohmann::json;

constexpr const char* kFormat = "cfseq-checkpoint";
constexpr int kVersion = 1;

json tensor_json(const Tensor& t) { return json{{"shape", t.shape}, {"values", t.data}}; }

Tensor tensor_from(const json& j) {
    Shape shape = j.at("shape").get<Shape>();
    std::vector<double> values = j.at("values").get<std::vector<double>>();
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    if (n != values.size()) throw CheckpointError("checkpoint: tensor shape does not match its value count");
    return Tensor(std::move(shape), std::move(values));
}

json store_json(const ParamStore& s) {
    json arr = json::array();
    for (const auto& e : s.entries()) {
        json p = tensor_json(e.value.data());
        p["name"] = e.name;
        p["group"] = e.group;
        arr.push_back(std::move(p));
    }
    return arr;
}

// Only entries whose name starts with `prefix` go into the returned store.
ParamStore store_from(const json& arr, const std::string& prefix) {
    ParamStore s;
    for (const auto& p : arr) {
        const std::string name = p.at("name").get<std::string>();
        if (name.rfind(prefix, 0) != 0) continue;
        s.add(name, p.at("group").get<std::string>(), tensor_from(p));
    }
    return s;
}

json norm_json(const Normalizer& n) {
    return json{{"x_mean", n.x_mean}, {"x_sd", n.x_sd},         {"v_mean", n.v_mean},
                {"v_sd", n.v_sd},     {"y_offset", n.y_offset}, {"y_scale", n.y_scale},
                {"n_treatments", n.n_treatments}};
}

Normalizer norm_from(const json& j) {
    Normalizer n;
    n.x_mean = j.at("x_mean").get<std::vector<double>>();
    n.x_sd = j.at("x_sd").get<std::vector<double>>();
    n.v_mean = j.at("v_mean").get<std::vector<double>>();
    n.v_sd = j.at("v_sd").get<std::vector<double>>();
    n.y_offset = j.at("y_offset").get<double>();
    n.y_scale = j.at("y_scale").get<double>();
    n.n_treatments = j.at("n_treatments").get<std::size_t>();
    return n;
}

json header(const std::string& kind, const std::string& fingerprint, const Normalizer& norm, const Encoder& enc) {
    return json{{"format", kFormat},
                {"version", kVersion},
                {"kind", kind},
                {"config_fingerprint", fingerprint},
                {"normalizer", norm_json(norm)},
                {"dims", {{"d_u", enc.d_u}, {"z_dim", enc.z_dim}, {"c_dim", enc.c_dim}, {"tau", enc.tau}}}};
}

json parse_checked(const std::string& text, const std::string& kind) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint: not valid JSON (") + e.what() + ")");
    }
    if (!j.is_object() || j.value("format", "") != kFormat) throw CheckpointError("checkpoint: unknown format");
    if (j.value("version", 0) != kVersion) throw CheckpointError("checkpoint: unsupported version");
    if (j.value("kind", "") != kind) {
        throw CheckpointError("checkpoint: expected a " + kind + " checkpoint, found '" + j.value("kind", "") + "'");
    }
    return j;
}

Encoder encoder_from(const json& j) {
    const json& d = j.at("dims");
    return Encoder::bind(store_from(j.at("params"), "enc."), d.at("d_u").get<std::size_t>(),
                         d.at("z_dim").get<std::size_t>(), d.at("c_dim").get<std::size_t>(),
                         d.at("tau").get<std::size_t>());
}

}  // namespace

std::string encoder_checkpoint_json(const EncoderCheckpoint& ck) {
    json j = header("encoder", ck.config_fingerprint, ck.norm, ck.enc);
    j["params"] = store_json(ck.enc.store);
    return j.dump(1) + "\n";
}

std::string model_checkpoint_json(const Model& m) {
    json j = header("model", m.config_fingerprint, m.norm, m.enc);
    j["dims"]["r_dim"] = m.dec.r_dim;
    j["dims"]["d_v"] = m.dec.d_v;
    j["dims"]["n_treatments"] = m.dec.n_treatments;
    j["dims"]["sigma"] = m.sigma;
    j["spectral_u"] = {{"dec.w1", m.dec.w1.u.data}, {"dec.w2", m.dec.w2.u.data}};
    json params = store_json(m.enc.store);
    for (auto& p : store_json(m.dec.store)) params.push_back(std::move(p));
    j["params"] = std::move(params);
    return j.dump(1) + "\n";
}

EncoderCheckpoint parse_encoder_checkpoint(const std::string& text) {
    json j = parse_checked(text, "encoder");
    try {
        return EncoderCheckpoint{norm_from(j.at("normalizer")), encoder_from(j),
                                 j.at("config_fingerprint").get<std::string>()};
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed encoder checkpoint (") + e.what() + ")");
    }
}

Model parse_model_checkpoint(const std::string& text) {
    json j = parse_checked(text, "model");
    try {
        Model m;
        m.norm = norm_from(j.at("normalizer"));
        m.enc = encoder_from(j);
        const json& d = j.at("dims");
        auto u1 = j.at("spectral_u").at("dec.w1").get<std::vector<double>>();
        auto u2 = j.at("spectral_u").at("dec.w2").get<std::vector<double>>();
        const std::size_t n1 = u1.size(), n2 = u2.size();
        m.dec = Decoder::bind(store_from(j.at("params"), "dec."), d.at("d_v").get<std::size_t>(),
                              d.at("n_treatments").get<std::size_t>(), Tensor(Shape{n1}, std::move(u1)),
                              Tensor(Shape{n2}, std::move(u2)));
        m.tau = d.at("tau").get<std::size_t>();
        m.sigma = d.at("sigma").get<double>();
        m.config_fingerprint = j.at("config_fingerprint").get<std::string>();
        return m;
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed model checkpoint (") + e.what() + ")");
    }
}

void write_file_atomic(const std::string& path, const std::string& contents) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << contents;
        out.flush();
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void save_encoder_checkpoint(const EncoderCheckpoint& ck, const std::string& path) {
    write_file_atomic(path, encoder_checkpoint_json(ck));
}

void save_model_checkpoint(const Model& model, const std::string& path) {
    write_file_atomic(path, model_checkpoint_json(model));
}

EncoderCheckpoint load_encoder_checkpoint(const std::string& path) { return parse_encoder_checkpoint(read_file(path)); }

Model load_model_checkpoint(const std::string& path) { return parse_model_checkpoint(read_file(path)); }

}  // namespace cfseq
