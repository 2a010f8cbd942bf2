#include "gradot/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gradot/errors.hpp"
#include "gradot/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "container payloads are little-endian; big-endian hosts are unsupported");

namespace gradot {

namespace container {

void write(const std::string& path, const nlohmann::json& meta,
           const std::vector<std::pair<std::string, const Matrix*>>& tensors) {
    nlohmann::json manifest;
    manifest["format"] = "gradot-container-v1";
    manifest["meta"] = meta;
    nlohmann::json tlist = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : tensors) {
        nlohmann::json t;
        t["name"] = name;
        t["rows"] = m->rows();
        t["cols"] = m->cols();
        t["offset"] = offset;
        tlist.push_back(std::move(t));
        offset += m->size() * sizeof(double);
    }
    manifest["tensors"] = std::move(tlist);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open for writing: " + path);
    }
    out << manifest.dump() << '\n';
    for (const auto& [name, m] : tensors) {
        out.write(reinterpret_cast<const char*>(m->data()),
                  static_cast<std::streamsize>(m->size() * sizeof(double)));
    }
    if (!out) {
        throw DataError("write failed: " + path);
    }
}

Contents read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open container: " + path);
    }
    std::string line;
    if (!std::getline(in, line) || line.empty()) {
        throw DataError("corrupt container (missing manifest line): " + path);
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt container manifest in " + path + ": " + e.what());
    }
    if (manifest.value("format", "") != "gradot-container-v1") {
        throw DataError("unknown container format in " + path);
    }

    Contents c;
    c.meta = manifest.value("meta", nlohmann::json::object());
    const std::streampos payload_base = in.tellg();
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const int rows = t.at("rows").get<int>();
        const int cols = t.at("cols").get<int>();
        const auto offset = t.at("offset").get<std::uint64_t>();
        Matrix m(rows, cols);
        in.seekg(payload_base + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!in) {
            throw DataError("corrupt container payload for tensor '" + name + "' in " + path);
        }
        if (!m.all_finite()) {
            throw DataError("non-finite values in tensor '" + name + "' of " + path);
        }
        c.order.push_back(name);
        c.tensors.emplace(name, std::move(m));
    }
    return c;
}

} // namespace container

std::string bytes_hash_hex(const void* data, std::size_t len) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(data, len)));
    return std::string(buf);
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot hash missing file: " + path);
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes_hash_hex(bytes.data(), bytes.size());
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["vocab_size"] = cfg.vocab_size;
    j["ctx_len"] = cfg.ctx_len;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["d_int"] = cfg.d_int;
    j["n_layers"] = cfg.n_layers;
    j["n1"] = cfg.n1;
    j["n2"] = cfg.n2;
    j["seed"] = cfg.seed;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.ctx_len = j.at("ctx_len").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.d_int = j.at("d_int").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n1 = j.at("n1").get<int>();
    cfg.n2 = j.at("n2").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

void save_model(const std::string& path, const ParamSet& params, const ModelConfig& cfg,
                const nlohmann::json& extra_meta) {
    nlohmann::json meta = extra_meta.is_null() ? nlohmann::json::object() : extra_meta;
    meta["kind"] = meta.value("kind", "model");
    meta["config"] = config_to_json(cfg);

    std::vector<std::pair<std::string, const Matrix*>> tensors;
    for_each_tensor(params, [&](const std::string& name, const Matrix& m) {
        tensors.emplace_back(name, &m);
    });
    container::write(path, meta, tensors);
}

LoadedModel load_model(const std::string& path) {
    container::Contents c = container::read(path);
    LoadedModel out;
    if (!c.meta.contains("config")) {
        throw DataError("checkpoint missing config: " + path);
    }
    out.cfg = config_from_json(c.meta.at("config"));
    out.cfg.validate();
    out.meta = c.meta;

    ParamSet& ps = out.params;
    ps.blocks.resize(static_cast<std::size_t>(out.cfg.n_layers));

    auto take = [&](const std::string& name) -> Matrix {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end()) {
            throw DataError("checkpoint " + path + " missing tensor '" + name + "'");
        }
        Matrix m = std::move(it->second);
        c.tensors.erase(it);
        return m;
    };
    auto take_linear = [&](const std::string& id, bool with_bias) -> LinearParam {
        LinearParam lin;
        if (c.tensors.count(id + ".w")) {
            lin.w = take(id + ".w");
        } else if (c.tensors.count(id + ".w#b") && c.tensors.count(id + ".w#a")) {
            lin.lr_b = take(id + ".w#b");
            lin.lr_a = take(id + ".w#a");
        } else {
            throw DataError("checkpoint " + path + " missing weights for linear '" + id + "'");
        }
        if (with_bias) {
            lin.bias = take(id + ".b");
        }
        return lin;
    };

    ps.tok_emb = take("tok_emb");
    ps.pos_emb = take("pos_emb");
    for (int i = 0; i < out.cfg.n_layers; ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        BlockParams& blk = ps.blocks[static_cast<std::size_t>(i)];
        blk.ln1_g = take(p + "ln1.g");
        blk.ln1_b = take(p + "ln1.b");
        blk.wq = take_linear(p + "attn.wq", true);
        blk.wk = take_linear(p + "attn.wk", true);
        blk.wv = take_linear(p + "attn.wv", true);
        blk.wo = take_linear(p + "attn.wo", true);
        blk.ln2_g = take(p + "ln2.g");
        blk.ln2_b = take(p + "ln2.b");
        blk.w_up = take_linear(p + "mlp.up", true);
        blk.w_down = take_linear(p + "mlp.down", true);
    }
    ps.final_ln_g = take("final_ln.g");
    ps.final_ln_b = take("final_ln.b");
    ps.head = take_linear("head", false);

    if (!c.tensors.empty()) {
        throw DataError("checkpoint " + path + " has unexpected tensor '" +
                        c.tensors.begin()->first + "'");
    }
    return out;
}

} // namespace gradot
