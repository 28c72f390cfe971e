#include "tokenflux/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tokenflux {

namespace {

constexpr char kMagic[4] = {'T', 'F', 'L', 'X'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    std::uint32_t u32() {
        if (pos + 4 > buf.size()) throw std::runtime_error("TFLX: truncated file");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    }

    double f64() {
        if (pos + 8 > buf.size()) throw std::runtime_error("TFLX: truncated file");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        }
        pos += 8;
        return std::bit_cast<double>(v);
    }

    void magic() {
        if (pos + 4 > buf.size() || std::memcmp(buf.data() + pos, kMagic, 4) != 0) {
            throw std::runtime_error("TFLX: bad magic");
        }
        pos += 4;
    }
};

void put_matrix(std::string& out, const Matrix& m) {
    for (double v : m.data) put_f64(out, v);
}

void put_vector(std::string& out, const std::vector<double>& v) {
    for (double x : v) put_f64(out, x);
}

Matrix read_matrix(ByteReader& r, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = r.f64();
    return m;
}

std::vector<double> read_vec(ByteReader& r, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = r.f64();
    return v;
}

}  // namespace

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path.string());
    std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return content;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    return nlohmann::json::parse(read_text_file(path));
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

nlohmann::json config_to_json(const ModelConfig& config) {
    return nlohmann::json{{"num_layers", config.num_layers}, {"hidden_dim", config.hidden_dim},
                          {"ffn_dim", config.ffn_dim},       {"num_heads", config.num_heads},
                          {"vocab_size", config.vocab_size}, {"rope_base", config.rope_base}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.rope_base = j.value("rope_base", 10000.0);
    c.validate();
    return c;
}

void save_model(const LayerWeights& w, const std::filesystem::path& base) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(w.config.num_layers));
    put_u32(out, static_cast<std::uint32_t>(w.config.hidden_dim));
    put_u32(out, static_cast<std::uint32_t>(w.config.ffn_dim));
    put_u32(out, static_cast<std::uint32_t>(w.config.num_heads));
    for (const auto& lp : w.layers) {
        put_vector(out, lp.attn_norm);
        put_matrix(out, lp.w_q);
        put_matrix(out, lp.w_k);
        put_matrix(out, lp.w_v);
        put_matrix(out, lp.w_o);
        put_vector(out, lp.ffn_norm);
        put_matrix(out, lp.w_up);
        put_matrix(out, lp.w_down);
    }
    put_vector(out, w.final_norm);
    put_matrix(out, w.w_out);

    std::filesystem::path tflx = base;
    tflx += ".tflx";
    write_text_file(tflx, out);
    std::filesystem::path json = base;
    json += ".json";
    write_json_file(json, config_to_json(w.config));
}

LayerWeights load_model(const std::filesystem::path& base) {
    std::filesystem::path json = base;
    json += ".json";
    const ModelConfig config = config_from_json(read_json_file(json));

    std::filesystem::path tflx = base;
    tflx += ".tflx";
    const std::string buf = read_text_file(tflx);
    ByteReader r{buf};
    r.magic();
    if (r.u32() != kVersion) throw std::runtime_error("TFLX: unsupported version");
    const auto t = r.u32(), d = r.u32(), m = r.u32(), heads = r.u32();
    if (static_cast<int>(t) != config.num_layers || static_cast<int>(d) != config.hidden_dim ||
        static_cast<int>(m) != config.ffn_dim || static_cast<int>(heads) != config.num_heads) {
        throw std::runtime_error("TFLX: header disagrees with config mirror");
    }

    LayerWeights w;
    w.config = config;
    w.layers.resize(t);
    for (auto& lp : w.layers) {
        lp.attn_norm = read_vec(r, d);
        lp.w_q = read_matrix(r, d, d);
        lp.w_k = read_matrix(r, d, d);
        lp.w_v = read_matrix(r, d, d);
        lp.w_o = read_matrix(r, d, d);
        lp.ffn_norm = read_vec(r, d);
        lp.w_up = read_matrix(r, d, m);
        lp.w_down = read_matrix(r, m, d);
    }
    w.final_norm = read_vec(r, d);
    w.w_out = read_matrix(r, d, config.vocab_size);
    if (r.pos != buf.size()) throw std::runtime_error("TFLX: trailing bytes");
    return w;
}

void write_tensor(const std::filesystem::path& path, const Matrix& m) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(m.rows));
    put_u32(out, static_cast<std::uint32_t>(m.cols));
    put_matrix(out, m);
    write_text_file(path, out);
}

Matrix read_tensor(const std::filesystem::path& path) {
    const std::string buf = read_text_file(path);
    ByteReader r{buf};
    r.magic();
    if (r.u32() != kVersion) throw std::runtime_error("TFLX: unsupported version");
    const auto rows = r.u32(), cols = r.u32();
    Matrix m = read_matrix(r, rows, cols);
    if (r.pos != buf.size()) throw std::runtime_error("TFLX: trailing bytes");
    return m;
}

nlohmann::json schedule_to_json(const PruneSchedule& schedule) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& st : schedule.stages) {
        stages.push_back({{"layer", st.layer},
                          {"keep_ratio", st.keep_ratio},
                          {"merge_budget", st.merge_budget},
                          {"strategy", strategy_name(st.strategy)}});
    }
    return nlohmann::json{{"stages", stages}, {"final_stage_policy", "hard-select"}};
}

PruneSchedule schedule_from_json(const nlohmann::json& j) {
    if (j.contains("final_stage_policy") && j.at("final_stage_policy") != "hard-select") {
        throw std::invalid_argument("schedule: only hard-select final_stage_policy is supported");
    }
    PruneSchedule schedule;
    for (const auto& s : j.at("stages")) {
        PruneStage st;
        st.layer = s.at("layer").get<int>();
        st.keep_ratio = s.at("keep_ratio").get<double>();
        st.merge_budget = s.value("merge_budget", 0);
        st.strategy = strategy_from_name(s.at("strategy").get<std::string>());
        schedule.stages.push_back(st);
    }
    return schedule;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace tokenflux
