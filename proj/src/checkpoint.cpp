#include "gallop/checkpoint.hpp"

#include "gallop/error.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace gallop {

namespace {

constexpr char kMagic[4] = {'G', 'L', 'P', 'C'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(static_cast<bool>(in), "checkpoint '", path, "': truncated file");
    return v;
}

void write_string(std::ofstream& out, const std::string& s) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in, const std::string& path) {
    const auto len = read_pod<std::uint32_t>(in, path);
    std::string s(len, '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    require(static_cast<bool>(in), "checkpoint '", path, "': truncated string");
    return s;
}

} // namespace

std::string model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["arch"] = c.arch == ArchKind::mlp ? "mlp" : "micro-transformer";
    j["input_dim"] = c.input_dim;
    j["hidden_width"] = c.hidden_width;
    j["depth"] = c.depth;
    j["output_dim"] = c.output_dim;
    j["vocab_size"] = c.vocab_size;
    j["context_len"] = c.context_len;
    j["n_heads"] = c.n_heads;
    j["n_blocks"] = c.n_blocks;
    j["quant_lo"] = c.quant_lo;
    j["quant_hi"] = c.quant_hi;
    j["init_seed"] = c.init_seed;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail("model config: invalid JSON: ", e.what());
    }
    ModelConfig c;
    const std::string arch = j.value("arch", "mlp");
    if (arch == "mlp") {
        c.arch = ArchKind::mlp;
    } else if (arch == "micro-transformer") {
        c.arch = ArchKind::micro_transformer;
    } else {
        fail("model config: unknown arch '", arch, "'");
    }
    c.input_dim = j.value("input_dim", c.input_dim);
    c.hidden_width = j.value("hidden_width", c.hidden_width);
    c.depth = j.value("depth", c.depth);
    c.output_dim = j.value("output_dim", c.output_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.context_len = j.value("context_len", c.context_len);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.quant_lo = j.value("quant_lo", c.quant_lo);
    c.quant_hi = j.value("quant_hi", c.quant_hi);
    c.init_seed = j.value("init_seed", c.init_seed);
    return c;
}

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ParameterSet& params, const SparsityMask* mask) {
    if (mask) {
        require(mask->same_structure(params), "save_checkpoint: mask/parameter structure mismatch");
    }
    std::ofstream out(path, std::ios::binary);
    require(out.is_open(), "checkpoint '", path, "': cannot open for writing");

    out.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, kVersion);

    const std::string cfg = model_config_to_json(config);
    write_pod<std::uint64_t>(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.layer_count()));
    for (const auto& l : params.layers()) {
        write_string(out, l.name);
        write_pod<std::uint64_t>(out, l.values.rows);
        write_pod<std::uint64_t>(out, l.values.cols);
    }
    for (const auto& l : params.layers()) {
        out.write(reinterpret_cast<const char*>(l.values.data.data()),
                  static_cast<std::streamsize>(l.values.data.size() * sizeof(double)));
    }

    write_pod<std::uint8_t>(out, mask ? 1 : 0);
    if (mask) {
        write_pod<double>(out, mask->threshold);
        write_pod<double>(out, mask->target_density);
        write_pod<std::uint64_t>(out, mask->sample_seed);
        for (const auto& layer : mask->words()) {
            out.write(reinterpret_cast<const char*>(layer.data()),
                      static_cast<std::streamsize>(layer.size() * sizeof(std::uint64_t)));
        }
    }
    require(static_cast<bool>(out), "checkpoint '", path, "': write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.is_open(), "checkpoint '", path, "': cannot open");

    char magic[4];
    in.read(magic, sizeof(magic));
    require(static_cast<bool>(in) && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
            "checkpoint '", path, "': bad magic");
    const auto version = read_pod<std::uint32_t>(in, path);
    require(version == kVersion, "checkpoint '", path, "': unsupported version ", version);

    const auto cfg_len = read_pod<std::uint64_t>(in, path);
    std::string cfg(cfg_len, '\0');
    in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
    require(static_cast<bool>(in), "checkpoint '", path, "': truncated config");

    Checkpoint ck;
    ck.config = model_config_from_json(cfg);

    const auto n_layers = read_pod<std::uint32_t>(in, path);
    struct Header { std::string name; std::uint64_t rows, cols; };
    std::vector<Header> headers;
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        Header h;
        h.name = read_string(in, path);
        h.rows = read_pod<std::uint64_t>(in, path);
        h.cols = read_pod<std::uint64_t>(in, path);
        headers.push_back(std::move(h));
    }
    for (const auto& h : headers) {
        const std::size_t idx = ck.params.add_layer(h.name, h.rows, h.cols);
        auto& data = ck.params.layer(idx).values.data;
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        require(static_cast<bool>(in), "checkpoint '", path, "': truncated payload for layer '", h.name, "'");
    }

    const auto has_mask = read_pod<std::uint8_t>(in, path);
    if (has_mask) {
        SparsityMask mask;
        mask.init(ck.params);
        mask.threshold = read_pod<double>(in, path);
        mask.target_density = read_pod<double>(in, path);
        mask.sample_seed = read_pod<std::uint64_t>(in, path);
        for (auto& layer : mask.words()) {
            in.read(reinterpret_cast<char*>(layer.data()),
                    static_cast<std::streamsize>(layer.size() * sizeof(std::uint64_t)));
            require(static_cast<bool>(in), "checkpoint '", path, "': truncated mask section");
        }
        mask.recount();
        ck.mask = std::move(mask);
    }
    return ck;
}

} // namespace gallop
