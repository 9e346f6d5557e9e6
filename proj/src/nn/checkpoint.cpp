#include "qsm/nn/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>

#include <json.hpp>

#include "qsm/errors.hpp"

namespace qsm::nn {

namespace {

using nlohmann::ordered_json;

std::uint32_t to_little(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

ordered_json config_json(const GeneratorConfig& c) {
    return {{"in_channels", c.in_channels}, {"depth", c.depth}, {"base_channels", c.base_channels}};
}

ordered_json config_json(const DiscriminatorConfig& c) {
    return {{"n_layers", c.n_layers}, {"base_channels", c.base_channels}};
}

void write_impl(const Module& m, const char* model, const ordered_json& config, const std::filesystem::path& path) {
    ordered_json header;
    header["version"] = 1;
    header["model"] = model;
    header["config"] = config;
    header["params"] = ordered_json::array();
    std::vector<std::uint32_t> raw;
    for (const auto& p : m.parameters()) {
        header["params"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
        for (double v : p.tensor.values()) {
            const float f = static_cast<float>(v);
            if (!std::isfinite(f))
                throw IoError(IoErrorKind::NonFinitePayload, path.string() + ": parameter " + p.name + " is not finite in f32");
            raw.push_back(to_little(std::bit_cast<std::uint32_t>(f)));
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::CannotOpen, path.string() + ": cannot open for writing");
    const std::string h = header.dump();
    out << "DBC1\n" << h << '\n';
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (!out) throw IoError(IoErrorKind::CannotOpen, path.string() + ": write failed");
}

[[noreturn]] void malformed(const std::filesystem::path& path, const std::string& why) {
    throw IoError(IoErrorKind::MalformedHeader, path.string() + ": malformed DBC1 header: " + why);
}

void load_into(Module& m, const Checkpoint& ck, const std::filesystem::path& path) {
    auto& params = m.parameters();
    if (params.size() != ck.entries.size()) throw InputError(path.string() + ": parameter count does not match architecture");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = ck.entries[i];
        if (e.name != params[i].name || e.shape != params[i].tensor.shape())
            throw InputError(path.string() + ": parameter '" + e.name + "' does not match architecture");
        std::copy(e.values.begin(), e.values.end(), params[i].tensor.mutable_values().begin());
    }
}

} // namespace

void write_checkpoint(const Generator& g, const std::filesystem::path& path) {
    write_impl(g, "generator", config_json(g.config()), path);
}

void write_checkpoint(const Discriminator& d, const std::filesystem::path& path) {
    write_impl(d, "discriminator", config_json(d.config()), path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrorKind::CannotOpen, path.string() + ": cannot open");
    std::string magic, line;
    if (!std::getline(in, magic) || magic != "DBC1") malformed(path, "bad magic");
    if (!std::getline(in, line)) malformed(path, "missing header line");

    ordered_json h;
    try {
        h = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        malformed(path, e.what());
    }
    Checkpoint ck;
    try {
        if (h.at("version").get<int>() != 1) malformed(path, "unsupported version");
        ck.model = h.at("model").get<std::string>();
        ck.config_json = h.at("config").dump();
        for (const auto& p : h.at("params")) {
            CheckpointEntry e;
            e.name = p.at("name").get<std::string>();
            e.shape = p.at("shape").get<Shape>();
            ck.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        malformed(path, e.what());
    }

    for (auto& e : ck.entries) {
        const std::size_t n = numel(e.shape);
        std::vector<std::uint32_t> raw(n);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 4));
        if (static_cast<std::size_t>(in.gcount()) != n * 4)
            throw IoError(IoErrorKind::SizeMismatch, path.string() + ": payload truncated in parameter " + e.name);
        e.values.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const float f = std::bit_cast<float>(to_little(raw[i]));
            if (!std::isfinite(f)) throw IoError(IoErrorKind::NonFinitePayload, path.string() + ": non-finite value in " + e.name);
            e.values[i] = f;
        }
    }
    if (in.peek() != std::char_traits<char>::eof())
        throw IoError(IoErrorKind::SizeMismatch, path.string() + ": trailing bytes after payload");
    return ck;
}

Generator load_generator(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    if (ck.model != "generator") throw InputError(path.string() + ": checkpoint holds a " + ck.model);
    GeneratorConfig cfg;
    try {
        const auto c = nlohmann::json::parse(ck.config_json);
        cfg.in_channels = c.at("in_channels").get<int>();
        cfg.depth = c.at("depth").get<int>();
        cfg.base_channels = c.at("base_channels").get<int>();
    } catch (const nlohmann::json::exception& e) {
        malformed(path, e.what());
    }
    Generator g(cfg);
    load_into(g, ck, path);
    return g;
}

Discriminator load_discriminator(const std::filesystem::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    if (ck.model != "discriminator") throw InputError(path.string() + ": checkpoint holds a " + ck.model);
    DiscriminatorConfig cfg;
    try {
        const auto c = nlohmann::json::parse(ck.config_json);
        cfg.n_layers = c.at("n_layers").get<int>();
        cfg.base_channels = c.at("base_channels").get<int>();
    } catch (const nlohmann::json::exception& e) {
        malformed(path, e.what());
    }
    Discriminator d(cfg);
    load_into(d, ck, path);
    return d;
}

} // namespace qsm::nn
