#include "qsm/nn/network.hpp"

#include <algorithm>

#include "qsm/errors.hpp"

namespace qsm::nn {

std::size_t Module::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
}

void Module::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

ParameterSnapshot Module::snapshot() const {
    ParameterSnapshot s;
    s.reserve(params_.size());
    for (const auto& p : params_) s.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    return s;
}

void Module::restore(const ParameterSnapshot& s) {
    if (s.size() != params_.size()) throw InputError("snapshot does not match module layout");
    for (std::size_t i = 0; i < s.size(); ++i) {
        auto dst = params_[i].tensor.mutable_values();
        if (s[i].size() != dst.size()) throw InputError("snapshot entry size mismatch for " + params_[i].name);
        std::copy(s[i].begin(), s[i].end(), dst.begin());
    }
}

void Module::load_values_from(const Module& other) { restore(other.snapshot()); }

Tensor& Module::add_parameter(std::string name, Shape shape, std::vector<double> values) {
    params_.push_back({std::move(name), Tensor::parameter(std::move(shape), std::move(values))});
    return params_.back().tensor;
}

std::vector<double> truncated_normal(std::size_t n, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> out(n);
    for (auto& v : out) {
        double z;
        do {
            z = dist(rng);
        } while (std::abs(z) > 2.0);
        v = z * std;
    }
    return out;
}

// ---------------------------------------------------------------------------

Generator::Block Generator::make_block(const std::string& name, int cin, int cout, int stride, std::mt19937_64& rng) {
    const auto ci = static_cast<std::size_t>(cin), co = static_cast<std::size_t>(cout);
    Block b;
    b.conv.weight = add_parameter(name + ".conv.weight", {co, ci, 3, 3, 3}, truncated_normal(co * ci * 27, cfg_.init_std, rng));
    b.conv.bias = add_parameter(name + ".conv.bias", {co}, std::vector<double>(co, 0.0));
    b.conv.stride = stride;
    b.conv.pad = 1;
    b.norm.gamma = add_parameter(name + ".norm.gamma", {co}, std::vector<double>(co, 1.0));
    b.norm.beta = add_parameter(name + ".norm.beta", {co}, std::vector<double>(co, 0.0));
    return b;
}

Generator::Generator(const GeneratorConfig& cfg) : cfg_(cfg) {
    if (cfg.depth < 1 || cfg.depth > 8) throw InputError("generator depth must be in [1, 8]");
    if (cfg.base_channels < 1 || cfg.in_channels < 1) throw InputError("generator channel counts must be >= 1");
    std::mt19937_64 rng(cfg.seed);

    auto width = [&](int level) { return cfg_.base_channels << level; };
    for (int l = 0; l < cfg.depth; ++l) {
        const std::string p = "enc" + std::to_string(l);
        std::vector<Block> level;
        level.push_back(make_block(p + ".0", l == 0 ? cfg.in_channels : width(l - 1), width(l), l == 0 ? 1 : 2, rng));
        level.push_back(make_block(p + ".1", width(l), width(l), 1, rng));
        encoder_.push_back(std::move(level));
    }
    for (int l = cfg.depth - 2; l >= 0; --l) {
        const std::string p = "dec" + std::to_string(l);
        up_.push_back(make_block(p + ".up", width(l + 1), width(l), 1, rng));
        std::vector<Block> level;
        level.push_back(make_block(p + ".0", 2 * width(l), width(l), 1, rng));
        level.push_back(make_block(p + ".1", width(l), width(l), 1, rng));
        decoder_.push_back(std::move(level));
    }
    const auto c0 = static_cast<std::size_t>(width(0));
    head_.weight = add_parameter("head.weight", {1, c0, 1, 1, 1},
                                 cfg.zero_init_output ? std::vector<double>(c0, 0.0)
                                                      : truncated_normal(c0, cfg.init_std, rng));
    head_.bias = add_parameter("head.bias", {1}, {0.0});
}

Tensor Generator::apply(Tape& tape, const Block& b, const Tensor& x) const {
    return leaky_relu(tape, b.norm(tape, b.conv(tape, x)));
}

Tensor Generator::forward(Tape& tape, const Tensor& input) const {
    if (input.shape().size() != 4 || input.channels() != static_cast<std::size_t>(cfg_.in_channels))
        throw InputError("generator expects {" + std::to_string(cfg_.in_channels) + ",X,Y,Z} input, got " +
                         shape_string(input.shape()));
    const std::size_t m = required_multiple();
    for (int a = 1; a <= 3; ++a) {
        const std::size_t n = input.shape()[a];
        if (n % m != 0) {
            const std::size_t pad = (m - n % m) % m;
            throw InputError("generator input extent " + std::to_string(n) + " is not divisible by " +
                             std::to_string(m) + "; pad by " + std::to_string(pad) + " voxels");
        }
    }

    std::vector<Tensor> skips;
    Tensor h = input;
    for (const auto& level : encoder_) {
        for (const auto& b : level) h = apply(tape, b, h);
        skips.push_back(h);
    }
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
        const std::size_t level = skips.size() - 2 - i;
        h = apply(tape, up_[i], upsample_nearest(tape, h, 2));
        h = concat(tape, {skips[level], h});
        for (const auto& b : decoder_[i]) h = apply(tape, b, h);
    }
    return head_(tape, h);
}

Tensor forward_generator(Tape& tape, const Generator& g, const Tensor& phase, const Tensor& magnitude) {
    return g.forward(tape, concat(tape, {phase, magnitude}));
}

// ---------------------------------------------------------------------------

Discriminator::Discriminator(const DiscriminatorConfig& cfg) : cfg_(cfg) {
    if (cfg.n_layers < 1) throw InputError("discriminator needs at least one layer");
    if (cfg.base_channels < 1) throw InputError("discriminator channel count must be >= 1");
    std::mt19937_64 rng(cfg.seed);

    std::size_t cin = 1;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto cout = static_cast<std::size_t>(cfg.base_channels) << std::min(l, 3);
        const std::string p = "layer" + std::to_string(l);
        Layer layer;
        layer.conv.weight = add_parameter(p + ".conv.weight", {cout, cin, 4, 4, 4}, truncated_normal(cout * cin * 64, cfg.init_std, rng));
        layer.conv.bias = add_parameter(p + ".conv.bias", {cout}, std::vector<double>(cout, 0.0));
        layer.conv.stride = l + 1 < cfg.n_layers ? 2 : 1;
        layer.conv.pad = 1;
        layer.has_norm = l > 0;
        if (layer.has_norm) {
            layer.norm.gamma = add_parameter(p + ".norm.gamma", {cout}, std::vector<double>(cout, 1.0));
            layer.norm.beta = add_parameter(p + ".norm.beta", {cout}, std::vector<double>(cout, 0.0));
        }
        layers_.push_back(std::move(layer));
        cin = cout;
    }
    head_.weight = add_parameter("head.weight", {1, cin, 4, 4, 4}, truncated_normal(cin * 64, cfg.init_std, rng));
    head_.bias = add_parameter("head.bias", {1}, {0.0});
    head_.stride = 1;
    head_.pad = 1;
}

std::size_t Discriminator::output_extent(std::size_t n) const {
    for (const auto& l : layers_) {
        if (n + 2 < 4) return 0;
        n = (n + 2 - 4) / static_cast<std::size_t>(l.conv.stride) + 1;
    }
    return n + 2 < 4 ? 0 : n - 1;
}

Tensor Discriminator::forward(Tape& tape, const Tensor& input) const {
    if (input.shape().size() != 4 || input.channels() != 1)
        throw InputError("discriminator expects {1,X,Y,Z} input, got " + shape_string(input.shape()));
    for (int a = 1; a <= 3; ++a)
        if (output_extent(input.shape()[a]) == 0) throw InputError("discriminator input too small");
    Tensor h = input;
    for (const auto& l : layers_) {
        h = l.conv(tape, h);
        if (l.has_norm) h = l.norm(tape, h);
        h = leaky_relu(tape, h);
    }
    return head_(tape, h);
}

Tensor forward_discriminator(Tape& tape, const Discriminator& d, const Tensor& chi_masked) {
    return d.forward(tape, chi_masked);
}

} // namespace qsm::nn
