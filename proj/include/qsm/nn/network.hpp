#pragma once

// 3D U-Net generator and patchGAN discriminator built on the autodiff engine.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qsm/nn/ops.hpp"
#include "qsm/nn/tensor.hpp"

namespace qsm::nn {

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

using ParameterSnapshot = std::vector<std::vector<double>>;

// Owns named parameter leaves. Not copyable (layers hold handles into the parameter list);
// use snapshot()/restore() or load_values_from() to duplicate state.
class Module {
public:
    Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;
    Module(Module&&) noexcept = default;
    Module& operator=(Module&&) noexcept = default;
    virtual ~Module() = default;

    std::vector<NamedParameter>& parameters() { return params_; }
    const std::vector<NamedParameter>& parameters() const { return params_; }
    std::size_t parameter_count() const;
    void zero_grad();

    ParameterSnapshot snapshot() const;
    void restore(const ParameterSnapshot& s);
    // Copies parameter values from a module of identical layout.
    void load_values_from(const Module& other);

protected:
    Tensor& add_parameter(std::string name, Shape shape, std::vector<double> values);

private:
    std::vector<NamedParameter> params_;
};

// Weights ~ normal(0, std) truncated at two standard deviations.
std::vector<double> truncated_normal(std::size_t n, double std, std::mt19937_64& rng);

struct Conv3d {
    Tensor weight; // {Cout, Cin, k, k, k}
    Tensor bias;   // {Cout}
    int stride = 1;
    int pad = 0;
    Tensor operator()(Tape& tape, const Tensor& x) const { return conv3d(tape, x, weight, bias, stride, pad); }
};

struct InstanceNorm {
    Tensor gamma;
    Tensor beta;
    Tensor operator()(Tape& tape, const Tensor& x) const { return instance_norm(tape, x, gamma, beta); }
};

struct GeneratorConfig {
    int in_channels = 2;   // phase, magnitude
    int depth = 3;         // resolution levels
    int base_channels = 16;
    double init_std = 0.02;
    bool zero_init_output = false;
    std::uint64_t seed = 0;
};

// Encoder: per level two 3x3x3 conv + instance norm + leaky ReLU blocks, the first of each
// lower level with stride 2. Decoder: nearest-neighbour upsampling, conv block, skip
// concatenation, two conv blocks. Final 1x1x1 conv with no activation.
class Generator : public Module {
public:
    explicit Generator(const GeneratorConfig& cfg = {});

    const GeneratorConfig& config() const { return cfg_; }
    // Spatial dims must be divisible by this.
    std::size_t required_multiple() const { return std::size_t{1} << (cfg_.depth - 1); }

    // inputs: {in_channels, X, Y, Z}; output {1, X, Y, Z}.
    Tensor forward(Tape& tape, const Tensor& input) const;

private:
    struct Block {
        Conv3d conv;
        InstanceNorm norm;
    };
    Block make_block(const std::string& name, int cin, int cout, int stride, std::mt19937_64& rng);
    Tensor apply(Tape& tape, const Block& b, const Tensor& x) const;

    GeneratorConfig cfg_;
    std::vector<std::vector<Block>> encoder_; // per level
    std::vector<Block> up_;                   // per decoder level, after upsampling
    std::vector<std::vector<Block>> decoder_; // per decoder level, after concatenation
    Conv3d head_;
};

// Two-channel generator input from phase and magnitude tensors ({1,X,Y,Z} each).
Tensor forward_generator(Tape& tape, const Generator& g, const Tensor& phase, const Tensor& magnitude);

struct DiscriminatorConfig {
    int n_layers = 3;
    int base_channels = 16;
    double init_std = 0.02;
    std::uint64_t seed = 0;
};

// n_layers 4x4x4 conv + leaky ReLU blocks (instance norm on all but the first); the first
// n_layers - 1 use stride 2, the last stride 1; then a final 4x4x4 stride-1 conv to one
// channel with no normalization. All convs pad by 1.
class Discriminator : public Module {
public:
    explicit Discriminator(const DiscriminatorConfig& cfg = {});

    const DiscriminatorConfig& config() const { return cfg_; }
    // Patch-map extent produced for an input extent n.
    std::size_t output_extent(std::size_t n) const;

    // input {1, X, Y, Z}; output {1, X', Y', Z'}.
    Tensor forward(Tape& tape, const Tensor& input) const;

private:
    struct Layer {
        Conv3d conv;
        bool has_norm = false;
        InstanceNorm norm;
    };
    DiscriminatorConfig cfg_;
    std::vector<Layer> layers_;
    Conv3d head_;
};

Tensor forward_discriminator(Tape& tape, const Discriminator& d, const Tensor& chi_masked);

} // namespace qsm::nn
