#include "qsm/losses.hpp"

#include <cmath>

namespace qsm {

using nn::Tape;
using nn::Tensor;

void LossWeights::validate() const {
    for (double v : {gamma, eta, rho, adversarial})
        if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("loss weights must be finite and non-negative");
}

ChiCycle run_chi_cycle(Tape& tape, const nn::Generator& g, const ChiSample& s) {
    if (!s.kernel) throw InputError("chi sample has no dipole kernel");
    const Tensor phase = nn::dipole_forward(tape, s.chi, *s.kernel);
    return {s.chi, nn::forward_generator(tape, g, phase, s.magnitude), s.mask};
}

FieldCycle run_field_cycle(Tape& tape, const nn::Generator& g, const FieldSample& s) {
    if (!s.kernel) throw InputError("field sample has no dipole kernel");
    const Tensor recon = nn::forward_generator(tape, g, s.field, s.magnitude);
    return {s.field, recon, nn::dipole_forward(tape, recon, *s.kernel), s.mask};
}

Tensor norm_of(Tape& tape, const Tensor& x, NormKind norm, Reduction reduction) {
    if (reduction == Reduction::Mean) return norm == NormKind::L1 ? nn::mean_abs(tape, x) : nn::mean_square(tape, x);
    return norm == NormKind::L1 ? nn::sum_abs(tape, x) : nn::sum(tape, nn::mul(tape, x, x));
}

Tensor distance(Tape& tape, const Tensor& a, const Tensor& b, NormKind norm, Reduction reduction) {
    return norm_of(tape, nn::sub(tape, a, b), norm, reduction);
}

Tensor masked(Tape& tape, const Tensor& x, const Tensor& mask) { return nn::mul(tape, x, mask); }

namespace {

Tensor maybe_masked(Tape& tape, const Tensor& x, const Tensor& mask, const LossOptions& opt) {
    return opt.mask_losses ? masked(tape, x, mask) : x;
}

// Mean over a list of scalar tensors.
Tensor batch_mean(Tape& tape, const std::vector<Tensor>& terms) {
    if (terms.empty()) throw InputError("empty batch");
    Tensor acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = nn::add(tape, acc, terms[i]);
    return nn::scale(tape, acc, 1.0 / static_cast<double>(terms.size()));
}

Tensor grad_distance(Tape& tape, const Tensor& a, const Tensor& b, const LossOptions& opt) {
    Tensor acc;
    for (int axis = 0; axis < 3; ++axis) {
        const Tensor t =
            distance(tape, nn::spatial_diff(tape, a, axis), nn::spatial_diff(tape, b, axis), opt.norm, opt.reduction);
        acc = axis == 0 ? t : nn::add(tape, acc, t);
    }
    return acc;
}

Tensor tv_of(Tape& tape, const Tensor& x, const LossOptions& opt) {
    Tensor acc;
    for (int axis = 0; axis < 3; ++axis) {
        const Tensor t = norm_of(tape, nn::spatial_diff(tape, x, axis), opt.norm, opt.reduction);
        acc = axis == 0 ? t : nn::add(tape, acc, t);
    }
    return acc;
}

} // namespace

Tensor cycle_loss(Tape& tape, std::span<const ChiCycle> chis, std::span<const FieldCycle> fields,
                  const LossOptions& opt) {
    std::vector<Tensor> chi_terms, field_terms;
    for (const auto& c : chis)
        chi_terms.push_back(distance(tape, maybe_masked(tape, c.chi, c.mask, opt), maybe_masked(tape, c.cycled, c.mask, opt), opt.norm, opt.reduction));
    for (const auto& f : fields)
        field_terms.push_back(distance(tape, maybe_masked(tape, f.field, f.mask, opt), maybe_masked(tape, f.cycled, f.mask, opt), opt.norm, opt.reduction));
    return nn::add(tape, batch_mean(tape, chi_terms), batch_mean(tape, field_terms));
}

Tensor grad_diff_loss(Tape& tape, std::span<const ChiCycle> chis, std::span<const FieldCycle> fields,
                      const LossOptions& opt) {
    std::vector<Tensor> chi_terms, field_terms;
    for (const auto& c : chis)
        chi_terms.push_back(grad_distance(tape, maybe_masked(tape, c.chi, c.mask, opt), maybe_masked(tape, c.cycled, c.mask, opt), opt));
    for (const auto& f : fields)
        field_terms.push_back(grad_distance(tape, maybe_masked(tape, f.field, f.mask, opt), maybe_masked(tape, f.cycled, f.mask, opt), opt));
    return nn::add(tape, batch_mean(tape, chi_terms), batch_mean(tape, field_terms));
}

Tensor tv_loss(Tape& tape, std::span<const FieldCycle> fields, const LossOptions& opt) {
    std::vector<Tensor> terms;
    for (const auto& f : fields) terms.push_back(tv_of(tape, maybe_masked(tape, f.recon, f.mask, opt), opt));
    return batch_mean(tape, terms);
}

Tensor tv_loss(Tape& tape, std::span<const Tensor> outputs, const LossOptions& opt) {
    std::vector<Tensor> terms;
    for (const auto& o : outputs) terms.push_back(tv_of(tape, o, opt));
    return batch_mean(tape, terms);
}

Tensor lsgan_generator_loss(Tape& tape, const nn::Discriminator& d, std::span<const Tensor> fakes) {
    std::vector<Tensor> terms;
    for (const auto& f : fakes) terms.push_back(nn::mean_square(tape, nn::add_scalar(tape, d.forward(tape, f), -1.0)));
    return batch_mean(tape, terms);
}

Tensor lsgan_discriminator_loss(Tape& tape, const nn::Discriminator& d, std::span<const Tensor> reals,
                                std::span<const Tensor> fakes) {
    std::vector<Tensor> real_terms, fake_terms;
    for (const auto& r : reals) real_terms.push_back(nn::mean_square(tape, nn::add_scalar(tape, d.forward(tape, r), -1.0)));
    for (const auto& f : fakes) fake_terms.push_back(nn::mean_square(tape, d.forward(tape, nn::detach(f))));
    return nn::scale(tape, nn::add(tape, batch_mean(tape, real_terms), batch_mean(tape, fake_terms)), 0.5);
}

LsganLosses lsgan_losses(Tape& tape, const nn::Discriminator& d, std::span<const Tensor> reals,
                         std::span<const Tensor> fakes) {
    return {lsgan_discriminator_loss(tape, d, reals, fakes), lsgan_generator_loss(tape, d, fakes)};
}

GeneratorObjective total_generator_loss(Tape& tape, const nn::Generator& g, const nn::Discriminator& d,
                                        std::span<const ChiSample> chis, std::span<const FieldSample> fields,
                                        const LossWeights& w, const LossOptions& opt) {
    w.validate();
    std::vector<ChiCycle> cc;
    std::vector<FieldCycle> fc;
    for (const auto& s : chis) cc.push_back(run_chi_cycle(tape, g, s));
    for (const auto& s : fields) fc.push_back(run_field_cycle(tape, g, s));

    GeneratorObjective obj;
    for (const auto& f : fc) obj.fakes.push_back(masked(tape, f.recon, f.mask));

    const Tensor cycle = cycle_loss(tape, cc, fc, opt);
    const Tensor gan_g = lsgan_generator_loss(tape, d, obj.fakes);
    const Tensor grad = grad_diff_loss(tape, cc, fc, opt);
    const Tensor tv = tv_loss(tape, fc, opt);

    obj.total = nn::add(tape,
                        nn::add(tape, nn::scale(tape, cycle, w.gamma), nn::scale(tape, gan_g, w.adversarial)),
                        nn::add(tape, nn::scale(tape, grad, w.eta), nn::scale(tape, tv, w.rho)));
    obj.report.cycle = cycle.item();
    obj.report.gan_g = gan_g.item();
    obj.report.grad = grad.item();
    obj.report.tv = tv.item();
    obj.report.total = obj.total.item();
    return obj;
}

DipTerms dip_loss(Tape& tape, const Tensor& chi, const Tensor& field, const Tensor& weight, const DipoleKernel& kernel,
                  double lambda) {
    if (!(lambda >= 0.0)) throw InputError("dip_loss: lambda must be >= 0");
    const Tensor phase = nn::dipole_forward(tape, chi, kernel);
    const Tensor data = nn::sum(tape, nn::mul(tape, weight, nn::phasor_distance(tape, phase, field)));
    Tensor tv;
    for (int axis = 0; axis < 3; ++axis) {
        const Tensor t = nn::sum_abs(tape, nn::spatial_diff(tape, chi, axis));
        tv = axis == 0 ? t : nn::add(tape, tv, t);
    }
    DipTerms out;
    out.total = nn::add(tape, data, nn::scale(tape, tv, lambda));
    out.data = data.item();
    out.tv = tv.item();
    return out;
}

Tensor to_tensor(const RealVolume& v) {
    const auto& d = v.dims();
    return Tensor::constant({1, d[0], d[1], d[2]}, std::vector<double>(v.values().begin(), v.values().end()));
}

RealVolume to_volume(const Tensor& t, const VolumeMeta& meta) {
    if (t.size() != meta.size()) throw InputError("to_volume: tensor size does not match grid");
    return RealVolume(meta, std::vector<double>(t.values().begin(), t.values().end()));
}

} // namespace qsm
