#pragma once

// Derivative self-checks: every loss term rebuilt on a single tape without
// the stop-gradients the training step applies, so central differences can
// probe the full analytic gradient through encoders, fusion, heads and the
// discriminator at once.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "m4ser/model.hpp"
#include "m4ser/objectives.hpp"
#include "m4ser/train.hpp"

namespace m4ser {

template <class Real>
struct LossTerms {
  Tensor<Real> l_er, l_aed, l_aec, l_d, l_g, l_lcl, total;

  Tensor<Real> term(std::size_t k) const {
    const std::array<const Tensor<Real>*, 7> all = {&l_er, &l_aed, &l_aec, &l_d,
                                                    &l_g,  &l_lcl, &total};
    return *all[k];
  }

  static const char* name(std::size_t k) {
    constexpr std::array<const char*, 7> names = {"l_er", "l_aed", "l_aec", "l_d",
                                                  "l_g",  "l_lcl", "total"};
    return names[k];
  }

  static constexpr std::size_t count = 7;
};

template <class Real>
LossTerms<Real> attached_loss_terms(Graph<Real>& g, M4serModel<Real>& model, const Batch& batch,
                                    const TrainConfig& cfg) {
  if (cfg.model.modality != Modality::both)
    fail("attached_loss_terms: needs the two-modality model");
  Rng rng(0);
  Runtime<Real> rt{g, rng, false, 0.0};
  auto fwd = model.forward_batch(rt, batch);

  auto d_s = model.disc.score(g, fwd.speech_specific);
  auto d_t = model.disc.score(g, fwd.text_specific);
  auto d_i = model.disc.score(g, fwd.invariant);
  auto gan = gan_losses(g, d_s, d_t, d_i);

  LossTerms<Real> out;
  out.l_er = er_loss(g, fwd.probs, batch.labels);
  out.l_aed = aed_loss(g, fwd.aed_logits, fwd.aed_labels, cfg.aed_reduction);
  out.l_aec = aec_loss(g, fwd.aec_logits, fwd.aec_targets);
  out.l_d = gan.l_d;
  out.l_g = gan.l_g;
  out.l_lcl = lcl_loss(g, fwd.pooled, batch.labels, cfg.weights.tau, cfg.lcl_include_self);
  out.total = total_loss(g, out.l_er, out.l_aed, out.l_aec, out.l_g, out.l_lcl, cfg.weights);
  return out;
}

struct FdReport {
  std::string term;
  double max_rel = 0;
  std::size_t coords = 0;   // 0 when the term was constant on this batch
  double max_excess = 0;    // disagreement beyond measured non-smoothness
};

// Central-difference check of one term's gradient with respect to every
// parameter. coords_per_param limits the probed coordinates of each tensor
// (0 means all of them). Unlike finite_difference_check's dense probes, a
// model-wide sweep hits coordinates central differences cannot measure
// cleanly: near-zero derivatives read graph roundoff amplified by 1/(2 eps)
// (the 1e-5 denominator floor keeps that below reporting scale), and a
// relu or prelu whose pre-activation lies within the probe step reads the
// average of both slopes instead of the analytic side. A straddled kink
// contributes exactly |f+ + f- - 2 f0| / (2 eps) to the central difference,
// so max_excess discounts that second difference; max_rel reports the raw
// disagreement.
template <class Real>
std::vector<FdReport> gradcheck_model(M4serModel<Real>& model, const Batch& batch,
                                      const TrainConfig& cfg, std::size_t coords_per_param = 0,
                                      double eps = 1e-5) {
  const auto params = model.params();
  std::vector<FdReport> reports;

  for (std::size_t k = 0; k < LossTerms<Real>::count; ++k) {
    std::vector<std::vector<Real>> analytic;
    {
      Graph<Real> g;
      auto terms = attached_loss_terms(g, model, batch, cfg);
      if (!terms.term(k).requires_grad()) {
        // a batch without correction tasks or positive pairs leaves the term
        // a constant; there is no gradient to check
        reports.push_back({LossTerms<Real>::name(k), 0.0, 0});
        continue;
      }
      g.backward(terms.term(k));
      for (const auto& [name, p] : params.items) analytic.push_back(p.grad_or_zeros());
      g.zero_grads();
    }

    auto value_now = [&]() {
      Graph<Real> g(false);
      return static_cast<double>(attached_loss_terms(g, model, batch, cfg).term(k).item());
    };
    const double f0 = value_now();

    FdReport rep;
    rep.term = LossTerms<Real>::name(k);
    if (!std::isfinite(f0)) fail("gradcheck_model: non-finite value of " + rep.term);
    for (std::size_t pi = 0; pi < params.items.size(); ++pi) {
      auto handle = params.items[pi].second;
      auto& value = handle.value_mut();
      const std::size_t n = value.size();
      const std::size_t stride =
          coords_per_param == 0 ? 1 : std::max<std::size_t>(1, n / coords_per_param);
      for (std::size_t i = 0; i < n; i += stride) {
        const Real keep = value[i];
        value[i] = keep + static_cast<Real>(eps);
        const double fp = value_now();
        value[i] = keep - static_cast<Real>(eps);
        const double fm = value_now();
        value[i] = keep;
        const double central = (fp - fm) / (2.0 * eps);
        const double an = static_cast<double>(analytic[pi][i]);
        if (!std::isfinite(central) || !std::isfinite(an))
          fail("gradcheck_model: non-finite derivative of " + rep.term + " at " +
               params.items[pi].first + "[" + std::to_string(i) + "]");
        const double denom = std::max(1e-5, std::abs(an) + std::abs(central));
        rep.max_rel = std::max(rep.max_rel, std::abs(an - central) / denom);
        const double kink = std::abs(fp + fm - 2.0 * f0) / (2.0 * eps);
        rep.max_excess = std::max(rep.max_excess, (std::abs(an - central) - kink) / denom);
        ++rep.coords;
      }
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace m4ser
