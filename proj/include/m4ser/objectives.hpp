#pragma once

// Loss terms: emotion cross-entropy, the adversarial pair over discriminator
// scores, label-based contrastive loss over pooled representations, and the
// weighted total.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "m4ser/tensor.hpp"

namespace m4ser {

struct LossWeights {
  double alpha = 0.1;   // auxiliary block weight
  double beta = 3.0;    // detection inside the auxiliary block
  double gamma = 0.01;  // adversarial term
  double lambda = 0.1;  // contrastive term
  double tau = 0.07;    // contrastive temperature

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0 || lambda < 0)
      fail("LossWeights: alpha, beta, gamma, lambda must be non-negative");
    if (tau <= 0) fail("LossWeights: tau must be positive");
  }
};

// Scalar views of one step's losses, for history and logging. The training
// step fills l_d from its discriminator phase, l_g from its main phase,
// l_gan with their sum, and total with the main-phase objective.
struct LossBundle {
  double l_er = 0, l_aed = 0, l_aec = 0;
  double l_d = 0, l_g = 0, l_gan = 0;
  double l_lcl = 0;
  double total = 0;
};

// Mean over the batch of -log probs[label]; probs rows must lie on the
// simplex already (the log is floor-clamped, never fed a negative).
template <class Real>
Tensor<Real> er_loss(Graph<Real>& g, const Tensor<Real>& probs, const std::vector<std::int32_t>& labels) {
  if (probs.rank() != 2) fail("er_loss: probs must be rank 2, got " + shape_str(probs.shape()));
  const std::size_t b = probs.shape()[0], e = probs.shape()[1];
  if (labels.size() != b)
    fail("er_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) + " rows");
  std::vector<Real> hot(b * e, Real(0));
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= e)
      fail("er_loss: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(e) + ")");
    hot[i * e + static_cast<std::size_t>(labels[i])] = Real(1);
  }
  auto picked = g.matmul(g.mul(probs, Tensor<Real>::leaf({b, e}, std::move(hot))),
                         Tensor<Real>::full({e, std::size_t(1)}, Real(1)));
  auto mean_log = g.mean_axis0(g.log(g.reshape(picked, {b})));
  return g.scalar_mul(mean_log, Real(-1));
}

template <class Real>
struct GanLosses {
  Tensor<Real> l_d, l_g, l_gan;
};

namespace detail {

template <class Real>
Tensor<Real> mean_scores(Graph<Real>& g, const Tensor<Real>& scores) {
  if (scores.rank() != 2 || scores.shape()[1] != 1)
    fail("gan_losses: scores must be [m x 1], got " + shape_str(scores.shape()));
  return g.mean_axis0(g.reshape(scores, {scores.shape()[0]}));
}

template <class Real>
Tensor<Real> one_minus(Graph<Real>& g, const Tensor<Real>& x) {
  return g.sub(Tensor<Real>::full(x.shape(), Real(1)), x);
}

}  // namespace detail

// l_g = E[-log d_inv - log(1 - d_inv)], minimized when d_inv sits at 1/2.
// The generator-only view exists because the main training phase re-scores
// the invariant frames through the freshly updated discriminator.
template <class Real>
Tensor<Real> generator_loss(Graph<Real>& g, const Tensor<Real>& d_inv) {
  auto inner = g.add(detail::mean_scores(g, g.log(d_inv)),
                     detail::mean_scores(g, g.log(detail::one_minus(g, d_inv))));
  return g.scalar_mul(inner, Real(-1));
}

// l_d = E[log d_speech] + E[log(1 - d_text)], maximized by the discriminator.
// Expectations run over every frame in the given score columns, so callers
// concatenate batches before the call.
template <class Real>
GanLosses<Real> gan_losses(Graph<Real>& g, const Tensor<Real>& d_speech, const Tensor<Real>& d_text,
                           const Tensor<Real>& d_inv) {
  GanLosses<Real> out;
  out.l_d = g.add(detail::mean_scores(g, g.log(d_speech)),
                  detail::mean_scores(g, g.log(detail::one_minus(g, d_text))));
  out.l_g = generator_loss(g, d_inv);
  out.l_gan = g.add(out.l_d, out.l_g);
  return out;
}

// Supervised contrastive loss over pooled utterance vectors with cosine
// similarity. Each anchor with at least one same-label partner contributes
// the mean over its positives of -log softmax(sim / tau); the result averages
// over contributing anchors and is zero when none contribute. The denominator
// is max-shifted, which changes nothing analytically but keeps the log's
// floor clamp out of reach.
template <class Real>
Tensor<Real> lcl_loss(Graph<Real>& g, const std::vector<Tensor<Real>>& pooled,
                      const std::vector<std::int32_t>& labels, double tau, bool include_self = false) {
  if (pooled.size() != labels.size())
    fail("lcl_loss: " + std::to_string(pooled.size()) + " vectors for " + std::to_string(labels.size()) +
         " labels");
  if (tau <= 0) fail("lcl_loss: tau must be positive");
  const std::size_t b = pooled.size();
  if (b < 2) fail("lcl_loss: batch must hold at least two samples");
  const Real inv_tau = Real(1.0 / tau);

  Tensor<Real> acc;
  std::size_t contributing = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::size_t> compare;
    bool any_positive = false;
    for (std::size_t a = 0; a < b; ++a) {
      if (a == i && !include_self) continue;
      compare.push_back(a);
      if (a != i && labels[a] == labels[i]) any_positive = true;
    }
    if (!any_positive) continue;
    ++contributing;

    std::vector<Tensor<Real>> scaled(b);
    Real top = Real(-1) * inv_tau;
    for (std::size_t a : compare) {
      scaled[a] = g.scalar_mul(g.cosine(pooled[i], pooled[a]), inv_tau);
      top = std::max(top, scaled[a].item());
    }
    auto shift = Tensor<Real>::scalar(top);
    Tensor<Real> denom;
    for (std::size_t a : compare) {
      auto term = g.exp(g.sub(scaled[a], shift));
      denom = denom.defined() ? g.add(denom, term) : term;
    }
    auto log_denom = g.log(denom);

    Tensor<Real> anchor;
    std::size_t positives = 0;
    for (std::size_t p = 0; p < b; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      ++positives;
      auto term = g.sub(g.sub(scaled[p], shift), log_denom);
      anchor = anchor.defined() ? g.add(anchor, term) : term;
    }
    auto weighted = g.scalar_mul(anchor, Real(1) / static_cast<Real>(positives));
    acc = acc.defined() ? g.add(acc, weighted) : weighted;
  }
  if (contributing == 0) return Tensor<Real>::zeros({});
  return g.scalar_mul(acc, Real(-1) / static_cast<Real>(contributing));
}

// total = l_er + alpha * (beta * l_aed + l_aec) + gamma * l_adv + lambda *
// l_lcl, where l_adv is l_gan for reporting and l_g inside the generator
// step. Every part must be finite.
template <class Real>
Tensor<Real> total_loss(Graph<Real>& g, const Tensor<Real>& l_er, const Tensor<Real>& l_aed,
                        const Tensor<Real>& l_aec, const Tensor<Real>& l_adv, const Tensor<Real>& l_lcl,
                        const LossWeights& w) {
  w.validate();
  const char* names[] = {"l_er", "l_aed", "l_aec", "l_adv", "l_lcl"};
  const Tensor<Real>* parts[] = {&l_er, &l_aed, &l_aec, &l_adv, &l_lcl};
  for (int i = 0; i < 5; ++i) {
    if (!parts[i]->defined() || parts[i]->size() != 1)
      fail(std::string("total_loss: ") + names[i] + " must be a defined scalar");
    if (!std::isfinite(static_cast<double>(parts[i]->item())))
      fail(std::string("total_loss: non-finite ") + names[i]);
  }
  auto aux = g.add(g.scalar_mul(l_aed, Real(w.beta)), l_aec);
  auto sum = g.add(l_er, g.scalar_mul(aux, Real(w.alpha)));
  sum = g.add(sum, g.scalar_mul(l_adv, Real(w.gamma)));
  return g.add(sum, g.scalar_mul(l_lcl, Real(w.lambda)));
}

}  // namespace m4ser
