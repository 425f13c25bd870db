"""
BiFAMP Model Factory
Builds runtime priors and channels from a ProblemSpec
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from bifamp.schemas.problem import DICTIONARY_LIKE, Application, ProblemSpec
from bifamp.services.channels import (
    Awgn,
    Channel,
    MaskedAwgn,
    RowwiseAwgn,
    TwoGaussianMixture,
)
from bifamp.services.priors import (
    Calibration,
    GaussBernoulli,
    GaussianFactor,
    NonNegGaussBernoulli,
    Prior,
)


@dataclass(frozen=True)
class Model:
    """Priors and channel used for inference"""
    prior_x: Prior
    prior_f: Prior
    channel: Channel


def signal_prior(spec: ProblemSpec) -> Prior:
    cls = NonNegGaussBernoulli if spec.nonneg else GaussBernoulli
    return cls(rho=spec.rho, mean=spec.x_mean, var=spec.x_var)


def factor_prior(spec: ProblemSpec, w_prime: Optional[np.ndarray] = None) -> Prior:
    """
    Gaussian factor, or the calibration prior when F is partly known.

    Without `w_prime` the calibration prior is only good for state evolution,
    whose closed forms do not look at the estimate.
    """
    if spec.application in (Application.CALIBRATION, Application.CS):
        estimate = np.zeros(()) if w_prime is None else w_prime
        return Calibration(w_prime=estimate, eta=spec.eta_value)
    return GaussianFactor(var=1.0)


def output_channel(spec: ProblemSpec, mask=None, psi_rows=None) -> Channel:
    if spec.application in DICTIONARY_LIKE:
        return Awgn(delta=spec.delta)
    if spec.application is Application.COMPLETION:
        return MaskedAwgn(delta=spec.delta, mask=mask, fraction=spec.eps)
    if spec.application is Application.ROBUST_PCA:
        return TwoGaussianMixture(eps=spec.eps, delta_s=spec.delta_s, delta_l=spec.delta_l)
    if psi_rows is not None:
        return RowwiseAwgn.from_rows(psi_rows)
    return RowwiseAwgn(psi=np.asarray(spec.psi), weights=np.asarray(spec.weights))


def build_model(spec: ProblemSpec, instance=None) -> Model:
    """Model for state evolution, or for AMP on `instance` when given."""
    if instance is None:
        return Model(signal_prior(spec), factor_prior(spec), output_channel(spec))
    return Model(
        signal_prior(spec),
        factor_prior(spec, instance.w_prime),
        output_channel(spec, mask=instance.mask, psi_rows=instance.psi),
    )
