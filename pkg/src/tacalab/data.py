"""Synthetic paired prompt/layout data for the toy model.

Each "concept" is a 2-component Gaussian mixture in the plane: component
centers sit on a circle (radius CONCEPT_RADIUS, one angle per concept) with
a tangential offset, so concepts are well separated relative to their
within-concept spread. A prompt is a short sequence of codebook indices
whose first slot carries the concept; the remaining slots are shared filler
tokens, which makes visual-to-text attention on the first token the only
route to the concept. Index layout: [0, n_concepts) concepts, n_concepts is
the null (unconditional) token, then n_txt - 1 fillers.

Because the data is an exact Gaussian mixture, the Bayes-optimal velocity
field has a closed form (posterior-weighted Gaussian conditioning); it
serves as the oracle generator in the alignment probe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .flow import T_MAX

CONCEPT_RADIUS = 3.0
COMPONENT_OFFSET = 0.5
TOKEN_NOISE_STD = 0.2
D_PATCH = 2


@dataclass(frozen=True)
class ConceptSet:
    """Generator parameters for every concept plus the prompt vocabulary."""

    n_concepts: int
    n_txt: int
    centers: np.ndarray = field(repr=False)  # (n_concepts, 2) mixture means
    offsets: np.ndarray = field(repr=False)  # (n_concepts, 2) +/- component offset
    noise_std: float = TOKEN_NOISE_STD

    @property
    def codebook_size(self) -> int:
        # concepts + null + fillers
        return self.n_concepts + 1 + (self.n_txt - 1)

    @property
    def null_index(self) -> int:
        return self.n_concepts

    def component_centers(self, concept: int) -> np.ndarray:
        """(2, 2): the two mixture component centers of one concept."""
        c = self.centers[concept]
        off = self.offsets[concept]
        return np.stack([c + off, c - off])

    def prompt_indices(self, concept: int) -> np.ndarray:
        """Concept token first, then the shared filler tokens."""
        if not (0 <= concept < self.n_concepts):
            raise DomainError(f"concept {concept} outside [0, {self.n_concepts})")
        fillers = np.arange(self.n_concepts + 1, self.codebook_size)
        return np.concatenate([[concept], fillers])

    def null_prompt(self) -> np.ndarray:
        return np.full(self.n_txt, self.null_index, dtype=int)


def default_concepts(n_concepts: int = 8, n_txt: int = 8) -> ConceptSet:
    """Concepts evenly spaced on a circle with tangential component offsets."""
    if n_concepts < 2:
        raise DomainError(f"need at least two concepts, got {n_concepts}")
    if n_txt < 1:
        raise DomainError(f"need at least one prompt token, got {n_txt}")
    angles = 2.0 * np.pi * np.arange(n_concepts) / n_concepts
    centers = CONCEPT_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    tangents = np.stack([-np.sin(angles), np.cos(angles)], axis=1)
    return ConceptSet(
        n_concepts=n_concepts,
        n_txt=n_txt,
        centers=centers,
        offsets=COMPONENT_OFFSET * tangents,
    )


@dataclass
class SyntheticBatch:
    """One prompt/layout pair: codebook indices and clean visual tokens."""

    concept: int
    prompt: np.ndarray  # (n_txt,) codebook indices
    x0: np.ndarray  # (n_vis, 2) clean visual tokens


def sample_tokens(
    concepts: ConceptSet, concept: int, n_vis: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw n_vis tokens from the concept's 2-component mixture."""
    comps = concepts.component_centers(concept)
    which = rng.integers(0, 2, size=n_vis)
    return comps[which] + concepts.noise_std * rng.standard_normal((n_vis, D_PATCH))


def synth_dataset(
    n_pairs: int,
    rng: np.random.Generator,
    concepts: ConceptSet,
    n_vis: int = 64,
) -> list[SyntheticBatch]:
    """Deterministic-per-seed list of prompt/layout pairs, concepts cycling."""
    if n_pairs < 1:
        raise DomainError(f"n_pairs must be >= 1, got {n_pairs}")
    pairs = []
    for i in range(n_pairs):
        concept = i % concepts.n_concepts
        pairs.append(
            SyntheticBatch(
                concept=concept,
                prompt=concepts.prompt_indices(concept),
                x0=sample_tokens(concepts, concept, n_vis, rng),
            )
        )
    return pairs


def oracle_velocity(
    x_t: np.ndarray, t: float, concept: int, concepts: ConceptSet
) -> np.ndarray:
    """Bayes-optimal velocity E[noise - x0 | x_t] for the known mixture.

    With sigma = t/1000 and token x0 ~ mixture of N(mu_c, s^2 I),
    x_t | c ~ N((1-sigma) mu_c, ((1-sigma) s)^2 + sigma^2). Posterior
    responsibilities weight the per-component posterior means E[x0 | x_t, c],
    and E[v | x_t] = (x_t - E[x0 | x_t]) / sigma.
    """
    sigma = t / T_MAX
    if sigma == 0.0:
        # Path endpoint: x_t == x0 and the velocity expectation is just E[noise] - x0.
        return -x_t
    comps = concepts.component_centers(concept)  # (2, 2)
    s2 = concepts.noise_std**2
    a = 1.0 - sigma
    var_t = (a**2) * s2 + sigma**2  # marginal variance of x_t per dim

    # log posterior over components (equal priors)
    diffs = x_t[:, None, :] - a * comps[None, :, :]  # (n_vis, 2 comps, 2)
    log_resp = -0.5 * (diffs**2).sum(-1) / var_t
    log_resp -= log_resp.max(axis=1, keepdims=True)
    resp = np.exp(log_resp)
    resp /= resp.sum(axis=1, keepdims=True)

    # per-component posterior mean of x0, then mixture average
    gain = a * s2 / var_t
    x0_given_c = comps[None, :, :] + gain * diffs  # (n_vis, 2, 2)
    x0_mean = (resp[:, :, None] * x0_given_c).sum(axis=1)
    return (x_t - x0_mean) / sigma
