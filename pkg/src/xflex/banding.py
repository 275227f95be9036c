"""Green/amber/red risk banding from a predictive count distribution."""

from __future__ import annotations

from dataclasses import dataclass

from .exceptions import ValidationError

GREEN, AMBER, RED = "G", "A", "R"
_SEVERITY = {GREEN: 0, AMBER: 1, RED: 2}


@dataclass(frozen=True)
class BandSpec:
    """Band thresholds: counts <= tau_ag are green, counts > tau_ra are red."""

    tau_ag: float
    tau_ra: float
    district: str = ""
    resolution_hours: int = 24

    def __post_init__(self):
        if not 0 <= self.tau_ag < self.tau_ra:
            raise ValidationError(
                f"need 0 <= tau_ag < tau_ra, got tau_ag={self.tau_ag}, tau_ra={self.tau_ra}"
            )
        if self.resolution_hours <= 0:
            raise ValidationError("resolution_hours must be positive")


@dataclass(frozen=True)
class BandProbabilities:
    p_green: float
    p_amber: float
    p_red: float

    def __post_init__(self):
        for name, p in (("p_green", self.p_green), ("p_amber", self.p_amber), ("p_red", self.p_red)):
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")
        total = self.p_green + self.p_amber + self.p_red
        if abs(total - 1.0) > 1e-8:
            raise ValidationError(f"band probabilities must sum to 1, got {total}")


def band_probs(dist, spec: BandSpec) -> BandProbabilities:
    """Band masses from the predictive cdf at the two thresholds."""
    g = float(dist.cdf(spec.tau_ag))
    ra = float(dist.cdf(spec.tau_ra))
    return BandProbabilities(p_green=g, p_amber=max(ra - g, 0.0), p_red=max(1.0 - ra, 0.0))


def assign_band(probs: BandProbabilities) -> str:
    """Green if p_green > 0.8; else red if p_red > 0.2; else amber if
    p_amber > p_red; else the modal band, ties broken toward severity."""
    if probs.p_green > 0.8:
        return GREEN
    if probs.p_red > 0.2:
        return RED
    if probs.p_amber > probs.p_red:
        return AMBER
    triples = [(probs.p_green, GREEN), (probs.p_amber, AMBER), (probs.p_red, RED)]
    best = max(triples, key=lambda t: (t[0], _SEVERITY[t[1]]))
    return best[1]
