"""Brute-force sandbox for mixture-risk theory on finite instances.

Populations are distributions over a tiny feature space (at most 16 points,
each a vector of at most 4 binary channels) crossed with binary labels, and
hypothesis classes are explicit function enumerations, so every quantity of
interest (risks, the hypothesis-pair discrepancy between two distributions,
the irreducible joint risk, good-set intersections, projection effects of
channel restriction) can be computed exactly and the inequalities checked on
every hypothesis with zero tolerance for counterexamples.

Conventions: ``disc`` is half the symmetric-difference-hypothesis divergence,
i.e. the maximum over hypothesis pairs of the absolute difference in
disagreement mass; the irreducible term is the smallest achievable sum of
source and target risks within the class.  The channel-restriction bound is
checked with the irreducible term of the projected distributions included —
without it the three-term form is falsifiable, e.g. by two populations with
identical marginals and flipped labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_POINTS = 16
MAX_CHANNELS = 4
MAX_HYPOTHESES = 4096
_PROB_TOL = 1e-12
_BOUND_TOL = 1e-9


class ClassTooLarge(ValueError):
    """Hypothesis class exceeds the exhaustive-enumeration cap."""


class NotASubsetPair(ValueError):
    """Contraction check requires the first population set inside the second."""


@dataclass(frozen=True)
class FinitePopulation:
    """Distribution over (point, label) pairs on a shared finite point set.

    ``points`` are tuples of binary channel values; ``probs[i]`` is the
    (label-0 mass, label-1 mass) of point i.
    """

    points: tuple[tuple[int, ...], ...]
    probs: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not 0 < len(self.points) <= MAX_POINTS:
            raise ValueError(f"need 1..{MAX_POINTS} points, got {len(self.points)}")
        widths = {len(p) for p in self.points}
        if len(widths) != 1 or max(widths) > MAX_CHANNELS:
            raise ValueError(f"points must share one width of at most {MAX_CHANNELS}")
        if len(set(self.points)) != len(self.points):
            raise ValueError("points must be unique")
        if len(self.probs) != len(self.points):
            raise ValueError("one probability pair per point required")
        flat = np.asarray(self.probs, dtype=np.float64)
        if (flat < 0).any():
            raise ValueError("probabilities must be nonnegative")
        if abs(flat.sum() - 1.0) > _PROB_TOL:
            raise ValueError(f"probabilities sum to {flat.sum()}, not 1")

    @property
    def n_channels(self) -> int:
        return len(self.points[0])

    def prob_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=np.float64)

    def marginal(self) -> np.ndarray:
        return self.prob_array().sum(axis=1)


@dataclass(frozen=True)
class FiniteHypothesisClass:
    """Deduplicated explicit enumeration of binary functions on the points."""

    predictions: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if not self.predictions:
            raise ValueError("hypothesis class must be nonempty")
        if len(set(self.predictions)) != len(self.predictions):
            raise ValueError("hypotheses must be deduplicated")
        if any(v not in (0, 1) for row in self.predictions for v in row):
            raise ValueError("predictions must be binary")
        if len(self.predictions) > 2**MAX_POINTS:
            raise ValueError("class exceeds the representable mask space")

    def __len__(self) -> int:
        return len(self.predictions)

    @classmethod
    def from_rows(cls, rows) -> "FiniteHypothesisClass":
        unique = sorted({tuple(int(v) for v in row) for row in rows})
        return cls(predictions=tuple(unique))

    def pred_array(self) -> np.ndarray:
        return np.asarray(self.predictions, dtype=np.float64)

    def restrict(self, points, channel_subset) -> "FiniteHypothesisClass":
        """Hypotheses that depend only on the given channel coordinates."""
        keys = [tuple(p[c] for c in channel_subset) for p in points]
        groups: dict[tuple, list[int]] = {}
        for i, key in enumerate(keys):
            groups.setdefault(key, []).append(i)
        kept = []
        for row in self.predictions:
            if all(len({row[i] for i in idx}) == 1 for idx in groups.values()):
                kept.append(row)
        if not kept:
            raise ValueError("restriction left an empty class; include constant hypotheses")
        return FiniteHypothesisClass(predictions=tuple(kept))


@dataclass(frozen=True)
class MixtureSpec:
    """Weighted combination of populations over a shared point set."""

    populations: tuple[FinitePopulation, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.populations) != len(self.weights) or not self.populations:
            raise ValueError("need matching, nonempty populations and weights")
        points = {p.points for p in self.populations}
        if len(points) != 1:
            raise ValueError("mixture populations must share one point set")
        w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any() or abs(w.sum() - 1.0) > _PROB_TOL:
            raise ValueError("weights must be a probability vector")

    def mixed(self) -> FinitePopulation:
        stacked = np.stack([p.prob_array() for p in self.populations])
        w = np.asarray(self.weights, dtype=np.float64)
        mixed = np.tensordot(w, stacked, axes=1)
        return FinitePopulation(
            points=self.populations[0].points,
            probs=tuple(tuple(row) for row in mixed),
        )


def _prediction_row(f, n_points: int) -> np.ndarray:
    row = np.asarray(f, dtype=np.float64).reshape(-1)
    if len(row) != n_points:
        raise ValueError("hypothesis length does not match the point set")
    return row


def risk(f, population: FinitePopulation) -> float:
    """Exact zero-one risk by summation over the finite support."""
    row = _prediction_row(f, len(population.points))
    probs = population.prob_array()
    return float(row @ probs[:, 0] + (1.0 - row) @ probs[:, 1])


def risk_all(cls: FiniteHypothesisClass, population: FinitePopulation) -> np.ndarray:
    pred = cls.pred_array()
    probs = population.prob_array()
    return pred @ probs[:, 0] + (1.0 - pred) @ probs[:, 1]


def mixture_risk(f, mix: MixtureSpec) -> float:
    """Weight-averaged per-population risk (equals the mixed-distribution risk)."""
    return float(sum(w * risk(f, p) for w, p in zip(mix.weights, mix.populations)))


def transfer_gap(f, mix: MixtureSpec, target: FinitePopulation) -> float:
    """Held-out risk minus training-mixture risk for one hypothesis."""
    return risk(f, target) - mixture_risk(f, mix)


def _pairwise_disc(pred: np.ndarray, delta: np.ndarray) -> float:
    """max over hypothesis pairs of |source - target| disagreement mass.

    With xor(i, j) = f_i + f_j - 2 f_i f_j, the disagreement-mass difference
    for a pair is u_i + u_j - 2 * (f_i * delta) @ f_j where u = pred @ delta.
    """
    u = pred @ delta
    best = 0.0
    block = 256
    for start in range(0, len(pred), block):
        chunk = pred[start : start + block]
        cross = (chunk * delta) @ pred.T
        w = u[start : start + block, None] + u[None, :] - 2.0 * cross
        best = max(best, float(np.abs(w).max()))
    return best


def disc_and_lambda(mix: MixtureSpec, target: FinitePopulation, cls: FiniteHypothesisClass) -> dict:
    """Exhaustive discrepancy and irreducible joint risk for a class.

    ``disc`` is the maximum over hypothesis pairs of the absolute difference
    between source and target disagreement mass; ``joint_risk`` is the
    smallest achievable sum of source and target risk within the class.
    For every f in the class, target risk <= source risk + disc + joint_risk.
    """
    if len(cls) > MAX_HYPOTHESES:
        raise ClassTooLarge(f"{len(cls)} hypotheses exceed the cap of {MAX_HYPOTHESES}")
    source = mix.mixed()
    if source.points != target.points:
        raise ValueError("mixture and target must share one point set")
    pred = cls.pred_array()
    delta = source.marginal() - target.marginal()
    disc = _pairwise_disc(pred, delta)
    joint = risk_all(cls, source) + risk_all(cls, target)
    return {"disc": disc, "joint_risk": float(joint.min())}


def check_bound(mix: MixtureSpec, target: FinitePopulation, cls: FiniteHypothesisClass) -> dict:
    """Verify target risk <= source risk + disc + joint_risk for every hypothesis."""
    parts = disc_and_lambda(mix, target, cls)
    source_risks = risk_all(cls, mix.mixed())
    target_risks = risk_all(cls, target)
    slack = source_risks + parts["disc"] + parts["joint_risk"] - target_risks
    worst = int(np.argmin(slack))
    return {
        **parts,
        "holds": bool(slack.min() >= -_BOUND_TOL),
        "min_slack": float(slack.min()),
        "worst_hypothesis": cls.predictions[worst],
    }


def epsilon_good_set(source, cls: FiniteHypothesisClass, epsilon: float) -> tuple[int, ...]:
    """Indices of hypotheses with risk at most epsilon on a population or mixture."""
    if isinstance(source, MixtureSpec):
        source = source.mixed()
    risks = risk_all(cls, source)
    return tuple(int(i) for i in np.flatnonzero(risks <= epsilon))


def check_contraction(
    s1: tuple[FinitePopulation, ...],
    s2: tuple[FinitePopulation, ...],
    cls: FiniteHypothesisClass,
    epsilon: float,
) -> bool:
    """Good-set intersection over the larger set is inside the smaller set's.

    Requires s1 to be a sub-collection of s2; the containment itself must
    always hold (set-intersection monotonicity) and is verified explicitly.
    """
    remaining = list(s2)
    for pop in s1:
        if pop in remaining:
            remaining.remove(pop)
        else:
            raise NotASubsetPair("first population collection is not contained in the second")

    def intersection(pops) -> set[int]:
        good = set(range(len(cls)))
        for pop in pops:
            good &= set(epsilon_good_set(pop, cls, epsilon))
        return good

    return intersection(s2) <= intersection(s1)


# --------------------------------------------------------------------------
# Channel restriction


def project_population(population: FinitePopulation, channel_subset) -> FinitePopulation:
    """Push a population forward through coordinate projection (points may merge)."""
    merged: dict[tuple[int, ...], np.ndarray] = {}
    for point, (p0, p1) in zip(population.points, population.probs):
        key = tuple(point[c] for c in channel_subset)
        merged.setdefault(key, np.zeros(2))
        merged[key] += (p0, p1)
    keys = sorted(merged)
    return FinitePopulation(
        points=tuple(keys), probs=tuple(tuple(merged[k]) for k in keys)
    )


def empirical_risks(
    cls: FiniteHypothesisClass, population: FinitePopulation, sample_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Zero-one risks of every hypothesis on one i.i.d. sample from the population."""
    flat = population.prob_array().reshape(-1)
    draws = rng.choice(len(flat), size=sample_size, p=flat)
    counts = np.bincount(draws, minlength=len(flat)).reshape(-1, 2) / sample_size
    pred = cls.pred_array()
    return pred @ counts[:, 0] + (1.0 - pred) @ counts[:, 1]


def check_projection_bound(
    mix: MixtureSpec,
    target: FinitePopulation,
    cls: FiniteHypothesisClass,
    channel_subset,
    sample_size: int = 64,
    rng: np.random.Generator | None = None,
) -> dict:
    """Check the risk bound for the channel-restricted hypothesis class.

    For every f depending only on the selected channels:
    target risk <= empirical source risk + complexity + projected disc +
    projected joint risk, where complexity is the exact supremum of the
    (population - empirical) gap over the restricted class on one sample.
    """
    if len(cls) > MAX_HYPOTHESES:
        raise ClassTooLarge(f"{len(cls)} hypotheses exceed the cap of {MAX_HYPOTHESES}")
    rng = rng or np.random.default_rng(0)
    points = target.points
    restricted = cls.restrict(points, channel_subset)
    source = mix.mixed()
    source_risks = risk_all(restricted, source)
    target_risks = risk_all(restricted, target)
    empirical = empirical_risks(restricted, source, sample_size, rng)
    complexity = float((source_risks - empirical).max())
    delta = source.marginal() - target.marginal()
    disc_proj = _pairwise_disc(restricted.pred_array(), delta)
    joint_proj = float((source_risks + target_risks).min())
    slack = empirical + complexity + disc_proj + joint_proj - target_risks
    worst = int(np.argmin(slack))
    return {
        "holds": bool(slack.min() >= -_BOUND_TOL),
        "min_slack": float(slack.min()),
        "complexity": complexity,
        "disc": disc_proj,
        "joint_risk": joint_proj,
        "n_restricted": len(restricted),
        "worst_hypothesis": restricted.predictions[worst],
    }


# --------------------------------------------------------------------------
# Randomized suites


def _random_points(rng: np.random.Generator) -> tuple[tuple[int, ...], ...]:
    n_channels = int(rng.integers(2, MAX_CHANNELS + 1))
    all_points = [
        tuple(int(b) for b in np.binary_repr(i, width=n_channels)) for i in range(2**n_channels)
    ]
    n_keep = int(rng.integers(2, min(len(all_points), MAX_POINTS) + 1))
    picks = sorted(rng.choice(len(all_points), size=n_keep, replace=False))
    return tuple(all_points[i] for i in picks)


def _random_population(points, rng: np.random.Generator) -> FinitePopulation:
    raw = rng.dirichlet(np.full(2 * len(points), 0.4))
    probs = raw.reshape(-1, 2)
    # Renormalize exactly so validation tolerances never trip on float dust.
    probs = probs / probs.sum()
    return FinitePopulation(points=points, probs=tuple(tuple(row) for row in probs))


def _random_class(points, rng: np.random.Generator, max_extra: int = 60) -> FiniteHypothesisClass:
    n = len(points)
    rows = {(0,) * n, (1,) * n}
    n_extra = int(rng.integers(4, max_extra + 1))
    for _ in range(n_extra):
        rows.add(tuple(int(v) for v in rng.integers(0, 2, size=n)))
    return FiniteHypothesisClass.from_rows(rows)


def _random_mixture(points, rng: np.random.Generator, n_pops: int) -> MixtureSpec:
    pops = tuple(_random_population(points, rng) for _ in range(n_pops))
    weights = rng.dirichlet(np.ones(n_pops))
    weights = weights / weights.sum()
    return MixtureSpec(populations=pops, weights=tuple(weights))


@dataclass
class SuiteReport:
    name: str
    instances: int
    violations: list[str]

    @property
    def passed(self) -> bool:
        return not self.violations


def bound_suite(n_instances: int = 1000, seed: int = 10) -> SuiteReport:
    """Generalization bound on random instances; expect zero violations."""
    violations = []
    for i in range(n_instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        points = _random_points(rng)
        mix = _random_mixture(points, rng, int(rng.integers(1, 4)))
        target = _random_population(points, rng)
        cls = _random_class(points, rng)
        outcome = check_bound(mix, target, cls)
        if not outcome["holds"]:
            violations.append(
                f"instance={i} min_slack={outcome['min_slack']:.3e} "
                f"hypothesis={outcome['worst_hypothesis']}"
            )
    return SuiteReport(name="generalization-bound", instances=n_instances, violations=violations)


def contraction_suite(n_instances: int = 500, seed: int = 10) -> SuiteReport:
    """Good-set contraction on random nested population collections."""
    violations = []
    for i in range(n_instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, i]))
        points = _random_points(rng)
        n_pops = int(rng.integers(2, 5))
        pops = tuple(_random_population(points, rng) for _ in range(n_pops))
        n_small = int(rng.integers(1, n_pops + 1))
        small = pops[:n_small]
        cls = _random_class(points, rng)
        epsilon = float(rng.uniform(0.0, 0.7))
        if not check_contraction(small, pops, cls, epsilon):
            violations.append(f"instance={i} epsilon={epsilon:.3f}")
    return SuiteReport(name="good-set-contraction", instances=n_instances, violations=violations)


def projection_suite(n_instances: int = 200, seed: int = 10) -> SuiteReport:
    """Channel-restriction bound on random instances and channel subsets."""
    violations = []
    for i in range(n_instances):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3, i]))
        points = _random_points(rng)
        mix = _random_mixture(points, rng, int(rng.integers(1, 3)))
        target = _random_population(points, rng)
        cls = _random_class(points, rng)
        n_channels = len(points[0])
        n_keep = int(rng.integers(1, n_channels + 1))
        subset = tuple(sorted(rng.choice(n_channels, size=n_keep, replace=False)))
        outcome = check_projection_bound(mix, target, cls, subset, sample_size=64, rng=rng)
        if not outcome["holds"]:
            violations.append(
                f"instance={i} subset={subset} min_slack={outcome['min_slack']:.3e}"
            )
    return SuiteReport(name="channel-projection", instances=n_instances, violations=violations)


def run_suites(bound_n: int = 1000, contraction_n: int = 500, projection_n: int = 200, seed: int = 10):
    return [
        bound_suite(bound_n, seed),
        contraction_suite(contraction_n, seed),
        projection_suite(projection_n, seed),
    ]


def render_report(reports: list[SuiteReport]) -> str:
    """Structured pass/fail text with counterexample dumps (none expected)."""
    lines = []
    all_pass = True
    for report in reports:
        status = "pass" if report.passed else "FAIL"
        if report.instances == 0:
            status = "pass (vacuous: zero instances requested)"
        lines.append(
            f"suite={report.name} instances={report.instances} "
            f"violations={len(report.violations)} status={status}"
        )
        for item in report.violations:
            lines.append(f"  counterexample {item}")
        all_pass &= report.passed
    lines.append(f"overall={'pass' if all_pass else 'FAIL'}")
    return "\n".join(lines) + "\n"
