"""Experiment drivers: training, validation, noise/slice/mismatch studies,
ventricular-pressure biomarker and classification, report export.

All randomness derives from one master seed through named
``SeedSequence`` streams, so every study is reproducible and independent of
the order in which studies are run.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .fem import (MaterialParameters, ReferenceOperators, SolverError, TimeConfig, assemble_joint_mass, simulate)
from .formats import canonical_json, config_hash, write_json, write_poro
from .mesh import BoundaryRegion, Mesh, PhantomConfig, build_phantom, load_mesh
from .observation import (ObservationSpace, VoxelGrid, add_noise, build_observation_space, make_box_voxels,
                          make_slice_voxels, observe)
from .pbdw import Reconstructor, ReconstructionError, select_dimension, stability_curve, cross_gramian
from .rom import (ParameterRanges, ParameterSample, ReducedBasis, SnapshotSet, component_norms,
                  compute_pod, compute_zeta, generate_manifold, pod_tail_error,
                  sample_parameters, tail_curve)

log = logging.getLogger(__name__)

# named random streams derived from the master seed
STREAM_VALIDATION = 1
STREAM_NOISE = 2
STREAM_PATIENTS = 3
STREAM_TRAINING = 4


def stream_seed(seed: int, stream: int, *index: int) -> int:
    """A 63-bit seed for one named stream (and optional sub-index)."""
    ss = np.random.SeedSequence([int(seed), stream, *index])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to rerun a study; JSON round-trips through ``to_dict``."""

    # lists, not tuples, so the config survives a JSON round trip unchanged
    phantom: dict = field(default_factory=lambda: {k: list(v) if isinstance(v, tuple) else v
                                                   for k, v in dataclasses.asdict(PhantomConfig()).items()})
    mesh_path: str | None = None
    mesh_format: str = "poromesh"
    tag_map: dict | None = None
    ranges: dict = field(default_factory=lambda: ParameterRanges().to_dict())
    train_counts: int | list = 2
    train_strategy: str = "grid"
    train_total: int | None = None
    tau: float = 5e-4
    steps: int = 20
    beta_hat: float = 0.5
    planes: list = field(default_factory=lambda: [5.0])
    edge: float = 1.0
    slice_sets: dict = field(default_factory=lambda: {
        "1-slice": {"planes": [5.0], "edge": 1.0},
        "3-slice": {"planes": [3.0, 5.0, 7.0], "edge": 1.0},
        "full": {"box": True, "edge": 1.25},
    })
    normalize_functionals: bool = False
    n: int | None = None
    n_max: int = 40
    n_sweep: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 8, 10, 15, 20, 30, 40])
    noise_levels: list = field(default_factory=lambda: [0.0, 0.05, 0.1])
    validation_count: int = 18
    validation_thetas: list | None = None
    mismatch_deltas: list = field(default_factory=lambda: [0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3])
    mismatch_cases: int = 6
    groups: dict = field(default_factory=lambda: {"normal": [1.0e4, 1.02e4], "increased": [1.08e4, 1.1e4]})
    patients_per_group: int = 8
    threshold: float = 1.05e4
    classify_noise: list = field(default_factory=lambda: [0.0, 0.1])
    literal_2E: bool = False
    workers: int = 1
    seed: int = 0
    out: str = "results"
    preset: str = "desk"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @property
    def hash(self) -> str:
        # the output directory does not change results
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        return config_hash(d)

    @property
    def time(self) -> TimeConfig:
        return TimeConfig(self.tau, self.steps, self.beta_hat)

    @property
    def parameter_ranges(self) -> ParameterRanges:
        return ParameterRanges.from_dict(self.ranges)

    def validate(self) -> None:
        self.time.validate()
        self.parameter_ranges.validate()
        if self.n is not None and self.n < 1:
            raise ValueError("n must be positive")
        if self.validation_count < 1:
            raise ValueError("need at least one validation case")
        lo_n, hi_n = self.groups["normal"]
        lo_i, hi_i = self.groups["increased"]
        if not (lo_n <= hi_n < lo_i <= hi_i):
            raise ValueError("biomarker groups must be ordered and disjoint")


def preset(name: str, **overrides) -> ExperimentConfig:
    """``desk``: phantom, 16 grid samples, 20 steps. ``paper``: external mesh, 512 samples, 40 steps."""
    if name == "desk":
        cfg = ExperimentConfig()
    elif name == "paper":
        # 4 x 4 x 4 x 8 = 512 grid samples, finest along p_ventricles
        cfg = ExperimentConfig(train_counts=[4, 4, 4, 8], tau=1.0 / (40 * 50.0), steps=40, n_max=80, preset="paper",
                               n_sweep=[5, 10, 20, 30, 41, 50, 60, 80])
    else:
        raise ValueError(f"unknown preset {name!r}")
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# Artifacts


def build_mesh(cfg: ExperimentConfig) -> Mesh:
    if cfg.mesh_path:
        tag_map = None
        if cfg.tag_map:
            tag_map = {k: BoundaryRegion(v) for k, v in cfg.tag_map.items()}
        return load_mesh(cfg.mesh_path, cfg.mesh_format, tag_map)
    if cfg.preset == "paper":
        raise ValueError("the paper preset needs mesh_path")
    p = dict(cfg.phantom)
    for k in ("outer", "cavity_center", "cavity_size", "neck_size"):
        if k in p:
            p[k] = tuple(p[k])
    return build_phantom(PhantomConfig(**p))


def make_grid(mesh: Mesh, spec: dict) -> VoxelGrid:
    if spec.get("box"):
        return make_box_voxels(mesh, spec["edge"])
    return make_slice_voxels(mesh, spec["planes"], spec["edge"])


@dataclass
class Trained:
    """Offline products of the training phase."""

    cfg: ExperimentConfig
    mesh: Mesh
    samples: list
    snapshots: SnapshotSet
    zeta: float
    M: sp.csr_matrix
    basis: ReducedBasis
    obs: ObservationSpace
    n: int
    reconstructor: Reconstructor
    beta_curve: np.ndarray
    eps_curve: np.ndarray
    _obs_cache: dict = field(default_factory=dict, repr=False)
    _truth_cache: dict = field(default_factory=dict, repr=False)

    @property
    def ops(self) -> ReferenceOperators:
        return ReferenceOperators.from_mesh(self.mesh)

    def reconstructor_for(self, n: int, obs: ObservationSpace | None = None) -> Reconstructor:
        obs = self.obs if obs is None else obs
        if n > obs.m:
            raise ValueError(f"n={n} exceeds the number of measurements m={obs.m}")
        if n > self.basis.n:
            raise ValueError(f"n={n} exceeds the {self.basis.n} available modes")
        return Reconstructor(self.basis.Phi[:, :n], obs.W, self.M, self.zeta, pod_tail_error(self.basis.eigenvalues, n))

    def observation_space(self, spec: dict) -> ObservationSpace:
        key = canonical_json(spec)
        if key not in self._obs_cache:
            grid = make_grid(self.mesh, spec)
            self._obs_cache[key] = build_observation_space(self.mesh, grid, self.zeta, self.cfg.normalize_functionals)
        return self._obs_cache[key]

    def truth(self, theta, neck_displacement: float = 0.0) -> np.ndarray:
        """Forward states for ``theta`` (cached); row ``k`` is step ``k``."""
        key = (tuple(float(x) for x in theta), float(neck_displacement))
        if key not in self._truth_cache:
            mat = MaterialParameters().with_theta(*theta)
            ts = simulate(self.mesh, mat, self.cfg.time, neck_displacement=neck_displacement,
                          literal_2E=self.cfg.literal_2E)
            self._truth_cache[key] = ts.states
        return self._truth_cache[key]

    def summary(self) -> dict:
        k = len(self.beta_curve)
        eps = self.eps_curve[1:k + 1]
        return {
            "N": self.snapshots.N,
            "K": self.snapshots.K,
            "zeta": self.zeta,
            "m": self.obs.m,
            "n": self.n,
            "beta": self.reconstructor.beta,
            "beta_squared": self.reconstructor.beta_squared,
            "eps_n": self.reconstructor.eps_n,
            "bound": self.reconstructor.bound,
            "modes_available": self.basis.n,
            "training_failures": self.snapshots.failures,
            "curve": {"n": list(range(1, k + 1)), "beta": self.beta_curve, "eps": eps, "bound": eps / self.beta_curve},
        }


_TRAINING_CACHE: dict[str, Trained] = {}


def clear_cache() -> None:
    _TRAINING_CACHE.clear()


def training_samples(cfg: ExperimentConfig) -> list[ParameterSample]:
    if cfg.train_strategy == "grid":
        return sample_parameters(cfg.parameter_ranges, counts=cfg.train_counts, strategy="grid")
    total = cfg.train_total or cfg.train_counts
    return sample_parameters(cfg.parameter_ranges, counts=total, strategy=cfg.train_strategy,
                             seed=stream_seed(cfg.seed, STREAM_TRAINING))


def run_training(cfg: ExperimentConfig, out: str | Path | None = None, use_cache: bool = True) -> Trained:
    """Manifold, zeta, POD basis, observation space and the selected reconstructor."""
    cfg.validate()
    key = cfg.hash
    if use_cache and key in _TRAINING_CACHE:
        tr = _TRAINING_CACHE[key]
    else:
        mesh = build_mesh(cfg)
        samples = training_samples(cfg)
        snaps = generate_manifold(mesh, samples, cfg.time, workers=cfg.workers, literal_2E=cfg.literal_2E)
        ops = ReferenceOperators.from_mesh(mesh)
        zeta = compute_zeta(snaps, ops)
        snaps = dataclasses.replace(snaps, zeta=zeta)
        M = assemble_joint_mass(mesh, zeta)
        basis = compute_pod(snaps, M, zeta=zeta)
        grid = make_grid(mesh, {"planes": cfg.planes, "edge": cfg.edge})
        obs = build_observation_space(mesh, grid, zeta, cfg.normalize_functionals)
        k = min(cfg.n_max, basis.n, obs.m)
        beta_curve = stability_curve(cross_gramian(obs.W, M, basis.Phi[:, :k]))
        eps_curve = tail_curve(basis.eigenvalues)
        if cfg.n is not None:
            if cfg.n > obs.m:
                raise ValueError(f"requested n={cfg.n} exceeds the number of measurements m={obs.m}")
            n = cfg.n
        else:
            n = select_dimension(eps_curve[1:k + 1], beta_curve)
        tr = Trained(cfg, mesh, samples, snaps, zeta, M, basis, obs, n, None, beta_curve, eps_curve)
        tr.reconstructor = tr.reconstructor_for(n)
        tr._obs_cache[canonical_json({"planes": cfg.planes, "edge": cfg.edge})] = obs
        if use_cache:
            _TRAINING_CACHE[key] = tr
    if out is not None:
        save_training(tr, out)
    return tr


def save_training(tr: Trained, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    S = tr.snapshots
    write_poro(out / "snapshots.poro", S.A.T, S.tau)
    write_json(out / "snapshots.json", {
        "columns": S.metadata(),
        "samples": [{"id": s.id, "theta": s.theta, "provenance": s.provenance} for s in S.samples],
        "failures": S.failures,
        "zeta": tr.zeta,
        "seed": tr.cfg.seed,
        "config_hash": tr.cfg.hash,
    })
    write_poro(out / "basis.poro", tr.basis.Phi.T, 0.0)
    write_json(out / "basis.json", {
        "eigenvalues": tr.basis.eigenvalues,
        "zeta": tr.zeta,
        "n": tr.basis.n,
        "K": S.K,
        "config_hash": tr.cfg.hash,
    })
    tr.obs.functionals.grid.save(out / "grid.json")
    write_json(out / "training.json", dict(tr.summary(), seed=tr.cfg.seed, config_hash=tr.cfg.hash))


# ---------------------------------------------------------------------------
# Errors


def relative_errors(truth: np.ndarray, rec: np.ndarray, ops: ReferenceOperators, zeta: float) -> np.ndarray:
    """Columns ``e_up, e_u, e_p`` per row of ``(steps, N)`` state arrays."""
    eu, ep = component_norms((truth - rec).T, ops)
    tu, tp = component_norms(truth.T, ops)
    with np.errstate(invalid="ignore", divide="ignore"):
        e_up = np.sqrt(eu**2 + zeta * ep**2) / np.sqrt(tu**2 + zeta * tp**2)
        return np.column_stack([e_up, eu / tu, ep / tp])


def time_average(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Trapezoid average over ``[times[0], times[-1]]`` along axis 0."""
    values = np.asarray(values, float)
    if len(times) == 1:
        return values[0]
    return np.trapezoid(values, times, axis=0) / (times[-1] - times[0])


@dataclass
class ErrorTable:
    """Per-case error histories and their time and population averages."""

    case_ids: list
    thetas: list
    times: np.ndarray
    errors: dict  # case_id -> (steps, 3) array of e_up, e_u, e_p
    diagnostics: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    n: int = 0
    xi: float = 0.0

    def case_average(self, cid) -> np.ndarray:
        return time_average(self.errors[cid], self.times)

    @property
    def mean_history(self) -> np.ndarray:
        return np.mean([self.errors[c] for c in self.case_ids if c in self.errors], axis=0)

    @property
    def time_averaged(self) -> np.ndarray:
        """``(e_up^T, e_u^T, e_p^T)`` of the population-mean history."""
        return time_average(self.mean_history, self.times)

    def rows(self):
        for cid in self.case_ids:
            if cid not in self.errors:
                continue
            for t, (a, b, c) in zip(self.times, self.errors[cid]):
                yield cid, float(t), float(a), float(b), float(c)


def _reconstruct_case(tr: Trained, R: Reconstructor, obs: ObservationSpace, states: np.ndarray, xi: float,
                      noise_seed: int | None):
    keep = np.arange(1, tr.cfg.steps + 1)
    raw = observe(_Series(states, tr.cfg.tau), obs.functionals)
    if xi > 0:
        raw = add_noise(raw, xi, noise_seed)
    L = obs.coordinates(raw.values[keep])
    c = R.coefficients(L.T)
    v = R.Phi @ c
    eta = R.W @ (L.T - R.G @ c)
    diag = R.diagnose(v, eta, c, L.T)
    return (v + eta).T, diag


@dataclass
class _Series:
    states: np.ndarray
    tau: float


def validation_samples(cfg: ExperimentConfig, training: list[ParameterSample]) -> list[ParameterSample]:
    if cfg.validation_thetas is not None:
        return [ParameterSample(1000 + i, tuple(float(x) for x in t), "explicit")
                for i, t in enumerate(cfg.validation_thetas)]
    out = sample_parameters(cfg.parameter_ranges, counts=cfg.validation_count, strategy="random",
                            seed=stream_seed(cfg.seed, STREAM_VALIDATION), exclude=[s.theta for s in training],
                            start_id=1000)
    check_disjoint(training, out)
    return out


def check_disjoint(training, validation) -> None:
    seen = {tuple(s.theta) for s in training}
    clash = [s.id for s in validation if tuple(s.theta) in seen]
    if clash:
        raise ValueError(f"validation cases {clash} coincide with training samples")


def _map(cfg: ExperimentConfig, fn, items):
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_validation(cfg: ExperimentConfig, trained: Trained | None = None, xi: float = 0.0, n: int | None = None,
                   obs: ObservationSpace | None = None, cases: list | None = None,
                   neck_displacement: float = 0.0) -> ErrorTable:
    """Reconstruct every held-out case and tabulate relative errors per step."""
    tr = trained or run_training(cfg)
    obs = tr.obs if obs is None else obs
    n = tr.n if n is None else n
    R = tr.reconstructor if (n == tr.n and obs is tr.obs) else tr.reconstructor_for(n, obs)
    cases = validation_samples(cfg, tr.samples) if cases is None else cases
    times = cfg.tau * np.arange(1, cfg.steps + 1)
    ops = tr.ops

    def one(s: ParameterSample):
        try:
            states = tr.truth(s.theta, neck_displacement)
            seed = stream_seed(cfg.seed, STREAM_NOISE, int(round(xi * 1e6)), s.id)
            rec, diag = _reconstruct_case(tr, R, obs, states, xi, seed)
            truth = states[1:]
            err = relative_errors(truth, rec, ops, tr.zeta)
            diag["joint_error_max"] = float(err[:, 0].max())
            return err, diag
        except (SolverError, ReconstructionError, ValueError, np.linalg.LinAlgError) as exc:
            log.error("validation case %d failed: %s", s.id, exc)
            return exc

    table = ErrorTable([s.id for s in cases], [s.theta for s in cases], times, {}, n=n, xi=xi)
    for s, res in zip(cases, _map(cfg, one, cases)):
        if isinstance(res, Exception):
            table.failures[s.id] = f"{type(res).__name__}: {res}"
        else:
            table.errors[s.id], table.diagnostics[s.id] = res
    return table


def run_noise_study(cfg: ExperimentConfig, trained: Trained | None = None) -> list[dict]:
    """Time-averaged errors over ``(xi, n)``; the empirical optimum n is flagged per xi."""
    tr = trained or run_training(cfg)
    n_cap = min(tr.obs.m, tr.basis.n)
    sweep = sorted({n for n in cfg.n_sweep if 1 <= n <= n_cap})
    cases = validation_samples(cfg, tr.samples)
    rows = []
    for xi in cfg.noise_levels:
        block = []
        for n in sweep:
            try:
                e = run_validation(cfg, tr, xi=float(xi), n=n, cases=cases).time_averaged
                block.append({"xi": float(xi), "n": n, "e_up": e[0], "e_u": e[1], "e_p": e[2]})
            except ReconstructionError as exc:
                log.warning("noise study: n=%d skipped (%s)", n, exc)
                block.append({"xi": float(xi), "n": n, "e_up": float("nan"), "e_u": float("nan"),
                              "e_p": float("nan")})
        finite = [r for r in block if np.isfinite(r["e_up"])]
        best = min(finite, key=lambda r: (r["e_up"], r["n"]))["n"] if finite else None
        for r in block:
            r["optimal"] = r["n"] == best
        rows.extend(block)
    return rows


def run_slice_study(cfg: ExperimentConfig, trained: Trained | None = None) -> list[dict]:
    """Errors for increasingly large observation sets at the trained dimension."""
    tr = trained or run_training(cfg)
    cases = validation_samples(cfg, tr.samples)
    rows = []
    for name, spec in cfg.slice_sets.items():
        obs = tr.observation_space(spec)
        n = min(tr.n, obs.m)
        t = run_validation(cfg, tr, n=n, obs=obs, cases=cases)
        e = t.time_averaged
        rows.append({"config": name, "m": obs.m, "n": n, "beta": tr.reconstructor_for(n, obs).beta,
                     "e_up": e[0], "e_u": e[1], "e_p": e[2]})
    return rows


def run_mismatch_study(cfg: ExperimentConfig, trained: Trained | None = None) -> list[dict]:
    """Reconstruction error when the data come from a displaced neck ``u = (d, d, d)``."""
    tr = trained or run_training(cfg)
    cases = validation_samples(cfg, tr.samples)[: cfg.mismatch_cases]
    rows = []
    for d in cfg.mismatch_deltas:
        t = run_validation(cfg, tr, cases=cases, neck_displacement=float(d))
        e = t.time_averaged
        rows.append({"delta": float(d), "e_up": e[0], "e_u": e[1], "e_p": e[2], "failures": len(t.failures)})
    return rows


# ---------------------------------------------------------------------------
# Biomarker


def ventricle_weights(mesh: Mesh) -> np.ndarray:
    """Nodal weights ``w`` with ``w @ p = mean of p over the ventricle surface``."""
    facets = mesh.facets_of(BoundaryRegion.VENTRICLES)
    if len(facets) == 0:
        raise ValueError("mesh has no ventricle surface")
    area = mesh.facet_areas(BoundaryRegion.VENTRICLES)
    total = area.sum()
    if not total > 0:
        raise ValueError("ventricle surface has zero area")
    w = np.bincount(facets.ravel(), weights=np.repeat(area / 3.0, 3), minlength=mesh.n_nodes)
    return w / total


def compute_biomarker(pressure: np.ndarray, mesh: Mesh, times: np.ndarray) -> float:
    """Time-and-surface average of the pressure over the ventricles.

    ``pressure`` is ``(steps, n_nodes)`` (or ``(n_nodes,)``) at ``times``.
    """
    p = np.atleast_2d(np.asarray(pressure, float))
    times = np.atleast_1d(np.asarray(times, float))
    if p.shape[0] == 0:
        raise ValueError("empty pressure series")
    if p.shape != (len(times), mesh.n_nodes):
        raise ValueError("pressure shape does not match times and mesh")
    return float(time_average(p @ ventricle_weights(mesh), times))


@dataclass
class BiomarkerResult:
    patient_id: int
    group: str
    theta: tuple
    xi: float
    p_true: float
    p_rec: float
    predicted: str

    @property
    def correct(self) -> bool:
        return self.predicted == self.group

    @property
    def relative_error(self) -> float:
        return abs(self.p_rec - self.p_true) / abs(self.p_true)


def patient_samples(cfg: ExperimentConfig) -> list[tuple[str, ParameterSample]]:
    r = cfg.parameter_ranges
    out = []
    pid = 2000
    for gi, (group, (lo, hi)) in enumerate(sorted(cfg.groups.items())):
        rng = np.random.default_rng(stream_seed(cfg.seed, STREAM_PATIENTS, gi))
        for _ in range(cfg.patients_per_group):
            theta = (float(rng.uniform(*r.kappa)), float(rng.uniform(*r.E)), float(rng.uniform(*r.nu)),
                     float(rng.uniform(lo, hi)))
            out.append((group, ParameterSample(pid, theta, f"patient[{group}]")))
            pid += 1
    return out


def classify(p_v: float, threshold: float) -> str:
    return "increased" if p_v > threshold else "normal"


def run_classification(cfg: ExperimentConfig, trained: Trained | None = None) -> list[BiomarkerResult]:
    tr = trained or run_training(cfg)
    R = tr.reconstructor
    nn = tr.mesh.n_nodes
    times = cfg.tau * np.arange(1, cfg.steps + 1)
    results = []
    for xi in cfg.classify_noise:
        for group, s in patient_samples(cfg):
            states = tr.truth(s.theta)
            seed = stream_seed(cfg.seed, STREAM_NOISE, int(round(float(xi) * 1e6)), s.id)
            rec, _ = _reconstruct_case(tr, R, tr.obs, states, float(xi), seed)
            p_true = compute_biomarker(states[1:, 3 * nn:], tr.mesh, times)
            p_rec = compute_biomarker(rec[:, 3 * nn:], tr.mesh, times)
            results.append(BiomarkerResult(s.id, group, s.theta, float(xi), p_true, p_rec,
                                           classify(p_rec, cfg.threshold)))
    return results


# ---------------------------------------------------------------------------
# Export


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    Path(path).write_text(_csv_text(header, rows))


def validation_rows(table: ErrorTable):
    return list(table.rows())


def export_report(artifacts: dict, path: str | Path, cfg: ExperimentConfig | None = None) -> dict:
    """Write one CSV per study present in ``artifacts`` plus ``summary.json``.

    Recognized keys: ``training`` (Trained), ``validation`` (ErrorTable),
    ``noise``, ``slices``, ``mismatch`` (row dicts), ``classification``
    (BiomarkerResult list). Returns the summary dict.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {}
    if cfg is not None:
        summary["config_hash"] = cfg.hash
        summary["seed"] = cfg.seed
        summary["preset"] = cfg.preset
    tr = artifacts.get("training")
    if tr is not None:
        s = tr.summary()
        summary["training"] = {k: v for k, v in s.items() if k != "curve"}
        c = s["curve"]
        write_csv(out / "training.csv", ["n", "beta", "eps_n", "bound"],
                  zip(c["n"], c["beta"], c["eps"], c["bound"]))
    t = artifacts.get("validation")
    if t is not None:
        write_csv(out / "validation.csv", ["case_id", "t", "e_up", "e_u", "e_p"], validation_rows(t))
        case_rows = []
        for cid, theta in zip(t.case_ids, t.thetas):
            if cid in t.errors:
                a = t.case_average(cid)
                d = t.diagnostics[cid]
                case_rows.append([cid, *theta, a[0], a[1], a[2], d["bound"], d["constraint_residual"],
                                  d["orthogonality_residual"], d["normal_residual"]])
        write_csv(out / "validation_cases.csv",
                  ["case_id", "kappa", "E", "nu", "p_ventricles", "e_up_T", "e_u_T", "e_p_T", "bound",
                   "constraint_residual", "orthogonality_residual", "normal_residual"], case_rows)
        e = t.time_averaged
        summary["validation"] = {"n": t.n, "cases": len(t.errors), "failures": t.failures,
                                 "e_up_T": e[0], "e_u_T": e[1], "e_p_T": e[2]}
    if "noise" in artifacts:
        rows = artifacts["noise"]
        write_csv(out / "noise.csv", ["xi", "n", "e_up_T", "e_u_T", "e_p_T", "optimal"],
                  [[r["xi"], r["n"], r["e_up"], r["e_u"], r["e_p"], int(r["optimal"])] for r in rows])
        summary["noise"] = {"optimal_n": {repr(r["xi"]): r["n"] for r in rows if r["optimal"]}}
    if "slices" in artifacts:
        rows = artifacts["slices"]
        write_csv(out / "slices.csv", ["config", "m", "n", "beta", "e_up_T", "e_u_T", "e_p_T"],
                  [[r["config"], r["m"], r["n"], r["beta"], r["e_up"], r["e_u"], r["e_p"]] for r in rows])
        summary["slices"] = rows
    if "mismatch" in artifacts:
        rows = artifacts["mismatch"]
        write_csv(out / "mismatch.csv", ["delta", "e_up_T", "e_u_T", "e_p_T"],
                  [[r["delta"], r["e_up"], r["e_u"], r["e_p"]] for r in rows])
        summary["mismatch"] = rows
    if "classification" in artifacts:
        res = artifacts["classification"]
        write_csv(out / "classification.csv",
                  ["patient_id", "group", "xi", "p_true", "p_rec", "relative_error", "predicted", "correct"],
                  [[r.patient_id, r.group, r.xi, r.p_true, r.p_rec, r.relative_error, r.predicted, int(r.correct)]
                   for r in res])
        by_xi: dict = {}
        for r in res:
            d = by_xi.setdefault(repr(r.xi), {"correct": 0, "total": 0, "max_relative_error": 0.0})
            d["correct"] += int(r.correct)
            d["total"] += 1
            d["max_relative_error"] = max(d["max_relative_error"], r.relative_error)
        summary["classification"] = by_xi
    write_json(out / "summary.json", summary)
    return summary
