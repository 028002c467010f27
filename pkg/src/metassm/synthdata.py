"""Synthetic benchmark generators and the on-disk dataset format.

Families: a limit cycle with per-dataset angular velocity, the Hopf normal
form family, and a damped Duffing family.  Latents are lifted to
observations with a random linear readout plus Gaussian noise.

Seeding: every random stream is a pure function of the dataset seed and a
path, via ``numpy.random.SeedSequence(seed, spawn_key=path)``:

* ``(0, i)``  latents of trial ``i`` (initial condition, then diffusion);
* ``(1, i)``  observation noise of trial ``i``;
* ``(2,)``    readout matrix and observation dimension.

Dataset seeds inside a generator config derive from the master seed with
path ``(k,)`` for the ``k``-th dataset; parameters drawn at random (e.g.
sampled angular velocities) use path ``(10**6,)``.
"""
from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError, InstabilityError, NumericError

FAMILIES = ("limit_cycle", "hopf", "duffing")
FORMAT_VERSION = 1
DIVERGENCE = 1e6
_PARAM_KEYS = {"limit_cycle": ("omega",), "hopf": ("mu",), "duffing": ("a", "b", "c")}
_DEFAULT_INIT = {"limit_cycle": {"r_min": 0.5, "r_max": 1.0}, "hopf": {"box": 3.0}, "duffing": {"box": 3.0}}


def stream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path)))


def derive_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path)).generate_state(1)[0])


@dataclass
class SdeSpec:
    family: str
    params: dict
    sigma_w: float = 5.0
    dt: float = 0.04
    T: int = 300
    integrator: str = "euler_maruyama"
    init: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; choose from {FAMILIES}", "family")
        if not self.dt > 0:
            raise ConfigError("dt must be positive", "dt")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError("T must be a positive integer", "T")
        self.T = int(self.T)
        if not self.sigma_w >= 0:
            raise ConfigError("sigma_w must be non-negative", "sigma_w")
        if self.integrator != "euler_maruyama":
            raise ConfigError(f"unsupported integrator {self.integrator!r}", "integrator")
        params = dict(self.params)
        if self.family == "duffing":
            params.setdefault("c", 0.1)
        for k in _PARAM_KEYS[self.family]:
            if k not in params:
                raise ConfigError(f"{self.family} needs parameter {k!r}", f"params.{k}")
            params[k] = float(params[k])
        if self.family == "limit_cycle" and params["omega"] <= 0:
            raise ConfigError("omega must be positive", "params.omega")
        self.params = params
        init = dict(_DEFAULT_INIT[self.family])
        init.update(self.init)
        if self.family == "limit_cycle" and not (0 < init["r_min"] <= init["r_max"] <= 1.0):
            raise ConfigError("limit-cycle radii need 0 < r_min <= r_max <= 1 (larger radii diverge)", "init")
        self.init = init

    @property
    def name(self) -> str:
        ps = ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.family}({ps})"

    @property
    def key_param(self) -> float:
        """The parameter diagnostics correlate against (omega or mu); NaN for Duffing."""
        return self.params.get("omega", self.params.get("mu", float("nan")))

    def to_dict(self) -> dict:
        return asdict(self)


def hopf_drift(mu: float) -> Callable[[np.ndarray], np.ndarray]:
    def f(z):
        z1, z2 = z[..., 0], z[..., 1]
        return np.stack([z2, -z1 + (mu - z1 * z1) * z2], axis=-1)
    return f


def duffing_drift(a: float, b: float, c: float = 0.1) -> Callable[[np.ndarray], np.ndarray]:
    def f(z):
        z1, z2 = z[..., 0], z[..., 1]
        return np.stack([z2, a * z2 - z1 * (b + c * z1 * z1)], axis=-1)
    return f


def _integrate(drift, z0: np.ndarray, dt: float, sigma_w: float, noise: np.ndarray, label: str) -> np.ndarray:
    """Euler-Maruyama with pre-drawn standard normal ``noise`` of shape ``(..., T-1, d)``."""
    T = noise.shape[-2] + 1
    out = np.empty(z0.shape[:-1] + (T, z0.shape[-1]))
    out[..., 0, :] = z0
    z = z0
    scale = sigma_w * math.sqrt(dt)
    for t in range(1, T):
        z = z + drift(z) * dt + scale * noise[..., t - 1, :]
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > DIVERGENCE:
            raise InstabilityError(f"{label} diverged at step {t} (|z| > {DIVERGENCE:g})")
        out[..., t, :] = z
    return out


def euler_maruyama(drift, z0, dt: float, T: int, sigma_w: float, seed: int = 0, label: str = "sde") -> np.ndarray:
    """``z_{t+1} = z_t + drift(z_t) dt + sigma_w sqrt(dt) eps_t``; returns ``(..., T, d)`` with ``z_1 = z0``."""
    z0 = np.asarray(z0, dtype=float)
    if z0.ndim == 0:
        z0 = z0.reshape(1)
    if not np.all(np.isfinite(z0)):
        raise ContractError("initial state must be finite")
    if T < 1 or dt <= 0 or sigma_w < 0:
        raise ContractError("need T >= 1, dt > 0, sigma_w >= 0")
    noise = np.random.default_rng(seed).standard_normal(z0.shape[:-1] + (T - 1, z0.shape[-1]))
    return _integrate(drift, z0, dt, sigma_w, noise, label)


def gen_limit_cycle(omega: float, n_trials: int, T: int = 300, dt: float = 0.04, sigma_w: float = 5.0,
                    seed: int = 0, r_min: float = 0.5, r_max: float = 1.0, r0=None, theta0=None) -> np.ndarray:
    """Polar system r' = r (1 - r)^2, theta' = omega, integrated noise-free; the
    Cartesian readout gets independent ``sigma_w sqrt(dt)`` noise per step."""
    spec = SdeSpec("limit_cycle", {"omega": omega}, sigma_w, dt, T, init={"r_min": r_min, "r_max": r_max})
    out = np.empty((n_trials, T, 2))
    for i in range(n_trials):
        rng = stream(seed, 0, i)
        r = rng.uniform(r_min, r_max) if r0 is None else float(r0)
        th = rng.uniform(0.0, 2 * math.pi) if theta0 is None else float(theta0)
        rs = np.empty(T)
        ths = np.empty(T)
        for t in range(T):
            rs[t], ths[t] = r, th
            r = r + r * (1.0 - r) ** 2 * dt
            th = th + omega * dt
        eps = rng.standard_normal((T, 2))
        out[i, :, 0] = rs * np.cos(ths)
        out[i, :, 1] = rs * np.sin(ths)
        out[i] += sigma_w * math.sqrt(dt) * eps
        if not np.all(np.isfinite(out[i])) or np.max(np.abs(out[i])) > DIVERGENCE:
            raise InstabilityError(f"{spec.name} diverged")
    return out


def _box_initial(rng, box: float) -> np.ndarray:
    return rng.uniform(-box, box, size=2)


def _gen_em(spec: SdeSpec, drift, n_trials: int, seed: int, z0=None) -> np.ndarray:
    z0s = np.empty((n_trials, 2))
    noise = np.empty((n_trials, spec.T - 1, 2))
    for i in range(n_trials):
        rng = stream(seed, 0, i)
        z0s[i] = _box_initial(rng, spec.init["box"]) if z0 is None else z0
        noise[i] = rng.standard_normal((spec.T - 1, 2))
    return _integrate(drift, z0s, spec.dt, spec.sigma_w, noise, spec.name)


def gen_hopf(mu: float, n_trials: int, T: int = 350, dt: float = 0.04, sigma_w: float = 5.0, seed: int = 0,
             box: float = 3.0, z0=None) -> np.ndarray:
    spec = SdeSpec("hopf", {"mu": mu}, sigma_w, dt, T, init={"box": box})
    return _gen_em(spec, hopf_drift(mu), n_trials, seed, z0)


def gen_duffing(a: float, b: float, n_trials: int, c: float = 0.1, T: int = 300, dt: float = 0.04,
                sigma_w: float = 5.0, seed: int = 0, box: float = 3.0, z0=None) -> np.ndarray:
    spec = SdeSpec("duffing", {"a": a, "b": b, "c": c}, sigma_w, dt, T, init={"box": box})
    return _gen_em(spec, duffing_drift(a, b, c), n_trials, seed, z0)


def generate_latents(spec: SdeSpec, n_trials: int, seed: int) -> np.ndarray:
    p, i = spec.params, spec.init
    if spec.family == "limit_cycle":
        return gen_limit_cycle(p["omega"], n_trials, spec.T, spec.dt, spec.sigma_w, seed, i["r_min"], i["r_max"])
    if spec.family == "hopf":
        return gen_hopf(p["mu"], n_trials, spec.T, spec.dt, spec.sigma_w, seed, i["box"])
    return gen_duffing(p["a"], p["b"], n_trials, p["c"], spec.T, spec.dt, spec.sigma_w, seed, i["box"])


@dataclass
class ObservationLift:
    C: np.ndarray          # (d_y, d_z)
    noise_var: float = 0.01

    @property
    def d_y(self) -> int:
        return self.C.shape[0]

    @property
    def d_z(self) -> int:
        return self.C.shape[1]

    @classmethod
    def sample(cls, d_z: int, rng: np.random.Generator, d_y_range=(30, 100), noise_var: float = 0.01):
        lo, hi = d_y_range
        if not 1 <= lo <= hi:
            raise ConfigError("observation dimension bounds must satisfy 1 <= lo <= hi", "d_y")
        d_y = int(rng.integers(lo, hi + 1))
        # entry variance 1/sqrt(d_z)
        C = rng.normal(0.0, d_z ** -0.25, size=(d_y, d_z))
        return cls(C, noise_var)


def lift_observations(latents: np.ndarray, lift: ObservationLift, seed: int) -> np.ndarray:
    """``y_t = C z_t + eta_t`` with per-trial noise streams."""
    latents = np.asarray(latents, dtype=float)
    if latents.shape[-1] != lift.d_z:
        raise DimensionError(f"latents have {latents.shape[-1]} dims, lift expects {lift.d_z}")
    y = latents @ lift.C.T
    if lift.noise_var > 0:
        sd = math.sqrt(lift.noise_var)
        if latents.ndim == 3:
            for i in range(latents.shape[0]):
                y[i] += sd * stream(seed, 1, i).standard_normal(y.shape[1:])
        else:
            y += sd * stream(seed, 1, 0).standard_normal(y.shape)
    return y


@dataclass
class DatasetBundle:
    dataset_id: str
    observations: np.ndarray                # (trials, T, d_y)
    latents: np.ndarray | None              # (trials, T, d_z)
    splits: dict[str, np.ndarray]
    spec: SdeSpec | None = None
    readout: np.ndarray | None = None
    noise_var: float | None = None
    seed: int | None = None

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        if self.observations.ndim != 3:
            raise DimensionError("observations must be (trials, T, d_y)")
        if not np.all(np.isfinite(self.observations)):
            raise NumericError("observations must be finite")
        if self.latents is not None:
            self.latents = np.asarray(self.latents, dtype=float)
            if self.latents.shape[:2] != self.observations.shape[:2] or not np.all(np.isfinite(self.latents)):
                raise ContractError("latents must be finite and match the observation trial/time axes")
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        idx = np.concatenate(list(self.splits.values())) if self.splits else np.zeros(0, np.int64)
        if len(idx) != self.n_trials or len(np.unique(idx)) != len(idx) or \
                (len(idx) and (idx.min() < 0 or idx.max() >= self.n_trials)):
            raise ContractError("splits must partition the trials")

    @property
    def n_trials(self) -> int:
        return self.observations.shape[0]

    @property
    def T(self) -> int:
        return self.observations.shape[1]

    @property
    def d_y(self) -> int:
        return self.observations.shape[2]

    def split(self, name: str) -> np.ndarray:
        try:
            return self.observations[self.splits[name]]
        except KeyError:
            raise ContractError(f"dataset {self.dataset_id!r} has no split {name!r}") from None

    def split_latents(self, name: str) -> np.ndarray | None:
        return None if self.latents is None else self.latents[self.splits[name]]

    def subset(self, name: str, n: int) -> "DatasetBundle":
        """A copy whose ``name`` split keeps only its first ``n`` trials."""
        idx = self.splits[name]
        if n > len(idx):
            raise ContractError(f"requested {n} {name} trials, only {len(idx)} available")
        splits = dict(self.splits)
        drop = idx[n:]
        keep = np.setdiff1d(np.arange(self.n_trials), drop)
        remap = {old: new for new, old in enumerate(keep)}
        new_splits = {k: np.array([remap[i] for i in (v[:n] if k == name else v)], dtype=np.int64)
                      for k, v in splits.items()}
        return DatasetBundle(self.dataset_id, self.observations[keep],
                             None if self.latents is None else self.latents[keep],
                             new_splits, self.spec, self.readout, self.noise_var, self.seed)


def make_splits(counts: dict[str, int]) -> dict[str, np.ndarray]:
    # fixed order so that a config's key order never moves trials between splits
    order = [k for k in ("train", "val", "test") if k in counts] + sorted(set(counts) - {"train", "val", "test"})
    out, start = {}, 0
    for name in order:
        n = counts[name]
        if n < 0:
            raise ConfigError("split sizes must be non-negative", f"splits.{name}")
        out[name] = np.arange(start, start + n)
        start += n
    return out


def generate_dataset(dataset_id: str, spec: SdeSpec, splits: dict[str, int], seed: int,
                     d_y_range=(30, 100), obs_noise: float = 0.01) -> DatasetBundle:
    n = sum(splits.values())
    latents = generate_latents(spec, n, seed)
    lift = ObservationLift.sample(2, stream(seed, 2), d_y_range, obs_noise)
    obs = lift_observations(latents, lift, seed)
    return DatasetBundle(dataset_id, obs, latents, make_splits(splits), spec, lift.C, obs_noise, seed)


# on-disk format ---------------------------------------------------------------

def write_array(path: Path, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(a.tobytes())


def read_array(path: Path) -> np.ndarray:
    buf = path.read_bytes()
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<Q", buf, 0)
    if rank > 16 or len(buf) < 8 + 8 * rank:
        raise FormatError(f"{path}: bad rank {rank}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    off = 8 + 8 * rank
    if len(buf) != off + 8 * n:
        raise FormatError(f"{path}: payload size does not match header {dims}")
    return np.frombuffer(buf, dtype="<f8", offset=off).reshape(dims).astype(np.float64)


def save_bundle(bundle: DatasetBundle, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset_id": bundle.dataset_id,
        "n_trials": bundle.n_trials,
        "T": bundle.T,
        "d_y": bundle.d_y,
        "d_z": None if bundle.latents is None else int(bundle.latents.shape[2]),
        "splits": {k: v.tolist() for k, v in bundle.splits.items()},
        "spec": None if bundle.spec is None else bundle.spec.to_dict(),
        "seed": bundle.seed,
        "obs_noise": bundle.noise_var,
        "readout": None if bundle.readout is None else bundle.readout.tolist(),
        "has_latents": bundle.latents is not None,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    write_array(d / "observations.bin", bundle.observations)
    if bundle.latents is not None:
        write_array(d / "latents.bin", bundle.latents)
    return d


def load_bundle(directory: str | Path) -> DatasetBundle:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d}/manifest.json: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{d}: unsupported dataset format {manifest.get('format_version')}")
    obs = read_array(d / "observations.bin")
    latents = read_array(d / "latents.bin") if manifest.get("has_latents") else None
    if obs.shape != (manifest["n_trials"], manifest["T"], manifest["d_y"]):
        raise FormatError(f"{d}: observation shape {obs.shape} disagrees with manifest")
    spec = SdeSpec(**manifest["spec"]) if manifest.get("spec") else None
    readout = np.array(manifest["readout"]) if manifest.get("readout") is not None else None
    return DatasetBundle(manifest["dataset_id"], obs, latents, manifest["splits"], spec, readout,
                         manifest.get("obs_noise"), manifest.get("seed"))


# generator configs ------------------------------------------------------------

DUFFING_TRAIN_GRID = {"a": [-0.4, -0.3, -0.2, -0.1, 0.0], "b": [-1.0, -0.5, 0.5, 1.0]}
DUFFING_HELD_OUT = [(-0.25, 0.75), (-0.15, -0.75)]


def _expand_values(spec, master_seed: int, field_path: str) -> list[float]:
    if isinstance(spec, (int, float)):
        return [float(spec)]
    if isinstance(spec, list):
        return [float(v) for v in spec]
    if isinstance(spec, dict) and len(spec) == 1:
        (kind, args), = spec.items()
        if kind == "linspace":
            lo, hi, n = args
            return [float(v) for v in np.linspace(lo, hi, int(n))]
        if kind == "uniform":
            lo, hi, n = args
            return [float(v) for v in stream(master_seed, 10 ** 6).uniform(lo, hi, int(n))]
    raise ConfigError("expected a number, a list, {'linspace': [lo, hi, n]} or {'uniform': [lo, hi, n]}",
                      field_path)


def expand_config(cfg: dict) -> list[dict]:
    """Flatten a generator config into one entry per dataset (id, spec, splits, seed, lift settings)."""
    if not isinstance(cfg, dict):
        raise ConfigError("generator config must be a JSON object")
    master = cfg.get("seed", 0)
    if not isinstance(master, int) or master < 0:
        raise ConfigError("seed must be a non-negative integer", "seed")
    defaults = cfg.get("defaults", {})
    groups = cfg.get("datasets")
    if not isinstance(groups, list) or not groups:
        raise ConfigError("need a non-empty list of dataset groups", "datasets")
    out = []
    for gi, group in enumerate(groups):
        where = f"datasets[{gi}]"
        g = {**defaults, **group}
        family = g.get("family")
        if family not in FAMILIES:
            raise ConfigError(f"unknown family {family!r}; choose from {FAMILIES}", f"{where}.family")
        if "pairs" in g:
            if not isinstance(g["pairs"], list) or not all(isinstance(p, dict) for p in g["pairs"]):
                raise ConfigError("pairs must be a list of parameter objects", f"{where}.pairs")
            combos = [dict(p) for p in g["pairs"]]
        else:
            sweep = g.get("params", {})
            if not isinstance(sweep, dict):
                raise ConfigError("params must be an object", f"{where}.params")
            keys = sorted(sweep)
            values = [_expand_values(sweep[k], master, f"{where}.params.{k}") for k in keys]
            combos = [dict(zip(keys, c)) for c in itertools.product(*values)]
        prefix = g.get("id", family)
        for ci, params in enumerate(combos):
            try:
                spec = SdeSpec(family, params, g.get("sigma_w", 5.0), g.get("dt", 0.04),
                               g.get("T", 350 if family == "hopf" else 300), init=g.get("init", {}))
            except ConfigError as exc:
                raise ConfigError(str(exc), f"{where}.{exc.field}" if exc.field else where) from None
            ds_id = prefix if len(combos) == 1 and not g.get("index_ids") else f"{prefix}_{ci:02d}"
            out.append({
                "id": ds_id, "spec": spec,
                "splits": dict(g.get("splits", {"train": 128, "val": 64, "test": 64})),
                "d_y": tuple(g.get("d_y", (30, 100))), "obs_noise": float(g.get("obs_noise", 0.01)),
            })
    ids = [e["id"] for e in out]
    if len(set(ids)) != len(ids):
        raise ConfigError("dataset ids must be unique", "datasets")
    for k, e in enumerate(out):
        e["seed"] = derive_seed(master, k)
    return out


def generate_from_config(cfg: dict, out_dir: str | Path | None = None) -> list[DatasetBundle]:
    bundles = []
    for e in expand_config(cfg):
        b = generate_dataset(e["id"], e["spec"], e["splits"], e["seed"], e["d_y"], e["obs_noise"])
        if out_dir is not None:
            save_bundle(b, Path(out_dir) / e["id"])
        bundles.append(b)
    return bundles


def preset(name: str, sigma_w: float | None = None, seed: int = 0, **overrides) -> dict:
    """Generator configs mirroring the benchmark protocols (σ_w must be pinned per experiment)."""
    lc_splits = {"train": 128, "val": 64, "test": 64}
    em_splits = {"train": 128, "test": 64}
    if name == "limit_cycle_m2":
        groups = [{"family": "limit_cycle", "id": "lc", "params": {"omega": [2.0, 5.0]}, "splits": lc_splits}]
    elif name == "limit_cycle_m20":
        groups = [{"family": "limit_cycle", "id": "lc", "params": {"omega": {"uniform": [0.25, 5.0, 20]}},
                   "splits": lc_splits}]
    elif name == "limit_cycle_heldout":
        groups = [{"family": "limit_cycle", "id": "lc_new", "params": {"omega": 4.1}, "splits": lc_splits}]
    elif name == "hopf":
        groups = [{"family": "hopf", "id": "hopf", "params": {"mu": {"linspace": [-1.5, 1.5, 21]}},
                   "splits": em_splits}]
    elif name == "hopf_heldout":
        groups = [{"family": "hopf", "id": "hopf_new", "params": {"mu": [-0.675, 1.125]}, "splits": em_splits}]
    elif name == "duffing_hopf":
        groups = [
            {"family": "duffing", "id": "duffing", "params": dict(DUFFING_TRAIN_GRID), "splits": em_splits},
            {"family": "hopf", "id": "hopf", "params": {"mu": {"linspace": [-1.5, 1.5, 11]}}, "splits": em_splits},
        ]
    elif name == "duffing_hopf_heldout":
        groups = [
            {"family": "duffing", "id": "duffing_new", "pairs": [{"a": a, "b": b} for a, b in DUFFING_HELD_OUT],
             "splits": em_splits},
            {"family": "hopf", "id": "hopf_new", "params": {"mu": -0.675}, "splits": em_splits, "index_ids": True},
        ]
    else:
        raise ConfigError(f"unknown preset {name!r}")
    if "splits" in overrides:
        for g in groups:
            g["splits"] = dict(overrides["splits"])
    defaults = {}
    if sigma_w is not None:
        defaults["sigma_w"] = sigma_w
    defaults.update({k: v for k, v in overrides.items() if k != "splits"})
    return {"seed": seed, "defaults": defaults, "datasets": groups}
