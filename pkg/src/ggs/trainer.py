"""Training loop: photometric + regularizer descent with periodic snapping.

One logical thread owns the parameter arrays. Per-parameter-group Adam
moments with bias correction drive the updates; views are sampled
round-robin and every reduction has a fixed order, so identical seeds and
inputs give bitwise-identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import guidance, regularizers, render
from .core import ConfigError, DensePointCloud, GaussianCloud, GgsError, InvalidInputError, logit
from .regularizers import GradientSet

log = logging.getLogger(__name__)

INIT_OPACITY = 0.1
INIT_COLOR = 0.5
SCALE_FLOOR = 1e-4  # world units, guards degenerate neighbor distances


@dataclass
class TrainConfig:
    """All knobs of the optimization; every field is config-file addressable."""

    iterations: int = 2000          # desk-scale default; full runs use 30000
    alpha: float = 100.0            # thinness weight
    beta: float = 0.1               # normal-alignment weight
    snap_interval: int = 500
    snap_stop: int = -1             # -1: snapping stops at 80% of training
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    enable_move: bool = True
    enable_flatten: bool = True
    enable_rotate: bool = True
    seed: int = 0
    subsample: int = 2000           # initial Gaussian count
    init_jitter: float = 0.0        # world-unit noise on initial positions
    prune_opacity: float = 0.005
    snap_blend: float = 1.0
    background: float = 0.0         # scalar gray background
    lambda_dssim: float = 0.2

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.snap_interval <= 0:
            raise ConfigError("snap_interval must be positive")
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity", "lr_color"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def snap_stop_effective(self) -> int:
        return self.snap_stop if self.snap_stop >= 0 else int(0.8 * self.iterations)


_BOOL_STRINGS = {"true": True, "1": True, "yes": True,
                 "false": False, "0": False, "no": False}


def parse_config_file(path, base: TrainConfig | None = None) -> TrainConfig:
    """Line-based ``key = value`` config; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = dataclasses.asdict(base) if base is not None else {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            ftype = fields[key].type
            try:
                if ftype == "bool":
                    values[key] = _BOOL_STRINGS[val.lower()]
                elif ftype == "int":
                    values[key] = int(val)
                else:
                    values[key] = float(val)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {val}") from exc
    return TrainConfig(**values)


class _Adam:
    """Per-array Adam with bias correction."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def keep(self, mask: np.ndarray) -> None:
        self.m = self.m[mask]
        self.v = self.v[mask]


@dataclass
class TrainState:
    """Mutable optimization state owned by the training loop."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    optimizers: dict = field(default_factory=dict)
    iteration: int = 0
    history: list = field(default_factory=list)
    pairing_normals: np.ndarray | None = None

    @classmethod
    def from_cloud(cls, cloud: GaussianCloud) -> "TrainState":
        st = cls(cloud.positions.copy(), cloud.rotations.copy(),
                 cloud.log_scales.copy(), cloud.opacity_logits.copy(),
                 cloud.colors.copy())
        st.optimizers = {
            "positions": _Adam(st.positions.shape),
            "rotations": _Adam(st.rotations.shape),
            "log_scales": _Adam(st.log_scales.shape),
            "opacity_logits": _Adam(st.opacity_logits.shape),
            "colors": _Adam(st.colors.shape),
        }
        return st

    def snapshot(self) -> GaussianCloud:
        return GaussianCloud(self.positions, self.rotations, self.log_scales,
                             self.opacity_logits, self.colors)

    def __len__(self) -> int:
        return len(self.positions)


def init_from_cloud(cloud: DensePointCloud, subsample: int,
                    seed: int = 0) -> GaussianCloud:
    """One Gaussian per sampled cloud point.

    Initial isotropic scale is the mean distance to the 3 nearest
    neighbors (floored for degenerate clouds), rotation identity, opacity
    0.1, color mid-gray.
    """
    if len(cloud) == 0:
        raise InvalidInputError("cannot initialize from an empty cloud")
    n = min(int(subsample), len(cloud))
    rng = np.random.default_rng(seed)
    if n == len(cloud):
        pick = np.arange(len(cloud))
    else:
        pick = np.sort(rng.choice(len(cloud), size=n, replace=False))
    pos = cloud.positions[pick]

    k = min(3, len(cloud) - 1)
    if k >= 1:
        tree = cKDTree(cloud.positions)
        dist, _ = tree.query(pos, k=k + 1)
        mean_d = dist[:, 1:].mean(axis=1)
    else:
        mean_d = np.zeros(n)
    scale = np.maximum(mean_d, SCALE_FLOOR)

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        pos, rot, np.log(scale)[:, None].repeat(3, axis=1),
        np.full(n, logit(INIT_OPACITY)), np.full((n, 3), INIT_COLOR))


def maybe_snap(state: TrainState, index: guidance.SpatialIndex,
               config: TrainConfig) -> bool:
    """Snap positions onto the guidance cloud when the schedule says so."""
    it = state.iteration
    due = (config.enable_move and it % config.snap_interval == 0
           and it < config.snap_stop_effective)
    if not due:
        return False
    snapped, pairing = guidance.snap_gaussians(state.snapshot(), index,
                                               blend=config.snap_blend)
    state.positions[:] = snapped.positions
    state.pairing_normals = guidance.paired_normals(pairing, index.cloud)
    return True


def _refresh_pairing(state: TrainState, index: guidance.SpatialIndex) -> None:
    pairing = guidance.pair_gaussians(state.snapshot(), index)
    state.pairing_normals = guidance.paired_normals(pairing, index.cloud)


def _prune(state: TrainState, config: TrainConfig) -> int:
    """Drop near-transparent Gaussians; filters optimizer moments too."""
    from .core import sigmoid
    keep = sigmoid(state.opacity_logits) >= config.prune_opacity
    dropped = int((~keep).sum())
    if dropped == 0:
        return 0
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
        setattr(state, name, getattr(state, name)[keep])
        state.optimizers[name].keep(keep)
    if state.pairing_normals is not None:
        state.pairing_normals = state.pairing_normals[keep]
    return dropped


def _position_lr(config: TrainConfig, iteration: int) -> float:
    frac = iteration / max(config.iterations - 1, 1)
    return float(config.lr_position *
                 (config.lr_position_final / config.lr_position) ** frac)


def train_step(state: TrainState, views, config: TrainConfig) -> regularizers.LossBreakdown:
    """One gradient step over the round-robin view for this iteration."""
    if not views:
        raise InvalidInputError("training requires at least one view")
    cam, target = views[state.iteration % len(views)]
    cloud = state.snapshot()
    bgval = float(config.background)
    frame, rec = render.render(cloud, cam, bg=(bgval, bgval, bgval), record=True)
    l_rgb, d_img = render.photometric_loss(frame, target,
                                           lambda_dssim=config.lambda_dssim)
    phot = render.backward(rec, d_img)

    alpha_eff = config.alpha if config.enable_flatten else 0.0
    beta_eff = config.beta if config.enable_rotate else 0.0
    normals = state.pairing_normals
    if beta_eff != 0.0 and normals is None:
        raise GgsError("normal-alignment term enabled but no guidance pairing set")
    if normals is None:
        normals = np.zeros((len(state), 3))
    grads = regularizers.analytic_gradients(cloud, normals, phot,
                                            alpha=alpha_eff, beta=beta_eff)
    breakdown = regularizers.total_loss(l_rgb, cloud, normals,
                                        alpha=alpha_eff, beta=beta_eff)
    if not np.isfinite(breakdown.total) or not grads.all_finite():
        for term, value in (("rgb", breakdown.l_rgb), ("thin", breakdown.l_thin),
                            ("normal", breakdown.l_normal)):
            if not np.isfinite(value):
                raise GgsError(f"non-finite loss term '{term}' at iteration "
                               f"{state.iteration}")
        raise GgsError(f"non-finite gradients at iteration {state.iteration}")

    state.optimizers["positions"].step(state.positions, grads.positions,
                                       _position_lr(config, state.iteration))
    state.optimizers["rotations"].step(state.rotations, grads.rotations,
                                       config.lr_rotation)
    state.optimizers["log_scales"].step(state.log_scales, grads.log_scales,
                                        config.lr_scale)
    state.optimizers["opacity_logits"].step(state.opacity_logits,
                                            grads.opacity_logits, config.lr_opacity)
    state.optimizers["colors"].step(state.colors, grads.colors, config.lr_color)
    np.clip(state.colors, 0.0, 1.0, out=state.colors)

    state.history.append((state.iteration, breakdown.l_rgb, breakdown.l_thin,
                          breakdown.l_normal, breakdown.total))
    state.iteration += 1
    return breakdown


def run(config: TrainConfig, views, dense_cloud: DensePointCloud | None = None,
        initial: GaussianCloud | None = None,
        progress_every: int = 0) -> tuple[GaussianCloud, list]:
    """Full optimization: init, iterate, snap on schedule, prune at snaps.

    Returns the final cloud and the per-iteration loss history rows
    (iteration, l_rgb, l_thin, l_normal, total).
    """
    needs_guidance = config.enable_move or config.enable_rotate
    if needs_guidance and dense_cloud is None:
        raise ConfigError("guidance toggles enabled but no dense cloud given")
    if not views:
        raise ConfigError("training requires at least one view")

    if initial is None:
        if dense_cloud is None:
            raise ConfigError("no dense cloud and no initial Gaussians")
        initial = init_from_cloud(dense_cloud, config.subsample, seed=config.seed)
    if config.init_jitter > 0.0:
        rng = np.random.default_rng(config.seed + 1)
        jitter = rng.normal(scale=config.init_jitter, size=(len(initial), 3))
        initial = initial.replace(positions=initial.positions + jitter)

    state = TrainState.from_cloud(initial)
    index = guidance.build_index(dense_cloud) if needs_guidance else None
    if index is not None:
        _refresh_pairing(state, index)

    for _ in range(config.iterations):
        if index is not None:
            if maybe_snap(state, index, config):
                _prune(state, config)
                _refresh_pairing(state, index)
            elif state.iteration % config.snap_interval == 0:
                _refresh_pairing(state, index)
        train_step(state, views, config)
        if progress_every and state.iteration % progress_every == 0:
            row = state.history[-1]
            log.info("iter %d: rgb %.5f thin %.5f normal %.5f total %.5f",
                     row[0], row[1], row[2], row[3], row[4])

    return state.snapshot(), state.history


def write_loss_csv(history, path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,l_rgb,l_thin,l_normal,total\n")
        for it, rgb, thin, nrm, total in history:
            fh.write(f"{it},{rgb!r},{thin!r},{nrm!r},{total!r}\n")
