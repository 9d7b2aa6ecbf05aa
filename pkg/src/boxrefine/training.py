"""Denoiser training: noisy-box pair construction and the optimization loop.

Each training pair perturbs a ground-truth box with scaled Gaussian noise
at a level sigma drawn from a log-normal, crops the scene to the context
window of the noisy box, and asks the network to predict, per point, the
displacement from the noisy-box NBV coordinates to the true-box NBV
coordinates. Cropping happens around the noisy box because at inference
only the noisy box exists.

All batch randomness derives from (seed, step), so an interrupted run
resumed from a checkpoint reproduces the uninterrupted trajectory
bitwise. Training computes in float32 for throughput; weights and Adam
state are float32 throughout.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint_full, save_checkpoint
from .denoiser import DenoiserConfig, PointBatch, init_weights, loss_and_grad, make_point_batch, noise_conditioning
from .errors import DataError, NumericError
from .fileio import atomic_write_text, dumps_canonical
from .geometry import crop_context, nbv_points
from .rng import substream
from .scene import PerturbationModel, Scene, perturb_box

_PAIR_RETRIES = 50


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 3e-4
    total_steps: int = 5000
    ln_sigma_mean: float = -1.2
    ln_sigma_std: float = 1.2
    sigma_max: float = 80.0
    perturbation: PerturbationModel = field(default_factory=PerturbationModel)
    context: float = 4.0
    seed: int = 0
    profile: str = "desk"
    log_interval: int = 50
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise DataError("learning_rate must be non-negative")
        if self.sigma_max <= 0:
            raise DataError("sigma_max must be positive")
        if self.total_steps < 1 or self.log_interval < 1 or self.checkpoint_interval < 1:
            raise DataError("step counts must be positive")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "total_steps": self.total_steps,
            "ln_sigma_mean": self.ln_sigma_mean,
            "ln_sigma_std": self.ln_sigma_std,
            "sigma_max": self.sigma_max,
            "perturbation": self.perturbation.to_dict(),
            "context": self.context,
            "seed": self.seed,
            "profile": self.profile,
            "log_interval": self.log_interval,
            "checkpoint_interval": self.checkpoint_interval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["perturbation"] = PerturbationModel.from_dict(d["perturbation"])
        return cls(**d)


PAPER_TRAIN = TrainConfig(batch_size=128, learning_rate=1e-4, total_steps=100_000, profile="paper")


@dataclass(frozen=True)
class TrainingPair:
    """Denoiser input points (NBV of the noisy box), target displacements."""

    nbv_input: np.ndarray  # (M, 3)
    target: np.ndarray  # (M, 3)
    sigma: float

    def __post_init__(self):
        if self.nbv_input.shape != self.target.shape:
            raise DataError("input and target must have equal shapes")
        if not np.all(np.isfinite(self.target)):
            raise DataError("target displacements must be finite")


def sample_sigma(config: TrainConfig, rng: np.random.Generator | None = None, seed: int | None = None) -> float:
    """Draw a noise level with ln(sigma) ~ N(ln_sigma_mean, ln_sigma_std^2)."""
    if rng is None:
        rng = substream(0 if seed is None else seed, "sigma")
    return float(np.exp(config.ln_sigma_mean + config.ln_sigma_std * rng.standard_normal()))


def make_training_pair(
    scene: Scene | np.ndarray,
    gt_box: np.ndarray,
    sigma: float,
    model: PerturbationModel,
    context: float,
    n_max: int,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
) -> TrainingPair | None:
    """Build one training pair, or None when the context crop is empty.

    The caller resamples on None. When the crop holds more than n_max
    points a seeded uniform subsample (without replacement) is taken; the
    identical point subset feeds both the input and the target.
    """
    if rng is None:
        rng = substream(0 if seed is None else seed, "pair")
    points = scene.cloud.points if isinstance(scene, Scene) else np.asarray(scene, dtype=np.float64)
    noisy = perturb_box(gt_box, sigma, model, rng=rng)
    crop = crop_context(points, noisy, context)
    if len(crop) == 0:
        return None
    nbv_in = crop.points
    idx = crop.source_indices
    if len(crop) > n_max:
        chosen = np.sort(rng.choice(len(crop), size=n_max, replace=False))
        nbv_in = nbv_in[chosen]
        idx = idx[chosen]
    world = points[idx]
    target = nbv_points(world, gt_box) - nbv_in
    return TrainingPair(nbv_input=nbv_in, target=target, sigma=sigma)


def build_batch(
    scenes: list[Scene],
    config: TrainConfig,
    dconfig: DenoiserConfig,
    step: int,
) -> tuple[PointBatch, np.ndarray, np.ndarray]:
    """Assemble the batch for one training step: (batch, targets, sigmas)."""
    rng = substream(config.seed, "batch", step)
    eligible = [i for i, s in enumerate(scenes) if len(s.gt_boxes) > 0]
    if not eligible:
        raise DataError("no scene with ground-truth boxes available for training")
    sets, targets, sigmas = [], [], []
    for _ in range(config.batch_size):
        pair = None
        for _try in range(_PAIR_RETRIES):
            scene = scenes[eligible[int(rng.integers(len(eligible)))]]
            box_idx = int(rng.integers(len(scene.gt_boxes)))
            sigma = sample_sigma(config, rng=rng)
            pair = make_training_pair(
                scene, scene.gt_boxes[box_idx], sigma, config.perturbation, config.context, dconfig.max_points, rng=rng
            )
            if pair is not None:
                break
        if pair is None:
            raise DataError(f"could not build a non-empty training pair in {_PAIR_RETRIES} tries")
        sets.append(pair.nbv_input)
        targets.append(pair.target)
        sigmas.append(pair.sigma)
    batch = make_point_batch(sets, [noise_conditioning(s) for s in sigmas], dconfig.max_points)
    padded_targets = np.zeros(batch.points.shape)
    for i, t in enumerate(targets):
        padded_targets[i, : len(t)] = t
    return batch, padded_targets, np.asarray(sigmas)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, weights: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(w, dtype=np.float32) for k, w in weights.items()},
            v={k: np.zeros_like(w, dtype=np.float32) for k, w in weights.items()},
            t=0,
        )


def adam_update(
    weights: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam step, in place; no weight decay, constant learning rate."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for k, w in weights.items():
        g = grads[k].astype(np.float32)
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def train_step(
    weights: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    dconfig: DenoiserConfig,
    batch: PointBatch,
    targets: np.ndarray,
    dtype=np.float32,
) -> tuple[float, np.ndarray]:
    """One optimizer update; returns (pre-update loss, per-element losses)."""
    loss, grads, per_elem = loss_and_grad(weights, dconfig, batch, targets, dtype=dtype, return_per_element=True)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite training loss at adam step {state.t + 1}")
    adam_update(weights, grads, state, config.learning_rate)
    return loss, per_elem


def config_hash(config: TrainConfig, dconfig: DenoiserConfig) -> str:
    payload = dumps_canonical({"train": config.to_dict(), "denoiser": dconfig.to_dict()})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _sigma_buckets(config: TrainConfig) -> tuple[float, float]:
    # tercile split of the training log-normal
    lo = math.exp(config.ln_sigma_mean - 0.4307 * config.ln_sigma_std)
    hi = math.exp(config.ln_sigma_mean + 0.4307 * config.ln_sigma_std)
    return lo, hi


@dataclass
class LossRow:
    step: int
    loss: float
    loss_sigma_lo: float
    loss_sigma_mid: float
    loss_sigma_hi: float


def write_loss_curve(path: Path, rows: list[LossRow]) -> None:
    lines = ["step,loss,loss_sigma_lo,loss_sigma_mid,loss_sigma_hi"]
    for r in rows:
        lines.append(
            f"{r.step},{r.loss:.8g},{r.loss_sigma_lo:.8g},{r.loss_sigma_mid:.8g},{r.loss_sigma_hi:.8g}"
        )
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def latest_checkpoint(out_dir: Path) -> Path | None:
    out_dir = Path(out_dir)
    candidates = sorted(out_dir.glob("checkpoint_step*.ckpt"))
    return candidates[-1] if candidates else None


def train_loop(
    config: TrainConfig,
    dconfig: DenoiserConfig,
    scenes: list[Scene],
    out_dir: Path,
    resume: bool = False,
    progress: bool = False,
    stop_after: int | None = None,
) -> tuple[dict[str, np.ndarray], list[LossRow]]:
    """Run (or resume) training; writes periodic checkpoints and a loss CSV.

    On a non-finite loss the loop aborts with NumericError; the last
    periodic checkpoint stays on disk as the last-good state. stop_after
    simulates an interruption after that many steps (no final checkpoint
    is written), which a later resume=True run picks up from the last
    periodic checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config, dconfig)

    start_step = 0
    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is not None:
            weights, stored_config, extras, aux = load_checkpoint_full(ckpt)
            if stored_config != dconfig:
                raise DataError(f"{ckpt}: checkpoint config does not match the requested run")
            if extras.get("config_hash") != chash:
                raise DataError(f"{ckpt}: checkpoint belongs to a different training config")
            state = AdamState(
                m={k[7:]: v for k, v in aux.items() if k.startswith("adam.m.")},
                v={k[7:]: v for k, v in aux.items() if k.startswith("adam.v.")},
                t=int(extras["adam_t"]),
            )
            start_step = int(extras["step"])
        else:
            weights = init_weights(dconfig, config.seed)
            state = AdamState.fresh(weights)
    else:
        weights = init_weights(dconfig, config.seed)
        state = AdamState.fresh(weights)

    lo_edge, hi_edge = _sigma_buckets(config)
    rows: list[LossRow] = []
    acc = {"loss": 0.0, "n": 0, "lo": [0.0, 0], "mid": [0.0, 0], "hi": [0.0, 0]}

    def flush(step):
        if acc["n"] == 0:
            return
        rows.append(
            LossRow(
                step=step,
                loss=acc["loss"] / acc["n"],
                loss_sigma_lo=acc["lo"][0] / acc["lo"][1] if acc["lo"][1] else float("nan"),
                loss_sigma_mid=acc["mid"][0] / acc["mid"][1] if acc["mid"][1] else float("nan"),
                loss_sigma_hi=acc["hi"][0] / acc["hi"][1] if acc["hi"][1] else float("nan"),
            )
        )
        acc["loss"] = 0.0
        acc["n"] = 0
        for key in ("lo", "mid", "hi"):
            acc[key] = [0.0, 0]

    def save(step, name=None):
        aux = {f"adam.m.{k}": v for k, v in state.m.items()}
        aux.update({f"adam.v.{k}": v for k, v in state.v.items()})
        extras = {"step": step, "adam_t": state.t, "config_hash": chash}
        save_checkpoint(weights, dconfig, out_dir / (name or f"checkpoint_step{step:07d}.ckpt"), extras=extras, aux_tensors=aux)

    for step in range(start_step, config.total_steps):
        if stop_after is not None and step >= stop_after:
            write_loss_curve(out_dir / "loss_curve.csv", rows)
            return weights, rows
        batch, targets, sigmas = build_batch(scenes, config, dconfig, step)
        try:
            loss, per_elem = train_step(weights, state, config, dconfig, batch, targets)
        except NumericError:
            # leave the last periodic checkpoint as the last-good state
            write_loss_curve(out_dir / "loss_curve.csv", rows)
            raise
        acc["loss"] += loss
        acc["n"] += 1
        for s, le in zip(sigmas, per_elem):
            key = "lo" if s < lo_edge else ("mid" if s < hi_edge else "hi")
            acc[key][0] += float(le)
            acc[key][1] += 1
        if (step + 1) % config.log_interval == 0:
            flush(step + 1)
            if progress:
                print(f"step {step + 1}/{config.total_steps} loss {rows[-1].loss:.5f}", flush=True)
        if (step + 1) % config.checkpoint_interval == 0:
            save(step + 1)

    flush(config.total_steps)
    save(config.total_steps, name="checkpoint_final.ckpt")
    write_loss_curve(out_dir / "loss_curve.csv", rows)
    atomic_write_text(
        out_dir / "train_config.json",
        dumps_canonical({"train": config.to_dict(), "denoiser": dconfig.to_dict(), "config_hash": chash}) + "\n",
    )
    return weights, rows


def read_loss_curve(path: Path) -> list[LossRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                LossRow(
                    step=int(rec["step"]),
                    loss=float(rec["loss"]),
                    loss_sigma_lo=float(rec["loss_sigma_lo"]),
                    loss_sigma_mid=float(rec["loss_sigma_mid"]),
                    loss_sigma_hi=float(rec["loss_sigma_hi"]),
                )
            )
    return rows
