"""Self-supervised training: pair synthesis, optimization loop, persistence.

Every piece of per-step randomness is derived from (config.seed, step), never
from global RNG, so a resumed run replays the exact trajectory of an
uninterrupted one and fixed-seed runs are bitwise reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import yaml

from .checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    load_checkpoint,
    load_module_segments,
    load_optimizer_segments,
    optimizer_segments,
    save_checkpoint,
)
from .correspondence import masked_exemplar
from .data import PairDataset, load_manifest, save_image
from .features import default_extractor
from .geometry import TPSConfig, apply_tps, make_identity_grid, random_tps, sample
from .guidance import cycle_pass
from .losses import (
    ContextualConfig,
    LossWeights,
    boundary_iou_loss,
    contextual_loss,
    cycle_loss,
    equivariance_loss,
    mask_alignment_losses,
    perceptual_loss,
    reconstruction_loss,
    total_loss,
)
from .pipeline import ArchConfig, ModelBundle, build_models, forward_once


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces NaN/inf; carries the breakdown."""

    def __init__(self, step: int, breakdown: Dict[str, float]):
        self.step = step
        self.breakdown = breakdown
        terms = ", ".join(f"{k}={v:.6g}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at step {step}: {terms}")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    resolution: int = 256
    batch_size: int = 4
    steps: int = 1
    seed: int = 0
    optimizer_mode: str = "joint"  # or "round_robin"
    detach_cycle: bool = False
    boundary_dilation: int = 2
    checkpoint_every: int = 500
    snapshot_every: int = 500
    out_dir: str = "runs/default"
    manifest: str = ""  # dataset manifest path; CLI resolves it
    arch: ArchConfig = field(default_factory=ArchConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    tps: TPSConfig = field(default_factory=lambda: TPSConfig(points=5, sigma=0.15))
    contextual: ContextualConfig = field(default_factory=ContextualConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0 (0 emits the initial checkpoint)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.optimizer_mode not in ("joint", "round_robin"):
            raise ValueError(f"unknown optimizer mode {self.optimizer_mode!r}")


def paper_config() -> TrainConfig:
    return TrainConfig()


def desk_config() -> TrainConfig:
    """Small-enough-for-a-CPU preset: 64x64, K=4, slim towers."""
    return TrainConfig(
        resolution=64,
        batch_size=4,
        steps=2000,
        arch=ArchConfig(
            num_keypoints=4,
            internal_resolution=48,
            block_expansion=16,
            num_blocks=3,
            max_features=128,
            attention_block_expansion=16,
            attention_num_blocks=2,
            attention_max_features=64,
        ),
        # Synthesized edits = global affine (move/scale/rotate) + gentle local
        # TPS wiggle.  Per-keypoint affine warp candidates can actually fit
        # that mixture; a pure strong TPS leaves the boundary term stuck at a
        # floor no optimizer can cross (see calibration notes).
        tps=TPSConfig(points=5, sigma=0.05, affine_sigma=0.08),
        # tighter position cap keeps the pairwise distance matrices small
        contextual=ContextualConfig(max_positions=512),
    )


def config_to_dict(cfg: TrainConfig) -> dict:
    data = asdict(cfg)
    return data


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    if "arch" in data and isinstance(data["arch"], dict):
        data["arch"] = ArchConfig.from_dict(data["arch"])
    if "weights" in data and isinstance(data["weights"], dict):
        data["weights"] = LossWeights(**{k: float(v) for k, v in data["weights"].items()})
    if "tps" in data and isinstance(data["tps"], dict):
        data["tps"] = TPSConfig(**{
            k: (int(v) if k == "points" else float(v)) for k, v in data["tps"].items()
        })
    if "contextual" in data and isinstance(data["contextual"], dict):
        ctx = dict(data["contextual"])
        for key in ("layers", "layer_weights"):
            if key in ctx and isinstance(ctx[key], list):
                ctx[key] = tuple(ctx[key])
        data["contextual"] = ContextualConfig(**ctx)
    return TrainConfig(**data)


def load_train_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    """YAML config file plus dotted-key overrides (e.g. {"arch.num_keypoints": 4})."""
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    if raw.pop("preset", None) == "desk":
        base = config_to_dict(desk_config())
        base.update(raw)
        raw = base
    for key, value in (overrides or {}).items():
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# deterministic seeding
# ---------------------------------------------------------------------------

_MASK64 = (1 << 63) - 1


def derive_seed(*parts: int) -> int:
    """Multiplicative hash of the parts; stable across runs and platforms."""
    h = 0x9E3779B9
    for p in parts:
        h = (h * 0x100000001B3 + int(p) + 1) & _MASK64
    return h


# ---------------------------------------------------------------------------
# pair synthesis
# ---------------------------------------------------------------------------

def synthesize_pair(y_a: torch.Tensor, tps_cfg: TPSConfig,
                    seed: int) -> Tuple[torch.Tensor, bool]:
    """Conditional mask x_A = hard-thresholded TPS deformation of y_A.

    Returns (x_A, warning); an empty input — or a deformation that pushes the
    whole region out of frame — comes back unchanged with warning=True.
    """
    if y_a.dim() != 3 or y_a.shape[0] != 1:
        raise ValueError(f"expected (1,H,W) mask, got {tuple(y_a.shape)}")
    if y_a.sum() < 0.5:
        return y_a, True
    h, w = y_a.shape[-2:]
    tps = random_tps(tps_cfg, seed)
    grid = apply_tps(tps, make_identity_grid(h, w))
    warped = sample(y_a, grid, padding="zeros")
    x_a = (warped >= 0.5).float()
    if x_a.sum() < 0.5:
        return y_a, True
    return x_a, False


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    optimizers: List[Tuple[str, torch.optim.Optimizer, List[str]]]
    step: int = 0


def _make_optimizers(cfg: TrainConfig, bundle: ModelBundle):
    betas = (cfg.beta1, cfg.beta2)
    if cfg.optimizer_mode == "joint":
        names = [n for n, _ in bundle.named_parameters()]
        params = [p for _, p in bundle.named_parameters()]
        return [("joint", torch.optim.Adam(params, lr=cfg.learning_rate, betas=betas),
                 names)]
    optimizers = []
    for prefix, module in bundle.modules().items():
        names = [f"{prefix}/{n}" for n, _ in module.named_parameters()]
        optimizers.append((
            prefix,
            torch.optim.Adam(module.parameters(), lr=cfg.learning_rate, betas=betas),
            names,
        ))
    return optimizers


def init_state(cfg: TrainConfig) -> TrainState:
    bundle = build_models(cfg.arch, seed=cfg.seed)
    bundle.train()
    return TrainState(config=cfg, bundle=bundle,
                      optimizers=_make_optimizers(cfg, bundle))


def make_checkpoint(state: TrainState) -> Checkpoint:
    tensors = state.bundle.segments()
    for _, optimizer, names in state.optimizers:
        tensors.update(optimizer_segments(optimizer, names))
    tensors["rng/torch"] = torch.get_rng_state()
    return Checkpoint(step=state.step, config={
        "train": config_to_dict(state.config),
        "arch": state.config.arch.to_dict(),
    }, tensors=tensors)


def restore_state(state: TrainState, path) -> None:
    ckpt = load_checkpoint(path)
    saved_arch = ckpt.config.get("arch")
    if saved_arch != state.config.arch.to_dict():
        raise CheckpointFormatError(
            f"{path}: architecture mismatch — checkpoint {saved_arch}, "
            f"config {state.config.arch.to_dict()}"
        )
    for prefix, module in state.bundle.modules().items():
        load_module_segments(prefix, module, ckpt.tensors)
    for _, optimizer, names in state.optimizers:
        load_optimizer_segments(optimizer, names, ckpt.tensors)
    if "rng/torch" in ckpt.tensors:
        torch.set_rng_state(ckpt.tensors["rng/torch"].to(torch.uint8))
    state.step = ckpt.step


# ---------------------------------------------------------------------------
# the step
# ---------------------------------------------------------------------------

def synthesize_batch(masks: torch.Tensor, cfg: TrainConfig,
                     step: int) -> torch.Tensor:
    """Per-sample deterministic conditional masks for one batch."""
    out = []
    for i in range(masks.shape[0]):
        x_a, _ = synthesize_pair(masks[i], cfg.tps,
                                 derive_seed(cfg.seed, step, i, 7))
        out.append(x_a)
    return torch.stack(out)


def compute_losses(bundle: ModelBundle, cfg: TrainConfig, step: int,
                   x_a: torch.Tensor, y_a: torch.Tensor,
                   y_b: torch.Tensor) -> Dict[str, torch.Tensor]:
    out = forward_once(bundle, x_a, y_a, y_b, with_guidance=True)
    pseudo = out["pseudo"]

    def second_pass(a, b, c):
        return forward_once(bundle, a, b, c, with_guidance=False)

    y_b_cycled = cycle_pass(second_pass, x_a, y_a, y_b, pseudo,
                            detach_pseudo=cfg.detach_cycle)

    tps = random_tps(cfg.tps, derive_seed(cfg.seed, step, 11))
    l_eq = equivariance_loss(bundle.predictor, masked_exemplar(y_a, y_b), tps)

    phi = default_extractor()
    mask_i, mask_t = mask_alignment_losses(out["output_mask"], pseudo.mask, x_a)
    return {
        "eq": l_eq,
        "perc": perceptual_loss(out["output_image"], pseudo.image, phi),
        "context": contextual_loss(out["output_image"], pseudo.image,
                                   cfg.contextual, phi),
        "bound": boundary_iou_loss(out["correspondence"].warped_masks, x_a,
                                   dilation=cfg.boundary_dilation),
        "mask_i": mask_i,
        "mask_t": mask_t,
        "rec": reconstruction_loss(out["output_image"], pseudo.image),
        "cyc": cycle_loss(y_b, y_b_cycled),
    }


def train_step(state: TrainState, images: torch.Tensor,
               masks: torch.Tensor) -> Dict[str, float]:
    cfg = state.config
    x_a = synthesize_batch(masks, cfg, state.step)
    terms = compute_losses(state.bundle, cfg, state.step, x_a, masks, images)
    total, breakdown = total_loss(terms, cfg.weights)
    if not torch.isfinite(total):
        raise NonFiniteLossError(state.step, breakdown)

    for _, optimizer, _ in state.optimizers:
        optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.optimizer_mode == "joint":
        state.optimizers[0][1].step()
    else:
        state.optimizers[state.step % len(state.optimizers)][1].step()
        for _, optimizer, _ in state.optimizers:
            optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return breakdown


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def _to_rgb(t: torch.Tensor) -> torch.Tensor:
    if t.shape[0] == 3:
        return t
    return t.expand(3, -1, -1)


def save_snapshot(state: TrainState, images: torch.Tensor, masks: torch.Tensor,
                  path) -> None:
    """One PNG grid: exemplar, transported image, pseudo GT, attention maps."""
    cfg = state.config
    with torch.no_grad():
        x_a = synthesize_batch(masks, cfg, state.step)
        out = forward_once(state.bundle, x_a, masks, images, with_guidance=True)
        row_top = [images[0], out["output_image"][0], out["pseudo"].image[0]]
        attn = out["attention_transport"][0]
        row_bot = [_to_rgb(attn[i][None] / attn[i].max().clamp(min=1e-8))
                   for i in range(min(attn.shape[0], 3))]
        while len(row_bot) < len(row_top):
            row_bot.append(torch.zeros_like(row_top[0]))
        grid = torch.cat([torch.cat(row_top, dim=-1), torch.cat(row_bot, dim=-1)],
                         dim=-2)
    save_image(grid.clamp(0, 1), path)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def train_loop(cfg: TrainConfig, manifest_path, *, resume=None,
               log_cb: Optional[Callable[[dict], None]] = None):
    """Runs cfg.steps optimization steps; returns (final ckpt path, metrics)."""
    records = load_manifest(manifest_path)
    dataset = PairDataset(records, cfg.resolution)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"

    state = init_state(cfg)
    if resume is not None:
        restore_state(state, resume)

    metrics: List[dict] = []
    mode = "a" if resume is not None else "w"
    with open(metrics_path, mode) as metrics_fh:
        if state.step >= cfg.steps:
            final = out_dir / f"ckpt_{state.step:06d}.bin"
            save_checkpoint(final, make_checkpoint(state))
            return final, metrics

        while state.step < cfg.steps:
            gen = torch.Generator().manual_seed(derive_seed(cfg.seed, state.step, 3))
            images, masks = dataset.sample(cfg.batch_size, gen)
            step_before = state.step
            try:
                breakdown = train_step(state, images, masks)
            except NonFiniteLossError as exc:
                (out_dir / "nonfinite_dump.json").write_text(
                    json.dumps({"step": exc.step, "breakdown": exc.breakdown},
                               indent=2))
                raise
            record = {"step": step_before, **breakdown}
            metrics.append(record)
            metrics_fh.write(json.dumps(record) + "\n")
            metrics_fh.flush()
            if log_cb is not None:
                log_cb(record)

            at_cadence = cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0
            if at_cadence and state.step < cfg.steps:
                save_checkpoint(out_dir / f"ckpt_{state.step:06d}.bin",
                                make_checkpoint(state))
            if cfg.snapshot_every and state.step % cfg.snapshot_every == 0:
                save_snapshot(state, images, masks,
                              out_dir / f"snapshot_{state.step:06d}.png")

    final = out_dir / f"ckpt_{state.step:06d}.bin"
    save_checkpoint(final, make_checkpoint(state))
    return final, metrics
