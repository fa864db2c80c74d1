"""Training loop: Adam, step-decay schedule, JSONL logging, checkpoint/resume.

Reproducibility contract: with a fixed seed and single-threaded execution,
training is a pure function of (manifest, config); the epoch shuffle is
derived from (seed, epoch), weight init from the seed, and Adam moments are
serialized in full, so a resumed run is bit-identical to an uninterrupted one.
The loop runs under the clean-image access guard: any attempt to read a
sample's clean image during training raises.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from decimal import Decimal
from pathlib import Path

import numpy as np
import torch

from . import degrade
from .loss import LossBreakdown, mixed_loss
from .model import (ModelConfig, PSLNet, PAPER_CONFIG, TOY_CONFIG,
                    ConfigurationError, init_weights, load_checkpoint,
                    save_checkpoint)
from .perception import make_perception


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; diagnostics are dumped if possible."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    lr0: float = 1e-3
    decay_every: int = 30
    decay_factor: float = 0.1
    lam: float = 0.01
    seed: int = 0
    losstype: str = "l1"
    interactions_on: bool = True
    em_on: bool = True
    texture_loss_on: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int | None = None
    checkpoint_every: int = 500
    log_every: int = 50
    num_threads: int | None = None
    pn_weights: str | None = None
    pn_seed: int | None = None
    model: ModelConfig = field(default_factory=lambda: ModelConfig())

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.losstype not in ("l1", "l2"):
            raise ValueError("losstype must be 'l1' or 'l2'")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


# Named presets: "toy" trains in minutes on CPU, "paper" matches the
# full-scale settings (batch 8, 100 epochs, lr 1e-3 decayed x0.1 / 30 epochs).
PRESETS = {
    "toy": dict(model=TOY_CONFIG, max_steps=2000, epochs=1000,
                checkpoint_every=500),
    "paper": dict(model=PAPER_CONFIG),
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kwargs = dict(PRESETS[name])
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decay schedule: lr0 * decay_factor ** floor(epoch / decay_every).

    Evaluated in decimal so that e.g. 1e-3 decayed twice is exactly 1e-5.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    k = epoch // cfg.decay_every
    return float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.decay_factor)) ** k)


class Adam:
    """Adam with bias correction, moments keyed by parameter name.

    Hand-rolled (rather than torch.optim) so the optimizer state maps 1:1
    onto the checkpoint container and resumes are bit-exact; the update rule
    mirrors torch.optim.Adam and is oracle-tested against it.
    """

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2_sqrt = math.sqrt(1.0 - self.beta2 ** self.t)
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v.sqrt() / bc2_sqrt).add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.params:
            self.m[name].copy_(state["exp_avg"][name])
            self.v[name].copy_(state["exp_avg_sq"][name])


@dataclass
class TensorBatch:
    input: torch.Tensor
    denoise_target: torch.Tensor
    removal_target: torch.Tensor


def stack_samples(samples, dtype=torch.float32) -> TensorBatch:
    """Stack TrainingSamples (or (input, dt, rt) array triples) into a batch."""
    if not samples:
        raise ValueError("batch must be nonempty")
    triples = []
    for s in samples:
        if isinstance(s, degrade.TrainingSample):
            triples.append((s.input, s.denoise_target, s.removal_target))
        else:
            triples.append(tuple(s))
    shape = triples[0][0].shape
    if any(t.shape != shape for triple in triples for t in triple):
        raise ValueError("all batch images must share one shape")

    def to_tensor(arrs):
        stacked = np.stack([np.ascontiguousarray(a.transpose(2, 0, 1)) for a in arrs])
        return torch.from_numpy(stacked).to(dtype)

    return TensorBatch(input=to_tensor([t[0] for t in triples]),
                       denoise_target=to_tensor([t[1] for t in triples]),
                       removal_target=to_tensor([t[2] for t in triples]))


@dataclass
class TrainState:
    model: PSLNet
    pn: object
    adam: Adam
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    out_dir: Path | None = None
    best: dict | None = None


def _dump_divergence(state: TrainState, breakdown: LossBreakdown) -> Path | None:
    if state.out_dir is None:
        return None
    path = Path(state.out_dir) / f"divergence_step{state.step + 1}.json"
    stats = {n: {"norm": float(p.detach().norm()),
                 "finite": bool(torch.isfinite(p).all())}
             for n, p in state.model.named_parameters()}
    payload = {"step": state.step + 1, "epoch": state.epoch,
               "lr": lr_at(state.epoch, state.config),
               "loss": {k: repr(v) for k, v in breakdown.to_floats().items()},
               "params": stats}
    path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
    return path


def train_step(state: TrainState, batch: TensorBatch,
               cfg: TrainConfig) -> LossBreakdown:
    """One forward/backward/Adam update; runs under the clean-access guard."""
    with degrade.forbid_clean_access():
        state.model.zero_grad(set_to_none=True)
        out = state.model(batch.input, interactions_on=cfg.interactions_on,
                          em_on=cfg.em_on)
        lam = cfg.lam if cfg.texture_loss_on else 0.0
        breakdown = mixed_loss(out, out.intermediates["dn_out"], batch,
                               state.pn, lam, cfg.losstype)
        if not math.isfinite(float(breakdown.total.detach())):
            dump = _dump_divergence(state, breakdown)
            raise DivergenceError(
                f"non-finite loss at step {state.step + 1}", dump_path=dump)
        breakdown.total.backward()
        state.adam.step(lr_at(state.epoch, cfg))
        state.step += 1
    return breakdown.detached()


def load_training_arrays(manifest: degrade.CorpusManifest) -> list:
    """Load (input, denoise_target, removal_target) float32 triples.

    Clean-image files are deliberately never opened here; training has no
    access to them.
    """
    data = []
    for entry in manifest.entries:
        data.append((
            degrade.load_image(manifest.resolve(entry.input)).astype(np.float32),
            degrade.load_image(manifest.resolve(entry.denoise_target)).astype(np.float32),
            degrade.load_image(manifest.resolve(entry.removal_target)).astype(np.float32),
        ))
    return data


def build_state(cfg: TrainConfig, out_dir=None) -> TrainState:
    model = PSLNet(cfg.model)
    init_weights(model, cfg.seed)
    pn = None
    if cfg.texture_loss_on and cfg.lam > 0:
        pn_seed = cfg.pn_seed if cfg.pn_seed is not None else cfg.seed + 1
        pn = make_perception(seed=pn_seed, weights_path=cfg.pn_weights)
    adam = Adam(dict(model.named_parameters()), beta1=cfg.adam_beta1,
                beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    return TrainState(model=model, pn=pn, adam=adam, config=cfg,
                      out_dir=None if out_dir is None else Path(out_dir))


def fit(manifest: degrade.CorpusManifest, cfg: TrainConfig, out_dir, *,
        resume=None) -> Path:
    """Run the full training loop over a corpus; returns the final checkpoint path.

    Writes ``train_log.jsonl`` (step, lr, and the five loss terms), periodic
    checkpoints, and ``checkpoint_final.zip`` under ``out_dir``. ``resume``
    restores weights, Adam moments, and the step counter from a checkpoint
    written against the same manifest and config.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    old_threads = torch.get_num_threads()
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    try:
        data = load_training_arrays(manifest)
        if len(data) < cfg.batch_size:
            raise ValueError(
                f"corpus has {len(data)} samples, smaller than batch size {cfg.batch_size}")
        steps_per_epoch = len(data) // cfg.batch_size

        state = build_state(cfg, out_dir)
        if resume is not None:
            restored, meta, adam_state = load_checkpoint(resume)
            if restored.config != cfg.model:
                raise ConfigurationError("resume checkpoint does not match model config")
            state.model = restored
            state.adam = Adam(dict(restored.named_parameters()),
                              beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                              eps=cfg.adam_eps)
            if adam_state is not None:
                state.adam.load_state(adam_state)
            state.step = int(meta["step"])

        budget = cfg.epochs * steps_per_epoch
        if cfg.max_steps is not None:
            budget = min(budget, cfg.max_steps)

        log_path = out_dir / "train_log.jsonl"
        log_fh = log_path.open("a" if resume is not None else "w", encoding="utf-8")
        try:
            while state.step < budget:
                epoch = state.step // steps_per_epoch
                state.epoch = epoch
                perm = degrade.derive_rng(cfg.seed, "shuffle", epoch).permutation(len(data))
                pos = state.step % steps_per_epoch
                for b in range(pos, steps_per_epoch):
                    if state.step >= budget:
                        break
                    idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                    batch = stack_samples([data[i] for i in idx])
                    breakdown = train_step(state, batch, cfg)
                    if state.step % cfg.log_every == 0 or state.step in (1, budget):
                        record = {"step": state.step, "lr": lr_at(epoch, cfg)}
                        record.update(
                            {k: v for k, v in breakdown.to_floats().items()
                             if k != "total"})
                        record["total"] = float(breakdown.total.detach())
                        log_fh.write(json.dumps(record) + "\n")
                        log_fh.flush()
                    if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 \
                            and state.step < budget:
                        save_checkpoint(out_dir / f"checkpoint_step{state.step:07d}.zip",
                                        state.model, step=state.step, epoch=state.epoch,
                                        seed=cfg.seed, optimizer=state.adam)
        finally:
            log_fh.close()

        final = out_dir / "checkpoint_final.zip"
        save_checkpoint(final, state.model, step=state.step, epoch=state.epoch,
                        seed=cfg.seed, optimizer=state.adam)
        return final
    finally:
        torch.set_num_threads(old_threads)
