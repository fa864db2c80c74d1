"""Mixed structural + texture loss over the self-supervised targets.

Three structural terms (denoiser vs. denoise target, upper branch vs. removal
target, fused output vs. removal target) plus two lambda-weighted texture
terms computed on frozen perception features of the upper and fused outputs
against features of the removal target. All targets are degraded references;
the true clean image never enters any term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import PslnetOutput, ShapeError


@dataclass
class LossBreakdown:
    """The five loss terms and their weighted total, kept as graph tensors."""

    l_s1: torch.Tensor
    l_s2: torch.Tensor
    l_s3: torch.Tensor
    l_t1: torch.Tensor
    l_t2: torch.Tensor
    lam: float
    total: torch.Tensor

    def to_floats(self) -> dict:
        return {"l_s1": float(self.l_s1.detach()), "l_s2": float(self.l_s2.detach()),
                "l_s3": float(self.l_s3.detach()), "l_t1": float(self.l_t1.detach()),
                "l_t2": float(self.l_t2.detach()), "total": float(self.total.detach())}

    def detached(self) -> "LossBreakdown":
        return LossBreakdown(l_s1=self.l_s1.detach(), l_s2=self.l_s2.detach(),
                             l_s3=self.l_s3.detach(), l_t1=self.l_t1.detach(),
                             l_t2=self.l_t2.detach(), lam=self.lam,
                             total=self.total.detach())


def _term(a: torch.Tensor, b: torch.Tensor, losstype: str) -> torch.Tensor:
    if losstype == "l1":
        return (a - b).abs().mean()
    if losstype == "l2":
        return ((a - b) ** 2).mean()
    raise ValueError(f"losstype must be 'l1' or 'l2', got {losstype!r}")


def mixed_loss(out: PslnetOutput, dn_out: torch.Tensor, sample, pn,
               lam: float, losstype: str = "l1") -> LossBreakdown:
    """Evaluate the five-term loss for one batch.

    ``sample`` needs ``denoise_target`` and ``removal_target`` tensors shaped
    like the outputs; ``pn`` is the frozen perception net (may be None when
    ``lam`` is 0, which skips the texture terms entirely).
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    dt, rt = sample.denoise_target, sample.removal_target
    for name, t in (("dn_out", dn_out), ("upper", out.upper), ("fused", out.fused),
                    ("denoise_target", dt), ("removal_target", rt)):
        if t.shape != dn_out.shape:
            raise ShapeError(f"{name} shape {tuple(t.shape)} does not match batch")
    l_s1 = _term(dn_out, dt, losstype)
    l_s2 = _term(out.upper, rt, losstype)
    l_s3 = _term(out.fused, rt, losstype)
    if lam > 0:
        if pn is None:
            raise ValueError("perception net required when lambda > 0")
        with torch.no_grad():  # targets carry no gradient
            f_ref = pn(rt)
        l_t1 = _term(pn(out.upper), f_ref, losstype)
        l_t2 = _term(pn(out.fused), f_ref, losstype)
    else:
        zero = dn_out.new_zeros(())
        l_t1, l_t2 = zero, zero
    total = l_s1 + l_s2 + l_s3 + lam * (l_t1 + l_t2)
    return LossBreakdown(l_s1=l_s1, l_s2=l_s2, l_s3=l_s3, l_t1=l_t1, l_t2=l_t2,
                         lam=lam, total=total)


def loss_gradient(model, pn, sample, lam: float, losstype: str = "l1", *,
                  interactions_on: bool = True, em_on: bool = True):
    """Full forward/backward pass; returns (LossBreakdown, {param name: grad}).

    The perception net is frozen, so no gradient ever reaches its weights;
    the |.| subgradient at 0 is 0.
    """
    model.zero_grad(set_to_none=True)
    out = model(sample.input, interactions_on=interactions_on, em_on=em_on)
    breakdown = mixed_loss(out, out.intermediates["dn_out"], sample, pn, lam, losstype)
    breakdown.total.backward()
    grads = {}
    for name, p in model.named_parameters():
        grads[name] = (p.grad.detach().clone() if p.grad is not None
                       else torch.zeros_like(p))
    return breakdown, grads
