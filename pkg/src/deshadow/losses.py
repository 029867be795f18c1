"""Objective terms for the alternating minimax training.

All norms reduce by the mean over every element, so the default weights
are independent of image and batch size. ||.||_1 is the mean absolute
difference, ||.||_2^2 the mean squared difference.

The generator-side total is

    lambda1 * residual + lambda2 * removal + lambda3 * illumination
    + lambda4 * cross + adversarial(generator side)

with removal = visual + beta1 * perceptual and the cross term tying the
predicted residual / illumination back to the shadow-free target through
the (unclamped) additive and multiplicative recompositions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import torch

from .errors import NumericError, ShapeError

_LOG_EPS = 1e-8

ADV_STREAMS = ("removal", "residual", "illumination")


@dataclass
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 100.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    beta1: float = 0.1
    beta2: float = 0.2


@dataclass
class LossReport:
    """Per-step scalar record; total is recomputable from the parts."""

    step: int
    vis: float = 0.0
    percept: float = 0.0
    rem: float = 0.0
    res: float = 0.0
    illum: float = 0.0
    cross: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    total: float = 0.0

    CSV_FIELDS = ("step", "vis", "percept", "rem", "res", "illum", "cross", "adv_g", "adv_d", "total")

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS)

    def csv_row(self) -> str:
        vals = [getattr(self, f) for f in self.CSV_FIELDS]
        return ",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in vals)

    def json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _check_same_shape(op: str, *tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"{op}: shape mismatch {tuple(shape)} vs {tuple(t.shape)}")


def visual_loss(fine: torch.Tensor, coarse: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """L1 consistency of both removal stages against the shadow-free target."""
    _check_same_shape("visual_loss", fine, coarse, gt)
    return (gt - fine).abs().mean() + (gt - coarse).abs().mean()


def perceptual_loss(extractor, fine, coarse, gt) -> torch.Tensor:
    """Mean squared feature distance of both stages to the target."""
    _check_same_shape("perceptual_loss", fine, coarse, gt)
    feat_gt = extractor(gt)
    loss = ((feat_gt - extractor(fine)) ** 2).mean()
    return loss + ((feat_gt - extractor(coarse)) ** 2).mean()


def removal_loss(weights: LossWeights, fine, coarse, gt, extractor) -> torch.Tensor:
    return visual_loss(fine, coarse, gt) + weights.beta1 * perceptual_loss(
        extractor, fine, coarse, gt
    )


def residual_loss(pred_res: torch.Tensor, gt_res: torch.Tensor) -> torch.Tensor:
    _check_same_shape("residual_loss", pred_res, gt_res)
    return (gt_res - pred_res).abs().mean()


def illumination_loss(pred_illum: torch.Tensor, gt_illum: torch.Tensor) -> torch.Tensor:
    _check_same_shape("illumination_loss", pred_illum, gt_illum)
    return (gt_illum - pred_illum).abs().mean()


def cross_loss(
    weights: LossWeights,
    shadow: torch.Tensor,
    gt: torch.Tensor,
    pred_res: torch.Tensor | None = None,
    pred_illum: torch.Tensor | None = None,
) -> torch.Tensor:
    """Consistency of recomposed removal images with the target.

    Compositions are deliberately unclamped here so saturated pixels keep
    their gradients; display paths clamp instead. Either branch may be
    absent (ablations drop the corresponding generator).
    """
    _check_same_shape("cross_loss", shadow, gt)
    loss = shadow.new_zeros(())
    if pred_res is not None:
        _check_same_shape("cross_loss", shadow, pred_res)
        loss = loss + (gt - (shadow + pred_res)).abs().mean()
    if pred_illum is not None:
        _check_same_shape("cross_loss", shadow, pred_illum)
        loss = loss + weights.beta2 * (gt - (shadow * pred_illum)).abs().mean()
    return loss


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(_LOG_EPS, 1.0 - _LOG_EPS))


def adversarial_losses(
    disc,
    fakes: dict[str, torch.Tensor],
    reals: dict[str, torch.Tensor],
    saturating: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Joint adversarial losses over the active streams.

    One shared discriminator scores every stream. Per stream s:

        d_loss += -mean log D(real_s) - mean log(1 - D(fake_s))
        g_loss += -mean log D(fake_s)            (non-saturating, default)
        g_loss += +mean log(1 - D(fake_s))       (saturating=True, literal minimax)

    Probabilities are clamped to [1e-8, 1 - 1e-8] before the log.
    """
    if set(fakes) != set(reals):
        raise ShapeError(f"stream mismatch: fakes {sorted(fakes)} vs reals {sorted(reals)}")
    names = [s for s in ADV_STREAMS if s in fakes]
    if not names:
        raise ShapeError("adversarial_losses: no streams given")
    # all fakes (and all reals) share one forward pass through the
    # discriminator; per-stream means are then summed
    p_fake = _scored_streams(disc, fakes, names)
    p_real = _scored_streams(disc, reals, names)
    g_loss = None
    d_loss = None
    for name in names:
        d_term = -_clamped_log(p_real[name]).mean() - _clamped_log(1.0 - p_fake[name]).mean()
        if saturating:
            g_term = _clamped_log(1.0 - p_fake[name]).mean()
        else:
            g_term = -_clamped_log(p_fake[name]).mean()
        g_loss = g_term if g_loss is None else g_loss + g_term
        d_loss = d_term if d_loss is None else d_loss + d_term
    return g_loss, d_loss


def generator_adversarial_loss(
    disc, fakes: dict[str, torch.Tensor], saturating: bool = False
) -> torch.Tensor:
    """Generator-side term alone, skipping the real-stream forward."""
    names = [s for s in ADV_STREAMS if s in fakes]
    if not names:
        raise ShapeError("generator_adversarial_loss: no streams given")
    p_fake = _scored_streams(disc, fakes, names)
    terms = []
    for name in names:
        if saturating:
            terms.append(_clamped_log(1.0 - p_fake[name]).mean())
        else:
            terms.append(-_clamped_log(p_fake[name]).mean())
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def _scored_streams(disc, tensors: dict[str, torch.Tensor], names: list[str]) -> dict[str, torch.Tensor]:
    counts = [tensors[n].shape[0] for n in names]
    probs = disc(torch.cat([tensors[n] for n in names], dim=0))
    if not torch.isfinite(probs).all():
        raise NumericError("discriminator output non-finite", term="adversarial")
    return dict(zip(names, torch.split(probs, counts)))


def total_loss(weights: LossWeights, terms: dict[str, torch.Tensor]) -> torch.Tensor:
    """Weighted generator objective; absent terms contribute nothing."""
    pieces = []
    for key, lam in (
        ("res", weights.lambda1),
        ("rem", weights.lambda2),
        ("illum", weights.lambda3),
        ("cross", weights.lambda4),
    ):
        if key in terms and terms[key] is not None:
            pieces.append(lam * terms[key])
    if terms.get("adv_g") is not None:
        pieces.append(terms["adv_g"])
    if not pieces:
        raise ShapeError("total_loss: no terms given")
    out = pieces[0]
    for p in pieces[1:]:
        out = out + p
    return out
