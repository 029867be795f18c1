"""Alternating minimax training of the generator ensemble against the
shared discriminator, ablation variants, checkpointing, and inference.

Each step performs one discriminator update (adversarial loss only, power
iteration advanced once per weight) followed by one joint update of every
active generator under the weighted total objective. Steps are
deterministic given (state, batch); batches are shuffled by (seed, epoch),
so a run is reproducible end to end and resumable bit-exactly on the same
platform.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .datasets import Batch, SampleRecord, epoch_order, load_batch, make_batches
from .errors import ConfigError, NumericError, ShapeError
from .losses import LossReport, LossWeights
from .networks import DenseUNet, Discriminator, FeatureExtractor, GeneratorConfig

log = logging.getLogger("deshadow.training")

CHECKPOINT_FORMAT = "deshadow-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VariantSpec:
    """Which generators exist, what the removal prediction is, and which
    adversarial streams are scored."""

    generators: tuple[str, ...]
    prediction: str
    adv_streams: tuple[str, ...]
    ref_inputs: tuple[str, ...] = ()
    use_adv: bool = True


VARIANTS: dict[str, VariantSpec] = {
    "BASE": VariantSpec((), "input", (), use_adv=False),
    "R-GAN": VariantSpec(("res",), "rem1", ("residual",)),
    "I-GAN": VariantSpec(("illum",), "rem2", ("illumination",)),
    "S-GAN": VariantSpec(("rem",), "coarse", ("removal",)),
    "RS-GAN": VariantSpec(
        ("res", "rem", "ref"), "fine", ("removal", "residual"), ref_inputs=("coarse", "rem1")
    ),
    "IS-GAN": VariantSpec(
        ("illum", "rem", "ref"), "fine", ("removal", "illumination"), ref_inputs=("coarse", "rem2")
    ),
    "RIS-GAN1": VariantSpec(
        ("res", "rem", "illum", "ref"),
        "fine",
        (),
        ref_inputs=("coarse", "rem1", "rem2"),
        use_adv=False,
    ),
    "RIS-GAN2": VariantSpec(
        ("res", "rem", "illum", "ref"),
        "fine",
        ("removal", "residual", "illumination"),
        ref_inputs=("coarse", "rem1", "rem2"),
    ),
    "RIS-GAN": VariantSpec(
        ("res", "rem", "illum", "ref"),
        "fine",
        ("removal", "residual", "illumination"),
        ref_inputs=("coarse", "rem1", "rem2"),
    ),
}

_GEN_HEADS = {"res": "residual", "rem": "removal", "illum": "illumination", "ref": "refinement"}


@dataclass
class TrainConfig:
    image_size: int = 256
    batch_size: int = 2
    epochs: int = 10000
    lr: float = 0.001
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    variant: str = "RIS-GAN"
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    extractor_mode: str = "pretrained"
    extractor_seed: int = 0
    saturating_adv: bool = False
    refinement_raw_inputs: bool = False
    disc_norm: str = "batch"
    lr_decay_every: int = 0
    lr_decay_gamma: float = 1.0
    epoch_unit: str = "pass"  # "pass" (dataset sweeps) or "iteration" (train steps)
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.epoch_unit not in ("pass", "iteration"):
            raise ConfigError(f"unknown epoch_unit {self.epoch_unit!r}")
        spec = VARIANTS[self.variant]
        if self.refinement_raw_inputs and "ref" in spec.generators and len(spec.generators) < 4:
            raise ConfigError(
                f"refinement_raw_inputs needs all three source generators; variant {self.variant} lacks some"
            )

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: 64px, full-batch on small fixtures, offline
        perceptual features, small generators."""
        base = dict(
            image_size=64,
            batch_size=8,
            epochs=200,
            generator=GeneratorConfig.toy(),
            extractor_mode="fixed_random",
        )
        base.update(overrides)
        return cls(**base)

    @property
    def spec(self) -> VariantSpec:
        return VARIANTS[self.variant]


def make_variant(config: TrainConfig, tag: str) -> TrainConfig:
    """Rewrite a base config for an ablation tag.

    Only the tag and, for RIS-GAN2, the cross weight change; which
    generators, losses, and adversarial streams are active follows from
    the tag at run time.
    """
    if tag not in VARIANTS:
        raise ConfigError(f"unknown variant {tag!r}")
    cfg = replace(config, variant=tag, weights=replace(config.weights))
    if tag == "RIS-GAN2":
        cfg.weights.lambda4 = 0.0
    return cfg


def refinement_in_channels(config: TrainConfig) -> int:
    if config.refinement_raw_inputs:
        return 9
    return 3 * len(config.spec.ref_inputs)


class TrainState:
    """Everything a run owns: generator modules (keyed res/rem/illum/ref),
    the single shared discriminator, both optimizers, and counters."""

    def __init__(self, config: TrainConfig):
        self.config = config
        spec = config.spec
        torch.manual_seed(config.seed)
        self.generators = torch.nn.ModuleDict()
        for name in ("res", "rem", "illum", "ref"):
            if name not in spec.generators:
                continue
            in_ch = refinement_in_channels(config) if name == "ref" else 3
            self.generators[name] = DenseUNet(config.generator, _GEN_HEADS[name], in_ch)
        self.discriminator = (
            Discriminator(config.image_size, norm=config.disc_norm)
            if config.variant != "BASE"
            else None
        )
        self.extractor = (
            FeatureExtractor(config.extractor_mode, config.extractor_seed)
            if "rem" in spec.generators
            else None
        )
        gen_params = [p for g in self.generators.values() for p in g.parameters()]
        self.gen_opt = (
            torch.optim.SGD(gen_params, lr=config.lr, momentum=config.momentum)
            if gen_params
            else None
        )
        self.disc_opt = (
            torch.optim.Adam(
                self.discriminator.parameters(),
                lr=config.lr,
                betas=tuple(config.adam_betas),
                eps=config.adam_eps,
            )
            if self.discriminator is not None and spec.use_adv
            else None
        )
        self.step = 0
        self.epoch = 0

    def train_mode(self) -> None:
        self.generators.train()
        if self.discriminator is not None:
            self.discriminator.train()

    def eval_mode(self) -> None:
        self.generators.eval()
        if self.discriminator is not None:
            self.discriminator.eval()

    def dtype(self) -> torch.dtype:
        for g in self.generators.values():
            return next(g.parameters()).dtype
        return torch.float32

    def current_lr(self) -> float:
        cfg = self.config
        if cfg.lr_decay_every > 0:
            decays = self.epoch // cfg.lr_decay_every
            return cfg.lr * cfg.lr_decay_gamma**decays
        return cfg.lr


def _to_nchw(arr: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).to(dtype)


def forward_generators(state: TrainState, shadow: torch.Tensor) -> dict[str, torch.Tensor]:
    """Run all active generators and the recompositions.

    Keys that can appear: res, illum, coarse, rem1, rem2, fine,
    prediction. Recomposed images clamp to [0, 1]; the cross loss
    recomposes unclamped on its own.
    """
    cfg = state.config
    spec = cfg.spec
    out: dict[str, torch.Tensor] = {}
    if "res" in spec.generators:
        out["res"] = state.generators["res"](shadow)
        out["rem1"] = torch.clamp(shadow + out["res"], 0.0, 1.0)
    if "illum" in spec.generators:
        out["illum"] = state.generators["illum"](shadow)
        out["rem2"] = torch.clamp(shadow * out["illum"], 0.0, 1.0)
    if "rem" in spec.generators:
        out["coarse"] = state.generators["rem"](shadow)
    if "ref" in spec.generators:
        if cfg.refinement_raw_inputs:
            parts = [out["res"], out["coarse"], out["illum"]]
        else:
            parts = [out[name] for name in spec.ref_inputs]
        out["fine"] = state.generators["ref"](torch.cat(parts, dim=1))
    if spec.prediction == "input":
        out["prediction"] = shadow
    else:
        out["prediction"] = out[spec.prediction]
    return out


def _adv_pairs(
    spec: VariantSpec, outs: dict[str, torch.Tensor], gt: torch.Tensor,
    gt_res: torch.Tensor, gt_illum: torch.Tensor, detach: bool,
) -> tuple[dict, dict]:
    removal_fake = outs.get("fine", outs.get("coarse"))
    fake_by_stream = {"removal": removal_fake, "residual": outs.get("res"), "illumination": outs.get("illum")}
    real_by_stream = {"removal": gt, "residual": gt_res, "illumination": gt_illum}
    fakes = {s: fake_by_stream[s] for s in spec.adv_streams}
    reals = {s: real_by_stream[s] for s in spec.adv_streams}
    if detach:
        fakes = {k: v.detach() for k, v in fakes.items()}
    return fakes, reals


def _check_finite(value: torch.Tensor, step: int, term: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite loss at step {step}, term {term}", step=step, term=term)


def train_step(state: TrainState, batch: Batch) -> tuple[TrainState, LossReport]:
    """One discriminator update followed by one joint generator update."""
    cfg = state.config
    spec = cfg.spec
    if cfg.variant == "BASE":
        raise ConfigError("BASE performs no training")
    state.train_mode()
    dtype = state.dtype()
    shadow = _to_nchw(batch.shadow, dtype)
    gt = _to_nchw(batch.shadow_free, dtype)
    gt_res = _to_nchw(batch.gt_residual, dtype)
    gt_illum = _to_nchw(batch.gt_illumination, dtype)

    if state.gen_opt is not None:
        lr = state.current_lr()
        for group in state.gen_opt.param_groups:
            group["lr"] = lr

    outs = forward_generators(state, shadow)
    report = LossReport(step=state.step)

    # discriminator side first: fakes detached, one power iteration per weight
    if spec.use_adv and state.disc_opt is not None:
        state.discriminator.advance_power_iterations(1)
        fakes_d, reals_d = _adv_pairs(spec, outs, gt, gt_res, gt_illum, detach=True)
        _, d_loss = L.adversarial_losses(state.discriminator, fakes_d, reals_d, cfg.saturating_adv)
        _check_finite(d_loss, state.step, "adv_d")
        state.disc_opt.zero_grad()
        d_loss.backward()
        state.disc_opt.step()
        report.adv_d = d_loss.item()

    # joint generator update under the weighted total
    terms: dict[str, torch.Tensor] = {}
    if "rem" in spec.generators:
        stages = [outs[k] for k in ("fine", "coarse") if k in outs]
        fine_like, coarse_like = (stages[0], stages[-1])
        vis = L.visual_loss(fine_like, coarse_like, gt)
        percept = L.perceptual_loss(state.extractor, fine_like, coarse_like, gt)
        if len(stages) == 1:
            # single-stage variants count the lone image once, not twice
            vis = vis / 2.0
            percept = percept / 2.0
        terms["rem"] = vis + cfg.weights.beta1 * percept
        report.vis = vis.item()
        report.percept = percept.item()
    if "res" in spec.generators:
        terms["res"] = L.residual_loss(outs["res"], gt_res)
        report.res = terms["res"].item()
    if "illum" in spec.generators:
        terms["illum"] = L.illumination_loss(outs["illum"], gt_illum)
        report.illum = terms["illum"].item()
    if "res" in spec.generators or "illum" in spec.generators:
        terms["cross"] = L.cross_loss(
            cfg.weights, shadow, gt,
            pred_res=outs.get("res"), pred_illum=outs.get("illum"),
        )
        report.cross = terms["cross"].item()
    if spec.use_adv and state.discriminator is not None:
        fakes_g, _ = _adv_pairs(spec, outs, gt, gt_res, gt_illum, detach=False)
        g_loss = L.generator_adversarial_loss(state.discriminator, fakes_g, cfg.saturating_adv)
        terms["adv_g"] = g_loss
        report.adv_g = g_loss.item()

    total = L.total_loss(cfg.weights, terms)
    for name, t in terms.items():
        _check_finite(t, state.step, name)
    _check_finite(total, state.step, "total")
    if state.gen_opt is not None:
        state.gen_opt.zero_grad()
        if state.disc_opt is not None:
            state.disc_opt.zero_grad()  # g backward also reaches disc params
        total.backward()
        state.gen_opt.step()

    if "rem" in spec.generators:
        report.rem = terms["rem"].item()
    report.total = total.item()
    state.step += 1
    return state, report


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["adam_betas"] = list(d["adam_betas"])
    return d


def config_from_dict(data: dict) -> TrainConfig:
    data = copy.deepcopy(data)
    weights = data.pop("weights", {})
    generator = data.pop("generator", {})
    known = {f.name for f in TrainConfig.__dataclass_fields__.values()}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    for key in weights:
        if key not in LossWeights.__dataclass_fields__:
            raise ConfigError(f"unknown config key 'weights.{key}'")
    for key in generator:
        if key not in GeneratorConfig.__dataclass_fields__:
            raise ConfigError(f"unknown config key 'generator.{key}'")
    if "adam_betas" in data:
        data["adam_betas"] = tuple(data["adam_betas"])
    return TrainConfig(
        weights=LossWeights(**weights), generator=GeneratorConfig(**generator), **data
    )


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(state.config),
        "step": state.step,
        "epoch": state.epoch,
        "generators": {k: v.state_dict() for k, v in state.generators.items()},
        "discriminator": None
        if state.discriminator is None
        else state.discriminator.state_dict(),
        "gen_opt": None if state.gen_opt is None else state.gen_opt.state_dict(),
        "disc_opt": None if state.disc_opt is None else state.disc_opt.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint archive")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    config = config_from_dict(payload["config"])
    state = TrainState(config)
    for name, sd in payload["generators"].items():
        state.generators[name].load_state_dict(sd)
    if payload["discriminator"] is not None:
        state.discriminator.load_state_dict(payload["discriminator"])
    if payload["gen_opt"] is not None:
        state.gen_opt.load_state_dict(payload["gen_opt"])
    if payload["disc_opt"] is not None:
        state.disc_opt.load_state_dict(payload["disc_opt"])
    state.step = payload["step"]
    state.epoch = payload["epoch"]
    torch.set_rng_state(payload["torch_rng"])
    return state


def train(
    config: TrainConfig,
    records: list[SampleRecord],
    out_dir,
    resume: str | Path | None = None,
    on_epoch=None,
) -> Path:
    """Run the epoch loop; returns the final checkpoint path.

    Writes losses.csv / losses.jsonl (one LossReport per step) and a
    checkpoint every checkpoint_every epochs plus checkpoint_final.pt.
    BASE and epochs=0 write only the initialization checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        raise ConfigError("training dataset is empty")

    if resume is not None:
        state = load_checkpoint(resume)
        # architecture and optimizer settings come from the checkpoint;
        # only the loop extent may be changed when resuming
        requested = config_to_dict(config)
        effective = config_to_dict(state.config)
        for key in ("epochs", "checkpoint_every"):
            effective[key] = requested[key]
        if requested != effective:
            log.warning("resume: ignoring config differences beyond epochs/checkpoint_every")
        state.config = config_from_dict(effective)
        start_epoch = state.epoch
    else:
        state = TrainState(config)
        start_epoch = 0
    config = state.config

    final_path = out_dir / "checkpoint_final.pt"
    if config.variant == "BASE" or config.epochs == 0:
        save_checkpoint(state, final_path)
        return final_path

    csv_path = out_dir / "losses.csv"
    jsonl_path = out_dir / "losses.jsonl"
    fresh = resume is None or not csv_path.exists()
    with open(csv_path, "w" if fresh else "a") as csv_fh, open(
        jsonl_path, "w" if fresh else "a"
    ) as jsonl_fh:
        if fresh:
            csv_fh.write(LossReport.csv_header() + "\n")
        for epoch in range(start_epoch, config.epochs):
            state.epoch = epoch
            if config.epoch_unit == "iteration":
                batches = _one_iteration_batch(records, config, epoch)
            else:
                batches = make_batches(
                    records, config.batch_size, config.image_size, config.seed, epoch
                )
            for batch in batches:
                state, report = train_step(state, batch)
                csv_fh.write(report.csv_row() + "\n")
                jsonl_fh.write(report.json_line() + "\n")
            state.epoch = epoch + 1
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"checkpoint_epoch{epoch + 1:06d}.pt")
            if on_epoch is not None:
                on_epoch(state)
    save_checkpoint(state, final_path)
    return final_path


def _one_iteration_batch(records, config: TrainConfig, iteration: int):
    """epoch_unit="iteration": each "epoch" is a single step; the batch is
    drawn from a deterministic reshuffle that cycles through the data."""
    per_pass = max(1, -(-len(records) // config.batch_size))
    sweep, index = divmod(iteration, per_pass)
    order = epoch_order(len(records), config.seed, sweep)
    chunk = [records[i] for i in order[index * config.batch_size : (index + 1) * config.batch_size]]
    yield load_batch(chunk, config.image_size)


# --- inference -----------------------------------------------------------


def pad_to_multiple(x: torch.Tensor, divisor: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad (B, C, H, W) so H and W divide `divisor`; returns the
    original size for cropping back."""
    h, w = x.shape[-2:]
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph == 0 and pw == 0:
        return x, (h, w)
    left, top = pw // 2, ph // 2
    pads = (left, pw - left, top, ph - top)
    if max(pads) >= min(h, w):
        raise ShapeError(
            f"input {h}x{w} too small to pad to a multiple of {divisor}; "
            f"resize the input or use a shallower generator"
        )
    return torch.nn.functional.pad(x, pads, mode="reflect"), (h, w)


def predict_full(state: TrainState, shadow_img: np.ndarray) -> dict[str, np.ndarray]:
    """All intermediate outputs for one (H, W, 3) image, eval mode,
    arbitrary size via reflect pad + crop."""
    state.eval_mode()
    cfg = state.config
    x = torch.from_numpy(np.ascontiguousarray(shadow_img)).permute(2, 0, 1)[None].to(state.dtype())
    if cfg.variant == "BASE":
        return {"prediction": np.asarray(shadow_img, dtype=np.float32)}
    div = 2**cfg.generator.levels
    x_pad, (h, w) = pad_to_multiple(x, div)
    with torch.no_grad():
        outs = forward_generators(state, x_pad)
    result = {}
    for key, t in outs.items():
        arr = t[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)
        result[key] = arr[:h, :w, :]
    return result


def load_predictor(checkpoint_path):
    """Checkpoint -> callable mapping a shadow image to its removal result."""
    state = load_checkpoint(checkpoint_path)

    def predict(shadow_img: np.ndarray) -> np.ndarray:
        out = predict_full(state, shadow_img)["prediction"]
        return np.clip(out, 0.0, 1.0)

    predict.state = state
    return predict
