"""Flat ``key = value`` run configuration with dotted keys.

Unknown keys are rejected, as is enabling a loss term the chosen stage does
not allow. Files look like::

    # comments are fine
    stage = unpaired
    gen.lr = 5e-4
    loss.adv_lin3 = off
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

STAGES = ("pretrain", "paired_no_adv", "paired_full", "unpaired")
LOSS_TERMS = ("content", "mse", "tv", "color", "lpips_plus", "dists", "adv_color", "adv_lin0", "adv_lin3")
STAGE_TERMS = {
    "pretrain": ("content", "mse", "tv"),
    "paired_no_adv": ("content", "lpips_plus", "dists", "tv", "color"),
    "paired_full": ("content", "lpips_plus", "dists", "tv", "color", "adv_lin0", "adv_lin3"),
    "unpaired": ("content", "adv_color", "adv_lin0", "adv_lin3", "tv"),
}
TOGGLES = ("auto", "on", "off")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending setting."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _opt(default, key: str, doc: str):
    return field(default=default, metadata={"key": key, "doc": doc})


def _loss(term: str):
    return _opt("auto", f"loss.{term}", f"{term} term: auto (stage default), on, or off")


@dataclass
class TrainConfig:
    stage: str = _opt("unpaired", "stage", "pretrain | paired_no_adv | paired_full | unpaired")
    arch: str = _opt("efficient", "arch", "generator backbone: efficient | robust")
    seed: int = _opt(0, "seed", "seed for weights init and batch sampling")
    threads: int = _opt(1, "threads", "torch intra-op threads; 1 gives bit-reproducible runs")
    batch_size: int = _opt(32, "batch_size", "patches per generator step")
    max_steps: int = _opt(1000, "max_steps", "generator steps in this stage")
    gen_lr: float = _opt(5e-4, "gen.lr", "generator Adam learning rate")
    disc_lr: float = _opt(1e-5, "disc.lr", "discriminator Adam learning rate")
    disc_update_period: str = _opt("10", "disc.update_period", "discriminator step every N generator steps (N or N:1)")
    beta1: float = _opt(0.5, "adam.beta1", "Adam beta1 (generator and discriminators)")
    beta2: float = _opt(0.999, "adam.beta2", "Adam beta2")
    eps: float = _opt(1e-8, "dla.eps", "floor on gradient norms in dynamic loss weighting")
    extractors: str = _opt("stub", "extractors", "stub | pretrained")
    cache_dir: str = _opt("", "cache_dir", "pretrained weight cache (default: $LITEISP_CACHE)")
    demosaic: str = _opt("bilinear", "demosaic", "reference demosaicing: bilinear | menon")
    init_checkpoint: str = _opt("", "init_checkpoint", "generator checkpoint to start from")
    gan_gamma: float = _opt(1.0, "gan.gamma", "R1/R2 penalty weight")
    gan_f: str = _opt("softplus", "gan.f", "relativistic comparison function")
    color_blur: bool = _opt(True, "color.blur", "blur images before the ViT colour path")
    kernel_size: int = _opt(21, "kernel.size", "Gaussian kernel size for colour loss and colour path")
    kernel_sigma: float = _opt(3.0, "kernel.sigma", "Gaussian kernel sigma (both axes)")
    color_hidden: str = _opt("512,256", "disc.color_hidden", "colour discriminator MLP hidden widths")
    texture_widths: str = _opt("48,96,192,192,96", "disc.texture_widths", "texture discriminator conv widths")
    texture_fc: int = _opt(1024, "disc.texture_fc", "texture discriminator FC width")
    pretrain_content: str = _opt("rgb", "pretrain.content", "pretraining content path: rgb | luminance")
    val_every: int = _opt(500, "val.every", "validation period in steps (0 disables)")
    val_metrics: str = _opt("psnr,ssim,ms_ssim,lpips", "val.metrics", "validation metrics")
    select_by: str = _opt("lpips", "val.select_by", "metric choosing the returned checkpoint: lpips | psnr")
    loss_content: str = _loss("content")
    loss_mse: str = _loss("mse")
    loss_tv: str = _loss("tv")
    loss_color: str = _loss("color")
    loss_lpips_plus: str = _loss("lpips_plus")
    loss_dists: str = _loss("dists")
    loss_adv_color: str = _loss("adv_color")
    loss_adv_lin0: str = _loss("adv_lin0")
    loss_adv_lin3: str = _loss("adv_lin3")

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError("stage", f"must be one of {STAGES}, got {self.stage!r}")
        if self.arch not in ("efficient", "robust"):
            raise ConfigError("arch", f"must be efficient or robust, got {self.arch!r}")
        if self.extractors not in ("stub", "pretrained"):
            raise ConfigError("extractors", f"must be stub or pretrained, got {self.extractors!r}")
        if self.pretrain_content not in ("rgb", "luminance"):
            raise ConfigError("pretrain.content", f"must be rgb or luminance, got {self.pretrain_content!r}")
        if self.select_by not in ("lpips", "psnr"):
            raise ConfigError("val.select_by", f"must be lpips or psnr, got {self.select_by!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps", "must be >= 0")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("adam.beta1", "Adam betas must lie in [0, 1)")
        if self.gan_gamma < 0:
            raise ConfigError("gan.gamma", "must be >= 0")
        self.disc_period()
        self.active_terms()

    def disc_period(self) -> int:
        raw = str(self.disc_update_period).strip()
        try:
            if ":" in raw:
                gen, disc = (int(v) for v in raw.split(":"))
                if disc != 1:
                    raise ValueError
                period = gen
            else:
                period = int(raw)
        except ValueError:
            raise ConfigError("disc.update_period", f"expected N or N:1, got {raw!r}") from None
        if period < 1:
            raise ConfigError("disc.update_period", "must be >= 1")
        return period

    def active_terms(self) -> tuple[str, ...]:
        legal = STAGE_TERMS[self.stage]
        active = []
        for term in LOSS_TERMS:
            toggle = getattr(self, f"loss_{term}")
            if toggle not in TOGGLES:
                raise ConfigError(f"loss.{term}", f"must be one of {TOGGLES}, got {toggle!r}")
            if term not in legal:
                if toggle == "on":
                    raise ConfigError(f"loss.{term}", f"not allowed in stage {self.stage!r}")
                continue
            if toggle != "off":
                active.append(term)
        if not active:
            raise ConfigError("loss", f"stage {self.stage!r} has no active loss terms")
        return tuple(active)

    def int_list(self, attr: str) -> tuple[int, ...]:
        return tuple(int(v) for v in str(getattr(self, attr)).split(",") if v.strip())

    def to_flat(self) -> dict[str, str]:
        return {f.metadata["key"]: _format(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{k} = {v}\n" for k, v in self.to_flat().items()))
        return path

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "TrainConfig":
        by_key = {f.metadata["key"]: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in by_key:
                raise ConfigError(key, "unknown configuration key")
            f = by_key[key]
            kwargs[f.name] = _parse(key, raw, type(f.default))
        return cls(**kwargs)


def _format(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return str(value)


def _parse(key: str, raw, kind):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def read_flat(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}", f"expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides=None, **defaults) -> TrainConfig:
    """Merge ``defaults`` < config file < ``key=value`` overrides."""
    values = {k: str(v) for k, v in defaults.items()}
    if path:
        values.update(read_flat(path))
    values.update(overrides or {})
    return TrainConfig.from_flat(values)


def describe_keys() -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.metadata['key']:<22} {_format(f.default):<18} {f.metadata['doc']}")
    return "\n".join(lines)
