"""Configuration schema, validation, LR schedule and seeded initialisation."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any

import torch
import yaml


TOY_ATTRIBUTES = [
    "Synthetic imagery",
    "Flat colored shapes",
    "Textured surfaces",
    "Non-overlapping objects",
    "Plain dark background",
]

PASCAL_ATTRIBUTES = [
    "Consumer-grade imagery",
    "Object-centric scenes",
    "Varied viewpoints and perspectives",
    "Diverse object scales",
    "Partial occlusions",
    "Truncated objects",
    "Moderate clutter",
]
COCO_ATTRIBUTES = [
    "Consumer-grade imagery",
    "Everyday scenes",
    "Diverse viewpoints",
    "Crowded compositions",
    "Strong occlusions",
    "Rich contextual cues",
    "Small object presence",
    "Human activity focus",
]
ADE20K_ATTRIBUTES = [
    "Scene-focused",
    "Complex spatial layouts",
    "High category diversity",
    "Varied viewpoints and perspectives",
    "High scene clutter",
    "Rich contextual relationships",
]
CITYSCAPES_ATTRIBUTES = [
    "Urban street scenes",
    "Vehicle-mounted camera",
    "Egocentric viewpoint",
    "Real-world driving conditions",
    "Structured road layouts",
    "Dynamic traffic context",
    "Outdoor environments",
    "Pedestrians and vehicles",
]
DATASET_ATTRIBUTES = {
    "toy": TOY_ATTRIBUTES,
    "pascal_voc": PASCAL_ATTRIBUTES,
    "coco": COCO_ATTRIBUTES,
    "ade20k": ADE20K_ATTRIBUTES,
    "cityscapes": CITYSCAPES_ATTRIBUTES,
}

# class 0 is background; the rest are shape classes in generator order
TOY_CLASS_NAMES = ["background", "circle", "square", "triangle", "ring", "stripe", "blob"]


@dataclass
class ModelConfig:
    num_classes: int = 6
    hierarchy_levels: int = 3
    embed_dim: int = 64
    latent_dim: int = 64
    decoder_layers: int = 9
    pixel_decoder_layers: int = 6
    prompt_tokens: int = 8
    image_size: tuple[int, int] = (64, 64)
    feature_strides: list[int] = field(default_factory=lambda: [16, 8, 4])
    num_heads: int = 4
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 48, 64])
    # component switches used by the ablation harness
    use_htqg: bool = True
    sre_mode: str = "soft"  # soft | threshold | none
    ptrm_mode: str = "ptrm"  # ptrm | crossattn | none
    prompt_mode: str = "learnable"  # learnable | fixed
    use_attributes: bool = True

    @property
    def pixel_levels(self) -> int:
        return len(self.feature_strides)

    @property
    def num_queries(self) -> int:
        return self.num_classes * self.hierarchy_levels


@dataclass
class TrainConfig:
    lr: float = 1e-4
    poly_power: float = 0.9
    warmup_iters: int = 1500
    labeled_batch: int = 8
    unlabeled_batch: int = 8
    total_iters: int = 40000
    tau: float = 0.95
    weight_decay: float = 1e-4
    lambdas: dict[str, float] = field(default_factory=lambda: {"reg": 1.0, "div": 1.0, "cmcr": 5.0})
    seg_weights: dict[str, float] = field(default_factory=lambda: {"bce": 5.0, "dice": 5.0, "cls": 2.0})
    cmcr_view_weights: dict[str, float] = field(default_factory=lambda: {"weak": 0.5, "strong": 0.1})
    cmcr_terms: list[str] = field(default_factory=lambda: ["mask", "class", "align"])
    cmcr_class_mode: str = "pairwise"  # pairwise | three_term
    pseudo_label_mode: str = "hard"  # hard | soft
    cmcr_last_layer_only: bool = False
    vl_temperature: float = 0.07
    sre_pretrain_iters: int = 300
    sre_lr: float = 1e-3
    encoder_warm_iters: int = 0
    eval_every: int = 0
    ckpt_every: int = 0
    seed: int = 0


@dataclass
class ClassSpec:
    class_id: int
    name: str
    attributes: list[str] = field(default_factory=list)
    rarity_weight: float = 1.0


@dataclass
class DataConfig:
    dataset: str = "toy"
    num_train: int = 200
    num_val: int = 200
    labeled_fraction: float = 0.05
    rare_class_boost: float = 1.0
    strong_strength: float = 1.0
    weak_strength: float = 1.0
    data_seed: int = 0  # the generated images; the labeled split follows train.seed


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_class_specs(num_classes: int, dataset: str = "toy") -> list[ClassSpec]:
    if num_classes > len(TOY_CLASS_NAMES):
        raise ValueError(f"toy data supports at most {len(TOY_CLASS_NAMES)} classes")
    attrs = DATASET_ATTRIBUTES[dataset]
    return [ClassSpec(i, TOY_CLASS_NAMES[i], list(attrs)) for i in range(num_classes)]


@dataclass
class ValidationReport:
    violations: list[tuple[str, str]] = field(default_factory=list)

    def add(self, name: str, message: str) -> None:
        self.violations.append((name, message))

    @property
    def ok(self) -> bool:
        return not self.violations

    def names(self) -> list[str]:
        return [n for n, _ in self.violations]

    def __len__(self) -> int:
        return len(self.violations)

    def __str__(self) -> str:
        if self.ok:
            return "config OK"
        return "\n".join(f"{n}: {m}" for n, m in self.violations)


def validate_config(cfg: ModelConfig, tcfg: TrainConfig, class_specs: list[ClassSpec] | None = None) -> ValidationReport:
    """Collect every violated invariant instead of stopping at the first one."""
    r = ValidationReport()
    for name in ("num_classes", "hierarchy_levels", "embed_dim", "latent_dim", "decoder_layers",
                 "pixel_decoder_layers", "prompt_tokens", "num_heads"):
        if getattr(cfg, name) < 1:
            r.add(name, f"must be a positive integer, got {getattr(cfg, name)}")
    strides = list(cfg.feature_strides)
    if not strides:
        r.add("feature_strides", "at least one pixel-feature level required")
    elif any(a <= b for a, b in zip(strides, strides[1:])):
        r.add("feature_strides", f"strides must strictly decrease coarse->fine, got {strides}")
    if cfg.hierarchy_levels > len(strides):
        r.add("hierarchy_levels", f"E={cfg.hierarchy_levels} exceeds number of pixel levels {len(strides)}")
    h, w = cfg.image_size
    if h < 1 or w < 1:
        r.add("image_size", f"must be positive, got {cfg.image_size}")
    for s in strides:
        if s < 1 or h % s or w % s:
            r.add("image_size", f"{cfg.image_size} not divisible by stride {s}")
    if len(cfg.encoder_channels) != 4:
        r.add("encoder_channels", "image encoder has exactly 4 stages")
    if max(strides, default=0) > 16 or any(s not in (2, 4, 8, 16) for s in strides):
        r.add("feature_strides", "strides must be drawn from the encoder stages {2, 4, 8, 16}")
    if cfg.embed_dim % max(cfg.num_heads, 1):
        r.add("num_heads", f"embed_dim {cfg.embed_dim} not divisible by num_heads {cfg.num_heads}")
    if cfg.sre_mode not in ("soft", "threshold", "none"):
        r.add("sre_mode", f"unknown mode {cfg.sre_mode!r}")
    if cfg.ptrm_mode not in ("ptrm", "crossattn", "none"):
        r.add("ptrm_mode", f"unknown mode {cfg.ptrm_mode!r}")
    if cfg.prompt_mode not in ("learnable", "fixed"):
        r.add("prompt_mode", f"unknown mode {cfg.prompt_mode!r}")

    if not 0.0 < tcfg.tau < 1.0:
        r.add("tau", f"must lie in (0, 1), got {tcfg.tau}")
    for k, v in tcfg.lambdas.items():
        if v < 0:
            r.add(f"lambdas.{k}", f"must be >= 0, got {v}")
    for k in ("reg", "div", "cmcr"):
        if k not in tcfg.lambdas:
            r.add(f"lambdas.{k}", "missing")
    if tcfg.warmup_iters >= tcfg.total_iters:
        r.add("warmup_iters", f"{tcfg.warmup_iters} must be < total_iters {tcfg.total_iters}")
    if tcfg.lr <= 0:
        r.add("lr", "must be positive")
    if tcfg.labeled_batch < 1:
        r.add("labeled_batch", "must be positive")
    if tcfg.unlabeled_batch < 0:
        r.add("unlabeled_batch", "must be >= 0")
    bad_terms = set(tcfg.cmcr_terms) - {"mask", "class", "align"}
    if bad_terms:
        r.add("cmcr_terms", f"unknown terms {sorted(bad_terms)}")
    if tcfg.cmcr_class_mode not in ("pairwise", "three_term"):
        r.add("cmcr_class_mode", f"unknown mode {tcfg.cmcr_class_mode!r}")
    if tcfg.pseudo_label_mode not in ("hard", "soft"):
        r.add("pseudo_label_mode", f"unknown mode {tcfg.pseudo_label_mode!r}")

    if class_specs is not None:
        if len(class_specs) != cfg.num_classes:
            r.add("class_specs", f"{len(class_specs)} specs for K={cfg.num_classes}")
        names = [c.name for c in class_specs]
        if len(set(names)) != len(names):
            r.add("class_specs", "class names must be unique")
        if any(not c.attributes for c in class_specs) and any(c.attributes for c in class_specs):
            r.add("class_specs", "attributes must be nonempty for every class of a dataset")
        if any(c.rarity_weight < 0 for c in class_specs):
            r.add("class_specs", "rarity_weight must be nonnegative")
    return r


def poly_lr(it: int, tcfg: TrainConfig) -> float:
    """Linear warm-up to ``lr`` followed by polynomial decay to zero."""
    if not 0 <= it <= tcfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {tcfg.total_iters}]")
    if tcfg.warmup_iters > 0 and it < tcfg.warmup_iters:
        return tcfg.lr * it / tcfg.warmup_iters
    span = tcfg.total_iters - tcfg.warmup_iters
    frac = (it - tcfg.warmup_iters) / span
    return tcfg.lr * max(0.0, 1.0 - frac) ** tcfg.poly_power


# --------------------------------------------------------------------------
# seeding


def stream_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(seed, name))
    return g


@torch.no_grad()
def seeded_init_(module: torch.nn.Module, seed: int, name: str) -> torch.nn.Module:
    """Re-initialise every parameter from its own named RNG stream.

    Each tensor draws from ``(seed, name.param_path)`` so the result does not
    depend on construction order or on other modules.
    """
    norm_types = (torch.nn.LayerNorm, torch.nn.GroupNorm, torch.nn.modules.batchnorm._NormBase)
    norm_weights = {
        f"{mname}.weight" if mname else "weight"
        for mname, m in module.named_modules()
        if isinstance(m, norm_types) and getattr(m, "weight", None) is not None
    }
    for pname, p in module.named_parameters():
        g = generator(seed, f"{name}.{pname}")
        if pname in norm_weights:
            p.fill_(1.0)
        elif p.dim() == 1:
            p.zero_()
        else:
            fan_in = p[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)
    return module


# --------------------------------------------------------------------------
# config files and overrides


def _coerce(template: Any, raw: Any) -> Any:
    if isinstance(raw, str):
        raw = yaml.safe_load(raw)
    if isinstance(template, bool):
        if not isinstance(raw, bool):
            raise ValueError(f"expected bool, got {raw!r}")
        return raw
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(raw, float) and raw.is_integer():
            raw = int(raw)
        if not isinstance(raw, int):
            raise ValueError(f"expected int, got {raw!r}")
        return raw
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        return tuple(raw)
    return raw


def _apply(section: Any, key: str, value: Any) -> None:
    if "." in key:
        head, rest = key.split(".", 1)
        target = getattr(section, head) if hasattr(section, head) else None
        if isinstance(target, dict):
            if rest not in target:
                raise KeyError(key)
            target[rest] = float(_coerce(1.0, value))
            return
        raise KeyError(key)
    if not dataclasses.is_dataclass(section) or key not in {f.name for f in dataclasses.fields(section)}:
        raise KeyError(key)
    setattr(section, key, _coerce(getattr(section, key), value))


def apply_override(cfg: ExperimentConfig, dotted: str, value: Any) -> None:
    """Set ``section.field[.subkey]`` on ``cfg``; raises KeyError for unknown keys."""
    if "." not in dotted:
        raise KeyError(dotted)
    section_name, key = dotted.split(".", 1)
    if section_name not in ("model", "train", "data"):
        raise KeyError(dotted)
    _apply(getattr(cfg, section_name), key, value)


def config_keys(cfg: ExperimentConfig | None = None) -> list[str]:
    cfg = cfg or ExperimentConfig()
    keys = []
    for sec in ("model", "train", "data"):
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            keys.append(f"{sec}.{f.name}")
            if isinstance(val, dict):
                keys.extend(f"{sec}.{f.name}.{k}" for k in val)
    return keys


def from_dict(d: dict[str, Any]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for sec, values in (d or {}).items():
        if sec not in ("model", "train", "data"):
            raise KeyError(sec)
        for k, v in (values or {}).items():
            if isinstance(v, dict):
                target = getattr(getattr(cfg, sec), k)
                if not isinstance(target, dict):
                    raise KeyError(f"{sec}.{k}")
                for kk, vv in v.items():
                    apply_override(cfg, f"{sec}.{k}.{kk}", vv)
            else:
                apply_override(cfg, f"{sec}.{k}", v)
    return cfg


def load_config(path: str | None, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        with open(path) as fh:
            cfg = from_dict(yaml.safe_load(fh) or {})
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        apply_override(cfg, k.strip(), v)
    return cfg


def dump_config(cfg: ExperimentConfig, path: str) -> None:
    d = cfg.to_dict()
    d["model"]["image_size"] = list(d["model"]["image_size"])
    with open(path, "w") as fh:
        yaml.safe_dump(d, fh, sort_keys=False)


def clone(cfg: ExperimentConfig) -> ExperimentConfig:
    return copy.deepcopy(cfg)
