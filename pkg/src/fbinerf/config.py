"""Run configuration: a flat, sectioned INI file mapped onto typed configs.

Sections and keys (all optional; defaults shown by `sample_config()`):

    [run]        mode, seed, threads, depth_init, constant_depth, scale_align
    [feature]    levels, blur_sigma, boundary
    [optimizer]  every OptimizerConfig field except `feature`;
                 gate_weights takes a .npy path
    [loss]       alpha, beta (number or "default")
    [field]      resolution, bounds_min, bounds_max, iterations, lr,
                 n_samples, rays_per_batch, background, eval_every,
                 patience, init_density, init_color
    [synth]      SceneSpec fields except `kind` (taken from run.mode);
                 primitives use a small inline syntax, "|" separated:
                 "sphere 0 0 0 1 7 | plane 0 -1.6 0 0 1 0 3 | box 0 0 0 .5 .5 .5 4"

Unknown sections or keys raise ConfigError so typos fail loudly.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, InvalidSpec
from .features import FeatureConfig
from .optimizer import OptimizerConfig, load_gate_weights
from .synth import Box, Plane, SceneSpec, Sphere

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.85
    beta: float | None = None  # None picks the per-mode default schedule rate


@dataclass(frozen=True)
class FieldConfig:
    resolution: int = 64
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)
    iterations: int = 400
    lr: float = 0.1
    n_samples: int = 64
    rays_per_batch: int = 8192
    background: tuple = (0.0, 0.0, 0.0)
    eval_every: int = 25
    patience: int = 20
    init_density: float = 0.01
    init_color: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    mode: str = "pinhole"
    seed: int = 0
    threads: int = 0  # 0 keeps the BLAS default
    depth_init: str = "constant"
    constant_depth: float = 2.0
    scale_align: bool = True
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    field_cfg: FieldConfig = field(default_factory=FieldConfig)
    synth: SceneSpec = field(default_factory=lambda: SceneSpec(kind="pinhole"))

    def __post_init__(self):
        if self.mode not in ("pinhole", "fisheye"):
            raise ConfigError(f"mode must be pinhole or fisheye, got {self.mode!r}")
        if self.depth_init not in ("constant", "priors", "ground_truth"):
            raise ConfigError(f"unknown depth_init {self.depth_init!r}")


_TRUE = {"1", "yes", "true", "on"}
_FALSE = {"0", "no", "false", "off"}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_tuple(raw: str, template: tuple) -> tuple:
    parts = raw.replace(",", " ").split()
    if len(parts) != len(template):
        raise ValueError(f"expected {len(template)} values, got {len(parts)}")
    cast = int if all(isinstance(x, int) for x in template) else float
    return tuple(cast(p) for p in parts)


def parse_primitives(raw: str) -> tuple:
    """Parse the inline primitive list syntax (see module docstring)."""
    prims = []
    for chunk in raw.split("|"):
        parts = chunk.split()
        if not parts:
            continue
        kind, vals = parts[0].lower(), [float(x) for x in parts[1:]]
        if kind == "sphere" and len(vals) == 5:
            prims.append(Sphere(tuple(vals[0:3]), vals[3], int(vals[4])))
        elif kind == "plane" and len(vals) == 7:
            prims.append(Plane(tuple(vals[0:3]), tuple(vals[3:6]), int(vals[6])))
        elif kind == "box" and len(vals) == 7:
            prims.append(Box(tuple(vals[0:3]), tuple(vals[3:6]), int(vals[6])))
        else:
            raise ValueError(f"bad primitive entry {chunk.strip()!r}")
    return tuple(prims)


def _coerce_section(cls, section_name: str, items: dict, special=None):
    """Build kwargs for dataclass `cls` from raw string items."""
    special = special or {}
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key in special:
            try:
                kwargs[key] = special[key](raw)
            except (ValueError, OSError) as exc:
                raise ConfigError(
                    f"bad value for {key!r} in section [{section_name}]: {exc}"
                ) from exc
            continue
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
        cur = getattr(defaults, key)
        try:
            if isinstance(cur, bool):
                kwargs[key] = _parse_bool(raw)
            elif isinstance(cur, int):
                kwargs[key] = int(raw)
            elif isinstance(cur, float):
                kwargs[key] = float(raw)
            elif isinstance(cur, tuple):
                kwargs[key] = _parse_tuple(raw, cur)
            elif isinstance(cur, str):
                kwargs[key] = raw.strip()
            else:
                raise ConfigError(
                    f"key {key!r} in section [{section_name}] cannot be set from a file"
                )
        except ValueError as exc:
            raise ConfigError(
                f"bad value for {key!r} in section [{section_name}]: {exc}"
            ) from exc
    return kwargs


_SECTIONS = ("run", "feature", "optimizer", "loss", "field", "synth")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=(";", "#")
    )
    parser.optionxform = str  # keep keys case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")

    def items(section):
        return dict(parser.items(section)) if parser.has_section(section) else {}

    run_kwargs = _coerce_section(RunConfig, "run", items("run"))
    feature = FeatureConfig(**_coerce_section(FeatureConfig, "feature", items("feature")))

    def beta_special(raw):
        raw = raw.strip().lower()
        return None if raw in ("default", "none", "") else float(raw)

    loss = LossConfig(
        **_coerce_section(LossConfig, "loss", items("loss"), special={"beta": beta_special})
    )
    opt_items = items("optimizer")
    if "feature" in opt_items:
        raise ConfigError("set feature options in the [feature] section")
    opt_kwargs = _coerce_section(
        OptimizerConfig,
        "optimizer",
        opt_items,
        special={"gate_weights": lambda raw: load_gate_weights(raw.strip())},
    )
    optimizer = OptimizerConfig(feature=feature, **opt_kwargs)
    field_cfg = FieldConfig(**_coerce_section(FieldConfig, "field", items("field")))

    synth_items = items("synth")
    if "kind" in synth_items:
        raise ConfigError("set the camera kind via run.mode, not [synth] kind")
    synth_kwargs = _coerce_section(
        SceneSpec,
        "synth",
        synth_items,
        special={"primitives": parse_primitives},
    )
    mode = run_kwargs.get("mode", RunConfig().mode)
    try:
        synth = SceneSpec(kind=mode, **synth_kwargs)
    except InvalidSpec as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        feature=feature,
        optimizer=optimizer,
        loss=loss,
        field_cfg=field_cfg,
        synth=synth,
        **run_kwargs,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def sample_config() -> str:
    """A fully commented config with every default spelled out."""
    return """\
# fbinerf run configuration. Every key is optional; values below are the
# defaults. Unknown keys are rejected.

[run]
mode = pinhole            ; pinhole | fisheye
seed = 0
threads = 0               ; 0 keeps the BLAS default thread count
depth_init = constant     ; constant | priors | ground_truth
constant_depth = 2.0
scale_align = true        ; rescale priors to the per-frame median depth

[feature]
levels = 3
blur_sigma = 1.5
boundary = reflect        ; reflect | wrap

[optimizer]
lr_pose = 0.01
lr_depth = 0.001
lr_distortion = 0.001
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
gate_min = 0.1
; gate_weights = weights.npy
trust_rot = 0.05
trust_trans = 0.05
lam = 0.5                 ; pose-smoothness weight
window = 8
iterations = 100
patience = 20
plateau = 0
grad_tol = 0.0
alternation = 1
neighbors_k = 2
grad_stride = 1
level = 0
depth_source = hypotheses ; hypotheses | ground_truth | estimate
depth_range = 0.5 8.0
num_hypotheses = 32
optimize_distortion = false
min_depth = 0.001

[loss]
alpha = 0.85
beta = default            ; schedule rate; "default" = -1e4 pinhole / -1e3 fisheye

[field]
resolution = 64
bounds_min = -1 -1 -1
bounds_max = 1 1 1
iterations = 400
lr = 0.1
n_samples = 64
rays_per_batch = 8192
background = 0 0 0
eval_every = 25
patience = 20
init_density = 0.01
init_color = 0.5

[synth]
n_cameras = 8
image_size = 64
focal = 40.0
distortion = 0 0 0
layout = ring             ; ring | arc
radius = 3.0
height = 0.0
arc_degrees = 120.0
look_at = 0 0 0
face_outward = false
primitives = sphere 0 0 0 1 7 | plane 0 -1.6 0 0 1 0 3
background = 0 0 0
textureless = false
seed = 0
min_visible_fraction = 0.5
"""
