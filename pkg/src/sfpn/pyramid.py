"""Synthetic fusion pyramid: scale schedules, fusion units and the model graph."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .autograd import ParamStore, Tensor, add_n, bilinear_resize, conv2d, relu

VARIANTS = ("SFPN-3", "SFPN-5", "SFPN-9")
BASE_STRIDES = (8, 16, 32)
DEFAULT_BACKBONE_WIDTHS = (16, 32, 64, 96, 128)
HEAD_INIT_STD = 0.01


@dataclass(frozen=True)
class ScaleSchedule:
    strides: tuple[int, ...]
    synthetic: tuple[bool, ...]
    variant: str

    def __len__(self) -> int:
        return len(self.strides)

    @property
    def original_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.synthetic) if not s]

    @property
    def synthetic_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.synthetic) if s]


def build_schedule(variant: str, base_strides=BASE_STRIDES) -> ScaleSchedule:
    """Stride list for an SFPN variant.

    Synthetic levels sit at 1.5x each original stride; SFPN-9 additionally
    extends half an octave below the finest and above the coarsest level.
    """
    base = tuple(int(s) for s in base_strides)
    if len(base) != 3 or any(b <= a for a, b in zip(base, base[1:])):
        raise ValueError(f"base strides must be 3 strictly increasing values, got {base}")
    if variant == "SFPN-3":
        synth: list[float] = []
    elif variant == "SFPN-5":
        synth = [1.5 * base[0], 1.5 * base[1]]
    elif variant == "SFPN-9":
        synth = [0.5 * base[0], 0.75 * base[0], 1.5 * base[0], 1.5 * base[1],
                 1.5 * base[2], 2.0 * base[2]]
    else:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    for s in synth:
        if s != int(s):
            raise ValueError(f"base strides {base} give fractional synthetic stride {s}")
    entries = sorted([(s, False) for s in base] + [(int(s), True) for s in synth])
    strides = tuple(s for s, _ in entries)
    if len(set(strides)) != len(strides):
        raise ValueError(f"synthetic strides collide with originals: {strides}")
    return ScaleSchedule(strides, tuple(f for _, f in entries), variant)


@dataclass
class FeatureLevel:
    stride: int
    map: Tensor
    synthetic: bool = False

    @property
    def size(self) -> int:
        return self.map.shape[2]


@dataclass
class ModelConfig:
    variant: str = "SFPN-3"
    input_size: int = 224
    neck_channels: int = 112
    num_classes: int = 80
    seed: int = 0
    backbone_widths: tuple[int, ...] = DEFAULT_BACKBONE_WIDTHS
    sol_enabled: bool = False
    anchors_per_cell: int = 3
    sfb_count: int = 3

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.backbone_widths) != 5:
            raise ValueError("backbone_widths needs 5 stage widths (strides 2..32)")
        if min(self.neck_channels, self.num_classes, self.sfb_count, self.anchors_per_cell) < 1:
            raise ValueError("channel, class and block counts must be positive")
        sched = build_schedule(self.variant)
        if self.input_size < max(sched.strides):
            raise ValueError(f"input_size {self.input_size} < max stride {max(sched.strides)}")
        if self.input_size % 32:
            raise ValueError("input_size must be divisible by 32")

    @property
    def schedule(self) -> ScaleSchedule:
        return build_schedule(self.variant)

    def to_json(self) -> str:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SfmNode:
    """One fusion unit: which levels feed it and which level it writes."""

    name: str
    inputs: tuple[int, ...]
    output: int


def _kaiming_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def front_inputs(schedule: ScaleSchedule) -> dict[int, tuple[int, int]]:
    """For each synthetic level, the two nearest original levels in log-stride."""
    originals = schedule.original_indices
    out = {}
    for i in schedule.synthetic_indices:
        s = schedule.strides[i]
        # stable sort on distance keeps the finer stride first on ties
        ranked = sorted(originals, key=lambda j: abs(math.log(s) - math.log(schedule.strides[j])))
        out[i] = tuple(sorted(ranked[:2]))
    return out


def sfb_wiring(num_levels: int) -> list[tuple[int, tuple[int, ...]]]:
    """(output level, input levels) per SFM in one block, in execution order.

    Odd-index levels are fused first from their even neighbours, then the
    even-index levels from the freshly updated odd ones.
    """
    if num_levels < 2:
        raise ValueError("an SFB needs at least 2 levels")
    order = list(range(1, num_levels, 2)) + list(range(0, num_levels, 2))
    wiring = []
    for i in order:
        ins = [i] + [j for j in (i - 1, i + 1) if 0 <= j < num_levels]
        wiring.append((i, tuple(ins)))
    return wiring


class SfpnModel:
    """Backbone, synthetic fusion neck and one shared detection head."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.schedule = config.schedule
        self.params = ParamStore()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        c = config.neck_channels

        def conv_unit(prefix: str, cin: int, cout: int, k: int = 3, fan_in_sum: int = 1) -> None:
            # an SFM sums fan_in_sum resized maps before its conv; shrinking the weights
            # by sqrt(fan_in_sum) keeps activation scale from compounding across blocks
            w = _kaiming_uniform(rng, (cout, cin, k, k)) / math.sqrt(fan_in_sum)
            self.params.add(prefix + ".weight", w.astype(self.dtype))
            self.params.add(prefix + ".bias", np.zeros((1, cout, 1, 1), dtype=self.dtype))

        cin = 3
        for i, w in enumerate(config.backbone_widths):
            conv_unit(f"backbone.stage{i}", cin, w)
            cin = w
        for k, stage in enumerate((2, 3, 4)):
            conv_unit(f"backbone.lateral{k}", config.backbone_widths[stage], c)

        self.front: list[SfmNode] = []
        for out_idx, ins in front_inputs(self.schedule).items():
            node = SfmNode(f"neck.front{len(self.front)}", ins, out_idx)
            conv_unit(node.name, c, c, fan_in_sum=len(ins))
            self.front.append(node)

        self.blocks: list[list[SfmNode]] = []
        wiring = sfb_wiring(len(self.schedule))
        for b in range(config.sfb_count):
            nodes = []
            for out_idx, ins in wiring:
                node = SfmNode(f"neck.sfb{b}.sfm{out_idx}", ins, out_idx)
                conv_unit(node.name, c, c, fan_in_sum=len(ins))
                nodes.append(node)
            self.blocks.append(nodes)

        head_out = config.anchors_per_cell * (5 + config.num_classes)
        # a small head starts every logit near zero, so no anchor begins saturated
        self.params.add("head.weight", rng.normal(0.0, HEAD_INIT_STD, (head_out, c, 1, 1)).astype(self.dtype))
        self.params.add("head.bias", np.zeros((1, head_out, 1, 1), dtype=self.dtype))

    # -- helpers
    def level_size(self, stride: int) -> int:
        return self.config.input_size // stride

    def sfm(self, name: str, inputs: list[FeatureLevel], stride: int) -> FeatureLevel:
        return sfm_fuse(inputs, stride, self.params[name + ".weight"], self.params[name + ".bias"],
                        self.config.input_size, stride in self.synthetic_strides)

    @property
    def synthetic_strides(self) -> set[int]:
        return {s for s, f in zip(self.schedule.strides, self.schedule.synthetic) if f}

    def head_level_indices(self, sol: bool | None = None) -> list[int]:
        if sol is None:
            sol = self.config.sol_enabled
        return list(range(len(self.schedule))) if sol else self.schedule.original_indices

    def head_strides(self, sol: bool | None = None) -> list[int]:
        return [self.schedule.strides[i] for i in self.head_level_indices(sol)]

    def count_params(self, scope: str = "total") -> int:
        return count_params(self, scope)

    def resized(self, input_size: int) -> "SfpnModel":
        """Same parameters, different input resolution."""
        cfg = replace(self.config, input_size=int(input_size))
        clone = object.__new__(SfpnModel)
        clone.__dict__.update(self.__dict__)
        clone.config = cfg
        return clone

    def astype(self, dtype) -> "SfpnModel":
        self.dtype = np.dtype(dtype)
        self.params.astype(self.dtype)
        return self

    # -- graph
    def backbone(self, image: Tensor) -> list[FeatureLevel]:
        return tiny_backbone(self, image)

    def forward(self, image: Tensor) -> list[FeatureLevel]:
        return forward(self, image)


def sfm_fuse(inputs: list[FeatureLevel], target_stride: int, weight: Tensor, bias: Tensor,
             input_size: int, synthetic: bool = False) -> FeatureLevel:
    """Resize up to three levels to the target grid, sum them, conv-3x3 + relu."""
    if not inputs:
        raise ValueError("sfm_fuse needs at least one input")
    if len(inputs) > 3:
        raise ValueError("sfm_fuse takes at most three inputs")
    chans = {lvl.map.shape[1] for lvl in inputs}
    if len(chans) != 1 or weight.shape[1] not in chans:
        raise ValueError(f"sfm_fuse channel mismatch: inputs {sorted(chans)}, conv expects {weight.shape[1]}")
    size = input_size // target_stride
    maps = []
    for lvl in inputs:
        m = lvl.map
        if m.shape[2] != size or m.shape[3] != size:
            m = bilinear_resize(m, size, size)
        maps.append(m)
    fused = relu(conv2d(add_n(maps), weight, bias, stride=1, padding=1))
    return FeatureLevel(target_stride, fused, synthetic)


def sfb_pass(model: SfpnModel, levels: list[FeatureLevel], nodes: list[SfmNode]) -> list[FeatureLevel]:
    if len(levels) < 2:
        raise ValueError("sfb_pass needs at least 2 levels")
    if len(nodes) != len(levels):
        raise ValueError("one SFM per level is required")
    cur = list(levels)
    for node in nodes:
        ins = [cur[i] for i in node.inputs]
        cur[node.output] = model.sfm(node.name, ins, cur[node.output].stride)
    return cur


def synthesize_front(model: SfpnModel, originals: list[FeatureLevel]) -> list[FeatureLevel]:
    sched = model.schedule
    orig_strides = [sched.strides[i] for i in sched.original_indices]
    if [lvl.stride for lvl in originals] != orig_strides:
        raise ValueError(f"original strides {[l.stride for l in originals]} do not match {orig_strides}")
    levels: list[FeatureLevel | None] = [None] * len(sched)
    for i, lvl in zip(sched.original_indices, originals):
        levels[i] = lvl
    for node in model.front:
        ins = [levels[i] for i in node.inputs]
        levels[node.output] = model.sfm(node.name, ins, sched.strides[node.output])
    return levels  # type: ignore[return-value]


def tiny_backbone(model: SfpnModel, image: Tensor) -> list[FeatureLevel]:
    """Five stride-2 conv stages; stages 3-5 are projected to neck width."""
    n, c, h, w = image.shape
    if c != 3:
        raise ValueError("backbone expects 3-channel images")
    if h != w or h % 32:
        raise ValueError(f"image side must be square and divisible by 32, got {h}x{w}")
    p = model.params
    x = image
    stages = []
    for i in range(len(model.config.backbone_widths)):
        x = relu(conv2d(x, p[f"backbone.stage{i}.weight"], p[f"backbone.stage{i}.bias"], stride=2, padding=1))
        stages.append(x)
    out = []
    for k, (stage, stride) in enumerate(zip(stages[2:], BASE_STRIDES)):
        lat = relu(conv2d(stage, p[f"backbone.lateral{k}.weight"], p[f"backbone.lateral{k}.bias"], 1, 1))
        out.append(FeatureLevel(stride, lat, False))
    return out


def forward(model: SfpnModel, image: Tensor) -> list[FeatureLevel]:
    if image.shape[2] != model.config.input_size:
        raise ValueError(f"image size {image.shape[2]} != configured {model.config.input_size}")
    if image.dtype != model.dtype:
        image = Tensor(image.data.astype(model.dtype), requires_grad=image.requires_grad)
    levels = synthesize_front(model, tiny_backbone(model, image))
    for nodes in model.blocks:
        levels = sfb_pass(model, levels, nodes)
    return levels


SCOPES = {
    "backbone": ("backbone.",),
    "neck": ("neck.",),
    "head": ("head.",),
    "total": None,
    "empty": (),
}


def count_params(model: SfpnModel, scope: str = "total") -> int:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    return model.params.count(SCOPES[scope])


def build_model(config: ModelConfig, dtype=np.float32) -> SfpnModel:
    return SfpnModel(config, dtype)
