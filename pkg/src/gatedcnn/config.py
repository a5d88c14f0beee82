"""Declarative network descriptions and the derived layer plan.

A network is stem -> stages of gated bottleneck blocks -> optional final 1x1
conv -> global average pool -> linear head. Configs are JSON documents; see
``parse_config`` for the schema. ``layer_plan`` expands a config into ordered
layer geometry used by the builder, the analytical cost model, and tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .ops import conv_out_size


class ConfigError(ValueError):
    """Carries every validation violation found in a config document."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config:\n  " + "\n  ".join(self.violations))


@dataclass
class InputSpec:
    channels: int
    height: int
    width: int
    coords: bool = False  # append two normalized coordinate channels before the stem


@dataclass
class StemSpec:
    kernel: int
    out: int
    stride: int
    maxpool: bool


@dataclass
class StageSpec:
    blocks: int
    out: int
    cardinality: int  # parallel expert groups per block
    width: int  # channels per group in the 3x3 conv
    stride: int  # first block of the stage
    gated: bool


@dataclass
class FinalConvSpec:
    out: int
    kernel: int = 1
    bn_relu: bool = True


@dataclass
class HeadSpec:
    classes: int


@dataclass
class NetworkConfig:
    name: str
    input: InputSpec
    stem: StemSpec
    stages: list
    head: HeadSpec
    question_dim: int
    k: int
    seed: int
    final_conv: Optional[FinalConvSpec] = None
    gate_hidden: Optional[int] = None  # None -> question_dim
    reference_flops: dict = field(default_factory=dict)  # k -> published total, annotation only

    @property
    def gate_hidden_dim(self) -> int:
        return self.question_dim if self.gate_hidden is None else self.gate_hidden


_TOP_KEYS = {
    "name", "input", "stem", "stages", "final_conv", "head",
    "question_dim", "k", "gate_hidden", "seed", "reference_flops",
}


def _check_keys(doc: dict, allowed, path: str, violations: list) -> None:
    for key in doc:
        if key not in allowed:
            violations.append(f"{path}{key}: unknown field")


def _get_int(doc, key, path, violations, minimum=1, default=None):
    value = doc.get(key, default)
    if value is None:
        violations.append(f"{path}{key}: missing")
        return minimum
    if not isinstance(value, int) or isinstance(value, bool):
        violations.append(f"{path}{key}: expected an integer, got {value!r}")
        return minimum
    if value < minimum:
        violations.append(f"{path}{key}: must be >= {minimum}, got {value}")
    return value


def _get_bool(doc, key, path, violations, default=None):
    value = doc.get(key, default)
    if value is None:
        violations.append(f"{path}{key}: missing")
        return False
    if not isinstance(value, bool):
        violations.append(f"{path}{key}: expected a boolean, got {value!r}")
        return bool(value)
    return value


def parse_config(text: str) -> NetworkConfig:
    """Parse and validate a JSON network description.

    Raises :class:`ConfigError` listing every violation, each prefixed with
    its path into the document.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"not valid JSON: {exc}"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError(["top level must be an object"])

    violations: list = []
    _check_keys(doc, _TOP_KEYS, "", violations)

    name = doc.get("name")
    if not isinstance(name, str) or not name:
        violations.append("name: missing or not a string")
        name = "<unnamed>"

    inp_doc = doc.get("input", {})
    _check_keys(inp_doc, {"channels", "height", "width", "coords"}, "input.", violations)
    inp = InputSpec(
        channels=_get_int(inp_doc, "channels", "input.", violations),
        height=_get_int(inp_doc, "height", "input.", violations),
        width=_get_int(inp_doc, "width", "input.", violations),
        coords=_get_bool(inp_doc, "coords", "input.", violations, default=False),
    )

    stem_doc = doc.get("stem", {})
    _check_keys(stem_doc, {"kernel", "out", "stride", "maxpool"}, "stem.", violations)
    stem = StemSpec(
        kernel=_get_int(stem_doc, "kernel", "stem.", violations),
        out=_get_int(stem_doc, "out", "stem.", violations),
        stride=_get_int(stem_doc, "stride", "stem.", violations),
        maxpool=_get_bool(stem_doc, "maxpool", "stem.", violations, default=False),
    )

    stages = []
    stages_doc = doc.get("stages")
    if not isinstance(stages_doc, list) or not stages_doc:
        violations.append("stages: must be a non-empty list")
        stages_doc = []
    for i, st in enumerate(stages_doc):
        path = f"stages[{i}]."
        _check_keys(st, {"blocks", "out", "cardinality", "width", "stride", "gated"},
                    path, violations)
        stages.append(StageSpec(
            blocks=_get_int(st, "blocks", path, violations),
            out=_get_int(st, "out", path, violations),
            cardinality=_get_int(st, "cardinality", path, violations),
            width=_get_int(st, "width", path, violations),
            stride=_get_int(st, "stride", path, violations),
            gated=_get_bool(st, "gated", path, violations, default=True),
        ))

    final_conv = None
    if "final_conv" in doc:
        fc_doc = doc["final_conv"]
        _check_keys(fc_doc, {"out", "kernel", "bn_relu"}, "final_conv.", violations)
        final_conv = FinalConvSpec(
            out=_get_int(fc_doc, "out", "final_conv.", violations),
            kernel=_get_int(fc_doc, "kernel", "final_conv.", violations, default=1),
            bn_relu=_get_bool(fc_doc, "bn_relu", "final_conv.", violations, default=True),
        )

    head_doc = doc.get("head", {})
    _check_keys(head_doc, {"classes"}, "head.", violations)
    head = HeadSpec(classes=_get_int(head_doc, "classes", "head.", violations))

    question_dim = _get_int(doc, "question_dim", "", violations)
    k = _get_int(doc, "k", "", violations)
    seed = _get_int(doc, "seed", "", violations, minimum=0, default=0)
    gate_hidden = None
    if "gate_hidden" in doc:
        gate_hidden = _get_int(doc, "gate_hidden", "", violations)

    reference_flops = {}
    for key, value in (doc.get("reference_flops") or {}).items():
        try:
            reference_flops[int(key)] = float(value)
        except (TypeError, ValueError):
            violations.append(f"reference_flops.{key}: expected k -> number")

    for i, st in enumerate(stages):
        if st.gated and k > st.cardinality:
            violations.append(f"stages[{i}]: k exceeds cardinality ({k} > {st.cardinality})")

    if violations:
        raise ConfigError(violations)
    return NetworkConfig(
        name=name, input=inp, stem=stem, stages=stages, head=head,
        question_dim=question_dim, k=k, seed=seed, final_conv=final_conv,
        gate_hidden=gate_hidden, reference_flops=reference_flops,
    )


def serialize_config(cfg: NetworkConfig) -> str:
    doc = {
        "name": cfg.name,
        "input": {"channels": cfg.input.channels, "height": cfg.input.height,
                  "width": cfg.input.width, "coords": cfg.input.coords},
        "stem": {"kernel": cfg.stem.kernel, "out": cfg.stem.out,
                 "stride": cfg.stem.stride, "maxpool": cfg.stem.maxpool},
        "stages": [
            {"blocks": s.blocks, "out": s.out, "cardinality": s.cardinality,
             "width": s.width, "stride": s.stride, "gated": s.gated}
            for s in cfg.stages
        ],
        "head": {"classes": cfg.head.classes},
        "question_dim": cfg.question_dim,
        "k": cfg.k,
        "seed": cfg.seed,
    }
    if cfg.final_conv is not None:
        doc["final_conv"] = {"out": cfg.final_conv.out, "kernel": cfg.final_conv.kernel,
                             "bn_relu": cfg.final_conv.bn_relu}
    if cfg.gate_hidden is not None:
        doc["gate_hidden"] = cfg.gate_hidden
    if cfg.reference_flops:
        doc["reference_flops"] = {str(k): v for k, v in sorted(cfg.reference_flops.items())}
    return json.dumps(doc, indent=2) + "\n"


def load_config(path) -> NetworkConfig:
    return parse_config(Path(path).read_text())


def bundled_config_names() -> list:
    root = resources.files("gatedcnn") / "configs"
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_config(spec: str) -> NetworkConfig:
    """Load a config from a filesystem path, or fall back to a bundled name.

    ``configs/toy_small.json`` and plain ``toy_small`` both resolve to the
    bundled file when no such path exists on disk.
    """
    path = Path(spec)
    if path.exists():
        return load_config(path)
    name = path.name[: -len(".json")] if path.name.endswith(".json") else path.name
    candidate = resources.files("gatedcnn") / "configs" / f"{name}.json"
    if candidate.is_file():
        return parse_config(candidate.read_text())
    raise FileNotFoundError(f"no config file at '{spec}' and no bundled config '{name}'")


# ---------------------------------------------------------------------------
# Layer plan
# ---------------------------------------------------------------------------


@dataclass
class ConvPlan:
    name: str
    c_in: int
    c_out: int
    kernel: int
    stride: int
    padding: int
    h_in: int
    w_in: int
    h_out: int
    w_out: int
    bn_relu: bool = True
    kind: str = "conv"


@dataclass
class MaxPoolPlan:
    name: str
    channels: int
    h_in: int
    w_in: int
    h_out: int
    w_out: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    kind: str = "maxpool"


@dataclass
class BlockPlan:
    name: str
    c_in: int
    c_out: int
    cardinality: int
    width: int
    stride: int
    gated: bool
    has_proj: bool
    h_in: int  # reduce and controller operate at input resolution
    w_in: int
    h_out: int  # mid/expand resolution after the stride
    w_out: int
    kind: str = "block"


@dataclass
class GapPlan:
    name: str
    channels: int
    h_in: int
    w_in: int
    kind: str = "gap"


@dataclass
class LinearPlan:
    name: str
    d_in: int
    d_out: int
    kind: str = "linear"


def layer_plan(cfg: NetworkConfig, input_hw: Optional[tuple] = None) -> list:
    """Expand a config into ordered layer geometry at the given input size."""
    h, w = input_hw if input_hw is not None else (cfg.input.height, cfg.input.width)
    c = cfg.input.channels + (2 if cfg.input.coords else 0)
    plan = []

    pad = cfg.stem.kernel // 2
    ho = conv_out_size(h, cfg.stem.kernel, cfg.stem.stride, pad)
    wo = conv_out_size(w, cfg.stem.kernel, cfg.stem.stride, pad)
    plan.append(ConvPlan("stem", c, cfg.stem.out, cfg.stem.kernel, cfg.stem.stride, pad,
                         h, w, ho, wo))
    c, h, w = cfg.stem.out, ho, wo
    if cfg.stem.maxpool:
        ho = conv_out_size(h, 3, 2, 1)
        wo = conv_out_size(w, 3, 2, 1)
        plan.append(MaxPoolPlan("stem.pool", c, h, w, ho, wo))
        h, w = ho, wo

    for si, stage in enumerate(cfg.stages):
        for bi in range(stage.blocks):
            stride = stage.stride if bi == 0 else 1
            ho = conv_out_size(h, 3, stride, 1)
            wo = conv_out_size(w, 3, stride, 1)
            has_proj = (c != stage.out) or (stride != 1)
            plan.append(BlockPlan(f"stage{si}.block{bi}", c, stage.out, stage.cardinality,
                                  stage.width, stride, stage.gated, has_proj, h, w, ho, wo))
            c, h, w = stage.out, ho, wo

    if cfg.final_conv is not None:
        fc = cfg.final_conv
        pad = fc.kernel // 2
        ho = conv_out_size(h, fc.kernel, 1, pad)
        wo = conv_out_size(w, fc.kernel, 1, pad)
        plan.append(ConvPlan("final", c, fc.out, fc.kernel, 1, pad, h, w, ho, wo,
                             bn_relu=fc.bn_relu))
        c, h, w = fc.out, ho, wo

    plan.append(GapPlan("gap", c, h, w))
    plan.append(LinearPlan("head", c, cfg.head.classes))
    return plan


def stage_output_sizes(cfg: NetworkConfig, input_hw: Optional[tuple] = None) -> list:
    """Spatial output size (assumed square) after the stem, each stage, and any final conv."""
    sizes = []
    last_stage = None
    for spec in layer_plan(cfg, input_hw):
        if spec.kind == "conv":
            sizes.append(spec.h_out)
        elif spec.kind == "block":
            # a stem maxpool is folded into the first stage entry via its blocks
            stage = spec.name.split(".")[0]
            if stage == last_stage:
                sizes[-1] = spec.h_out
            else:
                sizes.append(spec.h_out)
            last_stage = stage
    return sizes
