"""BiFormer blocks and the four-stage pyramid backbone.

Parameters live in an ordered ``dict[str, Tensor]`` whose key order is the
serialization manifest. Feature maps are channels-last ``[H, W, C]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .bra import BraConfig, BraParams, bra_forward
from .errors import ConfigurationError
from .tensor import (
    Tensor,
    add,
    conv2d,
    depthwise_conv2d,
    gelu,
    layer_norm,
    linear,
    mean_axis,
    reshape,
)
from .tensor import serialize
from .tensor.ops import conv_output_extent

HEAD_WIDTH = 32


@dataclass
class ModelSpec:
    name: str = "custom"
    base_channels: int = 64
    blocks: list[int] = field(default_factory=lambda: [2, 2, 8, 2])
    mlp_ratio: float = 3.0
    topk: list[int] = field(default_factory=lambda: [1, 4, 16, 49])
    partition: list[int] = field(default_factory=lambda: [7, 7, 7, 7])
    channel_mult: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    num_classes: int = 1000
    head_width: int = HEAD_WIDTH
    lce_kernel: int = 5
    stem_kernel: int = 7
    stem_stride: int = 4
    merge_kernel: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = len(self.blocks)
        if n < 1 or not (len(self.topk) == len(self.partition) == len(self.channel_mult) == n):
            raise ConfigurationError(
                "blocks, topk, partition and channel_mult must have the same non-zero length"
            )
        if self.mlp_ratio < 1:
            raise ConfigurationError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")
        for i, c in enumerate(self.stage_channels):
            if c % self.head_width:
                raise ConfigurationError(
                    f"stage {i + 1}: channels {c} not divisible by head width {self.head_width}"
                )
            s, k = self.partition[i], self.topk[i]
            if s < 1 or not 1 <= k <= s * s:
                raise ConfigurationError(
                    f"stage {i + 1}: topk must satisfy 1 <= k <= S^2 = {s * s}, got k={k}"
                )

    @property
    def num_stages(self) -> int:
        return len(self.blocks)

    @property
    def stage_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def heads(self, stage: int) -> int:
        return self.stage_channels[stage] // self.head_width

    def hidden_channels(self, stage: int) -> int:
        return int(round(self.mlp_ratio * self.stage_channels[stage]))

    def bra_config(self, stage: int) -> BraConfig:
        return BraConfig(
            partition=self.partition[stage],
            topk=self.topk[stage],
            heads=self.heads(stage),
            channels=self.stage_channels[stage],
            lce_kernel=self.lce_kernel,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def presets() -> dict[str, ModelSpec]:
    """Named model variants: three sizes plus top-k / partition ablations.

    The ablation variants keep BiFormer-T's width and depth.
    """
    tiny = dict(base_channels=64, blocks=[2, 2, 8, 2])
    return {
        "biformer-t": ModelSpec(name="biformer-t", **tiny),
        "biformer-s": ModelSpec(name="biformer-s", base_channels=64, blocks=[4, 4, 18, 4]),
        "biformer-b": ModelSpec(name="biformer-b", base_channels=96, blocks=[4, 4, 18, 4]),
        "abl-k1-2-8-32": ModelSpec(name="abl-k1-2-8-32", topk=[1, 2, 8, 32], **tiny),
        "abl-k2-8-32-49": ModelSpec(name="abl-k2-8-32-49", topk=[2, 8, 32, 49], **tiny),
        "abl-s8421": ModelSpec(name="abl-s8421", partition=[8, 4, 2, 1], topk=[2, 2, 2, 1], **tiny),
    }


def get_preset(name: str) -> ModelSpec:
    table = presets()
    if name not in table:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(table)}")
    return table[name]


# ---------------------------------------------------------------------------
# Geometry and accounting
# ---------------------------------------------------------------------------


def stage_maps(spec: ModelSpec, height: int, width: int) -> list[tuple[int, int]]:
    """Spatial extents per stage; raises naming the first offending stage."""
    factor = spec.stem_stride * 2 ** (spec.num_stages - 1)
    if height % factor or width % factor:
        raise ConfigurationError(f"input {height}x{width} not divisible by {factor}")
    pad = spec.stem_kernel // 2
    h = conv_output_extent(height, spec.stem_kernel, spec.stem_stride, pad)
    w = conv_output_extent(width, spec.stem_kernel, spec.stem_stride, pad)
    maps = []
    for i in range(spec.num_stages):
        if i > 0:
            mp = spec.merge_kernel // 2
            h = conv_output_extent(h, spec.merge_kernel, 2, mp)
            w = conv_output_extent(w, spec.merge_kernel, 2, mp)
        s = spec.partition[i]
        if h % s or w % s:
            raise ConfigurationError(
                f"stage {i + 1}: feature map {h}x{w} not divisible by partition {s}"
            )
        maps.append((h, w))
    return maps


def parameter_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered manifest of every parameter tensor."""
    chans = spec.stage_channels
    sk, mk, lk = spec.stem_kernel, spec.merge_kernel, spec.lce_kernel
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("stem.weight", (sk, sk, 3, chans[0])),
        ("stem.bias", (chans[0],)),
    ]
    for i, c in enumerate(chans):
        st = f"stage{i + 1}"
        if i > 0:
            shapes += [(f"{st}.merge.weight", (mk, mk, chans[i - 1], c)),
                       (f"{st}.merge.bias", (c,))]
        hidden = spec.hidden_channels(i)
        for b in range(spec.blocks[i]):
            p = f"{st}.block{b}"
            shapes += [
                (f"{p}.pos.weight", (3, 3, c)),
                (f"{p}.norm1.gain", (c,)),
                (f"{p}.norm1.bias", (c,)),
                (f"{p}.attn.wq", (c, c)),
                (f"{p}.attn.wk", (c, c)),
                (f"{p}.attn.wv", (c, c)),
                (f"{p}.attn.wo", (c, c)),
                (f"{p}.attn.lce", (lk, lk, c)),
                (f"{p}.norm2.gain", (c,)),
                (f"{p}.norm2.bias", (c,)),
                (f"{p}.mlp.w1", (c, hidden)),
                (f"{p}.mlp.b1", (hidden,)),
                (f"{p}.mlp.w2", (hidden, c)),
                (f"{p}.mlp.b2", (c,)),
            ]
    shapes += [
        ("norm.gain", (chans[-1],)),
        ("norm.bias", (chans[-1],)),
        ("head.weight", (chans[-1], spec.num_classes)),
        ("head.bias", (spec.num_classes,)),
    ]
    return shapes


def param_count(spec: ModelSpec) -> int:
    """Closed-form scalar parameter count."""
    chans = spec.stage_channels
    total = spec.stem_kernel ** 2 * 3 * chans[0] + chans[0]
    for i, c in enumerate(chans):
        if i > 0:
            total += spec.merge_kernel ** 2 * chans[i - 1] * c + c
        e = spec.hidden_channels(i)
        per_block = 9 * c + 4 * c + 4 * c * c + spec.lce_kernel ** 2 * c + 2 * c * e + e + c
        total += spec.blocks[i] * per_block
    return total + 2 * chans[-1] + chans[-1] * spec.num_classes + spec.num_classes


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


INIT_STD = 0.02


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float32,
                std: float = INIT_STD) -> dict[str, Tensor]:
    """Truncated-normal weights (+-2 std), zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(spec):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, std)
        params[name] = Tensor(arr, dtype=dtype)
    return params


def save_params(params: dict[str, Tensor], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, (name, t) in enumerate(params.items()):
        fname = f"{i:04d}.bin"
        serialize.save(t, d / fname)
        manifest.append({"name": name, "shape": list(t.shape), "file": fname})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_params(directory) -> dict[str, Tensor]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    params = {}
    for entry in manifest:
        t = serialize.load(d / entry["file"])
        if list(t.shape) != entry["shape"]:
            raise ConfigurationError(f"{entry['name']}: shape {t.shape} != manifest {entry['shape']}")
        params[entry["name"]] = t
    return params


@dataclass
class BlockParams:
    pos: Tensor
    norm1: tuple[Tensor, Tensor]
    attn: BraParams
    norm2: tuple[Tensor, Tensor]
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def block_params(params: dict[str, Tensor], stage: int, block: int) -> BlockParams:
    p = f"stage{stage + 1}.block{block}"
    return BlockParams(
        pos=params[f"{p}.pos.weight"],
        norm1=(params[f"{p}.norm1.gain"], params[f"{p}.norm1.bias"]),
        attn=BraParams(params[f"{p}.attn.wq"], params[f"{p}.attn.wk"], params[f"{p}.attn.wv"],
                       params[f"{p}.attn.wo"], params[f"{p}.attn.lce"]),
        norm2=(params[f"{p}.norm2.gain"], params[f"{p}.norm2.bias"]),
        w1=params[f"{p}.mlp.w1"],
        b1=params[f"{p}.mlp.b1"],
        w2=params[f"{p}.mlp.w2"],
        b2=params[f"{p}.mlp.b2"],
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def position_step(x: Tensor, pos: Tensor) -> Tensor:
    return add(x, depthwise_conv2d(x, pos))


def attention_step(x: Tensor, gain: Tensor, bias: Tensor, attn: BraParams, cfg: BraConfig,
                   trace: Optional[dict] = None) -> Tensor:
    return add(x, bra_forward(layer_norm(x, gain, bias), cfg, attn, trace=trace))


def mlp_step(x: Tensor, gain: Tensor, bias: Tensor, w1: Tensor, b1: Tensor,
             w2: Tensor, b2: Tensor) -> Tensor:
    hidden = gelu(linear(layer_norm(x, gain, bias), w1, b1))
    return add(x, linear(hidden, w2, b2))


def biformer_block(x: Tensor, params: BlockParams, cfg: BraConfig,
                   trace: Optional[dict] = None) -> Tensor:
    """Position conv, then pre-norm BRA and pre-norm MLP, each residual."""
    x = position_step(x, params.pos)
    x = attention_step(x, *params.norm1, params.attn, cfg, trace=trace)
    return mlp_step(x, *params.norm2, params.w1, params.b1, params.w2, params.b2)


def embed(x: Tensor, spec: ModelSpec, weight: Tensor, bias: Tensor, stage: int) -> Tensor:
    """Overlapped patch embedding (stage 0) or stride-2 patch merging."""
    if stage == 0:
        return add(conv2d(x, weight, spec.stem_stride, spec.stem_kernel // 2), bias)
    return add(conv2d(x, weight, 2, spec.merge_kernel // 2), bias)


def embed_params(params: dict[str, Tensor], stage: int) -> tuple[Tensor, Tensor]:
    prefix = "stem" if stage == 0 else f"stage{stage + 1}.merge"
    return params[f"{prefix}.weight"], params[f"{prefix}.bias"]


def classify(x: Tensor, gain: Tensor, bias: Tensor, weight: Tensor, head_bias: Tensor) -> Tensor:
    """Global average pool, layer norm, linear head."""
    pooled = layer_norm(mean_axis(mean_axis(x, 0), 0), gain, bias)
    logits = linear(reshape(pooled, (1, pooled.shape[0])), weight, head_bias)
    return reshape(logits, (weight.shape[1],))


def head_params(params: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return params["norm.gain"], params["norm.bias"], params["head.weight"], params["head.bias"]


def model_forward(image: Tensor, spec: ModelSpec, params: dict[str, Tensor],
                  capture: Optional[dict] = None) -> Tensor:
    """Logits ``[num_classes]`` for a channels-last image ``[H, W, 3]``.

    ``capture`` maps ``(stage, block)`` (both 0-based) to a dict that
    receives that block's routing trace, ``map_shape`` and ``config``.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f"expected an [H, W, 3] image, got {image.shape}")
    stage_maps(spec, image.shape[0], image.shape[1])
    x = image
    for i in range(spec.num_stages):
        x = embed(x, spec, *embed_params(params, i), stage=i)
        cfg = spec.bra_config(i)
        for b in range(spec.blocks[i]):
            trace = capture.get((i, b)) if capture else None
            if trace is not None:
                trace["map_shape"] = x.shape[:2]
                trace["config"] = cfg
            x = biformer_block(x, block_params(params, i, b), cfg, trace=trace)
    return classify(x, *head_params(params))


def fingerprint(logits: Tensor) -> str:
    """Bit-exact digest of a logit vector (float64 sum as a hex float)."""
    return float(np.sum(logits.data, dtype=np.float64)).hex()
