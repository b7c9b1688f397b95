"""Multitask architecture: a 9-block 1-D conv backbone with two MLP heads.

The gait-phase head reads the flattened output of block 9 (50 x 33); the
terrain head reads block 2 (20 x 47). Blocks 1-2 are the same Python
objects in both networks, so their weights share storage.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFile, IncompatibleWeights, InvalidConfig
from .nncore import BatchNorm1d, Conv1d, Flatten, Layer, Linear, MaxPool1d, Param, ReLU, Sequential, softmax

INPUT_SHAPE = (6, 200, 1)
N_TERRAINS = 3
TC_TAP_BLOCK = 2


@dataclass(frozen=True)
class ConvBlockSpec:
    in_ch: int
    out_ch: int
    kernel: int
    pool: bool
    in_len: int

    @property
    def out_len(self) -> int:
        n = self.in_len - self.kernel + 1
        return n // 2 if self.pool else n

    @property
    def in_size(self) -> tuple[int, int, int]:
        return (self.in_ch, self.in_len, 1)

    @property
    def out_size(self) -> tuple[int, int, int]:
        return (self.out_ch, self.out_len, 1)


def backbone_spec() -> list[ConvBlockSpec]:
    """Block rows of the feature network; in_len is chained from the 200-record input."""
    rows = [(6, 10, 5, True), (10, 20, 5, True)] + [
        (20, 20, 3, False), (20, 30, 3, False), (30, 30, 3, False),
        (30, 40, 3, False), (40, 40, 3, False), (40, 50, 3, False), (50, 50, 3, False),
    ]
    specs = []
    length = INPUT_SHAPE[1]
    for ic, oc, k, pool in rows:
        spec = ConvBlockSpec(ic, oc, k, pool, length)
        specs.append(spec)
        length = spec.out_len
    return specs


@dataclass(frozen=True)
class HeadSpec:
    input_features: int
    hidden: tuple[int, ...]
    output: int
    output_activation: str  # identity | relu | softmax

    def __post_init__(self):
        if self.output_activation not in ("identity", "relu", "softmax"):
            raise InvalidConfig(f"unknown output activation {self.output_activation!r}")


def gpr_head_spec(output_activation: str = "identity", hidden: tuple[int, ...] = (128, 64)) -> HeadSpec:
    last = backbone_spec()[-1]
    return HeadSpec(last.out_ch * last.out_len, tuple(hidden), 2, output_activation)


def tc_head_spec(hidden: tuple[int, ...] = (64,)) -> HeadSpec:
    tap = backbone_spec()[TC_TAP_BLOCK - 1]
    return HeadSpec(tap.out_ch * tap.out_len, tuple(hidden), N_TERRAINS, "softmax")


def mlp_head_spec(hidden: tuple[int, ...] = (64,)) -> HeadSpec:
    return HeadSpec(INPUT_SHAPE[0] * INPUT_SHAPE[1], tuple(hidden), N_TERRAINS, "softmax")


class ConvBlock(Sequential):
    """conv -> batch norm -> ReLU -> (2x1 max-pool)."""

    def __init__(self, spec: ConvBlockSpec, rng: np.random.Generator):
        self.spec = spec
        self.conv = Conv1d(spec.in_ch, spec.out_ch, spec.kernel, rng, bias=False)
        self.bn = BatchNorm1d(spec.out_ch)
        layers: list[Layer] = [self.conv, self.bn, ReLU()]
        if spec.pool:
            layers.append(MaxPool1d())
        super().__init__(layers)

    def backward(self, grad, need_x=True):
        for layer in reversed(self.layers[1:]):
            grad = layer.backward(grad)
        return self.conv.backward(grad, need_x)

    def named_params(self, prefix: str) -> dict[str, Param]:
        return {
            f"{prefix}.conv.weight": self.conv.weight,
            f"{prefix}.bn.gamma": self.bn.gamma,
            f"{prefix}.bn.beta": self.bn.beta,
        }


class Head(Sequential):
    def __init__(self, spec: HeadSpec, rng: np.random.Generator):
        self.spec = spec
        widths = [spec.input_features, *spec.hidden, spec.output]
        self.fcs = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        layers: list[Layer] = [Flatten()]
        for i, fc in enumerate(self.fcs):
            layers.append(fc)
            if i < len(self.fcs) - 1 or spec.output_activation == "relu":
                layers.append(ReLU())
        super().__init__(layers)

    def named_params(self, prefix: str) -> dict[str, Param]:
        out = {}
        for i, fc in enumerate(self.fcs, start=1):
            out[f"{prefix}.fc{i}.weight"] = fc.weight
            out[f"{prefix}.fc{i}.bias"] = fc.bias
        return out


class Network:
    """A stack of conv blocks followed by one head.

    `forward` returns the raw head output (logits for classification heads);
    `predict` runs in eval mode and applies softmax where the head calls for it.
    """

    def __init__(self, blocks: list[ConvBlock], head: Head, task: str, head_name: str):
        self.blocks = list(blocks)
        self.head = head
        self.task = task
        self.head_name = head_name
        self._skip_blocks_backward = False

    # -- structure
    def named_params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for i, blk in enumerate(self.blocks, start=1):
            out.update(blk.named_params(f"block{i}"))
        out.update(self.head.named_params(self.head_name))
        for name, p in out.items():
            p.name = name
        return out

    def params(self) -> list[Param]:
        return list(self.named_params().values())

    def batchnorms(self) -> dict[str, BatchNorm1d]:
        return {f"block{i}.bn": blk.bn for i, blk in enumerate(self.blocks, start=1)}

    def spec(self) -> dict:
        return {
            "task": self.task,
            "blocks": [asdict(b.spec) for b in self.blocks],
            "head_name": self.head_name,
            "head": asdict(self.head.spec),
        }

    # -- compute
    @staticmethod
    def _prep(x: np.ndarray) -> np.ndarray:
        """(B, 6, 200, 1), (B, 6, 200) or one (6, 200, 1) tensor -> channels-last (B, 200, 6)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3 and x.shape[-1] == 1:
            x = x[None]
        if x.ndim == 4:
            x = x[..., 0]
        return np.ascontiguousarray(x.transpose(0, 2, 1))

    def _run_blocks(self, x, train, update_stats):
        h = self._prep(x)
        for blk in self.blocks:
            h = blk.forward(h, train, update_stats)
        return h

    def features(self, x: np.ndarray, train: bool = False, update_stats: bool = True) -> np.ndarray:
        """Output of the last block as (B, C, L)."""
        return self._run_blocks(x, train, update_stats).transpose(0, 2, 1)

    def forward(self, x: np.ndarray, train: bool = False, update_stats: bool = True) -> np.ndarray:
        h = self._run_blocks(x, train, update_stats)
        self._skip_blocks_backward = not any(p.trainable for b in self.blocks for p in b.params())
        return self.head.forward(h, train, update_stats)

    def backward(self, grad: np.ndarray) -> np.ndarray | None:
        grad = self.head.backward(grad)
        if self._skip_blocks_backward:
            return None  # nothing upstream can change
        for i in range(len(self.blocks) - 1, -1, -1):
            grad = self.blocks[i].backward(grad, need_x=i > 0)
        return grad

    def kinks(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.kinks())
        out.extend(self.head.kinks())
        return out

    def predict(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3 and x.shape[-1] == 1:
            x = x[None]
        outs = []
        for i in range(0, x.shape[0], batch_size):
            outs.append(self.forward(x[i:i + batch_size], train=False))
        out = np.concatenate(outs, axis=0) if outs else np.empty((0, self.head.spec.output))
        if self.head.spec.output_activation == "softmax":
            out = softmax(out)
        return out

    def tap_shapes(self) -> list[tuple[int, int, int]]:
        """Output size (C, L, 1) of every block for one probe input."""
        h = self._prep(np.zeros((1, *INPUT_SHAPE)))
        shapes = []
        for blk in self.blocks:
            h = blk.forward(h, train=False)
            shapes.append((h.shape[2], h.shape[1], 1))
        return shapes


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


# Independent RNG streams so that e.g. the TC head init does not depend on the backbone.
_STREAM_BACKBONE, _STREAM_TC_HEAD, _STREAM_SCRATCH, _STREAM_MLP, _STREAM_GPR_HEAD = 0, 1, 2, 3, 4


def build_backbone(seed: int, n_blocks: int = 9, stream: int = _STREAM_BACKBONE) -> list[ConvBlock]:
    rng = _rng(seed, stream)
    return [ConvBlock(s, rng) for s in backbone_spec()[:n_blocks]]


def build_gpr_model(seed: int = 0, output_activation: str = "identity",
                    hidden: tuple[int, ...] = (128, 64)) -> Network:
    blocks = build_backbone(seed)
    head = Head(gpr_head_spec(output_activation, hidden), _rng(seed, _STREAM_GPR_HEAD))
    return Network(blocks, head, "gpr", "gpr_head")


def attach_tc_head(gpr_model: Network, seed: int = 0, hidden: tuple[int, ...] = (64,)) -> Network:
    """TC network over the GPR model's first two blocks (shared, not copied)."""
    head = Head(tc_head_spec(hidden), _rng(seed, _STREAM_TC_HEAD))
    return Network(gpr_model.blocks[:TC_TAP_BLOCK], head, "tc", "tc_head")


def build_tc_scratch(seed: int = 0, hidden: tuple[int, ...] = (64,)) -> Network:
    """Same structure as the pretrained TC model, with freshly initialised blocks 1-2."""
    blocks = build_backbone(seed, TC_TAP_BLOCK, stream=_STREAM_SCRATCH)
    head = Head(tc_head_spec(hidden), _rng(seed, _STREAM_TC_HEAD))
    return Network(blocks, head, "tc", "tc_head")


def build_mlp_baseline(seed: int = 0, hidden: tuple[int, ...] = (64,)) -> Network:
    """Head-only classifier on the flattened (6 x 200) input."""
    head = Head(mlp_head_spec(hidden), _rng(seed, _STREAM_MLP))
    return Network([], head, "tc", "mlp_head")


def build_reduced_model(seed: int = 0, n_blocks: int = 2, length: int = 20, task: str = "gpr",
                        hidden: tuple[int, ...] = (8,)) -> Network:
    """Small network for gradient checking: the first `n_blocks` block types on a short input."""
    rng = _rng(seed, _STREAM_BACKBONE)
    blocks, in_len = [], length
    for s in backbone_spec()[:n_blocks]:
        spec = ConvBlockSpec(s.in_ch, s.out_ch, s.kernel, s.pool, in_len)
        blocks.append(ConvBlock(spec, rng))
        in_len = spec.out_len
    out_size = blocks[-1].spec.out_ch * in_len
    if task == "gpr":
        hspec = HeadSpec(out_size, hidden, 2, "identity")
    else:
        hspec = HeadSpec(out_size, hidden, N_TERRAINS, "softmax")
    return Network(blocks, Head(hspec, rng), task, f"{task}_head")


def freeze_backbone(model: Network) -> Network:
    """Stop updates to every block parameter and pin batch-norm to running statistics."""
    for blk in model.blocks:
        for p in blk.params():
            p.trainable = False
        blk.bn.frozen = True
    return model


def backbone_snapshot(model: Network) -> dict[str, np.ndarray]:
    snap = {}
    for i, blk in enumerate(model.blocks, start=1):
        for name, p in blk.named_params(f"block{i}").items():
            snap[name] = p.value.copy()
        for k, v in blk.bn.buffers().items():
            snap[f"block{i}.bn.{k}"] = v.copy()
    return snap


# ---------------------------------------------------------------- persistence
#
# Layout (little-endian):
#   b"GMTLWGT\0" | u16 version | u32 spec_len | spec JSON (utf-8) | 32-byte sha256(spec JSON)
#   | u32 n_entries | entries | 32-byte sha256 of all preceding bytes
# entry: u16 name_len | name | u8 ndim | u32 dims[ndim] | float64 data (C order)

MAGIC = b"GMTLWGT\0"
FORMAT_VERSION = 1


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _as_bundle(model) -> dict[str, Network]:
    if isinstance(model, Network):
        return {model.task: model}
    return dict(model)


def bundle_spec(model) -> dict:
    return {"format": FORMAT_VERSION, "networks": {k: n.spec() for k, n in sorted(_as_bundle(model).items())}}


def spec_fingerprint(model) -> str:
    return hashlib.sha256(_canonical(bundle_spec(model))).hexdigest()


def _collect_arrays(bundle: dict[str, Network]) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    owners: dict[str, object] = {}
    for net in bundle.values():
        items = [(n, p, p.value) for n, p in net.named_params().items()]
        for bn_name, bn in net.batchnorms().items():
            items += [(f"{bn_name}.{k}", bn, v) for k, v in bn.buffers().items()]
        for name, owner, value in items:
            if name in owners and owners[name] is not owner:
                raise IncompatibleWeights(f"two networks define distinct tensors named {name!r}")
            owners[name] = owner
            arrays[name] = value
    return dict(sorted(arrays.items()))


def save_weights(model, path: str | Path) -> None:
    """Write a Network, or a dict of networks sharing blocks, to `path`."""
    bundle = _as_bundle(model)
    spec_bytes = _canonical(bundle_spec(bundle))
    buf = bytearray(MAGIC)
    buf += struct.pack("<HI", FORMAT_VERSION, len(spec_bytes))
    buf += spec_bytes
    buf += hashlib.sha256(spec_bytes).digest()
    arrays = _collect_arrays(bundle)
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        nb = name.encode()
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf += hashlib.sha256(buf).digest()
    Path(path).write_bytes(bytes(buf))


@dataclass
class _Reader:
    data: bytes
    pos: int = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFile("weight file truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _build_from_spec(spec: dict) -> dict[str, Network]:
    nets = spec["networks"]
    # networks in one bundle share a prefix of the same block stack
    longest = max((n["blocks"] for n in nets.values()), key=len)
    rng = np.random.default_rng(0)
    shared = [ConvBlock(ConvBlockSpec(**b), rng) for b in longest]
    bundle = {}
    for key, n in nets.items():
        if n["blocks"] != longest[: len(n["blocks"])]:
            raise IncompatibleWeights(f"network {key!r} does not share the bundle's block stack")
        h = n["head"]
        head = Head(HeadSpec(h["input_features"], tuple(h["hidden"]), h["output"], h["output_activation"]),
                    np.random.default_rng(0))
        bundle[key] = Network(shared[: len(n["blocks"])], head, n["task"], n["head_name"])
    return bundle


def load_weights(path: str | Path, expect=None):
    """Load a weight file. Returns a Network (single) or a dict of networks.

    `expect` may be a model (or bundle) whose spec the file must match.
    """
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 32 or not data.startswith(MAGIC):
        raise CorruptFile(f"{path}: not a weight file")
    body, digest = data[:-32], data[-32:]
    r = _Reader(body, len(MAGIC))
    version, spec_len = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise IncompatibleWeights(f"weight format version {version}, expected {FORMAT_VERSION}")
    spec_bytes = r.take(spec_len)
    fingerprint = r.take(32)
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch (truncated or modified)")
    if hashlib.sha256(spec_bytes).digest() != fingerprint:
        raise CorruptFile(f"{path}: spec fingerprint does not match embedded spec")
    spec = json.loads(spec_bytes)
    if expect is not None and spec_fingerprint(expect) != fingerprint.hex():
        raise IncompatibleWeights("weight file was produced by a different model spec")
    bundle = _build_from_spec(spec)
    targets: dict[str, tuple] = {}
    for net in bundle.values():
        for name, p in net.named_params().items():
            targets[name] = ("param", p)
        for bn_name, bn in net.batchnorms().items():
            targets[f"{bn_name}.running_mean"] = ("bn_mean", bn)
            targets[f"{bn_name}.running_var"] = ("bn_var", bn)
    (n_entries,) = r.unpack("<I")
    seen = set()
    for _ in range(n_entries):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        if name not in targets:
            raise IncompatibleWeights(f"unexpected tensor {name!r}")
        kind, obj = targets[name]
        if kind == "param":
            if obj.value.shape != arr.shape:
                raise IncompatibleWeights(f"{name}: shape {arr.shape} != {obj.value.shape}")
            obj.value = arr
        elif kind == "bn_mean":
            obj.state.running_mean = arr
        else:
            obj.state.running_var = arr
        seen.add(name)
    if r.pos != len(body):
        raise CorruptFile("trailing bytes in weight file")
    missing = set(targets) - seen
    if missing:
        raise IncompatibleWeights(f"missing tensors: {sorted(missing)[:5]}")
    if len(bundle) == 1:
        return next(iter(bundle.values()))
    return bundle


def dump_spec(model) -> str:
    """Human-readable JSON description of the architecture."""
    spec = bundle_spec(model)
    for net in spec["networks"].values():
        for b in net["blocks"]:
            s = ConvBlockSpec(**b)
            b["out_size"] = list(s.out_size)
    return json.dumps(spec, indent=2, sort_keys=True)
