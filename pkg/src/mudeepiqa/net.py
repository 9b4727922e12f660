"""Patch CNN with quality and weight heads, weighted aggregation and weight files."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .imagecore import PATCH_SIZE, PatchGrid

MAGIC = b"UDIQA\x00"
FORMAT_VERSION = 1

TARGET_HIGHER_IS_BETTER = {"frc_resolution": False, "quality_score": True}


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    patch_size: int = PATCH_SIZE
    channels: tuple = (32, 64, 128, 256, 512)  # one conv pair + 2x2 max-pool per entry
    fc_width: int = 512
    dropout: float = 0.5
    weight_floor: float = 1e-6
    init: str = "he_normal_fan_in, zero bias"
    dropout_placement: str = "before each FC layer of both heads"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.patch_size != 2 ** len(self.channels):
            raise ValueError("patch_size must reduce to 1x1 after one pool per conv pair")

    @classmethod
    def scaled(cls, divisor: int) -> "ModelSpec":
        """Same topology with every width divided by ``divisor``."""
        base = cls()
        return cls(channels=tuple(max(c // divisor, 1) for c in base.channels), fc_width=max(base.fc_width // divisor, 1))

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class IQANet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        layers = []
        c_in = 1
        for c in spec.channels:
            layers += [
                nn.Conv2d(c_in, c, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(c, c, 3, padding=1),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            c_in = c
        layers.append(nn.Flatten())
        self.features = nn.Sequential(*layers)
        self.feature_size = c_in

        def head():
            return nn.Sequential(
                nn.Dropout(spec.dropout),
                nn.Linear(c_in, spec.fc_width),
                nn.Dropout(spec.dropout),
                nn.Linear(spec.fc_width, 1),
            )

        self.quality = head()
        self.weight = head()
        self.floor = spec.weight_floor

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, 1, P, P) patches -> per-patch quality y and weight alpha, both (N,)."""
        h = self.features(x)
        y = self.quality(h).squeeze(1)
        alpha = torch.relu(self.weight(h)).squeeze(1) + self.floor
        return y, alpha


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    net: IQANet
    label_mean: float = 0.0
    label_std: float = 1.0
    target_name: str = "frc_resolution"
    meta: dict = field(default_factory=dict)

    @property
    def arch_fingerprint(self) -> str:
        return self.spec.fingerprint()

    @property
    def higher_is_better(self) -> bool:
        return TARGET_HIGHER_IS_BETTER.get(self.target_name, True)

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters() if p.requires_grad)

    def normalize(self, label):
        return (np.asarray(label, dtype=np.float64) - self.label_mean) / self.label_std

    def denormalize(self, value):
        return np.asarray(value, dtype=np.float64) * self.label_std + self.label_mean


def init_model(spec: ModelSpec | None = None, seed: int = 0, **kwargs) -> Model:
    spec = spec or ModelSpec()
    gen = torch.Generator().manual_seed(int(seed))
    net = IQANet(spec)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, float(np.sqrt(2.0 / fan_in)), generator=gen)
                m.bias.zero_()
    net.eval()
    return Model(spec, net, **kwargs)


@dataclass(frozen=True)
class PatchPrediction:
    qualities: np.ndarray  # normalized label units
    weights: np.ndarray

    def __post_init__(self):
        if len(self.qualities) != len(self.weights):
            raise ValueError("qualities and weights differ in length")


def _as_tensor(patches, spec: ModelSpec) -> torch.Tensor:
    arr = patches.patches if isinstance(patches, PatchGrid) else np.asarray(patches)
    if arr.ndim != 3 or arr.shape[1:] != (spec.patch_size, spec.patch_size):
        raise ValueError(f"expected (N, {spec.patch_size}, {spec.patch_size}) patches, got {arr.shape}")
    return torch.from_numpy(np.array(arr, dtype=np.float32)).unsqueeze(1)


def forward_patches(model: Model, patches, training: bool = False, chunk: int = 1024) -> PatchPrediction:
    x = _as_tensor(patches, model.spec)
    dtype = next(model.net.parameters()).dtype
    was_training = model.net.training
    model.net.train(training)
    try:
        ys, alphas = [], []
        with torch.set_grad_enabled(False):
            for start in range(0, x.shape[0], chunk):
                y, a = model.net(x[start : start + chunk].to(dtype))
                ys.append(y)
                alphas.append(a)
    finally:
        model.net.train(was_training)
    y = torch.cat(ys).double().numpy()
    # the float32 floor rounds to 9.99999997e-07; restore it in float64
    a = np.maximum(torch.cat(alphas).double().numpy(), model.spec.weight_floor)
    return PatchPrediction(y, a)


def aggregate(pred: PatchPrediction) -> float:
    """Weighted mean of patch qualities, weights normalized to sum one."""
    y = np.asarray(pred.qualities, dtype=np.float64)
    a = np.asarray(pred.weights, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty prediction")
    return float(np.sum(a * y) / np.sum(a))


def save_model(model: Model, path) -> Path:
    """Binary container: magic, u64 header length, JSON header, raw <f4 tensors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, arr in model.parameters().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "byte_offset": offset})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "target_name": model.target_name,
        "label_mean": model.label_mean,
        "label_std": model.label_std,
        "arch_fingerprint": model.arch_fingerprint,
        "model_spec": model.spec.to_dict(),
        "meta": model.meta,
        "tensors": tensors,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def load_model(path, expected: ModelSpec | None = None) -> Model:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ModelFormatError(f"{path}: not a model file")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos : pos + n])
    data = memoryview(raw)[pos + n :]
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format {header.get('format_version')!r}")
    spec = ModelSpec(**header["model_spec"])
    if header["arch_fingerprint"] != spec.fingerprint():
        raise ModelFormatError("architecture fingerprint does not match stored model spec")
    if expected is not None and expected.fingerprint() != spec.fingerprint():
        raise ModelFormatError("architecture fingerprint does not match the expected model spec")
    net = IQANet(spec)
    state = net.state_dict()
    loaded = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        if t["name"] not in state or tuple(state[t["name"]].shape) != shape:
            raise ModelFormatError(f"tensor {t['name']} has unexpected shape {shape}")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=t["byte_offset"])
        loaded[t["name"]] = torch.from_numpy(arr.copy().reshape(shape))
    missing = set(state) - set(loaded)
    if missing:
        raise ModelFormatError(f"missing tensors: {sorted(missing)}")
    net.load_state_dict(loaded)
    net.eval()
    return Model(
        spec,
        net,
        label_mean=float(header["label_mean"]),
        label_std=float(header["label_std"]),
        target_name=header["target_name"],
        meta=header.get("meta", {}),
    )
