"""Tripnet and its two baselines.

Tensors are channel-first (``B x C x h x w``). A class activation map for
one frame is therefore ``m x h x w``.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from triplab.vocab import ClassIndex, ValidityMask, Vocabulary, parse_vocabulary

CHECKPOINT_VERSION = 1
MODEL_KINDS = ("tripnet", "mtl", "naive")


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 112
    stride: int = 8
    backbone_blocks: int = 4
    backbone_channels: tuple[int, int] = (32, 64)
    batchnorm: bool = True
    branch_channels: int = 32
    head: str = "gmp"
    cag: bool = True
    space: str = "trained"
    projection: str = "vector"
    cam_detach: bool = True
    instrument_grad: float = 1.0
    padding: str = "zeros"

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        n_down = int(round(np.log2(self.stride)))
        if 2**n_down != self.stride or n_down > self.backbone_blocks:
            raise ValueError(f"stride must be a power of two reachable in {self.backbone_blocks} blocks")
        if self.height % self.stride or self.width % self.stride:
            raise ValueError("input size must be divisible by the stride")
        if self.head not in ("gmp", "flatten"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.space not in ("trained", "untrained"):
            raise ValueError(f"unknown space mode {self.space!r}")
        if not 0.0 <= self.instrument_grad <= 1.0:
            raise ValueError("instrument_grad must be in [0, 1]")
        if self.projection not in ("vector", "matrix"):
            raise ValueError(f"unknown projection {self.projection!r}")
        if self.padding not in ("zeros", "replicate", "reflect"):
            raise ValueError(f"unknown padding {self.padding!r}")

    @property
    def feature_size(self) -> tuple[int, int]:
        return (self.height // self.stride, self.width // self.stride)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Backbone(nn.Module):
    """Small plain CNN; the first ``log2(stride)`` blocks downsample by 2."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n_down = int(round(np.log2(cfg.stride)))
        lo, hi = cfg.backbone_channels
        layers = []
        cin = 3
        for k in range(cfg.backbone_blocks):
            cout = lo if k < cfg.backbone_blocks // 2 else hi
            layers.append(nn.Conv2d(cin, cout, 3, stride=2 if k < n_down else 1, padding=1,
                                    padding_mode=cfg.padding, bias=not cfg.batchnorm))
            if cfg.batchnorm:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.ReLU(inplace=False))
            cin = cout
        self.body = nn.Sequential(*layers)
        self.out_channels = cin
        self.input_size = (cfg.height, cfg.width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.input_size or x.shape[1] != 3:
            raise ValueError(f"expected B x 3 x {self.input_size[0]} x {self.input_size[1]}, got {tuple(x.shape)}")
        return self.body(x)


class InstrumentBranch(nn.Module):
    """Two conv layers ending in one map per instrument; GMP ties map to logit."""

    def __init__(self, cin: int, width: int, m: int, padding: str = "zeros"):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, width, 3, padding=1, padding_mode=padding)
        self.conv2 = nn.Conv2d(width, m, 1)

    def forward(self, feat):
        cam = self.conv2(F.relu(self.conv1(feat)))
        return cam, global_max_pool(cam)


def global_max_pool(x: torch.Tensor) -> torch.Tensor:
    return torch.amax(x, dim=(-2, -1))


class ClassifierHead(nn.Module):
    """Fully-connected classifier over a feature map.

    ``gmp`` applies the same linear map at every location and keeps the
    spatial maximum; ``flatten`` is one dense layer over the whole map.
    """

    def __init__(self, cin: int, n_out: int, kind: str, feature_size: tuple[int, int]):
        super().__init__()
        self.kind = kind
        if kind == "gmp":
            self.fc = nn.Conv2d(cin, n_out, 1)
        else:
            self.fc = nn.Linear(cin * feature_size[0] * feature_size[1], n_out)

    def forward(self, x):
        if self.kind == "gmp":
            return global_max_pool(self.fc(x))
        return self.fc(torch.flatten(x, 1))


class ComponentBranch(nn.Module):
    """Verb or target branch: two convs, optional CAM concat, FC head."""

    def __init__(self, cin: int, width: int, n_out: int, m: int, cfg: ModelConfig, guided: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, width, 3, padding=1, padding_mode=cfg.padding)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1, padding_mode=cfg.padding)
        self.guided = guided
        self.head = ClassifierHead(width + (m if guided else 0), n_out, cfg.head, cfg.feature_size)

    def features(self, feat):
        return F.relu(self.conv2(F.relu(self.conv1(feat))))

    def forward(self, feat, cam=None):
        x = self.features(feat)
        if self.guided:
            x = torch.cat([x, align_cam(cam, x.shape[-2:])], dim=1)
        return self.head(x)


def scale_grad(x: torch.Tensor, s: float) -> torch.Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``s``."""
    if s == 1.0:
        return x
    d = x.detach()
    return d if s == 0.0 else d + s * (x - d)


def align_cam(cam: torch.Tensor, size) -> torch.Tensor:
    if cam is None:
        raise ValueError("guided branch needs a CAM")
    if tuple(cam.shape[-2:]) != tuple(size):
        cam = F.interpolate(cam, size=tuple(size), mode="bilinear", align_corners=False)
    return cam


class InteractionSpace(nn.Module):
    """Scaled outer product of the component logits over the valid cells."""

    def __init__(self, shape: tuple[int, int, int], projection: str = "vector", trainable: bool = True):
        super().__init__()
        self.projection = projection
        if projection == "vector":
            init = [torch.ones(k) for k in shape]
        else:
            init = [torch.eye(k) for k in shape]
        self.alpha = nn.Parameter(init[0], requires_grad=trainable)
        self.beta = nn.Parameter(init[1], requires_grad=trainable)
        self.gamma = nn.Parameter(init[2], requires_grad=trainable)

    def forward(self, li, lv, lt):
        if self.projection == "vector":
            a, b, g = li * self.alpha, lv * self.beta, lt * self.gamma
        else:
            a, b, g = li @ self.alpha.T, lv @ self.beta.T, lt @ self.gamma.T
        return torch.einsum("bi,bv,bt->bivt", a, b, g)


def interaction_project(li, lv, lt, alpha, beta, gamma, mask: ValidityMask | np.ndarray | None = None):
    """Volume logits and probabilities for one frame (numpy in, numpy out).

    ``logits[i, v, t] = (alpha[i] li[i]) (beta[v] lv[v]) (gamma[t] lt[t])``.
    Probabilities are the sigmoid of the logits on valid cells and exactly
    zero elsewhere.
    """
    li, lv, lt = (np.asarray(x, dtype=np.float64) for x in (li, lv, lt))
    alpha, beta, gamma = (np.asarray(x, dtype=np.float64) for x in (alpha, beta, gamma))
    if li.shape != alpha.shape or lv.shape != beta.shape or lt.shape != gamma.shape:
        raise ValueError("logit and weight lengths differ")
    logits = np.einsum("i,v,t->ivt", alpha * li, beta * lv, gamma * lt)
    grid = _grid(mask, logits.shape)
    probs = np.where(grid, 1.0 / (1.0 + np.exp(-logits)), 0.0)
    return logits, probs


def _grid(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    grid = mask.grid if isinstance(mask, ValidityMask) else np.asarray(mask, dtype=bool)
    if grid.shape != tuple(shape):
        raise ValueError(f"mask shape {grid.shape} != volume shape {tuple(shape)}")
    return grid


class TripletModel(nn.Module):
    """Common surface: every model returns a dict of heads.

    Keys always present: ``ivt`` (B x C class logits). Component models add
    ``I``, ``V``, ``T`` and ``cam``; Tripnet adds ``volume`` (B x m x n x p).
    """

    kind = "base"

    def __init__(self, vocab: Vocabulary, mask: ValidityMask, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.vocab = vocab
        self.mask = mask
        self.classes = ClassIndex(mask.triplets(), vocab)
        self.register_buffer("grid", torch.from_numpy(mask.grid.copy()))
        self.register_buffer("class_flat", torch.from_numpy(self.classes.flat_indices()))
        self.backbone = Backbone(self.cfg)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"backbone": [], "subnets": [], "space": []}
        for name, prm in self.named_parameters():
            if not prm.requires_grad:
                continue
            if name.startswith("backbone."):
                groups["backbone"].append(prm)
            elif name.startswith("space."):
                groups["space"].append(prm)
            else:
                groups["subnets"].append(prm)
        return groups

    def warmup_parameters(self) -> list[nn.Parameter]:
        """Parameters trained while only the instrument loss is active."""
        out = list(self.backbone.parameters())
        branch = getattr(self, "instrument", None)
        if branch is not None:
            out += list(branch.parameters())
        return [p for p in out if p.requires_grad]

    def volume_probs(self, heads: dict) -> torch.Tensor:
        """Decoded probabilities, B x m x n x p, exactly zero off the mask."""
        ivt = heads["ivt"]
        flat = torch.zeros(ivt.shape[0], int(np.prod(self.vocab.shape)), dtype=ivt.dtype, device=ivt.device)
        flat[:, self.class_flat] = torch.sigmoid(ivt)
        return flat.view(ivt.shape[0], *self.vocab.shape)


class Tripnet(TripletModel):
    kind = "tripnet"

    def __init__(self, vocab: Vocabulary, mask: ValidityMask, cfg: ModelConfig | None = None):
        super().__init__(vocab, mask, cfg)
        m, n, p = vocab.shape
        c, b = self.backbone.out_channels, self.cfg.branch_channels
        self.instrument = InstrumentBranch(c, b, m, self.cfg.padding)
        self.verb = ComponentBranch(c, b, n, m, self.cfg, guided=self.cfg.cag)
        self.target = ComponentBranch(c, b, p, m, self.cfg, guided=self.cfg.cag)
        self.space = InteractionSpace(vocab.shape, self.cfg.projection, trainable=self.cfg.space == "trained")

    def backbone_forward(self, x):
        return self.backbone(x)

    def instrument_branch(self, feat):
        """``(cam, logits_I)`` with ``logits_I`` the spatial max of ``cam``."""
        return self.instrument(feat)

    def cag_forward(self, feat, cam):
        """Verb and target logits, each path guided by ``cam`` when CAG is on."""
        guide = cam.detach() if self.cfg.cam_detach else cam
        return self.verb(feat, guide), self.target(feat, guide)

    def forward(self, x):
        feat = self.backbone_forward(x)
        cam, li = self.instrument_branch(feat)
        lv, lt = self.cag_forward(feat, cam)
        if self.cfg.space == "untrained":
            volume = self.space(li.detach(), lv.detach(), lt.detach())
        else:
            volume = self.space(scale_grad(li, self.cfg.instrument_grad), lv, lt)
        ivt = volume.flatten(1)[:, self.class_flat]
        return {"I": li, "V": lv, "T": lt, "cam": cam, "volume": volume, "ivt": ivt}


class MTLBaseline(TripletModel):
    kind = "mtl"

    def __init__(self, vocab: Vocabulary, mask: ValidityMask, cfg: ModelConfig | None = None):
        super().__init__(vocab, mask, cfg)
        m, n, p = vocab.shape
        c, b = self.backbone.out_channels, self.cfg.branch_channels
        self.instrument = InstrumentBranch(c, b, m, self.cfg.padding)
        self.verb = ComponentBranch(c, b, n, m, self.cfg, guided=False)
        self.target = ComponentBranch(c, b, p, m, self.cfg, guided=False)
        self.fc = nn.Linear(m + n + p, self.n_classes)

    def forward(self, x):
        feat = self.backbone(x)
        cam, li = self.instrument(feat)
        lv = self.verb(feat)
        lt = self.target(feat)
        ivt = self.fc(torch.cat([li, lv, lt], dim=1))
        return {"I": li, "V": lv, "T": lt, "cam": cam, "ivt": ivt}


class NaiveCNN(TripletModel):
    kind = "naive"

    def __init__(self, vocab: Vocabulary, mask: ValidityMask, cfg: ModelConfig | None = None):
        super().__init__(vocab, mask, cfg)
        c, b = self.backbone.out_channels, self.cfg.branch_channels
        self.conv1 = nn.Conv2d(c, b, 3, padding=1, padding_mode=self.cfg.padding)
        self.conv2 = nn.Conv2d(b, b, 3, padding=1, padding_mode=self.cfg.padding)
        self.head = ClassifierHead(b, self.n_classes, self.cfg.head, self.cfg.feature_size)

    def forward(self, x):
        feat = self.backbone(x)
        h = F.relu(self.conv2(F.relu(self.conv1(feat))))
        return {"ivt": self.head(h)}


def build_model(kind: str, vocab: Vocabulary, mask: ValidityMask, cfg: ModelConfig | None = None) -> TripletModel:
    try:
        cls = {"tripnet": Tripnet, "mtl": MTLBaseline, "naive": NaiveCNN}[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}") from None
    return cls(vocab, mask, cfg)


def init_weights(model: nn.Module, seed: int) -> None:
    """He-initialise conv/linear layers; biases zero.

    Each layer draws from its own generator keyed by ``seed`` and the layer
    name, so variants that differ in one layer share every other draw.
    """
    for name, mod in model.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            gen = torch.Generator().manual_seed(seed * 1_000_003 + zlib.crc32(name.encode()))
            fan_in = mod.weight[0].numel()
            with torch.no_grad():
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                if mod.bias is not None:
                    mod.bias.zero_()


def to_batch(images: np.ndarray | torch.Tensor) -> torch.Tensor:
    """N x H x W x 3 images in [0, 1] -> N x 3 x H x W float tensor."""
    x = torch.as_tensor(np.asarray(images))
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2).contiguous().float()


@torch.no_grad()
def predict(model: TripletModel, images: np.ndarray, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Inference over a stack of images; returns numpy heads plus ``probs``."""
    model.eval()
    out: dict[str, list] = {}
    for start in range(0, len(images), batch_size):
        x = to_batch(images[start:start + batch_size])
        heads = model(x)
        heads["probs"] = model.volume_probs(heads)
        for k, v in heads.items():
            out.setdefault(k, []).append(v.detach().cpu().numpy())
    return {k: np.concatenate(v) for k, v in out.items()}


def cam_to_boxes(cam: np.ndarray, inst_probs: np.ndarray, prob_thresh: float = 0.5,
                 cam_thresh_frac: float = 0.5, image_size: tuple[int, int] | None = None):
    """Weak localization: one box per instrument predicted present.

    ``cam`` is ``m x h x w``. For each kept channel the tight bounding box
    of cells at or above ``cam_thresh_frac`` times the channel maximum (the
    maximum itself when it is not positive) is found on the CAM grid, then
    scaled to ``image_size`` (H, W) as pixel-edge coordinates.
    """
    cam = np.asarray(cam, dtype=np.float64)
    m, h, w = cam.shape
    H, W = image_size or (h, w)
    out = []
    for k in range(m):
        score = float(inst_probs[k])
        if score < prob_thresh:
            continue
        ch = cam[k]
        peak = ch.max()
        hit = ch >= (cam_thresh_frac * peak if peak > 0 else peak)
        rows = np.flatnonzero(hit.any(axis=1))
        cols = np.flatnonzero(hit.any(axis=0))
        box = (cols[0] * W // w, rows[0] * H // h, -(-(cols[-1] + 1) * W // w), -(-(rows[-1] + 1) * H // h))
        out.append((k, tuple(int(x) for x in box), score))
    return out


def upsample_cam(cam: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.as_tensor(np.asarray(cam, dtype=np.float64))[None]
    if tuple(t.shape[-2:]) != tuple(size):
        t = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return t[0].numpy()


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def save_checkpoint(model: TripletModel, path: str | Path, extra: dict | None = None) -> None:
    """Write a zip holding ``meta.json`` and one ``.npy`` per named tensor.

    Member timestamps are fixed so identical states give identical bytes.
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "vocab_sizes": list(model.vocab.shape),
        "vocab": model.vocab.to_text(),
        "vocab_hash": model.vocab.digest(),
        "classes": [list(t) for t in model.classes.triplets],
        "model_config": model.cfg.to_dict(),
        "config_hash": config_hash(model.cfg.to_dict()),
        "extra": extra or {},
    }
    state = model.state_dict()
    meta["tensors"] = sorted(state)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(state):
            buf = io.BytesIO()
            np.save(buf, state[name].detach().cpu().numpy(), allow_pickle=False)
            _write_member(zf, f"tensors/{name}.npy", buf.getvalue())


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


class CheckpointError(ValueError):
    pass


def read_checkpoint_meta(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
    if "version" not in meta:
        raise CheckpointError("checkpoint has no version field")
    if meta["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta['version']}")
    return meta


def load_checkpoint(path: str | Path) -> tuple[TripletModel, dict]:
    meta = read_checkpoint_meta(path)
    vocab = parse_vocabulary(meta["vocab"])
    grid = np.zeros(vocab.shape, dtype=bool)
    for trip in meta["classes"]:
        grid[tuple(trip)] = True
    mask = ValidityMask(grid, int(grid.sum()))
    model = build_model(meta["kind"], vocab, mask, ModelConfig.from_dict(meta["model_config"]))
    state = {}
    with zipfile.ZipFile(path) as zf:
        for name in meta["tensors"]:
            state[name] = torch.from_numpy(np.load(io.BytesIO(zf.read(f"tensors/{name}.npy"))))
    model.load_state_dict(state)
    model.eval()
    return model, meta
