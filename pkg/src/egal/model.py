"""Small trainable CNN with linear and prototypical heads.

Architecture: three conv blocks (3x3 conv, ReLU, 2x2 average pool)
widening 8 -> 16 -> 32 channels, global average pooling, a dense
embedding layer, and a linear classification head. The post-ReLU
activation of the last conv block is exposed as "cam_target" for
attention mapping; input extent must divide by 8 so the pools fit.

Training minimizes cross-entropy plus alpha times the Dice explanation
loss. The prototypical head classifies by softmax over negative squared
distances to per-class embedding centroids and trains episodically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import explain
from .tensor import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    add,
    avg_pool2d,
    backward,
    conv2d,
    cross_entropy,
    dense,
    global_avg_pool,
    pairwise_sqdist,
    relu,
    scale,
    softmax,
    take_batch,
)

HEAD_MODES = ("linear", "prototypical")


@dataclass
class TrainConfig:
    """Knobs for one (re)training call."""

    alpha: float = 0.1          # explanation-loss weight
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 30        # minibatch size for the linear head
    shots: int = 5              # support (and query cap) per class per episode
    head: str = "prototypical"
    seed: int = 0

    def validate(self) -> None:
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if self.lr <= 0:
            raise ContractError("learning rate must be > 0")
        if self.shots < 1:
            raise ContractError("shots must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.head not in HEAD_MODES:
            raise ContractError(f"head must be one of {HEAD_MODES}, got {self.head!r}")


@dataclass(frozen=True)
class PrototypeSet:
    """One embedding centroid per class, rows aligned with ``classes``."""

    classes: tuple
    vectors: np.ndarray

    @classmethod
    def from_embeddings(cls, embeddings: np.ndarray, labels) -> "PrototypeSet":
        labels = np.asarray(labels)
        classes = tuple(sorted(int(c) for c in np.unique(labels)))
        vecs = np.stack([embeddings[labels == c].mean(axis=0) for c in classes])
        return cls(classes=classes, vectors=vecs)

    def ordered_vectors(self, n_classes: int) -> np.ndarray:
        """Centroids for classes 0..n-1; missing class -> contract error."""
        lookup = {c: i for i, c in enumerate(self.classes)}
        missing = [k for k in range(n_classes) if k not in lookup]
        if missing:
            raise ContractError(f"no prototype for class {missing[0]}")
        return self.vectors[[lookup[k] for k in range(n_classes)]]


class SmallCnn:
    """Three conv blocks, GAP, dense embedding, linear head parameters."""

    PARAM_NAMES = ("conv1.k", "conv1.b", "conv2.k", "conv2.b", "conv3.k", "conv3.b",
                   "embed.w", "embed.b", "head.w", "head.b")

    def __init__(self, n_classes: int, image_size: int = 64,
                 channels: tuple = (8, 16, 32), embed_dim: int = 64,
                 seed: int = 0, _params: Optional[dict] = None):
        if image_size % 8 != 0:
            raise DimensionError(f"image size {image_size} must divide by 8 (three 2x2 pools)")
        if n_classes < 2:
            raise ContractError("need at least two classes")
        self.n_classes = n_classes
        self.image_size = image_size
        self.channels = tuple(channels)
        self.embed_dim = embed_dim
        if _params is not None:
            self.params = _params
            return
        rng = np.random.default_rng(seed)
        c1, c2, c3 = self.channels
        self.params = {}
        for name, cin, cout in (("conv1", 1, c1), ("conv2", c1, c2), ("conv3", c2, c3)):
            std = np.sqrt(2.0 / (cin * 9))
            self.params[f"{name}.k"] = Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3)))
            self.params[f"{name}.b"] = Tensor(np.zeros(cout))
        self.params["embed.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / c3), size=(c3, embed_dim)))
        self.params["embed.b"] = Tensor(np.zeros(embed_dim))
        self.params["head.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / embed_dim),
                                                  size=(embed_dim, n_classes)))
        self.params["head.b"] = Tensor(np.zeros(n_classes))

    # -- structure ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.PARAM_NAMES]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    def constant_copy(self) -> "SmallCnn":
        """Same arrays wrapped in fresh tensors; scratch backward passes
        through the copy leave this model's grad buffers untouched."""
        return SmallCnn(self.n_classes, self.image_size, self.channels, self.embed_dim,
                        _params={n: Tensor(t.data) for n, t in self.params.items()})

    @property
    def cam_channels(self) -> int:
        return self.channels[2]

    # -- forward pieces ------------------------------------------------------

    def trunk(self, tape: Optional[Tape], x: Tensor) -> Tensor:
        """(B,1,H,W) -> cam_target, the last block's post-ReLU maps."""
        p = self.params
        h = avg_pool2d(tape, relu(tape, conv2d(tape, x, p["conv1.k"], p["conv1.b"], padding=1)))
        h = avg_pool2d(tape, relu(tape, conv2d(tape, h, p["conv2.k"], p["conv2.b"], padding=1)))
        cam = relu(tape, conv2d(tape, h, p["conv3.k"], p["conv3.b"], padding=1))
        cam.name = "cam_target"
        return cam

    def embed_from_cam(self, tape: Optional[Tape], cam: Tensor) -> Tensor:
        p = self.params
        pooled = global_avg_pool(tape, avg_pool2d(tape, cam))
        return dense(tape, pooled, p["embed.w"], p["embed.b"])

    def features(self, tape: Optional[Tape], x: Tensor) -> tuple[Tensor, Tensor]:
        cam = self.trunk(tape, x)
        return cam, self.embed_from_cam(tape, cam)

    def head_scores(self, tape: Optional[Tape], emb: Tensor, head: str = "linear",
                    protos: Union[None, np.ndarray, Tensor] = None) -> Tensor:
        """Per-class scores: logits, or negative squared centroid distances."""
        if head == "linear":
            return dense(tape, emb, self.params["head.w"], self.params["head.b"])
        if head == "prototypical":
            if protos is None:
                raise ContractError("prototypical head needs prototypes")
            return scale(tape, pairwise_sqdist(tape, emb, protos), -1.0)
        raise ContractError(f"unknown head mode {head!r}")

    def embed(self, images: np.ndarray) -> np.ndarray:
        """Inference embeddings for (B,1,H,W) images."""
        return self.features(None, Tensor(images))[1].data


def _as_batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DimensionError(f"expected (B,1,H,W) images, got {arr.shape}")
    return arr


def _proto_vectors(model: SmallCnn, protos) -> np.ndarray:
    if isinstance(protos, PrototypeSet):
        return protos.ordered_vectors(model.n_classes)
    if protos is None:
        raise ContractError("prototypical head needs prototypes")
    return np.asarray(protos, dtype=np.float64)


def forward_batch(model: SmallCnn, images, head: str = "linear",
                  protos=None) -> tuple[np.ndarray, np.ndarray]:
    """One inference pass: (cam activation data, class probabilities)."""
    arr = _as_batch(images)
    pv = _proto_vectors(model, protos) if head == "prototypical" else None
    cam = model.trunk(None, Tensor(arr))
    emb = model.embed_from_cam(None, cam)
    probs = softmax(None, model.head_scores(None, emb, head=head, protos=pv)).data
    return cam.data, probs


def predict_proba(model: SmallCnn, images, head: str = "linear",
                  protos=None) -> np.ndarray:
    """Class probabilities; (N,) for one image, (B,N) for a batch."""
    single = np.asarray(images).ndim == 3
    probs = forward_batch(model, images, head=head, protos=protos)[1]
    return probs[0] if single else probs


def class_score(model: SmallCnn, image, k: int, head: str = "linear", protos=None) -> float:
    """Differentiable-path score for class k (logit, or -squared distance)."""
    if not 0 <= k < model.n_classes:
        raise ContractError(f"class {k} out of range")
    arr = _as_batch(image)
    emb = model.features(None, Tensor(arr))[1]
    pv = _proto_vectors(model, protos) if head == "prototypical" else None
    return float(model.head_scores(None, emb, head=head, protos=pv).data[0, k])


def composite_loss(model: SmallCnn, batch: Sequence, cfg: TrainConfig,
                   tape: Optional[Tape] = None, protos=None,
                   frozen_cam_weights: Optional[np.ndarray] = None) -> tuple[Tensor, dict]:
    """Cross-entropy plus alpha times the explanation Dice loss.

    Samples without an expert mask contribute only to the classification
    term. With the prototypical head the given prototypes are constants;
    episodic training assembles its own differentiable version.
    """
    cfg.validate()
    if len(batch) == 0:
        raise ContractError("composite_loss: empty batch")
    if any(s.label is None for s in batch):
        raise ContractError("composite_loss: every sample needs a label")
    images = np.stack([np.asarray(s.image, dtype=np.float64) for s in batch])
    labels = np.asarray([s.label for s in batch], dtype=np.intp)
    pv = _proto_vectors(model, protos) if cfg.head == "prototypical" else None

    cam, emb = model.features(tape, Tensor(images))
    probs = softmax(tape, model.head_scores(tape, emb, head=cfg.head, protos=pv))
    l_cls = cross_entropy(tape, probs, labels)
    parts = {"cls": float(l_cls.data), "exp": 0.0}
    if cfg.alpha == 0.0:
        return l_cls, parts

    with_esm = [i for i, s in enumerate(batch) if s.esm is not None]
    if not with_esm:
        return l_cls, parts
    masks = np.stack([explain._grid(batch[i].esm) for i in with_esm])
    cam_sub = take_batch(tape, cam, with_esm) if len(with_esm) < len(batch) else cam
    l_exp = explain.explanation_loss_from_cam(
        tape, model, cam_sub, labels[with_esm], masks, head=cfg.head, protos=pv,
        frozen_weights=frozen_cam_weights)
    parts["exp"] = float(l_exp.data)
    total = add(tape, l_cls, scale(tape, l_exp, cfg.alpha))
    return total, parts


def _by_class(batch: Sequence) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for i, s in enumerate(batch):
        out.setdefault(int(s.label), []).append(i)
    return out


def _sgd_step(model: SmallCnn, lr: float) -> None:
    for p in model.parameters():
        if p.grad is not None:
            p.data -= lr * p.grad
        p.grad = None


def _train_linear(model: SmallCnn, batch: list, cfg: TrainConfig,
                  rng: np.random.Generator) -> None:
    n = len(batch)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            chunk = [batch[i] for i in order[start:start + cfg.batch_size]]
            tape = Tape()
            loss, _ = composite_loss(model, chunk, cfg, tape=tape)
            model.zero_grads()
            backward(tape, loss)
            _sgd_step(model, cfg.lr)


def _episode_step(model: SmallCnn, episode_support: list, episode_query: list,
                  cfg: TrainConfig) -> None:
    """One SGD step on an episodic loss: query cross-entropy against
    prototypes built from the support embeddings, plus the explanation
    term over every sample in the episode."""
    samples = episode_support + episode_query
    images = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])
    labels = np.asarray([s.label for s in samples], dtype=np.intp)
    n_sup = len(episode_support)
    classes = sorted({int(s.label) for s in episode_support})

    avg = np.zeros((len(classes), n_sup))
    for row, c in enumerate(classes):
        members = [i for i in range(n_sup) if labels[i] == c]
        avg[row, members] = 1.0 / len(members)

    tape = Tape()
    cam, emb = model.features(tape, Tensor(images))
    sup_emb = take_batch(tape, emb, np.arange(n_sup))
    qry_emb = take_batch(tape, emb, np.arange(n_sup, len(samples)))
    from .tensor import const_matmul
    protos_t = const_matmul(tape, avg, sup_emb)
    logits = scale(tape, pairwise_sqdist(tape, qry_emb, protos_t), -1.0)
    qry_targets = np.asarray([classes.index(int(s.label)) for s in episode_query], dtype=np.intp)
    loss = cross_entropy(tape, softmax(tape, logits), qry_targets)

    if cfg.alpha > 0.0:
        with_esm = [i for i, s in enumerate(samples) if s.esm is not None]
        if with_esm:
            masks = np.stack([explain._grid(samples[i].esm) for i in with_esm])
            cam_sub = take_batch(tape, cam, with_esm) if len(with_esm) < len(samples) else cam
            # CAM weights use the episode's current prototypes as constants
            proto_const = protos_t.data
            label_rows = np.asarray([classes.index(int(labels[i])) for i in with_esm],
                                    dtype=np.intp)
            l_exp = explain.explanation_loss_from_cam(
                tape, model, cam_sub, label_rows, masks, head="prototypical",
                protos=proto_const)
            loss = add(tape, loss, scale(tape, l_exp, cfg.alpha))

    model.zero_grads()
    backward(tape, loss)
    _sgd_step(model, cfg.lr)


def _train_prototypical(model: SmallCnn, batch: list, cfg: TrainConfig,
                        rng: np.random.Generator) -> None:
    groups = _by_class(batch)
    for _ in range(cfg.epochs):
        queues = {c: [batch[i] for i in rng.permutation(idx)]
                  for c, idx in sorted(groups.items())}
        while all(len(q) >= cfg.shots + 1 for q in queues.values()):
            support, query = [], []
            for c in sorted(queues):
                q = queues[c]
                support.extend(q[:cfg.shots])
                query.extend(q[cfg.shots:2 * cfg.shots])
                queues[c] = q[2 * cfg.shots:]
            _episode_step(model, support, query, cfg)


def train(model: SmallCnn, labeled: Sequence, cfg: TrainConfig,
          rng: Optional[np.random.Generator] = None) -> tuple[SmallCnn, Optional[PrototypeSet]]:
    """Plain SGD on the composite loss; returns the model and, with the
    prototypical head, centroids recomputed from the full labeled set."""
    cfg.validate()
    batch = list(labeled)
    if any(s.label is None for s in batch):
        raise ContractError("train: every sample needs a label")
    groups = _by_class(batch)
    need = cfg.shots if cfg.head == "prototypical" else 1
    for c in range(model.n_classes):
        if len(groups.get(c, ())) < need:
            raise ContractError(f"class {c} has {len(groups.get(c, ()))} labeled samples, "
                                f"needs at least {need}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    if cfg.epochs > 0:
        if cfg.head == "prototypical":
            _train_prototypical(model, batch, cfg, rng)
        else:
            _train_linear(model, batch, cfg, rng)

    protos = None
    if cfg.head == "prototypical":
        images = np.stack([np.asarray(s.image, dtype=np.float64) for s in batch])
        protos = PrototypeSet.from_embeddings(_embed_chunked(model, images),
                                              [s.label for s in batch])
    return model, protos


def _embed_chunked(model: SmallCnn, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([model.embed(images[i:i + chunk])
                           for i in range(0, len(images), chunk)])


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, json meta, named little-endian tensors


class CheckpointError(ValueError):
    """Checkpoint file is malformed or from an unknown version."""


_MAGIC = b"EGC1"
_VERSION = 1


def save_model(model: SmallCnn, path, protos: Optional[PrototypeSet] = None) -> None:
    meta = {
        "n_classes": model.n_classes,
        "image_size": model.image_size,
        "channels": list(model.channels),
        "embed_dim": model.embed_dim,
        "proto_classes": list(protos.classes) if protos is not None else None,
    }
    blobs: list[tuple[str, np.ndarray]] = [(n, model.params[n].data) for n in model.PARAM_NAMES]
    if protos is not None:
        blobs.append(("protos", protos.vectors))
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(meta_raw)))
        fh.write(meta_raw)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> tuple[SmallCnn, Optional[PrototypeSet]]:
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"checkpoint truncated at byte {off}")
        out = data[off:off + n]
        off += n
        return out

    if take(4) != _MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(take(meta_len).decode())
    (n_blobs,) = struct.unpack("<I", take(4))
    blobs = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        blobs[name] = arr.astype(np.float64)

    params = {n: Tensor(blobs[n]) for n in SmallCnn.PARAM_NAMES}
    model = SmallCnn(meta["n_classes"], meta["image_size"], tuple(meta["channels"]),
                     meta["embed_dim"], _params=params)
    protos = None
    if meta.get("proto_classes") is not None:
        protos = PrototypeSet(classes=tuple(meta["proto_classes"]), vectors=blobs["protos"])
    return model, protos
