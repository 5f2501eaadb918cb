"""Pluggable classifier backends plus the reference model.

The reference model is multinomial logistic regression over downsampled
grayscale pixels: small enough to train in seconds at desk scale, with a
hand-verifiable analytic gradient. Any backend satisfying the
ConfidenceVector contract can be registered per plot type; the reference
implementation is backend "softmax-v1".

Model blob layout (little-endian):
    magic "HYDM" | u16 format version | u32 header length | header JSON
    | weights (K*D float64, row-major) | bias (K float64)
The JSON header carries class names, input dims, and the train/split
configs the model was built with.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .dataset import ManifestRow
from .errors import (
    BackendUnavailable,
    CorruptImage,
    DimensionMismatch,
    EmptyClass,
    NonFiniteLoss,
)

logger = logging.getLogger(__name__)

BLOB_MAGIC = b"HYDM"
BLOB_VERSION = 1

DEFAULT_INPUT_DIMS = (64, 48)  # (width, height), keeps the 4:3 plot aspect

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class ImageTensor:
    """Grayscale image as a row-major [0,1] pixel vector."""

    width: int
    height: int
    pixels: np.ndarray  # shape (height * width,), float64

    def __post_init__(self) -> None:
        if self.pixels.shape != (self.width * self.height,):
            raise ValueError("pixel count must equal width * height")


@dataclass(frozen=True)
class ModelParams:
    """Immutable trained parameters of the reference model."""

    class_names: tuple[str, ...]
    weights: np.ndarray  # (K, D)
    bias: np.ndarray     # (K,)
    input_dims: tuple[int, int]  # (width, height)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_features(self) -> int:
        return self.input_dims[0] * self.input_dims[1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 32
    l2: float = 1e-4
    seed: int = 0
    input_dims: tuple[int, int] = DEFAULT_INPUT_DIMS

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be a positive integer")
        if self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        if self.input_dims[0] < 1 or self.input_dims[1] < 1:
            raise ValueError("input_dims must be positive")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "l2": self.l2,
            "seed": self.seed,
            "input_dims": list(self.input_dims),
        }


@dataclass(frozen=True)
class ConfidenceVector:
    """Per-class probabilities in the model's declared class order."""

    entries: tuple[tuple[str, float], ...]

    def prob(self, class_name: str) -> float:
        for name, p in self.entries:
            if name == class_name:
                return p
        raise KeyError(class_name)

    def argmax(self) -> tuple[str, float]:
        """(class, probability) of the largest entry; ties -> lowest index."""
        best = 0
        for i in range(1, len(self.entries)):
            if self.entries[i][1] > self.entries[best][1]:
                best = i
        return self.entries[best]

    def to_pairs(self) -> list[list]:
        return [[c, p] for c, p in self.entries]


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def bilinear_resize(image: np.ndarray, out_width: int, out_height: int) -> np.ndarray:
    """Separable bilinear resample with half-pixel centers and edge clamp."""
    in_height, in_width = image.shape
    if (in_width, in_height) == (out_width, out_height):
        return image.astype(np.float64, copy=True)
    x = (np.arange(out_width) + 0.5) * (in_width / out_width) - 0.5
    y = (np.arange(out_height) + 0.5) * (in_height / out_height) - 0.5
    x_floor = np.floor(x)
    y_floor = np.floor(y)
    tx = x - x_floor
    ty = y - y_floor
    x0 = np.clip(x_floor.astype(int), 0, in_width - 1)
    x1 = np.clip(x_floor.astype(int) + 1, 0, in_width - 1)
    y0 = np.clip(y_floor.astype(int), 0, in_height - 1)
    y1 = np.clip(y_floor.astype(int) + 1, 0, in_height - 1)
    rows = image[y0, :] * (1.0 - ty)[:, None] + image[y1, :] * ty[:, None]
    return rows[:, x0] * (1.0 - tx)[None, :] + rows[:, x1] * tx[None, :]


def preprocess(png_bytes: bytes, input_dims: tuple[int, int] = DEFAULT_INPUT_DIMS) -> ImageTensor:
    """Decode PNG -> RGB -> luma grayscale -> bilinear resample -> [0,1]."""
    try:
        with Image.open(io.BytesIO(png_bytes)) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise CorruptImage(str(exc)) from exc
    gray = (
        LUMA_WEIGHTS[0] * rgb[:, :, 0]
        + LUMA_WEIGHTS[1] * rgb[:, :, 1]
        + LUMA_WEIGHTS[2] * rgb[:, :, 2]
    )
    width, height = input_dims
    resized = bilinear_resize(gray, width, height) / 255.0
    return ImageTensor(width=width, height=height, pixels=resized.reshape(-1))


# ---------------------------------------------------------------------------
# model math
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def predict(params: ModelParams, tensor: ImageTensor) -> ConfidenceVector:
    if (tensor.width, tensor.height) != params.input_dims:
        raise DimensionMismatch(
            f"tensor is {tensor.width}x{tensor.height}, model wants "
            f"{params.input_dims[0]}x{params.input_dims[1]}"
        )
    probs = softmax(params.weights @ tensor.pixels + params.bias)
    return ConfidenceVector(tuple(zip(params.class_names, probs.tolist())))


def loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy + (l2/2)*||W||^2 and its exact analytic gradient.

    X is (N, D), y is (N,) class indices. Returns (loss, dW, db).
    The loss uses log-sum-exp directly so it stays finite even when the
    softmax saturates.
    """
    n = X.shape[0]
    logits = X @ weights.T + bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(n), y].mean() + 0.5 * l2 * float((weights * weights).sum())
    probs = np.exp(log_probs)
    probs[np.arange(n), y] -= 1.0
    dW = probs.T @ X / n + l2 * weights
    db = probs.mean(axis=0)
    return float(loss), dW, db


def _load_design_matrix(
    manifest: Sequence[ManifestRow],
    class_names: Sequence[str],
    loader: Callable[[str], ImageTensor],
) -> tuple[np.ndarray, np.ndarray]:
    index = {name: i for i, name in enumerate(class_names)}
    cache: dict[str, np.ndarray] = {}
    rows = []
    labels = []
    for row in manifest:
        if row.path not in cache:
            cache[row.path] = loader(row.path).pixels
        rows.append(cache[row.path])
        labels.append(index[row.class_name])
    return np.stack(rows), np.asarray(labels, dtype=np.int64)


def _default_loader(input_dims: tuple[int, int]) -> Callable[[str], ImageTensor]:
    def load(path: str) -> ImageTensor:
        with open(path, "rb") as fh:
            return preprocess(fh.read(), input_dims)

    return load


def train(
    train_manifest: Sequence[ManifestRow],
    validation_manifest: Sequence[ManifestRow],
    config: TrainConfig,
    class_names: Sequence[str] | None = None,
    loader: Callable[[str], ImageTensor] | None = None,
) -> tuple[ModelParams, dict]:
    """Seeded mini-batch gradient descent on the reference model.

    Deterministic for fixed inputs and config; runs every epoch with no
    early stopping (overfitting is tolerated by design, the inference
    distribution matches training). Raises EmptyClass when a class has no
    training row and NonFiniteLoss on divergence.
    """
    if class_names is None:
        class_names = sorted({row.class_name for row in train_manifest})
    class_names = tuple(class_names)
    present = {row.class_name for row in train_manifest}
    for name in class_names:
        if name not in present:
            raise EmptyClass(f"class {name!r} has no examples in the train set")
    loader = loader or _default_loader(config.input_dims)
    X, y = _load_design_matrix(train_manifest, class_names, loader)
    n, d = X.shape
    k = len(class_names)

    weights = np.zeros((k, d), dtype=np.float64)
    bias = np.zeros(k, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))

    loss_history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            loss, dW, db = loss_and_grad(weights, bias, X[batch], y[batch], config.l2)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss diverged at epoch {epoch}: {loss}")
            weights -= config.learning_rate * dW
            bias -= config.learning_rate * db
            epoch_losses.append(loss)
        epoch_loss = float(np.mean(epoch_losses))
        loss_history.append(epoch_loss)
        logger.info("epoch %d/%d loss=%.6f", epoch + 1, config.epochs, epoch_loss)

    params = ModelParams(class_names, weights, bias, config.input_dims)
    train_acc = _accuracy(params, X, y)
    if validation_manifest:
        Xv, yv = _load_design_matrix(validation_manifest, class_names, loader)
        val_acc = _accuracy(params, Xv, yv)
    else:
        val_acc = float("nan")
    metrics = {
        "final_loss": loss_history[-1],
        "train_acc": train_acc,
        "val_acc": val_acc,
        "epochs_run": config.epochs,
        "loss_history": loss_history,
    }
    return params, metrics


def _accuracy(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    logits = X @ params.weights.T + params.bias
    return float((logits.argmax(axis=1) == y).mean())


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def serialize_params(
    params: ModelParams,
    train_config: dict | None = None,
    split_config: dict | None = None,
) -> bytes:
    header = json.dumps(
        {
            "class_names": list(params.class_names),
            "input_dims": list(params.input_dims),
            "train_config": train_config or {},
            "split_config": split_config or {},
        }
    ).encode("utf-8")
    parts = [
        BLOB_MAGIC,
        struct.pack("<H", BLOB_VERSION),
        struct.pack("<I", len(header)),
        header,
        np.ascontiguousarray(params.weights, dtype="<f8").tobytes(),
        np.ascontiguousarray(params.bias, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def deserialize_params(blob: bytes) -> tuple[ModelParams, dict]:
    """(params, header dict). Raises ValueError on a malformed blob."""
    if blob[:4] != BLOB_MAGIC:
        raise ValueError("bad model blob magic")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != BLOB_VERSION:
        raise ValueError(f"unsupported model blob version {version}")
    (header_len,) = struct.unpack_from("<I", blob, 6)
    header = json.loads(blob[10 : 10 + header_len].decode("utf-8"))
    class_names = tuple(header["class_names"])
    width, height = header["input_dims"]
    k = len(class_names)
    d = width * height
    offset = 10 + header_len
    expected = offset + 8 * (k * d + k)
    if len(blob) != expected:
        raise ValueError(f"model blob is {len(blob)} bytes, expected {expected}")
    weights = np.frombuffer(blob, dtype="<f8", count=k * d, offset=offset).reshape(k, d)
    bias = np.frombuffer(blob, dtype="<f8", count=k, offset=offset + 8 * k * d)
    params = ModelParams(class_names, weights.copy(), bias.copy(), (width, height))
    return params, header


# ---------------------------------------------------------------------------
# backend registry
# ---------------------------------------------------------------------------

class Backend(Protocol):
    """Anything that can turn a model blob plus PNG bytes into confidences."""

    name: str

    def load(self, model_blob: bytes) -> object: ...

    def infer(self, handle: object, png_bytes: bytes) -> ConfidenceVector: ...


class SoftmaxBackend:
    """Reference backend: preprocess to the model's dims, then softmax."""

    name = "softmax-v1"

    def load(self, model_blob: bytes) -> ModelParams:
        params, _ = deserialize_params(model_blob)
        return params

    def infer(self, handle: ModelParams, png_bytes: bytes) -> ConfidenceVector:
        tensor = preprocess(png_bytes, handle.input_dims)
        return predict(handle, tensor)


_BACKENDS: dict[str, Backend] = {}


def register_backend(backend: Backend) -> None:
    _BACKENDS[backend.name] = backend


def get_backend(name: str) -> Backend:
    try:
        return _BACKENDS[name]
    except KeyError:
        raise BackendUnavailable(name) from None


register_backend(SoftmaxBackend())
