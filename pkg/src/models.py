"""
Layered attention models whose every layer output is exposed for training
constraints: the generic transformer layer, the tied-weight unrolled
transformer (UT) and DUST (softmax attention over sparse codes followed by a
LISTA step against an overcomplete dictionary).

Signals are batched as (M, N, T): M samples, N features, T positions. Weight
matrices multiply from the left and broadcast over the batch axis.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from .autodiff import (
    Tensor,
    TensorLike,
    add,
    as_tensor,
    cross_entropy,
    frobenius_sq,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    soft_threshold,
    softmax_rows,
    sub,
    transpose,
)
from .data_tasks import dct_basis
from .exceptions import ParameterError, ShapeError

logger = logging.getLogger(__name__)

MODEL_KINDS = ("generic", "ut", "dust")
ORIENTATIONS = ("source", "row")

INIT_STREAM = 7


@dataclass(frozen=True)
class Nonlinearity:
    """Layer nonlinearity: ``relu`` or ``soft_threshold`` with threshold gamma"""
    kind: str = "relu"
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("relu", "soft_threshold"):
            raise ParameterError(f"unknown nonlinearity '{self.kind}'")
        if self.gamma < 0:
            raise ParameterError(f"soft_threshold gamma must be nonnegative, got {self.gamma}")

    def __call__(self, x: TensorLike) -> Tensor:
        if self.kind == "relu":
            return relu(x)
        return soft_threshold(x, self.gamma)

    def describe(self) -> str:
        return "relu" if self.kind == "relu" else f"soft_threshold({self.gamma!r})"

    @classmethod
    def parse(cls, text: str) -> "Nonlinearity":
        text = text.strip()
        if text == "relu":
            return cls("relu")
        if text.startswith("soft_threshold(") and text.endswith(")"):
            return cls("soft_threshold", float(text[len("soft_threshold("):-1]))
        raise ParameterError(f"cannot parse nonlinearity '{text}'")


RELU = Nonlinearity("relu")


@dataclass
class AttentionLayerParams:
    """Generic layer weights: Q, K, V are D x N, W is N x D, U is N x N"""
    Q: Tensor
    K: Tensor
    V: Tensor
    W: Tensor
    U: Tensor

    def blocks(self) -> Dict[str, Tensor]:
        return {"Q": self.Q, "K": self.K, "V": self.V, "W": self.W, "U": self.U}


@dataclass
class UTLayerParams:
    """Tied-weight layer: one projection W1 (D x N) shared by query, key and
    value, and a free matrix M (N x N) whose symmetric part is the perceptron"""
    W1: Tensor
    M: Tensor

    def blocks(self) -> Dict[str, Tensor]:
        return {"W1": self.W1, "M": self.M}

    def symmetric_weight(self) -> np.ndarray:
        return 0.5 * (self.M.data + self.M.data.T)


@dataclass
class DustLayerParams:
    """DUST layer: trainable dictionary (m x D_codes) with fixed step constants"""
    dictionary: Tensor
    lambda1: float = 0.9
    lambda2: float = 0.25
    c: float = 1.0

    def blocks(self) -> Dict[str, Tensor]:
        return {"dictionary": self.dictionary}


@dataclass
class ReadoutParams:
    """Shared classification head: R is C x N, b has length C"""
    R: Tensor
    b: Tensor

    @property
    def num_classes(self) -> int:
        return self.R.shape[0]


LayerParams = Union[AttentionLayerParams, UTLayerParams, DustLayerParams]


@dataclass
class ModelParams:
    """Trainable tensor of a layered model plus the settings its forward pass needs

    ``n`` is the signal dimension and ``d`` the attention width (generic/UT)
    or the number of dictionary atoms (DUST).
    """
    kind: str
    n: int
    d: int
    layers: List[LayerParams]
    nonlinearity: Nonlinearity = RELU
    readout: Optional[ReadoutParams] = None
    orientation: str = "source"
    eta: float = 1.0
    shared_dictionary: bool = False

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ParameterError(f"unknown model kind '{self.kind}'")
        if not self.layers:
            raise ParameterError("a model needs at least one layer")
        if self.orientation not in ORIENTATIONS:
            raise ParameterError(f"unknown attention orientation '{self.orientation}'")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def named_blocks(self) -> "OrderedDict[str, Tensor]":
        """Every trainable tensor once, in checkpoint order"""
        blocks: "OrderedDict[str, Tensor]" = OrderedDict()
        seen = set()
        for index, layer in enumerate(self.layers):
            for name, tensor in layer.blocks().items():
                if id(tensor) in seen:
                    continue
                seen.add(id(tensor))
                prefix = "shared" if self.shared_dictionary and self.kind == "dust" else f"layer{index}"
                blocks[f"{prefix}.{name}"] = tensor
        if self.readout is not None:
            blocks["readout.R"] = self.readout.R
            blocks["readout.b"] = self.readout.b
        return blocks

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.named_blocks().values())


def _check_matrix(name: str, tensor: Tensor, rows: int, cols: int):
    if tensor.shape != (rows, cols):
        raise ShapeError(f"{name} must be {rows}x{cols}, got {tensor.shape}")


def _check_signal(name: str, x: Tensor, rows: int):
    if x.ndim not in (2, 3) or x.shape[-2] != rows:
        raise ShapeError(f"{name} must be ({rows}, T) or (M, {rows}, T), got {x.shape}")


def attention_weights(scores: Tensor, orientation: str = "source") -> Tensor:
    """Softmax of a T x T score matrix used as right factor of the attention

    ``source`` makes each output position's weights over source positions
    sum to 1 (columns of the result); ``row`` normalizes the rows of the
    score matrix as typeset.
    """
    if orientation == "source":
        return transpose(softmax_rows(transpose(scores)))
    if orientation == "row":
        return softmax_rows(scores)
    raise ParameterError(f"unknown attention orientation '{orientation}'")


def attention_forward(X: TensorLike, p: AttentionLayerParams, orientation: str = "source") -> Tensor:
    """Z = (V X) sm[(Q X)^T (K X)]"""
    X = as_tensor(X)
    d, n = p.Q.shape
    _check_signal("X", X, n)
    for name in ("Q", "K", "V"):
        _check_matrix(name, getattr(p, name), d, n)
    qx = matmul(p.Q, X)
    kx = matmul(p.K, X)
    vx = matmul(p.V, X)
    scores = matmul(transpose(qx), kx)
    return matmul(vx, attention_weights(scores, orientation))


def layer_forward(
    X: TensorLike,
    p: AttentionLayerParams,
    nonlin: Nonlinearity = RELU,
    orientation: str = "source",
) -> Tensor:
    """Y = sigma(W Z + U X) with Z from ``attention_forward``"""
    X = as_tensor(X)
    d, n = p.Q.shape
    _check_matrix("W", p.W, n, d)
    _check_matrix("U", p.U, n, n)
    z = attention_forward(X, p, orientation)
    return nonlin(add(matmul(p.W, z), matmul(p.U, X)))


def ut_layer_forward(
    X: TensorLike,
    p: UTLayerParams,
    nonlin: Nonlinearity = RELU,
    eta: float = 1.0,
    orientation: str = "source",
) -> Tensor:
    """X_half = (1 - eta) X + eta X sm[(W1 X)^T (W1 X)]; X_next = sigma(Ws X_half)"""
    X = as_tensor(X)
    d, n = p.W1.shape
    _check_signal("X", X, n)
    _check_matrix("M", p.M, n, n)
    if not 0.0 < eta <= 1.0:
        raise ParameterError(f"UT step eta must lie in (0, 1], got {eta}")
    projected = matmul(p.W1, X)
    attended = matmul(X, attention_weights(matmul(transpose(projected), projected), orientation))
    half = attended if eta == 1.0 else add(mul(X, 1.0 - eta), mul(attended, eta))
    symmetric = mul(add(p.M, transpose(p.M)), 0.5)
    return nonlin(matmul(symmetric, half))


def dust_layer_forward(H: TensorLike, X: TensorLike, p: DustLayerParams, orientation: str = "source") -> Tensor:
    """One DUST step on codes H given the noisy signal X

    H' = lambda2 H sm(H^T D^T D H)
    H+ = soft_threshold_{lambda1/c}((I - D^T D / c) H' + D^T X / c)
    """
    if p.c <= 0:
        raise ParameterError(f"DUST step constant c must be positive, got {p.c}")
    H = as_tensor(H)
    X = as_tensor(X)
    m, atoms = p.dictionary.shape
    _check_signal("X", X, m)
    _check_signal("H", H, atoms)
    dt = transpose(p.dictionary)
    gram = matmul(dt, p.dictionary)
    attended = mul(matmul(H, attention_weights(matmul(transpose(H), matmul(gram, H)), orientation)), p.lambda2)
    inv_c = 1.0 / p.c
    update = add(sub(attended, mul(matmul(gram, attended), inv_c)), mul(matmul(dt, X), inv_c))
    return soft_threshold(update, p.lambda1 * inv_c)


def dust_reconstruct(H: TensorLike, dictionary: TensorLike) -> Tensor:
    """X_hat = D H"""
    H = as_tensor(H)
    dictionary = as_tensor(dictionary)
    _check_signal("H", H, dictionary.shape[1])
    return matmul(dictionary, H)


def readout_forward(Y: TensorLike, readout: ReadoutParams) -> Tensor:
    """Mean-pool positions, apply the linear head and a softmax

    Returns (C,) for an N x T input or (M, C) for a batch.
    """
    Y = as_tensor(Y)
    n_classes, n = readout.R.shape
    if n_classes < 2:
        raise ParameterError(f"readout needs at least 2 classes, got {n_classes}")
    _check_signal("Y", Y, n)
    pooled = mean(Y, axis=-1)
    if pooled.ndim == 1:
        pooled = reshape(pooled, (1, n))
        logits = add(matmul(pooled, transpose(readout.R)), readout.b)
        return reshape(softmax_rows(logits), (n_classes,))
    return softmax_rows(add(matmul(pooled, transpose(readout.R)), readout.b))


@dataclass
class LossContext:
    """What a forward pass is scored against

    ``target`` is the clean signal batch (denoising) or an integer label
    vector (classification). ``f0`` replaces the measured layer-0 loss in
    the constraint slot when set.
    """
    task: str
    target: np.ndarray
    f0: Optional[float] = None

    def __post_init__(self):
        if self.task not in ("denoising", "classification"):
            raise ParameterError(f"unknown task '{self.task}'")


@dataclass
class LayerTrace:
    """Per-layer outputs and per-sample losses of one forward pass (L+1 slots)"""
    outputs: List[Tensor]
    sample_losses: List[Tensor]
    f0: Optional[float] = None
    probabilities: List[Tensor] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.outputs) - 1

    def mean_losses(self) -> List[Tensor]:
        """Batch-mean loss per slot; slot 0 is f0 when a reference is configured"""
        means = [mean(loss) for loss in self.sample_losses]
        if self.f0 is not None:
            means[0] = as_tensor(float(self.f0))
        return means

    def losses(self) -> List[float]:
        return [loss.item() for loss in self.mean_losses()]

    def measured_losses(self) -> List[float]:
        return [float(np.mean(loss.data)) for loss in self.sample_losses]

    def per_sample(self) -> np.ndarray:
        """(L+1, M) array of measured per-sample losses"""
        return np.stack([loss.data.reshape(-1) for loss in self.sample_losses])


def _batched(X: TensorLike) -> Tensor:
    X = as_tensor(X)
    if X.ndim == 2:
        return reshape(X, (1,) + X.shape)
    return X


def sample_loss(Y: Tensor, ctx: LossContext, readout: Optional[ReadoutParams] = None):
    """Per-sample loss vector (M,) and class probabilities (classification only)"""
    if ctx.task == "denoising":
        target = np.asarray(ctx.target, dtype=np.float64)
        if target.ndim == 2:
            target = target[None]
        if target.shape != Y.shape:
            raise ShapeError(f"denoising target {target.shape} does not match output {Y.shape}")
        return mul(frobenius_sq(sub(target, Y), axis=(-2, -1)), 1.0 / Y.shape[-1]), None
    if readout is None:
        raise ParameterError("classification needs a readout")
    probs = readout_forward(Y, readout)
    labels = np.atleast_1d(np.asarray(ctx.target, dtype=np.int64))
    return cross_entropy(probs, labels), probs


def model_forward(X: TensorLike, params: ModelParams, ctx: LossContext) -> LayerTrace:
    """Run every layer, scoring the input and each layer output"""
    X = _batched(X)
    outputs = [X]
    losses = []
    probabilities = []

    def score(Y: Tensor):
        loss, probs = sample_loss(Y, ctx, params.readout)
        losses.append(loss)
        if probs is not None:
            probabilities.append(probs)

    score(X)
    if params.kind == "dust":
        atoms = params.d
        H = Tensor(np.zeros((X.shape[0], atoms, X.shape[-1])))
        for layer in params.layers:
            H = dust_layer_forward(H, X, layer, params.orientation)
            Y = dust_reconstruct(H, layer.dictionary)
            outputs.append(Y)
            score(Y)
    else:
        Y = X
        for layer in params.layers:
            if params.kind == "ut":
                Y = ut_layer_forward(Y, layer, params.nonlinearity, params.eta, params.orientation)
            else:
                Y = layer_forward(Y, layer, params.nonlinearity, params.orientation)
            outputs.append(Y)
            score(Y)
    return LayerTrace(outputs=outputs, sample_losses=losses, f0=ctx.f0, probabilities=probabilities)


def predict_labels(Y: TensorLike, readout: ReadoutParams) -> np.ndarray:
    probs = readout_forward(_batched(Y), readout)
    return np.argmax(probs.data, axis=-1)


def energy_g1(X: np.ndarray, W: np.ndarray) -> float:
    """Attention energy: -sum_t sum_u exp(-|Wx_t - Wx_u|^2 / 2) + sum_t |Wx_t|^2 / 2"""
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] != X.shape[0]:
        raise ShapeError(f"W {W.shape} cannot multiply X {X.shape}")
    projected = W @ X
    squared = np.sum(projected * projected, axis=0)
    distances = squared[:, None] + squared[None, :] - 2.0 * projected.T @ projected
    distances = np.maximum(distances, 0.0)
    return float(-np.sum(np.exp(-0.5 * distances)) + 0.5 * np.sum(squared))


def dct_dictionary(m: int, atoms: int) -> np.ndarray:
    """Overcomplete DCT dictionary (m x atoms)

    The orthonormal DCT-II basis of the signal axis, tiled column-wise to
    ``atoms`` columns and scaled to unit spectral norm, so c = 1 bounds the
    Lipschitz constant of the reconstruction gradient.
    """
    if atoms < 1 or m < 1:
        raise ParameterError(f"dictionary needs positive sizes, got {m}x{atoms}")
    basis = dct_basis(m)
    tiled = np.tile(basis, (1, math.ceil(atoms / m)))[:, :atoms]
    return tiled / np.linalg.norm(tiled, 2)


def _uniform(rng: np.random.Generator, rows: int, cols: int, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True, name=name)


def init_model(
    kind: str,
    n: int,
    d: int,
    layers: int,
    nonlinearity: Nonlinearity = RELU,
    num_classes: Optional[int] = None,
    seed: int = 0,
    orientation: str = "source",
    eta: float = 1.0,
    shared_dictionary: bool = False,
    lambda1: float = 0.9,
    lambda2: float = 0.25,
    c: float = 1.0,
) -> ModelParams:
    """Seeded initialization

    Generic/UT weights are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    DUST dictionaries start at the overcomplete DCT, one per layer unless
    ``shared_dictionary``.
    """
    if layers < 1:
        raise ParameterError(f"a model needs at least one layer, got {layers}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(INIT_STREAM,)))
    built: List[LayerParams] = []
    if kind == "generic":
        for index in range(layers):
            built.append(AttentionLayerParams(
                Q=_uniform(rng, d, n, n, f"layer{index}.Q"),
                K=_uniform(rng, d, n, n, f"layer{index}.K"),
                V=_uniform(rng, d, n, n, f"layer{index}.V"),
                W=_uniform(rng, n, d, d, f"layer{index}.W"),
                U=_uniform(rng, n, n, n, f"layer{index}.U"),
            ))
    elif kind == "ut":
        for index in range(layers):
            built.append(UTLayerParams(
                W1=_uniform(rng, d, n, n, f"layer{index}.W1"),
                M=_uniform(rng, n, n, n, f"layer{index}.M"),
            ))
    elif kind == "dust":
        if d <= n:
            raise ParameterError(f"DUST dictionary must be overcomplete, got {n}x{d}")
        base = dct_dictionary(n, d)
        shared = Tensor(base, requires_grad=True, name="shared.dictionary") if shared_dictionary else None
        for index in range(layers):
            if shared is not None:
                dictionary = shared
            else:
                dictionary = Tensor(base, requires_grad=True, name=f"layer{index}.dictionary")
            built.append(DustLayerParams(dictionary, lambda1, lambda2, c))
    else:
        raise ParameterError(f"unknown model kind '{kind}'")

    readout = None
    if num_classes is not None:
        readout = ReadoutParams(
            R=_uniform(rng, num_classes, n, n, "readout.R"),
            b=Tensor(np.zeros(num_classes), requires_grad=True, name="readout.b"),
        )
    params = ModelParams(
        kind=kind, n=n, d=d, layers=built, nonlinearity=nonlinearity, readout=readout,
        orientation=orientation, eta=eta, shared_dictionary=shared_dictionary and kind == "dust",
    )
    logger.debug(f"Initialized {kind} model: L={layers}, {params.parameter_count()} parameters")
    return params


def clone_params(params: ModelParams) -> ModelParams:
    """Deep copy with fresh tensors; shared blocks stay shared"""
    copies: Dict[int, Tensor] = {}

    def copy(tensor: Tensor) -> Tensor:
        if id(tensor) not in copies:
            copies[id(tensor)] = Tensor(tensor.data, requires_grad=tensor.requires_grad, name=tensor.name)
        return copies[id(tensor)]

    layers: List[LayerParams] = []
    for layer in params.layers:
        if isinstance(layer, AttentionLayerParams):
            layers.append(AttentionLayerParams(*(copy(t) for t in (layer.Q, layer.K, layer.V, layer.W, layer.U))))
        elif isinstance(layer, UTLayerParams):
            layers.append(UTLayerParams(copy(layer.W1), copy(layer.M)))
        else:
            layers.append(DustLayerParams(copy(layer.dictionary), layer.lambda1, layer.lambda2, layer.c))
    readout = None
    if params.readout is not None:
        readout = ReadoutParams(copy(params.readout.R), copy(params.readout.b))
    return ModelParams(
        kind=params.kind, n=params.n, d=params.d, layers=layers, nonlinearity=params.nonlinearity,
        readout=readout, orientation=params.orientation, eta=params.eta,
        shared_dictionary=params.shared_dictionary,
    )
