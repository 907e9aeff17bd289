"""Trainable networks: point encoders, the shape decoder, weights I/O.

Both networks are plain parameter dicts plus forward functions. Each forward
has two twins: `forward` builds a graph on a tape for training, `forward_np`
runs the identical numpy op sequence without a tape for inference, so the
two agree bit for bit.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .errors import ContractError, FormatError, StateError
from .geometry import as_cloud

WEIGHTS_MAGIC = b"PPCW"
WEIGHTS_VERSION = 1


def _init_linear(rng, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return w, b


class PointEncoder:
    """Per-point MLP (3 -> hidden -> hidden -> feature) with max pooling.

    The channel-wise max over points makes the output feature exactly
    permutation-invariant and insensitive to duplicated points.
    """

    def __init__(self, hidden: int, feature_dim: int, rng):
        self.hidden = hidden
        self.feature_dim = feature_dim
        w1, b1 = _init_linear(rng, 3, hidden)
        w2, b2 = _init_linear(rng, hidden, hidden)
        w3, b3 = _init_linear(rng, hidden, feature_dim)
        self.params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2, "w3": w3, "b3": b3}

    def lift(self, tape: ad.Tape) -> dict[str, ad.Tensor]:
        return {k: tape.tensor(v) for k, v in self.params.items()}

    def forward(self, tape: ad.Tape, cloud, lifted=None) -> ad.Tensor:
        cloud = as_cloud(cloud)
        p = lifted if lifted is not None else self.lift(tape)
        x = tape.tensor(cloud)
        h = (x @ p["w1"] + p["b1"]).relu()
        h = (h @ p["w2"] + p["b2"]).relu()
        return (h @ p["w3"] + p["b3"]).max(axis=0)

    def forward_np(self, cloud) -> np.ndarray:
        cloud = as_cloud(cloud)
        p = self.params
        h = np.maximum(cloud @ p["w1"] + p["b1"], 0.0)
        h = np.maximum(h @ p["w2"] + p["b2"], 0.0)
        return (h @ p["w3"] + p["b3"]).max(axis=0)


class ShapeDecoder:
    """Maps a fused feature to sparse centers and a dense completion.

    The dense cloud replicates each center `expansion` times and adds a
    learned offset to every copy, so its size is num_centers * expansion.
    """

    def __init__(self, fused_dim: int, hidden: int, num_centers: int, expansion: int, rng):
        self.fused_dim = fused_dim
        self.hidden = hidden
        self.num_centers = num_centers
        self.expansion = expansion
        w1, b1 = _init_linear(rng, fused_dim, hidden)
        w2, b2 = _init_linear(rng, hidden, num_centers * 3)
        w3, b3 = _init_linear(rng, hidden, num_centers * expansion * 3)
        self.params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2, "w3": w3, "b3": b3}

    @property
    def dense_size(self) -> int:
        return self.num_centers * self.expansion

    def lift(self, tape: ad.Tape) -> dict[str, ad.Tensor]:
        return {k: tape.tensor(v) for k, v in self.params.items()}

    def forward(self, tape: ad.Tape, fused: ad.Tensor, lifted=None):
        if fused.shape != (self.fused_dim,):
            raise ContractError(
                f"fused feature has shape {fused.shape}, expected ({self.fused_dim},)"
            )
        p = lifted if lifted is not None else self.lift(tape)
        h = (fused.reshape((1, self.fused_dim)) @ p["w1"] + p["b1"]).relu()
        centers = (h @ p["w2"] + p["b2"]).reshape((self.num_centers, 3))
        offsets = (h @ p["w3"] + p["b3"]).reshape((self.dense_size, 3))
        dense = ad.tile_rows(centers, self.expansion) + offsets
        return centers, dense

    def forward_np(self, fused: np.ndarray):
        if fused.shape != (self.fused_dim,):
            raise ContractError(
                f"fused feature has shape {fused.shape}, expected ({self.fused_dim},)"
            )
        p = self.params
        h = np.maximum(fused.reshape(1, -1) @ p["w1"] + p["b1"], 0.0)
        centers = (h @ p["w2"] + p["b2"]).reshape(self.num_centers, 3)
        offsets = (h @ p["w3"] + p["b3"]).reshape(self.dense_size, 3)
        dense = np.repeat(centers, self.expansion, axis=0) + offsets
        return centers, dense


# -- weights file ------------------------------------------------------------


def save_weights(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: magic, u16 version, then per array a u16
    name length, name bytes, u8 rank, u32 extents, little-endian f64 payload."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<H", WEIGHTS_VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.astype("<f8").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    """Read a weights file written by save_weights."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise StateError(f"cannot read weights file {path}: {exc}") from None
    if len(blob) < 6:
        raise FormatError(f"{path}: file too short for a weights header")
    if blob[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    arrays: dict[str, np.ndarray] = {}
    off = 6
    while off < len(blob):
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            if len(blob[off:off + name_len]) != name_len:
                raise struct.error
            off += name_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = blob[off:off + 8 * count]
            if len(payload) != 8 * count:
                raise struct.error
            off += 8 * count
        except struct.error:
            raise FormatError(f"{path}: truncated array record at byte {off}") from None
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return arrays


def pack_params(prefix: str, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in params.items()}


def unpack_params(arrays: dict[str, np.ndarray], prefix: str,
                  expected: dict[str, tuple]) -> dict[str, np.ndarray]:
    """Extract `prefix`-scoped arrays, checking names and shapes."""
    out = {}
    for key, shape in expected.items():
        name = f"{prefix}/{key}"
        if name not in arrays:
            raise FormatError(f"weights file is missing array {name!r}")
        arr = arrays[name]
        if arr.shape != shape:
            raise FormatError(
                f"array {name!r} has shape {arr.shape}, expected {shape}"
            )
        out[key] = arr
    return out


class CompletionModel:
    """Bundle of partial encoder, complete encoder, and decoder."""

    def __init__(self, feature_dim: int, hidden: int, decoder_hidden: int,
                 num_centers: int, expansion: int, prior_count: int, seed: int):
        self.feature_dim = feature_dim
        self.prior_count = prior_count
        rng = np.random.default_rng([seed, 11])
        self.encoder_partial = PointEncoder(hidden, feature_dim, rng)
        self.encoder_complete = PointEncoder(hidden, feature_dim, rng)
        self.decoder = ShapeDecoder(
            feature_dim * (1 + prior_count), decoder_hidden, num_centers, expansion, rng
        )

    @property
    def prior_dim(self) -> int:
        return self.feature_dim * self.prior_count

    def save(self, path) -> None:
        arrays = {}
        arrays.update(pack_params("enc_partial", self.encoder_partial.params))
        arrays.update(pack_params("enc_complete", self.encoder_complete.params))
        arrays.update(pack_params("decoder", self.decoder.params))
        save_weights(path, arrays)

    def load(self, path) -> None:
        """Load weights in place; shapes must match this model's dimensions."""
        arrays = load_weights(path)
        for prefix, net in (("enc_partial", self.encoder_partial),
                            ("enc_complete", self.encoder_complete),
                            ("decoder", self.decoder)):
            expected = {k: v.shape for k, v in net.params.items()}
            net.params = unpack_params(arrays, prefix, expected)

    def load_encoders(self, path) -> None:
        """Load only the two encoders (decoder keeps its initialization)."""
        arrays = load_weights(path)
        for prefix, net in (("enc_partial", self.encoder_partial),
                            ("enc_complete", self.encoder_complete)):
            expected = {k: v.shape for k, v in net.params.items()}
            net.params = unpack_params(arrays, prefix, expected)


# -- optimizer ---------------------------------------------------------------


class SgdMomentum:
    """SGD with classical momentum and stepwise learning-rate decay."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 momentum: float = 0.9, decay: float = 0.76, decay_every: int = 20):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.decay = decay
        self.decay_every = decay_every
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_every)

    def step(self, grads: dict[str, np.ndarray], epoch: int) -> None:
        lr = self.lr_at(epoch)
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v += g
            self.params[k] -= lr * v


class AdamW:
    """Adam with decoupled weight decay and the same stepwise lr decay.

    Plain SGD cannot train the contrastive objective here: max-pooled
    features start nearly collinear and the loss plateaus at its
    constant-similarity fixed point, so per-parameter step scaling is
    load-bearing rather than a convenience.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 decay: float = 0.76, decay_every: int = 20):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay = decay
        self.decay_every = decay_every
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_every)

    def step(self, grads: dict[str, np.ndarray], epoch: int) -> None:
        lr = self.lr_at(epoch)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * self.params[k]
            self.params[k] -= lr * update


def make_optimizer(name: str, params: dict[str, np.ndarray], lr: float, *,
                   momentum: float = 0.9, weight_decay: float = 0.0,
                   decay: float = 0.76, decay_every: int = 20):
    if name == "adamw":
        return AdamW(params, lr, weight_decay=weight_decay,
                     decay=decay, decay_every=decay_every)
    if name == "sgd":
        return SgdMomentum(params, lr, momentum=momentum,
                           decay=decay, decay_every=decay_every)
    raise ContractError(f"unknown optimizer {name!r}")
