"""Parameters, embeddings, the bidirectional LSTM encoder and checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .textdata import SchemaVersionError

CHECKPOINT_MAGIC = b"RLSUMCKP"
CHECKPOINT_VERSION = 1

PROFILES = {
    "desk": {"d_emb": 32, "d_enc": 32, "d_dec": 64},
    "paper": {"d_emb": 100, "d_enc": 200, "d_dec": 400},
}


@dataclass(frozen=True)
class ModelConfig:
    vocab_in: int
    vocab_out: int
    d_emb: int = 32
    d_enc: int = 32
    d_dec: int = 64
    intra_decoder: bool = True

    def __post_init__(self):
        if self.d_dec != 2 * self.d_enc:
            raise ValueError(f"d_dec ({self.d_dec}) must equal 2 * d_enc ({self.d_enc})")
        if self.vocab_out > self.vocab_in:
            raise ValueError("output vocabulary must be a prefix of the input vocabulary")
        if min(self.vocab_out, self.d_emb, self.d_enc) < 1:
            raise ValueError("dimensions must be positive")

    @classmethod
    def from_profile(cls, profile: str, vocab_in: int, vocab_out: int, **kw) -> "ModelConfig":
        return cls(vocab_in=vocab_in, vocab_out=vocab_out, **PROFILES[profile], **kw)

    @property
    def feature_dim(self) -> int:
        """Width of ``[h^d ∥ c^e ∥ c^d]`` (``c^d`` dropped without intra-decoder attention)."""
        return self.d_dec + 2 * self.d_enc + (self.d_dec if self.intra_decoder else 0)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in checkpoint order."""
        E, He, Hd, D = self.d_emb, self.d_enc, self.d_dec, self.feature_dim
        shapes = {
            "W_emb": (self.vocab_in, E),
            "enc_fwd_Wx": (4 * He, E),
            "enc_fwd_Wh": (4 * He, He),
            "enc_fwd_b": (4 * He,),
            "enc_bwd_Wx": (4 * He, E),
            "enc_bwd_Wh": (4 * He, He),
            "enc_bwd_b": (4 * He,),
            "dec_Wx": (4 * Hd, E),
            "dec_Wh": (4 * Hd, Hd),
            "dec_b": (4 * Hd,),
            "W_e_attn": (Hd, 2 * He),
        }
        if self.intra_decoder:
            shapes["W_d_attn"] = (Hd, Hd)
        shapes.update({"W_proj": (E, D), "b_out": (self.vocab_out,), "W_u": (D,), "b_u": ()})
        return shapes


class ModelParams:
    """Every learned array of the model, keyed by name in checkpoint order."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray], vocab_digest: str = ""):
        shapes = config.shapes()
        if list(arrays) != list(shapes):
            missing = set(shapes) ^ set(arrays)
            if missing:
                raise ValueError(f"parameter set mismatch: {sorted(missing)}")
            arrays = {k: arrays[k] for k in shapes}
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arrays[name].shape}")
        self.config = config
        self.arrays = {k: np.asarray(v, dtype=np.float64, order="C") for k, v in arrays.items()}
        self.vocab_digest = vocab_digest

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, scale: float = 0.1, vocab_digest: str = ""):
        """Uniform(-scale, scale) matrices, zero biases, forget-gate biases at 1."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in config.shapes().items():
            if name.endswith("_b") or name in ("b_out", "b_u"):
                arr = np.zeros(shape)
                if name.endswith("_b"):
                    H = shape[0] // 4
                    arr[H : 2 * H] = 1.0
            else:
                arr = rng.uniform(-scale, scale, size=shape)
            arrays[name] = arr
        return cls(config, arrays, vocab_digest)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.vocab_digest)

    def tensors(self) -> dict[str, Tensor]:
        """Differentiable leaves sharing storage with ``arrays``."""
        return {k: ad.parameter(v, name=k) for k, v in self.arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: ad.tensor(v, name=k) for k, v in self.arrays.items()}

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        return load_checkpoint(path)


# ---------------------------------------------------------------------------
# building blocks


def lstm_cell(x, h_prev, c_prev, Wx, Wh, b):
    """Single LSTM step on plain arrays; gate order input, forget, candidate, output."""
    H = h_prev.shape[0]
    if Wx.shape != (4 * H, x.shape[0]) or Wh.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm_cell: x {x.shape}, h {h_prev.shape}, Wx {Wx.shape}, Wh {Wh.shape}, b {b.shape}")
    h, c, _ = ad._lstm_gates(Wx @ x + Wh @ h_prev + b, c_prev)
    return h, c


def embed(ids, W_emb: Tensor) -> Tensor:
    """Row lookup; gradients scatter into the looked-up rows only."""
    return ad.embedding(W_emb, ids)


def shared_output_matrix(W_emb_out: Tensor, W_proj: Tensor) -> Tensor:
    """``tanh(W_emb W_proj)`` over the output-vocabulary rows of the embedding table."""
    return ad.tanh(ad.matmul(W_emb_out, W_proj))


class EncoderStates(NamedTuple):
    states: Tensor  # (n, 2 d_enc): [forward ∥ backward] per position
    final: Tensor  # h^e_n


def _run_lstm(emb: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor, h0, c0) -> Tensor:
    xproj = ad.matmul(emb, Wx.T) + b
    return ad.lstm_sequence(xproj, h0, c0, Wh)


def encode(ids, p: dict[str, Tensor]) -> EncoderStates:
    """Bidirectional LSTM over the input ids."""
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    if n == 0:
        raise ValueError("cannot encode an empty input")
    H = p["enc_fwd_Wh"].shape[1]
    zero = ad.tensor(np.zeros(H))
    emb = embed(ids, p["W_emb"])
    fwd = _run_lstm(emb, p["enc_fwd_Wx"], p["enc_fwd_Wh"], p["enc_fwd_b"], zero, zero)[:, :H]
    rev = np.arange(n - 1, -1, -1)
    bwd = _run_lstm(emb[rev], p["enc_bwd_Wx"], p["enc_bwd_Wh"], p["enc_bwd_b"], zero, zero)[:, :H]
    states = ad.concat([fwd, bwd[rev]], axis=1)
    return EncoderStates(states, states[n - 1])


def load_word_vectors(params: ModelParams, itos: list[str], path: str | Path) -> int:
    """Overwrite embedding rows from a ``token v1 v2 ...`` text file.

    Tokens are matched by string; rows without a match keep their values.
    Returns the number of rows replaced.
    """
    index = {tok: i for i, tok in enumerate(itos)}
    W = params.arrays["W_emb"]
    hits = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != W.shape[1] + 1:
                continue
            row = index.get(parts[0])
            if row is not None:
                W[row] = np.asarray(parts[1:], dtype=np.float64)
                hits += 1
    return hits


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: magic (8 bytes) | version (u32 LE) | header length (u32 LE) |
# header JSON (utf-8) | parameters as little-endian float64, in header order.


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    shapes = params.config.shapes()
    header = {
        "config": asdict(params.config),
        "vocab_digest": params.vocab_digest,
        "params": [[name, list(shape)] for name, shape in shapes.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in shapes:
            fh.write(params.arrays[name].astype("<f8").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(8) != CHECKPOINT_MAGIC:
        raise SchemaVersionError(f"{path}: not a checkpoint file")
    version, size = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise SchemaVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    return json.loads(fh.read(size).decode("utf-8"))


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        config = ModelConfig(**header["config"])
        arrays = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated checkpoint at {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return ModelParams(config, arrays, header.get("vocab_digest", ""))


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
