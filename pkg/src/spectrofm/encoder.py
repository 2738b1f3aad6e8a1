"""Patch tokenization, transformer encoder, masking, and task heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateProjection, SequenceTooLong, ShapeError

RECON_TARGETS = ("patch", "embedding")


@dataclass
class EncoderConfig:
    patch: int = 4
    depth: int = 4
    dim: int = 64
    heads: int = 4
    ffn_mult: int = 4
    mask_ratio: float = 0.7
    recon_target: str = "patch"
    max_len: int = 1024
    proj_dim: int | None = None
    cls_channels: int = 16
    cls_blocks: int = 2
    init_std: float = 0.02

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.recon_target not in RECON_TARGETS:
            raise ConfigError(f"recon_target must be one of {RECON_TARGETS}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.dim * self.ffn_mult

    @property
    def projection_dim(self) -> int:
        return self.proj_dim or self.dim // 2

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_size(cls) -> "EncoderConfig":
        """Full-size backbone: 12 layers, d=128, 8 heads, 4x4 patches, 1024 tokens."""
        return cls(patch=4, depth=12, dim=128, heads=8, max_len=1024)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- patches


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    grid: tuple[int, int]
    patches: np.ndarray  # (..., N, P*P)

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]


def patchify(S, P: int) -> PatchGrid:
    """Split (T, K), (T, K, 1), (B, T, K) or (B, T, K, 1) into time-major P x P patches."""
    S = np.asarray(S)
    if S.ndim in (3, 4) and S.shape[-1] == 1:
        S = S[..., 0]  # drop the channel axis of (T, K, 1) / (B, T, K, 1)
    squeeze = S.ndim == 2
    if squeeze:
        S = S[None]
    if S.ndim != 3:
        raise ShapeError(f"expected (T, K) or (B, T, K), got {S.shape}")
    b, t, k = S.shape
    if t % P or k % P:
        raise ShapeError(f"spectrogram {t}x{k} not divisible by patch {P}")
    gt, gk = t // P, k // P
    p = S.reshape(b, gt, P, gk, P).transpose(0, 1, 3, 2, 4).reshape(b, gt * gk, P * P)
    return PatchGrid(P, (gt, gk), p[0] if squeeze else p)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    P, (gt, gk) = grid.patch_size, grid.grid
    p = grid.patches
    squeeze = p.ndim == 2
    if squeeze:
        p = p[None]
    b = p.shape[0]
    S = p.reshape(b, gt, gk, P, P).transpose(0, 1, 3, 2, 4).reshape(b, gt * P, gk * P)
    return S[0] if squeeze else S


# ---------------------------------------------------------------- masking


@dataclass(frozen=True)
class MaskSpec:
    mask_set: np.ndarray
    ratio: float
    seed: int | None = None

    def as_bool(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.mask_set] = True
        return m


def mask_count(n: int, ratio: float) -> int:
    # floor with a guard against 0.7 * 10 = 6.999...
    return int(math.floor(ratio * n + 1e-9))


def sample_mask(n: int, ratio: float, seed) -> MaskSpec:
    """Uniform subset of size floor(ratio * n), sorted, deterministic in ``seed``."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("mask ratio must lie in [0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=mask_count(n, ratio), replace=False))
    return MaskSpec(idx, ratio, None if isinstance(seed, np.random.Generator) else seed)


def sample_batch_masks(batch: int, n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """(batch, floor(ratio*n)) sorted masked indices, one independent draw per row."""
    return np.stack([sample_mask(n, ratio, rng).mask_set for _ in range(batch)]) if batch else np.zeros((0, 0), int)


def mask_to_bool(index: np.ndarray, n: int) -> np.ndarray:
    m = np.zeros((index.shape[0], n), dtype=bool)
    np.put_along_axis(m, index, True, axis=1)
    return m


# ---------------------------------------------------------------- parameters


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return (x * std).astype(dtype)


class ParamSet(dict):
    """Ordered name -> Tensor mapping with snapshot helpers."""

    def arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.items()}

    def load_arrays(self, arrays: dict, strict: bool = True) -> None:
        for k, t in self.items():
            if k not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {k}")
                continue
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {a.shape} != {t.shape}")
            t.data = a.astype(t.dtype, copy=True)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def requires_grad_(self, flag: bool) -> "ParamSet":
        for t in self.values():
            t.requires_grad = flag
        return self

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self[k].data).tobytes())
        return h.hexdigest()

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.values()))


def _p(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


# ---------------------------------------------------------------- encoder


class TransformerEncoder:
    """Patch embedding + learnable positions + post-LN transformer stack."""

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c, d, std = config, config.dim, config.init_std
        pp = c.patch * c.patch
        tn = lambda *s: _p(trunc_normal(rng, s, std, self.dtype))  # noqa: E731
        zeros = lambda *s: _p(np.zeros(s, self.dtype))  # noqa: E731
        ones = lambda *s: _p(np.ones(s, self.dtype))  # noqa: E731
        P = ParamSet()
        P["emb.w"] = tn(pp, d)
        P["emb.b"] = zeros(d)
        P["pos"] = tn(c.max_len, d)
        P["mask_token"] = tn(d)
        for l in range(c.depth):
            pre = f"layers.{l}."
            for name in ("wq", "wk", "wv", "wo"):
                P[pre + name] = tn(d, d)
            P[pre + "ln1.g"], P[pre + "ln1.b"] = ones(d), zeros(d)
            P[pre + "ffn.w1"], P[pre + "ffn.b1"] = tn(d, c.ffn_dim), zeros(c.ffn_dim)
            P[pre + "ffn.w2"], P[pre + "ffn.b2"] = tn(c.ffn_dim, d), zeros(d)
            P[pre + "ln2.g"], P[pre + "ln2.b"] = ones(d), zeros(d)
        self.params = P

    # -- pieces
    def patches(self, S) -> Tensor:
        grid = patchify(np.asarray(S, dtype=self.dtype), self.config.patch)
        return Tensor(grid.patches)

    def embed_tokens(self, patches: Tensor) -> Tensor:
        """x_i = s_i W_emb + b_emb, row-vector convention."""
        return ad.add_bias(patches @ self.params["emb.w"], self.params["emb.b"])

    def add_positions(self, X: Tensor) -> Tensor:
        n = X.shape[-2]
        if n > self.config.max_len:
            raise SequenceTooLong(f"{n} tokens > max_len {self.config.max_len}")
        return ad.add_bias(X, self.params["pos"][:n])

    def apply_mask(self, X: Tensor, mask) -> Tensor:
        """Replace masked rows with the shared mask token; ``mask`` is (B, N) bool or a MaskSpec."""
        if isinstance(mask, MaskSpec):
            n = X.shape[-2]
            if mask.mask_set.size and (mask.mask_set.min() < 0 or mask.mask_set.max() >= n):
                raise IndexError("mask index out of range")
            m = mask.as_bool(n)
            mask = np.broadcast_to(m, X.shape[:-1])
        return ad.where_rows(mask, X, self.params["mask_token"])

    def attention(self, Z: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        c = self.config
        pre = f"layers.{layer}."
        squeeze = Z.ndim == 2
        if squeeze:
            Z = Z.reshape(1, *Z.shape)
        b, n, d = Z.shape
        h, dh = c.heads, c.head_dim

        def heads(w):
            return ad.transpose((Z @ self.params[pre + w]).reshape(b, n, h, dh), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        # scaling q before the product is cheaper than scaling the N x N scores
        scores = ad.scale(q, 1.0 / math.sqrt(dh)) @ ad.transpose(k, (0, 1, 3, 2))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.transpose(attn @ v, (0, 2, 1, 3)).reshape(b, n, d)
        out = ctx @ self.params[pre + "wo"]
        if squeeze:
            out = out.reshape(n, d)
        return out, attn

    def layer(self, Z: Tensor, l: int, attn_log: list | None = None) -> Tensor:
        P, pre = self.params, f"layers.{l}."
        msa, attn = self.attention(Z, l)
        if attn_log is not None:
            attn_log.append(attn.data)
        Zt = ad.layer_norm(Z + msa, P[pre + "ln1.g"], P[pre + "ln1.b"])
        hidden = ad.gelu(ad.add_bias(Zt @ P[pre + "ffn.w1"], P[pre + "ffn.b1"]))
        ffn = ad.add_bias(hidden @ P[pre + "ffn.w2"], P[pre + "ffn.b2"])
        return ad.layer_norm(Zt + ffn, P[pre + "ln2.g"], P[pre + "ln2.b"])

    def forward_tokens(self, Z0: Tensor, attn_log: list | None = None) -> Tensor:
        Z = Z0
        for l in range(self.config.depth):
            Z = self.layer(Z, l, attn_log)
        return Z

    def encode(self, S, mask=None, attn_log: list | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """Spectrogram batch -> (final tokens Z, embeddings X, raw patches)."""
        patches = self.patches(S)
        X = self.embed_tokens(patches)
        Xm = X if mask is None else self.apply_mask(X, mask)
        Z = self.forward_tokens(self.add_positions(Xm), attn_log)
        return Z, X, patches

    def pooled(self, S) -> Tensor:
        """Mean over all final-layer tokens: (B, d)."""
        Z, _, _ = self.encode(S)
        return ad.mean(Z, axis=-2)

    def grid_shape(self, S) -> tuple[int, int]:
        S = np.asarray(S)
        t, k = S.shape[-2], S.shape[-1]
        return t // self.config.patch, k // self.config.patch


# ---------------------------------------------------------------- heads


class Heads:
    """Reconstruction decoder, contrastive projector, and residual-conv classifier."""

    def __init__(self, config: EncoderConfig, n_classes: int = 0, seed: int = 1, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        c, d, std = config, config.dim, config.init_std
        out = c.patch * c.patch if c.recon_target == "patch" else d
        tn = lambda *s: _p(trunc_normal(rng, s, std, self.dtype))  # noqa: E731
        zeros = lambda *s: _p(np.zeros(s, self.dtype))  # noqa: E731
        self.decoder = ParamSet(
            {"dec.w1": tn(d, c.ffn_dim), "dec.b1": zeros(c.ffn_dim), "dec.w2": tn(c.ffn_dim, out), "dec.b2": zeros(out)}
        )
        dp = c.projection_dim
        self.projector = ParamSet({"proj.w": tn(d, dp), "proj.b": zeros(dp)})
        cls = ParamSet()
        for i in range(c.cls_blocks):
            cls[f"cls.{i}.w1"] = tn(c.cls_channels, d, 3)
            cls[f"cls.{i}.b1"] = zeros(c.cls_channels)
            cls[f"cls.{i}.w2"] = tn(d, c.cls_channels, 3)
            cls[f"cls.{i}.b2"] = zeros(d)
        if n_classes:
            cls["cls.w"] = tn(d, n_classes)
            cls["cls.b"] = zeros(n_classes)
        self.classifier = cls

    @property
    def params(self) -> ParamSet:
        return ParamSet({**self.decoder, **self.projector, **self.classifier})

    def identity_decoder(self) -> None:
        """Set g_phi to the identity map (needs ffn_dim >= 2d, embedding target)."""
        w1, w2 = self.decoder["dec.w1"], self.decoder["dec.w2"]
        d = w1.shape[0]
        if w1.shape[1] < 2 * d or w2.shape[1] != d:
            raise ShapeError("identity decoder needs ffn_dim >= 2*dim and an embedding-sized output")
        a = np.zeros(w1.shape, self.dtype)
        a[:, :d], a[:, d : 2 * d] = np.eye(d), -np.eye(d)
        b = np.zeros(w2.shape, self.dtype)
        b[:d], b[d : 2 * d] = np.eye(d), -np.eye(d)
        w1.data, w2.data = a, b
        self.decoder["dec.b1"].data[:] = 0
        self.decoder["dec.b2"].data[:] = 0

    def decode(self, Zm: Tensor) -> Tensor:
        """g_phi: gelu(z W1 + b1) W2 + b2 applied row-wise."""
        D = self.decoder
        h = ad.gelu(ad.add_bias(Zm @ D["dec.w1"], D["dec.b1"]))
        return ad.add_bias(h @ D["dec.w2"], D["dec.b2"])

    def decode_masked(self, Z: Tensor, index: np.ndarray) -> Tensor:
        """Reconstructions for masked tokens only: ``index`` is (B, M) -> (B*M, out)."""
        b, n, d = Z.shape
        flat = (np.arange(b)[:, None] * n + np.asarray(index)).ravel()
        return self.decode(ad.take_rows(Z.reshape(b * n, d), flat))

    def project(self, h: Tensor) -> Tensor:
        """Unit-norm contrastive projection of pooled features (B, d) -> (B, d_p)."""
        u = ad.add_bias(h @ self.projector["proj.w"], self.projector["proj.b"])
        norms = np.sqrt((u.data.astype(np.float64) ** 2).sum(axis=-1))
        if np.any(norms == 0):
            raise DegenerateProjection("projection pre-norm vector is zero")
        return ad.l2_normalize(u, axis=-1)

    def classify_sequence(self, U: Tensor) -> Tensor:
        """Residual conv stack over a (B, d, L) feature sequence, GAP over L, linear."""
        C = self.classifier
        if "cls.w" not in C:
            raise ConfigError("classifier has no output layer (n_classes=0)")
        h = U
        for i in range(self.config.cls_blocks):
            r = ad.relu(ad.conv1d(h, C[f"cls.{i}.w1"], C[f"cls.{i}.b1"], padding=1))
            h = h + ad.conv1d(r, C[f"cls.{i}.w2"], C[f"cls.{i}.b2"], padding=1)
        g = ad.mean(h, axis=2)
        return ad.add_bias(g @ C["cls.w"], C["cls.b"])

    def classify(self, Z: Tensor, grid: tuple[int, int]) -> Tensor:
        """Logits from final tokens (B, N, d) laid out on a (T/P, K/P) grid.

        Tokens are mean-pooled over the frequency patches, leaving a
        time sequence of d-channel vectors for the 1-D convolutions.
        """
        b, n, d = Z.shape
        gt, gk = grid
        if gt * gk != n:
            raise ShapeError(f"grid {grid} does not match {n} tokens")
        U = ad.mean(Z.reshape(b, gt, gk, d), axis=2)  # (B, T/P, d)
        return self.classify_sequence(ad.transpose(U, (0, 2, 1)))


def sequence_features(encoder: TransformerEncoder, S, batch_size: int = 64) -> np.ndarray:
    """Frequency-pooled final tokens (n, d, T/P) for frozen-encoder heads."""
    S = np.asarray(S)
    gt, gk = encoder.grid_shape(S)
    out = []
    with ad.no_grad():
        for i in range(0, len(S), batch_size):
            Z, _, _ = encoder.encode(S[i : i + batch_size])
            b, n, d = Z.shape
            out.append(Z.data.reshape(b, gt, gk, d).mean(axis=2).transpose(0, 2, 1))
    return np.concatenate(out) if out else np.zeros((0, encoder.config.dim, gt), encoder.dtype)


def pooled_features(encoder: TransformerEncoder, S, batch_size: int = 64) -> np.ndarray:
    """Mean-pooled final tokens (n, d)."""
    seq = sequence_features(encoder, S, batch_size)
    return seq.mean(axis=2)


def save_model(path, encoder: TransformerEncoder, heads: Heads | None = None, meta: dict | None = None) -> None:
    """Encoder (and optionally heads) parameters plus config in one checkpoint."""
    tensors = encoder.params.arrays()
    info = {"encoder": encoder.config.to_dict(), "n_classes": 0, **(meta or {})}
    if heads is not None:
        tensors.update(heads.params.arrays())
        info["n_classes"] = heads.n_classes
    ad.save_checkpoint(path, tensors, info)


def load_model(path, dtype=np.float32) -> tuple[TransformerEncoder, Heads, dict]:
    """Inverse of ``save_model``; heads missing from the file keep their fresh init."""
    tensors, meta = ad.load_checkpoint(path)
    config = EncoderConfig.from_dict(meta["encoder"])
    encoder = TransformerEncoder(config, 0, dtype)
    encoder.params.load_arrays(tensors)
    heads = Heads(config, int(meta.get("n_classes", 0)), 1, dtype)
    heads.params.load_arrays(tensors, strict=False)
    return encoder, heads, meta


__all__ = [
    "EncoderConfig",
    "PatchGrid",
    "patchify",
    "unpatchify",
    "MaskSpec",
    "sample_mask",
    "sample_batch_masks",
    "mask_to_bool",
    "mask_count",
    "ParamSet",
    "TransformerEncoder",
    "Heads",
    "sequence_features",
    "pooled_features",
    "save_model",
    "load_model",
    "trunc_normal",
]
