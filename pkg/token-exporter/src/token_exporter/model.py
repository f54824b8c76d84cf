"""Deterministic vision transformer used as the bundled token source.

Production frontends carry pretrained weights that are not shipped with
this tool, so asking for any other model name raises ModelLoadError.
The bundled model draws every weight from a fixed seed: it is not trained
to be good at anything, but it is fully deterministic, cheap on CPU, and
deep enough (24 blocks) that the default layer-22 hook is a real interior
layer with neighbors on both sides to compare against.

The forward pass is a standard pre-norm transformer over non-overlapping
image patches with 2D sinusoidal position codes. The hook captures the
pre-softmax Q/K head projections of the requested block, either averaged
across heads or for one selected head.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ModelLoadError

BUILTIN_MODEL = "deterministic-vit-24"
BUILTIN_VERSION = "1.0"
_WEIGHT_SEED = 58952


@dataclass(frozen=True)
class VitConfig:
    name: str = BUILTIN_MODEL
    version: str = BUILTIN_VERSION
    patch_size: int = 16
    depth: int = 24
    heads: int = 4
    d_model: int = 64
    d_mlp: int = 128

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _position_codes(rows: int, cols: int, d_model: int) -> np.ndarray:
    """2D sinusoidal codes: half the channels encode row, half column."""
    half = d_model // 2
    freqs = np.exp(-np.log(1e4) * np.arange(0, half, 2) / half)

    def axis_code(n):
        angles = np.arange(n)[:, None] * freqs[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)[:, :half]

    row_code = axis_code(rows)
    col_code = axis_code(cols)
    out = np.zeros((rows, cols, d_model))
    out[:, :, :half] = row_code[:, None, :]
    out[:, :, half:2 * half] = col_code[None, :, :]
    return out.reshape(rows * cols, d_model)


class DeterministicVit:
    def __init__(self, config: VitConfig | None = None):
        self.config = config or VitConfig()
        cfg = self.config
        rng = np.random.default_rng(_WEIGHT_SEED)

        def dense(fan_in, fan_out):
            return rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        patch_dim = 3 * cfg.patch_size**2
        self.w_embed = dense(patch_dim, cfg.d_model)
        self.b_embed = rng.normal(scale=0.02, size=cfg.d_model)
        self.blocks = []
        for _ in range(cfg.depth):
            self.blocks.append({
                "wq": dense(cfg.d_model, cfg.d_model),
                "wk": dense(cfg.d_model, cfg.d_model),
                "wv": dense(cfg.d_model, cfg.d_model),
                "wo": dense(cfg.d_model, cfg.d_model),
                "w1": dense(cfg.d_model, cfg.d_mlp),
                "b1": rng.normal(scale=0.02, size=cfg.d_mlp),
                "w2": dense(cfg.d_mlp, cfg.d_model),
                "b2": rng.normal(scale=0.02, size=cfg.d_model),
            })

    def token_count(self, height: int, width: int) -> int:
        p = self.config.patch_size
        return (height // p) * (width // p)

    def _embed(self, image: np.ndarray) -> np.ndarray:
        """(h, w, 3) float image in [0, 1] -> (N, d_model) patch tokens."""
        cfg = self.config
        p = cfg.patch_size
        rows, cols = image.shape[0] // p, image.shape[1] // p
        if rows == 0 or cols == 0:
            raise ValueError(
                f"image {image.shape[1]}x{image.shape[0]} is smaller than one "
                f"{p}px patch")
        cropped = image[:rows * p, :cols * p]
        patches = (cropped.reshape(rows, p, cols, p, 3)
                   .transpose(0, 2, 1, 3, 4)
                   .reshape(rows * cols, 3 * p * p))
        x = patches @ self.w_embed + self.b_embed
        return x + _position_codes(rows, cols, cfg.d_model)

    def _heads(self, mat: np.ndarray) -> np.ndarray:
        """(N, d_model) -> (heads, N, d_head)."""
        cfg = self.config
        n = mat.shape[0]
        return mat.reshape(n, cfg.heads, cfg.d_head).transpose(1, 0, 2)

    def _block_forward(self, x: np.ndarray, blk: dict) -> np.ndarray:
        cfg = self.config
        ln = _layer_norm(x)
        q = self._heads(ln @ blk["wq"])
        k = self._heads(ln @ blk["wk"])
        v = self._heads(ln @ blk["wv"])
        attn = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(cfg.d_head))
        mixed = (attn @ v).transpose(1, 0, 2).reshape(x.shape[0], cfg.d_model)
        x = x + mixed @ blk["wo"]
        ln2 = _layer_norm(x)
        return x + _gelu(ln2 @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"]

    def forward_tokens(self, image: np.ndarray, layer: int,
                       head: int | None = None):
        """Returns (q, k, descriptor) for one image.

        q and k are the pre-softmax projections of block ``layer``'s
        attention, shape (N, d_head), averaged across heads unless a
        single head index is given. The descriptor is the unit-norm mean
        of the final block's output tokens, independent of ``layer``.
        """
        cfg = self.config
        if not 0 <= layer < cfg.depth:
            raise ValueError(
                f"layer {layer} outside model depth {cfg.depth}")
        if head is not None and not 0 <= head < cfg.heads:
            raise ValueError(f"head {head} outside {cfg.heads} heads")

        x = self._embed(image)
        q_out = k_out = None
        for idx, blk in enumerate(self.blocks):
            if idx == layer:
                ln = _layer_norm(x)
                q_heads = self._heads(ln @ blk["wq"])
                k_heads = self._heads(ln @ blk["wk"])
                if head is None:
                    q_out = q_heads.mean(axis=0)
                    k_out = k_heads.mean(axis=0)
                else:
                    q_out = q_heads[head]
                    k_out = k_heads[head]
            x = self._block_forward(x, blk)
        pooled = _layer_norm(x).mean(axis=0)
        desc = pooled / max(np.linalg.norm(pooled), 1e-12)
        return q_out, k_out, desc


def load_model(name: str = BUILTIN_MODEL) -> DeterministicVit:
    if name != BUILTIN_MODEL:
        raise ModelLoadError(
            f"no weights available for {name!r}; only the bundled "
            f"{BUILTIN_MODEL} is installed. Point real exports at a "
            f"checkout that ships the pretrained frontend.")
    return DeterministicVit()
