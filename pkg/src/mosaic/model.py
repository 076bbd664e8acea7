"""Masked-encoder / unmasked-decoder transformer reconstructor.

Pipeline for a batch of patches sharing the retained count ``m``::

    tokens   = T(E) + Pos                      (B, m, d)
    z_enc    = encoder(tokens)                 (B, m, d)
    z_um     = fill(z_enc, placeholder + Pos)  (B, n, d)  row-major positions
    X_hat    = head(decoder(z_um))             (B, N, N)

Blocks are pre-norm (LN -> MHA -> residual, LN -> GELU MLP -> residual) and
each stack ends with a LayerNorm. The fill is a constant permutation matmul
over ``[z_enc; placeholder rows]``, so it stays inside the autodiff op set.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .embed import EMBEDDING_MODES, TokenSequence, embedding_matrices, positional_table
from .sampler import CompressedMeasurements, MaskSpec
from .wht import HadamardBasis, build_hadamard, is_power_of_two


@dataclass(frozen=True)
class ModelConfig:
    N: int = 8
    d: int = 16
    heads: int = 1
    enc_blocks: int = 2
    dec_blocks: int = 2
    mlp_ratio: int = 4
    embedding: str = "hadamard"
    ordering: str = "sylvester"

    def __post_init__(self):
        if not is_power_of_two(self.N) or self.N < 2:
            raise ValueError(f"N must be a power of two >= 2, got {self.N}")
        if self.d <= 0 or self.d % 4:
            raise ValueError(f"d must be a positive multiple of 4, got {self.d}")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        for name in ("enc_blocks", "dec_blocks", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embedding not in EMBEDDING_MODES:
            raise ValueError(f"embedding must be one of {EMBEDDING_MODES}")

    @classmethod
    def baseline(cls) -> "ModelConfig":
        """Full-size configuration: 32x32 patches, width 32, 2 heads, 16+16 blocks."""
        return cls(N=32, d=32, heads=2, enc_blocks=16, dec_blocks=16)

    @property
    def n(self) -> int:
        return self.N * self.N

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for :class:`MosaicModel`."""
    d, h = cfg.d, cfg.mlp_ratio * cfg.d
    per_block = (
        2 * d  # ln1
        + 4 * (d * d + d)  # q, k, v, out projections
        + 2 * d  # ln2
        + (d * h + h) + (h * d + d)  # mlp
    )
    embed = cfg.n * d + d
    norms = 2 * (2 * d)
    return embed + (cfg.enc_blocks + cfg.dec_blocks) * per_block + norms + d + (d + 1)


def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return out * std


class MosaicModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.basis: HadamardBasis = build_hadamard(config.N, config.ordering)
        self.pos = positional_table(config.N, config.d).astype(self.dtype)
        self.params: dict[str, ad.Parameter] = {}
        rng = np.random.default_rng(seed)
        d, hid = config.d, config.mlp_ratio * config.d

        def weight(name, shape):
            self._add(name, _trunc_normal(rng, shape))

        def zeros(name, shape):
            self._add(name, np.zeros(shape))

        def norm(prefix):
            self._add(prefix + ".gain", np.ones(d))
            zeros(prefix + ".bias", d)

        weight("embed.weight", (config.n, d))
        zeros("embed.bias", d)
        for stack, count in (("enc", config.enc_blocks), ("dec", config.dec_blocks)):
            for b in range(count):
                pre = f"{stack}.{b}"
                norm(pre + ".ln1")
                for proj in ("q", "k", "v", "out"):
                    weight(f"{pre}.attn.{proj}.weight", (d, d))
                    zeros(f"{pre}.attn.{proj}.bias", d)
                norm(pre + ".ln2")
                weight(pre + ".mlp.fc1.weight", (d, hid))
                zeros(pre + ".mlp.fc1.bias", hid)
                weight(pre + ".mlp.fc2.weight", (hid, d))
                zeros(pre + ".mlp.fc2.bias", d)
            norm(stack + ".norm")
            if stack == "enc":
                self._add("placeholder", _trunc_normal(rng, (d,)))
        weight("head.weight", (d, 1))
        zeros("head.bias", 1)

    def _add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = ad.Parameter(value, name, dtype=self.dtype)

    def __getitem__(self, name) -> ad.Parameter:
        return self.params[name]

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            p = self.params[k]
            if v.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.shape}")
            p.data = np.array(v, dtype=self.dtype)
            p.zero_grad()

    # -- building blocks ---------------------------------------------------

    def _attention(self, x: ad.Tensor, pre: str) -> ad.Tensor:
        B, L, d = x.shape
        h = self.config.heads
        dh = d // h

        def heads(name):
            t = ad.linear(x, self[f"{pre}.{name}.weight"], self[f"{pre}.{name}.bias"])
            return ad.transpose(ad.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
        ctx = ad.matmul(ad.softmax(scores), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        return ad.linear(ctx, self[f"{pre}.out.weight"], self[f"{pre}.out.bias"])

    def _block(self, x: ad.Tensor, pre: str) -> ad.Tensor:
        h = ad.layer_norm(x, self[pre + ".ln1.gain"], self[pre + ".ln1.bias"])
        x = ad.add(x, self._attention(h, pre + ".attn"))
        h = ad.layer_norm(x, self[pre + ".ln2.gain"], self[pre + ".ln2.bias"])
        h = ad.gelu(ad.linear(h, self[pre + ".mlp.fc1.weight"], self[pre + ".mlp.fc1.bias"]))
        h = ad.linear(h, self[pre + ".mlp.fc2.weight"], self[pre + ".mlp.fc2.bias"])
        return ad.add(x, h)

    def _stack(self, x: ad.Tensor, stack: str, count: int) -> ad.Tensor:
        for b in range(count):
            x = self._block(x, f"{stack}.{b}")
        return ad.layer_norm(x, self[stack + ".norm.gain"], self[stack + ".norm.bias"])

    # -- pipeline stages (batched) ------------------------------------------

    def tokens(self, values, flat) -> ad.Tensor:
        """``T(E) + Pos`` for measurements ``values`` at 0-based positions ``flat``; both (B, m)."""
        values = np.atleast_2d(values)
        flat = np.atleast_2d(flat)
        lifts = embedding_matrices(values, flat, self.basis, self.config.embedding)
        x = ad.Tensor(lifts.astype(self.dtype))
        z = ad.linear(x, self["embed.weight"], self["embed.bias"])
        return ad.add(z, ad.Tensor(self.pos[flat]))

    def encode(self, z: ad.Tensor) -> ad.Tensor:
        if z.ndim != 3 or z.shape[-1] != self.config.d:
            raise ValueError(f"encoder expects (B, m, {self.config.d}) tokens, got {z.shape}")
        return self._stack(z, "enc", self.config.enc_blocks)

    def fill(self, z_enc: ad.Tensor, flat) -> ad.Tensor:
        """Scatter encoded tokens to their row-major slots; other slots get placeholder + Pos."""
        flat = np.atleast_2d(np.asarray(flat, dtype=np.intp))
        n, d = self.config.n, self.config.d
        B, m = flat.shape
        if z_enc.ndim != 3 or z_enc.shape[:2] != (B, m) or z_enc.shape[2] != d:
            raise ValueError(f"encoded tokens {z_enc.shape} inconsistent with mask shape {flat.shape}")
        present = np.zeros((B, n), dtype=bool)
        present[np.arange(B)[:, None], flat] = True
        if present.sum(axis=1).min() != m:
            raise ValueError("mask positions must be distinct and in range")
        missing = np.nonzero(~present)[1].reshape(B, n - m)
        filler = ad.add(
            ad.Tensor(np.zeros((B, n - m, d), dtype=self.dtype)), self["placeholder"]
        )
        filler = ad.add(filler, ad.Tensor(self.pos[missing]))
        stacked = ad.concat_rows([z_enc, filler])
        order = np.concatenate([flat, missing], axis=1)  # source row r -> slot order[r]
        perm = np.zeros((B, n, n), dtype=self.dtype)
        perm[np.arange(B)[:, None], order, np.arange(n)[None, :]] = 1
        return ad.matmul(ad.Tensor(perm), stacked)

    def decode(self, z_um: ad.Tensor) -> ad.Tensor:
        N, n = self.config.N, self.config.n
        if z_um.ndim != 3 or z_um.shape[1:] != (n, self.config.d):
            raise ValueError(f"decoder expects (B, {n}, {self.config.d}), got {z_um.shape}")
        h = self._stack(z_um, "dec", self.config.dec_blocks)
        pix = ad.linear(h, self["head.weight"], self["head.bias"])
        return ad.reshape(pix, (z_um.shape[0], N, N))

    def forward(self, values, flat) -> ad.Tensor:
        """Reconstruct a batch of patches from (B, m) measurements at (B, m) positions."""
        flat = np.atleast_2d(np.asarray(flat, dtype=np.intp))
        z = self.tokens(values, flat)
        return self.decode(self.fill(self.encode(z), flat))

    __call__ = forward

    def predict(self, values, flat) -> np.ndarray:
        with ad.no_grad():
            return self.forward(values, flat).data.astype(np.float64)


# -- single-patch functional API --------------------------------------------


def encode(z, model: MosaicModel) -> np.ndarray:
    """Encoder output ``(m, d)`` for one token sequence."""
    t = z.tokens if isinstance(z, TokenSequence) else ad.as_tensor(z)
    if t.ndim != 2 or t.shape[1] != model.config.d:
        raise ValueError(f"expected (m, {model.config.d}) tokens, got {t.shape}")
    with ad.no_grad():
        out = model.encode(ad.reshape(ad.Tensor(t.data.astype(model.dtype)), (1,) + t.shape))
    return out.data[0]


def fill_unmasked(z_enc, mask: MaskSpec, model: MosaicModel) -> np.ndarray:
    """``(n, d)`` decoder input: row ``l`` is the encoded token at that slot, else ``p + Pos``."""
    z = np.asarray(z_enc.data if isinstance(z_enc, ad.Tensor) else z_enc, dtype=model.dtype)
    if mask.n != model.config.n:
        raise ValueError(f"mask has n={mask.n}, model expects {model.config.n}")
    if z.shape != (mask.m, model.config.d):
        raise ValueError(f"z_enc shape {z.shape} does not match mask size {mask.m}")
    with ad.no_grad():
        out = model.fill(ad.Tensor(z[None]), mask.flat_array[None])
    return out.data[0]


def decode(z_um, model: MosaicModel) -> np.ndarray:
    z = np.asarray(z_um.data if isinstance(z_um, ad.Tensor) else z_um, dtype=model.dtype)
    with ad.no_grad():
        return model.decode(ad.Tensor(z[None])).data[0].astype(np.float64)


def reconstruct(cm: CompressedMeasurements, basis: HadamardBasis, model: MosaicModel) -> np.ndarray:
    """Predict the N x N patch behind ``cm``."""
    if basis.order != model.config.N or cm.mask.side != basis.order:
        raise ValueError("measurement grid, basis and model disagree on N")
    return model.predict(cm.values[None], cm.mask.flat_array[None])[0]
