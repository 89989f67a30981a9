"""Channel-aware transformer encoder for multivariate time series.

Pipeline: reversible per-channel instance normalization, non-overlapping
patch tokenization with one global aggregate token and one identity token
per channel, then stacked pre-norm attention layers whose identity-token
rows are masked to their own channel while every other row attends freely.
Temporal order enters through rotary rotation of query/key pairs keyed to
the patch index inside each channel, never to the flattened position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import substream

ROLE_CLS = 0
ROLE_CIT = 1
ROLE_PATCH = 2
ROLE_MASKED_PATCH = 3
ROLE_PROMPT = 4

ROPE_BASE = 10000.0
NEG_INF = -np.inf


@dataclass
class ModelConfig:
    d: int = 384
    n_layers: int = 6
    n_heads: int = 6
    patch_len: int = 6
    channels: int = 7
    mask_ratio: float = 0.3
    dropout: float = 0.1
    n_classes: int = 10

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if (self.d // self.n_heads) % 2 != 0:
            raise ValueError(
                f"head width {self.d // self.n_heads} must be even for rotary pairing"
            )
        if self.patch_len < 1:
            raise ValueError(f"patch_len must be >= 1, got {self.patch_len}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "patch_len": self.patch_len,
            "channels": self.channels,
            "mask_ratio": self.mask_ratio,
            "dropout": self.dropout,
            "n_classes": self.n_classes,
        }


def sequence_length(channels: int, timesteps: int, patch_len: int) -> int:
    """Token count: one aggregate token, then per channel one identity token
    plus ``timesteps // patch_len`` patch tokens."""
    if timesteps < patch_len:
        raise ValueError(f"timesteps {timesteps} shorter than patch_len {patch_len}")
    t_hat = timesteps // patch_len
    return channels * (t_hat + 1) + 1


# ---------------------------------------------------------------------------
# reversible instance normalization


@dataclass
class RevinState:
    mean: np.ndarray  # (..., C, 1)
    std: np.ndarray   # (..., C, 1)
    eps: float


def revin_normalize(x: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, RevinState]:
    """Per-channel standardization of the trailing time axis; exactly invertible."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = np.sqrt(x.var(axis=-1, keepdims=True) + eps * eps)
    return (x - mean) / std, RevinState(mean=mean, std=std, eps=eps)


def revin_denormalize(y: np.ndarray, state: RevinState) -> np.ndarray:
    return np.asarray(y) * state.std + state.mean


# ---------------------------------------------------------------------------
# token sequence layout


@dataclass
class SequenceLayout:
    channels: int
    t_hat: int
    with_prompt: bool = False

    @property
    def length(self) -> int:
        return self.channels * (self.t_hat + 1) + 1 + (1 if self.with_prompt else 0)

    @property
    def prompt_pos(self) -> int | None:
        return 0 if self.with_prompt else None

    @property
    def cls_pos(self) -> int:
        return 1 if self.with_prompt else 0

    def cit_pos(self, c: int) -> int:
        return self.cls_pos + 1 + c * (self.t_hat + 1)

    @property
    def cit_positions(self) -> np.ndarray:
        return np.array([self.cit_pos(c) for c in range(self.channels)], dtype=np.intp)

    def patch_positions(self, c: int) -> np.ndarray:
        start = self.cit_pos(c) + 1
        return np.arange(start, start + self.t_hat, dtype=np.intp)

    @property
    def all_patch_positions(self) -> np.ndarray:
        return np.concatenate([self.patch_positions(c) for c in range(self.channels)])

    def channel_of(self) -> np.ndarray:
        out = np.full(self.length, -1, dtype=np.int64)
        for c in range(self.channels):
            out[self.cit_pos(c)] = c
            out[self.patch_positions(c)] = c
        return out

    def patch_index_of(self) -> np.ndarray:
        out = np.full(self.length, -1, dtype=np.int64)
        for c in range(self.channels):
            out[self.patch_positions(c)] = np.arange(self.t_hat)
        return out

    def roles(self, batch: int) -> np.ndarray:
        row = np.full(self.length, ROLE_PATCH, dtype=np.int8)
        row[self.cls_pos] = ROLE_CLS
        if self.with_prompt:
            row[0] = ROLE_PROMPT
        row[self.cit_positions] = ROLE_CIT
        return np.tile(row, (batch, 1))


@dataclass
class TokenSequence:
    embeddings: Tensor            # (B, L, d)
    roles: np.ndarray             # (B, L) int8
    channel_of: np.ndarray        # (L,) channel id, -1 for none
    patch_index_of: np.ndarray    # (L,) temporal patch index, -1 for none
    layout: SequenceLayout

    @property
    def length(self) -> int:
        return self.layout.length


@dataclass
class EncoderOutput:
    hidden: Tensor        # (B, L, d)
    h_cls: Tensor         # (B, d)
    h_cit: Tensor         # (B, C, d)
    seq: TokenSequence
    revin: RevinState


def build_attention_mask(layout: SequenceLayout, prefix_visible: bool = True) -> np.ndarray:
    """Additive {0, -inf} mask: each channel-identity row sees only its own
    channel's tokens; every other row is unrestricted. A prompt prefix belongs
    to no channel, so identity rows never see it; ``prefix_visible=False``
    additionally hides it from every row (ablation switch)."""
    size = layout.length
    mask = np.zeros((size, size))
    for c in range(layout.channels):
        row = layout.cit_pos(c)
        mask[row, :] = NEG_INF
        mask[row, row] = 0.0
        mask[row, layout.patch_positions(c)] = 0.0
    if layout.with_prompt and not prefix_visible:
        mask[:, 0] = NEG_INF
        mask[0, 0] = 0.0
    return mask


def rope_tables(layout: SequenceLayout, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin rotation tables (L, head_dim/2); tokens without a patch index
    get angle zero, i.e. the identity rotation."""
    m = np.arange(head_dim // 2)
    theta = ROPE_BASE ** (-2.0 * m / head_dim)
    t = layout.patch_index_of().astype(np.float64)
    t[t < 0] = 0.0
    angles = t[:, None] * theta[None, :]
    return np.cos(angles), np.sin(angles)


def rope_rotate(x: Tensor, layout: SequenceLayout, head_dim: int) -> Tensor:
    """Rotary rotation over the last axis of (..., L, head_dim) tensors."""
    cos, sin = rope_tables(layout, head_dim)
    return ad.rope_pairs(x, cos, sin)


# ---------------------------------------------------------------------------
# encoder


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    lead = x.shape[:-1]
    out = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        out = ad.add(out, b)
    return ad.reshape(out, lead + (w.shape[1],))


class Encoder:
    """The encoder plus its reconstruction and classification heads.

    Parameters live in a flat name->Tensor dict so optimizers and the
    checkpoint format can treat them uniformly.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.cfg
        rng = substream(seed, "init")
        d = cfg.d

        def p(arr):
            # keep fresh parameters exactly float32-representable so the
            # 32-bit checkpoint format round-trips them bit-exactly
            return Tensor(np.asarray(arr, dtype=np.float32).astype(np.float64), requires_grad=True)

        params = {
            "embed.patch.w": p(rng.standard_normal((cfg.patch_len, d)) / math.sqrt(cfg.patch_len)),
            "embed.patch.b": p(np.zeros(d)),
            "embed.cls": p(rng.standard_normal((1, d))),
            "embed.cit": p(rng.standard_normal((cfg.channels, d))),
            "embed.mask": p(rng.standard_normal((1, d)) * 0.02),
        }
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            for name in ("wq", "wk", "wv", "wo"):
                params[pre + f"attn.{name}"] = p(rng.standard_normal((d, d)) / math.sqrt(d))
            for name in ("bq", "bk", "bv", "bo"):
                params[pre + f"attn.{name}"] = p(np.zeros(d))
            params[pre + "ln1.g"] = p(np.ones(d))
            params[pre + "ln1.b"] = p(np.zeros(d))
            params[pre + "ln2.g"] = p(np.ones(d))
            params[pre + "ln2.b"] = p(np.zeros(d))
            params[pre + "ff.w1"] = p(rng.standard_normal((d, 4 * d)) / math.sqrt(d))
            params[pre + "ff.b1"] = p(np.zeros(4 * d))
            params[pre + "ff.w2"] = p(rng.standard_normal((4 * d, d)) / math.sqrt(4 * d))
            params[pre + "ff.b2"] = p(np.zeros(d))
        params["final_ln.g"] = p(np.ones(d))
        params["final_ln.b"] = p(np.zeros(d))
        params["head.recon.w"] = p(rng.standard_normal((d, cfg.patch_len)) * 0.02)
        params["head.recon.b"] = p(np.zeros(cfg.patch_len))
        params["head.cls.w"] = p(rng.standard_normal((d, cfg.n_classes)) * 0.02)
        params["head.cls.b"] = p(np.zeros(cfg.n_classes))
        return params

    # -- tokenization -------------------------------------------------------

    def tokenize(self, x_norm: np.ndarray) -> TokenSequence:
        """Embed a normalized (B, C, T) batch into the flattened token layout.

        Trailing ``T mod patch_len`` steps are dropped. Channel identity
        embeddings are indexed parameters, so permuting input channels
        permutes the corresponding blocks but keeps identities in place.
        """
        cfg = self.cfg
        x_norm = np.asarray(x_norm, dtype=np.float64)
        if x_norm.ndim != 3 or x_norm.shape[1] != cfg.channels:
            raise ValueError(f"expected (B, {cfg.channels}, T) input, got {x_norm.shape}")
        batch, channels, timesteps = x_norm.shape
        if timesteps < cfg.patch_len:
            raise ValueError(f"timesteps {timesteps} shorter than patch_len {cfg.patch_len}")
        t_hat = timesteps // cfg.patch_len
        layout = SequenceLayout(channels=channels, t_hat=t_hat)

        patches = x_norm[:, :, : t_hat * cfg.patch_len].reshape(batch, channels, t_hat, cfg.patch_len)
        tokens = ad.matmul(
            Tensor(patches.reshape(batch * channels * t_hat, cfg.patch_len)),
            self.params["embed.patch.w"],
        )
        tokens = ad.add(tokens, self.params["embed.patch.b"])
        tokens = ad.reshape(tokens, (batch, channels, t_hat, cfg.d))

        cls_rows = ad.reshape(
            ad.take(self.params["embed.cls"], np.zeros(batch, dtype=np.intp), axis=0),
            (batch, 1, cfg.d),
        )
        pieces = [cls_rows]
        for c in range(channels):
            cit_rows = ad.reshape(
                ad.take(self.params["embed.cit"], np.full(batch, c, dtype=np.intp), axis=0),
                (batch, 1, cfg.d),
            )
            pieces.append(cit_rows)
            pieces.append(ad.slice_(tokens, (slice(None), c)))
        embeddings = ad.concat(pieces, axis=1)

        return TokenSequence(
            embeddings=embeddings,
            roles=layout.roles(batch),
            channel_of=layout.channel_of(),
            patch_index_of=layout.patch_index_of(),
            layout=layout,
        )

    def apply_mask(
        self, seq: TokenSequence, gamma: float, rng: np.random.Generator, max_retries: int = 1000
    ) -> tuple[TokenSequence, np.ndarray]:
        """Replace ceil(gamma * C * t_hat) patch embeddings per instance with
        the shared learned mask embedding. Returns the masked sequence and the
        (B, L) selection bitmap. A draw that would leave no unmasked patch at
        all is redrawn."""
        if not 0.0 < gamma < 1.0:
            raise ValueError(f"mask ratio must lie in (0, 1), got {gamma}")
        layout = seq.layout
        batch = seq.embeddings.shape[0]
        patch_pos = layout.all_patch_positions
        n_patches = patch_pos.size
        n_masked = int(math.ceil(gamma * n_patches))

        bitmap = np.zeros((batch, layout.length), dtype=bool)
        for b in range(batch):
            for attempt in range(max_retries + 1):
                chosen = rng.choice(n_patches, size=n_masked, replace=False)
                if n_masked < n_patches:
                    break
                if attempt == max_retries:
                    raise ValueError(
                        f"mask ratio {gamma} masks all {n_patches} patch tokens; "
                        "reconstruction would have no unmasked context"
                    )
            bitmap[b, patch_pos[chosen]] = True

        keep = (~bitmap).astype(np.float64)[:, :, None] * np.ones(self.cfg.d)
        fill = bitmap.astype(np.float64)[:, :, None] * np.ones(self.cfg.d)
        mask_rows = ad.reshape(
            ad.take(
                self.params["embed.mask"],
                np.zeros(batch * layout.length, dtype=np.intp),
                axis=0,
            ),
            (batch, layout.length, self.cfg.d),
        )
        masked = ad.add(
            ad.mul(seq.embeddings, Tensor(keep)),
            ad.mul(mask_rows, Tensor(fill)),
        )
        roles = seq.roles.copy()
        roles[bitmap] = ROLE_MASKED_PATCH
        return (
            TokenSequence(
                embeddings=masked,
                roles=roles,
                channel_of=seq.channel_of,
                patch_index_of=seq.patch_index_of,
                layout=layout,
            ),
            bitmap,
        )

    # -- transformer layers -------------------------------------------------

    def _dropout(self, x: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        rate = self.cfg.dropout
        if not train or rate == 0.0 or rng is None:
            return x
        keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
        return ad.mul(x, Tensor(keep))

    def cba_layer(
        self,
        hidden: Tensor,
        mask: np.ndarray,
        layer: int,
        layout: SequenceLayout,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """One pre-norm block: channel-biased multi-head attention with rotary
        query/key rotation, then a GELU feed-forward of width 4d."""
        cfg = self.cfg
        p = self.params
        pre = f"layer{layer}."
        batch, length, d = hidden.shape
        h, dh = cfg.n_heads, cfg.head_dim

        def split_heads(t: Tensor) -> Tensor:
            t = ad.reshape(t, (batch, length, h, dh))
            t = ad.transpose(t, (0, 2, 1, 3))
            return ad.reshape(t, (batch * h, length, dh))

        normed = ad.layer_norm(hidden, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = split_heads(_linear(normed, p[pre + "attn.wq"], p[pre + "attn.bq"]))
        k = split_heads(_linear(normed, p[pre + "attn.wk"], p[pre + "attn.bk"]))
        v = split_heads(_linear(normed, p[pre + "attn.wv"], p[pre + "attn.bv"]))

        q = rope_rotate(q, layout, dh)
        k = rope_rotate(k, layout, dh)

        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        probs = ad.softmax_lastdim(scores, additive_mask=mask)
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ctx, (batch, h, length, dh))
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, length, d))
        attn_out = _linear(ctx, p[pre + "attn.wo"], p[pre + "attn.bo"])
        hidden = ad.add(hidden, self._dropout(attn_out, train, rng))

        normed = ad.layer_norm(hidden, p[pre + "ln2.g"], p[pre + "ln2.b"])
        ff = _linear(ad.gelu(_linear(normed, p[pre + "ff.w1"], p[pre + "ff.b1"])), p[pre + "ff.w2"], p[pre + "ff.b2"])
        return ad.add(hidden, self._dropout(ff, train, rng))

    def run_layers(
        self,
        seq: TokenSequence,
        train: bool = False,
        rng: np.random.Generator | None = None,
        prefix_visible: bool = True,
    ) -> Tensor:
        mask = build_attention_mask(seq.layout, prefix_visible=prefix_visible)
        hidden = seq.embeddings
        for i in range(self.cfg.n_layers):
            hidden = self.cba_layer(hidden, mask, i, seq.layout, train=train, rng=rng)
        return ad.layer_norm(hidden, self.params["final_ln.g"], self.params["final_ln.b"])

    def encode_batch(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
        mask_gamma: float | None = None,
        prompt: Tensor | None = None,
        prefix_visible: bool = True,
    ) -> tuple[EncoderOutput, np.ndarray | None]:
        """Full forward pass over a (B, C, T) batch.

        With ``mask_gamma`` set, patch tokens are masked for reconstruction
        pretraining and the selection bitmap is returned. A ``prompt`` tensor
        of shape (B, d) is prepended as a prefix row.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        x_norm, revin = revin_normalize(x)
        seq = self.tokenize(x_norm)

        bitmap = None
        if mask_gamma is not None:
            if rng is None:
                raise ValueError("masking requires an rng")
            seq, bitmap = self.apply_mask(seq, mask_gamma, rng)

        if prompt is not None:
            if prompt.shape != (x.shape[0], self.cfg.d):
                raise ValueError(f"prompt shape {prompt.shape} must be ({x.shape[0]}, {self.cfg.d})")
            prompt_layout = SequenceLayout(
                channels=seq.layout.channels, t_hat=seq.layout.t_hat, with_prompt=True
            )
            prefix = ad.reshape(prompt, (x.shape[0], 1, self.cfg.d))
            prompt_roles = np.concatenate(
                [np.full((x.shape[0], 1), ROLE_PROMPT, dtype=np.int8), seq.roles], axis=1
            )
            if bitmap is not None:
                bitmap = np.concatenate([np.zeros((x.shape[0], 1), dtype=bool), bitmap], axis=1)
            seq = TokenSequence(
                embeddings=ad.concat([prefix, seq.embeddings], axis=1),
                roles=prompt_roles,
                channel_of=prompt_layout.channel_of(),
                patch_index_of=prompt_layout.patch_index_of(),
                layout=prompt_layout,
            )

        hidden = self.run_layers(seq, train=train, rng=rng, prefix_visible=prefix_visible)
        layout = seq.layout
        h_cls = ad.slice_(hidden, (slice(None), layout.cls_pos))
        h_cit = ad.take(hidden, layout.cit_positions, axis=1)
        return EncoderOutput(hidden=hidden, h_cls=h_cls, h_cit=h_cit, seq=seq, revin=revin), bitmap

    def encode(self, x: np.ndarray) -> EncoderOutput:
        """Deterministic evaluation-mode encoding of one (C, T) instance."""
        out, _ = self.encode_batch(np.asarray(x)[None], train=False)
        return out

    # -- heads ---------------------------------------------------------------

    def patch_outputs(self, output: EncoderOutput) -> Tensor:
        """Hidden rows at patch positions, shaped (B, C, t_hat, d)."""
        layout = output.seq.layout
        batch = output.hidden.shape[0]
        rows = ad.take(output.hidden, layout.all_patch_positions, axis=1)
        return ad.reshape(rows, (batch, layout.channels, layout.t_hat, self.cfg.d))

    def reconstruction_head(self, output: EncoderOutput) -> Tensor:
        """Per-token linear d -> patch_len at every patch position: (B, C, t_hat, P)."""
        layout = output.seq.layout
        batch = output.hidden.shape[0]
        rows = ad.take(output.hidden, layout.all_patch_positions, axis=1)
        flat = ad.reshape(rows, (batch * layout.channels * layout.t_hat, self.cfg.d))
        pred = ad.add(ad.matmul(flat, self.params["head.recon.w"]), self.params["head.recon.b"])
        return ad.reshape(pred, (batch, layout.channels, layout.t_hat, self.cfg.patch_len))

    def classification_head(self, h_cls: Tensor) -> Tensor:
        return ad.add(ad.matmul(h_cls, self.params["head.cls.w"]), self.params["head.cls.b"])


class ForecastHead:
    """Linear map from a channel's concatenated patch outputs to the horizon,
    shared across channels, with the normalization inverted on the way out."""

    def __init__(self, d: int, t_hat: int, horizon: int, seed: int = 0, zero_init: bool = False):
        self.d = d
        self.t_hat = t_hat
        self.horizon = horizon
        rng = substream(seed, "forecast-head")
        if zero_init:
            w = np.zeros((t_hat * d, horizon))
        else:
            w = rng.standard_normal((t_hat * d, horizon)).astype(np.float32).astype(np.float64) * 0.02
        self.params = {
            "head.forecast.w": Tensor(w, requires_grad=True),
            "head.forecast.b": Tensor(np.zeros(horizon), requires_grad=True),
        }

    def forward(self, patch_outputs: Tensor, revin: RevinState) -> Tensor:
        batch, channels, t_hat, d = patch_outputs.shape
        if t_hat != self.t_hat or d != self.d:
            raise ValueError(
                f"forecast head built for t_hat={self.t_hat}, d={self.d}; got {t_hat}, {d}"
            )
        flat = ad.reshape(patch_outputs, (batch * channels, t_hat * d))
        pred = ad.add(ad.matmul(flat, self.params["head.forecast.w"]), self.params["head.forecast.b"])
        pred = ad.reshape(pred, (batch, channels, self.horizon))
        std = np.broadcast_to(revin.std, (batch, channels, self.horizon)).copy()
        mean_arr = np.broadcast_to(revin.mean, (batch, channels, self.horizon)).copy()
        return ad.add(ad.mul(pred, Tensor(std)), Tensor(mean_arr))
