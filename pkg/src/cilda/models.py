"""Tiny transformer encoders with per-layer CLS extraction, plus Adam.

The same `EncoderModel` plays teacher, student, and generator; the head kind
(classifier vs masked LM) is fixed by its config. Blocks are post-layernorm
(attention -> add&norm -> FFN -> add&norm) with GELU, mirroring the BERT
family. The masked-LM head ties the input embedding matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_BIAS, Tensor
from .seeding import derive_seed, stream

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
SPECIAL_IDS = (PAD_ID, CLS_ID, SEP_ID, MASK_ID)

CLASSIFIER = "classifier"
MASKED_LM = "masked_lm"

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    d_model: int
    num_heads: int
    d_ff: int
    vocab_size: int
    max_len: int
    dropout: float = 0.1
    head_kind: str = CLASSIFIER
    num_classes: int = 2

    def __post_init__(self):
        checks = [
            ("num_layers", self.num_layers >= 1),
            ("d_model", self.d_model >= 1),
            ("num_heads", self.num_heads >= 1),
            ("d_ff", self.d_ff >= 1),
            ("vocab_size", self.vocab_size > max(SPECIAL_IDS)),
            ("max_len", self.max_len >= 2),
            ("dropout", 0.0 <= self.dropout < 1.0),
            ("head_kind", self.head_kind in (CLASSIFIER, MASKED_LM)),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid EncoderConfig field: {name}={getattr(self, name)!r}")
        if self.d_model % self.num_heads != 0:
            raise ValueError("invalid EncoderConfig field: d_model must be divisible by num_heads")
        if self.head_kind == CLASSIFIER and self.num_classes < 2:
            raise ValueError(f"invalid EncoderConfig field: num_classes={self.num_classes}")


@dataclass
class LayerStack:
    """Per-block CLS vectors (one (K, d) tensor per layer) + final hidden states."""

    cls_per_layer: list[Tensor]
    final_hidden: Tensor


def _param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, ff = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (config.vocab_size, d),
        "embed.pos": (config.max_len, d),
        "embed.ln.gain": (d,),
        "embed.ln.bias": (d,),
    }
    for i in range(config.num_layers):
        p = f"block{i}"
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{b}"] = (d,)
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, ff)
        shapes[f"{p}.ffn.b1"] = (ff,)
        shapes[f"{p}.ffn.w2"] = (ff, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
    if config.head_kind == CLASSIFIER:
        shapes["head.w"] = (d, config.num_classes)
        shapes["head.b"] = (config.num_classes,)
    else:
        # LM head reuses embed.tok; only the output bias is extra
        shapes["head.lm_bias"] = (config.vocab_size,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class EncoderModel:
    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def param_bytes(self) -> bytes:
        return b"".join(self.params[name].data.tobytes() for name in sorted(self.params))

    def clone(self) -> "EncoderModel":
        cloned = {name: Tensor(p.data.copy(), requires_grad=p.requires_grad) for name, p in self.params.items()}
        return EncoderModel(self.config, cloned)

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())


def init_params(config: EncoderConfig, seed: int) -> EncoderModel:
    """Fresh model: truncated-normal weights (std 0.02), zero biases, unit LN gains."""
    rng = stream(derive_seed(seed, "init"))
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo", "head.b", "lm_bias")):
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape, INIT_STD)
        params[name] = Tensor(data, requires_grad=True)
    return EncoderModel(config, params)


def _check_token_ids(config: EncoderConfig, token_ids: np.ndarray) -> None:
    if token_ids.ndim != 2:
        raise ValueError(f"token ids must be (batch, seq), got {token_ids.shape}")
    if token_ids.shape[1] > config.max_len:
        raise ValueError(f"sequence length {token_ids.shape[1]} exceeds max_len {config.max_len}")
    bad = (token_ids < 0) | (token_ids >= config.vocab_size)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValueError(
            f"token id {int(token_ids[r, c])} out of range [0, {config.vocab_size}) at row {int(r)}, position {int(c)}"
        )
    if (token_ids[:, 0] != CLS_ID).any():
        row = int(np.argwhere(token_ids[:, 0] != CLS_ID)[0][0])
        raise ValueError(f"row {row} does not start with the CLS token")


def encode(
    model: EncoderModel,
    token_input,
    attention_mask: np.ndarray | None = None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> LayerStack:
    """Run the encoder; returns the CLS vector after every block plus final states.

    `token_input` is either an integer (K, L) id array or a float (K, L, V)
    tensor of per-position token distributions (rows summing to 1), in which
    case embeddings are the distribution-weighted rows of the embedding table.
    """
    cfg = model.config
    p = model.params
    drop_p = cfg.dropout if training else 0.0
    if training and drop_p > 0.0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")

    if isinstance(token_input, Tensor):
        k, seq_len, vocab = token_input.shape
        if vocab != cfg.vocab_size:
            raise ValueError(f"distribution input vocab {vocab} != model vocab {cfg.vocab_size}")
        if seq_len > cfg.max_len:
            raise ValueError(f"sequence length {seq_len} exceeds max_len {cfg.max_len}")
        if attention_mask is None:
            raise ValueError("distribution input requires an explicit attention mask")
        x = ad.matmul(token_input, p["embed.tok"])
    else:
        token_ids = np.asarray(token_input)
        _check_token_ids(cfg, token_ids)
        k, seq_len = token_ids.shape
        if attention_mask is None:
            attention_mask = (token_ids != PAD_ID).astype(np.float64)
        x = ad.embedding(p["embed.tok"], token_ids)

    mask = np.asarray(attention_mask, dtype=np.float64)
    if mask.shape != (k, seq_len):
        raise ValueError(f"attention mask shape {mask.shape} != {(k, seq_len)}")
    attn_bias = Tensor(((1.0 - mask) * NEG_BIAS).reshape(k, 1, 1, seq_len))

    pos = ad.index(p["embed.pos"], (slice(0, seq_len), slice(None)))
    x = ad.add(x, ad.reshape(pos, (1, seq_len, cfg.d_model)))
    x = ad.layer_norm(x, p["embed.ln.gain"], p["embed.ln.bias"])
    x = ad.dropout(x, drop_p, rng, training)

    heads, d_head = cfg.num_heads, cfg.d_model // cfg.num_heads
    cls_per_layer: list[Tensor] = []
    for i in range(cfg.num_layers):
        b = f"block{i}"

        def proj(w, bias):
            out = ad.add(ad.matmul(x, p[f"{b}.attn.{w}"]), p[f"{b}.attn.{bias}"])
            out = ad.reshape(out, (k, seq_len, heads, d_head))
            return ad.transpose(out, (0, 2, 1, 3))

        q, kk, v = proj("wq", "bq"), proj("wk", "bk"), proj("wv", "bv")
        scores = ad.matmul(q, ad.transpose(kk, (0, 1, 3, 2)))
        scores = ad.mul(scores, Tensor(1.0 / np.sqrt(d_head)))
        scores = ad.add(scores, attn_bias)
        probs = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(probs, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (k, seq_len, cfg.d_model))
        ctx = ad.add(ad.matmul(ctx, p[f"{b}.attn.wo"]), p[f"{b}.attn.bo"])
        ctx = ad.dropout(ctx, drop_p, rng, training)
        x = ad.layer_norm(ad.add(x, ctx), p[f"{b}.ln1.gain"], p[f"{b}.ln1.bias"])

        h = ad.gelu(ad.add(ad.matmul(x, p[f"{b}.ffn.w1"]), p[f"{b}.ffn.b1"]))
        h = ad.add(ad.matmul(h, p[f"{b}.ffn.w2"]), p[f"{b}.ffn.b2"])
        h = ad.dropout(h, drop_p, rng, training)
        x = ad.layer_norm(ad.add(x, h), p[f"{b}.ln2.gain"], p[f"{b}.ln2.bias"])

        cls_per_layer.append(ad.index(x, (slice(None), 0, slice(None))))

    return LayerStack(cls_per_layer=cls_per_layer, final_hidden=x)


def classifier_logits(model: EncoderModel, stack: LayerStack) -> Tensor:
    """Linear head over the final-layer CLS vector."""
    if model.config.head_kind != CLASSIFIER:
        raise ValueError(f"model head is {model.config.head_kind!r}, expected classifier")
    return ad.add(ad.matmul(stack.cls_per_layer[-1], model.params["head.w"]), model.params["head.b"])


def classify(
    model: EncoderModel,
    token_input,
    attention_mask: np.ndarray | None = None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(K, num_classes) logits."""
    stack = encode(model, token_input, attention_mask, training=training, rng=rng)
    return classifier_logits(model, stack)


def lm_logits(
    model: EncoderModel,
    token_input,
    attention_mask: np.ndarray | None = None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(K, L, vocab) logits from the weight-tied masked-LM head."""
    if model.config.head_kind != MASKED_LM:
        raise ValueError(f"model head is {model.config.head_kind!r}, expected masked_lm")
    stack = encode(model, token_input, attention_mask, training=training, rng=rng)
    tied = ad.transpose(model.params["embed.tok"], (1, 0))
    return ad.add(ad.matmul(stack.final_hidden, tied), model.params["head.lm_bias"])


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kwargs) -> "AdamState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
            **kwargs,
        )


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place, from each param's `.grad`."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m[:] = b1 * m + (1 - b1) * g
        v[:] = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1**state.t)
        v_hat = v / (1 - b2**state.t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most `max_norm`; returns the norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
