"""Masked adversarial sample construction.

Tokens are masked i.i.d. Bernoulli(p) (special tokens protected), the
generator decodes the masked slots, and Gumbel-Softmax sampling yields both
the hard adversarial tokens X' and a differentiable soft carrier so that
gradients reach the generator. Special tokens are excised from the sampling
support by an additive bias before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_BIAS, Tensor
from .models import CLS_ID, MASK_ID, PAD_ID, SEP_ID, EncoderModel, lm_logits

GUMBEL_CLAMP = 1e-12


@dataclass(frozen=True)
class MaskPolicy:
    p: float = 0.3
    mask_token_id: int = MASK_ID
    protected_ids: frozenset[int] = frozenset({PAD_ID, CLS_ID, SEP_ID})

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"mask probability must be in [0, 1], got {self.p}")


@dataclass
class MaskedBatch:
    original_ids: np.ndarray
    masked_ids: np.ndarray
    mask_positions: np.ndarray  # bool, True where a token was replaced


@dataclass
class AugmentedBatch:
    """Adversarial batch X'.

    `hard_ids` is the discrete text (argmax at masked slots, original tokens
    elsewhere). `soft_onehot` carries, per position, a distribution over the
    vocabulary: the Gumbel-Softmax sample at masked slots (the gradient path
    back to the generator) and the exact one-hot of the original token
    elsewhere.
    """

    hard_ids: np.ndarray
    soft_onehot: Tensor
    mask_positions: np.ndarray
    attention_mask: np.ndarray


def mask_tokens(token_ids: np.ndarray, policy: MaskPolicy, rng: np.random.Generator) -> MaskedBatch:
    """Mask each non-protected position independently with probability p."""
    token_ids = np.asarray(token_ids)
    protected = np.isin(token_ids, list(policy.protected_ids))
    draw = rng.random(token_ids.shape) < policy.p
    mask = draw & ~protected
    masked = np.where(mask, policy.mask_token_id, token_ids)
    return MaskedBatch(original_ids=token_ids, masked_ids=masked, mask_positions=mask)


def sample_gumbel(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel noise via -log(-log(U)) with U clamped away from {0, 1}."""
    u = np.clip(rng.random(shape), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax_st(logits: Tensor, tau_g: float, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Sample (hard, soft) from per-position vocab logits.

    soft = softmax((logits + g) / tau_g) with fresh Gumbel noise g; hard is
    the straight-through carrier: its forward values are the exact one-hot of
    argmax(soft) while its gradients are those of soft.
    """
    if tau_g <= 0:
        raise ValueError(f"gumbel temperature must be positive, got {tau_g}")
    if not np.isfinite(logits.data).all():
        raise ad.NonFiniteError("gumbel_softmax_st received non-finite logits")
    noise = sample_gumbel(logits.shape, rng)
    soft = ad.softmax(ad.mul(ad.add(logits, Tensor(noise)), Tensor(1.0 / tau_g)), axis=-1)
    flat = soft.data.reshape(-1, soft.shape[-1])
    hard = np.zeros_like(flat)
    hard[np.arange(flat.shape[0]), flat.argmax(axis=1)] = 1.0
    hard = hard.reshape(soft.shape)
    return ad.straight_through(hard, soft), soft


def _exact_onehot(ids: np.ndarray, vocab_size: int) -> np.ndarray:
    out = np.zeros((*ids.shape, vocab_size))
    rows, cols = np.indices(ids.shape)
    out[rows, cols, ids] = 1.0
    return out


def generate_adversarial(
    generator: EncoderModel,
    masked: MaskedBatch,
    tau_g: float,
    rng: np.random.Generator,
    *,
    attention_mask: np.ndarray | None = None,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> AugmentedBatch:
    """Decode masked slots with the generator into an adversarial batch.

    Unmasked positions are copied verbatim with exact one-hot carriers; masked
    positions carry the Gumbel-Softmax sample over the non-special vocabulary.
    """
    vocab = generator.config.vocab_size
    if attention_mask is None:
        attention_mask = (masked.original_ids != PAD_ID).astype(np.float64)

    logits = lm_logits(generator, masked.masked_ids, attention_mask, training=training, rng=dropout_rng)
    support_bias = np.zeros(vocab)
    support_bias[[PAD_ID, CLS_ID, SEP_ID, MASK_ID]] = NEG_BIAS
    st_carrier, soft = gumbel_softmax_st(ad.add(logits, Tensor(support_bias)), tau_g, rng)

    sampled_ids = st_carrier.data.argmax(axis=-1)
    hard_ids = np.where(masked.mask_positions, sampled_ids, masked.original_ids)

    # blend: soft sample at masked slots, exact one-hot elsewhere
    sel = masked.mask_positions.astype(np.float64)[..., None]
    original_onehot = _exact_onehot(masked.original_ids, vocab)
    carrier = ad.add(ad.mul(soft, Tensor(sel)), Tensor(original_onehot * (1.0 - sel)))

    return AugmentedBatch(
        hard_ids=hard_ids,
        soft_onehot=carrier,
        mask_positions=masked.mask_positions,
        attention_mask=np.asarray(attention_mask, dtype=np.float64),
    )
