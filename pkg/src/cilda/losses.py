"""Distillation losses and the composite min-max objectives.

Covers the temperature-scaled KL between teacher and student logits, cross
entropy, the contrastive loss over concatenated-and-projected per-layer CLS
stacks, and the two composites built from them: the generator's adversarial
objective (KL + contrastive divergence on augmented samples) and the
student's training objective (CE + KD on originals, KD + contrastive on
augmented samples).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .augment import AugmentedBatch
from .data import Batch
from .models import EncoderConfig, EncoderModel, LayerStack, classifier_logits, encode
from .seeding import derive_seed, stream


@dataclass(frozen=True)
class LossWeights:
    """Scalar hyperparameters of the generator and student objectives."""

    alpha1: float = 1.0          # generator: weight of the logit-KL term
    alpha2: float = 1.0          # generator: weight of the contrastive term
    tau1: float = 1.0            # logit softmax temperature
    tau2: float = 2.0            # contrastive similarity temperature
    lambda1: float = 1.0 / 3.0   # student: CE on originals
    lambda2: float = 1.0 / 3.0   # student: KD on originals
    lambda2_aug: float = 2.0 / 9.0  # student: KD on augmented samples
    lambda3: float = 1.0 / 9.0   # student: contrastive on augmented samples
    gumbel_tau: float = 1.0
    scale_kl_by_tau_sq: bool = False  # classic tau^2 correction, off by default

    def __post_init__(self):
        for name in ("tau1", "tau2", "gumbel_tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"temperature {name} must be strictly positive")
        for name in ("alpha1", "alpha2", "lambda1", "lambda2", "lambda2_aug", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"mixing weight {name} must be nonnegative")


def kd_kl(teacher_logits: Tensor, student_logits: Tensor, tau1: float, scale_by_tau_sq: bool = False) -> Tensor:
    """Batch-mean KL(softmax(t/tau) || softmax(s/tau)) over logit rows."""
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"logit shapes differ: {teacher_logits.shape} vs {student_logits.shape}")
    if tau1 <= 0:
        raise ValueError("tau1 must be strictly positive")
    inv = Tensor(1.0 / tau1)
    log_p = ad.log_softmax(ad.mul(teacher_logits, inv), axis=-1)
    log_q = ad.log_softmax(ad.mul(student_logits, inv), axis=-1)
    p = ad.exp(log_p)
    per_row = ad.tsum(ad.mul(p, ad.sub(log_p, log_q)), axis=-1)
    out = ad.tmean(per_row)
    if scale_by_tau_sq:
        out = ad.mul(out, Tensor(tau1 * tau1))
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the true class."""
    labels = np.asarray(labels)
    k, c = logits.shape
    if labels.shape != (k,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {k}")
    if labels.min() < 0 or labels.max() >= c:
        bad = int(labels[(labels < 0) | (labels >= c)][0])
        raise ValueError(f"label {bad} out of range [0, {c})")
    onehot = np.zeros((k, c))
    onehot[np.arange(k), labels] = 1.0
    log_q = ad.log_softmax(logits, axis=-1)
    return ad.mul(ad.tmean(ad.tsum(ad.mul(log_q, Tensor(onehot)), axis=-1)), Tensor(-1.0))


def concat_cls(stack: LayerStack) -> Tensor:
    """Per-row concatenation of every layer's CLS vector, layer 1 first."""
    if not stack.cls_per_layer:
        raise ValueError("empty layer stack")
    if len(stack.cls_per_layer) == 1:
        return stack.cls_per_layer[0]
    return ad.concat(stack.cls_per_layer, axis=1)


@dataclass
class ProjectionHead:
    """Linear maps sending concatenated CLS stacks into a shared u-dim space."""

    teacher_w: Tensor
    teacher_b: Tensor
    student_w: Tensor
    student_b: Tensor
    u: int

    @classmethod
    def create(cls, teacher_cfg: EncoderConfig, student_cfg: EncoderConfig, u: int, seed: int) -> "ProjectionHead":
        rng = stream(derive_seed(seed, "init", "projection"))
        t_in = teacher_cfg.num_layers * teacher_cfg.d_model
        s_in = student_cfg.num_layers * student_cfg.d_model
        def lin(n_in):
            scale = 1.0 / np.sqrt(n_in)
            return Tensor(rng.uniform(-scale, scale, size=(n_in, u)), requires_grad=True)
        return cls(
            teacher_w=lin(t_in), teacher_b=Tensor(np.zeros(u), requires_grad=True),
            student_w=lin(s_in), student_b=Tensor(np.zeros(u), requires_grad=True),
            u=u,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            "proj.teacher.w": self.teacher_w,
            "proj.teacher.b": self.teacher_b,
            "proj.student.w": self.student_w,
            "proj.student.b": self.student_b,
        }

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def param_bytes(self) -> bytes:
        ps = self.parameters()
        return b"".join(ps[n].data.tobytes() for n in sorted(ps))


def project_normalize(h_hat: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Linear map followed by L2 normalization to the unit sphere."""
    if h_hat.shape[-1] != weight.shape[0]:
        raise ValueError(f"projection input dim {h_hat.shape[-1]} != map input dim {weight.shape[0]}")
    return ad.l2_normalize(ad.add(ad.matmul(h_hat, weight), bias), axis=-1)


def crd_loss(teacher_projs: Tensor, student_projs: Tensor, tau2: float) -> Tensor:
    """Contrastive loss over K paired unit vectors.

    Row k treats the student's k-th projection as the positive for the
    teacher's k-th projection; all K in-batch student projections (including
    j = k) form the softmax denominator at temperature tau2.
    """
    if teacher_projs.shape != student_projs.shape:
        raise ValueError(f"projection shapes differ: {teacher_projs.shape} vs {student_projs.shape}")
    if teacher_projs.ndim != 2 or teacher_projs.shape[0] < 1:
        raise ValueError("expected (K, u) projections with K >= 1")
    if tau2 <= 0:
        raise ValueError("tau2 must be strictly positive")
    for name, t in (("teacher", teacher_projs), ("student", student_projs)):
        norms = np.sqrt((t.data**2).sum(axis=-1))
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError(f"{name} projections are not unit-norm (max deviation {np.abs(norms - 1.0).max():.2e})")
    k = teacher_projs.shape[0]
    sims = ad.matmul(teacher_projs, ad.transpose(student_projs, (1, 0)))
    log_probs = ad.log_softmax(ad.mul(sims, Tensor(1.0 / tau2)), axis=-1)
    eye = np.eye(k)
    return ad.mul(ad.tmean(ad.tsum(ad.mul(log_probs, Tensor(eye)), axis=-1)), Tensor(-1.0))


def _projected_stacks(
    teacher_stack: LayerStack, student_stack: LayerStack, heads: ProjectionHead
) -> tuple[Tensor, Tensor]:
    t = project_normalize(concat_cls(teacher_stack), heads.teacher_w, heads.teacher_b)
    s = project_normalize(concat_cls(student_stack), heads.student_w, heads.student_b)
    return t, s


def generator_objective(
    teacher: EncoderModel,
    student: EncoderModel,
    heads: ProjectionHead,
    aug: AugmentedBatch,
    w: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Adversarial objective on augmented samples: alpha1 * KL + alpha2 * CRD.

    Teacher and student run in evaluation mode; gradients reach the generator
    only through the soft carrier of `aug`. Zero-weight terms are skipped
    outright so their graphs are never built.
    """
    t_stack = encode(teacher, aug.soft_onehot, aug.attention_mask)
    s_stack = encode(student, aug.soft_onehot, aug.attention_mask)
    kl = kd_kl(classifier_logits(teacher, t_stack), classifier_logits(student, s_stack), w.tau1, w.scale_kl_by_tau_sq)
    parts = {"L_G": float(kl.data)}
    total = ad.mul(kl, Tensor(w.alpha1))
    if w.alpha2 != 0.0:
        crd = crd_loss(*_projected_stacks(t_stack, s_stack, heads), w.tau2)
        parts["L_CRD_gen"] = float(crd.data)
        total = ad.add(total, ad.mul(crd, Tensor(w.alpha2)))
    else:
        parts["L_CRD_gen"] = 0.0
    return total, parts


def student_objective(
    orig: Batch,
    aug: AugmentedBatch | None,
    teacher: EncoderModel | None,
    student: EncoderModel,
    heads: ProjectionHead | None,
    w: LossWeights,
    *,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Student training objective over original and augmented samples.

    lambda1 * CE(S(X), y) + lambda2 * KL(T(X), S(X))
    + lambda2_aug * KL(T(X'), S(X')) + lambda3 * CRD(X' stacks).
    Augmented terms require `aug` (and `heads` for the contrastive part);
    zero-weight terms are skipped outright.
    """
    if orig.labels is None:
        raise ValueError("student objective requires labeled original samples")
    parts = {"L_CE": 0.0, "L_KD_orig": 0.0, "L_KD_aug": 0.0, "L_CRD": 0.0}
    terms: list[Tensor] = []

    s_logits = _batch_logits(student, orig, training=training, rng=dropout_rng)
    ce = cross_entropy(s_logits, orig.labels)
    parts["L_CE"] = float(ce.data)
    terms.append(ad.mul(ce, Tensor(w.lambda1)))

    if w.lambda2 != 0.0:
        t_logits = _batch_logits(teacher, orig)
        kl = kd_kl(t_logits, s_logits, w.tau1, w.scale_kl_by_tau_sq)
        parts["L_KD_orig"] = float(kl.data)
        terms.append(ad.mul(kl, Tensor(w.lambda2)))

    want_aug = (w.lambda2_aug != 0.0 or w.lambda3 != 0.0) and aug is not None
    if want_aug:
        t_stack = encode(teacher, aug.hard_ids, aug.attention_mask)
        s_stack = encode(student, aug.hard_ids, aug.attention_mask, training=training, rng=dropout_rng)
        if w.lambda2_aug != 0.0:
            kl_aug = kd_kl(classifier_logits(teacher, t_stack), classifier_logits(student, s_stack),
                           w.tau1, w.scale_kl_by_tau_sq)
            parts["L_KD_aug"] = float(kl_aug.data)
            terms.append(ad.mul(kl_aug, Tensor(w.lambda2_aug)))
        if w.lambda3 != 0.0:
            if heads is None:
                raise ValueError("lambda3 > 0 requires projection heads")
            crd = crd_loss(*_projected_stacks(t_stack, s_stack, heads), w.tau2)
            parts["L_CRD"] = float(crd.data)
            terms.append(ad.mul(crd, Tensor(w.lambda3)))

    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total, parts


def _batch_logits(model: EncoderModel, batch: Batch, *, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    stack = encode(model, batch.token_ids, batch.attention_mask, training=training, rng=rng)
    return classifier_logits(model, stack)
