"""Vocabulary, TSV corpus ingestion, synthetic task generation, batching.

Tokenization is plain whitespace; ids 0-3 are reserved (PAD, CLS, SEP, MASK)
and id 4 is UNK, the first non-reserved entry. The built-in synthetic task is
count-comparison: label 1 iff marker A occurs strictly more often than
marker B in the sequence.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .models import CLS_ID, MASK_ID, PAD_ID, SEP_ID
from .seeding import derive_seed, stream

RESERVED_TOKENS = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"]
UNK_TOKEN = "[UNK]"
UNK_ID = 4


@dataclass
class Vocab:
    id_to_token: list[str]
    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> list[str]:
        specials = set(range(len(RESERVED_TOKENS)))
        out = []
        for i in ids:
            if skip_special and int(i) in specials:
                continue
            out.append(self.id_to_token[int(i)])
        return out

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocab":
        id_to_token = RESERVED_TOKENS + [UNK_TOKEN] + tokens
        return cls(id_to_token=id_to_token, token_to_id={t: i for i, t in enumerate(id_to_token)})


def build_vocab(texts: Iterable[str]) -> Vocab:
    """Whitespace tokens sorted by descending frequency, ties lexicographic."""
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in texts:
        n_texts += 1
        counts.update(text.split())
    if n_texts == 0 or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for reserved in RESERVED_TOKENS + [UNK_TOKEN]:
        counts.pop(reserved, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab.from_tokens(ordered)


@dataclass
class Example:
    text_a: list[str]
    text_b: list[str] | None = None
    label: int | None = None

    def text(self) -> str:
        if self.text_b is None:
            return " ".join(self.text_a)
        return " ".join(self.text_a) + "\t" + " ".join(self.text_b)


@dataclass
class Dataset:
    examples: list[Example]
    num_classes: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.examples)

    def texts(self) -> list[str]:
        out = []
        for ex in self.examples:
            out.append(" ".join(ex.text_a))
            if ex.text_b is not None:
                out.append(" ".join(ex.text_b))
        return out

    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)


@dataclass
class Batch:
    token_ids: np.ndarray        # (K, L) int64
    attention_mask: np.ndarray   # (K, L) float64, 1 for real tokens
    labels: np.ndarray | None    # (K,) int64
    indices: np.ndarray          # positions in the source dataset

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def encode_example(example: Example, vocab: Vocab, max_len: int) -> list[int]:
    ids = [CLS_ID] + [vocab.encode_token(t) for t in example.text_a] + [SEP_ID]
    if example.text_b is not None:
        ids += [vocab.encode_token(t) for t in example.text_b] + [SEP_ID]
    if len(ids) > max_len:
        raise ValueError(f"encoded example length {len(ids)} exceeds max_len {max_len}")
    return ids


def encode_dataset(dataset: Dataset, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Encode all examples, padded to the longest sequence present."""
    rows = [encode_example(ex, vocab, max_len) for ex in dataset.examples]
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    mask = (ids != PAD_ID).astype(np.float64)
    labels = None
    if all(ex.label is not None for ex in dataset.examples):
        labels = dataset.labels()
    return ids, mask, labels


def batches(
    dataset: Dataset,
    vocab: Vocab,
    max_len: int,
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> Iterator[Batch]:
    """One epoch of batches; seeded Fisher-Yates shuffle when `rng` is given.

    The final short batch is emitted as-is. Each batch is padded to its own
    longest row.
    """
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    ids, mask, labels = encode_dataset(dataset, vocab, max_len)
    order = np.arange(len(dataset))
    if rng is not None:
        order = rng.permutation(order)
    for start in range(0, len(order), batch_size):
        pick = order[start : start + batch_size]
        width = int(mask[pick].sum(axis=1).max())
        yield Batch(
            token_ids=ids[pick, :width].copy(),
            attention_mask=mask[pick, :width].copy(),
            labels=None if labels is None else labels[pick].copy(),
            indices=pick.copy(),
        )


# -- TSV ----------------------------------------------------------------------

SCHEMAS = ("single", "pair")


def load_tsv(path: str | Path, schema: str) -> Dataset:
    """Read `label<TAB>text` (single) or `label<TAB>text_a<TAB>text_b` (pair)."""
    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")
    want = 2 if schema == "single" else 3
    path = Path(path)
    examples: list[Example] = []
    with open(path, encoding="utf-8", newline=None) as fh:
        header = fh.readline()
        if not header:
            raise ValueError(f"{path}: empty file")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != want:
                raise ValueError(f"{path}:{lineno}: expected {want} tab-separated columns, got {len(cols)}")
            try:
                label = int(cols[0])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: label {cols[0]!r} is not an integer") from exc
            examples.append(
                Example(
                    text_a=cols[1].split(),
                    text_b=cols[2].split() if want == 3 else None,
                    label=label,
                )
            )
    if not examples:
        raise ValueError(f"{path}: no data rows")
    num_classes = max(ex.label for ex in examples) + 1
    return Dataset(examples=examples, num_classes=num_classes)


def save_tsv(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    pair = dataset.examples[0].text_b is not None
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("label\ttext_a\ttext_b\n" if pair else "label\ttext\n")
        for ex in dataset.examples:
            fh.write(f"{ex.label}\t{ex.text()}\n")


# -- synthetic count-comparison task -------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "count-comparison"
    vocab_size: int = 64
    seq_len: int = 16
    marker_a: str = "aa"
    marker_b: str = "bb"
    train_size: int = 4000
    dev_size: int = 1000
    test_size: int = 1000
    seed: int = 0
    count_min: int = 0
    count_max: int = 4
    ood_len_factor: int = 2
    ood_count_shift: int = 2

    def __post_init__(self):
        if self.kind != "count-comparison":
            raise ValueError(f"unknown synthetic task kind {self.kind!r}")
        if self.vocab_size <= 4 + 2:
            raise ValueError(f"vocab_size must exceed reserved ids plus markers, got {self.vocab_size}")
        if self.seq_len < 4:
            raise ValueError(f"seq_len must be >= 4, got {self.seq_len}")
        if not 0 <= self.count_min <= self.count_max:
            raise ValueError("need 0 <= count_min <= count_max")
        if 2 * self.count_max > self.seq_len:
            raise ValueError("marker counts cannot exceed the sequence length")


def _filler_tokens(spec: SyntheticTaskSpec) -> list[str]:
    n = spec.vocab_size - len(RESERVED_TOKENS) - 1 - 2  # reserved + UNK + two markers
    if n < 1:
        raise ValueError("vocab_size leaves no room for filler tokens")
    return [f"w{i:02d}" for i in range(n)]


def _draw_example(
    rng: np.random.Generator,
    fillers: list[str],
    spec: SyntheticTaskSpec,
    target_label: int,
    seq_len: int,
    count_lo: int,
    count_hi: int,
) -> Example:
    while True:
        ca = int(rng.integers(count_lo, count_hi + 1))
        cb = int(rng.integers(count_lo, count_hi + 1))
        if ca == cb:
            continue  # ties are regenerated, never emitted
        if int(ca > cb) != target_label:
            continue
        tokens = [fillers[i] for i in rng.integers(0, len(fillers), size=seq_len)]
        positions = rng.choice(seq_len, size=ca + cb, replace=False)
        for pos in positions[:ca]:
            tokens[pos] = spec.marker_a
        for pos in positions[ca:]:
            tokens[pos] = spec.marker_b
        return Example(text_a=tokens, label=target_label)


def _gen_split(
    spec: SyntheticTaskSpec,
    rng: np.random.Generator,
    size: int,
    split: str,
    seq_len: int,
    count_lo: int,
    count_hi: int,
) -> Dataset:
    fillers = _filler_tokens(spec)
    examples = [
        _draw_example(rng, fillers, spec, target_label=i % 2, seq_len=seq_len, count_lo=count_lo, count_hi=count_hi)
        for i in range(size)
    ]
    return Dataset(examples=examples, num_classes=2, split=split)


def gen_synthetic(spec: SyntheticTaskSpec) -> tuple[Dataset, Dataset, Dataset, Vocab]:
    """Deterministic (train, dev, test) splits plus the generation vocabulary."""
    splits = []
    for split, size in (("train", spec.train_size), ("dev", spec.dev_size), ("test", spec.test_size)):
        rng = stream(derive_seed(spec.seed, "synthetic", split))
        splits.append(_gen_split(spec, rng, size, split, spec.seq_len, spec.count_min, spec.count_max))
    vocab = Vocab.from_tokens(sorted([spec.marker_a, spec.marker_b] + _filler_tokens(spec)))
    return splits[0], splits[1], splits[2], vocab


def gen_synthetic_ood(spec: SyntheticTaskSpec, size: int | None = None) -> Dataset:
    """Distribution-shifted split: sequences of length `ood_len_factor * L`
    with the marker-count range shifted up by `ood_count_shift`."""
    rng = stream(derive_seed(spec.seed, "synthetic", "ood"))
    return _gen_split(
        spec,
        rng,
        spec.dev_size if size is None else size,
        "ood",
        spec.seq_len * spec.ood_len_factor,
        spec.count_min + spec.ood_count_shift,
        spec.count_max + spec.ood_count_shift,
    )


@dataclass
class TaskData:
    """All splits of one task plus the vocabulary used for modeling."""

    train: Dataset
    dev: Dataset
    test: Dataset | None = None
    ood: Dataset | None = None
    vocab: Vocab | None = None

    def __post_init__(self):
        if self.vocab is None:
            self.vocab = build_vocab(self.train.texts())


def load_task(data_dir: str | Path, schema: str) -> TaskData:
    """Load train/dev[/test][/ood] TSVs from a directory."""
    data_dir = Path(data_dir)
    def maybe(name):
        p = data_dir / f"{name}.tsv"
        return load_tsv(p, schema) if p.exists() else None

    train = maybe("train")
    dev = maybe("dev")
    if train is None or dev is None:
        raise ValueError(f"{data_dir} must contain train.tsv and dev.tsv")
    return TaskData(train=train, dev=dev, test=maybe("test"), ood=maybe("ood"))
