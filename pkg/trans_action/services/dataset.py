"""
Anticipation samples, the TACT feature file and action-space bookkeeping.

TACT layout (little-endian):

    magic "TACT" | u16 version | u32 n_samples, N, d_rgb, d_flow, d_obj
    per sample:  u16 id length, UTF-8 sample_id,
                 rgb [N x d_rgb], flow [N x d_flow], obj [N x d_obj] as float32 row-major

Labels live in a UTF-8 CSV with header `sample_id,participant,verb,noun,action,split`.
"""

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from trans_action.exceptions import DataError
from trans_action.logger import logger
from trans_action.models.tensor import Tensor, tensor

MAGIC = b"TACT"
VERSION = 1
HEADER = struct.Struct("<4sH5I")
ANNOTATION_COLUMNS = ["sample_id", "participant", "verb", "noun", "action", "split"]
SPLITS = ("train", "val", "test")
TASKS = ("verb", "noun", "action")


@dataclass(frozen=True)
class ModalitySample:
    sample_id: str
    rgb: np.ndarray
    flow: np.ndarray
    obj: np.ndarray
    verb: int
    noun: int
    action: int
    participant_id: str
    split: str

    @property
    def n_frames(self) -> int:
        return self.rgb.shape[0]

    def label(self, task: str) -> int:
        return getattr(self, task)


@dataclass
class ActionSpace:
    n_verbs: int
    n_nouns: int
    n_actions: int
    action_table: Dict[int, Tuple[int, int]]
    train_frequencies: Dict[str, np.ndarray]
    tail_masks: Dict[str, np.ndarray]
    unseen_participants: FrozenSet[str] = field(default_factory=frozenset)

    def n_classes(self, task: str) -> int:
        return {"verb": self.n_verbs, "noun": self.n_nouns, "action": self.n_actions}[task]

    def action_pairs(self) -> np.ndarray:
        """`[n_actions, 2]` (verb, noun) per action; -1 for actions absent from the table."""
        pairs = np.full((self.n_actions, 2), -1, dtype=np.int64)
        for action, (verb, noun) in self.action_table.items():
            pairs[action] = (verb, noun)
        return pairs

    def tail_classes(self, task: str) -> np.ndarray:
        return np.flatnonzero(self.tail_masks[task])


def bottom_quartile_threshold(values: Sequence[float]) -> float:
    """
    Value separating the bottom quartile: classes strictly below it are rare.

    Ranked over the classes with a non-zero value and taken as the
    ceil(P/4)-th smallest of those P values (0-based), so ties at the boundary
    stay out of the rare set. Zero-valued classes always fall below it.
    """
    values = np.asarray(values, dtype=np.float64)
    ordered = np.sort(values[values > 0])
    if ordered.size == 0:
        return 0.0
    return float(ordered[min(math.ceil(ordered.size / 4), ordered.size - 1)])


def class_counts(labels: Sequence[int], n_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)[:n_classes]


def build_action_space(
    samples: Sequence[ModalitySample],
    n_verbs: Optional[int] = None,
    n_nouns: Optional[int] = None,
    n_actions: Optional[int] = None,
    tail_threshold: Optional[float] = None,
) -> ActionSpace:
    """
    Vocabularies from every sample's labels; frequencies and tail masks from the train split only.

    `tail_threshold` is a training-count boundary; by default the bottom-quartile threshold of each task.
    """
    n_verbs = n_verbs or 1 + max(s.verb for s in samples)
    n_nouns = n_nouns or 1 + max(s.noun for s in samples)
    n_actions = n_actions or 1 + max(s.action for s in samples)

    table: Dict[int, Tuple[int, int]] = {}
    owners: Dict[Tuple[int, int], int] = {}
    for s in samples:
        pair = (s.verb, s.noun)
        if table.setdefault(s.action, pair) != pair:
            raise DataError(f"sample '{s.sample_id}': action {s.action} maps to {pair}, "
                            f"earlier samples map it to {table[s.action]}")
        if owners.setdefault(pair, s.action) != s.action:
            raise DataError(f"sample '{s.sample_id}': pair {pair} has actions {owners[pair]} and {s.action}")

    train = [s for s in samples if s.split == "train"]
    sizes = {"verb": n_verbs, "noun": n_nouns, "action": n_actions}
    frequencies = {task: class_counts([s.label(task) for s in train], sizes[task]) for task in TASKS}
    tail_masks = {}
    for task, counts in frequencies.items():
        threshold = bottom_quartile_threshold(counts) if tail_threshold is None else tail_threshold
        tail_masks[task] = counts < threshold

    seen = {s.participant_id for s in train}
    unseen = frozenset(s.participant_id for s in samples if s.split != "train" and s.participant_id not in seen)

    return ActionSpace(n_verbs, n_nouns, n_actions, table, frequencies, tail_masks, unseen)


# === Feature file I/O ===

def encode_features(samples: Sequence[ModalitySample]) -> bytes:
    if not samples:
        raise DataError("cannot write an empty dataset")
    first = samples[0]
    n, d_rgb, d_flow, d_obj = first.n_frames, first.rgb.shape[1], first.flow.shape[1], first.obj.shape[1]
    chunks = [HEADER.pack(MAGIC, VERSION, len(samples), n, d_rgb, d_flow, d_obj)]
    for s in samples:
        if s.rgb.shape != (n, d_rgb) or s.flow.shape != (n, d_flow) or s.obj.shape != (n, d_obj):
            raise DataError(f"sample '{s.sample_id}' does not match the dataset shape "
                            f"N={n}, dims=({d_rgb}, {d_flow}, {d_obj})")
        sample_id = s.sample_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(sample_id)) + sample_id)
        for array in (s.rgb, s.flow, s.obj):
            chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_features(blob: bytes, source: str = "features") -> Dict[str, Dict[str, np.ndarray]]:
    """Map sample_id -> {rgb, flow, obj} arrays, in file order."""
    if len(blob) < HEADER.size:
        raise DataError(f"{source}: truncated header: expected {HEADER.size} bytes, found {len(blob)}")
    magic, version, n_samples, n, d_rgb, d_flow, d_obj = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"{source}: bad magic {magic!r} at byte offset 0 (expected {MAGIC!r})")
    if version != VERSION:
        raise DataError(f"{source}: unsupported format version {version}")
    if min(n, d_rgb, d_flow, d_obj) < 1:
        raise DataError(f"{source}: header has a zero extent (N={n}, dims=({d_rgb}, {d_flow}, {d_obj}))")

    widths = {"rgb": d_rgb, "flow": d_flow, "obj": d_obj}
    offset = HEADER.size
    features = {}
    for index in range(n_samples):
        if offset + 2 > len(blob):
            raise DataError(f"{source}: truncated id length of sample {index} at byte offset {offset}")
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        expected = id_len + 4 * n * sum(widths.values())
        if offset + expected > len(blob):
            raise DataError(f"{source}: truncated payload of sample {index} at byte offset {offset}: "
                            f"expected {expected} bytes, found {len(blob) - offset}")
        sample_id = blob[offset:offset + id_len].decode("utf-8")
        offset += id_len
        if sample_id in features:
            raise DataError(f"{source}: duplicate sample id '{sample_id}' at byte offset {offset - id_len}")
        arrays = {}
        for name, width in widths.items():
            size = 4 * n * width
            arrays[name] = np.frombuffer(blob, dtype="<f4", count=n * width, offset=offset).reshape(n, width).copy()
            offset += size
        features[sample_id] = arrays
    if offset != len(blob):
        raise DataError(f"{source}: {len(blob) - offset} trailing bytes after the last sample at byte offset {offset}")
    return features


def write_dataset(feature_file, annotation_file, samples: Sequence[ModalitySample]) -> Tuple[Path, Path]:
    feature_file, annotation_file = Path(feature_file), Path(annotation_file)
    feature_file.parent.mkdir(parents=True, exist_ok=True)
    annotation_file.parent.mkdir(parents=True, exist_ok=True)
    feature_file.write_bytes(encode_features(samples))

    annotations = pd.DataFrame(
        [(s.sample_id, s.participant_id, s.verb, s.noun, s.action, s.split) for s in samples],
        columns=ANNOTATION_COLUMNS,
    )
    annotations.to_csv(annotation_file, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(samples)} samples to {feature_file} and {annotation_file}")
    return feature_file, annotation_file


def _read_annotations(annotation_file: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(annotation_file, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"{annotation_file}: cannot parse annotations: {e}") from e
    if list(frame.columns) != ANNOTATION_COLUMNS:
        raise DataError(f"{annotation_file}: line 1: header must be {','.join(ANNOTATION_COLUMNS)}, "
                        f"got {','.join(frame.columns)}")
    return frame


def load_dataset(
    feature_file,
    annotation_file,
    n_verbs: Optional[int] = None,
    n_nouns: Optional[int] = None,
    n_actions: Optional[int] = None,
    tail_threshold: Optional[float] = None,
) -> Tuple[List[ModalitySample], ActionSpace]:
    feature_file, annotation_file = Path(feature_file), Path(annotation_file)
    for path in (feature_file, annotation_file):
        if not path.is_file():
            raise DataError(f"File not found: {path}")

    features = decode_features(feature_file.read_bytes(), source=str(feature_file))
    frame = _read_annotations(annotation_file)
    limits = {"verb": n_verbs, "noun": n_nouns, "action": n_actions}

    samples = []
    for row_index, row in enumerate(frame.itertuples(index=False)):
        line = row_index + 2
        if row.sample_id not in features:
            raise DataError(f"{annotation_file}: line {line}: no features for sample '{row.sample_id}'")
        if row.split not in SPLITS:
            raise DataError(f"{annotation_file}: line {line}: unknown split '{row.split}'")
        labels = {}
        for task in TASKS:
            raw = getattr(row, task)
            if not raw.isdigit():
                raise DataError(f"{annotation_file}: line {line}: {task} label '{raw}' is not a class index")
            labels[task] = int(raw)
            if limits[task] is not None and labels[task] >= limits[task]:
                raise DataError(f"{annotation_file}: line {line}: {task} label {labels[task]} "
                                f"out of range [0, {limits[task]})")
        arrays = features[row.sample_id]
        samples.append(ModalitySample(
            sample_id=row.sample_id,
            rgb=arrays["rgb"],
            flow=arrays["flow"],
            obj=arrays["obj"],
            participant_id=row.participant,
            split=row.split,
            **labels,
        ))

    unlabelled = set(features) - {s.sample_id for s in samples}
    if unlabelled:
        raise DataError(f"{annotation_file}: {len(unlabelled)} feature samples have no annotation, "
                        f"e.g. '{sorted(unlabelled)[0]}'")
    if len(samples) != len(features):
        raise DataError(f"{annotation_file}: duplicate annotation rows")

    space = build_action_space(samples, n_verbs, n_nouns, n_actions, tail_threshold)
    logger.info(f"Loaded {len(samples)} samples from {feature_file} "
                f"(V={space.n_verbs}, O={space.n_nouns}, actions={space.n_actions})")
    return samples, space


def select_split(samples: Sequence[ModalitySample], split: str) -> List[ModalitySample]:
    return [s for s in samples if s.split == split]


def batch_features(samples: Sequence[ModalitySample]) -> Dict[str, Tensor]:
    """Stack the streams of `samples` into `[B, N, d_m]` constant tensors."""
    return {m: tensor(np.stack([getattr(s, m) for s in samples]), name=m) for m in ("rgb", "flow", "obj")}


def batch_labels(samples: Sequence[ModalitySample]) -> Dict[str, np.ndarray]:
    return {task: np.array([s.label(task) for s in samples], dtype=np.int64) for task in TASKS}


# === Evaluation partitions ===

@dataclass
class EvalPartition:
    overall: np.ndarray
    unseen: np.ndarray
    tail: np.ndarray


def partition_eval(samples: Sequence[ModalitySample], space: ActionSpace) -> Dict[str, EvalPartition]:
    """Per task, index sets into `samples` for the overall, unseen and tail partitions."""
    overall = np.arange(len(samples))
    unseen = np.array([i for i, s in enumerate(samples) if s.participant_id in space.unseen_participants],
                      dtype=np.int64)
    partitions = {}
    for task in TASKS:
        mask = space.tail_masks[task]
        tail = np.array([i for i, s in enumerate(samples) if mask[s.label(task)]], dtype=np.int64)
        partitions[task] = EvalPartition(overall=overall, unseen=unseen, tail=tail)
    return partitions
