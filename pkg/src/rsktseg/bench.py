"""Cross-dataset evaluation harness: manifests, confusion metrics, reports and timing."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .foundation import ClassVocabulary, ImageSample
from .synthetic import to_sample


# -- manifests ---------------------------------------------------------------

@dataclass
class DatasetManifest:
    name: str
    root: str
    classes: List[str]
    ignore_value: int = 255
    split: str = "val"
    entries: List[dict] = field(default_factory=list)

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        missing = {"name", "root", "classes", "entries"} - set(data)
        if missing:
            raise ValueError(f"{path}: manifest missing fields {sorted(missing)}")
        if data.get("split", "val") not in ("train", "val"):
            raise ValueError(f"{path}: split must be 'train' or 'val'")
        root = Path(data["root"])
        if not root.is_absolute():
            root = path.parent / root
        m = cls(
            name=data["name"],
            root=str(root),
            classes=list(data["classes"]),
            ignore_value=int(data.get("ignore_value", 255)),
            split=data.get("split", "val"),
            entries=list(data["entries"]),
        )
        for e in m.entries if check_files else ():
            for key in ("image", "label"):
                if not (root / e[key]).exists():
                    raise FileNotFoundError(f"{path}: {key} file {root / e[key]} does not exist")
        return m

    def vocabulary(self, templates: Optional[Sequence[str]] = None) -> ClassVocabulary:
        if templates is None:
            return ClassVocabulary(self.classes)
        return ClassVocabulary(self.classes, list(templates))

    def samples(self) -> Iterable[ImageSample]:
        from PIL import Image

        root = Path(self.root)
        for e in self.entries:
            img = np.asarray(Image.open(root / e["image"]).convert("RGB"))
            lab = np.asarray(Image.open(root / e["label"]))
            if lab.ndim != 2:
                raise ValueError(f"label {e['label']} must be a single-channel index raster")
            s = to_sample(img, lab, self.ignore_value, name=e["image"])
            s.validate_labels(len(self.classes))
            yield s


# -- confusion matrix and metrics -------------------------------------------

class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, n: int, counts: Optional[np.ndarray] = None):
        if n < 1:
            raise ValueError("need at least one class")
        self.n = n
        self.counts = np.zeros((n, n), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (n, n):
            raise ValueError(f"counts shape {self.counts.shape} != ({n}, {n})")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n != self.n:
            raise ValueError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.n, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and self.n == other.n and np.array_equal(self.counts, other.counts)

    @property
    def tp(self):
        return np.diag(self.counts)

    @property
    def fp(self):
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self):
        return self.counts.sum(axis=1) - self.tp

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred, gt, n: int, ignore_value: int = 255, acc: Optional[ConfusionMatrix] = None) -> ConfusionMatrix:
    pred = np.asarray(pred.cpu() if isinstance(pred, torch.Tensor) else pred).astype(np.int64)
    gt = np.asarray(gt.cpu() if isinstance(gt, torch.Tensor) else gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    acc = acc if acc is not None else ConfusionMatrix(n)
    keep = gt != ignore_value
    p, g = pred[keep], gt[keep]
    if ((p < 0) | (p >= n)).any():
        raise ValueError(f"prediction value {int(p[(p < 0) | (p >= n)][0])} outside [0, {n})")
    if ((g < 0) | (g >= n)).any():
        raise ValueError(f"ground-truth value {int(g[(g < 0) | (g >= n)][0])} outside [0, {n})")
    acc.counts += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return acc


def per_class_iou(cm: ConfusionMatrix) -> List[Optional[float]]:
    denom = cm.tp + cm.fp + cm.fn
    return [float(t) / float(d) if d > 0 else None for t, d in zip(cm.tp, denom)]


def per_class_acc(cm: ConfusionMatrix) -> List[Optional[float]]:
    denom = cm.tp + cm.fn
    return [float(t) / float(d) if d > 0 else None for t, d in zip(cm.tp, denom)]


def _mean_defined(values) -> float:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else math.nan


def miou(cm: ConfusionMatrix):
    """Mean IoU over classes with a non-zero denominator, plus the per-class list (None = undefined)."""
    ious = per_class_iou(cm)
    return _mean_defined(ious), ious


def fwiou(cm: ConfusionMatrix) -> float:
    """Frequency-weighted IoU; NaN when no pixel was evaluated."""
    support = cm.tp + cm.fn
    total = support.sum()
    if total == 0:
        return math.nan
    return sum(float(s) / float(total) * iou for s, iou in zip(support, per_class_iou(cm)) if s > 0)


def macc(cm: ConfusionMatrix) -> float:
    return _mean_defined(per_class_acc(cm))


@dataclass
class MetricsReport:
    per_class_iou: List[Optional[float]]
    per_class_acc: List[Optional[float]]
    miou: float
    fwiou: float
    macc: float
    classes: List[str] = field(default_factory=list)
    pixels: int = 0

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, classes: Sequence[str] = ()) -> "MetricsReport":
        m, ious = miou(cm)
        return cls(ious, per_class_acc(cm), m, fwiou(cm), macc(cm), list(classes), cm.total)

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def aggregate_means(values: Sequence[float]) -> float:
    vals = list(values)
    if not vals:
        raise ValueError("cannot average an empty list")
    if any(v is None or (isinstance(v, float) and math.isnan(v)) for v in vals):
        raise ValueError("aggregate_means needs defined values")
    return sum(vals) / len(vals)


@dataclass
class BenchmarkReport:
    per_dataset: Dict[str, MetricsReport]
    m_miou: float
    m_macc: float
    m_fwiou: float = math.nan

    @classmethod
    def from_reports(cls, per_dataset: Dict[str, MetricsReport]) -> "BenchmarkReport":
        if not per_dataset:
            raise ValueError("no datasets evaluated")
        r = list(per_dataset.values())
        return cls(
            dict(per_dataset),
            aggregate_means([x.miou for x in r]),
            aggregate_means([x.macc for x in r]),
            aggregate_means([x.fwiou for x in r]),
        )

    def to_dict(self) -> dict:
        return {
            "per_dataset": {k: v.to_dict() for k, v in self.per_dataset.items()},
            "m_miou": self.m_miou,
            "m_macc": self.m_macc,
            "m_fwiou": self.m_fwiou,
        }

    def markdown(self) -> str:
        """Markdown table: per dataset mIoU/mACC, then the means (x100)."""
        names = list(self.per_dataset)
        head = "| Method | " + " | ".join(f"{n} mIoU | {n} mACC" for n in names) + " | m-mIoU | m-mACC |"
        sep = "|" + "---|" * (2 * len(names) + 3)
        cells = [f"{100 * self.per_dataset[n].miou:.2f} | {100 * self.per_dataset[n].macc:.2f}" for n in names]
        row = "| RSKT-Seg | " + " | ".join(cells) + f" | {100 * self.m_miou:.2f} | {100 * self.m_macc:.2f} |"
        return "\n".join([head, sep, row])


def vocab_overlap(train_classes: Iterable[str], test_classes: Iterable[str]) -> int:
    norm = lambda names: {c.strip().lower() for c in names}
    return len(norm(train_classes) & norm(test_classes))


# -- evaluation --------------------------------------------------------------

Predictor = Callable[[ImageSample, ClassVocabulary], torch.Tensor]


def model_predictor(model) -> Predictor:
    """Wrap a segmentation model so it returns ``N_t x H x W`` logits without autograd."""
    cache = {}

    def predict(sample: ImageSample, vocab: ClassVocabulary) -> torch.Tensor:
        key = tuple(vocab.names), tuple(vocab.templates)
        if key not in cache:
            cache[key] = model.encode_text(vocab)
        with torch.no_grad():
            return model(sample.image, vocab, cache[key])

    return predict


def ground_truth_predictor(sample: ImageSample, vocab: ClassVocabulary) -> torch.Tensor:
    """Test stub: one-hot logits copied from the label (ignored pixels map to class 0)."""
    lab = sample.label.clone()
    lab[lab == sample.ignore_value] = 0
    return torch.nn.functional.one_hot(lab.long(), len(vocab)).permute(2, 0, 1).float()


def evaluate(predict: Predictor, samples: Iterable[ImageSample], vocab: ClassVocabulary) -> MetricsReport:
    """Argmax every prediction and accumulate one confusion matrix over the dataset.

    ``vocab`` must come from the evaluated dataset's own class names.
    """
    cm = ConfusionMatrix(len(vocab))
    seen = 0
    for s in samples:
        if s.label is None:
            raise ValueError(f"sample {s.name!r} has no label")
        logits = predict(s, vocab)
        label = s.label
        if tuple(logits.shape[-2:]) != tuple(label.shape):
            # model center-cropped a non-square input
            H, W = label.shape
            h, w = logits.shape[-2:]
            top, left = (H - h) // 2, (W - w) // 2
            label = label[top:top + h, left:left + w]
        accumulate_confusion(logits.argmax(dim=0), label, len(vocab), s.ignore_value, cm)
        seen += 1
    if seen == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return MetricsReport.from_confusion(cm, vocab.names)


def evaluate_manifest(predict: Predictor, manifest: DatasetManifest, templates=None) -> MetricsReport:
    return evaluate(predict, manifest.samples(), manifest.vocabulary(templates))


# -- speed -------------------------------------------------------------------

@dataclass
class SpeedReport:
    per_dataset_ms: Dict[str, float]
    mean_ms: float
    fps: float
    timed_runs: Dict[str, int] = field(default_factory=dict)
    warmup: int = 0

    @classmethod
    def from_means(cls, per_dataset_ms: Dict[str, float], timed_runs=None, warmup: int = 0) -> "SpeedReport":
        mean_ms = aggregate_means(list(per_dataset_ms.values()))
        return cls(dict(per_dataset_ms), mean_ms, 1000.0 / mean_ms, dict(timed_runs or {}), warmup)

    def to_dict(self) -> dict:
        return asdict(self)

    def markdown(self, method: str = "RSKT-Seg") -> str:
        names = list(self.per_dataset_ms)
        head = "| Method | " + " | ".join(names) + " | Mean (ms) | FPS |"
        sep = "|" + "---|" * (len(names) + 3)
        row = f"| {method} | " + " | ".join(f"{self.per_dataset_ms[n]:.2f}" for n in names)
        row += f" | {self.mean_ms:.2f} | {self.fps:.2f} |"
        return "\n".join([head, sep, row])


def speed_benchmark(
    predict: Predictor,
    datasets: Dict[str, tuple],
    warmup: int = 2,
    iters: int = 5,
    clock: Callable[[], float] = time.perf_counter,
) -> SpeedReport:
    """Mean wall-clock milliseconds per forward for each dataset.

    ``datasets`` maps a name to ``(samples, vocab)``.  Forwards cycle over the
    samples; the first ``warmup`` are run but not timed.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    per, counts = {}, {}
    for name, (samples, vocab) in datasets.items():
        samples = list(samples)
        if not samples:
            raise ValueError(f"dataset {name!r} is empty")
        for i in range(warmup):
            predict(samples[i % len(samples)], vocab)
        times = []
        for i in range(iters):
            s = samples[(warmup + i) % len(samples)]
            t0 = clock()
            predict(s, vocab)
            times.append((clock() - t0) * 1000.0)
        per[name] = sum(times) / len(times)
        counts[name] = len(times)
    return SpeedReport.from_means(per, counts, warmup)
