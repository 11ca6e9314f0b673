"""
Attack metrics, evaluation reports, transfer matrices and embedding export.

Score orientation: a higher score means "more fake" (label 1). ASR only
counts images the detector classified correctly before the attack.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.stats import rankdata

from siaa.backbones import encode_image
from siaa.data import ImageSet, require_both_classes
from siaa.detectors import Detector, predict
from siaa.errors import UndefinedMetricError
from siaa.fphead import FPHead, fp_forward_vision

REPORT_VERSION = 1


@dataclass(frozen=True)
class OutcomeRecord:
    image_id: str
    label: int
    pre_label: int
    pre_score: float
    post_label: int
    post_score: float
    attack: str = ""
    source_backbone: str = ""
    target_backbone: str = ""


@dataclass(frozen=True)
class EvaluationReport:
    pre_auc: float
    post_auc: float
    asr: float
    mean_ssim: float
    mean_wpsnr: float
    total: int
    pre_correct: int
    flipped: int
    records: tuple = field(default=(), repr=False)

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d


def attack_success_rate(records) -> float:
    """Fraction of pre-attack-correct records whose post-attack label is wrong."""
    pre_correct = [r for r in records if r.pre_label == r.label]
    if not pre_correct:
        raise UndefinedMetricError("ASR is undefined: no image was classified correctly before the attack")
    flipped = sum(r.post_label != r.label for r in pre_correct)
    return flipped / len(pre_correct)


def auc(scores, labels) -> float:
    """Rank-based ROC AUC (Mann-Whitney U), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != len(labels):
        raise UndefinedMetricError("AUC needs both labels 0 and 1 and nothing else")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def ssim(a, b, window: int = 8, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all ``window x window`` uniform windows fully inside the image.

    Statistics use population (biased) variances; colour images are scored
    per channel and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def local_mean(x):
        return sliding_window_view(x, (window, window), axis=(0, 1)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def psnr(a, b, peak: float = 1.0) -> float:
    return wpsnr(a, b, peak=peak, weighted=False)


def nvf_weights(reference, strength: float = 75.0, window: int = 3) -> np.ndarray:
    """Noise-visibility weights ``1 / (1 + theta * local_var)`` of the reference image.

    ``local_var`` is the per-channel variance over a ``window x window``
    neighbourhood and ``theta = strength / max(local_var)``. Errors in flat
    regions get weight close to one, errors in textured regions are discounted.
    A perfectly flat reference gets uniform weight one.
    """
    x = np.asarray(reference, dtype=np.float64)
    size = (window, window) + (1,) * (x.ndim - 2)
    mean = ndimage.uniform_filter(x, size=size, mode="reflect")
    var = np.maximum(ndimage.uniform_filter(x * x, size=size, mode="reflect") - mean**2, 0.0)
    vmax = var.max()
    if vmax <= 0:
        return np.ones_like(x)
    return 1.0 / (1.0 + (strength / vmax) * var)


def wpsnr(reference, test, peak: float = 1.0, weighted: bool = True, strength: float = 75.0) -> float:
    """Weighted PSNR in dB: ``10 log10(peak^2 / mean((w * (ref - test))^2))``.

    ``w`` comes from :func:`nvf_weights` of the reference; with
    ``weighted=False`` it is one everywhere and this is plain PSNR.
    """
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {tst.shape}")
    w = nvf_weights(ref, strength) if weighted else 1.0
    err = np.mean((w * (ref - tst)) ** 2)
    if err == 0:
        raise UndefinedMetricError("WPSNR is infinite for identical images")
    return float(10 * np.log10(peak**2 / err))


def _safe_auc(scores, labels):
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return math.nan


def evaluate_attack(detector: Detector, clean: ImageSet, adversarial, attack: str = "",
                    source_backbone: str = "", target_backbone: str | None = None) -> EvaluationReport:
    """Score clean and adversarial images with ``detector`` and summarize.

    ``adversarial`` is an :class:`ImageSet` (matched to ``clean`` by id) or an
    array aligned with ``clean``. Identical clean/adversarial pairs contribute
    an infinite WPSNR.
    """
    adv_images = _align(clean, adversarial)
    target_backbone = detector.backbone.spec.name if target_backbone is None else target_backbone
    pre = predict(detector, clean.images)
    post = predict(detector, adv_images)
    records = tuple(
        OutcomeRecord(str(i), int(y), int(pl), float(ps), int(ql), float(qs), attack, source_backbone,
                      target_backbone)
        for i, y, pl, ps, ql, qs in zip(clean.ids, clean.labels, pre.label, pre.probability,
                                         post.label, post.probability)
    )
    asr = attack_success_rate(records)
    ssims, wpsnrs = [], []
    for a, b in zip(clean.images, adv_images):
        ssims.append(ssim(a, b))
        try:
            wpsnrs.append(wpsnr(a, b))
        except UndefinedMetricError:
            wpsnrs.append(math.inf)
    pre_correct = sum(r.pre_label == r.label for r in records)
    flipped = sum(r.pre_label == r.label and r.post_label != r.label for r in records)
    return EvaluationReport(
        pre_auc=_safe_auc(pre.probability, clean.labels),
        post_auc=_safe_auc(post.probability, clean.labels),
        asr=asr,
        mean_ssim=float(np.mean(ssims)),
        mean_wpsnr=float(np.mean(wpsnrs)),
        total=len(records),
        pre_correct=pre_correct,
        flipped=flipped,
        records=records,
    )


def _align(clean: ImageSet, adversarial) -> np.ndarray:
    if isinstance(adversarial, ImageSet):
        index = {id_: k for k, id_ in enumerate(adversarial.ids)}
        missing = [i for i in clean.ids if i not in index]
        if missing or len(adversarial) != len(clean):
            raise ValueError(f"adversarial set does not match clean set ({len(missing)} ids missing, "
                             f"{len(adversarial)} vs {len(clean)} images)")
        return adversarial.images[[index[i] for i in clean.ids]]
    adv = np.asarray(adversarial, dtype=np.float64)
    if adv.shape != clean.images.shape:
        raise ValueError(f"adversarial set has shape {adv.shape}, clean set {clean.images.shape}")
    return adv


def transfer_matrix(adversarial: dict, detectors: dict, clean: ImageSet, attack: str = "siaa") -> dict:
    """Evaluate every source's adversarial images against every target's detector.

    Returns ``{(source, target): EvaluationReport}`` over the full product of
    ``adversarial`` keys and ``detectors`` keys.
    """
    if not adversarial or not detectors:
        raise ValueError("need at least one source and one target")
    out = {}
    for source, adv in adversarial.items():
        if adv is None:
            raise ValueError(f"missing adversarial images for source {source!r}")
        for target, det in detectors.items():
            if det is None:
                raise ValueError(f"missing detector for target {target!r}")
            out[source, target] = evaluate_attack(det, clean, adv, attack, source, target)
    return out


def transfer_table(matrix: dict) -> list[dict]:
    return [{"source": s, "target": t, "asr": r.asr, "post_auc": r.post_auc, "pre_auc": r.pre_auc}
            for (s, t), r in sorted(matrix.items())]


@torch.no_grad()
def export_embeddings(backbone, layer, dataset: ImageSet) -> list[tuple]:
    """Rows ``(id, label, stage, vector)`` for the raw backbone output and the first trainable layer.

    ``layer`` is an :class:`FPHead` (its vision branch), a :class:`Detector`
    (its first linear layer) or any callable on the backbone features.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if isinstance(layer, FPHead):
        fn = lambda v: fp_forward_vision(layer, v)  # noqa: E731
    elif isinstance(layer, Detector):
        fn = layer.first_layer
    else:
        fn = layer
    raw = torch.cat([encode_image(backbone, dataset.images[i:i + 256]) for i in range(0, len(dataset), 256)])
    projected = fn(raw)
    rows = []
    for stage, feats in (("backbone", raw), ("layer1", projected)):
        for id_, y, vec in zip(dataset.ids, dataset.labels, feats.double().numpy()):
            rows.append((id_, int(y), stage, vec))
    return rows


def fisher_ratio(vectors, labels) -> float:
    """Squared distance between class centroids over the mean squared distance to the own centroid."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    require_both_classes(labels)
    c0, c1 = x[labels == 0].mean(0), x[labels == 1].mean(0)
    spread = np.concatenate([((x[labels == 0] - c0) ** 2).sum(1), ((x[labels == 1] - c1) ** 2).sum(1)]).mean()
    return float(((c1 - c0) ** 2).sum() / spread)


# ---------------------------------------------------------------- file output


def _finite_or_none(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_report(path, report: EvaluationReport, **provenance):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {
        "version": REPORT_VERSION,
        "metrics": {k: _finite_or_none(v) for k, v in report.metrics().items()},
        "provenance": provenance,
    }
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def write_records(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(OutcomeRecord.__dataclass_fields__)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple_record(r)])
    return path


def astuple_record(r: OutcomeRecord):
    return tuple(getattr(r, n) for n in OutcomeRecord.__dataclass_fields__)


def read_records(path) -> list[OutcomeRecord]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [OutcomeRecord(r["image_id"], int(r["label"]), int(r["pre_label"]), float(r["pre_score"]),
                          int(r["post_label"]), float(r["post_score"]), r["attack"], r["source_backbone"],
                          r["target_backbone"]) for r in rows]


def write_table(path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError("empty table")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def write_embeddings(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(["id", "label", "stage", "vector"])
        for id_, y, stage, vec in rows:
            w.writerow([id_, y, stage, " ".join(repr(float(v)) for v in vec)])
    return path


def read_embeddings(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    return [(r["id"], int(r["label"]), r["stage"], np.array([float(v) for v in r["vector"].split()]))
            for r in rows]
