"""Accuracy, Cohen's kappa with agreement bands, test-time branch selection,
the optional pre-activation ensemble and the mask localization score."""

import csv
import warnings

import numpy as np

from .attention import upsample_nearest

# chance-corrected agreement bands (upper bounds, inclusive)
AGREEMENT_BANDS = (
    (0.20, "slight"),  # kappa < 0.20
    (0.40, "fair"),
    (0.60, "moderate"),
    (0.80, "substantial"),
    (1.00, "almost perfect"),
)


def confusion_matrix(truth, pred, classes):
    """C x C integer counts; rows are ground truth, columns predictions."""
    truth = np.asarray(truth, dtype=int)
    pred = np.asarray(pred, dtype=int)
    if truth.shape != pred.shape:
        raise ValueError(f"truth and prediction lengths differ: {truth.shape} vs {pred.shape}")
    if truth.size and (truth.min() < 0 or truth.max() >= classes or pred.min() < 0 or pred.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def accuracy(confusion):
    confusion = np.asarray(confusion)
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(confusion) / total)


def kappa_band(kappa):
    if kappa < AGREEMENT_BANDS[0][0]:
        return AGREEMENT_BANDS[0][1]
    for bound, name in AGREEMENT_BANDS[1:]:
        if kappa <= bound:
            return name
    return AGREEMENT_BANDS[-1][1]


def cohens_kappa(confusion):
    """(kappa, agreement band) for a confusion matrix.

    kappa = (p_o - p_e) / (1 - p_e) with p_o the observed agreement and p_e
    the chance agreement from the marginals. A degenerate p_e = 1 (all mass
    in one cell's marginals) is defined as kappa = 0.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    total = confusion.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    p_o = np.trace(confusion) / total
    p_e = float((confusion.sum(axis=1) * confusion.sum(axis=0)).sum() / (total * total))
    if p_e >= 1.0:
        warnings.warn("degenerate marginals (p_e = 1); kappa defined as 0", RuntimeWarning)
        kappa = 0.0
    else:
        kappa = float((p_o - p_e) / (1.0 - p_e))
    return kappa, kappa_band(kappa)


def select_best_branch(per_branch):
    """Pick the branch to use at test time from validation metrics.

    ``per_branch`` is an ordered mapping name -> {"acc": float, "loss": float},
    listed shallow to deep. Highest accuracy wins; ties break toward lower
    loss, then toward the shallower branch.
    """
    if not per_branch:
        raise ValueError("no branch metrics given")
    best = None
    for depth, (name, m) in enumerate(per_branch.items()):
        key = (-m["acc"], m["loss"], depth)
        if best is None or key < best[0]:
            best = (key, name)
    return best[1]


def ensemble_preactivation(branch_logits):
    """Average the per-branch logits, then softmax."""
    arrs = [np.asarray(a, dtype=np.float64) for a in branch_logits]
    if not arrs:
        raise ValueError("no logits given")
    shape = arrs[0].shape
    for a in arrs:
        if a.shape != shape:
            raise ValueError(f"logit shape mismatch: {a.shape} vs {shape}")
    mean = np.mean(arrs, axis=0)
    e = np.exp(mean - mean.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def localization_score(mask, roi, image_hw):
    """Fraction of total mask mass that falls inside the ROI.

    The mask is nearest-neighbor upsampled to the image resolution first.
    A zero-mass mask scores 0 (with a degenerate-mask warning).
    """
    up = upsample_nearest(mask, image_hw)
    h, w = image_hw
    if not (0 <= roi.top and roi.top + roi.height <= h and 0 <= roi.left and roi.left + roi.width <= w):
        raise ValueError(f"roi {roi} does not fit inside image {image_hw}")
    total = up.sum()
    if total <= 0.0:
        warnings.warn("mask has zero total mass; localization score set to 0", RuntimeWarning)
        return 0.0
    inside = up[roi.top : roi.top + roi.height, roi.left : roi.left + roi.width].sum()
    return float(inside / total)


def roi_area_fraction(roi, image_hw):
    """Score of a uniform mask: the baseline the attention must beat."""
    return roi.height * roi.width / float(image_hw[0] * image_hw[1])


# ---------------------------------------------------------------------------
# prediction dumps and the text report


def write_predictions_csv(path, sample_ids, truth, probs):
    probs = np.asarray(probs, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "truth", "predicted"] + [f"p{c}" for c in range(probs.shape[1])])
        pred = probs.argmax(axis=1)
        for i, sid in enumerate(sample_ids):
            writer.writerow([sid, int(truth[i]), int(pred[i])] + [f"{v:.17g}" for v in probs[i]])


def read_predictions_csv(path):
    ids, truth, pred, probs = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_classes = len(header) - 3
        for row in reader:
            ids.append(row[0])
            truth.append(int(row[1]))
            pred.append(int(row[2]))
            probs.append([float(v) for v in row[3 : 3 + n_classes]])
    return ids, np.array(truth), np.array(pred), np.array(probs)


def format_report(title, confusion, extras=None):
    """Evaluation report as structured text: matrix, accuracy, kappa, band."""
    kappa, band = cohens_kappa(confusion)
    lines = [title, "=" * len(title), "", "confusion matrix (rows = truth, cols = predicted):"]
    for row in np.asarray(confusion):
        lines.append("  " + " ".join(f"{int(v):5d}" for v in row))
    lines += [
        "",
        f"accuracy: {accuracy(confusion):.4f}",
        f"kappa:    {kappa:.4f} ({band})",
    ]
    for key, value in (extras or {}).items():
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"
