"""Verification protocol, PSNR and the six-setting experiment matrix.

Features are the recognition output of an image concatenated with that of its
mirror image. Pair scores are cosine similarities after PCA; accuracy uses the
k-fold protocol where each held-out fold is scored with the PCA basis and the
threshold fitted on the remaining folds.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, hflip, to_pixels
from .networks import JointNetwork
from .optimizer import TrainConfig, train

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
REPORT_HEADER = ["setting", "accuracy", "tp", "fpr_target", "psnr_db", "n_pairs", "seed", "config_hash"]


class LowSupportWarning(UserWarning):
    """Too few negative pairs to resolve the requested false-positive rate."""


class SettingsError(KeyError):
    def __str__(self):
        return str(self.args[0])


# -- image quality -----------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def mean_psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Average per-image PSNR of normalized batches, measured in clipped pixel units."""
    return float(np.mean([psnr(to_pixels(p), to_pixels(g)) for p, g in zip(pred, gt)]))


# -- features and PCA --------------------------------------------------------

def extract_features(frnet_net: JointNetwork, images: np.ndarray, srnet_net: JointNetwork | None = None,
                     batch: int = 64) -> np.ndarray:
    """``[N, 2d]`` features: recognition output of each image, then of its mirror.

    With ``srnet_net`` both orientations are hallucinated first by that
    network's SRNET.
    """
    def embed(x):
        out = []
        for i in range(0, len(x), batch):
            xb = x[i:i + batch]
            if srnet_net is not None:
                xb = srnet_net.srnet.forward(xb)
            out.append(frnet_net.frnet.forward(xb))
        return np.concatenate(out)

    if images.ndim != 4 or images.shape[1:] != frnet_net.cfg.image_shape:
        raise ValueError(f"images must be [N, {', '.join(map(str, frnet_net.cfg.image_shape))}]")
    return np.concatenate([embed(images), embed(hflip(images))], axis=1)


@dataclass
class PCA:
    mean: np.ndarray        # [D]
    basis: np.ndarray       # [k, D], rows ordered by decreasing variance
    variances: np.ndarray   # [D], all eigenvalues, decreasing

    def project(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.basis.T


def pca_fit(features: np.ndarray, out_dim: int) -> PCA:
    n, d = features.shape
    if not 1 <= out_dim <= min(n, d):
        raise ValueError(f"out_dim {out_dim} must lie in [1, {min(n, d)}]")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    basis = vecs[:, :out_dim].T.copy()
    lead = np.argmax(np.abs(basis), axis=1)
    basis *= np.sign(basis[np.arange(out_dim), lead])[:, None]
    return PCA(mean, basis, np.clip(vals, 0.0, None))


def pca_project(proj: PCA, feature: np.ndarray) -> np.ndarray:
    return proj.project(feature)


def numeric_rank(variances: np.ndarray, rtol: float = 1e-10) -> int:
    if variances[0] <= 0:
        return 1
    return max(1, int(np.sum(variances > rtol * variances[0])))


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def cosine_scores(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine score of a zero vector")
    return np.einsum("ij,ij->i", fa, fb) / (na * nb)


# -- thresholds ----------------------------------------------------------------

def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """One threshold per gap between sorted unique scores, plus accept-all.

    Each gap is represented by its lower edge (rule ``score > t``), which
    classifies the fitting scores exactly like the gap midpoint but keeps the
    held-out decision a function of score ranks only.
    """
    return np.concatenate([[-np.inf], np.unique(scores)])


def best_threshold(scores: np.ndarray, same: np.ndarray) -> float:
    """Lowest candidate threshold maximizing accuracy of the rule ``score > t``."""
    same = np.asarray(same, bool)
    ts = candidate_thresholds(scores)
    acc = ((scores[None, :] > ts[:, None]) == same[None, :]).mean(axis=1)
    return float(ts[np.argmax(acc)])


def fold_slices(n: int, folds: int) -> list[np.ndarray]:
    if folds < 2:
        raise ValueError("need at least 2 folds")
    return np.array_split(np.arange(n), folds)


def _check_fold(same: np.ndarray, idx: np.ndarray, f: int) -> None:
    if len(idx) < 2 or same[idx].all() or not same[idx].any():
        raise ValueError(f"fold {f} is degenerate: it needs >= 2 pairs with both classes")


def verification_accuracy(scores, same, folds: int = 10) -> float:
    """Mean held-out accuracy; each fold's threshold is fitted on the other folds."""
    scores, same = np.asarray(scores, float), np.asarray(same, bool)
    accs = []
    for f, test in enumerate(fold_slices(len(scores), folds)):
        _check_fold(same, test, f)
        train = np.setdiff1d(np.arange(len(scores)), test)
        t = best_threshold(scores[train], same[train])
        accs.append(np.mean((scores[test] > t) == same[test]))
    return float(np.mean(accs))


def tp_at_fpr(scores, same, fpr_target: float = 0.001) -> float:
    """Largest true-positive rate of the rule ``score >= t`` whose FPR is at most ``fpr_target``."""
    scores, same = np.asarray(scores, float), np.asarray(same, bool)
    n_pos, n_neg = int(same.sum()), int((~same).sum())
    if n_neg == 0:
        raise ValueError("tp_at_fpr needs negative pairs")
    if n_neg < 1.0 / fpr_target:
        warnings.warn(f"{n_neg} negatives cannot resolve FPR {fpr_target}", LowSupportWarning, stacklevel=2)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], same[order]
    tp, fp = np.cumsum(y), np.cumsum(~y)
    # a threshold can only sit at the end of a run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tpr = np.r_[0.0, tp[ends] / max(n_pos, 1)]
    fpr = np.r_[0.0, fp[ends] / n_neg]
    return float(tpr[fpr <= fpr_target + 1e-15].max())


@dataclass
class PairEvaluation:
    accuracy: float
    tp: float
    scores: np.ndarray      # out-of-fold cosine scores
    n_negatives: int


def evaluate_pairs(features: np.ndarray, pairs: np.ndarray, folds: int = 10, pca_dim: int = 128,
                   fpr_target: float = 0.001) -> PairEvaluation:
    """Per-fold PCA and threshold on the training folds, scored on the held-out fold."""
    pairs = np.asarray(pairs)
    if len(pairs) == 0:
        raise ValueError("no verification pairs")
    same = pairs[:, 2].astype(bool)
    scores = np.empty(len(pairs))
    accs = []
    for f, test in enumerate(fold_slices(len(pairs), folds)):
        _check_fold(same, test, f)
        train = np.setdiff1d(np.arange(len(pairs)), test)
        imgs = np.unique(pairs[train, :2])
        fit = features[imgs]
        full = pca_fit(fit, min(fit.shape))
        proj = pca_fit(fit, min(pca_dim, numeric_rank(full.variances)))
        s = cosine_scores(proj.project(features[pairs[:, 0]]), proj.project(features[pairs[:, 1]]))
        t = best_threshold(s[train], same[train])
        accs.append(np.mean((s[test] > t) == same[test]))
        scores[test] = s[test]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowSupportWarning)
        tp = tp_at_fpr(scores, same, fpr_target)
    return PairEvaluation(float(np.mean(accs)), tp, scores, int((~same).sum()))


# -- settings matrix -------------------------------------------------------------

SETTINGS = {
    1: ("HR", "HR"),
    2: ("HR", "LR"),
    3: ("HR", "Hallucinated"),
    4: ("LR", "LR"),
    5: ("Hallucinated", "Hallucinated"),
    6: ("Joint", "Joint"),
}

# (recognition artifact, SRNET artifact or None, test input)
_ROUTES = {
    1: ("frnet-hr", None, "hr"),
    2: ("frnet-hr", None, "lr"),
    3: ("frnet-hr", "srnet-only", "lr"),
    4: ("frnet-lr", None, "lr"),
    5: ("frnet-hallucinated", "frnet-hallucinated", "lr"),
    6: ("joint", "joint", "lr"),
}


def required_modes(settings) -> list[str]:
    modes = set()
    for s in settings:
        fr, sr, _ = _ROUTES[s]
        modes.add(fr)
        if sr:
            modes.add(sr)
    if "frnet-hallucinated" in modes:
        modes.add("srnet-only")
    return [m for m in ("frnet-hr", "frnet-lr", "srnet-only", "frnet-hallucinated", "joint") if m in modes]


@dataclass
class EvalReport:
    setting: int
    accuracy: float
    tp: float
    fpr_target: float
    psnr_db: float
    n_pairs: int
    n_negatives: int
    seed: int
    config_hash: str

    def row(self) -> list:
        return [self.setting, repr(self.accuracy), repr(self.tp), repr(self.fpr_target),
                repr(self.psnr_db), self.n_pairs, self.seed, self.config_hash]


def evaluate_setting(setting: int, artifacts: dict[str, JointNetwork], test: Dataset, pairs: np.ndarray,
                     folds: int = 10, pca_dim: int = 128, fpr_target: float = 0.001,
                     seed: int = 0, config_hash: str = "") -> EvalReport:
    if setting not in _ROUTES:
        raise ValueError(f"unknown setting {setting}")
    fr_mode, sr_mode, source = _ROUTES[setting]
    for mode in (fr_mode, sr_mode):
        if mode and mode not in artifacts:
            raise SettingsError(f"setting {setting} needs the '{mode}' artifact")
    images = test.hr if source == "hr" else test.lr
    sr_net = artifacts[sr_mode] if sr_mode else None
    feats = extract_features(artifacts[fr_mode], images, sr_net)
    res = evaluate_pairs(feats, pairs, folds, pca_dim, fpr_target)
    if sr_net is not None:
        quality = mean_psnr(sr_net.hallucinate(test.lr), test.hr)
    elif source == "lr":
        quality = mean_psnr(test.lr, test.hr)
    else:
        quality = float("nan")
    return EvalReport(setting, res.accuracy, res.tp, fpr_target, quality, len(pairs),
                      res.n_negatives, seed, config_hash)


def run_settings_matrix(artifacts: dict[str, JointNetwork], test: Dataset, pairs: np.ndarray,
                        settings=tuple(SETTINGS), **kwargs) -> list[EvalReport]:
    return [evaluate_setting(s, artifacts, test, pairs, **kwargs) for s in sorted(settings)]


def train_artifacts(build, train_cfg: TrainConfig, train_ds: Dataset, modes, progress=None,
                    per_mode: dict[str, dict] | None = None) -> dict[str, JointNetwork]:
    """Train each regime the requested settings need.

    ``build()`` returns a freshly initialized network. ``per_mode`` holds
    TrainConfig overrides for individual regimes. The hallucinated-input regime
    reuses the SRNET trained in ``srnet-only`` mode, frozen.
    """
    per_mode = per_mode or {}
    out: dict[str, JointNetwork] = {}
    for mode in modes:
        net = build()
        if mode == "frnet-hallucinated":
            if "srnet-only" not in out:
                raise SettingsError("the 'frnet-hallucinated' regime needs a trained 'srnet-only' artifact")
            for name, arr in net.srnet.named_parameters():
                arr[...] = dict(out["srnet-only"].srnet.named_parameters())[name]
        log.info("training %s", mode)
        cfg = replace(train_cfg, **{**per_mode.get(mode, {}), "mode": mode})
        out[mode], _ = train(net, train_ds, cfg, progress=progress)
    return out


def report_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()
