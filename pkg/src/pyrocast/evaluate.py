"""Comparative evaluation of the diffusion ensemble against the baseline.

Both models forecast the next frame of every pair of an ensemble dataset;
predictions are scored against the CA ensemble mean. Reports come as a
key:value text file and a TSV companion with one
``metric<TAB>model<TAB>pair_id<TAB>value`` line per number.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.stats import binomtest

from .checkpoint import MODEL_DETERMINISTIC, MODEL_DIFFUSION, Checkpoint, load_checkpoint
from .dataset import PairDataset
from .diffusion import DiffusionConfig, ensemble_predict
from .errors import CheckpointMismatch, InsufficientSamples, NoValidPixels
from .metrics import (
    DEFAULT_THRESHOLDS,
    KL_DELTA,
    ThresholdScores,
    frechet_feature_distance,
    hit_rate,
    kl_divergence,
    mismatch_rgb,
    mse,
    psnr,
    ssim,
    threshold_sweep,
)
from .rng import derive_seed
from .unet import baseline_predict

PAIR_METRICS = ("mse", "psnr", "ssim", "hit_rate", "kl")
SWEEP_METRICS = ("precision", "recall", "f1", "f2", "mcc")
KL_NOTE = f"sum over pixels of Bernoulli KL(target || prediction), both clamped to [{KL_DELTA:g}, 1-{KL_DELTA:g}]"


@dataclass
class ModelReport:
    name: str
    per_pair: list[dict[str, float | None]] = field(default_factory=list)
    sweeps: list[list[ThresholdScores]] = field(default_factory=list)
    frechet: float = math.nan

    def values(self, metric: str) -> np.ndarray:
        return np.array([p[metric] for p in self.per_pair if p.get(metric) is not None], dtype=np.float64)

    def mean(self, metric: str) -> float | None:
        """Uniform mean over pairs; ``inf`` PSNR and undefined values are skipped."""
        v = self.values(metric)
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else None

    def excluded(self, metric: str) -> int:
        return len(self.per_pair) - int(np.isfinite(self.values(metric)).sum())

    def sweep_mean(self, threshold_idx: int, metric: str) -> float:
        return float(np.mean([getattr(s[threshold_idx], metric) for s in self.sweeps]))


@dataclass
class SignTest:
    wins: int
    losses: int
    ties: int
    p_value: float


@dataclass
class ComparisonReport:
    models: dict[str, ModelReport]
    pair_ids: list[int]
    thresholds: tuple[float, ...]
    header: dict = field(default_factory=dict)
    predictions: dict[str, np.ndarray] = field(default_factory=dict)

    def sign_test(self, better: str, worse: str, metric: str = "mse") -> SignTest:
        return paired_sign_test(self.models[better].values(metric), self.models[worse].values(metric))


def paired_sign_test(a: Sequence[float], b: Sequence[float]) -> SignTest:
    """Two-sided sign test of ``a < b`` pairs versus ``a > b`` pairs (ties dropped)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    wins, losses = int(np.sum(a < b)), int(np.sum(a > b))
    ties = len(a) - wins - losses
    p = binomtest(wins, wins + losses, 0.5).pvalue if wins + losses else 1.0
    return SignTest(wins, losses, ties, float(p))


def pair_metrics(pred: np.ndarray, target: np.ndarray, epsilon: float = 0.2, with_kl: bool = True) -> dict:
    try:
        hr = hit_rate(pred, target, epsilon)
    except NoValidPixels:
        hr = None
    return {
        "mse": mse(pred, target),
        "psnr": psnr(pred, target),
        "ssim": ssim(pred, target),
        "hit_rate": hr,
        "kl": kl_divergence(pred, target) if with_kl else None,
    }


def score_predictions(name: str, preds: np.ndarray, targets: np.ndarray, epsilon: float = 0.2,
                      thresholds: Sequence[float] = DEFAULT_THRESHOLDS, with_kl: bool = True) -> ModelReport:
    report = ModelReport(name)
    for p, q in zip(preds, targets):
        report.per_pair.append(pair_metrics(p, q, epsilon, with_kl))
        report.sweeps.append(threshold_sweep(p, q, thresholds))
    report.frechet = frechet_feature_distance(list(preds), list(targets))
    return report


# ------------------------------------------------------------- predictors

Predictor = Callable[[np.ndarray, int], tuple[np.ndarray, np.ndarray]]


def _as_checkpoint(ckpt) -> Checkpoint:
    return ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)


def _check_dims(ckpt: Checkpoint, dataset: PairDataset, role: str) -> None:
    size = ckpt.net_config.image_size
    if dataset.shape != (size, size):
        raise CheckpointMismatch(f"{role} network expects {size}x{size} frames, dataset has {dataset.shape}")
    want = 2 if ckpt.model == MODEL_DIFFUSION else 1
    if ckpt.net_config.in_channels != want:
        raise CheckpointMismatch(f"{role} {ckpt.model} network has {ckpt.net_config.in_channels} input channels")


def stochastic_predictor(ckpt: Checkpoint, M: int, config: DiffusionConfig, seed: int,
                         batch_size: int | None = None) -> Predictor:
    schedule = ckpt.schedule if config == ckpt.diffusion else None

    def predict(frame, pair_id):
        out = ensemble_predict(ckpt.net, torch.from_numpy(frame), M, config, schedule,
                               seed=derive_seed(seed, pair_id), batch_size=batch_size)
        return out.mean.double().numpy(), out.members.double().numpy()

    return predict


def deterministic_predictor(ckpt: Checkpoint) -> Predictor:
    def predict(frame, pair_id):
        y = baseline_predict(ckpt.net, torch.from_numpy(frame)[None])[0, 0].double().numpy()
        return y, y[None]

    return predict


def evaluate_models(diffusion_ckpt, baseline_ckpt, dataset: PairDataset, M: int = 20,
                    config: DiffusionConfig | None = None, seed: int = 0, epsilon: float = 0.2,
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS, single_member: bool = False,
                    batch_size: int | None = None, progress: Callable[[int, int], None] | None = None
                    ) -> ComparisonReport:
    """Score ensemble and baseline forecasts on every pair of ``dataset``.

    A deterministic checkpoint passed as ``diffusion_ckpt`` is run through
    its plain forward pass (useful as a stub for self-comparison). With
    ``single_member`` the first ensemble member is scored as an extra
    ``diffusion_m1`` model so M=1 and M-member forecasts can be paired.
    """
    if len(dataset) == 0:
        raise InsufficientSamples("ensemble dataset is empty")
    diff, base = _as_checkpoint(diffusion_ckpt), _as_checkpoint(baseline_ckpt)
    _check_dims(diff, dataset, "diffusion")
    _check_dims(base, dataset, "baseline")
    if base.model != MODEL_DETERMINISTIC:
        raise CheckpointMismatch(f"baseline checkpoint holds a {base.model} model")
    config = config or diff.diffusion
    if diff.model == MODEL_DIFFUSION:
        stochastic = stochastic_predictor(diff, M, config, seed, batch_size)
    else:
        stochastic = deterministic_predictor(diff)
    deterministic = deterministic_predictor(base)

    preds = {"diffusion": [], "baseline": []}
    if single_member:
        preds["diffusion_m1"] = []
    for i, x in enumerate(dataset.inputs):
        mean, members = stochastic(x, i)
        preds["diffusion"].append(mean)
        if single_member:
            preds["diffusion_m1"].append(members[0])
        preds["baseline"].append(deterministic(x, i)[0])
        if progress is not None:
            progress(i + 1, len(dataset))
    targets = dataset.targets.astype(np.float64)
    models = {}
    for name, p in preds.items():
        models[name] = score_predictions(name, np.stack(p), targets, epsilon, thresholds,
                                         with_kl=name != "baseline")
    header = {
        "M": M, "seed": seed, "epsilon": epsilon, "n_pairs": len(dataset),
        "diffusion_model": diff.model, "diffusion_step": diff.step, "baseline_step": base.step,
        "diffusion_config": json.dumps(config.to_dict(), sort_keys=True),
        "kl_definition": KL_NOTE,
        "frechet_embedding": "handcrafted proxy (4x4 block means, burnt fraction, perimeter, 8-bin histogram)",
    }
    return ComparisonReport(models, list(range(len(dataset))), tuple(thresholds), header,
                            {k: np.stack(v) for k, v in preds.items()})


# ------------------------------------------------------------- report files

def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def format_report(report: ComparisonReport) -> str:
    lines = ["[header]"]
    lines += [f"{k}: {v}" for k, v in report.header.items()]
    lines.append("")
    lines.append("[aggregate]")
    for name, m in report.models.items():
        for metric in PAIR_METRICS:
            mean = m.mean(metric)
            if mean is None and metric == "kl" and name == "baseline":
                continue
            lines.append(f"{name}.{metric}: {_fmt(mean)}")
            if m.excluded(metric):
                lines.append(f"{name}.{metric}.excluded: {m.excluded(metric)}")
        lines.append(f"{name}.frechet: {_fmt(m.frechet)}")
        for j, th in enumerate(report.thresholds):
            for metric in SWEEP_METRICS:
                lines.append(f"{name}.th{th:g}.{metric}: {_fmt(m.sweep_mean(j, metric))}")
    if "diffusion_m1" in report.models:
        st = report.sign_test("diffusion", "diffusion_m1")
        lines.append(f"sign_test.mse.diffusion_vs_m1: wins={st.wins} losses={st.losses} ties={st.ties} "
                     f"p={st.p_value:.6g}")
    st = report.sign_test("diffusion", "baseline")
    lines.append(f"sign_test.mse.diffusion_vs_baseline: wins={st.wins} losses={st.losses} ties={st.ties} "
                 f"p={st.p_value:.6g}")
    for i in report.pair_ids:
        lines.append("")
        lines.append(f"[pair {i}]")
        for name, m in report.models.items():
            for metric in PAIR_METRICS:
                v = m.per_pair[i][metric]
                if v is None and metric == "kl":
                    continue
                lines.append(f"{name}.{metric}: {_fmt(v)}")
    return "\n".join(lines) + "\n"


def format_tsv(report: ComparisonReport) -> str:
    lines = ["metric\tmodel\tpair_id\tvalue"]
    for name, m in report.models.items():
        for i in report.pair_ids:
            for metric in PAIR_METRICS:
                v = m.per_pair[i][metric]
                if v is not None:
                    lines.append(f"{metric}\t{name}\t{i}\t{_fmt(v)}")
            for s in m.sweeps[i]:
                for metric in SWEEP_METRICS:
                    lines.append(f"{metric}@{s.threshold:g}\t{name}\t{i}\t{_fmt(getattr(s, metric))}")
        for metric in PAIR_METRICS:
            mean = m.mean(metric)
            if mean is not None:
                lines.append(f"{metric}\t{name}\tmean\t{_fmt(mean)}")
        lines.append(f"frechet\t{name}\tall\t{_fmt(m.frechet)}")
    return "\n".join(lines) + "\n"


def write_report(report: ComparisonReport, out_dir, mismatch_pngs: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(report), encoding="utf-8")
    (out / "report.tsv").write_text(format_tsv(report), encoding="utf-8")
    if mismatch_pngs:
        maps = out / "mismatch"
        maps.mkdir(exist_ok=True)
        for name, m in report.models.items():
            for i, sweep in zip(report.pair_ids, m.sweeps):
                for s in sweep:
                    Image.fromarray(mismatch_rgb(s.labels)).save(maps / f"{name}_pair{i:04d}_th{s.threshold:g}.png")
    return out
