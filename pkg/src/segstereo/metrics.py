"""End-point error and D1 bad-pixel rate over Noc / All regions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _region(gt_valid, region, shape):
    m = np.ones(shape, dtype=bool) if gt_valid is None else np.asarray(gt_valid, bool)
    if region is not None:
        m = m & np.asarray(region, bool)
    if not m.any():
        raise ValueError("evaluation region is empty")
    return m


def epe(pred, gt, region=None, gt_valid=None) -> float:
    """Mean |pred - gt| over ``region`` intersected with the valid ground truth."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    m = _region(gt_valid, region, gt.shape)
    return float(np.abs(pred - gt)[m].mean())


def d1(pred, gt, region=None, gt_valid=None, abs_thresh: float = 3.0, rel_thresh: float = 0.05) -> float:
    """Percentage of pixels with error > abs_thresh px and > rel_thresh * gt."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    m = _region(gt_valid, region, gt.shape)
    err = np.abs(pred - gt)[m]
    bad = (err > abs_thresh) & (err > rel_thresh * np.abs(gt[m]))
    return 100.0 * float(bad.mean())


@dataclass
class EvalResult:
    epe_all: float
    d1_all: float
    count_all: int
    epe_noc: float | None = None
    d1_noc: float | None = None
    count_noc: int | None = None

    def as_dict(self) -> dict:
        out = {"epe_all": self.epe_all, "d1_all": self.d1_all, "count_all": self.count_all}
        if self.epe_noc is not None:
            out.update(epe_noc=self.epe_noc, d1_noc=self.d1_noc, count_noc=self.count_noc)
        return out

    def key_values(self) -> str:
        return "\n".join(f"{k}={_fmt(v)}" for k, v in self.as_dict().items())

    def table(self) -> str:
        rows = [("All", self.epe_all, self.d1_all, self.count_all)]
        if self.epe_noc is not None:
            rows.insert(0, ("Noc", self.epe_noc, self.d1_noc, self.count_noc))
        lines = [f"{'region':<8}{'EPE (px)':>10}{'D1 (%)':>10}{'pixels':>10}"]
        lines += [f"{r:<8}{e:>10.4f}{d:>10.2f}{c:>10d}" for r, e, d, c in rows]
        return "\n".join(lines)


def _fmt(v):
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def evaluate(preds, gts, valids=None, nocs=None, abs_thresh=3.0, rel_thresh=0.05) -> EvalResult:
    """Pool pixels over a list of maps, so every evaluated pixel weighs the same."""
    if len(preds) != len(gts) or not preds:
        raise ValueError("need matching, non-empty prediction and ground-truth lists")
    valids = valids if valids is not None else [None] * len(gts)
    err_all, gt_all, err_noc, gt_noc = [], [], [], []
    for i, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p, np.float64), np.asarray(g, np.float64)
        if p.shape != g.shape:
            raise ValueError(f"map {i}: prediction {p.shape} vs ground truth {g.shape}")
        v = np.ones(g.shape, bool) if valids[i] is None else np.asarray(valids[i], bool)
        e = np.abs(p - g)
        err_all.append(e[v])
        gt_all.append(g[v])
        if nocs is not None:
            n = v & np.asarray(nocs[i], bool)
            err_noc.append(e[n])
            gt_noc.append(g[n])

    def summarize(errs, gs):
        e, g = np.concatenate(errs), np.concatenate(gs)
        if e.size == 0:
            raise ValueError("evaluation region is empty")
        bad = (e > abs_thresh) & (e > rel_thresh * np.abs(g))
        return float(e.mean()), 100.0 * float(bad.mean()), int(e.size)

    ea, da, ca = summarize(err_all, gt_all)
    res = EvalResult(ea, da, ca)
    if nocs is not None:
        res.epe_noc, res.d1_noc, res.count_noc = summarize(err_noc, gt_noc)
    return res
