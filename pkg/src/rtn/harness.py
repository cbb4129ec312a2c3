"""Joint objective, training loop, ablation ladder, and diagnostics."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .config import ABLATION_LADDER, VARIANTS, ConfigError, TrainConfig
from .data import DomainBatch, DomainDataset, batches
from .losses import (count_sketch_matrix, entropy_grad, entropy_penalty, fuse,
                     fuse_backward, mmd2_with_grad)
from .network import (HeadOutputs, Network, backward, cross_entropy,
                      cross_entropy_grad, forward, softmax)
from .optim import SgdState, step as sgd_step
from .tensor import make_rng, reduce_stats

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite {term} ({value}) at step {step}")
        self.term, self.step, self.value = term, step, value


def build_network(cfg: TrainConfig, in_dim: int, n_classes: int, rng) -> Network:
    return Network(in_dim, cfg.feature_widths, cfg.bottleneck, n_classes, rng,
                   variant=cfg.flags(), new_layer_lr_mult=cfg.new_layer_lr_mult)


# --- objective --------------------------------------------------------------

def _adaptation(out: HeadOutputs, n_src: int, cfg: TrainConfig, multi: bool,
                bandwidths, sketch, need_grad: bool):
    by_name = {"fcb": out.fcb_feats, "fcc": out.f_T}
    names = list(cfg.adapt_layers)
    groups = [[name] for name in names] if multi else [names]
    total = 0.0
    used_b = []
    grads = {name: np.zeros_like(by_name[name]) for name in names}
    for gi, group in enumerate(groups):
        feats = [by_name[name] for name in group]
        z = fuse(feats)
        if sketch is not None and not multi:
            z = z @ sketch
        zs, zt = z[:n_src], z[n_src:]
        b = bandwidths[gi] if bandwidths is not None else None
        value, gs, gt, b = mmd2_with_grad(zs, zt, cfg.kernel(), b, cfg.estimator)
        used_b.append(b)
        total += value
        if need_grad:
            gz = np.vstack([gs, gt]) * cfg.effective_lam
            if sketch is not None and not multi:
                gz = gz @ sketch.T
            for name, g in zip(group, fuse_backward(feats, gz)):
                grads[name] += g
    upstream = {"fcb_feats": grads.get("fcb"), "f_T": grads.get("fcc")}
    return total, used_b, upstream


def _objective(net, batch: DomainBatch, cfg: TrainConfig, multi: bool, bandwidths=None,
               sketch=None, need_grad=True):
    n = len(batch.source_x)
    if len(batch.target_x) != n:
        raise ValueError(f"source batch {n} and target batch {len(batch.target_x)} differ")
    out = forward(net, np.vstack([batch.source_x, batch.target_x]))
    src_probs = out.f_s[:n]
    tgt_probs = out.f_t[n:]
    ce = cross_entropy(src_probs, batch.source_y)
    loss = ce
    parts = {"ce": ce, "mmd": 0.0, "entropy": 0.0, "bandwidths": []}
    upstream = {}
    if need_grad:
        g = np.zeros_like(out.f_s)
        g[:n] = cross_entropy_grad(src_probs, batch.source_y)
        upstream["f_s"] = g
    gamma = cfg.effective_gamma
    if gamma > 0:
        ent = entropy_penalty(tgt_probs)
        parts["entropy"] = ent
        loss = loss + gamma * ent
        if need_grad:
            g = np.zeros_like(out.f_t)
            g[n:] = gamma * entropy_grad(tgt_probs)
            upstream["f_t"] = g
    lam = cfg.effective_lam
    if lam > 0:
        value, used_b, adapt_up = _adaptation(out, n, cfg, multi, bandwidths, sketch, need_grad)
        parts["mmd"] = value
        parts["bandwidths"] = used_b
        loss = loss + lam * value
        for key, g in adapt_up.items():
            if g is not None:
                upstream[key] = upstream.get(key, 0.0) + g
    if need_grad:
        backward(net, upstream)
    return loss, parts


def objective(net: Network, batch: DomainBatch, cfg: TrainConfig, bandwidths=None,
              sketch=None, need_grad=True):
    """Source CE + γ·target entropy + λ·MMD², gated by ``cfg.variant``.

    With ``need_grad`` the parameter gradients are accumulated on ``net``.
    ``bandwidths`` pins the kernel bandwidth(s) instead of applying the
    configured policy. Returns ``(loss, parts)``.
    """
    return _objective(net, batch, cfg, cfg.variant == "multi_mmd", bandwidths, sketch, need_grad)


def objective_multi_mmd(net: Network, batch: DomainBatch, cfg: TrainConfig, bandwidths=None,
                        need_grad=True):
    """Baseline: one MMD penalty per adapted layer instead of a fused one."""
    return _objective(net, batch, cfg, True, bandwidths, None, need_grad)


# --- metrics ----------------------------------------------------------------

@dataclass
class MetricsReport:
    eval_steps: list[int] = field(default_factory=list)
    target_acc: list[float] = field(default_factory=list)
    source_acc: list[float] = field(default_factory=list)
    loss_ce: list[float] = field(default_factory=list)
    loss_mmd: list[float] = field(default_factory=list)
    loss_entropy: list[float] = field(default_factory=list)
    layer_responses: dict = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    wall_clock: float = 0.0

    @property
    def final_target_acc(self) -> float:
        return self.target_acc[-1]

    def to_json(self, include_timing: bool = False) -> str:
        """Serialized report; timing is excluded by default so output is reproducible."""
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def confusion_matrix(y_true, y_pred, c: int) -> np.ndarray:
    m = np.zeros((c, c), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m


def accuracy_from_confusion(m: np.ndarray) -> float:
    return float(np.trace(m) / m.sum())


def _response_stats(out: HeadOutputs) -> dict:
    stats = {}
    for key in ("f_T", "delta_f", "f_S"):
        mean, std = reduce_stats(np.abs(getattr(out, key)))
        stats[key] = {"mean": mean, "std": std}
    return stats


def _evaluate(net: Network, ds: DomainDataset):
    tgt = forward(net, ds.target_x)
    t_pred = np.argmax(tgt.f_t, axis=1)
    src = forward(net, ds.source_x)
    s_acc = float(np.mean(np.argmax(src.f_s, axis=1) == ds.source_y))
    conf = confusion_matrix(ds.eval_labels(), t_pred, ds.c)
    return accuracy_from_confusion(conf), s_acc, conf, tgt


# --- training ---------------------------------------------------------------

def train(ds: DomainDataset, cfg: TrainConfig) -> tuple[Network, MetricsReport]:
    """Run ``cfg.total_steps`` SGD steps; deterministic for a given seed.

    Target labels are used only for periodic evaluation; batches come from
    the training view, which excludes them.
    """
    cfg.validate()
    start = time.perf_counter()
    rng = make_rng(cfg.seed)
    net = build_network(cfg, ds.d, ds.c, rng)
    sketch = None
    if cfg.sketch_dim:
        in_dim = int(np.prod([cfg.bottleneck if n == "fcb" else ds.c for n in cfg.adapt_layers]))
        sketch = count_sketch_matrix(in_dim, cfg.sketch_dim, rng)
    state = SgdState(cfg.total_steps, cfg.lr0, cfg.alpha, cfg.beta, cfg.momentum,
                     cfg.weight_decay)
    report = MetricsReport(config=cfg.to_dict(), seed=cfg.seed)

    def record_eval(at):
        t_acc, s_acc, conf, tgt = _evaluate(net, ds)
        report.eval_steps.append(at)
        report.target_acc.append(t_acc)
        report.source_acc.append(s_acc)
        return conf, tgt

    stream = batches(ds.training_view(), cfg.batch_size, rng) if cfg.total_steps else iter(())
    for it in range(cfg.total_steps):
        if it % cfg.eval_interval == 0:
            record_eval(it)
        loss, parts = objective(net, next(stream), cfg, sketch=sketch)
        for term, key in (("source cross-entropy", "ce"), ("MMD", "mmd"), ("entropy", "entropy")):
            if not math.isfinite(parts[key]):
                raise NumericalError(term, it, parts[key])
        if not math.isfinite(loss):
            raise NumericalError("total loss", it, loss)
        report.loss_ce.append(parts["ce"])
        report.loss_mmd.append(parts["mmd"])
        report.loss_entropy.append(parts["entropy"])
        sgd_step(state, net)
    if not report.eval_steps or report.eval_steps[-1] != cfg.total_steps:
        conf, tgt = record_eval(cfg.total_steps)
    else:
        _, _, conf, tgt = _evaluate(net, ds)
    report.confusion = conf.tolist()
    report.layer_responses = _response_stats(tgt)
    report.wall_clock = time.perf_counter() - start
    return net, report


# --- ablation ---------------------------------------------------------------

@dataclass
class AblationTable:
    variants: list[str]
    seeds: list[int]
    cells: dict  # (variant, seed) -> final target accuracy
    reports: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict[str, tuple[float, float]]:
        """Per-variant (mean, population std) of final target accuracy."""
        out = {}
        for v in self.variants:
            accs = np.array([self.cells[(v, s)] for s in self.seeds])
            out[v] = (float(accs.mean()), float(accs.std()))
        return out

    def rows(self):
        return [(v, s, self.cells[(v, s)]) for v in self.variants for s in self.seeds]

    def to_markdown(self) -> str:
        lines = ["| variant | " + " | ".join(f"seed {s}" for s in self.seeds) + " | mean ± std |",
                 "|---" * (len(self.seeds) + 2) + "|"]
        summ = self.summary()
        for v in self.variants:
            cells = " | ".join(f"{100 * self.cells[(v, s)]:.1f}" for s in self.seeds)
            mean, std = summ[v]
            lines.append(f"| {v} | {cells} | {100 * mean:.1f} ± {100 * std:.1f} |")
        return "\n".join(lines) + "\n"


def ablate(ds: DomainDataset, base_cfg: TrainConfig, seeds, variants=VARIANTS,
           workers: int = 1) -> AblationTable:
    """Train every variant with every seed on the same dataset."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("ablate needs at least one seed")
    jobs = [(v, s) for v in variants for s in seeds]

    def run(job):
        v, s = job
        return train(ds, base_cfg.replace(variant=v, seed=s))[1]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    reports = dict(zip(jobs, results))
    cells = {job: r.final_target_acc for job, r in reports.items()}
    return AblationTable(list(variants), seeds, cells, reports)


# --- diagnostics ------------------------------------------------------------

def layer_response_report(net: Network, target_x) -> dict:
    """Mean and std of |f_T|, |Δf|, |f_S| over the target set."""
    if not net.variant.use_residual:
        raise ConfigError("layer responses need a network with the residual block enabled")
    return _response_stats(forward(net, np.asarray(target_x, dtype=np.float64)))


def fit_softmax_regression(x, y, c: int, l2: float = 1e-2) -> np.ndarray:
    """L2-regularized multinomial logistic regression; returns ``[d+1 x c]`` (bias last row).

    The objective is strictly convex, so L-BFGS lands on the unique optimum.
    """
    xb = np.hstack([x, np.ones((len(x), 1))])
    n, d = xb.shape
    onehot = np.eye(c)[y]

    def fg(w):
        w = w.reshape(d, c)
        p = softmax(xb @ w)
        loss = -np.mean(np.sum(onehot * np.log(np.maximum(p, 1e-300)), axis=1)) \
            + 0.5 * l2 * np.sum(w[:-1] ** 2)
        grad = xb.T @ (p - onehot) / n
        grad[:-1] += l2 * w[:-1]
        return loss, grad.ravel()

    res = minimize(fg, np.zeros(d * c), jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000, "gtol": 1e-10})
    return res.x.reshape(d, c)


def _cosines(wa, wb):
    num = np.sum(wa * wb, axis=0)
    den = np.linalg.norm(wa, axis=0) * np.linalg.norm(wb, axis=0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)


def classifier_shift_report(ds: DomainDataset, cfg: TrainConfig | None = None) -> dict:
    """Compare softmax-regression heads fit on source vs target labels.

    Features are the fcb activations of a source-only network trained with
    ``cfg``. The null baseline is the distance between two heads fit on two
    seeded bootstrap resamples of the source domain.
    """
    if not ds.has_eval:
        raise ConfigError("classifier shift diagnostic needs target evaluation labels")
    cfg = (cfg or TrainConfig()).replace(variant="source_only")
    net, _ = train(ds, cfg)
    fs = forward(net, ds.source_x).fcb_feats
    ft = forward(net, ds.target_x).fcb_feats
    w_s = fit_softmax_regression(fs, ds.source_y, ds.c)
    w_t = fit_softmax_regression(ft, ds.eval_labels(), ds.c)
    rng = make_rng(cfg.seed)
    boot = [fit_softmax_regression(fs[idx], ds.source_y[idx], ds.c)
            for idx in (rng.integers(0, len(fs), len(fs)) for _ in range(2))]
    frob = float(np.linalg.norm(w_s - w_t))
    null = float(np.linalg.norm(boot[0] - boot[1]))
    return {
        "cosine_per_class": _cosines(w_s, w_t).tolist(),
        "frobenius_diff": frob,
        "baseline_frobenius_diff": null,
        "ratio_to_baseline": frob / null if null > 0 else math.inf,
        "source_weights": w_s.tolist(),
        "target_weights": w_t.tolist(),
    }


# --- gradient check ---------------------------------------------------------

@dataclass
class GradcheckResult:
    errors: dict  # (variant, parameter name) -> max relative error
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def lines(self) -> list[str]:
        return [f"{'ok  ' if e <= self.tol else 'FAIL'} {v:12s} {name:14s} {e:.3e}"
                for (v, name), e in self.errors.items()]


def tiny_config(seed: int = 0, **changes) -> TrainConfig:
    return TrainConfig(feature_widths=(6,), bottleneck=4, batch_size=4, seed=seed,
                       **changes)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from dominating."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(cfg: TrainConfig | None = None, variants=VARIANTS, tol: float = 1e-5,
              in_dim: int = 5, n_classes: int = 3, objective_fn=None) -> GradcheckResult:
    """Central finite differences vs. analytic gradients for every parameter.

    A random tiny network with non-zero classifier and residual weights is built from
    ``cfg.seed``; bandwidths are pinned at their value at the base point.
    """
    cfg = cfg or tiny_config()
    objective_fn = objective_fn or objective
    errors = {}
    for variant in variants:
        vcfg = cfg.replace(variant=variant)
        rng = make_rng(cfg.seed)
        net = build_network(vcfg, in_dim, n_classes, rng)
        for layer in (net.fcc, net.res1, net.res2):
            layer.weight[:] = rng.normal(0, 0.5, layer.weight.shape)
            layer.bias[:] = rng.normal(0, 0.5, layer.bias.shape)
        for layer in net.layers():
            layer.bias[:] = rng.normal(0, 0.1, layer.bias.shape)
        n = vcfg.batch_size
        batch = DomainBatch(rng.normal(size=(n, in_dim)), rng.integers(0, n_classes, n),
                            rng.normal(0.5, 1.5, size=(n, in_dim)), np.arange(n), np.arange(n))
        net.zero_grad()
        _, parts = objective_fn(net, batch, vcfg)
        bws = parts["bandwidths"] or None
        for name, value, grad, _ in net.parameters():
            analytic = grad.copy()
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                orig = value[idx]
                h = 1e-5 * max(1.0, abs(orig))
                value[idx] = orig + h
                up = objective(net, batch, vcfg, bandwidths=bws, need_grad=False)[0]
                value[idx] = orig - h
                down = objective(net, batch, vcfg, bandwidths=bws, need_grad=False)[0]
                value[idx] = orig
                numeric[idx] = (up - down) / (2 * h)
            errors[(variant, name)] = float(relative_error(analytic, numeric).max())
    return GradcheckResult(errors, tol)
